//! Trial solutions the physics and data losses can be evaluated on.

use crate::net::{BackwardScratch, BatchRecord, BatchScratch, EvalRecord, MlpParams, BATCH};
use crate::trainer::softplus_inv;

/// A differentiable surrogate `𝒩(t)` for the decay curve whose flat
/// parameter vector also carries the T2 reparametrization `rho`.
pub trait TrialFunction {
    type Workspace;

    fn workspace(&self) -> Self::Workspace;

    fn params(&self) -> &[f64];

    fn rho_index(&self) -> usize;

    /// Scale of the surrogate's time input, in ms.
    fn t_max(&self) -> f64;

    /// `(𝒩(t), d𝒩/dt)` at `t` ms. The evaluation is kept in `ws` for the
    /// next [`accumulate`](Self::accumulate).
    fn eval(&self, t: f64, ws: &mut Self::Workspace) -> (f64, f64);

    /// Adds `a · ∂𝒩/∂θ + b · ∂(d𝒩/dt)/∂θ` at the last evaluated time to
    /// `grad`. The `rho` slot is left untouched.
    fn accumulate(&self, a: f64, b: f64, ws: &mut Self::Workspace, grad: &mut [f64]);

    /// Values and time derivatives at up to [`BATCH`] times.
    fn eval_batch(
        &self,
        times: &[f64],
        ws: &mut Self::Workspace,
        values: &mut [f64],
        dvalues: &mut [f64],
    ) {
        for ((&t, v), dv) in times.iter().zip(values.iter_mut()).zip(dvalues.iter_mut()) {
            (*v, *dv) = self.eval(t, ws);
        }
    }

    /// [`accumulate`](Self::accumulate) summed over a batch; must follow an
    /// [`eval_batch`](Self::eval_batch) on the same `times`.
    fn accumulate_batch(
        &self,
        times: &[f64],
        a: &[f64],
        b: &[f64],
        ws: &mut Self::Workspace,
        grad: &mut [f64],
    ) {
        for ((&t, &ak), &bk) in times.iter().zip(a).zip(b) {
            self.eval(t, ws);
            self.accumulate(ak, bk, ws, grad);
        }
    }
}

/// Reusable buffers of an [`MlpParams`] evaluation.
#[derive(Debug, Clone)]
pub struct MlpWorkspace {
    rec: EvalRecord,
    scratch: BackwardScratch,
    batch: BatchRecord,
    batch_scratch: BatchScratch,
}

impl MlpWorkspace {
    pub fn new(width: usize) -> Self {
        Self {
            rec: EvalRecord::new(width),
            scratch: BackwardScratch::new(width),
            batch: BatchRecord::new(width),
            batch_scratch: BatchScratch::new(width),
        }
    }
}

impl TrialFunction for MlpParams {
    type Workspace = MlpWorkspace;

    fn workspace(&self) -> MlpWorkspace {
        MlpWorkspace::new(self.width())
    }

    fn params(&self) -> &[f64] {
        self.as_flat()
    }

    fn rho_index(&self) -> usize {
        MlpParams::rho_index(self)
    }

    fn t_max(&self) -> f64 {
        MlpParams::t_max(self)
    }

    #[inline]
    fn eval(&self, t: f64, ws: &mut MlpWorkspace) -> (f64, f64) {
        self.forward_into(t, &mut ws.rec);
        (ws.rec.value, ws.rec.dvalue_dt)
    }

    #[inline]
    fn accumulate(&self, a: f64, b: f64, ws: &mut MlpWorkspace, grad: &mut [f64]) {
        self.accumulate_grad(&ws.rec, a, b, grad, &mut ws.scratch);
    }

    fn eval_batch(
        &self,
        times: &[f64],
        ws: &mut MlpWorkspace,
        values: &mut [f64],
        dvalues: &mut [f64],
    ) {
        debug_assert!(times.len() <= BATCH);
        self.forward_batch(times, &mut ws.batch);
        values.copy_from_slice(ws.batch.values());
        dvalues.copy_from_slice(ws.batch.dvalues());
    }

    fn accumulate_batch(
        &self,
        _times: &[f64],
        a: &[f64],
        b: &[f64],
        ws: &mut MlpWorkspace,
        grad: &mut [f64],
    ) {
        self.accumulate_grad_batch(&ws.batch, a, b, grad, &mut ws.batch_scratch);
    }
}

/// The analytic curve `m0 · exp(-t / tau)` with flat parameters
/// `[m0, tau, rho]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactDecay {
    params: [f64; 3],
    t_max: f64,
}

impl ExactDecay {
    /// A curve whose loss T2 equals its own decay constant.
    pub fn matched(m0: f64, t2: f64, t_max: f64) -> Self {
        Self::new(m0, t2, softplus_inv(t2), t_max)
    }

    pub fn new(m0: f64, tau: f64, rho: f64, t_max: f64) -> Self {
        Self {
            params: [m0, tau, rho],
            t_max,
        }
    }

    pub fn m0(&self) -> f64 {
        self.params[0]
    }

    pub fn tau(&self) -> f64 {
        self.params[1]
    }

    pub fn rho(&self) -> f64 {
        self.params[2]
    }

    pub fn params_mut(&mut self) -> &mut [f64; 3] {
        &mut self.params
    }
}

impl TrialFunction for ExactDecay {
    type Workspace = f64;

    fn workspace(&self) -> f64 {
        0.0
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn rho_index(&self) -> usize {
        2
    }

    fn t_max(&self) -> f64 {
        self.t_max
    }

    fn eval(&self, t: f64, ws: &mut f64) -> (f64, f64) {
        *ws = t;
        let v = self.m0() * (-t / self.tau()).exp();
        (v, -v / self.tau())
    }

    fn accumulate(&self, a: f64, b: f64, ws: &mut f64, grad: &mut [f64]) {
        let (t, m0, tau) = (*ws, self.m0(), self.tau());
        let e = (-t / tau).exp();
        let v = m0 * e;
        let dv_dtau = v * t / (tau * tau);
        // d/dt = -v / tau
        let ddt_dm0 = -e / tau;
        let ddt_dtau = -dv_dtau / tau + v / (tau * tau);
        grad[0] += a * e + b * ddt_dm0;
        grad[1] += a * dv_dtau + b * ddt_dtau;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_decay_values() {
        let d = ExactDecay::matched(2.0, 20.0, 90.0);
        let mut ws = d.workspace();
        let (v, dv) = d.eval(20.0, &mut ws);
        assert!((v - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((dv + v / 20.0).abs() < 1e-15);
    }

    #[test]
    fn exact_decay_partials_match_differences() {
        let d = ExactDecay::new(1.3, 17.0, 0.4, 90.0);
        let t = 11.0;
        for (a, b) in [(1.0, 0.0), (0.0, 1.0)] {
            let mut g = [0.0; 3];
            let mut ws = d.workspace();
            d.eval(t, &mut ws);
            d.accumulate(a, b, &mut ws, &mut g);
            for (j, &gj) in g.iter().enumerate().take(2) {
                let h = 1e-6 * d.params[j];
                let f = |s: f64| {
                    let mut q = d.clone();
                    q.params[j] += s;
                    let (v, dv) = q.eval(t, &mut 0.0);
                    a * v + b * dv
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                assert!(
                    (fd - gj).abs() <= 1e-7 * fd.abs().max(1e-3),
                    "param {j}: {fd} vs {gj}"
                );
            }
            assert_eq!(g[2], 0.0);
        }
    }
}
