//! Physics-informed training of one voxel network.
//!
//! The loss is `w_bloch · L_bloch + w_data · L_data` where `L_bloch` averages
//! the ODE residual `d𝒩/dt + 𝒩/T2` over the collocation grid and `L_data`
//! averages the misfit to the measured echoes. Residuals enter either as
//! absolute values (default) or squared. `T2 = softplus(rho)` is trained
//! jointly with the network weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::lsq::{fit_log_linear, sum_squares, LsqOptions};
use crate::net::{init_params, MlpParams, BATCH};
use crate::optim::Adam;
use crate::signal::{ode_residual, EchoSeries};
use crate::trial::TrialFunction;

/// `ln(1 + e^x)`, evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`], the logistic function.
pub fn softplus_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inv requires y > 0");
    y + (-(-y).exp_m1()).ln()
}

/// `K` evenly spaced times covering `[0, t_max]` (ms).
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationGrid {
    points: Vec<f64>,
}

impl CollocationGrid {
    pub fn uniform(k: usize, t_max: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidConfig(format!(
                "collocation grid needs K >= 2, got {k}"
            )));
        }
        if !(t_max.is_finite() && t_max > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "t_max must be > 0, got {t_max}"
            )));
        }
        let step = t_max / (k - 1) as f64;
        let mut points: Vec<f64> = (0..k).map(|i| i as f64 * step).collect();
        points[k - 1] = t_max;
        Ok(Self { points })
    }

    /// `K` evenly spaced times covering `[start, end]` (ms).
    pub fn spanning(k: usize, start: f64, end: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidConfig(format!(
                "collocation grid needs K >= 2, got {k}"
            )));
        }
        if !(start.is_finite() && end.is_finite() && start >= 0.0 && end > start) {
            return Err(Error::InvalidConfig(format!(
                "invalid collocation interval [{start}, {end}]"
            )));
        }
        let step = (end - start) / (k - 1) as f64;
        let mut points: Vec<f64> = (0..k).map(|i| start + i as f64 * step).collect();
        points[k - 1] = end;
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn t_max(&self) -> f64 {
        *self.points.last().unwrap()
    }
}

/// How a scalar residual enters a loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualNorm {
    /// `|r|`, the Euclidean norm of a scalar.
    #[default]
    Absolute,
    /// `r²`, the usual mean-squared-error form.
    Squared,
}

impl ResidualNorm {
    #[inline]
    fn apply(self, r: f64) -> f64 {
        match self {
            Self::Absolute => r.abs(),
            Self::Squared => r * r,
        }
    }

    /// (Sub)derivative; 0 at an exact zero of `|r|`.
    #[inline]
    fn derivative(self, r: f64) -> f64 {
        match self {
            Self::Absolute => {
                if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Self::Squared => 2.0 * r,
        }
    }
}

/// Time coordinate in which the ODE residual is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualTime {
    /// The network's own input coordinate `t / t_max`; the residual is
    /// `t_max · (d𝒩/dt + 𝒩/T2)` and does not depend on the time unit.
    #[default]
    Normalized,
    /// Physical milliseconds: `d𝒩/dt + 𝒩/T2` in 1/ms.
    Milliseconds,
}

/// How ODE and data residuals are turned into losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ResidualForm {
    pub norm: ResidualNorm,
    pub time: ResidualTime,
}

impl ResidualForm {
    pub const fn new(norm: ResidualNorm, time: ResidualTime) -> Self {
        Self { norm, time }
    }

    /// Factor applied to the millisecond ODE residual.
    #[inline]
    fn time_factor(&self, t_max: f64) -> f64 {
        match self.time {
            ResidualTime::Normalized => t_max,
            ResidualTime::Milliseconds => 1.0,
        }
    }
}

/// Term weights of the total loss and the residual form they apply to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_bloch: f64,
    pub w_data: f64,
    pub norm: ResidualNorm,
    pub time: ResidualTime,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_bloch: 0.01,
            w_data: 1.0,
            norm: ResidualNorm::Squared,
            time: ResidualTime::Normalized,
        }
    }
}

impl LossWeights {
    /// Weights with the default residual form.
    pub fn new(w_bloch: f64, w_data: f64) -> Result<Self> {
        let w = Self {
            w_bloch,
            w_data,
            ..Default::default()
        };
        w.validate()?;
        Ok(w)
    }

    pub fn with_form(self, form: ResidualForm) -> Self {
        Self {
            norm: form.norm,
            time: form.time,
            ..self
        }
    }

    pub fn form(&self) -> ResidualForm {
        ResidualForm::new(self.norm, self.time)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.w_bloch) || !ok(self.w_data) {
            return Err(Error::InvalidConfig(
                "loss weights must be finite and >= 0".into(),
            ));
        }
        if self.w_bloch == 0.0 && self.w_data == 0.0 {
            return Err(Error::InvalidConfig(
                "loss weights must not both be zero".into(),
            ));
        }
        Ok(())
    }
}

/// Optimizer and initialization settings for [`fit_voxel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Hidden layer width `C`.
    pub width: usize,
    pub max_iters: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stop when the relative change of the loss over a
    /// [`CONVERGENCE_WINDOW`]-iteration window drops below this.
    pub tol: f64,
    /// Initial T2 in ms. `None` uses a clamped log-linear estimate.
    pub t2_init: Option<f64>,
    /// Iterations of the second stage, which holds T2 fixed and extends the
    /// physics residual down to `t = 0`. Zero skips the stage.
    pub extension_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            width: 8,
            max_iters: 5000,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            tol: 1e-8,
            t2_init: None,
            extension_iters: 2000,
            seed: 0,
        }
    }
}

pub const CONVERGENCE_WINDOW: usize = 100;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.width == 0 {
            return bad("width must be >= 1".into());
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return bad(format!("tol must be > 0, got {}", self.tol));
        }
        if let Some(t2) = self.t2_init {
            if !(t2.is_finite() && t2 > 0.0) {
                return bad(format!("t2_init must be > 0, got {t2}"));
            }
        }
        Ok(())
    }
}

/// Current T2 (ms) encoded by the parameter set.
pub fn t2_of<T: TrialFunction>(p: &T) -> f64 {
    softplus(p.params()[p.rho_index()])
}

/// Mean ODE residual over the collocation grid.
pub fn loss_bloch<T: TrialFunction>(p: &T, grid: &CollocationGrid, form: ResidualForm) -> f64 {
    let t2 = t2_of(p);
    let factor = form.time_factor(p.t_max());
    let mut ws = p.workspace();
    let (mut v, mut dv) = ([0.0; BATCH], [0.0; BATCH]);
    let mut acc = 0.0;
    for chunk in grid.points().chunks(BATCH) {
        let n = chunk.len();
        p.eval_batch(chunk, &mut ws, &mut v[..n], &mut dv[..n]);
        for k in 0..n {
            acc += form.norm.apply(factor * ode_residual(v[k], dv[k], t2));
        }
    }
    acc / grid.len() as f64
}

/// Mean misfit between the trial solution and the measured echoes.
pub fn loss_data<T: TrialFunction>(p: &T, series: &EchoSeries, norm: ResidualNorm) -> f64 {
    let mut ws = p.workspace();
    let (mut v, mut dv) = ([0.0; BATCH], [0.0; BATCH]);
    let mut acc = 0.0;
    for (times, signals) in series
        .times()
        .chunks(BATCH)
        .zip(series.signals().chunks(BATCH))
    {
        let n = times.len();
        p.eval_batch(times, &mut ws, &mut v[..n], &mut dv[..n]);
        for k in 0..n {
            acc += norm.apply(signals[k] - v[k]);
        }
    }
    acc / series.len() as f64
}

pub fn loss_total<T: TrialFunction>(
    p: &T,
    grid: &CollocationGrid,
    series: &EchoSeries,
    w: &LossWeights,
) -> f64 {
    w.w_bloch * loss_bloch(p, grid, w.form()) + w.w_data * loss_data(p, series, w.norm)
}

/// Loss components evaluated alongside a gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub bloch: f64,
    pub data: f64,
    pub total: f64,
}

/// Gradient of [`loss_total`] with respect to every flat parameter,
/// `rho` included.
pub fn grad_total<T: TrialFunction>(
    p: &T,
    grid: &CollocationGrid,
    series: &EchoSeries,
    w: &LossWeights,
) -> (LossParts, Vec<f64>) {
    let mut g = vec![0.0; p.params().len()];
    let mut ws = p.workspace();
    let parts = grad_total_into(p, grid, series, w, &mut g, &mut ws);
    (parts, g)
}

/// [`grad_total`] writing into a flat buffer (overwritten, not accumulated).
pub fn grad_total_into<T: TrialFunction>(
    p: &T,
    grid: &CollocationGrid,
    series: &EchoSeries,
    w: &LossWeights,
    grad: &mut [f64],
    ws: &mut T::Workspace,
) -> LossParts {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let rho = p.params()[p.rho_index()];
    let t2 = softplus(rho);
    let inv_t2 = 1.0 / t2;
    let factor = w.form().time_factor(p.t_max());

    let (mut v, mut dv) = ([0.0; BATCH], [0.0; BATCH]);
    let (mut ca, mut cb) = ([0.0; BATCH], [0.0; BATCH]);

    let mut bloch = 0.0;
    let mut d_t2 = 0.0;
    let scale = w.w_bloch / grid.len() as f64;
    for chunk in grid.points().chunks(BATCH) {
        let n = chunk.len();
        p.eval_batch(chunk, ws, &mut v[..n], &mut dv[..n]);
        for k in 0..n {
            let r = factor * ode_residual(v[k], dv[k], t2);
            bloch += w.norm.apply(r);
            // dL/d(ms residual)
            let dr = scale * factor * w.norm.derivative(r);
            ca[k] = dr * inv_t2;
            cb[k] = dr;
            d_t2 -= dr * v[k] * inv_t2 * inv_t2;
        }
        p.accumulate_batch(chunk, &ca[..n], &cb[..n], ws, grad);
    }
    bloch /= grid.len() as f64;

    let mut data = 0.0;
    let scale = w.w_data / series.len() as f64;
    cb = [0.0; BATCH];
    for (times, signals) in series
        .times()
        .chunks(BATCH)
        .zip(series.signals().chunks(BATCH))
    {
        let n = times.len();
        p.eval_batch(times, ws, &mut v[..n], &mut dv[..n]);
        for k in 0..n {
            let e = signals[k] - v[k];
            data += w.norm.apply(e);
            ca[k] = -scale * w.norm.derivative(e);
        }
        p.accumulate_batch(times, &ca[..n], &cb[..n], ws, grad);
    }
    data /= series.len() as f64;

    grad[p.rho_index()] = d_t2 * softplus_grad(rho);
    LossParts {
        bloch,
        data,
        total: w.w_bloch * bloch + w.w_data * data,
    }
}

/// Outcome of [`fit_voxel`]: the estimates plus the trained network.
///
/// The network models the signal divided by `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct PinnFit {
    pub result: FitResult,
    pub params: MlpParams,
    pub scale: f64,
}

/// Default T2 initialization: the log-linear estimate clamped to
/// `[0.1 · min Δt, 10 · t_max]`, or `t_max / 3` if that fit fails.
pub fn default_t2_init(series: &EchoSeries) -> f64 {
    let t_max = series.t_max();
    let min_dt = series
        .times()
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    match fit_log_linear(series, &LsqOptions::default()) {
        Ok(f) if f.t2_hat.is_finite() => f.t2_hat.clamp(0.1 * min_dt, 10.0 * t_max),
        _ => t_max / 3.0,
    }
}

/// Factor on the initial first-layer weights. A decay with T2 much shorter
/// than `t_max` is steep in the scaled input `t / t_max`, and growing unit
/// weights to that steepness one Adam step at a time dominates training;
/// starting them at about half the expected rate avoids that.
pub fn first_layer_gain(t_max: f64, t2_init: f64) -> f64 {
    (t_max / (2.0 * t2_init)).max(1.0)
}

/// Training phase reported to observers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Network and T2 trained jointly on the supplied grid.
    Joint,
    /// T2 frozen; the residual grid extended to start at `t = 0`.
    Extension,
}

/// Trains a fresh network plus T2 on one voxel's echoes.
///
/// The joint stage runs on `grid`. If `cfg.extension_iters > 0` and the
/// grid does not already start at zero, a second stage keeps T2 fixed and
/// trains the network on a grid of the same size covering `[0, end]`, so
/// that `𝒩(0)` obeys the decay law.
pub fn fit_voxel(
    series: &EchoSeries,
    grid: &CollocationGrid,
    w: &LossWeights,
    cfg: &TrainConfig,
) -> Result<PinnFit> {
    fit_voxel_observed(series, grid, w, cfg, |_, _, _| {})
}

/// [`fit_voxel`] with a callback receiving `(stage, iteration, loss parts)`
/// before each parameter update.
pub fn fit_voxel_observed<F>(
    series: &EchoSeries,
    grid: &CollocationGrid,
    w: &LossWeights,
    cfg: &TrainConfig,
    mut observe: F,
) -> Result<PinnFit>
where
    F: FnMut(Stage, usize, &LossParts),
{
    cfg.validate()?;
    w.validate()?;
    let scale = series.max_signal();
    if scale.is_nan() || scale <= 0.0 {
        return Err(Error::Degenerate("all echo signals are zero".into()));
    }
    let normalized = series.scaled(1.0 / scale);
    let t2_init = cfg.t2_init.unwrap_or_else(|| default_t2_init(series));

    let mut params = init_params(cfg.width, cfg.seed);
    params.set_t_max(series.t_max());
    params.set_rho(softplus_inv(t2_init));
    let gain = first_layer_gain(series.t_max(), t2_init);
    for w in params.w1_mut() {
        *w *= gain;
    }

    let joint = run_stage(
        &mut params,
        grid,
        &normalized,
        w,
        cfg,
        cfg.max_iters,
        false,
        |i, l| observe(Stage::Joint, i, l),
    );
    let mut iters = joint.iters;
    let mut converged = joint.converged;
    let mut diverged = joint.diverged;

    let extend = cfg.extension_iters > 0 && grid.points()[0] > 0.0 && !diverged;
    let final_grid = if extend {
        let full = CollocationGrid::spanning(grid.len(), 0.0, grid.t_max())?;
        let ext = run_stage(
            &mut params,
            &full,
            &normalized,
            w,
            cfg,
            cfg.extension_iters,
            true,
            |i, l| observe(Stage::Extension, i, l),
        );
        iters += ext.iters;
        diverged |= ext.diverged;
        converged &= !ext.diverged;
        full
    } else {
        grid.clone()
    };

    let bloch = loss_bloch(&params, &final_grid, w.form());
    let data = loss_data(&params, &normalized, w.norm);
    let t2_hat = t2_of(&params);
    let m0_hat = params.forward(0.0).value * scale;
    let finite = bloch.is_finite() && data.is_finite() && m0_hat.is_finite();
    if diverged || !finite {
        log::warn!("voxel fit diverged after {iters} iterations");
    }
    let result = FitResult {
        m0_hat,
        t2_hat,
        loss_bloch: bloch,
        loss_data: data,
        residual_ss: sum_squares(series, m0_hat, t2_hat),
        iters,
        converged: converged && finite && !diverged,
    };
    Ok(PinnFit {
        result,
        params,
        scale,
    })
}

struct StageOutcome {
    iters: usize,
    converged: bool,
    diverged: bool,
}

#[allow(clippy::too_many_arguments)]
fn run_stage<F>(
    params: &mut MlpParams,
    grid: &CollocationGrid,
    series: &EchoSeries,
    w: &LossWeights,
    cfg: &TrainConfig,
    max_iters: usize,
    freeze_t2: bool,
    mut observe: F,
) -> StageOutcome
where
    F: FnMut(usize, &LossParts),
{
    let rho_idx = params.rho_index();
    let mut opt = Adam::new(
        params.as_flat().len(),
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.epsilon,
    );
    let mut grad = vec![0.0; params.as_flat().len()];
    let mut ws = params.workspace();
    let mut window_start = f64::NAN;
    let mut out = StageOutcome {
        iters: 0,
        converged: false,
        diverged: false,
    };
    // constant-rate Adam can end on an oscillation; the stage returns the
    // lowest-loss iterate it visited
    let mut best_total = f64::INFINITY;
    let mut best = params.as_flat().to_vec();

    while out.iters < max_iters {
        let parts = grad_total_into(params, grid, series, w, &mut grad, &mut ws);
        if !parts.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            out.diverged = true;
            break;
        }
        observe(out.iters, &parts);
        if parts.total < best_total {
            best_total = parts.total;
            best.copy_from_slice(params.as_flat());
        }
        if out.iters.is_multiple_of(CONVERGENCE_WINDOW) {
            if out.iters > 0 {
                let change =
                    (window_start - parts.total).abs() / window_start.abs().max(f64::MIN_POSITIVE);
                if change < cfg.tol {
                    out.converged = true;
                    break;
                }
            }
            window_start = parts.total;
        }
        if freeze_t2 {
            grad[rho_idx] = 0.0;
        }
        opt.update(params.as_flat_mut(), &grad);
        out.iters += 1;
    }
    if !out.diverged && !out.converged {
        let last = loss_total(params, grid, series, w);
        if last.is_finite() && last < best_total {
            return out;
        }
    }
    if best_total.is_finite() {
        params.as_flat_mut().copy_from_slice(&best);
    }
    out
}
