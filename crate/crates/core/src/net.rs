//! The 1 → C → C → 1 tanh network with exact input and parameter derivatives.
//!
//! The network maps a time `t` (ms) to a signal value. The input is scaled
//! by `1 / t_max` before the first layer; [`EvalRecord::dvalue_dt`] is
//! nevertheless the derivative with respect to physical milliseconds.
//!
//! Parameter gradients of both the output and its time derivative are
//! obtained by reverse accumulation through the forward pass and through
//! the tangent (forward-mode) pass that produces `d/dt`.
//!
//! Flat parameter layout, shared by the optimizer and the on-disk format:
//! `w1 [C]`, `b1 [C]`, `w2 [C×C row-major, row = output unit]`, `b2 [C]`,
//! `w3 [C]`, `b3`, `rho`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Weights, biases and the T2 reparametrization `rho` of one voxel network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    width: usize,
    t_max: f64,
    data: Vec<f64>,
}

/// Number of flat entries for width `c`.
pub const fn param_len(c: usize) -> usize {
    c * c + 4 * c + 2
}

impl MlpParams {
    /// All-zero parameters (a constant network with output 0).
    pub fn zeros(width: usize) -> Self {
        assert!(width >= 1, "network width must be >= 1");
        Self {
            width,
            t_max: 1.0,
            data: vec![0.0; param_len(width)],
        }
    }

    pub fn from_flat(width: usize, t_max: f64, data: Vec<f64>) -> Result<Self> {
        if width == 0 {
            return Err(Error::Format("network width must be >= 1".into()));
        }
        if data.len() != param_len(width) {
            return Err(Error::Format(format!(
                "expected {} parameters for width {width}, got {}",
                param_len(width),
                data.len()
            )));
        }
        if !(t_max.is_finite() && t_max > 0.0) {
            return Err(Error::Format(format!("t_max must be > 0, got {t_max}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite network parameter".into()));
        }
        Ok(Self { width, t_max, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Input scale: the network sees `t / t_max`.
    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn set_t_max(&mut self, t_max: f64) {
        assert!(t_max.is_finite() && t_max > 0.0);
        self.t_max = t_max;
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    fn offsets(&self) -> Offsets {
        Offsets::new(self.width)
    }

    pub fn w1(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o.w1..o.b1]
    }
    pub fn b1(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o.b1..o.w2]
    }
    pub fn w2(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o.w2..o.b2]
    }
    pub fn b2(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o.b2..o.w3]
    }
    pub fn w3(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o.w3..o.b3]
    }
    pub fn b3(&self) -> f64 {
        self.data[self.offsets().b3]
    }
    pub fn rho(&self) -> f64 {
        self.data[self.offsets().rho]
    }

    pub fn w1_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o.w1..o.b1]
    }
    pub fn b1_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o.b1..o.w2]
    }
    pub fn w2_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o.w2..o.b2]
    }
    pub fn b2_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o.b2..o.w3]
    }
    pub fn w3_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o.w3..o.b3]
    }
    pub fn set_b3(&mut self, v: f64) {
        let i = self.offsets().b3;
        self.data[i] = v;
    }
    pub fn set_rho(&mut self, v: f64) {
        let i = self.offsets().rho;
        self.data[i] = v;
    }

    /// Index of `rho` in the flat layout.
    pub fn rho_index(&self) -> usize {
        self.offsets().rho
    }

    /// Output and its time derivative at `t` (ms), with cached activations.
    pub fn forward(&self, t: f64) -> EvalRecord {
        let mut rec = EvalRecord::new(self.width);
        self.forward_into(t, &mut rec);
        rec
    }

    /// [`forward`](Self::forward) into a caller-owned record, avoiding
    /// allocation in hot loops.
    pub fn forward_into(&self, t: f64, rec: &mut EvalRecord) {
        let c = self.width;
        debug_assert_eq!(rec.h1.len(), c);
        let o = self.offsets();
        let d = &self.data;
        let (w1, b1) = (&d[o.w1..o.b1], &d[o.b1..o.w2]);
        let (w2, b2) = (&d[o.w2..o.b2], &d[o.b2..o.w3]);
        let w3 = &d[o.w3..o.b3];
        let s = t / self.t_max;
        rec.s = s;

        for ((h1, dh1), (&w, &b)) in rec
            .h1
            .iter_mut()
            .zip(rec.dh1.iter_mut())
            .zip(w1.iter().zip(b1))
        {
            let h = tanh(w * s + b);
            *h1 = h;
            // tangent with respect to s; dz1/ds = w1
            *dh1 = (1.0 - h * h) * w;
        }
        let mut value = d[o.b3];
        let mut dvalue = 0.0;
        for (i, row) in w2.chunks_exact(c).enumerate() {
            let mut z = b2[i];
            let mut dz = 0.0;
            for ((&wij, &h), &dh) in row.iter().zip(&rec.h1).zip(&rec.dh1) {
                z += wij * h;
                dz += wij * dh;
            }
            let h = tanh(z);
            let dh = (1.0 - h * h) * dz;
            rec.h2[i] = h;
            rec.dz2[i] = dz;
            rec.dh2[i] = dh;
            value += w3[i] * h;
            dvalue += w3[i] * dh;
        }
        rec.value = value;
        rec.dvalue_dt = dvalue / self.t_max;
    }

    /// Gradient of `coeff_value · 𝒩(t) + coeff_dvalue · d𝒩/dt` with respect to
    /// every network parameter. The `rho` slot of the result is zero.
    pub fn grad_wrt_params(
        &self,
        rec: &EvalRecord,
        coeff_value: f64,
        coeff_dvalue: f64,
    ) -> MlpParams {
        let mut g = MlpParams {
            width: self.width,
            t_max: self.t_max,
            data: vec![0.0; self.data.len()],
        };
        let mut scratch = BackwardScratch::new(self.width);
        self.accumulate_grad(rec, coeff_value, coeff_dvalue, &mut g.data, &mut scratch);
        g
    }

    /// Adds the gradient described in [`grad_wrt_params`](Self::grad_wrt_params)
    /// into the flat buffer `out`.
    pub fn accumulate_grad(
        &self,
        rec: &EvalRecord,
        coeff_value: f64,
        coeff_dvalue: f64,
        out: &mut [f64],
        scratch: &mut BackwardScratch,
    ) {
        let c = self.width;
        let o = self.offsets();
        let d = &self.data;
        let w1 = &d[o.w1..o.b1];
        let w2 = &d[o.w2..o.b2];
        let w3 = &d[o.w3..o.b3];
        let a = coeff_value;
        // coefficient on the tangent with respect to the scaled input
        let beta = coeff_dvalue / self.t_max;
        let s = rec.s;

        out[o.b3] += a;
        let g_z2 = &mut scratch.g_z2;
        let g_dz2 = &mut scratch.g_dz2;
        for i in 0..c {
            let h = rec.h2[i];
            let sech2 = 1.0 - h * h;
            out[o.w3 + i] += a * h + beta * rec.dh2[i];
            let g_h = a * w3[i];
            let g_dh = beta * w3[i];
            // dh2 = sech2 * dz2, sech2 depends on h2
            g_dz2[i] = g_dh * sech2;
            let g_h_total = g_h - 2.0 * h * rec.dz2[i] * g_dh;
            g_z2[i] = g_h_total * sech2;
            out[o.b2 + i] += g_z2[i];
        }

        let g_h1 = &mut scratch.g_h1;
        let g_dh1 = &mut scratch.g_dh1;
        g_h1.iter_mut().for_each(|v| *v = 0.0);
        g_dh1.iter_mut().for_each(|v| *v = 0.0);
        let grad_w2 = &mut out[o.w2..o.b2];
        for ((row, grow), (&gz, &gdz)) in w2
            .chunks_exact(c)
            .zip(grad_w2.chunks_exact_mut(c))
            .zip(g_z2.iter().zip(g_dz2.iter()))
        {
            for (((gw, &wij), (gh, gdh)), (&h, &dh)) in grow
                .iter_mut()
                .zip(row)
                .zip(g_h1.iter_mut().zip(g_dh1.iter_mut()))
                .zip(rec.h1.iter().zip(&rec.dh1))
            {
                *gw += gz * h + gdz * dh;
                *gh += wij * gz;
                *gdh += wij * gdz;
            }
        }

        for j in 0..c {
            let h = rec.h1[j];
            let sech2 = 1.0 - h * h;
            // dh1 = sech2 * w1
            let g_dz1 = g_dh1[j] * sech2;
            let g_h = g_h1[j] - 2.0 * h * w1[j] * g_dh1[j];
            let g_z1 = g_h * sech2;
            out[o.w1 + j] += g_z1 * s + g_dz1;
            out[o.b1 + j] += g_z1;
        }
    }

    /// Evaluates every time in `times` (at most [`BATCH`] of them), keeping
    /// the activations in `rec` unit-major so inner loops run over points.
    pub fn forward_batch(&self, times: &[f64], rec: &mut BatchRecord) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe { self.forward_batch_avx2(times, rec) };
        }
        self.forward_batch_impl(times, rec);
    }

    /// Same arithmetic as the portable path (no FMA contraction), so results
    /// are bit-identical; only the vector width changes.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn forward_batch_avx2(&self, times: &[f64], rec: &mut BatchRecord) {
        self.forward_batch_impl(times, rec);
    }

    #[inline(always)]
    fn forward_batch_impl(&self, times: &[f64], rec: &mut BatchRecord) {
        let c = self.width;
        let n = times.len();
        assert!(
            (1..=BATCH).contains(&n),
            "batch of {n} points, expected 1..={BATCH}"
        );
        rec.reset(c, n);
        let o = self.offsets();
        let d = &self.data;
        // lanes past `n` repeat the last time; their results are never read
        let last = times[n - 1] / self.t_max;
        for (k, s) in rec.s.iter_mut().enumerate() {
            *s = times.get(k).map_or(last, |t| t / self.t_max);
        }

        for j in 0..c {
            let (w, b) = (d[o.w1 + j], d[o.b1 + j]);
            let (h1, dh1) = (&mut rec.h1[j], &mut rec.dh1[j]);
            for k in 0..BATCH {
                let h = tanh(w * rec.s[k] + b);
                h1[k] = h;
                // tangent with respect to s; dz1/ds = w1
                dh1[k] = (1.0 - h * h) * w;
            }
        }

        rec.value = [d[o.b3]; BATCH];
        rec.dvalue = [0.0; BATCH];
        for i in 0..c {
            let mut z = [d[o.b2 + i]; BATCH];
            let mut dz = [0.0; BATCH];
            for j in 0..c {
                let wij = d[o.w2 + i * c + j];
                let (h1, dh1) = (&rec.h1[j], &rec.dh1[j]);
                for k in 0..BATCH {
                    z[k] += wij * h1[k];
                    dz[k] += wij * dh1[k];
                }
            }
            let w3 = d[o.w3 + i];
            for k in 0..BATCH {
                let h = tanh(z[k]);
                let dh = (1.0 - h * h) * dz[k];
                rec.h2[i][k] = h;
                rec.dz2[i][k] = dz[k];
                rec.dh2[i][k] = dh;
                rec.value[k] += w3 * h;
                rec.dvalue[k] += w3 * dh;
            }
        }
        for v in &mut rec.dvalue {
            *v /= self.t_max;
        }
    }

    /// Adds `Σ_k a[k] · ∂𝒩(t_k)/∂θ + b[k] · ∂(d𝒩/dt)(t_k)/∂θ` over the batch
    /// last evaluated into `rec`. The `rho` slot is left untouched.
    pub fn accumulate_grad_batch(
        &self,
        rec: &BatchRecord,
        a: &[f64],
        b: &[f64],
        out: &mut [f64],
        scratch: &mut BatchScratch,
    ) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe { self.accumulate_grad_batch_avx2(rec, a, b, out, scratch) };
        }
        self.accumulate_grad_batch_impl(rec, a, b, out, scratch);
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn accumulate_grad_batch_avx2(
        &self,
        rec: &BatchRecord,
        a: &[f64],
        b: &[f64],
        out: &mut [f64],
        scratch: &mut BatchScratch,
    ) {
        self.accumulate_grad_batch_impl(rec, a, b, out, scratch);
    }

    #[inline(always)]
    fn accumulate_grad_batch_impl(
        &self,
        rec: &BatchRecord,
        a: &[f64],
        b: &[f64],
        out: &mut [f64],
        scratch: &mut BatchScratch,
    ) {
        let c = self.width;
        let n = rec.n;
        assert!(
            a.len() == n && b.len() == n,
            "coefficient length must match the batch"
        );
        scratch.reset(c);
        let o = self.offsets();
        let d = &self.data;
        // padded lanes get zero coefficients and so contribute exact zeros
        let mut ca = [0.0; BATCH];
        let mut beta = [0.0; BATCH];
        ca[..n].copy_from_slice(a);
        for (bt, &bk) in beta.iter_mut().zip(b) {
            // coefficient on the tangent with respect to the scaled input
            *bt = bk / self.t_max;
        }

        out[o.b3] += lane_sum(&ca);
        let mut term = [0.0; BATCH];
        for i in 0..c {
            let w3 = d[o.w3 + i];
            let (h2, dz2, dh2) = (&rec.h2[i], &rec.dz2[i], &rec.dh2[i]);
            let (g_z2, g_dz2) = (&mut scratch.g_z2[i], &mut scratch.g_dz2[i]);
            for k in 0..BATCH {
                let h = h2[k];
                let sech2 = 1.0 - h * h;
                term[k] = ca[k] * h + beta[k] * dh2[k];
                let g_dh = beta[k] * w3;
                // dh2 = sech2 * dz2, sech2 depends on h2
                g_dz2[k] = g_dh * sech2;
                g_z2[k] = (ca[k] * w3 - 2.0 * h * dz2[k] * g_dh) * sech2;
            }
            out[o.w3 + i] += lane_sum(&term);
            out[o.b2 + i] += lane_sum(g_z2);
        }

        for i in 0..c {
            let (g_z2, g_dz2) = (&scratch.g_z2[i], &scratch.g_dz2[i]);
            for j in 0..c {
                let wij = d[o.w2 + i * c + j];
                let (h1, dh1) = (&rec.h1[j], &rec.dh1[j]);
                out[o.w2 + i * c + j] += lane_dot2(g_z2, h1, g_dz2, dh1);
                let (g_h1, g_dh1) = (&mut scratch.g_h1[j], &mut scratch.g_dh1[j]);
                for k in 0..BATCH {
                    g_h1[k] += wij * g_z2[k];
                    g_dh1[k] += wij * g_dz2[k];
                }
            }
        }

        let mut g_z1 = [0.0; BATCH];
        for j in 0..c {
            let w1 = d[o.w1 + j];
            let (h1, g_h1, g_dh1) = (&rec.h1[j], &scratch.g_h1[j], &scratch.g_dh1[j]);
            for k in 0..BATCH {
                let h = h1[k];
                let sech2 = 1.0 - h * h;
                // dh1 = sech2 * w1
                let g_dz1 = g_dh1[k] * sech2;
                g_z1[k] = (g_h1[k] - 2.0 * h * w1 * g_dh1[k]) * sech2;
                term[k] = g_z1[k] * rec.s[k] + g_dz1;
            }
            out[o.w1 + j] += lane_sum(&term);
            out[o.b1 + j] += lane_sum(&g_z1);
        }
    }
}

type Lanes = [f64; BATCH];

/// Sum with four independent accumulators, so the additions pipeline and
/// vectorize. The order is fixed, so results are reproducible.
#[inline(always)]
fn lane_sum(x: &Lanes) -> f64 {
    let mut acc = [0.0; 4];
    for ch in x.chunks_exact(4) {
        for l in 0..4 {
            acc[l] += ch[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// `Σ a·b + c·d` with the accumulation pattern of [`lane_sum`].
#[inline(always)]
fn lane_dot2(a: &Lanes, b: &Lanes, c: &Lanes, d: &Lanes) -> f64 {
    let mut acc = [0.0; 4];
    for k in (0..BATCH).step_by(4) {
        for l in 0..4 {
            acc[l] += a[k + l] * b[k + l] + c[k + l] * d[k + l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Largest number of points handled by one [`MlpParams::forward_batch`].
pub const BATCH: usize = 32;

/// Activations of a batch of evaluation times, one lane array per hidden
/// unit.
#[derive(Debug, Clone)]
pub struct BatchRecord {
    n: usize,
    s: Lanes,
    h1: Vec<Lanes>,
    dh1: Vec<Lanes>,
    h2: Vec<Lanes>,
    dz2: Vec<Lanes>,
    dh2: Vec<Lanes>,
    value: Lanes,
    dvalue: Lanes,
}

impl BatchRecord {
    pub fn new(width: usize) -> Self {
        let lanes = vec![[0.0; BATCH]; width];
        Self {
            n: 0,
            s: [0.0; BATCH],
            h1: lanes.clone(),
            dh1: lanes.clone(),
            h2: lanes.clone(),
            dz2: lanes.clone(),
            dh2: lanes,
            value: [0.0; BATCH],
            dvalue: [0.0; BATCH],
        }
    }

    fn reset(&mut self, width: usize, n: usize) {
        assert_eq!(
            self.h1.len(),
            width,
            "record width does not match the network"
        );
        self.n = n;
    }

    /// Network outputs of the batch.
    pub fn values(&self) -> &[f64] {
        &self.value[..self.n]
    }

    /// Time derivatives (per ms) of the batch.
    pub fn dvalues(&self) -> &[f64] {
        &self.dvalue[..self.n]
    }
}

/// Reusable buffers for [`MlpParams::accumulate_grad_batch`].
#[derive(Debug, Clone)]
pub struct BatchScratch {
    g_z2: Vec<Lanes>,
    g_dz2: Vec<Lanes>,
    g_h1: Vec<Lanes>,
    g_dh1: Vec<Lanes>,
}

impl BatchScratch {
    pub fn new(width: usize) -> Self {
        let lanes = vec![[0.0; BATCH]; width];
        Self {
            g_z2: lanes.clone(),
            g_dz2: lanes.clone(),
            g_h1: lanes.clone(),
            g_dh1: lanes,
        }
    }

    fn reset(&mut self, width: usize) {
        assert_eq!(
            self.g_h1.len(),
            width,
            "scratch width does not match the network"
        );
        self.g_h1.iter_mut().for_each(|l| *l = [0.0; BATCH]);
        self.g_dh1.iter_mut().for_each(|l| *l = [0.0; BATCH]);
    }
}

/// `tanh` through a single exponential of a non-positive argument; absolute
/// error stays at the 1e-16 level. Branch-free, so loops over it vectorize.
#[inline(always)]
fn tanh(x: f64) -> f64 {
    let e = exp_nonpositive(-2.0 * x.abs());
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

/// `exp(y)` for `y <= 0`, within a few ulp of libm. Arguments below -40
/// are treated as -40, which only matters where `tanh` has already
/// rounded to ±1.
///
/// Cody-Waite reduction `y = k·ln2 + r`, `|r| <= ln2/2`, a degree-13
/// Taylor polynomial for `exp(r)` and `2^k` assembled from its exponent
/// bits; the rounding uses the 1.5·2^52 shift so no float-to-int
/// conversion is needed.
#[inline(always)]
fn exp_nonpositive(y: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let y = y.max(-40.0);
    let shifted = y * std::f64::consts::LOG2_E + SHIFT;
    let k = shifted - SHIFT;
    let r = (y - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let k_int = shifted.to_bits().wrapping_sub(SHIFT.to_bits());
    let two_k = f64::from_bits(k_int.wrapping_add(1023).wrapping_shl(52));
    p * two_k
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    rho: usize,
}

impl Offsets {
    const fn new(c: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + c;
        let w2 = b1 + c;
        let b2 = w2 + c * c;
        let w3 = b2 + c;
        let b3 = w3 + c;
        Self {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            rho: b3 + 1,
        }
    }
}

/// Result of one forward evaluation plus the activations needed for
/// parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub value: f64,
    pub dvalue_dt: f64,
    s: f64,
    h1: Vec<f64>,
    dh1: Vec<f64>,
    h2: Vec<f64>,
    dz2: Vec<f64>,
    dh2: Vec<f64>,
}

impl EvalRecord {
    pub fn new(width: usize) -> Self {
        Self {
            value: 0.0,
            dvalue_dt: 0.0,
            s: 0.0,
            h1: vec![0.0; width],
            dh1: vec![0.0; width],
            h2: vec![0.0; width],
            dz2: vec![0.0; width],
            dh2: vec![0.0; width],
        }
    }
}

/// Reusable buffers for [`MlpParams::accumulate_grad`].
#[derive(Debug, Clone)]
pub struct BackwardScratch {
    g_z2: Vec<f64>,
    g_dz2: Vec<f64>,
    g_h1: Vec<f64>,
    g_dh1: Vec<f64>,
}

impl BackwardScratch {
    pub fn new(width: usize) -> Self {
        Self {
            g_z2: vec![0.0; width],
            g_dz2: vec![0.0; width],
            g_h1: vec![0.0; width],
            g_dh1: vec![0.0; width],
        }
    }
}

/// Random weights with standard deviation `sqrt(1 / fan_in)`, zero biases,
/// `rho = 0` and unit input scale. Deterministic given `seed`.
pub fn init_params(width: usize, seed: u64) -> MlpParams {
    let mut p = MlpParams::zeros(width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer1 = Normal::new(0.0, 1.0).unwrap();
    let hidden = Normal::new(0.0, (1.0 / width as f64).sqrt()).unwrap();
    for w in p.w1_mut() {
        *w = layer1.sample(&mut rng);
    }
    for w in p.w2_mut() {
        *w = hidden.sample(&mut rng);
    }
    for w in p.w3_mut() {
        *w = hidden.sample(&mut rng);
    }
    p
}
