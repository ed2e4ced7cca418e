//! Image-level mapping: masks, voxel-wise fitting over a grid, and
//! re-synthesis of contrast frames from trained networks.
//!
//! Voxels are fitted independently. With the `parallel` feature they are
//! distributed over a rayon pool; results are assembled by voxel index, so
//! the output does not depend on the thread count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::lsq::{fit_lsq, LsqOptions};
use crate::net::MlpParams;
use crate::signal::{mix_seed, validate_times, EchoSeries};
use crate::trainer::{fit_voxel, CollocationGrid, LossWeights, TrainConfig};

/// Grid shape. Voxel `(row, col)` has linear index `row * cols + col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub rows: usize,
    pub cols: usize,
}

impl Dims {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub const fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }
}

/// A stack of contrast images, one per echo time, stored frame-major then
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSeries {
    dims: Dims,
    times: Vec<f64>,
    data: Vec<f64>,
}

impl ImageSeries {
    /// Times must be finite, `>= 0` and strictly increasing; values finite.
    pub fn new(dims: Dims, times: Vec<f64>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::DimensionMismatch("image grid is empty".into()));
        }
        if times.is_empty() {
            return Err(Error::InvalidSeries("no frames".into()));
        }
        for (i, &t) in times.iter().enumerate() {
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::InvalidSeries(format!("frame time {i} is {t}")));
            }
            if i > 0 && t <= times[i - 1] {
                return Err(Error::InvalidSeries(
                    "frame times must be strictly increasing".into(),
                ));
            }
        }
        if data.len() != times.len() * dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} frames of {}x{} need {} values, got {}",
                times.len(),
                dims.rows,
                dims.cols,
                times.len() * dims.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSeries("non-finite pixel value".into()));
        }
        Ok(Self { dims, times, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// All pixel values, frame-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame_count(&self) -> usize {
        self.times.len()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.dims.len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn value(&self, frame: usize, row: usize, col: usize) -> f64 {
        self.frame(frame)[self.dims.index(row, col)]
    }

    /// Signal of one voxel across all frames.
    pub fn voxel_signals(&self, idx: usize) -> Vec<f64> {
        let n = self.dims.len();
        (0..self.times.len())
            .map(|i| self.data[i * n + idx])
            .collect()
    }

    pub fn voxel_series(&self, idx: usize) -> Result<EchoSeries> {
        EchoSeries::new(self.times.clone(), self.voxel_signals(idx))
    }
}

/// Quantity stored in a [`ParameterMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    T2,
    M0,
    Diff,
    /// Root-mean-square fit residual in signal units.
    Residual,
}

impl MapKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::T2 => "t2",
            Self::M0 => "m0",
            Self::Diff => "diff",
            Self::Residual => "residual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "t2" => Self::T2,
            "m0" => Self::M0,
            "diff" => Self::Diff,
            "residual" => Self::Residual,
            _ => return None,
        })
    }
}

/// Per-voxel scalar image. Voxels outside the mask hold NaN.
#[derive(Debug, Clone)]
pub struct ParameterMap {
    dims: Dims,
    kind: MapKind,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl PartialEq for ParameterMap {
    /// Bitwise comparison, so NaN sentinels compare equal.
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.kind == other.kind
            && self.mask == other.mask
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl ParameterMap {
    /// Values outside the mask are replaced with NaN.
    pub fn new(dims: Dims, kind: MapKind, mut values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != dims.len() || mask.len() != dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} map needs {} values and mask entries, got {} and {}",
                dims.rows,
                dims.cols,
                dims.len(),
                values.len(),
                mask.len()
            )));
        }
        for (v, &m) in values.iter_mut().zip(&mask) {
            if !m {
                *v = f64::NAN;
            }
        }
        Ok(Self {
            dims,
            kind,
            values,
            mask,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// `None` outside the mask.
    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        let i = self.dims.index(row, col);
        self.mask[i].then_some(self.values[i])
    }

    /// Values of masked-in voxels.
    pub fn masked_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
    }
}

/// Outcome of one voxel's fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum VoxelStatus {
    Ok = 0,
    /// Outside the mask; not fitted.
    Background = 1,
    /// Estimates are finite but the optimizer hit its iteration limit.
    Unconverged = 2,
    Degenerate = 3,
    NonDecaying = 4,
    Diverged = 5,
    InvalidSeries = 6,
}

impl VoxelStatus {
    pub fn code(self) -> u8 {
        self as u8
    }

    /// Whether the voxel carries finite estimates.
    pub fn has_estimate(self) -> bool {
        matches!(self, Self::Ok | Self::Unconverged)
    }

    fn from_error(e: &Error) -> Self {
        match e {
            Error::Degenerate(_) => Self::Degenerate,
            Error::NonDecaying(_) => Self::NonDecaying,
            Error::InvalidSeries(_) | Error::InvalidParams(_) => Self::InvalidSeries,
            _ => Self::Diverged,
        }
    }

    fn from_fit(r: &FitResult) -> Self {
        if !(r.t2_hat.is_finite() && r.m0_hat.is_finite()) {
            Self::Diverged
        } else if r.converged {
            Self::Ok
        } else {
            Self::Unconverged
        }
    }
}

/// Foreground mask: voxels whose first-frame signal is positive and at
/// least `fraction` of the first frame's maximum. An all-zero first frame yields an empty mask
/// and a warning.
pub fn build_mask(series: &ImageSeries, fraction: f64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!(
            "mask fraction must lie in [0, 1), got {fraction}"
        )));
    }
    let first = series.frame(0);
    let max = first.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        log::warn!("first frame is all zero; mask is empty");
        return Ok(vec![false; first.len()]);
    }
    let cutoff = fraction * max;
    Ok(first.iter().map(|&v| v >= cutoff && v > 0.0).collect())
}

/// Estimates of a mapping run. The maps' masks hold the voxels with a
/// usable estimate; why any other voxel was left out is in `status`.
#[derive(Debug, Clone, PartialEq)]
pub struct FitMaps {
    pub t2: ParameterMap,
    pub m0: ParameterMap,
    pub residual: ParameterMap,
    pub status: Vec<VoxelStatus>,
    /// Per-voxel diagnostics; `None` where no fit was produced.
    pub fits: Vec<Option<FitResult>>,
}

impl FitMaps {
    fn assemble(
        dims: Dims,
        mask: &[bool],
        frames: usize,
        outcomes: Vec<(usize, Result<FitResult>)>,
    ) -> Self {
        let n = dims.len();
        let mut t2 = vec![f64::NAN; n];
        let mut m0 = vec![f64::NAN; n];
        let mut residual = vec![f64::NAN; n];
        let mut status = vec![VoxelStatus::Background; n];
        let mut fits = vec![None; n];
        for (idx, outcome) in outcomes {
            match outcome {
                Ok(r) => {
                    status[idx] = VoxelStatus::from_fit(&r);
                    if status[idx].has_estimate() {
                        t2[idx] = r.t2_hat;
                        m0[idx] = r.m0_hat;
                        residual[idx] = (r.residual_ss / frames as f64).sqrt();
                    }
                    fits[idx] = Some(r);
                }
                Err(e) => status[idx] = VoxelStatus::from_error(&e),
            }
        }
        let fitted: Vec<bool> = mask
            .iter()
            .zip(&status)
            .map(|(&m, s)| m && s.has_estimate())
            .collect();
        let map =
            |kind, v| ParameterMap::new(dims, kind, v, fitted.clone()).expect("sizes checked");
        Self {
            t2: map(MapKind::T2, t2),
            m0: map(MapKind::M0, m0),
            residual: map(MapKind::Residual, residual),
            status,
            fits,
        }
    }

    /// Number of voxels per status, in status order; absent statuses omitted.
    pub fn status_counts(&self) -> Vec<(VoxelStatus, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for s in &self.status {
            *counts.entry(*s).or_insert(0) += 1;
        }
        counts.into_iter().collect()
    }
}

fn check_mask(series: &ImageSeries, mask: &[bool]) -> Result<Vec<usize>> {
    if mask.len() != series.dims().len() {
        return Err(Error::DimensionMismatch(format!(
            "mask has {} entries for a {}-voxel grid",
            mask.len(),
            series.dims().len()
        )));
    }
    Ok(mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect())
}

/// Runs `f` over `indices`, on `threads` workers when the `parallel`
/// feature is enabled (`0` lets rayon choose, `1` stays on the caller's
/// thread). Results come back in input order.
pub fn for_each_voxel<T, F>(indices: &[usize], threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if threads != 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
        return Ok(pool.install(|| indices.par_iter().map(|&i| f(i)).collect()));
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(indices.iter().map(|&i| f(i)).collect())
}

/// Least-squares T2 and M0 maps over the masked voxels.
pub fn map_lsq(
    series: &ImageSeries,
    mask: &[bool],
    opts: &LsqOptions,
    threads: usize,
) -> Result<FitMaps> {
    opts.validate()?;
    let indices = check_mask(series, mask)?;
    let outcomes = for_each_voxel(&indices, threads, |idx| {
        (
            idx,
            series.voxel_series(idx).and_then(|s| fit_lsq(&s, opts)),
        )
    })?;
    Ok(FitMaps::assemble(
        series.dims(),
        mask,
        series.frame_count(),
        outcomes,
    ))
}

/// Time range covered by the physics residual during the joint stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollocationSpan {
    /// From the first to the last echo time.
    #[default]
    EchoRange,
    /// From 0 to the last echo time.
    Full,
}

/// Settings of a network mapping run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PinnConfig {
    /// Number of collocation points `K`.
    pub collocation_points: usize,
    pub collocation_span: CollocationSpan,
    pub weights: LossWeights,
    /// Training settings; `train.seed` is mixed with the voxel index to seed
    /// each voxel's network.
    pub train: TrainConfig,
}

impl Default for PinnConfig {
    fn default() -> Self {
        Self {
            collocation_points: 1001,
            collocation_span: CollocationSpan::EchoRange,
            weights: LossWeights::default(),
            train: TrainConfig::default(),
        }
    }
}

impl PinnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.collocation_points < 2 {
            return Err(Error::InvalidConfig(
                "collocation_points must be >= 2".into(),
            ));
        }
        self.weights.validate()?;
        self.train.validate()
    }

    /// Collocation grid for echoes acquired at `times`.
    pub fn grid(&self, times: &[f64]) -> Result<CollocationGrid> {
        validate_times(times)?;
        let end = times[times.len() - 1];
        match self.collocation_span {
            CollocationSpan::EchoRange => {
                CollocationGrid::spanning(self.collocation_points, times[0], end)
            }
            CollocationSpan::Full => CollocationGrid::uniform(self.collocation_points, end),
        }
    }

    /// Training settings of voxel `idx`.
    pub fn voxel_train(&self, idx: usize) -> TrainConfig {
        TrainConfig {
            seed: mix_seed(self.train.seed, idx as u64),
            ..self.train
        }
    }
}

/// A trained network and its signal scale.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelNet {
    pub params: MlpParams,
    /// The network models the signal divided by this.
    pub scale: f64,
}

impl VoxelNet {
    /// Signal predicted at `t` ms.
    pub fn signal(&self, t: f64) -> f64 {
        self.params.forward(t).value * self.scale
    }
}

/// Trained networks of a mapping run, one per fitted voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedField {
    dims: Dims,
    width: usize,
    t_max: f64,
    nets: Vec<Option<VoxelNet>>,
}

impl TrainedField {
    /// All networks must share `width` and the input scale `t_max`.
    pub fn new(dims: Dims, width: usize, t_max: f64, nets: Vec<Option<VoxelNet>>) -> Result<Self> {
        if nets.len() != dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} networks for a {}-voxel grid",
                nets.len(),
                dims.len()
            )));
        }
        if !(t_max.is_finite() && t_max > 0.0) {
            return Err(Error::Format(format!("t_max must be > 0, got {t_max}")));
        }
        for net in nets.iter().flatten() {
            if net.params.width() != width || net.params.t_max().to_bits() != t_max.to_bits() {
                return Err(Error::Format("networks disagree on width or t_max".into()));
            }
            if !net.scale.is_finite() {
                return Err(Error::Format("non-finite network scale".into()));
            }
        }
        Ok(Self {
            dims,
            width,
            t_max,
            nets,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn nets(&self) -> &[Option<VoxelNet>] {
        &self.nets
    }

    pub fn net(&self, row: usize, col: usize) -> Option<&VoxelNet> {
        self.nets[self.dims.index(row, col)].as_ref()
    }
}

/// Network maps together with the trained field.
#[derive(Debug, Clone, PartialEq)]
pub struct PinnMaps {
    pub maps: FitMaps,
    pub field: TrainedField,
}

/// Trains one network per masked voxel and collects T2 and M0 maps.
///
/// Voxel `idx` is trained with seed `mix_seed(cfg.train.seed, idx)`.
pub fn map_pinn(
    series: &ImageSeries,
    mask: &[bool],
    cfg: &PinnConfig,
    threads: usize,
) -> Result<PinnMaps> {
    cfg.validate()?;
    let indices = check_mask(series, mask)?;
    let grid = cfg.grid(series.times())?;
    let total = indices.len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let outcomes = for_each_voxel(&indices, threads, |idx| {
        let fit = series
            .voxel_series(idx)
            .and_then(|s| fit_voxel(&s, &grid, &cfg.weights, &cfg.voxel_train(idx)));
        let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
        if n.is_multiple_of(100) || n == total {
            log::info!("fitted {n}/{total} voxels");
        }
        (idx, fit)
    })?;

    let mut nets = vec![None; series.dims().len()];
    let mut results = Vec::with_capacity(outcomes.len());
    for (idx, outcome) in outcomes {
        results.push((
            idx,
            outcome.map(|fit| {
                if VoxelStatus::from_fit(&fit.result).has_estimate() {
                    nets[idx] = Some(VoxelNet {
                        params: fit.params,
                        scale: fit.scale,
                    });
                }
                fit.result
            }),
        ));
    }
    let t_max = series.times()[series.frame_count() - 1];
    let field = TrainedField::new(series.dims(), cfg.train.width, t_max, nets)?;
    Ok(PinnMaps {
        maps: FitMaps::assemble(series.dims(), mask, series.frame_count(), results),
        field,
    })
}

/// Difference map `a - b` over the voxels masked in both.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffOutcome {
    pub map: ParameterMap,
    /// The inputs' masks differ; the difference covers their intersection.
    pub mask_mismatch: bool,
}

pub fn diff_map(a: &ParameterMap, b: &ParameterMap) -> Result<DiffOutcome> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!(
            "cannot subtract a {}x{} map from a {}x{} map",
            b.dims().rows,
            b.dims().cols,
            a.dims().rows,
            a.dims().cols
        )));
    }
    let mask: Vec<bool> = a
        .mask()
        .iter()
        .zip(b.mask())
        .map(|(&x, &y)| x && y)
        .collect();
    let mask_mismatch = a.mask() != b.mask();
    if mask_mismatch {
        log::warn!("maps have different masks; differencing their intersection");
    }
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x - y)
        .collect();
    Ok(DiffOutcome {
        map: ParameterMap::new(a.dims(), MapKind::Diff, values, mask)?,
        mask_mismatch,
    })
}

/// Contrast images synthesized by the trained networks at arbitrary
/// `times` (finite, `>= 0`, strictly increasing). Voxels without a network
/// are zero.
pub fn generate_frames(field: &TrainedField, times: &[f64]) -> Result<ImageSeries> {
    let n = field.dims().len();
    let mut data = vec![0.0; times.len() * n];
    for (idx, net) in field.nets().iter().enumerate() {
        if let Some(net) = net {
            for (i, &t) in times.iter().enumerate() {
                data[i * n + idx] = net.signal(t);
            }
        }
    }
    ImageSeries::new(field.dims(), times.to_vec(), data)
}
