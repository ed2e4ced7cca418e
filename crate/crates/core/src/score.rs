//! Region-wise comparison of an estimated map against ground truth.

use crate::error::{Error, Result};
use crate::pipeline::ParameterMap;

/// Accuracy within one region of constant truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionScore {
    pub truth: f64,
    /// Voxels of the region in the truth mask.
    pub voxels: usize,
    /// Of those, voxels with a finite estimate.
    pub fitted: usize,
    /// Median of the finite estimates (NaN if there are none).
    pub median_estimate: f64,
    /// `|median_estimate - truth| / |truth|`.
    pub median_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    /// One entry per distinct truth value, ascending.
    pub regions: Vec<RegionScore>,
}

impl ScoreReport {
    /// Largest [`RegionScore::median_rel_error`]; NaN propagates.
    pub fn worst_median_rel_error(&self) -> f64 {
        self.regions
            .iter()
            .map(|r| r.median_rel_error)
            .fold(0.0, |a, b| if b.is_nan() || b > a { b } else { a })
    }
}

/// Median of `values`; NaN for an empty slice. Sorts in place.
pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Groups the truth map's masked voxels by exact value and scores the
/// estimate within each group.
pub fn score_map(estimate: &ParameterMap, truth: &ParameterMap) -> Result<ScoreReport> {
    if estimate.dims() != truth.dims() {
        return Err(Error::DimensionMismatch(
            "estimate and truth maps differ in shape".into(),
        ));
    }
    let mut pairs: Vec<(f64, f64)> = truth
        .values()
        .iter()
        .zip(truth.mask())
        .zip(estimate.values().iter().zip(estimate.mask()))
        .filter(|((t, &m), _)| m && t.is_finite())
        .map(|((&t, _), (&e, &em))| (t, if em { e } else { f64::NAN }))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let regions = pairs
        .chunk_by(|a, b| a.0 == b.0)
        .map(|group| {
            let truth = group[0].0;
            let mut est: Vec<f64> = group
                .iter()
                .map(|p| p.1)
                .filter(|e| e.is_finite())
                .collect();
            let fitted = est.len();
            let median_estimate = median(&mut est);
            RegionScore {
                truth,
                voxels: group.len(),
                fitted,
                median_estimate,
                median_rel_error: (median_estimate - truth).abs() / truth.abs(),
            }
        })
        .collect();
    Ok(ScoreReport { regions })
}
