//! Disk phantoms with one tissue per region and zero background.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{Dims, ImageSeries, MapKind, ParameterMap};
use crate::signal::{synthesize_signals, NoiseSpec, TissueParams};

/// A filled disk. `center` is `[row, col]` in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tube {
    pub center: [f64; 2],
    pub radius: f64,
    pub m0: f64,
    pub t2: f64,
}

impl Tube {
    fn contains(&self, row: usize, col: usize) -> bool {
        let dr = row as f64 - self.center[0];
        let dc = col as f64 - self.center[1];
        dr * dr + dc * dc <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomLayout {
    pub rows: usize,
    pub cols: usize,
    pub tubes: Vec<Tube>,
}

/// T2 values (ms) of the default 14-tube layout, longest first.
pub const DEFAULT_TUBE_T2: [f64; 14] = [
    600.0, 420.0, 290.0, 200.0, 140.0, 97.0, 68.0, 47.0, 33.0, 23.0, 16.0, 11.0, 8.0, 5.592,
];

impl PhantomLayout {
    /// 64×64 grid holding 14 disks of radius 4 on a 3×5 lattice (the last
    /// lattice site is left empty), all with `m0 = 1`.
    pub fn fourteen_tubes() -> Self {
        Self::tube_lattice(64, 64, 4.0, &DEFAULT_TUBE_T2)
    }

    /// Disks of equal radius on a 3×5 lattice spread over the grid, filled
    /// row by row with the given T2 values.
    pub fn tube_lattice(rows: usize, cols: usize, radius: f64, t2s: &[f64]) -> Self {
        let row_centers = [0.22, 0.5, 0.78].map(|f| (f * rows as f64).round());
        let col_centers = [0.125, 0.3125, 0.5, 0.6875, 0.875].map(|f| (f * cols as f64).round());
        let tubes = row_centers
            .iter()
            .flat_map(|&r| col_centers.iter().map(move |&c| [r, c]))
            .zip(t2s)
            .map(|(center, &t2)| Tube {
                center,
                radius,
                m0: 1.0,
                t2,
            })
            .collect();
        Self { rows, cols, tubes }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidLayout(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("layout serializes")
    }
}

/// Rasterized phantom: a region label per pixel plus the region parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    dims: Dims,
    labels: Vec<Option<usize>>,
    params: Vec<TissueParams>,
}

/// Rasterizes `layout`, rejecting disks that leave the grid or overlap.
pub fn make_phantom(layout: &PhantomLayout) -> Result<Phantom> {
    if layout.rows == 0 || layout.cols == 0 {
        return Err(Error::InvalidLayout(
            "grid dimensions must be positive".into(),
        ));
    }
    let dims = Dims::new(layout.rows, layout.cols);
    let mut params = Vec::with_capacity(layout.tubes.len());
    for (i, tube) in layout.tubes.iter().enumerate() {
        let p = TissueParams::new(tube.m0, tube.t2)
            .map_err(|e| Error::InvalidLayout(format!("tube {i}: {e}")))?;
        let [r, c] = tube.center;
        let inside = |x: f64, n: usize| x - tube.radius >= 0.0 && x + tube.radius <= (n - 1) as f64;
        if !(tube.radius.is_finite() && tube.radius > 0.0)
            || !inside(r, layout.rows)
            || !inside(c, layout.cols)
        {
            return Err(Error::InvalidLayout(format!(
                "tube {i} does not fit inside the {}x{} grid",
                layout.rows, layout.cols
            )));
        }
        params.push(p);
    }

    let mut labels = vec![None; dims.len()];
    for (i, tube) in layout.tubes.iter().enumerate() {
        for row in 0..layout.rows {
            for col in 0..layout.cols {
                if tube.contains(row, col) {
                    let slot = &mut labels[dims.index(row, col)];
                    if let Some(other) = *slot {
                        return Err(Error::InvalidLayout(format!(
                            "tubes {other} and {i} overlap at ({row}, {col})"
                        )));
                    }
                    *slot = Some(i);
                }
            }
        }
    }
    Ok(Phantom {
        dims,
        labels,
        params,
    })
}

impl Phantom {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Region index of each pixel; `None` for background.
    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn region_params(&self) -> &[TissueParams] {
        &self.params
    }

    /// Tissue parameters of a pixel; background carries `m0 = 0`.
    pub fn params_at(&self, row: usize, col: usize) -> Option<TissueParams> {
        self.labels[self.dims.index(row, col)].map(|l| self.params[l])
    }

    fn truth_map(&self, kind: MapKind, f: impl Fn(&TissueParams) -> f64) -> ParameterMap {
        let values = self
            .labels
            .iter()
            .map(|l| l.map_or(f64::NAN, |l| f(&self.params[l])))
            .collect();
        let mask = self.labels.iter().map(Option::is_some).collect();
        ParameterMap::new(self.dims, kind, values, mask).expect("phantom map is consistent")
    }

    /// Ground-truth T2 map, masked to the tubes.
    pub fn t2_map(&self) -> ParameterMap {
        self.truth_map(MapKind::T2, |p| p.t2)
    }

    /// Ground-truth M0 map, masked to the tubes.
    pub fn m0_map(&self) -> ParameterMap {
        self.truth_map(MapKind::M0, |p| p.m0)
    }

    /// Multi-echo image series at `times`. Each pixel draws its noise from
    /// its own stream derived from `noise.seed` and the pixel index.
    pub fn series(&self, times: &[f64], noise: &NoiseSpec) -> Result<ImageSeries> {
        let n = self.dims.len();
        let mut data = vec![0.0; times.len() * n];
        for (idx, label) in self.labels.iter().enumerate() {
            let p = label.map_or(TissueParams { m0: 0.0, t2: 1.0 }, |l| self.params[l]);
            let signals = synthesize_signals(&p, times, &noise.with_stream(idx as u64))?;
            for (i, s) in signals.into_iter().enumerate() {
                data[i * n + idx] = s;
            }
        }
        ImageSeries::new(self.dims, times.to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_region_covering_grid() {
        let layout = PhantomLayout {
            rows: 5,
            cols: 5,
            tubes: vec![Tube {
                center: [2.0, 2.0],
                radius: 2.0,
                m0: 1.0,
                t2: 50.0,
            }],
        };
        let ph = make_phantom(&layout).unwrap();
        let t2 = ph.t2_map();
        // a radius-2 disk centred on a 5x5 grid leaves the corners empty
        assert_eq!(t2.masked_values().count(), 13);
        assert!(t2.masked_values().all(|v| v == 50.0));

        // a square grid fully covered needs a disk reaching the corners
        let layout = PhantomLayout {
            rows: 3,
            cols: 3,
            tubes: vec![Tube {
                center: [1.0, 1.0],
                radius: 1.0,
                m0: 1.0,
                t2: 50.0,
            }],
        };
        assert!(make_phantom(&layout).is_ok());
        let layout = PhantomLayout {
            rows: 1,
            cols: 1,
            tubes: vec![Tube {
                center: [0.0, 0.0],
                radius: 0.0,
                m0: 1.0,
                t2: 50.0,
            }],
        };
        assert!(make_phantom(&layout).is_err());
    }

    #[test]
    fn uniform_map_when_region_covers_everything() {
        let layout = PhantomLayout {
            rows: 3,
            cols: 3,
            tubes: vec![Tube {
                center: [1.0, 1.0],
                radius: 1.0,
                m0: 1.0,
                t2: 50.0,
            }],
        };
        let ph = make_phantom(&layout).unwrap();
        // corners are at distance sqrt(2) > 1
        assert_eq!(ph.t2_map().masked_values().count(), 5);
        assert!(ph.t2_map().masked_values().all(|v| v == 50.0));
    }

    #[test]
    fn default_layout_has_fourteen_distinct_tubes() {
        let ph = make_phantom(&PhantomLayout::fourteen_tubes()).unwrap();
        let mut vals: Vec<f64> = ph.t2_map().masked_values().collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        assert_eq!(vals.len(), 14);
        assert!(vals.contains(&5.592));
        assert!(vals.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn background_is_empty() {
        let ph = make_phantom(&PhantomLayout::fourteen_tubes()).unwrap();
        assert_eq!(ph.params_at(0, 0), None);
        let s = ph
            .series(&[10.0, 20.0], &NoiseSpec::gaussian(0.05, 1))
            .unwrap();
        assert_eq!(s.value(0, 0, 0), 0.0);
        assert_eq!(s.value(1, 0, 0), 0.0);
    }

    #[test]
    fn overlap_and_out_of_bounds_rejected() {
        let tube = |r: f64, c: f64| Tube {
            center: [r, c],
            radius: 3.0,
            m0: 1.0,
            t2: 40.0,
        };
        let overlap = PhantomLayout {
            rows: 32,
            cols: 32,
            tubes: vec![tube(10.0, 10.0), tube(10.0, 14.0)],
        };
        assert!(matches!(
            make_phantom(&overlap),
            Err(Error::InvalidLayout(_))
        ));
        let outside = PhantomLayout {
            rows: 32,
            cols: 32,
            tubes: vec![tube(1.0, 10.0)],
        };
        assert!(make_phantom(&outside).is_err());
        let bad_t2 = PhantomLayout {
            rows: 32,
            cols: 32,
            tubes: vec![Tube {
                t2: 0.0,
                ..tube(10.0, 10.0)
            }],
        };
        assert!(make_phantom(&bad_t2).is_err());
    }

    #[test]
    fn layout_toml_roundtrip() {
        let layout = PhantomLayout::fourteen_tubes();
        assert_eq!(PhantomLayout::from_toml(&layout.to_toml()).unwrap(), layout);
        assert!(PhantomLayout::from_toml("rows = 4").is_err());
    }
}
