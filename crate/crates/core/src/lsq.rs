//! Least-squares fitting of the mono-exponential model: log-linear
//! regression and a Levenberg-damped Gauss-Newton refinement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::signal::EchoSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LsqMethod {
    #[default]
    LogLinear,
    NonlinearRefined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LsqOptions {
    pub method: LsqMethod,
    /// Echoes at or below this fraction of the maximum are dropped before
    /// the log transform. Non-positive echoes are always dropped.
    pub min_signal: f64,
    pub max_gn_iters: usize,
    /// Stop once the relative step `max_j |δ_j| / |θ_j|` falls below this.
    pub gn_tol: f64,
}

impl Default for LsqOptions {
    fn default() -> Self {
        Self {
            method: LsqMethod::LogLinear,
            min_signal: 0.0,
            max_gn_iters: 100,
            gn_tol: 1e-12,
        }
    }
}

impl LsqOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.min_signal) {
            return Err(Error::InvalidConfig(format!(
                "min_signal must lie in [0, 1), got {}",
                self.min_signal
            )));
        }
        if !(self.gn_tol.is_finite() && self.gn_tol > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gn_tol must be > 0, got {}",
                self.gn_tol
            )));
        }
        Ok(())
    }
}

/// Sum of squared residuals of the model `(m0, t2)` against `series`.
pub fn sum_squares(series: &EchoSeries, m0: f64, t2: f64) -> f64 {
    series
        .times()
        .iter()
        .zip(series.signals())
        .map(|(&t, &s)| {
            let r = s - m0 * (-t / t2).exp();
            r * r
        })
        .sum()
}

fn mean_abs(series: &EchoSeries, m0: f64, t2: f64) -> f64 {
    let n = series.len() as f64;
    series
        .times()
        .iter()
        .zip(series.signals())
        .map(|(&t, &s)| (s - m0 * (-t / t2).exp()).abs())
        .sum::<f64>()
        / n
}

fn result(series: &EchoSeries, m0: f64, t2: f64, iters: usize, converged: bool) -> FitResult {
    FitResult {
        m0_hat: m0,
        t2_hat: t2,
        loss_bloch: 0.0,
        loss_data: mean_abs(series, m0, t2),
        residual_ss: sum_squares(series, m0, t2),
        iters,
        converged,
    }
}

/// Ordinary least squares of `ln S = ln m0 - t / t2` over the echoes above
/// the `min_signal` threshold.
pub fn fit_log_linear(series: &EchoSeries, opts: &LsqOptions) -> Result<FitResult> {
    opts.validate()?;
    let cutoff = opts.min_signal * series.max_signal();
    let (xs, ys): (Vec<f64>, Vec<f64>) = series
        .times()
        .iter()
        .zip(series.signals())
        .filter(|(_, &s)| s > cutoff && s > 0.0)
        .map(|(&t, &s)| (t, s.ln()))
        .unzip();
    if xs.len() < 2 {
        return Err(Error::Degenerate(format!(
            "{} usable echoes, need at least 2",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let (sxy, sxx) = xs.iter().zip(&ys).fold((0.0, 0.0), |(sxy, sxx), (x, y)| {
        let dx = x - x_mean;
        (sxy + dx * (y - y_mean), sxx + dx * dx)
    });
    let slope = sxy / sxx;
    if slope.is_nan() || slope >= 0.0 {
        return Err(Error::NonDecaying(slope));
    }
    let intercept = y_mean - slope * x_mean;
    Ok(result(series, intercept.exp(), -1.0 / slope, 0, true))
}

/// Partial derivatives of `m0 * exp(-t / t2)` with respect to `(m0, t2)`.
pub fn model_jacobian(m0: f64, t2: f64, t: f64) -> [f64; 2] {
    let e = (-t / t2).exp();
    [e, m0 * t * e / (t2 * t2)]
}

/// Levenberg-Marquardt refinement of the nonlinear model starting at
/// `init`. The sum of squares never increases across accepted steps; if no
/// step can be accepted the initial estimate is returned unconverged.
pub fn fit_nonlinear(
    series: &EchoSeries,
    init: &FitResult,
    opts: &LsqOptions,
) -> Result<FitResult> {
    opts.validate()?;
    if !(init.t2_hat.is_finite() && init.t2_hat > 0.0 && init.m0_hat.is_finite()) {
        return Err(Error::InvalidParams(format!(
            "initial t2 must be > 0, got {}",
            init.t2_hat
        )));
    }
    let (mut m0, mut t2) = (init.m0_hat, init.t2_hat);
    let mut ss = sum_squares(series, m0, t2);
    let mut lambda = 1e-3;
    let mut iters = 0;
    let mut converged = false;

    while iters < opts.max_gn_iters {
        // normal equations J^T J δ = J^T r
        let (mut a11, mut a12, mut a22, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&t, &s) in series.times().iter().zip(series.signals()) {
            let [j1, j2] = model_jacobian(m0, t2, t);
            let r = s - m0 * (-t / t2).exp();
            a11 += j1 * j1;
            a12 += j1 * j2;
            a22 += j2 * j2;
            g1 += j1 * r;
            g2 += j2 * r;
        }
        if g1 == 0.0 && g2 == 0.0 {
            converged = true;
            break;
        }

        let mut accepted = None;
        while lambda < 1e16 {
            let d11 = a11 * (1.0 + lambda);
            let d22 = a22 * (1.0 + lambda);
            let det = d11 * d22 - a12 * a12;
            if det.is_finite() && det > 0.0 {
                let dm0 = (d22 * g1 - a12 * g2) / det;
                let dt2 = (d11 * g2 - a12 * g1) / det;
                let (nm0, nt2) = (m0 + dm0, t2 + dt2);
                if nt2 > 0.0 && nm0.is_finite() {
                    let nss = sum_squares(series, nm0, nt2);
                    if nss <= ss {
                        accepted = Some((nm0, nt2, nss, dm0, dt2));
                        break;
                    }
                }
            }
            lambda *= 10.0;
        }
        let Some((nm0, nt2, nss, dm0, dt2)) = accepted else {
            break;
        };
        iters += 1;
        let step = (dm0 / m0.abs().max(f64::MIN_POSITIVE))
            .abs()
            .max((dt2 / t2).abs());
        m0 = nm0;
        t2 = nt2;
        ss = nss;
        lambda = (lambda / 10.0).max(1e-12);
        if step < opts.gn_tol {
            converged = true;
            break;
        }
    }

    if iters == 0 && !converged {
        return Ok(FitResult {
            converged: false,
            ..*init
        });
    }
    Ok(result(series, m0, t2, iters, converged))
}

/// Log-linear fit, refined by [`fit_nonlinear`] when the options ask for it.
pub fn fit_lsq(series: &EchoSeries, opts: &LsqOptions) -> Result<FitResult> {
    let init = fit_log_linear(series, opts)?;
    match opts.method {
        LsqMethod::LogLinear => Ok(init),
        LsqMethod::NonlinearRefined => fit_nonlinear(series, &init, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synthesize_series, NoiseSpec, TissueParams};

    fn exact(m0: f64, t2: f64, times: &[f64]) -> EchoSeries {
        synthesize_series(&TissueParams::new(m0, t2).unwrap(), times, &NoiseSpec::NONE).unwrap()
    }

    #[test]
    fn two_point_log_linear() {
        let s = exact(1.0, 50.0, &[10.0, 90.0]);
        let f = fit_log_linear(&s, &LsqOptions::default()).unwrap();
        assert!((f.m0_hat - 1.0).abs() < 1e-9);
        assert!((f.t2_hat - 50.0).abs() / 50.0 < 1e-9);

        let f3 = fit_log_linear(&s.scaled(3.0), &LsqOptions::default()).unwrap();
        assert!((f3.t2_hat - f.t2_hat).abs() / f.t2_hat < 1e-13);
        assert!((f3.m0_hat - 3.0).abs() < 1e-9);
    }

    #[test]
    fn constant_signal_is_non_decaying() {
        let s = EchoSeries::new(vec![10.0, 20.0, 30.0], vec![1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            fit_log_linear(&s, &LsqOptions::default()),
            Err(Error::NonDecaying(_))
        ));
    }

    #[test]
    fn too_few_usable_echoes() {
        let s = EchoSeries::new(vec![10.0, 20.0, 30.0], vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            fit_log_linear(&s, &LsqOptions::default()),
            Err(Error::Degenerate(_))
        ));
        let s = EchoSeries::new(vec![10.0, 20.0, 30.0], vec![1.0, 0.5, 0.2]).unwrap();
        let opts = LsqOptions {
            min_signal: 0.6,
            ..Default::default()
        };
        assert!(matches!(
            fit_log_linear(&s, &opts),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn bad_options_rejected() {
        let s = exact(1.0, 50.0, &[10.0, 20.0]);
        let opts = LsqOptions {
            min_signal: 1.0,
            ..Default::default()
        };
        assert!(fit_log_linear(&s, &opts).is_err());
    }

    #[test]
    fn nonlinear_stationary_at_truth() {
        let times: Vec<f64> = (1..=9).map(|k| 10.0 * k as f64).collect();
        let s = exact(1.0, 50.0, &times);
        let init = FitResult {
            m0_hat: 1.0,
            t2_hat: 50.0,
            loss_bloch: 0.0,
            loss_data: 0.0,
            residual_ss: 0.0,
            iters: 0,
            converged: true,
        };
        let f = fit_nonlinear(&s, &init, &LsqOptions::default()).unwrap();
        assert!(f.iters <= 1, "took {} steps", f.iters);
        assert!((f.t2_hat - 50.0).abs() < 1e-12);
        assert!((f.m0_hat - 1.0).abs() < 1e-14);
    }

    #[test]
    fn nonlinear_recovers_from_perturbed_start() {
        let times: Vec<f64> = (1..=9).map(|k| 10.0 * k as f64).collect();
        for t2 in [5.592, 20.0, 50.0, 100.0] {
            let s = exact(1.0, t2, &times);
            let init = FitResult {
                m0_hat: 1.0,
                t2_hat: 1.5 * t2,
                loss_bloch: 0.0,
                loss_data: 0.0,
                residual_ss: 0.0,
                iters: 0,
                converged: true,
            };
            let f = fit_nonlinear(&s, &init, &LsqOptions::default()).unwrap();
            assert!(f.converged);
            assert!((f.t2_hat - t2).abs() / t2 < 1e-8, "t2 {t2}: {}", f.t2_hat);
            assert!((f.m0_hat - 1.0).abs() < 1e-8);
            assert!(f.residual_ss <= sum_squares(&s, 1.0, 1.5 * t2));
        }
    }

    #[test]
    fn nonlinear_rejects_bad_init() {
        let s = exact(1.0, 50.0, &[10.0, 20.0]);
        let init = FitResult {
            m0_hat: 1.0,
            t2_hat: -1.0,
            loss_bloch: 0.0,
            loss_data: 0.0,
            residual_ss: 0.0,
            iters: 0,
            converged: true,
        };
        assert!(fit_nonlinear(&s, &init, &LsqOptions::default()).is_err());
    }
}
