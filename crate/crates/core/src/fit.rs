use serde::{Deserialize, Serialize};

/// Estimated decay parameters of one voxel plus fit diagnostics.
///
/// For network fits the losses are measured on the max-normalized signal;
/// for least-squares fits `loss_bloch` is zero (the model solves the ODE
/// exactly) and `loss_data` is the mean absolute residual in signal units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub m0_hat: f64,
    pub t2_hat: f64,
    pub loss_bloch: f64,
    pub loss_data: f64,
    /// Sum of squared residuals in signal units.
    pub residual_ss: f64,
    pub iters: usize,
    pub converged: bool,
}
