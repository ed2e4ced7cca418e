//! Voxel-wise T2 mapping of multi-echo magnitude images.
//!
//! Two estimators are provided: least-squares fitting of the
//! mono-exponential decay ([`lsq`]) and a small physics-informed network
//! whose loss penalizes violations of the transverse relaxation ODE
//! `dM/dt + M/T2 = 0` ([`trainer`]). Trained networks can re-synthesize
//! contrast images at arbitrary echo times ([`pipeline::generate_frames`]).
//!
//! Times are milliseconds everywhere.

pub mod config;
pub mod error;
pub mod fit;
pub mod format;
pub mod lsq;
pub mod net;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod score;
pub mod signal;
pub mod trainer;
pub mod trial;

pub use error::{Error, Result};
pub use fit::FitResult;
