//! Optimization-based smoothing and filtering for partially observed bilinear
//! chaotic ODEs, with a Taylor ODE solver, derivative-based initial
//! estimators, a Newton MAP solver and Gaussian posterior approximations.

pub mod assumptions;
pub mod config;
pub mod deriv_est;
pub mod dynamics;
pub mod init_est;
pub mod error;
pub mod experiments;
pub mod gaussian_approx;
pub mod linalg;
pub mod map_solver;
pub mod observation;
pub mod oracle;

pub use error::{Error, Result};
