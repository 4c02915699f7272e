//! Monte-Carlo solvers for semilinear Kolmogorov equations
//!
//! `u_t + 1/2 Tr(sigma sigma^T Hess u) + <mu, grad u> + f(t, x, u) = 0`,
//! `u(T, .) = g`, through the stochastic fixed-point equation
//! `v(t,x) = E[g(X_T) + int_t^T f(s, X_s, v(s, X_s)) ds]`.
//!
//! Numerical kernels are generic over [`scalar::Real`]; problem descriptions
//! hold `f64` coefficients and the aliases below fix the scalar to `f64`.

pub mod app;
pub mod expr;
pub mod lyapunov;
pub mod oracle;
pub mod quadrature;
pub mod rng;
pub mod scalar;
pub mod sde;
pub mod sfpe;
pub mod stats;

pub use expr::Expression;
pub use lyapunov::{LyapunovFamily, LyapunovSpec};
pub use rng::RngStream;
pub use scalar::Real;
pub use sde::SdeCoefficients;
pub use sfpe::{GrowthClass, InitPolicy, MlpConfig, PicardConfig, ProblemSpec, TimeRule};

pub type Estimate = stats::Estimate<f64>;
pub type PicardOutput = sfpe::PicardOutput<f64>;
pub type PathResult = sde::PathResult<f64>;
pub type Derivatives = lyapunov::Derivatives<f64>;
