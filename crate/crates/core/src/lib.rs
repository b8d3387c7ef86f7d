//! Exact (simulation-consistent) subsampling MCMC.
//!
//! The pieces, bottom to top:
//!
//! - [`model`]: AR(1) Student-t likelihood contributions and their data-space
//!   derivatives.
//! - [`control_variates`]: k-means cluster summaries making the proxy sum
//!   `q(theta)` a K-operation computation, and the residuals `d_k = l_k - q_k`
//!   that subsampling actually targets.
//! - [`estimators`]: unbiased, occasionally-negative likelihood estimators
//!   (geometric-series and Poisson-product debiasing) in signed log-space,
//!   the soft lower bound, closed-form variances and the tuning pass.
//! - [`crn`]: the auxiliary randomness (v, G, blocks) and its correlated
//!   proposals.
//! - [`sampler`]: exact-MH baseline and the signed pseudo-marginal chain.
//! - [`diagnostics`]: importance-sampling sign correction, inefficiency
//!   factors, realized cost and kernel density grids.
//! - [`experiment`]: the file-level harness behind the `ssmcmc` CLI.
//!
//! ```
//! use subsample_mcmc::model::{generate_ar1, Parameterization, Theta};
//! use subsample_mcmc::control_variates::{cluster_data, q_sum};
//! use subsample_mcmc::model::EvalCounters;
//!
//! let theta = Theta::student_t(Parameterization::M1, [0.3, 0.6], 5.0)?;
//! let data = generate_ar1(1000, &theta, 7)?;
//! let summaries = cluster_data(&data, 10, 1)?;
//! let counters = EvalCounters::new();
//! let q = q_sum(&theta, &summaries, &counters);
//! assert!(q.is_finite());
//! assert_eq!(counters.derivative_count(), 10);
//! # Ok::<(), subsample_mcmc::error::Error>(())
//! ```

pub mod control_variates;
pub mod crn;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod likelihood;
pub mod model;
pub mod sampler;

pub use error::{Error, Result};
