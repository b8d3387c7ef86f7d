//! AR(1) observation models with Student-t errors, their log-likelihood
//! contributions and the data-space derivatives used by the control variates.
//!
//! A contribution is indexed by the feature pair `z_k = (y_{k-1}, y_k)`; the
//! likelihood conditions on the first observation, which only enters as a lag.
//!
//! ```
//! use subsample_mcmc::model::{generate_ar1, full_loglik, loglik_contrib, Parameterization, Theta};
//!
//! let theta = Theta::student_t(Parameterization::M1, [0.3, 0.6], 5.0)?;
//! let data = generate_ar1(500, &theta, 1)?;
//! assert_eq!(data.n_eff(), 499);
//!
//! // The full log-likelihood is the sum of the per-pair contributions.
//! let total: f64 = (0..data.n_eff())
//!     .map(|k| loglik_contrib(&theta, data.z(k)).unwrap())
//!     .sum();
//! assert!((total - full_loglik(&theta, &data)?).abs() < 1e-9);
//! # Ok::<(), subsample_mcmc::error::Error>(())
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT as StudentTSampler};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Mean-function parameterization of the AR(1) process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameterization {
    /// `y_t = b0 + b1 y_{t-1} + e_t`
    M1,
    /// `y_t = mu + rho (y_{t-1} - mu) + e_t`
    M2,
}

/// Error distribution. The Gaussian variant has a log-density quadratic in the
/// data and is used as a test fixture for the control variates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Noise {
    StudentT { nu: f64 },
    Gaussian { sigma: f64 },
}

/// Model parameter vector (two coordinates for both parameterizations) plus
/// the fixed error distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub values: [f64; 2],
    pub param: Parameterization,
    pub noise: Noise,
}

impl Theta {
    pub fn student_t(param: Parameterization, values: [f64; 2], nu: f64) -> Result<Self> {
        if !(nu > 0.0) {
            return Err(Error::InvalidInput(format!("nu must be positive, got {nu}")));
        }
        Ok(Theta { values, param, noise: Noise::StudentT { nu } })
    }

    pub fn gaussian(param: Parameterization, values: [f64; 2], sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Theta { values, param, noise: Noise::Gaussian { sigma } })
    }

    pub fn with_values(&self, values: [f64; 2]) -> Self {
        Theta { values, ..*self }
    }

    /// Conditional mean of `y_k` given the lag `x = y_{k-1}`.
    pub fn mean(&self, x: f64) -> f64 {
        match self.param {
            Parameterization::M1 => self.values[0] + self.values[1] * x,
            Parameterization::M2 => self.values[0] + self.values[1] * (x - self.values[0]),
        }
    }

    /// Autoregressive slope (b1 or rho).
    pub fn slope(&self) -> f64 {
        self.values[1]
    }
}

/// Observation sequence plus the per-contribution feature pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSet {
    pub y: Vec<f64>,
    z: Vec<[f64; 2]>,
}

impl DataSet {
    pub fn new(y: Vec<f64>) -> Result<Self> {
        if y.len() < 2 {
            return Err(Error::InvalidInput(format!("need n >= 2 observations, got {}", y.len())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite observation".into()));
        }
        let z = y.windows(2).map(|w| [w[0], w[1]]).collect();
        Ok(DataSet { y, z })
    }

    /// Number of likelihood contributions, `n - 1`.
    pub fn n_eff(&self) -> usize {
        self.z.len()
    }

    /// Feature pair of contribution `k` (0-based), `(y_{k-1}, y_k)`.
    pub fn z(&self, k: usize) -> [f64; 2] {
        self.z[k]
    }

    pub fn pairs(&self) -> &[[f64; 2]] {
        &self.z
    }
}

/// Per-coordinate uniform prior box, treated as an open interval.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PriorSpec {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

impl PriorSpec {
    pub fn new(lower: [f64; 2], upper: [f64; 2]) -> Result<Self> {
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidInput("prior bounds must satisfy lower < upper".into()));
        }
        Ok(PriorSpec { lower, upper })
    }

    /// The reference experiment prior: U(-5,5) x U(0,1).
    pub fn experiment_default() -> Self {
        PriorSpec { lower: [-5.0, 0.0], upper: [5.0, 1.0] }
    }
}

/// Counters for likelihood-contribution and derivative evaluations, used for
/// the `G m_b + K` cost accounting.
#[derive(Debug, Default)]
pub struct EvalCounters {
    pub contrib: AtomicU64,
    pub derivative: AtomicU64,
}

impl EvalCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_contrib(&self, n: u64) {
        self.contrib.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_derivative(&self, n: u64) {
        self.derivative.fetch_add(n, Ordering::Relaxed);
    }

    pub fn contrib_count(&self) -> u64 {
        self.contrib.load(Ordering::Relaxed)
    }

    pub fn derivative_count(&self) -> u64 {
        self.derivative.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.contrib.store(0, Ordering::Relaxed);
        self.derivative.store(0, Ordering::Relaxed);
    }
}

/// Log-density of the error distribution at `eps`, with normalizing constant.
fn ln_error_density(noise: Noise, eps: f64) -> f64 {
    match noise {
        Noise::StudentT { nu } => {
            ln_gamma((nu + 1.0) / 2.0)
                - ln_gamma(nu / 2.0)
                - 0.5 * (nu * std::f64::consts::PI).ln()
                - 0.5 * (nu + 1.0) * (1.0 + eps * eps / nu).ln()
        }
        Noise::Gaussian { sigma } => {
            -0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln()
                - eps * eps / (2.0 * sigma * sigma)
        }
    }
}

/// First and second derivatives of the error log-density with respect to eps.
fn ln_error_density_d(noise: Noise, eps: f64) -> (f64, f64) {
    match noise {
        Noise::StudentT { nu } => {
            let denom = nu + eps * eps;
            let d1 = -(nu + 1.0) * eps / denom;
            let d2 = -(nu + 1.0) * (nu - eps * eps) / (denom * denom);
            (d1, d2)
        }
        Noise::Gaussian { sigma } => {
            let s2 = sigma * sigma;
            (-eps / s2, -1.0 / s2)
        }
    }
}

/// Log-likelihood contribution `l_k(theta)` for the feature pair `z = (y_{k-1}, y_k)`.
pub fn loglik_contrib(theta: &Theta, z: [f64; 2]) -> Result<f64> {
    if !z[0].is_finite() || !z[1].is_finite() || theta.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite input to loglik_contrib".into()));
    }
    let eps = z[1] - theta.mean(z[0]);
    Ok(ln_error_density(theta.noise, eps))
}

/// Full-data log-likelihood, summing all `n - 1` contributions.
pub fn full_loglik(theta: &Theta, data: &DataSet) -> Result<f64> {
    let mut total = 0.0;
    for &z in data.pairs() {
        total += loglik_contrib(theta, z)?;
    }
    Ok(total)
}

/// As `full_loglik` but charging the evaluation counter.
pub fn full_loglik_counted(theta: &Theta, data: &DataSet, counters: &EvalCounters) -> Result<f64> {
    counters.add_contrib(data.n_eff() as u64);
    full_loglik(theta, data)
}

/// Uniform box log-prior: exactly 0 inside the open box, -inf outside.
pub fn log_prior(theta: &Theta, prior: &PriorSpec) -> f64 {
    let inside = theta
        .values
        .iter()
        .zip(prior.lower.iter().zip(&prior.upper))
        .all(|(v, (l, u))| v > l && v < u);
    if inside {
        0.0
    } else {
        f64::NEG_INFINITY
    }
}

/// Value, gradient and Hessian of `z -> loglik_contrib(theta, z)` at `z`,
/// in closed form. The gradient/Hessian are with respect to the data pair,
/// which is the expansion variable of the cluster control variates.
pub fn contrib_value_grad_hess(theta: &Theta, z: [f64; 2]) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    let eps = z[1] - theta.mean(z[0]);
    let value = ln_error_density(theta.noise, eps);
    let (d1, d2) = ln_error_density_d(theta.noise, eps);
    // eps is linear in z: d eps / d z = (-slope, 1)
    let s = theta.slope();
    let j = [-s, 1.0];
    let grad = [d1 * j[0], d1 * j[1]];
    let hess = [
        [d2 * j[0] * j[0], d2 * j[0] * j[1]],
        [d2 * j[1] * j[0], d2 * j[1] * j[1]],
    ];
    (value, grad, hess)
}

/// Simulate `n` observations from the AR(1) process, discarding a 1000-step
/// warm-up started at the process mean. Deterministic given the seed.
pub fn generate_ar1(n: usize, theta: &Theta, seed: u64) -> Result<DataSet> {
    if theta.slope().abs() >= 1.0 {
        return Err(Error::Nonstationary(theta.slope().abs()));
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!("need n >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_eps = |rng: &mut ChaCha8Rng| -> f64 {
        match theta.noise {
            Noise::StudentT { nu } => {
                StudentTSampler::new(nu).expect("nu validated").sample(rng)
            }
            Noise::Gaussian { sigma } => {
                let z: f64 = rand_distr::StandardNormal.sample(rng);
                sigma * z
            }
        }
    };
    // Unconditional mean of the process: b0/(1-b1) for M1, mu for M2.
    let mut y = match theta.param {
        Parameterization::M1 => theta.values[0] / (1.0 - theta.values[1]),
        Parameterization::M2 => theta.values[0],
    };
    for _ in 0..1000 {
        y = theta.mean(y) + draw_eps(&mut rng);
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        y = theta.mean(y) + draw_eps(&mut rng);
        out.push(y);
    }
    DataSet::new(out)
}
