//! Unbiased, occasionally-negative likelihood estimators built from batch
//! subsample estimates of the residual sum `d`, assembled entirely in signed
//! log-space.
//!
//! Two debiasing families are provided: the geometric-weighted series
//! estimator (RG) and the Poisson product estimator. Both multiply
//! `exp(q + a)` by a randomly-truncated correction built from batch estimates
//! `dhat^(h)`; `a` is a (soft) lower bound on those estimates.
//!
//! ```
//! use subsample_mcmc::estimators::{poisson_estimate, SignedLog};
//!
//! // When every batch estimate equals d and a = d - lambda, every product
//! // factor is 1 and the estimate collapses to exp(q + d) exactly, for any
//! // number of batches.
//! let (d, lambda, q) = (0.4, 2.0, -7.0);
//! let batches = vec![d; 5];
//! let est = poisson_estimate(&batches, lambda, q, d - lambda);
//! assert_eq!(est.sign, 1);
//! assert!((est.log_mag - (q + d)).abs() < 1e-12);
//!
//! // Signed log-space round trip.
//! let x = SignedLog::from_value(-0.125);
//! assert_eq!(x.sign, -1);
//! assert!((x.value() + 0.125).abs() < 1e-15);
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Debiasing family with its G-distribution parameter.
///
/// For RG, G is geometric on {0, 1, 2, ...} with `Pr(G >= g) = (1+eps)^-g`,
/// so `E[G] = 1/eps`. For Poisson, `E[G] = lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Family {
    Rg { epsilon: f64 },
    Poisson { lambda: f64 },
}

impl Family {
    pub fn expected_g(&self) -> f64 {
        match *self {
            Family::Rg { epsilon } => 1.0 / epsilon,
            Family::Poisson { lambda } => lambda,
        }
    }

    pub fn rg_from_expected_g(e_g: f64) -> Self {
        Family::Rg { epsilon: 1.0 / e_g }
    }
}

/// How a batch subsample is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingScheme {
    /// `m_b` indices drawn iid uniformly with replacement.
    FixedWithReplacement,
    /// Independent inclusion indicators with `Pr(u_k = 1) = m_b / n`.
    BernoulliInclusion,
}

/// Full estimator configuration for a sampler run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub family: Family,
    pub scheme: SamplingScheme,
    /// Batch subsample size (expected size for Bernoulli inclusion).
    pub m_b: usize,
    /// Frozen soft lower bound, log-likelihood units.
    pub bound: f64,
    /// Probability that the bound holds for a realization of all batches.
    pub p_tilde: f64,
}

impl EstimatorConfig {
    /// Prior expected subsample size `m_bar = m_b E[G]`.
    pub fn m_bar(&self) -> f64 {
        self.m_b as f64 * self.family.expected_g()
    }

    pub fn validate(&self, n_eff: usize) -> Result<()> {
        if self.m_b == 0 || self.m_b > n_eff {
            return Err(Error::InvalidConfig(format!("need 1 <= m_b <= n_eff, got m_b = {}", self.m_b)));
        }
        if !(self.p_tilde > 0.0 && self.p_tilde < 1.0) {
            return Err(Error::InvalidConfig(format!("p_tilde must be in (0,1), got {}", self.p_tilde)));
        }
        match self.family {
            Family::Rg { epsilon } if !(epsilon > 0.0) => {
                Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")))
            }
            Family::Poisson { lambda } if !(lambda > 0.0) => {
                Err(Error::InvalidConfig(format!("lambda must be positive, got {lambda}")))
            }
            _ => Ok(()),
        }
    }
}

/// A possibly-negative value stored as (log-magnitude, sign).
/// `sign == 0` iff the value is exactly zero (log_mag is -inf).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignedLog {
    pub log_mag: f64,
    pub sign: i8,
}

impl SignedLog {
    pub fn zero() -> Self {
        SignedLog { log_mag: f64::NEG_INFINITY, sign: 0 }
    }

    pub fn from_value(v: f64) -> Self {
        if v == 0.0 {
            Self::zero()
        } else {
            SignedLog { log_mag: v.abs().ln(), sign: if v > 0.0 { 1 } else { -1 } }
        }
    }

    pub fn value(&self) -> f64 {
        self.sign as f64 * self.log_mag.exp()
    }
}

/// Signed log-sum-exp over (log-magnitude, sign) terms.
pub fn signed_logsumexp(terms: &[(f64, i8)]) -> SignedLog {
    let max = terms
        .iter()
        .filter(|(_, s)| *s != 0)
        .map(|(lm, _)| *lm)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return SignedLog::zero();
    }
    let mut acc = 0.0;
    for &(lm, s) in terms {
        if s != 0 {
            acc += s as f64 * (lm - max).exp();
        }
    }
    if acc == 0.0 {
        SignedLog::zero()
    } else {
        SignedLog { log_mag: max + acc.abs().ln(), sign: if acc > 0.0 { 1 } else { -1 } }
    }
}

/// Fixed-size with-replacement batch estimate `(n/m_b) sum_i d_{u_i}`.
pub fn dhat_fixed(mut residual: impl FnMut(usize) -> f64, u: &[usize], n_eff: usize) -> Result<f64> {
    if u.is_empty() {
        return Err(Error::InvalidConfig("empty subsample index vector".into()));
    }
    if let Some(&bad) = u.iter().find(|&&i| i >= n_eff) {
        return Err(Error::IndexOutOfRange { index: bad, len: n_eff });
    }
    let mut sum = 0.0;
    for &i in u {
        sum += residual(i);
    }
    Ok(n_eff as f64 / u.len() as f64 * sum)
}

/// Bernoulli-inclusion batch estimate `(n/m_b) sum_k u_k d_k`.
pub fn dhat_bernoulli(mut residual: impl FnMut(usize) -> f64, u: &[bool], m_b: usize) -> Result<f64> {
    if m_b == 0 {
        return Err(Error::InvalidConfig("m_b must be positive".into()));
    }
    let mut sum = 0.0;
    for (k, &inc) in u.iter().enumerate() {
        if inc {
            sum += residual(k);
        }
    }
    Ok(u.len() as f64 / m_b as f64 * sum)
}

/// Soft lower bound `a~ = dhat + sigma_b_hat * T^-1_{m-1}(1 - p~^(1/G))`,
/// the value undershooting all G batch estimates with probability `p_tilde`.
pub fn soft_bound(d_hat: f64, sigma_b_hat: f64, g: u64, p_tilde: f64, m: usize) -> Result<f64> {
    if m < 2 {
        return Err(Error::InvalidConfig(format!("need m >= 2 for the t quantile, got {m}")));
    }
    if g == 0 {
        return Err(Error::InvalidConfig("need G >= 1 for the soft bound".into()));
    }
    if !(p_tilde > 0.0 && p_tilde < 1.0) {
        return Err(Error::InvalidConfig(format!("p_tilde must be in (0,1), got {p_tilde}")));
    }
    if sigma_b_hat == 0.0 {
        return Ok(d_hat);
    }
    let prob = 1.0 - p_tilde.powf(1.0 / g as f64);
    let t = StudentsT::new(0.0, 1.0, (m - 1) as f64)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(d_hat + sigma_b_hat * t.inverse_cdf(prob))
}

/// Soft bound under known (d, sigma_b), using the standard normal quantile.
pub fn soft_bound_known(d: f64, sigma_b: f64, g: f64, p_tilde: f64) -> f64 {
    if sigma_b == 0.0 {
        return d;
    }
    let prob = 1.0 - p_tilde.powf(1.0 / g);
    let n = Normal::new(0.0, 1.0).unwrap();
    d + sigma_b * n.inverse_cdf(prob)
}

/// Geometric-weighted series estimator, assembled by signed log-sum-exp:
/// `exp(q+a) (1 + sum_g (1+eps)^g / g! prod_{h<=g} (dhat^(h) - a))`.
pub fn rg_estimate(batches: &[f64], epsilon: f64, q: f64, a: f64) -> SignedLog {
    let log1pe = (1.0 + epsilon).ln();
    let mut terms: Vec<(f64, i8)> = Vec::with_capacity(batches.len() + 1);
    terms.push((0.0, 1)); // the leading 1
    let mut log_prod = 0.0;
    let mut sign_prod: i8 = 1;
    for (g, &dhat) in batches.iter().enumerate() {
        let factor = dhat - a;
        if factor == 0.0 {
            sign_prod = 0;
        } else {
            log_prod += factor.abs().ln();
            if factor < 0.0 {
                sign_prod = -sign_prod;
            }
        }
        if sign_prod == 0 {
            break; // all later terms carry the zero factor
        }
        let gf = (g + 1) as f64;
        terms.push((gf * log1pe - ln_gamma(gf + 1.0) + log_prod, sign_prod));
    }
    let mut out = signed_logsumexp(&terms);
    if out.sign != 0 {
        out.log_mag += q + a;
    }
    out
}

/// Poisson product estimator `exp(q+a+lambda) prod_h (dhat^(h) - a)/lambda`.
/// The empty product (G = 0) is 1.
pub fn poisson_estimate(batches: &[f64], lambda: f64, q: f64, a: f64) -> SignedLog {
    let mut log_mag = q + a + lambda;
    let mut sign: i8 = 1;
    for &dhat in batches {
        let factor = dhat - a;
        if factor == 0.0 {
            return SignedLog::zero();
        }
        log_mag += factor.abs().ln() - lambda.ln();
        if factor < 0.0 {
            sign = -sign;
        }
    }
    SignedLog { log_mag, sign }
}

/// Evaluate either family on a batch list.
pub fn estimate(family: Family, batches: &[f64], q: f64, a: f64) -> SignedLog {
    match family {
        Family::Rg { epsilon } => rg_estimate(batches, epsilon, q, a),
        Family::Poisson { lambda } => poisson_estimate(batches, lambda, q, a),
    }
}

/// Closed-form variance of the Poisson estimator:
/// `exp(2(q+a)) (exp(lambda + (sigma_b^2 + (d-a)^2)/lambda) - exp(2(d-a)))`.
/// Returns the value and an overflow flag (+inf sentinel when the exponents
/// exceed the finite range).
pub fn poisson_variance(q: f64, a: f64, d: f64, sigma2_b: f64, lambda: f64) -> (f64, bool) {
    let prefactor = 2.0 * (q + a);
    let inner1 = lambda + (sigma2_b + (d - a) * (d - a)) / lambda;
    let inner2 = 2.0 * (d - a);
    if prefactor + inner1.max(inner2) > f64::MAX.ln() {
        return (f64::INFINITY, true);
    }
    (prefactor.exp() * (inner1.exp() - inner2.exp()), false)
}

/// Delta-method approximation of `V[log L_hat^Pois]`:
/// `lambda sigma_b^2/(d-a)^2 + lambda (log((d-a)/lambda) - sigma_b^2/(2(d-a)^2))^2`.
pub fn loglik_variance_approx(d: f64, a: f64, sigma2_b: f64, lambda: f64) -> Result<f64> {
    if d <= a {
        return Err(Error::Domain(format!("need d > a, got d = {d}, a = {a}")));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig(format!("lambda must be positive, got {lambda}")));
    }
    let gap2 = (d - a) * (d - a);
    let center = ((d - a) / lambda).ln() - sigma2_b / (2.0 * gap2);
    Ok(lambda * sigma2_b / gap2 + lambda * center * center)
}

/// `lambda* = sqrt(sigma_b^2 + (d-a)^2)`, the variance-minimizing lambda for
/// a fixed bound. Returns (lambda, degenerate flag).
pub fn optimal_lambda(d: f64, a: f64, sigma2_b: f64) -> (f64, bool) {
    let v = (sigma2_b + (d - a) * (d - a)).sqrt();
    (v, v == 0.0)
}

/// Calibration statistics from a full residual pass at a reference theta.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Calibration {
    /// Exact residual sum at the reference theta.
    pub d: f64,
    /// Dispersion `S = n_eff * sum_k (d_k - dbar)^2`, so `sigma_b^2 = S / m_b`.
    pub dispersion: f64,
    pub n_eff: usize,
}

/// Result of the variance-targeted tuning pass.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TuneResult {
    pub config: EstimatorConfig,
    /// sigma_LL^2 achieved at the chosen m_b.
    pub achieved: f64,
    /// sigma_b^2 at the chosen m_b.
    pub sigma2_b: f64,
    /// True when m_b hit its lower clamp of 1 without reaching the target.
    pub clamped: bool,
}

fn sigma_ll2_at(family: Family, cal: &Calibration, p_tilde: f64, m_b: usize) -> Result<f64> {
    let sigma2_b = cal.dispersion / m_b as f64;
    let e_g = family.expected_g();
    let a = soft_bound_known(cal.d, sigma2_b.sqrt(), e_g.max(1.0), p_tilde);
    match family {
        Family::Poisson { lambda } => loglik_variance_approx(cal.d, a, sigma2_b, lambda),
        Family::Rg { epsilon } => Ok(rg_sigma_ll2_monte_carlo(cal.d, a, sigma2_b, epsilon, 4000, 0xC0FFEE)),
    }
}

/// Monte Carlo estimate of V[log |L_hat^RG|] over positive-sign realizations,
/// simulating batch estimates from the N(d, sigma_b^2) batch model. The RG
/// log-variance has no tractable closed form.
pub fn rg_sigma_ll2_monte_carlo(
    d: f64,
    a: f64,
    sigma2_b: f64,
    epsilon: f64,
    replications: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma_b = sigma2_b.sqrt();
    let p = epsilon / (1.0 + epsilon);
    let mut logs = Vec::with_capacity(replications);
    for _ in 0..replications {
        // Geometric on {0,1,...}: count failures before first success.
        let mut g = 0u64;
        while rng.random::<f64>() >= p {
            g += 1;
            if g > 10_000 {
                break;
            }
        }
        let batches: Vec<f64> = (0..g)
            .map(|_| d + sigma_b * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let est = rg_estimate(&batches, epsilon, 0.0, a);
        if est.sign > 0 {
            logs.push(est.log_mag);
        }
    }
    if logs.len() < 2 {
        return f64::INFINITY;
    }
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    logs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (logs.len() - 1) as f64
}

/// Choose `m_b` so that sigma_LL^2 hits the target within 10%, keeping the
/// G-distribution parameter fixed. Scans a geometric m_b grid, then refines
/// around the best candidate. The bound recorded in the config is the soft
/// bound at the chosen m_b.
pub fn tune_config(
    target_sigma_ll2: f64,
    family: Family,
    scheme: SamplingScheme,
    cal: &Calibration,
    p_tilde: f64,
) -> Result<TuneResult> {
    let n = cal.n_eff;
    let mut grid: Vec<usize> = Vec::new();
    let mut m = 1.0f64;
    while (m as usize) <= n {
        let mi = m as usize;
        if grid.last() != Some(&mi) {
            grid.push(mi);
        }
        m *= 1.05;
    }
    if grid.last() != Some(&n) {
        grid.push(n);
    }

    let value = |m_b: usize| -> f64 {
        match sigma_ll2_at(family, cal, p_tilde, m_b) {
            Ok(v) if v.is_finite() => v,
            _ => f64::INFINITY,
        }
    };
    let score = |m_b: usize| -> f64 { (value(m_b) - target_sigma_ll2).abs() };
    let values: Vec<f64> = grid.iter().map(|&m| value(m)).collect();

    // sigma_LL^2 is U-shaped in m_b: growing batches first shrinks the batch
    // noise, but past the minimum the log-term |ln(c sigma_b / lambda)| grows
    // again. Only the initial decreasing branch reflects genuine tuning; the
    // rising branch inflates noise by *adding* data, so it is excluded.
    let min_idx = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);

    // If even the cheapest batch size produces less noise than asked for,
    // clamp there: undershooting the noise budget is benign.
    let clamped = values[0] < 0.9 * target_sigma_ll2;
    let mut best;
    if clamped {
        best = 1;
    } else {
        best = grid[0];
        let mut best_score = score(best);
        for &m_b in &grid[1..=min_idx] {
            let s = score(m_b);
            if s < best_score {
                best_score = s;
                best = m_b;
            }
        }
        // Integer refinement around the winner, staying on the decreasing branch.
        let lo = (best as f64 / 1.06).max(1.0) as usize;
        let hi = ((best as f64 * 1.06) as usize + 1).min(grid[min_idx]);
        for m_b in lo..=hi {
            let s = score(m_b);
            if s < best_score {
                best_score = s;
                best = m_b;
            }
        }
    }

    let achieved = sigma_ll2_at(family, cal, p_tilde, best)?;
    let sigma2_b = cal.dispersion / best as f64;
    if !clamped && (achieved - target_sigma_ll2).abs() > 0.1 * target_sigma_ll2 {
        return Err(Error::InfeasibleTarget {
            target: target_sigma_ll2,
            reason: format!("best sigma_LL^2 = {achieved:.4} at m_b = {best} (n_eff = {n})"),
        });
    }
    let e_g = family.expected_g();
    let bound = soft_bound_known(cal.d, sigma2_b.sqrt(), e_g.max(1.0), p_tilde);
    Ok(TuneResult {
        config: EstimatorConfig { family, scheme, m_b: best, bound, p_tilde },
        achieved,
        sigma2_b,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dhat_fixed_arithmetic() {
        let d = [1.0, 2.0, 3.0, 4.0];
        let f = |i: usize| d[i];
        assert_eq!(dhat_fixed(f, &[0, 2], 4).unwrap(), 8.0);
        // constant population -> n * c for any u
        let c = |_: usize| 0.7;
        assert!((dhat_fixed(c, &[3, 3, 1], 10).unwrap() - 7.0).abs() < 1e-12);
        assert!(dhat_fixed(f, &[], 4).is_err());
        assert!(dhat_fixed(f, &[4], 4).is_err());
    }

    #[test]
    fn dhat_bernoulli_arithmetic() {
        let d = [1.0, 2.0, 3.0, 4.0];
        let f = |i: usize| d[i];
        assert_eq!(dhat_bernoulli(f, &[false; 4], 2).unwrap(), 0.0);
        assert_eq!(dhat_bernoulli(f, &[true; 4], 4).unwrap(), 10.0);
        assert!(dhat_bernoulli(f, &[true; 4], 0).is_err());
    }

    #[test]
    fn dhat_unbiasedness_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 37;
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let true_d: f64 = d.iter().sum();
        let m_b = 5;
        let reps = 100_000;

        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..reps {
            let u: Vec<usize> = (0..m_b).map(|_| rng.random_range(0..n)).collect();
            let v = dhat_fixed(|i| d[i], &u, n).unwrap();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / reps as f64;
        let se = ((sumsq / reps as f64 - mean * mean) / reps as f64).sqrt();
        assert!((mean - true_d).abs() < 4.0 * se, "fixed: {mean} vs {true_d} (se {se})");

        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let p = m_b as f64 / n as f64;
        for _ in 0..reps {
            let u: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < p).collect();
            let v = dhat_bernoulli(|i| d[i], &u, m_b).unwrap();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / reps as f64;
        let se = ((sumsq / reps as f64 - mean * mean) / reps as f64).sqrt();
        assert!((mean - true_d).abs() < 4.0 * se, "bernoulli: {mean} vs {true_d} (se {se})");
    }

    #[test]
    fn soft_bound_quantile_cases() {
        // median quantile -> a~ = dhat
        let p_tilde = 0.5f64.powi(3);
        let a = soft_bound(1.5, 2.0, 3, p_tilde, 50).unwrap();
        assert!((a - 1.5).abs() < 1e-9);

        // zero scale -> dhat for any p~
        assert_eq!(soft_bound(-0.3, 0.0, 10, 0.99, 100).unwrap(), -0.3);

        // frozen from an independently validated t-quantile routine:
        // T^-1_99(1 - 0.99^0.02) = -3.66343265138248
        let a = soft_bound(0.0, 1.0, 50, 0.99, 100).unwrap();
        assert!((a - (-3.66343265138248)).abs() < 1e-9, "got {a}");

        assert!(soft_bound(0.0, 1.0, 50, 0.99, 1).is_err());
        assert!(soft_bound(0.0, 1.0, 0, 0.99, 100).is_err());
    }

    #[test]
    fn rg_estimate_small_cases() {
        // G = 0 -> exp(q + a), sign +
        let e = rg_estimate(&[], 1.0, 2.0, -1.0);
        assert_eq!(e.sign, 1);
        assert!((e.log_mag - 1.0).abs() < 1e-12);

        // all batch estimates equal to a -> series vanishes
        let e = rg_estimate(&[0.5, 0.5], 1.0, 0.0, 0.5);
        assert_eq!(e.sign, 1);
        assert!((e.log_mag - 0.5).abs() < 1e-12);

        // G = 2, eps = 1, dhat - a = (2, -1), q + a = 0:
        // 1 + 2*2 + (4/2)*(2*-1) = 1
        let e = rg_estimate(&[2.0, -1.0], 1.0, 0.0, 0.0);
        assert_eq!(e.sign, 1);
        assert!(e.log_mag.abs() < 1e-12, "log_mag {}", e.log_mag);
    }

    #[test]
    fn poisson_estimate_small_cases() {
        let e = poisson_estimate(&[], 2.0, 1.0, -1.0);
        assert_eq!(e.sign, 1);
        assert!((e.log_mag - 2.0).abs() < 1e-12);

        let e = poisson_estimate(&[0.3, 1.0], 2.0, 0.0, 0.3);
        assert_eq!(e.sign, 0);
        assert_eq!(e.log_mag, f64::NEG_INFINITY);

        // G = 3, lambda = 2, dhat - a = (4, -2, 1), q + a = -2:
        // value e^0 * (2 * -1 * 0.5) = -1
        let e = poisson_estimate(&[4.0, -2.0, 1.0], 2.0, -2.0, 0.0);
        assert_eq!(e.sign, -1);
        assert!(e.log_mag.abs() < 1e-12, "log_mag {}", e.log_mag);
    }

    #[test]
    fn signed_log_matches_linear_evaluation() {
        // Configurations small enough for linear arithmetic.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..500 {
            let g = rng.random_range(0..5usize);
            let batches: Vec<f64> = (0..g).map(|_| rng.random_range(-3.0..3.0)).collect();
            let a = rng.random_range(-2.0..2.0);
            let q = rng.random_range(-1.0..1.0);
            let eps: f64 = rng.random_range(0.1..2.0);
            let lambda: f64 = rng.random_range(0.5..3.0);

            let mut series = 1.0;
            let mut prod = 1.0;
            for (i, &b) in batches.iter().enumerate() {
                prod *= b - a;
                let gf = (i + 1) as f64;
                series += (1.0 + eps).powf(gf) / (1..=(i + 1)).map(|x| x as f64).product::<f64>() * prod;
            }
            let linear_rg = (q + a).exp() * series;
            let rg = rg_estimate(&batches, eps, q, a);
            assert!(
                (rg.value() - linear_rg).abs() <= 1e-10 * linear_rg.abs().max(1e-30),
                "rg {} vs {linear_rg}",
                rg.value()
            );

            let linear_pois =
                (q + a + lambda).exp() * batches.iter().map(|&b| (b - a) / lambda).product::<f64>();
            let pois = poisson_estimate(&batches, lambda, q, a);
            assert!(
                (pois.value() - linear_pois).abs() <= 1e-10 * linear_pois.abs().max(1e-30),
                "pois {} vs {linear_pois}",
                pois.value()
            );
        }
    }

    #[test]
    fn poisson_variance_closed_forms() {
        // sigma_b^2 = 0 and a = d - lambda -> exactly 0
        let (v, of) = poisson_variance(1.3, 2.0 - 1.5, 2.0, 0.0, 1.5);
        assert!(!of);
        assert!(v.abs() <= 1e-12 * (2.0f64 * (1.3 + 0.5 + 1.5)).exp(), "v = {v}");

        // q = -a, d = a, sigma_b^2 = 0 -> exp(lambda) - 1
        let (v, _) = poisson_variance(-0.7, 0.7, 0.7, 0.0, 2.0);
        assert!((v - (2.0f64.exp() - 1.0)).abs() < 1e-10);

        let (v, of) = poisson_variance(500.0, 500.0, 500.0, 0.0, 1.0);
        assert!(of && v.is_infinite());
    }

    #[test]
    fn loglik_variance_identity_at_optimal_bound() {
        // lambda = d - a collapses to sigma_b^2/lambda + sigma_b^4/(4 lambda^3)
        for &(sigma2, lambda) in &[(0.5, 2.0), (3.0, 10.0), (0.0, 1.0)] {
            let d = 1.0;
            let a = d - lambda;
            let v = loglik_variance_approx(d, a, sigma2, lambda).unwrap();
            let expected = sigma2 / lambda + sigma2 * sigma2 / (4.0 * lambda.powi(3));
            assert!((v - expected).abs() <= 1e-12 * expected.max(1e-12), "{v} vs {expected}");
        }
        assert!(loglik_variance_approx(0.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn optimal_lambda_collapsed_forms() {
        assert_eq!(optimal_lambda(3.0, 1.0, 0.0).0, 2.0);
        assert_eq!(optimal_lambda(1.0, 1.0, 4.0).0, 2.0);
        let (v, degenerate) = optimal_lambda(1.0, 1.0, 0.0);
        assert_eq!(v, 0.0);
        assert!(degenerate);
    }

    #[test]
    fn optimal_lambda_minimizes_poisson_variance_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let d = rng.random_range(-2.0..2.0);
            let a = d - rng.random_range(0.1..3.0);
            let sigma2 = rng.random_range(0.0..4.0);
            let (lstar, _) = optimal_lambda(d, a, sigma2);
            let lo = 0.1;
            let hi = 10.0 * lstar;
            let step = (hi - lo) / 199.0;
            let mut best = lo;
            let mut best_v = f64::INFINITY;
            for i in 0..200 {
                let l = lo + i as f64 * step;
                let (v, _) = poisson_variance(0.0, a, d, sigma2, l);
                if v < best_v {
                    best_v = v;
                    best = l;
                }
            }
            assert!((best - lstar).abs() <= step + 1e-12, "grid {best} vs lstar {lstar}");
        }
    }

    #[test]
    fn rg_epsilon_convention() {
        // E[G] fixed at 1/epsilon.
        let fam = Family::rg_from_expected_g(50.0);
        match fam {
            Family::Rg { epsilon } => assert!((epsilon - 0.02).abs() < 1e-12),
            _ => unreachable!(),
        }
        assert!((fam.expected_g() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn tune_config_poisson_self_consistent() {
        let cal = Calibration { d: -3.0, dispersion: 5.0e4, n_eff: 50_000 };
        let target = 2.1;
        let res = tune_config(
            target,
            Family::Poisson { lambda: 5.0 },
            SamplingScheme::FixedWithReplacement,
            &cal,
            0.99,
        )
        .unwrap();
        let sigma2_b = cal.dispersion / res.config.m_b as f64;
        let recomputed =
            loglik_variance_approx(cal.d, res.config.bound, sigma2_b, 5.0).unwrap();
        assert!(
            (recomputed - target).abs() <= 0.1 * target,
            "recomputed {recomputed} vs target {target}"
        );
        assert!(!res.clamped);
    }

    #[test]
    fn tune_config_clamps_when_target_unreachably_large() {
        let cal = Calibration { d: 0.0, dispersion: 1e-8, n_eff: 1000 };
        let res = tune_config(
            1e6,
            Family::Poisson { lambda: 5.0 },
            SamplingScheme::FixedWithReplacement,
            &cal,
            0.99,
        )
        .unwrap();
        assert_eq!(res.config.m_b, 1);
        assert!(res.clamped);
    }

    #[test]
    fn sign_rate_monotone_in_p_tilde() {
        // Empirical negative-sign fraction is non-increasing in p~.
        let d = 1.0;
        let sigma_b = 2.0;
        let lambda = 5.0;
        let reps = 20_000;
        let mut rates = Vec::new();
        for &p_tilde in &[0.5, 0.9, 0.99] {
            let a = soft_bound_known(d, sigma_b, lambda, p_tilde);
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut neg = 0usize;
            for _ in 0..reps {
                let g = sample_poisson(&mut rng, lambda);
                let batches: Vec<f64> = (0..g)
                    .map(|_| {
                        d + sigma_b
                            * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    })
                    .collect();
                if poisson_estimate(&batches, lambda, 0.0, a).sign < 0 {
                    neg += 1;
                }
            }
            rates.push(neg as f64 / reps as f64);
        }
        // allow 3 sigma of binomial noise between adjacent levels
        for w in rates.windows(2) {
            let se = (w[0].max(w[1]) * (1.0 - w[0].max(w[1])) / reps as f64).sqrt();
            assert!(w[1] <= w[0] + 3.0 * se, "rates {rates:?}");
        }
        assert!(rates[0] > rates[2], "rates {rates:?}");
    }

    pub(crate) fn sample_poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u64 {
        // Inversion by sequential search; fine for the lambdas used in tests.
        let mut g = 0u64;
        let mut p = (-lambda).exp();
        let mut cdf = p;
        let u = rng.random::<f64>();
        while u > cdf && g < 100_000 {
            g += 1;
            p *= lambda / g as f64;
            cdf += p;
        }
        g
    }
}
