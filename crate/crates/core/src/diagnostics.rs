//! Chain post-processing: the sign-corrected importance-sampling estimator,
//! quantile comparisons, inefficiency factors, realized cost and kernel
//! density grids.
//!
//! ```
//! use subsample_mcmc::diagnostics::importance_estimate;
//!
//! // E[h] = sum(h * s) / sum(s): one negative sign flips its term.
//! let h = [1.0, 2.0, 3.0];
//! let signs = [1i8, 1, -1];
//! assert_eq!(importance_estimate(&h, &signs).unwrap(), 0.0);
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Summary statistics of one chain, used by the efficiency comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainStats {
    /// Inefficiency factor `1 + 2 sum rho_l`.
    pub inefficiency: f64,
    /// Mean proposed G times m_b, in observations.
    pub m_bar_r: f64,
    /// `(m_bar_r + K) / n_eff`; 1 for the full-data baseline.
    pub cost_fraction: f64,
    pub sign_rate: f64,
}

/// Sign-corrected estimate of `E[h]`: ratio of sign-weighted sums.
pub fn importance_estimate(h_values: &[f64], signs: &[i8]) -> Result<f64> {
    if h_values.is_empty() || h_values.len() != signs.len() {
        return Err(Error::InvalidInput(format!(
            "need equal nonempty h and sign vectors, got {} and {}",
            h_values.len(),
            signs.len()
        )));
    }
    let num: f64 = h_values.iter().zip(signs).map(|(h, &s)| h * s as f64).sum();
    let den: f64 = signs.iter().map(|&s| s as f64).sum();
    if den == 0.0 {
        return Err(Error::Degenerate("sign sum is zero; importance denominator vanishes".into()));
    }
    Ok(num / den)
}

/// Raw (MCE) and sign-corrected (ISE) estimates of `Pr(theta <= c_alpha)`
/// for one coordinate of the draws.
pub fn quantile_mce_ise(
    draws: &[[f64; 2]],
    signs: &[i8],
    c_alpha: f64,
    coordinate: usize,
) -> Result<(f64, f64)> {
    if !c_alpha.is_finite() {
        return Err(Error::InvalidInput("quantile threshold must be finite".into()));
    }
    if coordinate >= 2 {
        return Err(Error::IndexOutOfRange { index: coordinate, len: 2 });
    }
    let h: Vec<f64> =
        draws.iter().map(|t| if t[coordinate] <= c_alpha { 1.0 } else { 0.0 }).collect();
    let mce = h.iter().sum::<f64>() / h.len() as f64;
    let ise = importance_estimate(&h, signs)?;
    Ok((mce, ise))
}

/// Inefficiency factor `1 + 2 sum rho_l` with Geyer initial-positive-sequence
/// truncation: sum adjacent pairs `Gamma_t = rho_{2t} + rho_{2t+1}` while they
/// stay positive (the first pair includes `rho_0 = 1`), so
/// `IF = 2 sum Gamma_t - 1`. Autocovariances use the biased divide-by-N
/// estimator.
pub fn inefficiency_factor(series: &[f64]) -> Result<f64> {
    let n = series.len();
    if n < 100 {
        return Err(Error::InvalidInput(format!("need at least 100 points, got {n}")));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return Err(Error::Degenerate("zero-variance series".into()));
    }
    let rho = |l: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..n - l {
            acc += (series[i] - mean) * (series[i + l] - mean);
        }
        acc / n as f64 / var
    };
    let mut total = 0.0;
    let mut l = 0usize;
    while l + 1 < n {
        let pair = rho(l) + rho(l + 1);
        if pair <= 0.0 {
            break;
        }
        total += pair;
        l += 2;
    }
    Ok((2.0 * total - 1.0).max(1e-12))
}

/// Realized cost from the proposed block counts:
/// `m_bar_r = mean(proposed G) * m_b`, fraction `(m_bar_r + K)/n_eff`.
pub fn realized_cost(proposed_g: &[u64], m_b: usize, k: usize, n_eff: usize) -> Result<(f64, f64)> {
    if proposed_g.is_empty() {
        return Err(Error::InvalidInput("empty proposed-G vector".into()));
    }
    let mean_g = proposed_g.iter().map(|&g| g as f64).sum::<f64>() / proposed_g.len() as f64;
    let m_bar_r = mean_g * m_b as f64;
    Ok((m_bar_r, (m_bar_r + k as f64) / n_eff as f64))
}

/// Benefit-per-cost efficiency relative to a baseline:
/// `(IF_base * c_base) / (IF_method * c_method)`, larger is better.
pub fn effective_draws_relative(method: &ChainStats, baseline: &ChainStats) -> f64 {
    baseline.inefficiency * baseline.cost_fraction / (method.inefficiency * method.cost_fraction)
}

/// Gaussian-kernel density estimate on a grid. `bandwidth = None` applies
/// Silverman's rule.
pub fn kde_grid(draws: &[f64], grid: &[f64], bandwidth: Option<f64>) -> Result<Vec<f64>> {
    if draws.len() < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 draws, got {}", draws.len())));
    }
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    let h = match bandwidth {
        Some(b) if b > 0.0 => b,
        Some(b) => return Err(Error::InvalidInput(format!("bandwidth must be positive, got {b}"))),
        None => {
            if sd == 0.0 {
                return Err(Error::Degenerate("degenerate draws: zero spread".into()));
            }
            1.06 * sd * n.powf(-0.2)
        }
    };
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .iter()
        .map(|&x| {
            norm * draws.iter().map(|&d| (-0.5 * ((x - d) / h).powi(2)).exp()).sum::<f64>()
        })
        .collect())
}

/// Evenly spaced grid spanning the draws plus `pad` bandwidths on each side.
pub fn kde_default_grid(draws: &[f64], bandwidth: f64, points: usize, pad: f64) -> Vec<f64> {
    let lo = draws.iter().cloned().fold(f64::INFINITY, f64::min) - pad * bandwidth;
    let hi = draws.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + pad * bandwidth;
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| lo + i as f64 * step).collect()
}
