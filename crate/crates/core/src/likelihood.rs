//! Evaluation of the subsample likelihood estimator for a given parameter
//! value and auxiliary-randomness state.

use crate::control_variates::{residual_cached, ClusterSummaries, ThetaCache};
use crate::crn::{BlockState, CrnState};
use crate::error::Result;
use crate::estimators::{
    dhat_bernoulli, estimate, soft_bound, EstimatorConfig, SignedLog,
};
use crate::model::{DataSet, EvalCounters, Theta};

/// Which lower bound to plug into the estimator.
#[derive(Debug, Clone, Copy)]
pub enum BoundMode {
    /// Frozen bound, used after burn-in (and required for unbiasedness).
    Frozen(f64),
    /// Burn-in mode: train the bound on the same subsample used for the
    /// estimate. `fallback` applies when the subsample is too small.
    FromSubsample { p_tilde: f64, fallback: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct Evaluation {
    pub signed: SignedLog,
    pub bound_used: f64,
    pub g: u64,
}

/// The estimator bundle: data, cluster summaries, configuration and the
/// evaluation-cost counters.
pub struct SubsampleLikelihood<'a> {
    pub data: &'a DataSet,
    pub summaries: &'a ClusterSummaries,
    pub config: EstimatorConfig,
    pub counters: &'a EvalCounters,
}

impl<'a> SubsampleLikelihood<'a> {
    pub fn new(
        data: &'a DataSet,
        summaries: &'a ClusterSummaries,
        config: EstimatorConfig,
        counters: &'a EvalCounters,
    ) -> Self {
        SubsampleLikelihood { data, summaries, config, counters }
    }

    /// Evaluate the configured estimator at `theta` with the auxiliary state
    /// `crn`. Costs K derivative evaluations (control-variate sum) plus one
    /// contribution evaluation per sampled observation.
    pub fn evaluate(&self, theta: &Theta, crn: &CrnState, bound: BoundMode) -> Result<Evaluation> {
        let cache = ThetaCache::new(theta, self.summaries, self.counters);
        let n_eff = self.data.n_eff();
        let m_b = self.config.m_b;

        let mut batches = Vec::with_capacity(crn.blocks.len());
        let mut sampled: Vec<f64> = Vec::new();
        for block in &crn.blocks {
            let dhat = match block {
                BlockState::Indices(u) => {
                    self.counters.add_contrib(u.len() as u64);
                    for &i in u {
                        sampled.push(residual_cached(theta, self.data, i, self.summaries, &cache)?);
                    }
                    let start = sampled.len() - u.len();
                    let slice = &sampled[start..];
                    n_eff as f64 / u.len() as f64 * slice.iter().sum::<f64>()
                }
                BlockState::Inclusion(u) => {
                    let popcount = u.iter().filter(|&&b| b).count();
                    self.counters.add_contrib(popcount as u64);
                    let mut local = Vec::with_capacity(popcount);
                    for (k, &inc) in u.iter().enumerate() {
                        if inc {
                            local.push(residual_cached(theta, self.data, k, self.summaries, &cache)?);
                        }
                    }
                    let d = dhat_bernoulli(
                        {
                            let mut it = local.iter();
                            move |_k| *it.next().unwrap()
                        },
                        u,
                        m_b,
                    )?;
                    sampled.extend_from_slice(&local);
                    d
                }
            };
            batches.push(dhat);
        }

        let a = match bound {
            BoundMode::Frozen(a) => a,
            BoundMode::FromSubsample { p_tilde, fallback } => {
                if batches.is_empty() || sampled.len() < 2 {
                    fallback
                } else {
                    let dhat_mean = batches.iter().sum::<f64>() / batches.len() as f64;
                    let mean = sampled.iter().sum::<f64>() / sampled.len() as f64;
                    let var = sampled.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
                        / (sampled.len() - 1) as f64;
                    // Batch-level scale from the per-observation dispersion.
                    let sigma_b_hat = ((n_eff as f64).powi(2) / m_b as f64 * var).sqrt();
                    soft_bound(dhat_mean, sigma_b_hat, crn.g, p_tilde, sampled.len().max(2))?
                }
            }
        };

        let signed = estimate(self.config.family, &batches, cache.q, a);
        Ok(Evaluation { signed, bound_used: a, g: crn.g })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control_variates::cluster_data;
    use crate::crn::{CorrelationParams, CrnKernel};
    use crate::estimators::{Family, SamplingScheme};
    use crate::model::{generate_ar1, Parameterization, Theta};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn evaluation_cost_is_g_mb_plus_k() {
        let theta = Theta::student_t(Parameterization::M1, [0.3, 0.6], 5.0).unwrap();
        let data = generate_ar1(301, &theta, 1).unwrap();
        let k = 12;
        let summaries = cluster_data(&data, k, 1).unwrap();
        let config = EstimatorConfig {
            family: Family::Poisson { lambda: 4.0 },
            scheme: SamplingScheme::FixedWithReplacement,
            m_b: 7,
            bound: -10.0,
            p_tilde: 0.99,
        };
        let counters = EvalCounters::new();
        let lik = SubsampleLikelihood::new(&data, &summaries, config, &counters);
        let mut kernel = CrnKernel::new(
            config.family,
            config.scheme,
            config.m_b,
            data.n_eff(),
            CorrelationParams::uncorrelated(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let crn = kernel.fresh_state(&mut rng);
        lik.evaluate(&theta, &crn, BoundMode::Frozen(-10.0)).unwrap();
        assert_eq!(counters.derivative_count(), k as u64);
        assert_eq!(counters.contrib_count(), crn.g * config.m_b as u64);
    }

    #[test]
    fn frozen_bound_is_used_verbatim() {
        let theta = Theta::student_t(Parameterization::M1, [0.3, 0.6], 5.0).unwrap();
        let data = generate_ar1(101, &theta, 1).unwrap();
        let summaries = cluster_data(&data, 5, 1).unwrap();
        let config = EstimatorConfig {
            family: Family::Poisson { lambda: 2.0 },
            scheme: SamplingScheme::BernoulliInclusion,
            m_b: 10,
            bound: -3.5,
            p_tilde: 0.99,
        };
        let counters = EvalCounters::new();
        let lik = SubsampleLikelihood::new(&data, &summaries, config, &counters);
        let mut kernel = CrnKernel::new(
            config.family,
            config.scheme,
            config.m_b,
            data.n_eff(),
            CorrelationParams::uncorrelated(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let crn = kernel.fresh_state(&mut rng);
        let eval = lik.evaluate(&theta, &crn, BoundMode::Frozen(-3.5)).unwrap();
        assert_eq!(eval.bound_used, -3.5);
        assert_eq!(eval.g, crn.g);
    }
}
