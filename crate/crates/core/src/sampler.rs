//! Random-walk Metropolis samplers: the exact full-data baseline and the
//! signed pseudo-marginal chain on the absolute likelihood estimate.
//!
//! The pseudo-marginal acceptance uses magnitudes only; the sign of the
//! current estimate is recorded at every iteration and consumed later by the
//! importance-sampling correction.
//!
//! ```
//! use subsample_mcmc::model::{generate_ar1, Parameterization, PriorSpec, Theta};
//! use subsample_mcmc::sampler::{run_chain, Method, ProposalConfig, RunConfig};
//!
//! let theta = Theta::student_t(Parameterization::M1, [0.3, 0.6], 5.0)?;
//! let data = generate_ar1(300, &theta, 5)?;
//! let out = run_chain(
//!     &RunConfig {
//!         method: Method::ExactMh,
//!         iterations: 200,
//!         burn_in: 100,
//!         proposal: ProposalConfig {
//!             covariance: [[1e-2, 0.0], [0.0, 1e-2]],
//!             scale: 1.0,
//!             target_accept: 0.35,
//!         },
//!         prior: PriorSpec::experiment_default(),
//!         init: theta,
//!         seed: 11,
//!         initial_bound: 0.0,
//!     },
//!     &data,
//!     None,
//! )?;
//! assert_eq!(out.iterates.len(), 200);
//! # Ok::<(), subsample_mcmc::error::Error>(())
//! ```

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::control_variates::ClusterSummaries;
use crate::crn::{seeded_rng, CorrelationParams, CrnKernel, CrnState};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorConfig, SignedLog};
use crate::likelihood::{BoundMode, SubsampleLikelihood};
use crate::model::{full_loglik_counted, log_prior, DataSet, EvalCounters, PriorSpec, Theta};

/// Random-walk proposal `N(theta_c, l * Sigma)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub covariance: [[f64; 2]; 2],
    pub scale: f64,
    pub target_accept: f64,
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.covariance;
        let spd = (c[0][1] - c[1][0]).abs() < 1e-12
            && c[0][0] > 0.0
            && c[0][0] * c[1][1] - c[0][1] * c[1][0] > 0.0;
        if !spd {
            return Err(Error::InvalidConfig("proposal covariance must be symmetric positive definite".into()));
        }
        if !(self.scale > 0.0) {
            return Err(Error::InvalidConfig(format!("proposal scale must be positive, got {}", self.scale)));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidConfig("target acceptance must be in (0,1)".into()));
        }
        Ok(())
    }

    /// Lower Cholesky factor of `l * Sigma`.
    fn chol(&self, scale: f64) -> [[f64; 2]; 2] {
        let c = self.covariance;
        let l11 = (scale * c[0][0]).sqrt();
        let l21 = scale * c[1][0] / l11;
        let l22 = (scale * c[1][1] - l21 * l21).sqrt();
        [[l11, 0.0], [l21, l22]]
    }

    pub fn draw(&self, current: [f64; 2], scale: f64, rng: &mut impl Rng) -> [f64; 2] {
        let l = self.chol(scale);
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        [current[0] + l[0][0] * z0, current[1] + l[1][0] * z0 + l[1][1] * z1]
    }
}

/// One recorded chain iterate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChainIterate {
    pub iteration: usize,
    pub theta: [f64; 2],
    pub log_mag: f64,
    pub sign: i8,
    pub g: u64,
    pub proposed_g: u64,
    pub accepted: bool,
}

/// Robbins-Monro step-size adaptation toward a target acceptance rate,
/// batched every 50 iterations: `log l <- log l + t^-0.6 (ahat - target)`.
#[derive(Debug, Clone)]
pub struct ScaleAdapter {
    target: f64,
    batch: Vec<bool>,
    t: u64,
    batch_size: usize,
}

impl ScaleAdapter {
    pub fn new(target: f64) -> Self {
        ScaleAdapter { target, batch: Vec::new(), t: 0, batch_size: 50 }
    }

    /// Record an accept indicator; returns the updated scale when a batch
    /// completes, otherwise the input scale.
    pub fn observe(&mut self, accepted: bool, scale: f64) -> f64 {
        self.batch.push(accepted);
        if self.batch.len() < self.batch_size {
            return scale;
        }
        let ahat = self.batch.iter().filter(|&&a| a).count() as f64 / self.batch.len() as f64;
        self.batch.clear();
        self.t += 1;
        let gamma = (self.t as f64).powf(-0.6);
        (scale.ln() + gamma * (ahat - self.target)).exp()
    }
}

/// Kahan-compensated running mean of the burn-in soft bounds.
#[derive(Debug, Clone, Default)]
pub struct BoundAccumulator {
    sum: f64,
    comp: f64,
    count: u64,
}

impl BoundAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bound: f64) {
        let y = bound - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
        self.count += 1;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::InvalidConfig("no burn-in bounds accumulated".into()));
        }
        Ok(self.sum / self.count as f64)
    }
}

/// State of the exact full-likelihood chain.
#[derive(Debug, Clone, Copy)]
pub struct ExactChainState {
    pub theta: Theta,
    pub loglik: f64,
}

/// Standard MH step on the exact likelihood. Returns whether the proposal was
/// accepted. Cost: n_eff contribution evaluations per proposal inside the
/// prior support.
#[allow(clippy::too_many_arguments)]
pub fn mh_step(
    state: &mut ExactChainState,
    data: &DataSet,
    proposal: &ProposalConfig,
    scale: f64,
    prior: &PriorSpec,
    counters: &EvalCounters,
    rng: &mut impl Rng,
) -> Result<bool> {
    let theta_p = state.theta.with_values(proposal.draw(state.theta.values, scale, rng));
    let lp_p = log_prior(&theta_p, prior);
    if lp_p == f64::NEG_INFINITY {
        // Still consume an accept draw so the rng stream is uniform per step.
        let _: f64 = rng.random();
        return Ok(false);
    }
    let ll_p = full_loglik_counted(&theta_p, data, counters)?;
    let lp_c = log_prior(&state.theta, prior);
    let log_alpha = (ll_p + lp_p) - (state.loglik + lp_c);
    let accept = rng.random::<f64>().ln() < log_alpha;
    if accept {
        state.theta = theta_p;
        state.loglik = ll_p;
    }
    Ok(accept)
}

/// State of the signed pseudo-marginal chain.
#[derive(Debug, Clone)]
pub struct SignedChainState {
    pub theta: Theta,
    pub signed: SignedLog,
    pub crn: CrnState,
}

/// Outcome of one signed PMMH step.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub accepted: bool,
    pub proposed_g: u64,
    /// Soft bound trained on the proposal's subsample (burn-in mode only).
    pub bound_candidate: Option<f64>,
}

/// Signed pseudo-marginal MH step: symmetric random walk on theta, CRN
/// proposal on (v, G, blocks), acceptance on the estimate magnitudes only.
#[allow(clippy::too_many_arguments)]
pub fn signed_pmmh_step(
    state: &mut SignedChainState,
    lik: &SubsampleLikelihood,
    kernel: &mut CrnKernel,
    proposal: &ProposalConfig,
    scale: f64,
    prior: &PriorSpec,
    bound: BoundMode,
    rng: &mut impl Rng,
) -> Result<StepRecord> {
    let theta_p = state.theta.with_values(proposal.draw(state.theta.values, scale, rng));
    let crn_p = kernel.propose(&state.crn, rng)?;
    let proposed_g = crn_p.g;
    let lp_p = log_prior(&theta_p, prior);
    if lp_p == f64::NEG_INFINITY {
        let _: f64 = rng.random();
        return Ok(StepRecord { accepted: false, proposed_g, bound_candidate: None });
    }
    let eval = lik.evaluate(&theta_p, &crn_p, bound)?;
    let bound_candidate = match bound {
        BoundMode::FromSubsample { .. } if proposed_g >= 1 => Some(eval.bound_used),
        _ => None,
    };
    // Zero-magnitude proposals are rejected; a zero-magnitude current state
    // always leaves.
    let accept = if eval.signed.sign == 0 {
        let _: f64 = rng.random();
        false
    } else if state.signed.sign == 0 {
        let _: f64 = rng.random();
        true
    } else {
        let lp_c = log_prior(&state.theta, prior);
        let log_alpha = (eval.signed.log_mag + lp_p) - (state.signed.log_mag + lp_c);
        rng.random::<f64>().ln() < log_alpha
    };
    if accept {
        state.theta = theta_p;
        state.signed = eval.signed;
        state.crn = crn_p;
    }
    Ok(StepRecord { accepted: accept, proposed_g, bound_candidate })
}

/// Sampling method of a chain run.
#[derive(Debug, Clone)]
pub enum Method {
    ExactMh,
    SignedPm { estimator: EstimatorConfig, correlation: CorrelationParams },
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub method: Method,
    /// Post-burn-in iterations.
    pub iterations: usize,
    pub burn_in: usize,
    pub proposal: ProposalConfig,
    pub prior: PriorSpec,
    pub init: Theta,
    pub seed: u64,
    /// Initial frozen bound / burn-in fallback for the signed method,
    /// typically from the calibration pass.
    pub initial_bound: f64,
}

/// Full chain output. `iterates` holds only the post-burn-in sample; burn-in
/// draws are used for adaptation and discarded.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub iterates: Vec<ChainIterate>,
    pub burn_in: usize,
    pub final_scale: f64,
    pub frozen_bound: Option<f64>,
    pub accept_rate: f64,
    pub contrib_evals: u64,
    pub derivative_evals: u64,
    pub negative_sign_fraction: f64,
}

/// Run burn-in (scale and soft-bound adaptation) followed by the sampling
/// phase. Deterministic given the seed.
pub fn run_chain(
    config: &RunConfig,
    data: &DataSet,
    summaries: Option<&ClusterSummaries>,
) -> Result<RunOutput> {
    config.proposal.validate()?;
    let counters = EvalCounters::new();
    let mut rng = seeded_rng(config.seed, "chain");
    let mut adapter = ScaleAdapter::new(config.proposal.target_accept);
    let mut scale = config.proposal.scale;

    match &config.method {
        Method::ExactMh => {
            let ll0 = full_loglik_counted(&config.init, data, &counters)?;
            let mut state = ExactChainState { theta: config.init, loglik: ll0 };
            for _ in 0..config.burn_in {
                let accepted =
                    mh_step(&mut state, data, &config.proposal, scale, &config.prior, &counters, &mut rng)?;
                scale = adapter.observe(accepted, scale);
            }
            let mut iterates = Vec::with_capacity(config.iterations);
            let mut accepts = 0usize;
            for i in 0..config.iterations {
                let accepted =
                    mh_step(&mut state, data, &config.proposal, scale, &config.prior, &counters, &mut rng)?;
                accepts += accepted as usize;
                iterates.push(ChainIterate {
                    iteration: i,
                    theta: state.theta.values,
                    log_mag: state.loglik,
                    sign: 1,
                    g: 0,
                    proposed_g: 0,
                    accepted,
                });
            }
            Ok(RunOutput {
                iterates,
                burn_in: config.burn_in,
                final_scale: scale,
                frozen_bound: None,
                accept_rate: accepts as f64 / config.iterations.max(1) as f64,
                contrib_evals: counters.contrib_count(),
                derivative_evals: counters.derivative_count(),
                negative_sign_fraction: 0.0,
            })
        }
        Method::SignedPm { estimator, correlation } => {
            let summaries = summaries.ok_or_else(|| {
                Error::InvalidConfig("signed pseudo-marginal run requires cluster summaries".into())
            })?;
            estimator.validate(data.n_eff())?;
            let lik = SubsampleLikelihood::new(data, summaries, *estimator, &counters);
            let mut kernel = CrnKernel::new(
                estimator.family,
                estimator.scheme,
                estimator.m_b,
                data.n_eff(),
                *correlation,
            );
            let crn0 = kernel.fresh_state(&mut rng);
            let burn_bound = BoundMode::FromSubsample {
                p_tilde: estimator.p_tilde,
                fallback: config.initial_bound,
            };
            let eval0 = lik.evaluate(&config.init, &crn0, burn_bound)?;
            let mut state = SignedChainState { theta: config.init, signed: eval0.signed, crn: crn0 };

            let mut bounds = BoundAccumulator::new();
            if let Some(b) = match burn_bound {
                BoundMode::FromSubsample { .. } if eval0.g >= 1 => Some(eval0.bound_used),
                _ => None,
            } {
                bounds.push(b);
            }
            for _ in 0..config.burn_in {
                let rec = signed_pmmh_step(
                    &mut state,
                    &lik,
                    &mut kernel,
                    &config.proposal,
                    scale,
                    &config.prior,
                    burn_bound,
                    &mut rng,
                )?;
                if let Some(b) = rec.bound_candidate {
                    bounds.push(b);
                }
                scale = adapter.observe(rec.accepted, scale);
            }
            let frozen = if bounds.count() > 0 { bounds.mean()? } else { config.initial_bound };
            // Re-evaluate the current state under the frozen bound so the
            // sampling phase targets a single augmented posterior.
            let eval = lik.evaluate(&state.theta, &state.crn, BoundMode::Frozen(frozen))?;
            state.signed = eval.signed;

            let mut iterates = Vec::with_capacity(config.iterations);
            let mut accepts = 0usize;
            let mut negatives = 0usize;
            for i in 0..config.iterations {
                let rec = signed_pmmh_step(
                    &mut state,
                    &lik,
                    &mut kernel,
                    &config.proposal,
                    scale,
                    &config.prior,
                    BoundMode::Frozen(frozen),
                    &mut rng,
                )?;
                accepts += rec.accepted as usize;
                negatives += (state.signed.sign < 0) as usize;
                iterates.push(ChainIterate {
                    iteration: i,
                    theta: state.theta.values,
                    log_mag: state.signed.log_mag,
                    sign: state.signed.sign,
                    g: state.crn.g,
                    proposed_g: rec.proposed_g,
                    accepted: rec.accepted,
                });
            }
            Ok(RunOutput {
                iterates,
                burn_in: config.burn_in,
                final_scale: scale,
                frozen_bound: Some(frozen),
                accept_rate: accepts as f64 / config.iterations.max(1) as f64,
                contrib_evals: counters.contrib_count(),
                derivative_evals: counters.derivative_count(),
                negative_sign_fraction: negatives as f64 / config.iterations.max(1) as f64,
            })
        }
    }
}
