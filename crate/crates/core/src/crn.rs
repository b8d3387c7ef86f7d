//! Auxiliary randomness for the estimators and its correlated proposals.
//!
//! The block count G is driven by a standard-normal latent v through the
//! copula transform `G = F^-1(Phi(v))`; correlating v across iterations with
//! an AR(1) kernel correlates the subsample at the current and proposed draw.
//! Block contents are either index vectors (fixed-size sampling) or inclusion
//! bitsets (Bernoulli sampling); surviving bitset blocks can additionally be
//! moved by a two-state Markov kernel that preserves the inclusion marginal.
//!
//! ```
//! use subsample_mcmc::crn::{CorrelationParams, CrnKernel};
//! use subsample_mcmc::estimators::{Family, SamplingScheme};
//! use rand::SeedableRng;
//! use rand_chacha::ChaCha8Rng;
//!
//! let mut kernel = CrnKernel::new(
//!     Family::Poisson { lambda: 50.0 },
//!     SamplingScheme::FixedWithReplacement,
//!     20,    // m_b
//!     9999,  // n_eff
//!     CorrelationParams { phi: 1.0, kappa: 0.0, mode: subsample_mcmc::crn::CorrMode::CorrG },
//! );
//! let mut rng = ChaCha8Rng::seed_from_u64(5);
//! let state = kernel.fresh_state(&mut rng);
//! // phi = 1 keeps the latent fixed, so G never changes.
//! let next = kernel.propose(&state, &mut rng).unwrap();
//! assert_eq!(next.g, state.g);
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimators::{Family, SamplingScheme};

/// Distribution of the block count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GDist {
    /// Support {0, 1, ...} with `Pr(G >= g) = (1 + epsilon)^-g`.
    Geometric { epsilon: f64 },
    Poisson { lambda: f64 },
}

impl GDist {
    pub fn from_family(family: Family) -> Self {
        match family {
            Family::Rg { epsilon } => GDist::Geometric { epsilon },
            Family::Poisson { lambda } => GDist::Poisson { lambda },
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            GDist::Geometric { epsilon } => 1.0 / epsilon,
            GDist::Poisson { lambda } => lambda,
        }
    }
}

/// Exact inverse cdf of the G distribution via a cached cumulative table.
#[derive(Debug, Clone)]
pub struct GInverseCdf {
    dist: GDist,
    /// cdf[g] = F(g); extended on demand.
    cdf: Vec<f64>,
}

impl GInverseCdf {
    pub fn new(dist: GDist) -> Self {
        let f0 = match dist {
            GDist::Geometric { epsilon } => 1.0 - 1.0 / (1.0 + epsilon),
            GDist::Poisson { lambda } => (-lambda).exp(),
        };
        GInverseCdf { dist, cdf: vec![f0] }
    }

    pub fn dist(&self) -> GDist {
        self.dist
    }

    fn extend(&mut self) {
        let g = self.cdf.len() as u64;
        let next = match self.dist {
            GDist::Geometric { epsilon } => 1.0 - (1.0 + epsilon).powi(-(g as i32 + 1)),
            GDist::Poisson { lambda } => {
                // pmf(g) from pmf(g-1) in log space to stay exact for large lambda
                let mut log_pmf = -lambda;
                for i in 1..=g {
                    log_pmf += (lambda / i as f64).ln();
                }
                self.cdf[g as usize - 1] + log_pmf.exp()
            }
        };
        self.cdf.push(next.min(1.0));
    }

    /// Smallest g with `F(g) >= w`.
    pub fn invert(&mut self, w: f64) -> u64 {
        let mut g = 0usize;
        loop {
            if g >= self.cdf.len() {
                self.extend();
            }
            if self.cdf[g] >= w {
                return g as u64;
            }
            g += 1;
        }
    }

    pub fn cdf_at(&mut self, g: u64) -> f64 {
        while self.cdf.len() <= g as usize {
            self.extend();
        }
        self.cdf[g as usize]
    }
}

/// Contents of one batch subsample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockState {
    /// Fixed-size with-replacement indices into 0..n_eff.
    Indices(Vec<usize>),
    /// Inclusion indicators of length n_eff.
    Inclusion(Vec<bool>),
}

/// Complete auxiliary-randomness state of one chain iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct CrnState {
    pub v: f64,
    pub g: u64,
    pub blocks: Vec<BlockState>,
}

/// Proposal coupling mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrMode {
    Uncorrelated,
    CorrG,
    CorrGU,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorrelationParams {
    pub phi: f64,
    pub kappa: f64,
    pub mode: CorrMode,
}

impl CorrelationParams {
    pub fn uncorrelated() -> Self {
        CorrelationParams { phi: 0.0, kappa: 0.0, mode: CorrMode::Uncorrelated }
    }
}

/// AR(1) step on the latent v followed by cdf inversion:
/// `v_p = phi v_c + sqrt(1 - phi^2) xi`, `G_p = F^-1(Phi(v_p))`.
pub fn propose_v_g(
    v_c: f64,
    phi: f64,
    ginv: &mut GInverseCdf,
    rng: &mut impl Rng,
) -> (f64, u64) {
    let xi: f64 = StandardNormal.sample(rng);
    let v_p = phi * v_c + (1.0 - phi * phi).sqrt() * xi;
    let w_p = Normal::new(0.0, 1.0).unwrap().cdf(v_p);
    (v_p, ginv.invert(w_p))
}

/// One fresh block drawn from the scheme's marginal.
pub fn fresh_block(
    scheme: SamplingScheme,
    m_b: usize,
    n_eff: usize,
    rng: &mut impl Rng,
) -> BlockState {
    match scheme {
        SamplingScheme::FixedWithReplacement => {
            BlockState::Indices((0..m_b).map(|_| rng.random_range(0..n_eff)).collect())
        }
        SamplingScheme::BernoulliInclusion => {
            let p = m_b as f64 / n_eff as f64;
            BlockState::Inclusion((0..n_eff).map(|_| rng.random::<f64>() < p).collect())
        }
    }
}

/// Within-block two-state Markov transition on inclusion indicators:
/// `Pr(1 -> 1) = kappa`, `Pr(0 -> 0) = 1 - (1 - kappa) (m_b/n)/(1 - m_b/n)`.
/// Preserves the Bernoulli(m_b/n) marginal.
pub fn propose_block_u(
    u_c: &[bool],
    kappa: f64,
    m_b: usize,
    n_eff: usize,
    rng: &mut impl Rng,
) -> Result<Vec<bool>> {
    let r = m_b as f64 / n_eff as f64;
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::InvalidConfig(format!("kappa must be in [0,1], got {kappa}")));
    }
    let stay0 = 1.0 - (1.0 - kappa) * r / (1.0 - r);
    if !(0.0..=1.0).contains(&stay0) {
        return Err(Error::InvalidConfig(format!(
            "derived stay-at-0 probability {stay0} outside [0,1] for kappa = {kappa}, m_b/n = {r}"
        )));
    }
    Ok(u_c
        .iter()
        .map(|&inc| {
            let stay = if inc { kappa } else { stay0 };
            if rng.random::<f64>() < stay {
                inc
            } else {
                !inc
            }
        })
        .collect())
}

/// Move the block list from `g_c` to `g_p` entries: append fresh blocks or
/// delete uniformly chosen ones. In CorrGU mode surviving inclusion blocks
/// also take one within-block Markov step.
#[allow(clippy::too_many_arguments)]
pub fn adjust_blocks(
    blocks: &[BlockState],
    g_p: u64,
    mode: CorrMode,
    kappa: f64,
    scheme: SamplingScheme,
    m_b: usize,
    n_eff: usize,
    rng: &mut impl Rng,
) -> Result<Vec<BlockState>> {
    let g_c = blocks.len() as u64;
    let mut out: Vec<BlockState> = if g_p < g_c {
        // Uniform sample of positions to delete, then stable removal.
        let delete = (g_c - g_p) as usize;
        let mut positions: Vec<usize> = (0..g_c as usize).collect();
        for i in 0..delete {
            let j = rng.random_range(i..positions.len());
            positions.swap(i, j);
        }
        let mut doomed = positions[..delete].to_vec();
        doomed.sort_unstable();
        blocks
            .iter()
            .enumerate()
            .filter(|(i, _)| doomed.binary_search(i).is_err())
            .map(|(_, b)| b.clone())
            .collect()
    } else {
        blocks.to_vec()
    };
    if mode == CorrMode::CorrGU {
        for block in out.iter_mut() {
            match block {
                BlockState::Inclusion(u) => {
                    *u = propose_block_u(u, kappa, m_b, n_eff, rng)?;
                }
                BlockState::Indices(_) => {
                    return Err(Error::InvalidConfig(
                        "within-block correlation requires the Bernoulli inclusion scheme".into(),
                    ));
                }
            }
        }
    }
    while (out.len() as u64) < g_p {
        out.push(fresh_block(scheme, m_b, n_eff, rng));
    }
    Ok(out)
}

/// Proposal kernel over CrnState, owning the cached G inverse cdf.
#[derive(Debug, Clone)]
pub struct CrnKernel {
    pub scheme: SamplingScheme,
    pub m_b: usize,
    pub n_eff: usize,
    pub params: CorrelationParams,
    ginv: GInverseCdf,
}

impl CrnKernel {
    pub fn new(
        family: Family,
        scheme: SamplingScheme,
        m_b: usize,
        n_eff: usize,
        params: CorrelationParams,
    ) -> Self {
        CrnKernel { scheme, m_b, n_eff, params, ginv: GInverseCdf::new(GDist::from_family(family)) }
    }

    /// Independent draw of the complete auxiliary state.
    pub fn fresh_state(&mut self, rng: &mut impl Rng) -> CrnState {
        let v: f64 = StandardNormal.sample(rng);
        let w = Normal::new(0.0, 1.0).unwrap().cdf(v);
        let g = self.ginv.invert(w);
        let blocks = (0..g).map(|_| fresh_block(self.scheme, self.m_b, self.n_eff, rng)).collect();
        CrnState { v, g, blocks }
    }

    /// Propose the next auxiliary state given the current one.
    pub fn propose(&mut self, current: &CrnState, rng: &mut impl Rng) -> Result<CrnState> {
        match self.params.mode {
            CorrMode::Uncorrelated => Ok(self.fresh_state(rng)),
            mode => {
                let (v_p, g_p) = propose_v_g(current.v, self.params.phi, &mut self.ginv, rng);
                let blocks = adjust_blocks(
                    &current.blocks,
                    g_p,
                    mode,
                    self.params.kappa,
                    self.scheme,
                    self.m_b,
                    self.n_eff,
                    rng,
                )?;
                Ok(CrnState { v: v_p, g: g_p, blocks })
            }
        }
    }

    pub fn ginv_mut(&mut self) -> &mut GInverseCdf {
        &mut self.ginv
    }
}

/// Derive a stage-specific seed from a master seed (splitmix64 over the
/// master xored with a stage tag), so stages are independently reproducible.
pub fn stage_seed(master: u64, tag: &str) -> u64 {
    let mut h: u64 = master;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x9E3779B97F4A7C15);
    }
    let mut z = h.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn seeded_rng(master: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stage_seed(master, tag))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_inverse_cdf_mean() {
        // E[G] = 1/epsilon for the {0,1,...} support convention.
        let mut ginv = GInverseCdf::new(GDist::Geometric { epsilon: 1.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reps = 100_000;
        let mean: f64 =
            (0..reps).map(|_| ginv.invert(rng.random::<f64>()) as f64).sum::<f64>() / reps as f64;
        // V[G] = (1-p)/p^2 = 2 at epsilon = 1
        let se = (2.0f64 / reps as f64).sqrt();
        assert!((mean - 1.0).abs() < 4.0 * se, "mean {mean}");
    }

    #[test]
    fn phi_one_keeps_g_fixed() {
        let mut ginv = GInverseCdf::new(GDist::Poisson { lambda: 50.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v0 = 0.37;
        let g0 = ginv.invert(Normal::new(0.0, 1.0).unwrap().cdf(v0));
        for _ in 0..100 {
            let (v, g) = propose_v_g(v0, 1.0, &mut ginv, &mut rng);
            assert_eq!(v, v0);
            assert_eq!(g, g0);
        }
    }

    #[test]
    fn phi_zero_matches_poisson_marginal() {
        // Chi-square goodness of fit of the proposed G against Poisson(5),
        // independence from G_c by construction at phi = 0.
        let lambda = 5.0;
        let mut ginv = GInverseCdf::new(GDist::Poisson { lambda });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reps = 100_000usize;
        let mut counts = vec![0u64; 30];
        let mut v = 0.0;
        for _ in 0..reps {
            let (v_p, g) = propose_v_g(v, 0.0, &mut ginv, &mut rng);
            v = v_p;
            counts[(g as usize).min(29)] += 1;
        }
        let mut chi2 = 0.0;
        let mut dof = 0usize;
        let mut log_pmf = -lambda;
        let mut tail = 1.0;
        for (g, &c) in counts.iter().enumerate().take(29) {
            if g > 0 {
                log_pmf += (lambda / g as f64).ln();
            }
            let p = log_pmf.exp();
            tail -= p;
            let expected = p * reps as f64;
            if expected >= 5.0 {
                chi2 += (c as f64 - expected).powi(2) / expected;
                dof += 1;
            }
        }
        let tail_expected = tail * reps as f64;
        if tail_expected >= 5.0 {
            chi2 += (counts[29] as f64 - tail_expected).powi(2) / tail_expected;
            dof += 1;
        }
        // 1% critical value for the realized dof (conservative lookup).
        let crit = statrs::distribution::ChiSquared::new((dof - 1) as f64)
            .unwrap()
            .inverse_cdf(0.99);
        assert!(chi2 < crit, "chi2 {chi2} vs crit {crit} (dof {dof})");
    }

    #[test]
    fn high_phi_gives_persistent_g() {
        let mut ginv = GInverseCdf::new(GDist::Poisson { lambda: 50.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut v: f64 = StandardNormal.sample(&mut rng);
        let mut g = ginv.invert(Normal::new(0.0, 1.0).unwrap().cdf(v));
        let mut same = 0u64;
        let reps = 100_000;
        for _ in 0..reps {
            let (v_p, g_p) = propose_v_g(v, 0.9999, &mut ginv, &mut rng);
            if g_p == g {
                same += 1;
            }
            v = v_p;
            g = g_p;
        }
        assert!(same as f64 / reps as f64 > 0.9, "persistence {}", same as f64 / reps as f64);
    }

    #[test]
    fn chain_of_correlated_g_keeps_marginal() {
        // Time-aggregated distribution of G under the AR(1) latent at phi = 0.9
        // must still match F.
        let lambda = 5.0;
        let mut ginv = GInverseCdf::new(GDist::Poisson { lambda });
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reps = 100_000usize;
        let mut counts = vec![0u64; 30];
        let mut v: f64 = StandardNormal.sample(&mut rng); // stationary start
        for _ in 0..reps {
            let (v_p, g) = propose_v_g(v, 0.9, &mut ginv, &mut rng);
            v = v_p;
            counts[(g as usize).min(29)] += 1;
        }
        // The samples are autocorrelated, which inflates the chi-square
        // statistic relative to iid sampling; scale the critical value by the
        // integrated autocorrelation factor of the latent, (1+phi)/(1-phi).
        let mut chi2 = 0.0;
        let mut dof = 0usize;
        let mut log_pmf = -lambda;
        for (g, &c) in counts.iter().enumerate().take(29) {
            if g > 0 {
                log_pmf += (lambda / g as f64).ln();
            }
            let expected = log_pmf.exp() * reps as f64;
            if expected >= 5.0 {
                chi2 += (c as f64 - expected).powi(2) / expected;
                dof += 1;
            }
        }
        let crit = statrs::distribution::ChiSquared::new((dof - 1) as f64)
            .unwrap()
            .inverse_cdf(0.99);
        let inflation = 1.9 / 0.1;
        assert!(chi2 < crit * inflation, "chi2 {chi2} vs {crit} x {inflation}");
    }

    #[test]
    fn block_u_kernel_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u: Vec<bool> = (0..200).map(|_| rng.random::<f64>() < 0.3).collect();
        // kappa = 1 is absorbing
        let up = propose_block_u(&u, 1.0, 60, 200, &mut rng).unwrap();
        assert_eq!(up, u);
        // m_b/n = 0.5 makes the kernel symmetric: stay0 = kappa
        let r: f64 = 0.5;
        let kappa: f64 = 0.7;
        let stay0 = 1.0 - (1.0 - kappa) * r / (1.0 - r);
        assert!((stay0 - kappa).abs() < 1e-12);
        // invalid combination rejected
        assert!(propose_block_u(&u, 0.0, 150, 200, &mut rng).is_err());
    }

    #[test]
    fn block_u_kernel_preserves_marginal() {
        let n = 1_000_000usize;
        let m_b = n / 10;
        let p = m_b as f64 / n as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < p).collect();
        let up = propose_block_u(&u, 0.9863, m_b, n, &mut rng).unwrap();
        let rate = up.iter().filter(|&&b| b).count() as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((rate - p).abs() < 4.0 * se, "rate {rate} vs {p} (se {se})");
    }

    #[test]
    fn adjust_blocks_add_delete_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scheme = SamplingScheme::BernoulliInclusion;
        let (m_b, n_eff) = (10, 100);
        let blocks: Vec<BlockState> =
            (0..3).map(|_| fresh_block(scheme, m_b, n_eff, &mut rng)).collect();

        // same G, CorrG -> identical output
        let same =
            adjust_blocks(&blocks, 3, CorrMode::CorrG, 0.9, scheme, m_b, n_eff, &mut rng).unwrap();
        assert_eq!(same, blocks);

        // delete all
        let none =
            adjust_blocks(&blocks, 0, CorrMode::CorrG, 0.9, scheme, m_b, n_eff, &mut rng).unwrap();
        assert!(none.is_empty());

        // grow from empty; fresh blocks marginally correct
        let mut popcounts = 0usize;
        let trials = 10_000;
        let mut total_blocks = 0usize;
        for _ in 0..trials / 4 {
            let grown =
                adjust_blocks(&[], 4, CorrMode::CorrG, 0.9, scheme, m_b, n_eff, &mut rng).unwrap();
            assert_eq!(grown.len(), 4);
            for b in &grown {
                if let BlockState::Inclusion(u) = b {
                    popcounts += u.iter().filter(|&&x| x).count();
                    total_blocks += 1;
                }
            }
        }
        let mean = popcounts as f64 / total_blocks as f64;
        let p = m_b as f64 / n_eff as f64;
        let se = (n_eff as f64 * p * (1.0 - p) / total_blocks as f64).sqrt();
        assert!((mean - m_b as f64).abs() < 4.0 * se, "popcount mean {mean} (se {se})");

        // surviving blocks are bit-identical after a partial delete
        let shrunk =
            adjust_blocks(&blocks, 2, CorrMode::CorrG, 0.9, scheme, m_b, n_eff, &mut rng).unwrap();
        assert_eq!(shrunk.len(), 2);
        for b in &shrunk {
            assert!(blocks.contains(b));
        }
    }

    #[test]
    fn fresh_state_reproducible_and_marginally_correct() {
        let fam = Family::Poisson { lambda: 50.0 };
        let mut k1 = CrnKernel::new(
            fam,
            SamplingScheme::FixedWithReplacement,
            5,
            1000,
            CorrelationParams::uncorrelated(),
        );
        let mut k2 = k1.clone();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(k1.fresh_state(&mut r1), k2.fresh_state(&mut r2));

        let reps = 100_000;
        let mean: f64 =
            (0..reps).map(|_| k1.fresh_state(&mut r1).g as f64).sum::<f64>() / reps as f64;
        let se = (50.0f64 / reps as f64).sqrt();
        assert!((mean - 50.0).abs() < 4.0 * se, "mean {mean}");

        // geometric with epsilon = 1: E[G] = 1
        let mut kg = CrnKernel::new(
            Family::Rg { epsilon: 1.0 },
            SamplingScheme::FixedWithReplacement,
            5,
            1000,
            CorrelationParams::uncorrelated(),
        );
        let mean: f64 =
            (0..reps).map(|_| kg.fresh_state(&mut r1).g as f64).sum::<f64>() / reps as f64;
        let se = (2.0f64 / reps as f64).sqrt();
        assert!((mean - 1.0).abs() < 4.0 * se, "geometric mean {mean}");
    }
}
