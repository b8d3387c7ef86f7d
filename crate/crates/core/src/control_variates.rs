//! Clustering-based control variates.
//!
//! The feature pairs `z_k` are clustered once before sampling. Each cluster
//! stores its centroid and moment statistics, so the control-variate sum
//! `q(theta) = sum_k q_k(theta)` (second-order Taylor expansion of each
//! contribution around its cluster centroid) costs K derivative evaluations
//! instead of n.
//!
//! ```
//! use subsample_mcmc::control_variates::{cluster_data, q_sum, residual};
//! use subsample_mcmc::model::{generate_ar1, full_loglik, EvalCounters, Parameterization, Theta};
//!
//! // Gaussian errors make the log-density quadratic, so the second-order
//! // proxy is exact: q(theta) equals the full log-likelihood and residuals
//! // vanish.
//! let gen = Theta::gaussian(Parameterization::M1, [0.3, 0.6], 1.0)?;
//! let data = generate_ar1(400, &gen, 8)?;
//! let theta = Theta::gaussian(Parameterization::M1, [0.1, 0.5], 0.8)?;
//! let summaries = cluster_data(&data, 17, 2)?;
//!
//! let counters = EvalCounters::new();
//! let q = q_sum(&theta, &summaries, &counters);
//! assert!((q - full_loglik(&theta, &data)?).abs() < 1e-6);
//! assert!(residual(&theta, &data, 57, &summaries)?.abs() < 1e-9);
//! assert_eq!(counters.derivative_count(), 17);
//! # Ok::<(), subsample_mcmc::error::Error>(())
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{contrib_value_grad_hess, loglik_contrib, DataSet, EvalCounters, Theta};

pub const SUMMARY_FORMAT_VERSION: u32 = 1;

/// Per-cluster moment summaries over the assigned feature pairs:
/// count, centroid, deviation sum `s_c` and outer-product sum `S_c`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterSummaries {
    pub version: u32,
    pub k: usize,
    pub n_eff: usize,
    pub centroids: Vec<[f64; 2]>,
    pub counts: Vec<usize>,
    pub dev_sums: Vec<[f64; 2]>,
    pub outer_sums: Vec<[[f64; 2]; 2]>,
    pub assignment: Vec<u32>,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// One k-means++ seeding followed by Lloyd iterations. Returns converged
/// centroids, assignment and final inertia.
fn lloyd_run(
    points: &[[f64; 2]],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<[f64; 2]>, Vec<u32>, f64) {
    let n = points.len();
    // k-means++ seeding.
    let mut centroids: Vec<[f64; 2]> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = points.iter().map(|&p| dist2(p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next]);
        for (i, &p) in points.iter().enumerate() {
            let d = dist2(p, *centroids.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut assignment = vec![0u32; n];
    let mut prev_inertia = f64::INFINITY;
    for _iter in 0..100 {
        // Assignment step.
        let mut inertia = 0.0;
        for (i, &p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, &cent) in centroids.iter().enumerate() {
                let d = dist2(p, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignment[i] = best as u32;
            inertia += best_d;
        }
        // Update step.
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (i, &p) in points.iter().enumerate() {
            let c = assignment[i] as usize;
            sums[c][0] += p[0];
            sums[c][1] += p[1];
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            } else {
                // Re-seed from the point farthest from its current centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = dist2(points[a], centroids[assignment[a] as usize]);
                        let db = dist2(points[b], centroids[assignment[b] as usize]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[c] = points[far];
                assignment[far] = c as u32;
            }
        }
        let rel = if prev_inertia.is_finite() && prev_inertia > 0.0 {
            (prev_inertia - inertia).abs() / prev_inertia
        } else {
            f64::INFINITY
        };
        prev_inertia = inertia;
        if rel < 1e-6 {
            break;
        }
    }
    (centroids, assignment, prev_inertia)
}

/// Datasets above this size train the k-means centroids on a uniform
/// subsample (`KMEANS_TRAIN_FRACTION` of the points) and then assign every
/// point to its nearest centroid, which keeps the clustering pass cheap at
/// experiment scale.
const KMEANS_FULL_TRAIN_LIMIT: usize = 5_000;
const KMEANS_TRAIN_FRACTION: f64 = 0.4;

/// K-means on the feature pairs with k-means++ initialization, keeping the
/// best of several restarts by inertia (restarts are capped on large
/// problems). On large datasets the centroids are trained on a uniform
/// subsample of the points, then all points are assigned. Deterministic given
/// the seed; an empty cluster is re-seeded from the point farthest from its
/// assigned centroid.
pub fn cluster_data(data: &DataSet, k: usize, seed: u64) -> Result<ClusterSummaries> {
    let points = data.pairs();
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!("need 1 <= K <= n_eff, got K = {k}, n_eff = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_n = if n <= KMEANS_FULL_TRAIN_LIMIT {
        n
    } else {
        ((n as f64 * KMEANS_TRAIN_FRACTION) as usize).max(k).min(n)
    };
    let train: Vec<[f64; 2]> = if train_n < n {
        rand::seq::index::sample(&mut rng, n, train_n)
            .iter()
            .map(|i| points[i])
            .collect()
    } else {
        points.to_vec()
    };
    let restarts = if train_n * k <= 2_000_000 { 6 } else { 1 };
    let mut best: Option<(Vec<[f64; 2]>, Vec<u32>, f64)> = None;
    for _ in 0..restarts {
        let run = lloyd_run(&train, k, &mut rng);
        if best.as_ref().map_or(true, |b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (mut centroids, _, _) = best.expect("at least one restart");
    let mut assignment = vec![0u32; n];

    // Final assignment with converged centroids, then one pass of summaries.
    for (i, &p) in points.iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, &cent) in centroids.iter().enumerate() {
            let d = dist2(p, cent);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assignment[i] = best as u32;
    }
    let mut counts = vec![0usize; k];
    let mut sums = vec![[0.0f64; 2]; k];
    for (i, &p) in points.iter().enumerate() {
        let c = assignment[i] as usize;
        counts[c] += 1;
        sums[c][0] += p[0];
        sums[c][1] += p[1];
    }
    for c in 0..k {
        if counts[c] > 0 {
            centroids[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
        }
    }
    let mut dev_sums = vec![[0.0f64; 2]; k];
    let mut outer_sums = vec![[[0.0f64; 2]; 2]; k];
    for (i, &p) in points.iter().enumerate() {
        let c = assignment[i] as usize;
        let dev = [p[0] - centroids[c][0], p[1] - centroids[c][1]];
        dev_sums[c][0] += dev[0];
        dev_sums[c][1] += dev[1];
        for a in 0..2 {
            for b in 0..2 {
                outer_sums[c][a][b] += dev[a] * dev[b];
            }
        }
    }

    Ok(ClusterSummaries {
        version: SUMMARY_FORMAT_VERSION,
        k,
        n_eff: n,
        centroids,
        counts,
        dev_sums,
        outer_sums,
        assignment,
    })
}

/// Per-cluster derivative triples of theta, cached so residual evaluations
/// reuse the K derivative evaluations paid by `q_sum`.
#[derive(Debug, Clone)]
pub struct ThetaCache {
    pub q: f64,
    pub derivs: Vec<(f64, [f64; 2], [[f64; 2]; 2])>,
}

impl ThetaCache {
    pub fn new(theta: &Theta, summaries: &ClusterSummaries, counters: &EvalCounters) -> Self {
        counters.add_derivative(summaries.k as u64);
        let derivs: Vec<_> = summaries
            .centroids
            .iter()
            .map(|&c| contrib_value_grad_hess(theta, c))
            .collect();
        let mut q = 0.0;
        for c in 0..summaries.k {
            let (v, g, h) = &derivs[c];
            let s = summaries.dev_sums[c];
            let ss = &summaries.outer_sums[c];
            q += summaries.counts[c] as f64 * v
                + g[0] * s[0]
                + g[1] * s[1]
                + 0.5 * (h[0][0] * ss[0][0] + h[0][1] * ss[0][1] + h[1][0] * ss[1][0] + h[1][1] * ss[1][1]);
        }
        ThetaCache { q, derivs }
    }

    /// Taylor proxy `q_k(theta)` for contribution `k`.
    pub fn proxy(&self, summaries: &ClusterSummaries, z: [f64; 2], k: usize) -> f64 {
        let c = summaries.assignment[k] as usize;
        let (v, g, h) = &self.derivs[c];
        let dev = [z[0] - summaries.centroids[c][0], z[1] - summaries.centroids[c][1]];
        v + g[0] * dev[0]
            + g[1] * dev[1]
            + 0.5
                * (h[0][0] * dev[0] * dev[0]
                    + (h[0][1] + h[1][0]) * dev[0] * dev[1]
                    + h[1][1] * dev[1] * dev[1])
    }
}

/// `q(theta) = sum_c [n_c v_c + g_c . s_c + tr(H_c S_c)/2]` in K derivative
/// evaluations.
pub fn q_sum(theta: &Theta, summaries: &ClusterSummaries, counters: &EvalCounters) -> f64 {
    ThetaCache::new(theta, summaries, counters).q
}

/// Residual `d_k = l_k - q_k` for contribution `k` (0-based).
pub fn residual(
    theta: &Theta,
    data: &DataSet,
    k: usize,
    summaries: &ClusterSummaries,
) -> Result<f64> {
    if k >= data.n_eff() {
        return Err(Error::IndexOutOfRange { index: k, len: data.n_eff() });
    }
    let counters = EvalCounters::new();
    let cache = ThetaCache::new(theta, summaries, &counters);
    residual_cached(theta, data, k, summaries, &cache)
}

/// Residual using a precomputed derivative cache.
pub fn residual_cached(
    theta: &Theta,
    data: &DataSet,
    k: usize,
    summaries: &ClusterSummaries,
    cache: &ThetaCache,
) -> Result<f64> {
    let z = data.z(k);
    Ok(loglik_contrib(theta, z)? - cache.proxy(summaries, z, k))
}

/// Full-data residual statistics at a reference theta: the exact residual sum
/// `d` and the single-batch variance `sigma_b^2 = (n/m_b) sum_k (d_k - dbar)^2`
/// for a given batch size. One full pass; used for offline calibration only.
pub fn residual_stats(
    theta: &Theta,
    data: &DataSet,
    summaries: &ClusterSummaries,
    m_b: usize,
) -> Result<(f64, f64)> {
    let counters = EvalCounters::new();
    let cache = ThetaCache::new(theta, summaries, &counters);
    let n = data.n_eff();
    let mut residuals = Vec::with_capacity(n);
    let mut d = 0.0;
    for k in 0..n {
        let r = residual_cached(theta, data, k, summaries, &cache)?;
        d += r;
        residuals.push(r);
    }
    let dbar = d / n as f64;
    let ss: f64 = residuals.iter().map(|r| (r - dbar) * (r - dbar)).sum();
    let sigma2_b = n as f64 / m_b as f64 * ss;
    Ok((d, sigma2_b))
}

/// `sigma_b^2` rescales as `S / m_b`; this returns `S = n * sum (d_k - dbar)^2`
/// so callers can tune `m_b` without repeating the data pass.
pub fn residual_dispersion(
    theta: &Theta,
    data: &DataSet,
    summaries: &ClusterSummaries,
) -> Result<(f64, f64)> {
    let (d, sigma2_at_1) = residual_stats(theta, data, summaries, 1)?;
    Ok((d, sigma2_at_1))
}

pub fn save_summaries(summaries: &ClusterSummaries, path: &std::path::Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), summaries)?;
    Ok(())
}

pub fn load_summaries(path: &std::path::Path) -> Result<ClusterSummaries> {
    let file = std::fs::File::open(path)?;
    let s: ClusterSummaries = serde_json::from_reader(std::io::BufReader::new(file))?;
    if s.version != SUMMARY_FORMAT_VERSION {
        return Err(Error::InvalidConfig(format!("unsupported summary format version {}", s.version)));
    }
    if s.counts.iter().sum::<usize>() != s.n_eff {
        return Err(Error::InvalidConfig("cluster counts do not sum to n_eff".into()));
    }
    Ok(s)
}
