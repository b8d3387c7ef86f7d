//! File-level experiment harness behind the `ssmcmc` CLI: dataset
//! generation, configuration parsing, chain runs and table/figure-data
//! emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::control_variates::{cluster_data, residual_dispersion, save_summaries, ClusterSummaries};
use crate::crn::{stage_seed, CorrMode, CorrelationParams};
use crate::diagnostics::{
    effective_draws_relative, inefficiency_factor, kde_default_grid, kde_grid, quantile_mce_ise,
    realized_cost, ChainStats,
};
use crate::error::{Error, Result};
use crate::estimators::{tune_config, Calibration, Family, SamplingScheme};
use crate::model::{
    full_loglik, generate_ar1, log_prior, DataSet, Parameterization, PriorSpec, Theta,
};
use crate::sampler::{run_chain, ChainIterate, Method, ProposalConfig, RunConfig, RunOutput};

pub const QUANTILE_LEVELS: [f64; 5] = [0.10, 0.25, 0.50, 0.75, 0.90];

/// Sampler variant selected by a config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MethodName {
    Mh,
    Signed,
}

/// Cluster count, absolute or as a percentage of n.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum KSpec {
    Count(usize),
    Percent(f64),
}

impl KSpec {
    pub fn resolve(&self, n_eff: usize) -> usize {
        match *self {
            KSpec::Count(k) => k,
            KSpec::Percent(p) => ((p / 100.0 * n_eff as f64).round() as usize).max(1),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: Parameterization,
    pub theta_true: [f64; 2],
    pub nu: f64,
    pub n: usize,
    pub seed: u64,
    pub k: KSpec,
    pub method: MethodName,
    pub family: String, // "rg" | "poisson"
    pub mode: CorrMode,
    pub scheme: SamplingScheme,
    pub e_g: f64,
    pub p_tilde: f64,
    pub target_sigma_ll2: f64,
    pub phi: f64,
    pub kappa: f64,
    pub iterations: usize,
    pub burn_in: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: Parameterization::M1,
            theta_true: [0.3, 0.6],
            nu: 5.0,
            n: 100_000,
            seed: 1,
            k: KSpec::Percent(1.0),
            method: MethodName::Signed,
            family: "poisson".into(),
            mode: CorrMode::CorrG,
            scheme: SamplingScheme::FixedWithReplacement,
            e_g: 50.0,
            p_tilde: 0.99,
            target_sigma_ll2: 400.0,
            phi: 0.9999,
            kappa: 0.9863,
            iterations: 50_000,
            burn_in: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn family_enum(&self) -> Result<Family> {
        match self.family.as_str() {
            "rg" => Ok(Family::rg_from_expected_g(self.e_g)),
            "poisson" => Ok(Family::Poisson { lambda: self.e_g }),
            other => Err(Error::InvalidConfig(format!("unknown estimator family '{other}'"))),
        }
    }

    pub fn theta(&self) -> Result<Theta> {
        Theta::student_t(self.model, self.theta_true, self.nu)
    }

    pub fn effective_burn_in(&self) -> usize {
        if self.burn_in > 0 {
            self.burn_in
        } else {
            (self.iterations / 10).max(2000)
        }
    }

    pub fn correlation(&self) -> CorrelationParams {
        CorrelationParams { phi: self.phi, kappa: self.kappa, mode: self.mode }
    }

    /// Apply the `SSMCMC_OUTPUT_DIR` override if set.
    pub fn apply_env_override(&mut self) {
        if let Ok(dir) = std::env::var("SSMCMC_OUTPUT_DIR") {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
    }
}

/// Parse the flat `key = value` configuration format. Unknown keys and
/// malformed values are reported with their line number.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {line_no}: expected 'key = value', got '{line}'"))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| {
            Error::InvalidConfig(format!("line {line_no}: invalid {what} '{value}'"))
        };
        match key {
            "model" => {
                config.model = match value {
                    "M1" | "m1" => Parameterization::M1,
                    "M2" | "m2" => Parameterization::M2,
                    _ => return Err(bad("model")),
                }
            }
            "theta0" => config.theta_true[0] = value.parse().map_err(|_| bad("theta0"))?,
            "theta1" => config.theta_true[1] = value.parse().map_err(|_| bad("theta1"))?,
            "nu" => config.nu = value.parse().map_err(|_| bad("nu"))?,
            "n" => config.n = value.parse().map_err(|_| bad("n"))?,
            "seed" => config.seed = value.parse().map_err(|_| bad("seed"))?,
            "k" => config.k = KSpec::Count(value.parse().map_err(|_| bad("k"))?),
            "k_percent" => config.k = KSpec::Percent(value.parse().map_err(|_| bad("k_percent"))?),
            "method" => {
                config.method = match value {
                    "mh" => MethodName::Mh,
                    "signed" => MethodName::Signed,
                    _ => return Err(bad("method")),
                }
            }
            "family" => {
                if value != "rg" && value != "poisson" {
                    return Err(bad("family"));
                }
                config.family = value.to_string();
            }
            "mode" => {
                config.mode = match value {
                    "uncorrelated" => CorrMode::Uncorrelated,
                    "corr_g" => CorrMode::CorrG,
                    "corr_gu" => CorrMode::CorrGU,
                    _ => return Err(bad("mode")),
                }
            }
            "scheme" => {
                config.scheme = match value {
                    "fixed" => SamplingScheme::FixedWithReplacement,
                    "bernoulli" => SamplingScheme::BernoulliInclusion,
                    _ => return Err(bad("scheme")),
                }
            }
            "e_g" => config.e_g = value.parse().map_err(|_| bad("e_g"))?,
            "p_tilde" => config.p_tilde = value.parse().map_err(|_| bad("p_tilde"))?,
            "target_sigma_ll2" => {
                config.target_sigma_ll2 = value.parse().map_err(|_| bad("target_sigma_ll2"))?
            }
            "phi" => config.phi = value.parse().map_err(|_| bad("phi"))?,
            "kappa" => config.kappa = value.parse().map_err(|_| bad("kappa"))?,
            "iterations" => config.iterations = value.parse().map_err(|_| bad("iterations"))?,
            "burn_in" => config.burn_in = value.parse().map_err(|_| bad("burn_in"))?,
            "output_dir" => config.output_dir = PathBuf::from(value),
            _ => {
                return Err(Error::InvalidConfig(format!("line {line_no}: unknown key '{key}'")));
            }
        }
    }
    if !(config.p_tilde > 0.0 && config.p_tilde < 1.0) {
        return Err(Error::InvalidConfig(format!("p_tilde must be in (0,1), got {}", config.p_tilde)));
    }
    if config.e_g <= 0.0 {
        return Err(Error::InvalidConfig(format!("e_g must be positive, got {}", config.e_g)));
    }
    if !(0.0..=1.0).contains(&config.phi) || !(0.0..=1.0).contains(&config.kappa) {
        return Err(Error::InvalidConfig("phi and kappa must be in [0,1]".into()));
    }
    Ok(config)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub model: Parameterization,
    pub theta_true: [f64; 2],
    pub nu: f64,
    pub n: usize,
    pub seed: u64,
}

/// Generate the dataset and write `dataset.csv` + `dataset.manifest.json`
/// into the output directory. Byte-identical for identical config + seed.
pub fn cmd_generate(config: &ExperimentConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&config.output_dir)?;
    let theta = config.theta()?;
    let data = generate_ar1(config.n, &theta, stage_seed(config.seed, "data"))?;
    let path = config.output_dir.join("dataset.csv");
    let mut out = String::with_capacity(config.n * 20);
    out.push_str("index,y\n");
    for (i, y) in data.y.iter().enumerate() {
        writeln!(out, "{i},{y:.17e}").expect("string write");
    }
    std::fs::write(&path, out)?;
    let manifest = DatasetManifest {
        model: config.model,
        theta_true: config.theta_true,
        nu: config.nu,
        n: config.n,
        seed: config.seed,
    };
    std::fs::write(
        config.output_dir.join("dataset.manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(path)
}

pub fn load_dataset(path: &Path) -> Result<DataSet> {
    let text = std::fs::read_to_string(path)?;
    let mut y = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            continue; // header
        }
        let value = line
            .split(',')
            .nth(1)
            .ok_or_else(|| Error::InvalidInput(format!("dataset line {}: missing y column", idx + 1)))?;
        y.push(value.parse().map_err(|_| {
            Error::InvalidInput(format!("dataset line {}: invalid y '{value}'", idx + 1))
        })?);
    }
    DataSet::new(y)
}

/// Posterior mode by Nelder-Mead on the negative log posterior.
pub fn find_mode(data: &DataSet, prior: &PriorSpec, start: Theta) -> Result<Theta> {
    let f = |v: [f64; 2]| -> f64 {
        let theta = start.with_values(v);
        let lp = log_prior(&theta, prior);
        if lp == f64::NEG_INFINITY {
            return f64::INFINITY;
        }
        -(full_loglik(&theta, data).unwrap_or(f64::NEG_INFINITY) + lp)
    };
    let mut simplex = [
        start.values,
        [start.values[0] + 0.05, start.values[1]],
        [start.values[0], start.values[1] + 0.05],
    ];
    let mut values = [f(simplex[0]), f(simplex[1]), f(simplex[2])];
    for _ in 0..200 {
        // sort by value
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let (best, mid, worst) = (order[0], order[1], order[2]);
        if (values[worst] - values[best]).abs() < 1e-10 {
            break;
        }
        let centroid = [
            0.5 * (simplex[best][0] + simplex[mid][0]),
            0.5 * (simplex[best][1] + simplex[mid][1]),
        ];
        let reflect = [
            centroid[0] + (centroid[0] - simplex[worst][0]),
            centroid[1] + (centroid[1] - simplex[worst][1]),
        ];
        let fr = f(reflect);
        if fr < values[best] {
            let expand = [
                centroid[0] + 2.0 * (centroid[0] - simplex[worst][0]),
                centroid[1] + 2.0 * (centroid[1] - simplex[worst][1]),
            ];
            let fe = f(expand);
            if fe < fr {
                simplex[worst] = expand;
                values[worst] = fe;
            } else {
                simplex[worst] = reflect;
                values[worst] = fr;
            }
        } else if fr < values[mid] {
            simplex[worst] = reflect;
            values[worst] = fr;
        } else {
            let contract = [
                centroid[0] + 0.5 * (simplex[worst][0] - centroid[0]),
                centroid[1] + 0.5 * (simplex[worst][1] - centroid[1]),
            ];
            let fc = f(contract);
            if fc < values[worst] {
                simplex[worst] = contract;
                values[worst] = fc;
            } else {
                for i in 0..3 {
                    if i != best {
                        simplex[i] = [
                            0.5 * (simplex[i][0] + simplex[best][0]),
                            0.5 * (simplex[i][1] + simplex[best][1]),
                        ];
                        values[i] = f(simplex[i]);
                    }
                }
            }
        }
    }
    let best = (0..3).min_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap()).unwrap();
    Ok(start.with_values(simplex[best]))
}

/// Proposal covariance from the numeric Hessian of the log posterior at the
/// mode: `Sigma = (-H)^-1`, with a diagonal fallback if the estimate is not
/// positive definite.
pub fn mode_covariance(data: &DataSet, prior: &PriorSpec, mode: &Theta) -> [[f64; 2]; 2] {
    let f = |v: [f64; 2]| -> f64 {
        full_loglik(&mode.with_values(v), data).unwrap_or(f64::NEG_INFINITY)
            + log_prior(&mode.with_values(v), prior)
    };
    let h = 1e-4;
    let x = mode.values;
    let mut hess = [[0.0f64; 2]; 2];
    for i in 0..2 {
        let mut xp = x;
        let mut xm = x;
        xp[i] += h;
        xm[i] -= h;
        hess[i][i] = (f(xp) - 2.0 * f(x) + f(xm)) / (h * h);
    }
    let (mut pp, mut pm, mut mp, mut mm) = (x, x, x, x);
    pp[0] += h;
    pp[1] += h;
    pm[0] += h;
    pm[1] -= h;
    mp[0] -= h;
    mp[1] += h;
    mm[0] -= h;
    mm[1] -= h;
    let cross = (f(pp) - f(pm) - f(mp) + f(mm)) / (4.0 * h * h);
    hess[0][1] = cross;
    hess[1][0] = cross;
    // Sigma = (-H)^-1
    let a = -hess[0][0];
    let b = -hess[0][1];
    let d = -hess[1][1];
    let det = a * d - b * b;
    if a > 0.0 && det > 0.0 {
        [[d / det, -b / det], [-b / det, a / det]]
    } else {
        [[1e-4, 0.0], [0.0, 1e-4]]
    }
}

/// Everything recorded alongside a chain CSV.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunMetadata {
    pub label: String,
    pub config: ExperimentConfig,
    pub n_eff: usize,
    pub k: usize,
    pub m_b: usize,
    pub achieved_sigma_ll2: Option<f64>,
    pub calibration_d: Option<f64>,
    pub calibration_sigma2_b: Option<f64>,
    pub tuned_bound: Option<f64>,
    pub frozen_bound: Option<f64>,
    pub proposal_covariance: [[f64; 2]; 2],
    pub final_scale: f64,
    pub accept_rate: f64,
    pub negative_sign_fraction: f64,
    pub contrib_evals: u64,
    pub derivative_evals: u64,
    pub burn_in: usize,
    pub iterations: usize,
    pub stage_seconds: Vec<(String, f64)>,
}

fn write_chain_csv(path: &Path, iterates: &[ChainIterate]) -> Result<()> {
    let mut out = String::with_capacity(iterates.len() * 64);
    out.push_str("iteration,theta0,theta1,log_mag,sign,g,proposed_g,accepted\n");
    for it in iterates {
        writeln!(
            out,
            "{},{:.17e},{:.17e},{:.17e},{},{},{},{}",
            it.iteration,
            it.theta[0],
            it.theta[1],
            it.log_mag,
            it.sign,
            it.g,
            it.proposed_g,
            it.accepted as u8
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_chain_csv(path: &Path) -> Result<Vec<ChainIterate>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::InvalidInput(format!("chain line {}: expected 8 columns", idx + 1)));
        }
        let parse_f =
            |s: &str| s.parse::<f64>().map_err(|_| Error::InvalidInput(format!("chain line {}: bad float", idx + 1)));
        out.push(ChainIterate {
            iteration: fields[0].parse().map_err(|_| Error::InvalidInput("bad iteration".into()))?,
            theta: [parse_f(fields[1])?, parse_f(fields[2])?],
            log_mag: parse_f(fields[3])?,
            sign: fields[4].parse().map_err(|_| Error::InvalidInput("bad sign".into()))?,
            g: fields[5].parse().map_err(|_| Error::InvalidInput("bad g".into()))?,
            proposed_g: fields[6].parse().map_err(|_| Error::InvalidInput("bad proposed_g".into()))?,
            accepted: fields[7] == "1",
        });
    }
    Ok(out)
}

/// Outputs of one `run` invocation.
pub struct RunArtifacts {
    pub chain_path: PathBuf,
    pub metadata_path: PathBuf,
    pub output: RunOutput,
    pub metadata: RunMetadata,
}

/// Full pipeline for one chain: clustering, calibration at the posterior
/// mode, tuning, burn-in and sampling. `label` names the output files.
pub fn cmd_run(
    config: &ExperimentConfig,
    data: &DataSet,
    label: &str,
) -> Result<RunArtifacts> {
    std::fs::create_dir_all(&config.output_dir)?;
    let prior = PriorSpec::experiment_default();
    let mut stages: Vec<(String, f64)> = Vec::new();
    let stage = |name: &str, t: Instant| {
        let dt = t.elapsed().as_secs_f64();
        eprintln!("[{label}] {name}: {dt:.2}s");
        (name.to_string(), dt)
    };

    let t = Instant::now();
    let start = config.theta()?;
    let mode = find_mode(data, &prior, start)?;
    let covariance = mode_covariance(data, &prior, &mode);
    stages.push(stage("pilot", t));

    let n_eff = data.n_eff();
    let k = config.k.resolve(n_eff);

    let (method, m_b, summaries, tuned, cal): (
        Method,
        usize,
        Option<ClusterSummaries>,
        Option<crate::estimators::TuneResult>,
        Option<Calibration>,
    ) = match config.method {
        MethodName::Mh => (Method::ExactMh, 0, None, None, None),
        MethodName::Signed => {
            let t = Instant::now();
            let summaries = cluster_data(data, k, stage_seed(config.seed, "cluster"))?;
            save_summaries(&summaries, &config.output_dir.join(format!("{label}.clusters.json")))?;
            stages.push(stage("clustering", t));

            let t = Instant::now();
            let (d, dispersion) = residual_dispersion(&mode, data, &summaries)?;
            let cal = Calibration { d, dispersion, n_eff };
            stages.push(stage("calibration", t));

            let t = Instant::now();
            let family = config.family_enum()?;
            let tuned = tune_config(
                config.target_sigma_ll2,
                family,
                config.scheme,
                &cal,
                config.p_tilde,
            )
            .map_err(|e| match e {
                Error::InfeasibleTarget { target, reason } => Error::InfeasibleTarget {
                    target,
                    reason: format!("{reason}; calibration d = {d:.4}, dispersion = {dispersion:.4}"),
                },
                other => other,
            })?;
            stages.push(stage("tuning", t));
            (
                Method::SignedPm { estimator: tuned.config, correlation: config.correlation() },
                tuned.config.m_b,
                Some(summaries),
                Some(tuned),
                Some(cal),
            )
        }
    };

    let target_accept = match config.method {
        MethodName::Mh => 0.35,
        MethodName::Signed => 0.15,
    };
    let run_config = RunConfig {
        method,
        iterations: config.iterations,
        burn_in: config.effective_burn_in(),
        proposal: ProposalConfig { covariance, scale: 1.0, target_accept },
        prior,
        init: mode,
        seed: config.seed,
        initial_bound: tuned.as_ref().map(|t| t.config.bound).unwrap_or(0.0),
    };
    let t = Instant::now();
    let output = run_chain(&run_config, data, summaries.as_ref())?;
    stages.push(stage("sampling", t));

    let chain_path = config.output_dir.join(format!("{label}.chain.csv"));
    write_chain_csv(&chain_path, &output.iterates)?;

    let metadata = RunMetadata {
        label: label.to_string(),
        config: config.clone(),
        n_eff,
        k: if matches!(config.method, MethodName::Signed) { k } else { 0 },
        m_b,
        achieved_sigma_ll2: tuned.as_ref().map(|t| t.achieved),
        calibration_d: cal.as_ref().map(|c| c.d),
        calibration_sigma2_b: tuned.as_ref().map(|t| t.sigma2_b),
        tuned_bound: tuned.as_ref().map(|t| t.config.bound),
        frozen_bound: output.frozen_bound,
        proposal_covariance: covariance,
        final_scale: output.final_scale,
        accept_rate: output.accept_rate,
        negative_sign_fraction: output.negative_sign_fraction,
        contrib_evals: output.contrib_evals,
        derivative_evals: output.derivative_evals,
        burn_in: run_config.burn_in,
        iterations: config.iterations,
        stage_seconds: stages,
    };
    let metadata_path = config.output_dir.join(format!("{label}.meta.json"));
    std::fs::write(&metadata_path, serde_json::to_string_pretty(&metadata)?)?;
    Ok(RunArtifacts { chain_path, metadata_path, output, metadata })
}

fn empirical_quantile(sorted: &[f64], alpha: f64) -> f64 {
    let idx = ((sorted.len() as f64 - 1.0) * alpha).round() as usize;
    sorted[idx]
}

/// Chain statistics for the cost/efficiency table.
pub fn chain_stats(iterates: &[ChainIterate], m_b: usize, k: usize, n_eff: usize, baseline: bool) -> Result<ChainStats> {
    let theta0: Vec<f64> = iterates.iter().map(|i| i.theta[0]).collect();
    let theta1: Vec<f64> = iterates.iter().map(|i| i.theta[1]).collect();
    let iff = 0.5 * (inefficiency_factor(&theta0)? + inefficiency_factor(&theta1)?);
    let (m_bar_r, cost_fraction) = if baseline {
        (n_eff as f64, 1.0)
    } else {
        let proposed: Vec<u64> = iterates.iter().map(|i| i.proposed_g).collect();
        realized_cost(&proposed, m_b, k, n_eff)?
    };
    let sign_rate =
        iterates.iter().filter(|i| i.sign < 0).count() as f64 / iterates.len().max(1) as f64;
    Ok(ChainStats { inefficiency: iff, m_bar_r, cost_fraction, sign_rate })
}

/// Analyze chains against a baseline: quantile table, cost table and KDE
/// grids, all as CSV.
pub fn cmd_analyze(
    chain_labels: &[String],
    baseline_label: &str,
    output_dir: &Path,
) -> Result<()> {
    let load = |label: &str| -> Result<(Vec<ChainIterate>, RunMetadata)> {
        let iterates = read_chain_csv(&output_dir.join(format!("{label}.chain.csv")))?;
        let meta: RunMetadata = serde_json::from_str(&std::fs::read_to_string(
            output_dir.join(format!("{label}.meta.json")),
        )?)?;
        Ok((iterates, meta))
    };
    let (base_iter, base_meta) = load(baseline_label)?;
    if base_iter.is_empty() {
        return Err(Error::InvalidInput("baseline chain is empty".into()));
    }

    // Quantile thresholds from the baseline chain, per coordinate.
    let mut thresholds = [[0.0f64; 5]; 2];
    for coord in 0..2 {
        let mut sorted: Vec<f64> = base_iter.iter().map(|i| i.theta[coord]).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (j, &alpha) in QUANTILE_LEVELS.iter().enumerate() {
            thresholds[coord][j] = empirical_quantile(&sorted, alpha);
        }
    }

    let mut quantile_csv = String::from("method,coordinate,alpha,mce,ise\n");
    let mut cost_csv = String::from("method,sampling_fraction,if_theta0,if_theta1,ed_rel,sign_rate\n");
    let base_stats = chain_stats(&base_iter, 0, 0, base_meta.n_eff, true)?;

    let mut all = vec![baseline_label.to_string()];
    all.extend(chain_labels.iter().cloned());
    for label in &all {
        let (iterates, meta) = if label == baseline_label {
            load(baseline_label)?
        } else {
            load(label)?
        };
        if meta.config.model != base_meta.config.model {
            return Err(Error::InvalidInput(format!(
                "chain '{label}' uses a different parameterization than the baseline"
            )));
        }
        let signs: Vec<i8> = iterates.iter().map(|i| i.sign).collect();
        let draws: Vec<[f64; 2]> = iterates.iter().map(|i| i.theta).collect();
        for coord in 0..2 {
            for (j, &alpha) in QUANTILE_LEVELS.iter().enumerate() {
                let (mce, ise) = quantile_mce_ise(&draws, &signs, thresholds[coord][j], coord)?;
                writeln!(quantile_csv, "{label},{coord},{alpha},{mce:.6},{ise:.6}").unwrap();
            }
        }
        let is_base = label == baseline_label;
        let stats = chain_stats(&iterates, meta.m_b, meta.k, meta.n_eff, is_base)?;
        let ed = effective_draws_relative(&stats, &base_stats);
        let theta0: Vec<f64> = iterates.iter().map(|i| i.theta[0]).collect();
        let theta1: Vec<f64> = iterates.iter().map(|i| i.theta[1]).collect();
        writeln!(
            cost_csv,
            "{label},{:.6},{:.3},{:.3},{:.3},{:.6}",
            stats.cost_fraction,
            inefficiency_factor(&theta0)?,
            inefficiency_factor(&theta1)?,
            ed,
            stats.sign_rate
        )
        .unwrap();

        // KDE grids, one file per coordinate.
        for (coord, series) in [(0usize, &theta0), (1usize, &theta1)] {
            let n = series.len() as f64;
            let mean = series.iter().sum::<f64>() / n;
            let sd = (series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
            if sd == 0.0 {
                continue;
            }
            let h = 1.06 * sd * n.powf(-0.2);
            let grid = kde_default_grid(series, h, 512, 5.0);
            let dens = kde_grid(series, &grid, Some(h))?;
            let mut kde_csv = String::from("x,density\n");
            for (x, d) in grid.iter().zip(&dens) {
                writeln!(kde_csv, "{x:.8e},{d:.8e}").unwrap();
            }
            std::fs::write(output_dir.join(format!("kde_{label}_theta{coord}.csv")), kde_csv)?;
        }
    }
    std::fs::write(output_dir.join("quantile_table.csv"), quantile_csv)?;
    std::fs::write(output_dir.join("cost_table.csv"), cost_csv)?;
    Ok(())
}

/// Run the full method matrix (exact MH baseline plus both estimator
/// families in all three correlation modes) and analyze it.
pub fn cmd_compare(config: &ExperimentConfig, data: &DataSet) -> Result<()> {
    let mut base_config = config.clone();
    base_config.method = MethodName::Mh;
    cmd_run(&base_config, data, "mh")?;

    let mut labels = Vec::new();
    for family in ["rg", "poisson"] {
        for (mode, mode_name) in [
            (CorrMode::Uncorrelated, "uncorr"),
            (CorrMode::CorrG, "corr_g"),
            (CorrMode::CorrGU, "corr_gu"),
        ] {
            let mut c = config.clone();
            c.method = MethodName::Signed;
            c.family = family.to_string();
            c.mode = mode;
            match mode {
                CorrMode::Uncorrelated => {
                    c.e_g = 5.0;
                    c.target_sigma_ll2 = 2.1;
                }
                _ => {
                    c.e_g = config.e_g;
                    c.target_sigma_ll2 = config.target_sigma_ll2;
                }
            }
            if mode == CorrMode::CorrGU {
                c.scheme = SamplingScheme::BernoulliInclusion;
            }
            let label = format!("{family}_{mode_name}");
            match cmd_run(&c, data, &label) {
                Ok(_) => labels.push(label),
                Err(e) => eprintln!("[{label}] skipped: {e}"),
            }
        }
    }
    cmd_analyze(&labels, "mh", &config.output_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("ssmcmc_exp_{tag}_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn parse_config_defaults_and_errors() {
        let c = parse_config("model = M2\nn = 5000\ne_g = 5\n# comment\n\nmode = uncorrelated\n").unwrap();
        assert_eq!(c.model, Parameterization::M2);
        assert_eq!(c.n, 5000);
        assert_eq!(c.mode, CorrMode::Uncorrelated);

        let err = parse_config("model = M1\nbogus_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = parse_config("n = not_a_number\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn k_spec_percent_rounds_with_minimum() {
        assert_eq!(KSpec::Percent(1.0).resolve(100_000), 1000);
        assert_eq!(KSpec::Percent(0.0001).resolve(100), 1);
        assert_eq!(KSpec::Count(7).resolve(100), 7);
    }

    #[test]
    fn generate_is_byte_identical_for_same_seed() {
        let dir = temp_dir("gen");
        let mut config = ExperimentConfig { n: 50, output_dir: dir.clone(), ..Default::default() };
        config.seed = 9;
        let p1 = cmd_generate(&config).unwrap();
        let bytes1 = std::fs::read(&p1).unwrap();
        let p2 = cmd_generate(&config).unwrap();
        let bytes2 = std::fs::read(&p2).unwrap();
        assert_eq!(bytes1, bytes2);

        let data = load_dataset(&p1).unwrap();
        assert_eq!(data.y.len(), 50);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn generate_minimal_dataset() {
        let dir = temp_dir("gen2");
        let config = ExperimentConfig { n: 2, output_dir: dir.clone(), ..Default::default() };
        let p = cmd_generate(&config).unwrap();
        let data = load_dataset(&p).unwrap();
        assert_eq!(data.n_eff(), 1);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn smoke_run_and_analyze() {
        let dir = temp_dir("smoke");
        let config = ExperimentConfig {
            n: 2000,
            iterations: 10,
            burn_in: 50,
            k: KSpec::Count(20),
            e_g: 5.0,
            target_sigma_ll2: 20.0,
            mode: CorrMode::CorrG,
            phi: 0.99,
            output_dir: dir.clone(),
            ..Default::default()
        };
        let theta = config.theta().unwrap();
        let data = generate_ar1(config.n, &theta, 3).unwrap();

        let mut mh = config.clone();
        mh.method = MethodName::Mh;
        mh.iterations = 200;
        let base = cmd_run(&mh, &data, "mh").unwrap();
        assert_eq!(base.output.iterates.len(), 200);

        let art = cmd_run(&config, &data, "pois").unwrap();
        assert_eq!(art.output.iterates.len(), 10);
        assert!(art.metadata.achieved_sigma_ll2.is_some());

        // analysis needs >= 100 iterates for the IF; rerun longer
        let mut long = config.clone();
        long.iterations = 300;
        cmd_run(&long, &data, "pois_long").unwrap();
        cmd_analyze(&["pois_long".to_string()], "mh", &dir).unwrap();
        assert!(dir.join("quantile_table.csv").exists());
        assert!(dir.join("cost_table.csv").exists());
        let cost = std::fs::read_to_string(dir.join("cost_table.csv")).unwrap();
        assert!(cost.lines().count() >= 3);

        // baseline against itself: ED = 1, MCE = ISE
        let q = std::fs::read_to_string(dir.join("quantile_table.csv")).unwrap();
        for line in q.lines().skip(1).filter(|l| l.starts_with("mh,")) {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f[3], f[4], "baseline MCE != ISE: {line}");
        }
        let base_cost_line = cost.lines().find(|l| l.starts_with("mh,")).unwrap();
        let ed: f64 = base_cost_line.split(',').nth(4).unwrap().parse().unwrap();
        assert!((ed - 1.0).abs() < 1e-9);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn run_determinism_hash_identical() {
        let dir = temp_dir("det");
        let config = ExperimentConfig {
            n: 1500,
            iterations: 120,
            burn_in: 40,
            k: KSpec::Count(15),
            e_g: 4.0,
            target_sigma_ll2: 20.0,
            mode: CorrMode::CorrG,
            phi: 0.99,
            output_dir: dir.clone(),
            seed: 31,
            ..Default::default()
        };
        let data = generate_ar1(config.n, &config.theta().unwrap(), 4).unwrap();
        let a = cmd_run(&config, &data, "run_a").unwrap();
        let b = cmd_run(&config, &data, "run_b").unwrap();
        let bytes_a = std::fs::read(a.chain_path).unwrap();
        let bytes_b = std::fs::read(b.chain_path).unwrap();
        assert_eq!(bytes_a, bytes_b);
        std::fs::remove_dir_all(dir).ok();
    }
}
