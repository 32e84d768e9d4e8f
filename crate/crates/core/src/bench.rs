//! Paired-trial comparison of EM, DSAEM and DQAEM.
//!
//! One dataset is sampled once. Every trial draws one random initialization
//! and hands the same parameters to each algorithm, so differences in the
//! outcome are attributable to the algorithm alone. A fit succeeds when,
//! after matching components to the truth, every estimated mean lies within
//! `‖μ̂_k − μ_k‖² ≤ c·tr(Σ_k)` of its true mean.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{sample_gmm, GeneratorSpec, NORMAL_SAMPLER, PRNG_NAME, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::estimators::{fit, random_init, Algorithm, DegeneracyEvent, FitConfig, FitResult};
use crate::model::{Dataset, GmmParams};
use crate::posteriors::RowCheck;

pub const DEFAULT_THRESHOLD: f64 = 0.3;
pub const DEFAULT_TRIALS: usize = 1000;
const MAX_MATCH_COMPONENTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessCriterion {
    pub threshold: f64,
}

impl SuccessCriterion {
    pub fn new(threshold: f64) -> Result<Self> {
        if threshold > 0.0 && threshold.is_finite() {
            Ok(SuccessCriterion { threshold })
        } else {
            Err(Error::InvalidArgument(format!(
                "threshold must be > 0, got {threshold}"
            )))
        }
    }
}

impl Default for SuccessCriterion {
    fn default() -> Self {
        SuccessCriterion {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// `perm[k]` is the estimated component assigned to true component `k`,
/// chosen to minimize `Σ_k ‖μ̂_perm(k) − μ_k‖²` over all K! permutations.
pub fn match_components(estimated: &GmmParams, truth: &GmmParams) -> Result<Vec<usize>> {
    let k = truth.n_components();
    if estimated.n_components() != k || estimated.dim() != truth.dim() {
        return Err(Error::InvalidArgument(format!(
            "cannot match {} components in {}-D against {k} in {}-D",
            estimated.n_components(),
            estimated.dim(),
            truth.dim()
        )));
    }
    if k > MAX_MATCH_COMPONENTS {
        return Err(Error::InvalidArgument(format!(
            "brute-force matching supports at most {MAX_MATCH_COMPONENTS} components"
        )));
    }
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|t| {
            (0..k)
                .map(|e| (&estimated.means()[e] - &truth.means()[t]).norm_squared())
                .collect()
        })
        .collect();
    let mut best = (f64::INFINITY, (0..k).collect::<Vec<_>>());
    let mut current = Vec::with_capacity(k);
    let mut used = vec![false; k];
    search(&cost, &mut current, &mut used, 0.0, &mut best);
    Ok(best.1)
}

// lexicographic depth-first enumeration; ties keep the first permutation
fn search(
    cost: &[Vec<f64>],
    current: &mut Vec<usize>,
    used: &mut [bool],
    acc: f64,
    best: &mut (f64, Vec<usize>),
) {
    let t = current.len();
    if t == cost.len() {
        if acc < best.0 {
            *best = (acc, current.clone());
        }
        return;
    }
    for e in 0..cost.len() {
        if !used[e] {
            used[e] = true;
            current.push(e);
            search(cost, current, used, acc + cost[t][e], best);
            current.pop();
            used[e] = false;
        }
    }
}

/// Per-component squared mean errors after matching.
pub fn matched_square_errors(estimated: &GmmParams, truth: &GmmParams) -> Result<Vec<f64>> {
    let perm = match_components(estimated, truth)?;
    Ok(perm
        .iter()
        .enumerate()
        .map(|(t, &e)| (&estimated.means()[e] - &truth.means()[t]).norm_squared())
        .collect())
}

pub fn is_success(
    estimated: &GmmParams,
    truth: &GmmParams,
    crit: &SuccessCriterion,
) -> Result<bool> {
    let errors = matched_square_errors(estimated, truth)?;
    Ok(errors
        .iter()
        .zip(truth.covariances())
        .all(|(err, sigma)| *err <= crit.threshold * sigma.trace()))
}

/// SplitMix64 finalizer applied to `master + index`.
pub fn trial_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(index)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub generator: GeneratorSpec,
    /// Number of components fitted; the truth's K unless overridden.
    pub k: usize,
    pub n_trials: usize,
    pub master_seed: u64,
    pub criterion: SuccessCriterion,
    /// Algorithms in report order, each with its fit configuration.
    pub fits: Vec<FitConfig>,
    /// Worker threads; `None` uses the global pool. Never affects results.
    #[serde(skip)]
    pub jobs: Option<usize>,
}

impl BenchConfig {
    /// The three-cluster experiment with every algorithm at its default.
    pub fn paper(n_trials: usize, master_seed: u64) -> Self {
        BenchConfig {
            generator: GeneratorSpec::paper(master_seed),
            k: 3,
            n_trials,
            master_seed,
            criterion: SuccessCriterion::default(),
            fits: Algorithm::ALL
                .iter()
                .map(|&a| FitConfig::default_for(a))
                .collect(),
            jobs: None,
        }
    }

    pub fn with_algorithms(mut self, algorithms: &[Algorithm]) -> Self {
        self.fits.retain(|f| algorithms.contains(&f.algorithm));
        for &a in algorithms {
            if !self.fits.iter().any(|f| f.algorithm == a) {
                self.fits.push(FitConfig::default_for(a));
            }
        }
        self.fits.sort_by_key(|f| f.algorithm);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::InvalidArgument("n_trials must be at least 1".into()));
        }
        if self.fits.is_empty() {
            return Err(Error::InvalidArgument("no algorithms selected".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if self.k != self.generator.true_params.n_components() {
            return Err(Error::InvalidArgument(format!(
                "success is scored against {} true components but k = {}",
                self.generator.true_params.n_components(),
                self.k
            )));
        }
        for f in &self.fits {
            f.validate()?;
        }
        SuccessCriterion::new(self.criterion.threshold).map(|_| ())
    }
}

/// How one algorithm fared in one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmOutcome {
    pub algorithm: Algorithm,
    pub success: bool,
    pub final_log_likelihood: f64,
    pub final_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub max_log_likelihood_decrease: f64,
    pub responsibility_check: RowCheck,
    pub events: Vec<DegeneracyEvent>,
    pub square_errors: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_params: Option<GmmParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub init_seed: u64,
    pub init_params: GmmParams,
    pub outcomes: Vec<AlgorithmOutcome>,
}

impl TrialRecord {
    pub fn outcome(&self, algorithm: Algorithm) -> Option<&AlgorithmOutcome> {
        self.outcomes.iter().find(|o| o.algorithm == algorithm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub algorithm: Algorithm,
    pub successes: usize,
    pub failures: usize,
    pub success_ratio: f64,
}

/// DQAEM vs EM outcomes, counts and fractions of all trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contingency {
    pub both_success: usize,
    pub dqaem_success_em_failure: usize,
    pub dqaem_failure_em_success: usize,
    pub both_failure: usize,
    pub ratios: [[f64; 2]; 2],
}

impl Contingency {
    pub fn dqaem_margin(&self) -> usize {
        self.both_success + self.dqaem_success_em_failure
    }

    pub fn em_margin(&self) -> usize {
        self.both_success + self.dqaem_failure_em_success
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: String,
    pub prng: String,
    pub normal_sampler: String,
    pub config: BenchConfig,
    pub summaries: Vec<AlgorithmSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contingency: Option<Contingency>,
    /// Highest final log-likelihood reached by any algorithm in any trial.
    pub best_log_likelihood: f64,
    pub trials: Vec<TrialRecord>,
}

impl BenchReport {
    pub fn summary(&self, algorithm: Algorithm) -> Option<&AlgorithmSummary> {
        self.summaries.iter().find(|s| s.algorithm == algorithm)
    }

    pub fn success_ratio(&self, algorithm: Algorithm) -> Option<f64> {
        self.summary(algorithm).map(|s| s.success_ratio)
    }

    /// Human-readable tables in the layout of a success/failure comparison.
    pub fn render_tables(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{} trials, criterion |mu_hat - mu|^2 <= {} tr(Sigma)\n\n",
            self.config.n_trials, self.config.criterion.threshold
        ));
        if let Some(c) = &self.contingency {
            let pct = |x: f64| format!("{:6.1}%", 100.0 * x);
            s.push_str("                 EM success   EM failure\n");
            s.push_str(&format!(
                "DQAEM success    {}      {}\n",
                pct(c.ratios[0][0]),
                pct(c.ratios[0][1])
            ));
            s.push_str(&format!(
                "DQAEM failure    {}      {}\n\n",
                pct(c.ratios[1][0]),
                pct(c.ratios[1][1])
            ));
        }
        s.push_str("algorithm  success ratio\n");
        for sum in &self.summaries {
            s.push_str(&format!(
                "{:<9}  {:6.1}%  ({}/{})\n",
                sum.algorithm.name(),
                100.0 * sum.success_ratio,
                sum.successes,
                sum.successes + sum.failures
            ));
        }
        s
    }
}

/// Runs every configured algorithm from `init` on `data`.
pub fn run_trial_fits(
    data: &Dataset,
    fits: &[FitConfig],
    init: &GmmParams,
) -> Vec<(Algorithm, Result<FitResult>)> {
    fits.iter()
        .map(|cfg| (cfg.algorithm, fit(data, cfg, init)))
        .collect()
}

fn score(
    algorithm: Algorithm,
    result: Result<FitResult>,
    truth: &GmmParams,
    crit: &SuccessCriterion,
) -> AlgorithmOutcome {
    match result.and_then(|r| {
        let errors = matched_square_errors(&r.final_params, truth)?;
        let ok = is_success(&r.final_params, truth, crit)?;
        Ok((r, errors, ok))
    }) {
        Ok((r, square_errors, success)) => AlgorithmOutcome {
            algorithm,
            success,
            final_log_likelihood: r.final_log_likelihood(),
            final_objective: r.final_objective(),
            iterations: r.iterations_used,
            converged: r.converged,
            max_log_likelihood_decrease: r.max_log_likelihood_decrease(),
            responsibility_check: r.responsibility_check,
            square_errors,
            events: r.events,
            final_params: Some(r.final_params),
            error: None,
        },
        Err(e) => AlgorithmOutcome {
            algorithm,
            success: false,
            final_log_likelihood: f64::NAN,
            final_objective: f64::NAN,
            iterations: 0,
            converged: false,
            max_log_likelihood_decrease: 0.0,
            responsibility_check: RowCheck::IDEAL,
            square_errors: Vec::new(),
            events: Vec::new(),
            final_params: None,
            error: Some(e.to_string()),
        },
    }
}

/// Samples the dataset once and runs `n_trials` paired trials.
///
/// Trials may run on several threads but are reduced in index order, so the
/// report depends only on the configuration.
pub fn run_benchmark(config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let data = sample_gmm(&config.generator)?;
    let truth = &config.generator.true_params;

    let run_one = |trial_id: usize| -> Result<TrialRecord> {
        let init_seed = trial_seed(config.master_seed, trial_id as u64);
        let init = random_init(&data, config.k, init_seed)?;
        let outcomes = run_trial_fits(&data, &config.fits, &init)
            .into_iter()
            .map(|(a, r)| score(a, r, truth, &config.criterion))
            .collect();
        Ok(TrialRecord {
            trial_id,
            init_seed,
            init_params: init,
            outcomes,
        })
    };
    let trials: Vec<TrialRecord> = match config.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start {jobs} workers: {e}")))?
            .install(|| {
                (0..config.n_trials)
                    .into_par_iter()
                    .map(run_one)
                    .collect::<Result<_>>()
            })?,
        None => (0..config.n_trials)
            .into_par_iter()
            .map(run_one)
            .collect::<Result<_>>()?,
    };
    Ok(aggregate(config.clone(), trials))
}

fn aggregate(config: BenchConfig, trials: Vec<TrialRecord>) -> BenchReport {
    let n = trials.len();
    let summaries = config
        .fits
        .iter()
        .map(|f| {
            let successes = trials
                .iter()
                .filter(|t| t.outcome(f.algorithm).is_some_and(|o| o.success))
                .count();
            AlgorithmSummary {
                algorithm: f.algorithm,
                successes,
                failures: n - successes,
                success_ratio: successes as f64 / n as f64,
            }
        })
        .collect();
    let has = |a: Algorithm| config.fits.iter().any(|f| f.algorithm == a);
    let contingency = (has(Algorithm::Dqaem) && has(Algorithm::Em)).then(|| {
        let mut counts = [[0usize; 2]; 2];
        for t in &trials {
            let q = t.outcome(Algorithm::Dqaem).is_some_and(|o| o.success);
            let e = t.outcome(Algorithm::Em).is_some_and(|o| o.success);
            counts[usize::from(!q)][usize::from(!e)] += 1;
        }
        let frac = |c: usize| c as f64 / n as f64;
        Contingency {
            both_success: counts[0][0],
            dqaem_success_em_failure: counts[0][1],
            dqaem_failure_em_success: counts[1][0],
            both_failure: counts[1][1],
            ratios: [
                [frac(counts[0][0]), frac(counts[0][1])],
                [frac(counts[1][0]), frac(counts[1][1])],
            ],
        }
    });
    let best_log_likelihood = trials
        .iter()
        .flat_map(|t| t.outcomes.iter())
        .map(|o| o.final_log_likelihood)
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    BenchReport {
        schema_version: SCHEMA_VERSION.into(),
        prng: PRNG_NAME.into(),
        normal_sampler: NORMAL_SAMPLER.into(),
        config,
        summaries,
        contingency,
        best_log_likelihood,
        trials,
    }
}

/// Writes `iteration,algorithm,objective,log_likelihood`, one row per
/// iteration of every result.
pub fn emit_trace_table(results: &[FitResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if results.is_empty() {
        return Err(Error::InvalidArgument("no results to write".into()));
    }
    let mut text = String::from("iteration,algorithm,objective,log_likelihood\n");
    for r in results {
        for row in &r.trace {
            text.push_str(&format!(
                "{},{},{:e},{:e}\n",
                row.iteration,
                r.algorithm.name(),
                row.objective,
                row.log_likelihood
            ));
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
