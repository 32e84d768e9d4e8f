//! EM, DSAEM and DQAEM drivers.
//!
//! All three share [`m_step`]; they differ only in the E-step kernel and in
//! the annealing parameter that the [`Schedule`] feeds it each iteration.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, GmmParams, MixtureEvaluator};
use crate::posteriors::{e_step, CouplingMatrix, Kernel, Responsibilities, RowCheck};

pub const DEFAULT_RATE: f64 = 0.95;
pub const DEFAULT_CUTOFF: f64 = 1e-3;
pub const DEFAULT_MAX_ITERS: usize = 500;
pub const DEFAULT_REL_TOL: f64 = 1e-8;
pub const DEFAULT_GAMMA_INIT: f64 = 1.0;
pub const DEFAULT_BETA_INIT: f64 = 0.7;
/// A component whose responsibility mass falls below this fraction of N is
/// considered dead and re-seeded.
pub const DEGENERATE_FRACTION: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "EM")]
    Em,
    #[serde(rename = "DSAEM")]
    Dsaem,
    #[serde(rename = "DQAEM")]
    Dqaem,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Em, Algorithm::Dsaem, Algorithm::Dqaem];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Em => "EM",
            Algorithm::Dsaem => "DSAEM",
            Algorithm::Dqaem => "DQAEM",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "em" => Ok(Algorithm::Em),
            "dsaem" => Ok(Algorithm::Dsaem),
            "dqaem" => Ok(Algorithm::Dqaem),
            other => Err(Error::InvalidArgument(format!(
                "unknown algorithm {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Exponential,
}

/// Annealing parameter as a function of the iteration index.
///
/// An exponential schedule closes the gap to `target` geometrically,
/// `value(t) = target + (init − target)·rate^t`, and snaps to `target` once
/// the remaining gap is below `cutoff`. For Γ (target 0) that is
/// `Γ_init·rate^t`; for β (target 1) it is `1 − (1 − β_init)·rate^t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub init: f64,
    pub rate: f64,
    pub target: f64,
    pub cutoff: f64,
}

pub fn make_schedule(
    kind: ScheduleKind,
    init: f64,
    rate: f64,
    floor_or_target: f64,
) -> Result<Schedule> {
    Schedule::new(kind, init, rate, floor_or_target, DEFAULT_CUTOFF)
}

impl Schedule {
    pub fn new(kind: ScheduleKind, init: f64, rate: f64, target: f64, cutoff: f64) -> Result<Self> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rate must lie in (0, 1], got {rate}"
            )));
        }
        if !init.is_finite() || !target.is_finite() {
            return Err(Error::InvalidArgument(
                "schedule endpoints must be finite".into(),
            ));
        }
        if !(cutoff >= 0.0 && cutoff.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "cutoff must be >= 0, got {cutoff}"
            )));
        }
        Ok(Schedule {
            kind,
            init,
            rate,
            target,
            cutoff,
        })
    }

    pub fn constant(value: f64) -> Self {
        Schedule {
            kind: ScheduleKind::Constant,
            init: value,
            rate: 1.0,
            target: value,
            cutoff: 0.0,
        }
    }

    /// Γ from `init` down to 0 with the default rate and cutoff.
    pub fn gamma(init: f64) -> Self {
        Schedule::new(
            ScheduleKind::Exponential,
            init,
            DEFAULT_RATE,
            0.0,
            DEFAULT_CUTOFF,
        )
        .expect("default schedule is valid")
    }

    /// β from `init` up to 1 with the default rate and cutoff.
    pub fn beta(init: f64) -> Self {
        Schedule::new(
            ScheduleKind::Exponential,
            init,
            DEFAULT_RATE,
            1.0,
            DEFAULT_CUTOFF,
        )
        .expect("default schedule is valid")
    }

    pub fn with_rate(mut self, rate: f64) -> Result<Self> {
        self = Schedule::new(self.kind, self.init, rate, self.target, self.cutoff)?;
        Ok(self)
    }

    pub fn value(&self, t: usize) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.init,
            ScheduleKind::Exponential => {
                let gap =
                    (self.init - self.target) * self.rate.powi(t.min(i32::MAX as usize) as i32);
                if gap.abs() < self.cutoff {
                    self.target
                } else {
                    self.target + gap
                }
            }
        }
    }

    /// The value annealing ends at.
    pub fn terminal(&self) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.init,
            ScheduleKind::Exponential => self.target,
        }
    }

    pub fn is_terminal(&self, t: usize) -> bool {
        self.value(t) == self.terminal()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub algorithm: Algorithm,
    /// β for DSAEM, Γ for DQAEM, ignored by EM.
    pub schedule: Schedule,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
    /// `σ′` for DQAEM; all off-diagonal ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<CouplingMatrix>,
}

impl FitConfig {
    pub fn em() -> Self {
        FitConfig {
            algorithm: Algorithm::Em,
            schedule: Schedule::constant(1.0),
            max_iters: DEFAULT_MAX_ITERS,
            rel_tol: DEFAULT_REL_TOL,
            seed: 0,
            coupling: None,
        }
    }

    pub fn dsaem(schedule: Schedule) -> Self {
        FitConfig {
            algorithm: Algorithm::Dsaem,
            schedule,
            ..FitConfig::em()
        }
    }

    pub fn dqaem(schedule: Schedule) -> Self {
        FitConfig {
            algorithm: Algorithm::Dqaem,
            schedule,
            ..FitConfig::em()
        }
    }

    /// Default schedule and stopping rule for `algorithm`.
    pub fn default_for(algorithm: Algorithm) -> Self {
        match algorithm {
            Algorithm::Em => FitConfig::em(),
            Algorithm::Dsaem => FitConfig::dsaem(Schedule::beta(DEFAULT_BETA_INIT)),
            Algorithm::Dqaem => FitConfig::dqaem(Schedule::gamma(DEFAULT_GAMMA_INIT)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument(
                "max_iters must be at least 1".into(),
            ));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "rel_tol must be > 0, got {}",
                self.rel_tol
            )));
        }
        let s = &self.schedule;
        match self.algorithm {
            Algorithm::Em => Ok(()),
            Algorithm::Dsaem => {
                if s.init <= 0.0 || s.terminal() <= 0.0 {
                    Err(Error::InvalidArgument(
                        "beta schedule must stay positive".into(),
                    ))
                } else if s.kind == ScheduleKind::Exponential && s.init > s.target {
                    Err(Error::InvalidArgument(
                        "beta schedule must increase toward its target".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            Algorithm::Dqaem => {
                if s.init < 0.0 || s.terminal() < 0.0 {
                    Err(Error::InvalidArgument(
                        "gamma schedule must stay nonnegative".into(),
                    ))
                } else if s.kind == ScheduleKind::Exponential && s.init < s.target {
                    Err(Error::InvalidArgument(
                        "gamma schedule must decrease toward its target".into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// One iteration of a fit: the E-step at `θ^(t)` with the annealing value in force.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Log-likelihood (EM), `−F_β` (DSAEM) or `−F_Γ` (DQAEM).
    pub objective: f64,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegeneracyEvent {
    pub iteration: usize,
    pub component: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub algorithm: Algorithm,
    pub final_params: GmmParams,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    pub iterations_used: usize,
    pub events: Vec<DegeneracyEvent>,
    /// Worst row-stochasticity deviation seen over every E-step of the run.
    pub responsibility_check: RowCheck,
}

impl FitResult {
    pub fn final_log_likelihood(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.log_likelihood)
    }

    pub fn final_objective(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.objective)
    }

    /// Largest single-step drop of the log-likelihood trace (0 if none).
    pub fn max_log_likelihood_decrease(&self) -> f64 {
        self.trace
            .windows(2)
            .map(|w| w[0].log_likelihood - w[1].log_likelihood)
            .fold(0.0, f64::max)
    }
}

/// Weighted-moment updates of `{π, μ, Σ}` from fixed responsibilities.
pub fn m_step(data: &Dataset, resp: &Responsibilities) -> Result<GmmParams> {
    m_step_with_events(data, resp).map(|(p, _)| p)
}

/// As [`m_step`], also returning the indices of components that had to be
/// re-seeded because their responsibility mass vanished.
///
/// A dead component is moved onto the point whose largest responsibility is
/// smallest (the worst-explained point), takes the global covariance and a
/// weight of `1/N` before renormalization.
pub fn m_step_with_events(
    data: &Dataset,
    resp: &Responsibilities,
) -> Result<(GmmParams, Vec<usize>)> {
    let (n, k) = resp.matrix().shape();
    if n != data.len() {
        return Err(Error::InvalidArgument(format!(
            "{n} responsibility rows for {} points",
            data.len()
        )));
    }
    let r = resp.matrix();
    let y = data.points();
    let d = data.dim();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covariances = Vec::with_capacity(k);
    let mut dead = Vec::new();

    for c in 0..k {
        let col = r.column(c);
        let mass: f64 = col.sum();
        if !(mass >= DEGENERATE_FRACTION * n as f64) {
            dead.push(c);
            weights.push(0.0);
            means.push(DVector::zeros(d));
            covariances.push(DMatrix::zeros(d, d));
            continue;
        }
        let mut mu = DVector::zeros(d);
        for i in 0..n {
            for j in 0..d {
                mu[j] += col[i] * y[(i, j)];
            }
        }
        mu /= mass;
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..n {
            for a in 0..d {
                let da = y[(i, a)] - mu[a];
                for b in 0..=a {
                    cov[(a, b)] += col[i] * da * (y[(i, b)] - mu[b]);
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                cov[(b, a)] = cov[(a, b)];
            }
        }
        cov /= mass;
        weights.push(mass / n as f64);
        means.push(mu);
        covariances.push(cov);
    }

    if !dead.is_empty() {
        let worst = (0..n)
            .min_by(|&a, &b| r.row(a).max().total_cmp(&r.row(b).max()))
            .expect("non-empty dataset");
        let global = data.covariance();
        for &c in &dead {
            weights[c] = 1.0 / n as f64;
            means[c] = data.point(worst);
            covariances[c] = global.clone();
        }
    }
    let params = GmmParams::regularized(weights, means, covariances)?;
    Ok((params, dead))
}

/// Iterates E-step, M-step and schedule update from `init`.
///
/// Stops once the annealing parameter has reached its terminal value and
/// the objective changes by less than `rel_tol·(1 + |objective|)` between
/// consecutive terminal iterations, or after `max_iters` E-steps.
pub fn fit(data: &Dataset, config: &FitConfig, init: &GmmParams) -> Result<FitResult> {
    config.validate()?;
    if init.dim() != data.dim() {
        return Err(Error::InvalidArgument(format!(
            "initial parameters have dimension {}, data has {}",
            init.dim(),
            data.dim()
        )));
    }
    let k = init.n_components();
    let coupling = match (&config.coupling, config.algorithm) {
        (Some(c), _) if c.dim() != k => {
            return Err(Error::InvalidArgument(format!(
                "coupling has size {}, model has {k} components",
                c.dim()
            )))
        }
        (Some(c), _) => c.clone(),
        (None, _) => CouplingMatrix::all_ones(k),
    };
    let schedule = match config.algorithm {
        Algorithm::Em => Schedule::constant(1.0),
        _ => config.schedule,
    };

    let mut params = init.clone();
    let mut trace = Vec::new();
    let mut events = Vec::new();
    let mut check = RowCheck::EMPTY;
    let mut converged = false;
    let mut previous: Option<f64> = None;

    for t in 0..config.max_iters {
        let value = schedule.value(t);
        let kernel = match config.algorithm {
            Algorithm::Em => Kernel::Classical,
            Algorithm::Dsaem => Kernel::Tempered { beta: value },
            Algorithm::Dqaem => Kernel::Quantum {
                gamma: value,
                coupling: &coupling,
            },
        };
        let h = MixtureEvaluator::new(&params)?.energies(data)?;
        let step = e_step(&h, &kernel);
        if !step.objective.is_finite() || !step.log_likelihood.is_finite() {
            return Err(Error::Numerical(format!(
                "{} objective became non-finite at iteration {t}",
                config.algorithm
            )));
        }
        check = check.merge(step.resp.row_check());
        trace.push(TraceRow {
            iteration: t,
            gamma: (config.algorithm == Algorithm::Dqaem).then_some(value),
            beta: (config.algorithm == Algorithm::Dsaem).then_some(value),
            objective: step.objective,
            log_likelihood: step.log_likelihood,
        });

        if schedule.is_terminal(t) {
            if let Some(prev) = previous {
                if (step.objective - prev).abs() / (1.0 + step.objective.abs()) < config.rel_tol {
                    converged = true;
                    break;
                }
            }
            previous = Some(step.objective);
        } else {
            previous = None;
        }

        let (next, dead) = m_step_with_events(data, &step.resp)?;
        events.extend(dead.into_iter().map(|component| DegeneracyEvent {
            iteration: t,
            component,
        }));
        params = next;
    }

    Ok(FitResult {
        algorithm: config.algorithm,
        final_params: params,
        iterations_used: trace.len(),
        trace,
        converged,
        events,
        responsibility_check: check,
    })
}

/// Means uniform in the data's bounding box, covariances the per-axis data
/// variance on the diagonal, equal weights. Deterministic in `seed`.
pub fn random_init(data: &Dataset, k: usize, seed: u64) -> Result<GmmParams> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one component".into()));
    }
    let d = data.dim();
    let y = data.points();
    let lo: Vec<f64> = (0..d).map(|j| y.column(j).min()).collect();
    let hi: Vec<f64> = (0..d).map(|j| y.column(j).max()).collect();
    let var = data.covariance().diagonal();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = (0..k)
        .map(|_| {
            DVector::from_iterator(
                d,
                (0..d).map(|j| {
                    if hi[j] > lo[j] {
                        rng.random_range(lo[j]..hi[j])
                    } else {
                        lo[j]
                    }
                }),
            )
        })
        .collect();
    let diag = DVector::from_iterator(d, var.iter().map(|&v| if v > 0.0 { v } else { 1.0 }));
    GmmParams::new(
        vec![1.0 / k as f64; k],
        means,
        vec![DMatrix::from_diagonal(&diag); k],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::log_likelihood;
    use crate::posteriors::classical_posterior;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn blob_data() -> Dataset {
        let mut rows = Vec::new();
        for (cx, cy) in [(-3.0, 0.0), (0.0, 0.0), (3.0, 0.0)] {
            for (dx, dy) in [
                (-0.5, 0.1),
                (0.4, -0.3),
                (0.1, 0.6),
                (0.0, -0.4),
                (0.3, 0.2),
            ] {
                rows.push(vec![cx + dx, cy + dy]);
            }
        }
        Dataset::from_rows(&rows).unwrap()
    }

    #[test]
    fn schedule_values() {
        let g = make_schedule(ScheduleKind::Exponential, 1.0, 0.95, 0.0).unwrap();
        assert_eq!(g.value(0), 1.0);
        assert_eq!(g.value(134), 0.95f64.powi(134));
        assert_eq!(g.value(135), 0.0);
        assert!(!g.is_terminal(134) && g.is_terminal(135));
        for t in 0..200 {
            assert!(g.value(t + 1) <= g.value(t));
        }
        let b = make_schedule(ScheduleKind::Exponential, 0.7, 0.95, 1.0).unwrap();
        assert_eq!(b.value(0), 0.7);
        assert_eq!(b.value(10_000), 1.0);
        for t in 0..200 {
            assert!(b.value(t + 1) >= b.value(t));
        }
        assert!(make_schedule(ScheduleKind::Exponential, 1.0, 0.0, 0.0).is_err());
        assert!(make_schedule(ScheduleKind::Exponential, 1.0, 1.2, 0.0).is_err());
        assert_eq!(Schedule::constant(0.3).value(77), 0.3);
    }

    #[test]
    fn gamma_cutoff_index_is_first_below_threshold() {
        let first = (0..).find(|&t| 0.95f64.powi(t) < 1e-3).unwrap();
        assert_eq!(first, 135);
    }

    #[test]
    fn hard_assignment_gives_cluster_moments() {
        let data = blob_data();
        let r = DMatrix::from_fn(15, 3, |i, k| if i / 5 == k { 1.0 } else { 0.0 });
        let p = m_step(&data, &Responsibilities::new(r).unwrap()).unwrap();
        for k in 0..3 {
            assert!((p.weights()[k] - 1.0 / 3.0).abs() < 1e-15);
            let rows: Vec<DVector<f64>> = (5 * k..5 * k + 5).map(|i| data.point(i)).collect();
            let mean = rows.iter().fold(DVector::zeros(2), |a, b| a + b) / 5.0;
            let cov = rows.iter().fold(DMatrix::zeros(2, 2), |a, b| {
                a + (b - &mean) * (b - &mean).transpose()
            }) / 5.0
                + DMatrix::identity(2, 2) * crate::model::EPSILON_COV;
            assert!((&p.means()[k] - mean).amax() < 1e-14);
            assert!((&p.covariances()[k] - cov).amax() < 1e-14);
        }
    }

    #[test]
    fn uniform_responsibilities_give_global_moments() {
        let data = blob_data();
        let r = DMatrix::from_element(15, 3, 1.0 / 3.0);
        let p = m_step(&data, &Responsibilities::new(r).unwrap()).unwrap();
        let global = data.covariance() + DMatrix::identity(2, 2) * crate::model::EPSILON_COV;
        for k in 0..3 {
            assert!((p.weights()[k] - 1.0 / 3.0).abs() < 1e-15);
            assert!((&p.means()[k] - data.mean()).amax() < 1e-14);
            assert!((&p.covariances()[k] - &global).amax() < 1e-13);
        }
    }

    #[test]
    fn weighted_moments_match_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| vec![rng.random_range(-4.0..4.0), rng.random_range(-2.0..2.0)])
            .collect();
        let data = Dataset::from_rows(&rows).unwrap();
        let raw: Vec<[f64; 3]> = (0..20)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let r = DMatrix::from_fn(20, 3, |i, k| raw[i][k] / raw[i].iter().sum::<f64>());
        let p = m_step(&data, &Responsibilities::new(r.clone()).unwrap()).unwrap();
        for k in 0..3 {
            let nk: f64 = (0..20).map(|i| r[(i, k)]).sum();
            let mx: f64 = (0..20).map(|i| r[(i, k)] * rows[i][0]).sum::<f64>() / nk;
            let my: f64 = (0..20).map(|i| r[(i, k)] * rows[i][1]).sum::<f64>() / nk;
            let sxx: f64 = (0..20)
                .map(|i| r[(i, k)] * (rows[i][0] - mx).powi(2))
                .sum::<f64>()
                / nk;
            let sxy: f64 = (0..20)
                .map(|i| r[(i, k)] * (rows[i][0] - mx) * (rows[i][1] - my))
                .sum::<f64>()
                / nk;
            let syy: f64 = (0..20)
                .map(|i| r[(i, k)] * (rows[i][1] - my).powi(2))
                .sum::<f64>()
                / nk;
            assert!((p.weights()[k] - nk / 20.0).abs() < 1e-12);
            assert!((p.means()[k][0] - mx).abs() < 1e-10 && (p.means()[k][1] - my).abs() < 1e-10);
            let c = &p.covariances()[k];
            assert!((c[(0, 0)] - sxx - 1e-6).abs() < 1e-10);
            assert!((c[(0, 1)] - sxy).abs() < 1e-10 && (c[(1, 0)] - sxy).abs() < 1e-10);
            assert!((c[(1, 1)] - syy - 1e-6).abs() < 1e-10);
        }
    }

    #[test]
    fn dead_component_is_reseeded() {
        let data = blob_data();
        let mut r = DMatrix::from_fn(15, 3, |i, k| if i / 5 == k { 1.0 } else { 0.0 });
        for i in 10..15 {
            r[(i, 2)] = 0.0;
            r[(i, 1)] = 1.0;
        }
        // point 12 is the least confidently assigned
        r[(12, 0)] = 0.4;
        r[(12, 1)] = 0.6;
        let (p, dead) = m_step_with_events(&data, &Responsibilities::new(r).unwrap()).unwrap();
        assert_eq!(dead, vec![2]);
        assert_eq!(p.means()[2], data.point(12));
        assert!((p.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn em_fixed_point_converges_fast() {
        // three tight, symmetric clusters; init at the truth
        let data = blob_data();
        let r = DMatrix::from_fn(15, 3, |i, k| if i / 5 == k { 1.0 } else { 0.0 });
        let truth = m_step(&data, &Responsibilities::new(r).unwrap()).unwrap();
        let out = fit(&data, &FitConfig::em(), &truth).unwrap();
        assert!(out.converged);
        assert!(out.iterations_used <= 5, "{}", out.iterations_used);
        assert!(out.final_params.max_abs_diff(&truth) < 1e-6);
    }

    #[test]
    fn em_log_likelihood_never_decreases() {
        let data = blob_data();
        for seed in 0..20 {
            let init = random_init(&data, 3, seed).unwrap();
            let out = fit(&data, &FitConfig::em(), &init).unwrap();
            assert!(out.max_log_likelihood_decrease() <= 1e-9, "seed {seed}");
            assert_eq!(out.trace.len(), out.iterations_used);
        }
    }

    #[test]
    fn reductions_to_em() {
        let data = blob_data();
        for seed in 0..10 {
            let init = random_init(&data, 3, seed).unwrap();
            let em = fit(&data, &FitConfig::em(), &init).unwrap();
            let dq = fit(&data, &FitConfig::dqaem(Schedule::constant(0.0)), &init).unwrap();
            let ds = fit(&data, &FitConfig::dsaem(Schedule::constant(1.0)), &init).unwrap();
            assert!(dq.final_params.max_abs_diff(&em.final_params) <= 1e-10);
            assert!(ds.final_params.max_abs_diff(&em.final_params) <= 1e-10);
            assert_eq!(dq.iterations_used, em.iterations_used);
        }
    }

    #[test]
    fn fixed_gamma_free_energy_never_increases() {
        let data = blob_data();
        for seed in 0..10 {
            let init = random_init(&data, 3, seed).unwrap();
            let out = fit(&data, &FitConfig::dqaem(Schedule::constant(0.5)), &init).unwrap();
            for w in out.trace.windows(2) {
                // objective is −F_Γ
                assert!(w[1].objective >= w[0].objective - 1e-9 * (1.0 + w[0].objective.abs()));
            }
        }
    }

    #[test]
    fn annealed_traces_record_schedule() {
        let data = blob_data();
        let init = random_init(&data, 3, 1).unwrap();
        let dq = fit(&data, &FitConfig::default_for(Algorithm::Dqaem), &init).unwrap();
        assert_eq!(dq.trace[0].gamma, Some(1.0));
        assert_eq!(dq.trace.last().unwrap().gamma, Some(0.0));
        assert!(dq.trace.iter().all(|r| r.beta.is_none()));
        let ds = fit(&data, &FitConfig::default_for(Algorithm::Dsaem), &init).unwrap();
        assert_eq!(ds.trace[0].beta, Some(0.7));
        assert_eq!(ds.trace.last().unwrap().beta, Some(1.0));
    }

    #[test]
    fn fit_is_deterministic() {
        let data = blob_data();
        let init = random_init(&data, 3, 9).unwrap();
        let cfg = FitConfig::default_for(Algorithm::Dqaem);
        assert_eq!(
            fit(&data, &cfg, &init).unwrap(),
            fit(&data, &cfg, &init).unwrap()
        );
    }

    #[test]
    fn random_init_properties() {
        let data = blob_data();
        assert_eq!(
            random_init(&data, 3, 4).unwrap(),
            random_init(&data, 3, 4).unwrap()
        );
        let one = random_init(&data, 1, 4).unwrap();
        assert_eq!(one.weights(), &[1.0]);
        let m = &one.means()[0];
        assert!(m[0] >= -3.5 && m[0] <= 3.3 && m[1] >= -0.4 && m[1] <= 0.6);

        let (lo, hi) = (-3.5, 3.3);
        let draws = 1000;
        let mut total = 0.0;
        for seed in 0..draws {
            total += random_init(&data, 1, seed).unwrap().means()[0][0];
        }
        let center = 0.5 * (lo + hi);
        assert!((total / draws as f64 - center).abs() <= 0.05 * (hi - lo));
    }

    #[test]
    fn m_step_output_is_valid_params() {
        let data = blob_data();
        let p = random_init(&data, 3, 2).unwrap();
        let r = classical_posterior(&data, &p).unwrap();
        let next = m_step(&data, &r).unwrap();
        assert!((next.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(log_likelihood(&data, &next).unwrap() >= log_likelihood(&data, &p).unwrap());
    }

    #[test]
    fn rejects_bad_config() {
        let data = blob_data();
        let init = random_init(&data, 3, 0).unwrap();
        let mut cfg = FitConfig::em();
        cfg.max_iters = 0;
        assert!(fit(&data, &cfg, &init).is_err());
        let cfg = FitConfig::dsaem(Schedule::constant(0.0));
        assert!(fit(&data, &cfg, &init).is_err());
        let mut cfg = FitConfig::dqaem(Schedule::gamma(1.0));
        cfg.coupling = Some(CouplingMatrix::all_ones(2));
        assert!(fit(&data, &cfg, &init).is_err());
        let _ = v(&[0.0]);
    }
}
