use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dqaem::bench::{
    emit_trace_table, run_benchmark, run_trial_fits, BenchConfig, SuccessCriterion,
};
use dqaem::data_io::{
    read_csv, sample_gmm, write_csv, write_result_json, FitDocument, GeneratorSpec, PRNG_NAME,
};
use dqaem::estimators::{
    fit, random_init, Algorithm, FitConfig, Schedule, ScheduleKind, DEFAULT_BETA_INIT,
    DEFAULT_CUTOFF, DEFAULT_GAMMA_INIT, DEFAULT_MAX_ITERS, DEFAULT_RATE, DEFAULT_REL_TOL,
};

#[derive(Debug, Parser)]
#[command(
    name = "dqaem",
    version,
    about = "EM, DSAEM and DQAEM for Gaussian mixture models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a synthetic mixture dataset to CSV (plus a JSON sidecar with the generator).
    Generate(GenerateArgs),
    /// Fit one model to a CSV dataset and write the result as JSON.
    Fit(FitArgs),
    /// Run the paired-trial success-ratio benchmark.
    Bench(BenchArgs),
    /// Fit every algorithm from one shared initialization and write the per-iteration traces.
    Trace(TraceArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// Three unit Gaussians at (-3,0), (0,0), (3,0), equal weights, 600 points.
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AlgoArg {
    Em,
    Dsaem,
    Dqaem,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Em => Algorithm::Em,
            AlgoArg::Dsaem => Algorithm::Dsaem,
            AlgoArg::Dqaem => Algorithm::Dqaem,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Exponential,
    Constant,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Start from a named configuration; explicit flags override it.
    #[arg(long, value_enum, default_value = "paper")]
    preset: Preset,
    /// Number of points.
    #[arg(long)]
    n: Option<usize>,
    /// Number of components, spaced along the first axis.
    #[arg(long)]
    k: Option<usize>,
    /// Dimension of the points.
    #[arg(long)]
    dim: Option<usize>,
    /// Distance between neighbouring component means.
    #[arg(long)]
    spacing: Option<f64>,
}

impl DataArgs {
    fn spec(&self, seed: u64) -> anyhow::Result<GeneratorSpec> {
        let Preset::Paper = self.preset;
        Ok(GeneratorSpec::on_a_line(
            self.k.unwrap_or(3),
            self.dim.unwrap_or(2),
            self.spacing.unwrap_or(3.0),
            self.n.unwrap_or(dqaem::data_io::PAPER_N_POINTS),
            seed,
        )?)
    }
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Seed of the sampler.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path; the generator spec goes next to it as <stem>.spec.json.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    /// Initial Γ for DQAEM.
    #[arg(long, default_value_t = DEFAULT_GAMMA_INIT)]
    gamma_init: f64,
    /// Initial β for DSAEM.
    #[arg(long, default_value_t = DEFAULT_BETA_INIT)]
    beta_init: f64,
    /// Per-iteration factor applied to the distance from the terminal value.
    #[arg(long, default_value_t = DEFAULT_RATE)]
    rate: f64,
    /// Distance from the terminal value below which the schedule snaps to it.
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: f64,
    #[arg(long, value_enum, default_value = "exponential")]
    schedule: ScheduleArg,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    max_iters: usize,
    /// Relative change of the objective that counts as converged.
    #[arg(long, default_value_t = DEFAULT_REL_TOL)]
    rel_tol: f64,
}

impl ScheduleArgs {
    fn config(&self, algorithm: Algorithm, seed: u64) -> anyhow::Result<FitConfig> {
        let kind = match self.schedule {
            ScheduleArg::Exponential => ScheduleKind::Exponential,
            ScheduleArg::Constant => ScheduleKind::Constant,
        };
        let schedule = match algorithm {
            Algorithm::Em => Schedule::constant(1.0),
            Algorithm::Dsaem => Schedule::new(kind, self.beta_init, self.rate, 1.0, self.cutoff)?,
            Algorithm::Dqaem => Schedule::new(kind, self.gamma_init, self.rate, 0.0, self.cutoff)?,
        };
        let config = FitConfig {
            algorithm,
            schedule,
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            seed,
            coupling: None,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Dataset CSV (header x1,...,xD[,label]).
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    algo: AlgoArg,
    /// Number of mixture components.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Seed of the random initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Output JSON path.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Number of paired trials.
    #[arg(long, default_value_t = dqaem::bench::DEFAULT_TRIALS)]
    trials: usize,
    /// Seed from which every trial's initialization seed is derived.
    #[arg(long, default_value_t = 0)]
    master_seed: u64,
    /// Seed of the dataset; defaults to the master seed.
    #[arg(long)]
    data_seed: Option<u64>,
    /// Comma-separated algorithms to compare.
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["em", "dsaem", "dqaem"])]
    algos: Vec<AlgoArg>,
    /// Success iff every matched mean satisfies |mu_hat - mu|^2 <= threshold * tr(Sigma).
    #[arg(long, default_value_t = dqaem::bench::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Worker threads (default: all cores). Does not change results.
    #[arg(long)]
    jobs: Option<usize>,
    /// Report JSON path.
    #[arg(short, long, default_value = "bench-report.json")]
    output: PathBuf,
    /// Per-iteration traces of trial 0, as CSV.
    #[arg(long, default_value = "bench-trace.csv")]
    trace_output: PathBuf,
}

#[derive(Debug, Args)]
struct TraceArgs {
    /// Dataset CSV; when absent a dataset is sampled from the preset.
    #[arg(short, long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Seed of the sampled dataset (ignored with --input).
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Seed of the shared random initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["em", "dsaem", "dqaem"])]
    algos: Vec<AlgoArg>,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Output CSV path.
    #[arg(short, long)]
    output: PathBuf,
}

fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("spec.json")
}

fn generate(args: GenerateArgs) -> anyhow::Result<()> {
    let spec = args.data.spec(args.seed)?;
    let data = sample_gmm(&spec)?;
    write_csv(&data, &args.output)?;
    let sidecar = sidecar_path(&args.output);
    write_result_json(
        &json!({
            "schema_version": dqaem::data_io::SCHEMA_VERSION,
            "prng": PRNG_NAME,
            "normal_sampler": dqaem::data_io::NORMAL_SAMPLER,
            "generator": spec,
        }),
        &sidecar,
    )?;
    println!(
        "wrote {} points in {} dimensions to {} (spec: {})",
        data.len(),
        data.dim(),
        args.output.display(),
        sidecar.display()
    );
    Ok(())
}

fn run_fit(args: FitArgs) -> anyhow::Result<()> {
    let data = read_csv(&args.input)?;
    let algorithm = Algorithm::from(args.algo);
    let config = args.schedule.config(algorithm, args.seed)?;
    let init = random_init(&data, args.k, args.seed)?;
    let result = fit(&data, &config, &init)?;
    let mut doc = FitDocument::new(&config, &result);
    doc.extra = json!({
        "input": args.input.display().to_string(),
        "k": args.k,
        "init_params": init,
    });
    write_result_json(&doc, &args.output)?;
    println!(
        "{algorithm}: final objective {:.6} after {} iterations (converged: {})",
        result.final_objective(),
        result.iterations_used,
        result.converged
    );
    Ok(())
}

fn algorithms(list: &[AlgoArg]) -> anyhow::Result<Vec<Algorithm>> {
    let mut out: Vec<Algorithm> = list.iter().map(|&a| a.into()).collect();
    out.sort();
    out.dedup();
    if out.is_empty() {
        bail!("no algorithms selected");
    }
    Ok(out)
}

fn bench(args: BenchArgs) -> anyhow::Result<()> {
    let algos = algorithms(&args.algos)?;
    let generator = args.data.spec(args.data_seed.unwrap_or(args.master_seed))?;
    let config = BenchConfig {
        k: generator.true_params.n_components(),
        generator,
        n_trials: args.trials,
        master_seed: args.master_seed,
        criterion: SuccessCriterion::new(args.threshold)?,
        fits: algos
            .iter()
            .map(|&a| args.schedule.config(a, args.master_seed))
            .collect::<anyhow::Result<_>>()?,
        jobs: args.jobs,
    };
    let report = run_benchmark(&config)?;
    write_result_json(&report, &args.output)?;

    let data = sample_gmm(&config.generator)?;
    let first = &report.trials[0];
    let traces = run_trial_fits(&data, &config.fits, &first.init_params)
        .into_iter()
        .map(|(_, r)| r)
        .collect::<Result<Vec<_>, _>>()?;
    emit_trace_table(&traces, &args.trace_output)?;

    print!("{}", report.render_tables());
    println!(
        "report: {}  traces (trial 0): {}",
        args.output.display(),
        args.trace_output.display()
    );
    Ok(())
}

fn trace(args: TraceArgs) -> anyhow::Result<()> {
    let (data, k) = match &args.input {
        Some(path) => (read_csv(path)?, args.data.k.unwrap_or(3)),
        None => {
            let spec = args.data.spec(args.data_seed)?;
            let k = spec.true_params.n_components();
            (sample_gmm(&spec)?, k)
        }
    };
    let init = random_init(&data, k, args.seed)?;
    let configs = algorithms(&args.algos)?
        .into_iter()
        .map(|a| args.schedule.config(a, args.seed))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let results = run_trial_fits(&data, &configs, &init)
        .into_iter()
        .map(|(a, r)| r.with_context(|| format!("{a} fit failed")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    emit_trace_table(&results, &args.output)?;
    for r in &results {
        println!(
            "{:<6} {:4} iterations  final objective {:.4}  log-likelihood {:.4}",
            r.algorithm.name(),
            r.iterations_used,
            r.final_objective(),
            r.final_log_likelihood()
        );
    }
    println!("traces: {}", args.output.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Fit(a) => run_fit(a),
        Command::Bench(a) => bench(a),
        Command::Trace(a) => trace(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
