//! `corrnoise`: optimize, evaluate and simulate correlated-noise mechanisms.

mod mechanism;
mod sweep;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use corrnoise::accountant::{PrivacyParams, DEFAULT_DELTA};
use corrnoise::blt::toeplitz_inverse_coefs;
use corrnoise::io::ParamsDocument;
use corrnoise::optimizer::{optimize_blt, OptimizerConfig};
use corrnoise::participation::toeplitz_sensitivity;
use corrnoise::sim::{run_training, ClientPopulation, PopulationConfig, TrainConfig};
use corrnoise::{presets, NoiseGenerator, Objective, ParticipationSchema, RoundLimit};
use serde::{Deserialize, Serialize};

use mechanism::MechanismSource;

#[derive(Parser)]
#[command(name = "corrnoise", version, about)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize BLT parameters for a participation schema.
    Optimize(OptimizeArgs),
    /// Evaluate one mechanism at one schema.
    Eval(EvalArgs),
    /// Evaluate mechanisms over a grid of schemas; writes CSV.
    Sweep(SweepArgs),
    /// Write a correlated noise stream to CSV.
    Noisegen(NoisegenArgs),
    /// zCDP and (epsilon, delta) guarantee of a BLT at a noise level.
    Account(AccountArgs),
    /// Run a federated training simulation.
    Simulate(SimulateArgs),
    /// Time pairing-based against recurrence-based inverse coefficients.
    BenchInverse(BenchArgs),
}

#[derive(Args, Clone)]
struct SchemaArgs {
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    min_sep: Option<usize>,
    /// Defaults to the worst case `ceil(rounds / min_sep)`.
    #[arg(long)]
    max_part: Option<usize>,
}

impl SchemaArgs {
    fn resolve(&self, fallback: Option<ParticipationSchema>) -> Result<ParticipationSchema> {
        let n = self.rounds.or(fallback.map(|s| s.rounds()));
        let b = self.min_sep.or(fallback.map(|s| s.min_sep()));
        let (Some(n), Some(b)) = (n, b) else {
            bail!("--rounds and --min-sep are required for this mechanism");
        };
        let k = self.max_part.or_else(|| {
            fallback
                .filter(|s| s.rounds() == n && s.min_sep() == b)
                .map(|s| s.max_part())
        });
        Ok(ParticipationSchema::clamped(n, b, k)?)
    }
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct MechanismArgs {
    /// Parameters file written by `optimize`.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Published parameters: minsep100, minsep400 or minsep1000.
    #[arg(long)]
    preset: Option<String>,
    /// Binary-tree aggregation with full decoding.
    #[arg(long)]
    tree: bool,
    /// Independent noise (`C = I`).
    #[arg(long)]
    identity: bool,
    /// Dense lower-triangular strategy (binary container or CSV).
    #[arg(long)]
    strategy_file: Option<PathBuf>,
}

impl MechanismArgs {
    fn source(&self) -> MechanismSource {
        if let Some(path) = &self.params {
            MechanismSource::Blt { path: path.clone() }
        } else if let Some(name) = &self.preset {
            MechanismSource::Preset { name: name.clone() }
        } else if self.tree {
            MechanismSource::Tree
        } else if self.identity {
            MechanismSource::Identity
        } else {
            MechanismSource::Strategy {
                path: self
                    .strategy_file
                    .clone()
                    .expect("one mechanism flag is required"),
            }
        }
    }
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct BltArgs {
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
}

impl BltArgs {
    fn load(&self) -> Result<(corrnoise::BltParams, Option<ParticipationSchema>)> {
        let source = match (&self.params, &self.preset) {
            (Some(path), _) => MechanismSource::Blt { path: path.clone() },
            (_, Some(name)) => MechanismSource::Preset { name: name.clone() },
            _ => unreachable!("clap enforces one of --params or --preset"),
        };
        let m = source.load()?;
        let schema = m.home_schema();
        Ok((m.blt().expect("BLT source").clone(), schema))
    }
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    rounds: usize,
    #[arg(long)]
    min_sep: usize,
    #[arg(long)]
    max_part: Option<usize>,
    #[arg(long, default_value_t = 2)]
    buffers: usize,
    #[arg(long, default_value_t = Objective::Max)]
    objective: Objective,
    #[arg(long, default_value_t = 8)]
    restarts: usize,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-7)]
    barrier: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    mechanism: MechanismArgs,
    #[command(flatten)]
    schema: SchemaArgs,
    #[arg(long, default_value_t = 1.0)]
    noise_multiplier: f64,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON sweep specification.
    #[arg(long)]
    spec: PathBuf,
    /// Overrides the spec's output path; stdout when neither is given.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NoisegenArgs {
    #[command(flatten)]
    blt: BltArgs,
    #[arg(long)]
    rounds: usize,
    #[arg(long, default_value_t = 1)]
    dim: usize,
    /// Standard deviation of the uncorrelated draws.
    #[arg(long)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AccountArgs {
    #[command(flatten)]
    blt: BltArgs,
    #[command(flatten)]
    schema: SchemaArgs,
    /// Noise standard deviation relative to the clip norm.
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory for metrics.csv, participation.csv and summary.json.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![16, 2000, 20000])]
    n: Vec<usize>,
    #[arg(long, default_value = "minsep400")]
    preset: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct SimulationConfig {
    population: PopulationConfig,
    train: TrainConfig,
}

#[derive(Serialize)]
struct EvalReport {
    mechanism: String,
    #[serde(flatten)]
    loss: corrnoise::MechanismLoss,
    noise_multiplier: f64,
}

#[derive(Serialize)]
struct AccountReport {
    rho: f64,
    epsilon: f64,
    sens: f64,
    delta: f64,
    sigma: f64,
    method: String,
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CORRNOISE_THREADS") {
        let threads: usize = v
            .parse()
            .with_context(|| format!("CORRNOISE_THREADS='{v}' is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn optimize(args: &OptimizeArgs) -> Result<ExitCode> {
    let schema = ParticipationSchema::clamped(args.rounds, args.min_sep, args.max_part)?;
    let config = OptimizerConfig {
        barrier_lambda: args.barrier,
        restarts: args.restarts,
        max_iters: args.max_iters,
        seed: args.seed,
        ..OptimizerConfig::new(schema, args.buffers, args.objective)
    };
    let result = optimize_blt(&config)?;
    ParamsDocument::from_result(&result, args.objective).write(&args.out)?;
    log::info!(
        "max_loss={} rms_loss={} iterations={}",
        result.mechanism.max_loss,
        result.mechanism.rms_loss,
        result.iterations
    );
    if result.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("warning: optimizer did not converge; parameters written anyway");
        Ok(ExitCode::from(2))
    }
}

fn eval(args: &EvalArgs) -> Result<()> {
    let source = args.mechanism.source();
    let mechanism = source.load()?;
    let schema = args.schema.resolve(mechanism.home_schema())?;
    let loss = mechanism.evaluate(&schema)?;
    print_json(&EvalReport {
        mechanism: source.label(),
        loss: loss.at_noise_multiplier(args.noise_multiplier),
        noise_multiplier: args.noise_multiplier,
    })
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.spec)
        .with_context(|| format!("reading {}", args.spec.display()))?;
    let spec: sweep::SweepSpec = serde_json::from_str(&text).context("parsing sweep spec")?;
    let rows = sweep::run(&spec)?;
    match args.out.as_ref().or(spec.output.as_ref()) {
        Some(path) => sweep::write_csv(&rows, create(path)?),
        None => sweep::write_csv(&rows, io::stdout().lock()),
    }
}

fn noisegen(args: &NoisegenArgs) -> Result<()> {
    let (params, _) = args.blt.load()?;
    let mut gen = NoiseGenerator::new(
        &params,
        args.dim,
        args.noise_std,
        args.seed,
        RoundLimit::Bounded(args.rounds),
    )?;
    let mut w = csv::Writer::from_writer(create(&args.out)?);
    let mut header = vec!["round".to_string()];
    header.extend((0..args.dim).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for t in 0..args.rounds {
        let row = gen.next_row()?;
        let mut record = vec![t.to_string()];
        record.extend(row.iter().map(f64::to_string));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

fn account(args: &AccountArgs) -> Result<()> {
    let (params, home) = args.blt.load()?;
    let schema = args.schema.resolve(home)?;
    let sens = toeplitz_sensitivity(&params.coefs(schema.rounds())?, &schema)?;
    let p = PrivacyParams::from_noise(sens, 1.0, args.sigma, args.delta)?;
    print_json(&AccountReport {
        rho: p.rho,
        epsilon: p.epsilon,
        sens,
        delta: p.delta,
        sigma: args.sigma,
        method: p.method,
    })
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let config: SimulationConfig =
        serde_json::from_str(&text).context("parsing simulation config")?;
    let mut population = ClientPopulation::synthetic(&config.population)?;
    let log = run_training(&config.train, &mut population)?;
    std::fs::create_dir_all(&args.out_dir)?;

    let mut w = csv::Writer::from_writer(create(&args.out_dir.join("metrics.csv"))?);
    w.write_record(["round", "eval_loss", "eval_acc", "rho_so_far"])?;
    for m in &log.metrics {
        w.write_record([
            m.round.to_string(),
            m.eval_loss.to_string(),
            m.eval_acc.to_string(),
            m.rho_so_far.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(&args.out_dir.join("participation.csv"))?);
    w.write_record(["round", "client_id"])?;
    for (round, client) in &log.participation {
        w.write_record([round.to_string(), client.to_string()])?;
    }
    w.flush()?;

    let summary = serde_json::json!({
        "final_eval_loss": log.final_eval_loss(),
        "final_model": log.final_model,
        "noise_std": log.noise_std,
        "configured_sens": log.configured_sens,
        "configured_privacy": log.configured_privacy,
        "realized_min_sep": log.realized_min_sep,
        "realized_max_part": log.realized_max_part,
        "realized_privacy": log.realized_privacy,
        "min_sep_audit": log.audit_min_sep(config.train.min_sep, config.train.rounds),
    });
    let mut f = create(&args.out_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn bench_inverse(args: &BenchArgs) -> Result<()> {
    let Some(preset) = presets::by_name(&args.preset) else {
        bail!("unknown preset '{}'", args.preset);
    };
    let params = preset.params();
    let mut w = csv::Writer::from_writer(io::stdout().lock());
    w.write_record([
        "n",
        "recurrence_seconds",
        "pairing_seconds",
        "speedup",
        "max_abs_diff",
    ])?;
    for &n in &args.n {
        let c = params.coefs(n)?;
        let start = Instant::now();
        let fast = params.inverse()?.params.coefs(n)?;
        let fast_time = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let slow = toeplitz_inverse_coefs(&c)?;
        let slow_time = start.elapsed().as_secs_f64();
        let diff = fast
            .as_slice()
            .iter()
            .zip(slow.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        w.write_record([
            n.to_string(),
            slow_time.to_string(),
            fast_time.to_string(),
            (slow_time / fast_time.max(1e-12)).to_string(),
            diff.to_string(),
        ])?;
        w.flush()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    init_threads()?;
    match &cli.command {
        Command::Optimize(a) => return optimize(a),
        Command::Eval(a) => eval(a)?,
        Command::Sweep(a) => sweep(a)?,
        Command::Noisegen(a) => noisegen(a)?,
        Command::Account(a) => account(a)?,
        Command::Simulate(a) => simulate(a)?,
        Command::BenchInverse(a) => bench_inverse(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
