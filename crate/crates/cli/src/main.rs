use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use comoe_core::adapters::checkpoint::{read_params, write_params};
use comoe_core::diagnostics::{
    run_diagnostics, write_divergence_csv, write_projection_csv, write_similarity_csv, write_workload_csv,
};
use comoe_core::migap::{self, BoundOptions, DiscreteJoint, EstimateMethod, GapScenario};
use comoe_core::trainer::{
    self, generate_dataset, median, sweep_lambda, write_metrics_csv, write_sweep_csv, ExperimentConfig,
    SyntheticTaskSpec, ToyModel, TrainError, DEFAULT_LAMBDAS,
};

const CONFIG_FILE: &str = "config.toml";
const METRICS_FILE: &str = "metrics.csv";
const PARAMS_FILE: &str = "params.txt";

#[derive(Parser)]
#[command(name = "comoe", version, about = "Mixture-of-LoRA-experts with a contrastive objective")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write config, metrics and parameters to --out.
    Train(TrainArgs),
    /// Train every (lambda, seed) pair and write one summary row per run.
    SweepLambda(SweepArgs),
    /// Check the InfoNCE estimate against the MI gap on scenario sets.
    ValidateBound(BoundArgs),
    /// Recompute workload and similarity diagnostics for a run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file, or one of the built-in configs `default` and `separable`.
    #[arg(long)]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    samples_per_task: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Auto,
    Mc,
    Exact,
}

#[derive(Args)]
struct BoundArgs {
    /// Comma-separated scenario sources: `builtin` or TOML files.
    #[arg(long, value_delimiter = ',', default_value = "builtin")]
    scenarios: Vec<String>,
    #[arg(long = "N", value_delimiter = ',', default_value = "1,4,16,64")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 20_000)]
    num_mc: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "auto")]
    method: Method,
    /// Allowed excess of the estimate over the gap, in standard errors.
    #[arg(long, default_value_t = 3.0)]
    sigmas: f64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `train`.
    run: PathBuf,
    /// Where to write the CSVs; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A command that ran but whose check failed.
#[derive(Debug)]
struct ValidationFailure(String);

impl std::fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationFailure {}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match args.config.as_str() {
        "default" => ExperimentConfig::default(),
        "separable" => ExperimentConfig {
            dataset: SyntheticTaskSpec::separable_two_task(),
            ..ExperimentConfig::default()
        },
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {path}"))?;
            toml::from_str(&text).with_context(|| format!("parsing config {path}"))?
        }
    };
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.lambda {
        cfg.train.lambda = v;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if args.max_steps.is_some() {
        cfg.train.max_steps = args.max_steps;
    }
    if let Some(v) = args.samples_per_task {
        cfg.dataset.samples_per_task = v;
    }
    cfg.train.validate()?;
    cfg.dataset.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn classify_train_error(e: TrainError) -> anyhow::Error {
    match e {
        TrainError::NonFinite { .. } => ValidationFailure(e.to_string()).into(),
        other => other.into(),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let data = generate_dataset(&cfg.dataset, cfg.data_seed)?;
    let state = trainer::train(&cfg.train, &data).map_err(classify_train_error)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(args.out.join(CONFIG_FILE), toml::to_string(&cfg)?)?;
    let mut metrics = create(&args.out.join(METRICS_FILE))?;
    write_metrics_csv(&mut metrics, &state.log)?;
    metrics.flush()?;
    let mut params = create(&args.out.join(PARAMS_FILE))?;
    write_params(&mut params, &state.model.named_arrays())?;
    params.flush()?;

    println!(
        "trained {} steps, test accuracy {:.4}; wrote {}",
        state.step,
        state.final_accuracy(),
        args.out.display()
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let lambdas = args.lambdas.unwrap_or_else(|| DEFAULT_LAMBDAS.to_vec());
    if args.seeds.is_empty() || lambdas.is_empty() {
        bail!("need at least one lambda and one seed");
    }
    let data = generate_dataset(&cfg.dataset, cfg.data_seed)?;
    let rows = sweep_lambda(&cfg.train, &data, &lambdas, &args.seeds).map_err(classify_train_error)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(args.out.join(CONFIG_FILE), toml::to_string(&cfg)?)?;
    let mut out = create(&args.out.join("sweep.csv"))?;
    write_sweep_csv(&mut out, &rows)?;
    out.flush()?;

    println!("lambda,median_accuracy,median_off_diag_mean,median_workload_jsd");
    for l in &lambdas {
        let pick = |f: fn(&trainer::SweepRow) -> f64| -> f64 {
            median(&rows.iter().filter(|r| r.lambda == *l).map(f).collect::<Vec<_>>())
        };
        println!(
            "{l},{:.4},{:.4},{:.4}",
            pick(|r| r.accuracy),
            pick(|r| r.off_diag_mean),
            pick(|r| r.workload_jsd)
        );
    }
    Ok(())
}

/// One scenario in a TOML file: `[[scenario]]` with `name`, `pos`, `neg`.
#[derive(Deserialize)]
struct ScenarioEntry {
    name: String,
    pos: Vec<Vec<f64>>,
    neg: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct ScenarioFile {
    scenario: Vec<ScenarioEntry>,
}

fn load_scenarios(sources: &[String], seed: u64) -> Result<Vec<GapScenario>> {
    let mut out = Vec::new();
    for src in sources {
        if src == "builtin" {
            out.extend(migap::builtin_scenarios(50, seed));
            continue;
        }
        let text = fs::read_to_string(src).with_context(|| format!("reading scenarios {src}"))?;
        let file: ScenarioFile = toml::from_str(&text).with_context(|| format!("parsing scenarios {src}"))?;
        for e in file.scenario {
            let s = GapScenario::new(&e.name, DiscreteJoint::new(e.pos)?, DiscreteJoint::new(e.neg)?)
                .with_context(|| format!("scenario {} in {src}", e.name))?;
            out.push(s);
        }
    }
    if out.is_empty() {
        bail!("no scenarios given");
    }
    Ok(out)
}

fn cmd_bound(args: BoundArgs) -> Result<()> {
    let scenarios = load_scenarios(&args.scenarios, args.seed)?;
    let options = BoundOptions {
        num_mc: args.num_mc,
        seed: args.seed,
        method: match args.method {
            Method::Auto => EstimateMethod::Auto,
            Method::Mc => EstimateMethod::MonteCarlo,
            Method::Exact => EstimateMethod::Exact,
        },
    };
    let rows = migap::bound_report(&scenarios, &args.n, &options)?;
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            migap::write_bound_csv(&mut w, &rows)?;
            w.flush()?;
        }
        None => migap::write_bound_csv(io::stdout().lock(), &rows)?,
    }

    let violations: Vec<_> = rows.iter().filter(|r| !r.holds(args.sigmas, 1e-9)).collect();
    for r in &violations {
        eprintln!(
            "violation: scenario {} ({}) N={}: estimate {} > gap {} + {}·{}",
            r.scenario_id, scenarios[r.scenario_id].name, r.n, r.estimate, r.delta_i, args.sigmas, r.stderr
        );
    }
    eprintln!("{} cells, {} violations", rows.len(), violations.len());
    if !violations.is_empty() {
        return Err(ValidationFailure(format!("bound violated in {} cells", violations.len())).into());
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let run = &args.run;
    if !run.is_dir() {
        bail!("{} is not a directory", run.display());
    }
    let config_path = run.join(CONFIG_FILE);
    if !config_path.is_file() {
        bail!("{} has no {CONFIG_FILE}; is it a run directory written by `train`?", run.display());
    }
    let cfg: ExperimentConfig = toml::from_str(&fs::read_to_string(&config_path)?)
        .with_context(|| format!("parsing {}", config_path.display()))?;
    let params_path = run.join(PARAMS_FILE);
    let file = File::open(&params_path).with_context(|| format!("opening {}", params_path.display()))?;
    let arrays = read_params(BufReader::new(file)).with_context(|| format!("reading {}", params_path.display()))?;

    let data = generate_dataset(&cfg.dataset, cfg.data_seed)?;
    let model = ToyModel::from_arrays(&cfg.train, data.input_dim(), data.num_classes(), &arrays)?;
    let diag = run_diagnostics(&model, &data.test, data.num_tasks())?;

    let out = args.out.as_deref().unwrap_or(run);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = create(&out.join("workload.csv"))?;
    write_workload_csv(&mut w, &diag)?;
    w.flush()?;
    let mut w = create(&out.join("similarity.csv"))?;
    write_similarity_csv(&mut w, &diag)?;
    w.flush()?;
    let mut w = create(&out.join("projection.csv"))?;
    write_projection_csv(&mut w, &diag)?;
    w.flush()?;
    let mut w = create(&out.join("divergence.csv"))?;
    write_divergence_csv(&mut w, &diag)?;
    w.flush()?;

    println!(
        "off_diag_mean {:.4}, workload_jsd {:.4}; wrote reports to {}",
        diag.off_diag_mean,
        diag.workload_jsd,
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::SweepLambda(a) => cmd_sweep(a),
        Command::ValidateBound(a) => cmd_bound(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<ValidationFailure>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
