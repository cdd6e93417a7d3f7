use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use ntklab::activation::ActivationKind;
use ntklab::data_io::{query_records, write_records_csv, RecordFilter};
use ntklab::lab::{
    parse_usize_list, run_sweep, DataSource, Experiment, Grid, LabError, SweepConfig, DATA_DIR_ENV,
};
use std::path::PathBuf;
use std::process::ExitCode;

/// Sweeps over initialization hyperparameters, depth and width that compare
/// finite networks with their infinite-width kernels.
#[derive(Parser)]
#[command(name = "ntklab", version)]
struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// χ₁ at the variance fixed point and phase labels over (σ_w², σ_b²).
    PhaseDiagram(SweepArgs),
    /// E[Θ(x,x)²]/E[Θ(x,x)]² over (σ_w², σ_b², L, M).
    InitVariance(SweepArgs),
    /// The same ratio along L/M for a few (σ_w², σ_b²) pairs.
    LmCurves(SweepArgs),
    /// Relative kernel change ‖Θᵗ−Θ⁰‖_F/‖Θ⁰‖_F and loss under gradient descent.
    TrainDrift(SweepArgs),
    /// κ₁, κ₂ and κ₁/κ₂ against depth for several input covariances.
    KappaCurves(SweepArgs),
    /// Predicted output variance after training against Monte-Carlo estimates.
    PredictVariance(SweepArgs),
    /// Prints stored run records matching the filters as CSV.
    Query(QueryArgs),
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// TOML config; missing keys keep the defaults listed below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    activation: Option<ActivationKind>,
    /// `a,b,c` or `start:stop:step`.
    #[arg(long, value_name = "GRID")]
    sigma_w_sq: Option<Grid>,
    /// `a,b,c` or `start:stop:step`.
    #[arg(long, value_name = "GRID")]
    sigma_b_sq: Option<Grid>,
    /// `(σ_w², σ_b²)` pairs as `w:b,w:b`; replaces the two grids.
    #[arg(long, value_name = "PAIRS", value_parser = parse_pairs)]
    hypers: Option<Pairs>,
    /// `a,b,c` or `start:stop[:step]`.
    #[arg(long, value_name = "LIST", value_parser = parse_list)]
    depths: Option<List>,
    #[arg(long, value_name = "LIST", value_parser = parse_list)]
    widths: Option<List>,
    #[arg(long, value_name = "LIST", value_parser = parse_list)]
    samples: Option<List>,
    #[arg(long, value_name = "GRID")]
    covariances: Option<Grid>,
    #[arg(long)]
    n_seeds: Option<usize>,
    #[arg(long)]
    input_dim: Option<usize>,
    /// Maximum gradient-descent steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    end_to_end_seeds: Option<usize>,
    /// `synthetic` or `mnist`.
    #[arg(long, value_parser = parse_source)]
    data: Option<DataSource>,
    /// MNIST directory; falls back to the config, then to $NTKLAB_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug)]
struct QueryArgs {
    /// Record store written by a sweep.
    #[arg(long, default_value = "results/records.jsonl")]
    store: PathBuf,
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    sigma_w_sq: Option<f64>,
    #[arg(long)]
    sigma_b_sq: Option<f64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Debug)]
struct List(Vec<usize>);

#[derive(Clone, Debug)]
struct Pairs(Vec<(f64, f64)>);

fn parse_list(s: &str) -> Result<List, String> {
    parse_usize_list(s).map(List)
}

fn parse_pairs(s: &str) -> Result<Pairs, String> {
    s.split(',')
        .map(|p| {
            let (w, b) = p.split_once(':').ok_or_else(|| format!("expected w:b, got '{p}'"))?;
            let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("bad number '{t}': {e}"));
            Ok((num(w)?, num(b)?))
        })
        .collect::<Result<_, _>>()
        .map(Pairs)
}

fn parse_source(s: &str) -> Result<DataSource, String> {
    match s {
        "synthetic" => Ok(DataSource::Synthetic),
        "mnist" => Ok(DataSource::Mnist),
        _ => Err(format!("unknown data source '{s}' (expected synthetic or mnist)")),
    }
}

fn load_config(exp: Experiment, args: &SweepArgs) -> Result<SweepConfig, LabError> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut cfg = SweepConfig::from_toml_str(&text, Some(exp))?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.activation {
        cfg.activation = v;
    }
    if let Some(v) = &args.sigma_w_sq {
        cfg.sigma_w_sq = v.clone();
        cfg.hypers.clear();
    }
    if let Some(v) = &args.sigma_b_sq {
        cfg.sigma_b_sq = v.clone();
        cfg.hypers.clear();
    }
    if let Some(v) = &args.hypers {
        cfg.hypers = v.0.clone();
    }
    if let Some(v) = &args.depths {
        cfg.depths = v.0.clone();
    }
    if let Some(v) = &args.widths {
        cfg.widths = v.0.clone();
    }
    if let Some(v) = &args.samples {
        cfg.samples = v.0.clone();
    }
    if let Some(v) = &args.covariances {
        cfg.covariances = v.values()?;
    }
    if let Some(v) = args.n_seeds {
        cfg.n_seeds = v;
    }
    if let Some(v) = args.input_dim {
        cfg.input_dim = v;
    }
    if let Some(v) = args.steps {
        cfg.train.max_steps = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.mc_samples {
        cfg.mc_samples = v;
    }
    if let Some(v) = args.end_to_end_seeds {
        cfg.end_to_end_seeds = v;
    }
    if let Some(v) = args.data {
        cfg.data.source = v;
    }
    if let Some(v) = &args.data_dir {
        cfg.data.dir = Some(v.clone());
    } else if cfg.data.dir.is_none() {
        cfg.data.dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sweep(exp: Experiment, args: &SweepArgs) -> Result<(), LabError> {
    let cfg = load_config(exp, args)?;
    if args.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    eprintln!("{exp}: {} cells, {} jobs", cfg.cells()?.len(), cfg.job_count()?);
    let out = run_sweep(&cfg, &args.out_dir)?;
    println!("{}", out.csv_path.display());
    println!("{}", out.records_path.display());
    Ok(())
}

fn query(args: &QueryArgs) -> Result<(), LabError> {
    let filter = RecordFilter {
        kind: args.kind.clone(),
        activation: args.activation.clone(),
        sigma_w_sq: args.sigma_w_sq,
        sigma_b_sq: args.sigma_b_sq,
        depth: args.depth,
        width: args.width,
        seed: args.seed,
    };
    let result = query_records(&args.store, &filter)?;
    if result.malformed > 0 {
        eprintln!("skipped {} malformed records", result.malformed);
    }
    write_records_csv(std::io::stdout().lock(), &result.records)?;
    Ok(())
}

fn command() -> clap::Command {
    Experiment::ALL.iter().fold(Cli::command(), |cmd, &exp| {
        let defaults = SweepConfig::defaults(exp).to_toml();
        cmd.mut_subcommand(exp.name(), |sub| sub.after_help(format!("Defaults:\n\n{defaults}")))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match command()
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::PhaseDiagram(a) => sweep(Experiment::PhaseDiagram, a),
        Command::InitVariance(a) => sweep(Experiment::InitVariance, a),
        Command::LmCurves(a) => sweep(Experiment::LmCurves, a),
        Command::TrainDrift(a) => sweep(Experiment::TrainDrift, a),
        Command::KappaCurves(a) => sweep(Experiment::KappaCurves, a),
        Command::PredictVariance(a) => sweep(Experiment::PredictVariance, a),
        Command::Query(a) => query(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
