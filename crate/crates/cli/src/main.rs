use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use measure_attn::experiment::{
    attention_mass_stats, fit_curves, gen_dataset, load_attention_stats, load_risk_rows,
    risk_curves, sweep, train_cell, validation_set, SweepOptions, ATTENTION_STATS_FILE,
    CONFIG_FILE, RISK_CURVE_FILE,
};
use measure_attn::optim::{evaluate, write_loss_trace};
use measure_attn::verify::{run_suite, Faults, Suite, SuiteReport};
use measure_attn::{DiscreteMeasure, Error, ExperimentConfig};
use serde::Serialize;
use serde_json::{json, Value};

mod config;

use config::resolve;

#[derive(Parser)]
#[command(
    name = "measure-attn",
    version,
    about = "Measure-valued attention: property checks and scaling sweeps"
)]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Start from the reduced profile (1000 tokens, 500 validation examples).
    #[arg(long, global = true)]
    reduced: bool,
    /// Root seed for every random stream.
    #[arg(long, global = true, env = "MEASURE_ATTN_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the property suites and print a pass/fail table.
    Verify(VerifyArgs),
    /// Generate examples for one alpha as JSON.
    Gen(GenArgs),
    /// Train and evaluate a single (alpha, n, seed) cell.
    Train(TrainArgs),
    /// Run the full alpha x n x seed grid and write the result bundle.
    Sweep(SweepArgs),
    /// Refit and tabulate a result bundle.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Fault {
    /// Perturb the first sine mode.
    CorruptBasis,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suite to run (repeatable); all suites when omitted.
    #[arg(long = "suite", value_name = "NAME")]
    suites: Vec<Suite>,
    /// Inject a known defect to exercise the failure path.
    #[arg(long, value_enum)]
    inject_fault: Option<Fault>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    alpha: Option<f64>,
    /// Number of examples.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Context tokens per example.
    #[arg(long)]
    n_tokens: Option<usize>,
    /// Output file; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    alpha: Option<f64>,
    /// Training set size.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Replicate seed of the cell.
    #[arg(long, default_value_t = 0)]
    replicate: u64,
    #[arg(long, value_name = "DIR", default_value = "train_out")]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated alphas.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    /// Comma-separated training-set sizes.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    /// Comma-separated replicate seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Parallel cells; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long, value_name = "DIR", default_value = "results")]
    out: PathBuf,
    /// Store each trained model with its cell record.
    #[arg(long)]
    save_models: bool,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Directory written by `sweep`.
    #[arg(value_name = "DIR")]
    dir: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

/// `2` for usage and IO problems, `1` for everything that ran and failed.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Json(_) | Error::Csv(_) | Error::InvalidArgument(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure {
            code: 2,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<ExitCode, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Gen(a) => cmd_gen(&cli, a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Sweep(a) => cmd_sweep(&cli, a),
        Command::Analyze(a) => cmd_analyze(a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn apply_train_flags(cfg: &mut ExperimentConfig, t: &TrainFlags) {
    if let Some(v) = t.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = t.lr0 {
        cfg.train.lr0 = v;
    }
    if let Some(v) = t.decay {
        cfg.train.decay_per_epoch = v;
    }
    if let Some(v) = t.batch_size {
        cfg.train.batch_size = Some(v);
    }
    if let Some(v) = t.noise_std {
        cfg.train.noise_std = v;
    }
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(cfg).map_err(Error::from)?;
    fs::write(dir.join(CONFIG_FILE), text + "\n")?;
    Ok(())
}

fn print_json(v: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(v).map_err(Error::from)?;
    println!("{text}");
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> CmdResult {
    let faults = Faults {
        corrupt_basis: matches!(args.inject_fault, Some(Fault::CorruptBasis)),
    };
    let suites = if args.suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        args.suites.clone()
    };
    let reports: Vec<SuiteReport> = suites
        .into_iter()
        .map(|s| run_suite(s, faults))
        .collect::<Result<_, _>>()?;
    let ok = reports.iter().all(SuiteReport::passed);
    match args.format {
        Format::Json => print_json(&json!({ "passed": ok, "suites": reports }))?,
        Format::Text => {
            println!(
                "{:<16} {:<6} {:>7} {:>10}",
                "suite", "status", "checks", "time"
            );
            for r in &reports {
                let status = if r.passed() { "pass" } else { "FAIL" };
                println!(
                    "{:<16} {:<6} {:>7} {:>10.2?}",
                    r.suite.name(),
                    status,
                    r.checks.len(),
                    r.elapsed
                );
                for c in r.failures() {
                    println!("  FAIL {}: {}", c.name, c.detail);
                }
            }
        }
    }
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

#[derive(Serialize)]
struct GenRecord<'a> {
    context: DiscreteMeasure,
    n_tokens: usize,
    query: &'a [f64],
    target: f64,
    hidden: &'a measure_attn::experiment::Hidden,
}

fn cmd_gen(cli: &Cli, args: &GenArgs) -> CmdResult {
    let mut cfg = resolve(cli.config.as_deref(), cli.reduced, cli.seed)?;
    if let Some(n) = args.n_tokens {
        cfg.n_tokens = n;
    }
    let alpha = args.alpha.unwrap_or(cfg.alpha_list[0]);
    cfg.alpha_list = vec![alpha];
    cfg.validate()?;
    let spectrum = cfg.spectrum(alpha)?;
    let data = gen_dataset(&spectrum, &cfg, args.count, cfg.seed)?;
    let records = data
        .iter()
        .map(|ex| {
            let c = &ex.context;
            let total = c.total();
            let context = DiscreteMeasure::new(
                (0..c.len()).map(|i| c.token(i).to_vec()).collect(),
                c.counts().iter().map(|k| k / total).collect(),
            )?;
            Ok(GenRecord {
                context,
                n_tokens: ex.n_tokens(),
                query: &ex.query,
                target: ex.target,
                hidden: &ex.hidden,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let text = serde_json::to_string(&records).map_err(Error::from)? + "\n";
    match &args.out {
        Some(path) => {
            let dir = path
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            write_config(dir, &cfg)?;
            fs::write(path, text)?;
        }
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> CmdResult {
    let mut cfg = resolve(cli.config.as_deref(), cli.reduced, cli.seed)?;
    apply_train_flags(&mut cfg, &args.train);
    let alpha = args.alpha.unwrap_or(cfg.alpha_list[0]);
    cfg.alpha_list = vec![alpha];
    cfg.n_list = vec![args.n];
    cfg.seeds = vec![args.replicate];
    cfg.validate()?;
    write_config(&args.out, &cfg)?;

    let (model, trace) = train_cell(alpha, args.n, args.replicate, &cfg)?;
    model.save(&args.out.join("model.json"))?;
    let loss = fs::File::create(args.out.join("loss_trace.csv"))?;
    write_loss_trace(&trace, io::BufWriter::new(loss))?;

    let val = validation_set(alpha, args.replicate, &cfg)?;
    let val_mse = evaluate(&model, &val)?;
    let stats = attention_mass_stats(&model, &val[..cfg.n_stats.min(val.len())])?;
    println!(
        "alpha={alpha} n={} seed={} val_mse={val_mse:.6e}",
        args.n, args.replicate
    );
    println!("{:>4} {:>10} {:>10}", "head", "m_same", "m_diff");
    for (h, s) in stats.iter().enumerate() {
        println!("{h:>4} {:>10.4} {:>10.4}", s.m_same.mean(), s.m_diff.mean());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> CmdResult {
    let mut cfg = resolve(cli.config.as_deref(), cli.reduced, cli.seed)?;
    apply_train_flags(&mut cfg, &args.train);
    if let Some(v) = &args.alpha {
        cfg.alpha_list = v.clone();
    }
    if let Some(v) = &args.n {
        cfg.n_list = v.clone();
    }
    if let Some(v) = &args.seeds {
        cfg.seeds = v.clone();
    }
    let opts = SweepOptions {
        jobs: args.jobs,
        save_models: args.save_models,
        ..SweepOptions::new(&args.out)
    };
    let bundle = sweep(&cfg, &opts)?;
    println!(
        "{} cells ({} reused), {} failed -> {}",
        bundle.cells.len(),
        bundle.resumed,
        bundle.failed.len(),
        args.out.display()
    );
    for f in &bundle.failed {
        eprintln!(
            "cell alpha={} n={} seed={} failed: {}",
            f.alpha, f.n, f.seed, f.error
        );
    }
    for (alpha, fit) in &bundle.fits {
        println!(
            "alpha={alpha} A={:.4} C={:.4} residual_rms={:.3e}",
            fit.a, fit.c, fit.residual_rms
        );
    }
    Ok(if bundle.is_complete() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_analyze(args: &AnalyzeArgs) -> CmdResult {
    let rows = load_risk_rows(&args.dir.join(RISK_CURVE_FILE))?;
    let attention = load_attention_stats(&args.dir.join(ATTENTION_STATS_FILE))?;
    let curves = risk_curves(&rows);
    let fits = fit_curves(&curves);
    match args.format {
        Format::Json => {
            let curves: Value = serde_json::to_value(&curves).map_err(Error::from)?;
            print_json(&json!({ "fits": fits, "curves": curves, "attention": attention }))?;
        }
        Format::Text => {
            println!(
                "{:>6} {:>10} {:>10} {:>12}  n",
                "alpha", "A", "C", "residual"
            );
            for (alpha, f) in &fits {
                println!(
                    "{alpha:>6} {:>10.4} {:>10.4} {:>12.3e}  {:?}",
                    f.a, f.c, f.residual_rms, f.n_list
                );
            }
            println!();
            println!(
                "{:>6} {:>4} {:>4} {:>11} {:>11} {:>11} {:>11} {:>9} {:>9}",
                "alpha",
                "n",
                "head",
                "w_same",
                "w_diff",
                "std_same",
                "std_diff",
                "m_same",
                "m_diff"
            );
            for r in &attention {
                println!(
                    "{:>6} {:>4} {:>4} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.3e} {:>9.4} {:>9.4}",
                    format!("{:?}", r.alpha),
                    r.n,
                    r.head,
                    r.w_same_mean,
                    r.w_diff_mean,
                    r.w_same_std,
                    r.w_diff_std,
                    r.m_same_mean,
                    r.m_diff_mean
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
