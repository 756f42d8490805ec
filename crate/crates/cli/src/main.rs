use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mfdiff_cli::eval::{cmd_eval, horizon_rows, EvalOptions};
use mfdiff_cli::plot::{render_svg, series, Axes};
use mfdiff_cli::{collect, plan, train, verify, RunConfig};
use mfdiff_core::eval::{format_metrics, parse_metrics, BOOTSTRAP_REPLICATES};

#[derive(Parser)]
#[command(name = "mfdiff", version, about = "Mean-field trajectory diffusion planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitKind {
    Horizon,
}

#[derive(Subcommand)]
enum Command {
    /// Train the behaviour policy and write the dataset splits.
    Collect {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Fit the score and value models.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Execute episodes with the planner.
    Plan {
        #[arg(short, long)]
        config: PathBuf,
        /// Use the model as initialised, before training.
        #[arg(long)]
        untrained: bool,
    },
    /// Compute the configured metrics.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        /// Run only the analytic-oracle sampler suite.
        #[arg(long)]
        oracle: bool,
        #[arg(long, value_enum, requires = "input")]
        fit: Option<FitKind>,
        /// Gap CSV (`env,h,seed,gap`) for `--fit horizon`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Also render the metrics as SVG.
        #[arg(long)]
        svg: bool,
    },
    /// Run the property suites and re-check dataset checksums.
    Verify {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Fit horizon exponents from a gap CSV.
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "25,50,100")]
        window: Vec<f64>,
        #[arg(long, default_value_t = BOOTSTRAP_REPLICATES)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Metrics CSV to write; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a metrics CSV as an SVG line chart over N.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metric names to include; all when omitted.
        #[arg(long)]
        metric: Vec<String>,
        #[arg(long)]
        log_x: bool,
        #[arg(long)]
        log_y: bool,
    },
}

fn load(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global().context("building the worker pool")?;
    }
    Ok(cfg)
}

fn plot(input: &Path, out: &Path, metrics: &[String], axes: Axes) -> Result<()> {
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let rows = parse_metrics(&text)?;
    let title = input.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    std::fs::write(out, render_svg(&series(&rows, metrics), axes, title)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Collect { config } => {
            let out = collect::cmd_collect(&load(&config)?)?;
            let m = &out.manifest;
            println!("wrote {} splits to {}", m.files.len(), out.dir.display());
            println!("J_expert {:.6}  J_random {:.6}", m.j_expert, m.j_random);
        }
        Command::Train { config, resume } => {
            let cfg = load(&config)?;
            let out = train::cmd_train(&cfg, resume)?;
            println!("trained to epoch {}; checkpoint {}", out.bundle.epoch, cfg.checkpoint_path().display());
            if let Some(rho) = out.value_rho {
                println!("value Spearman rho on held-out episodes: {rho:.4}");
            }
        }
        Command::Plan { config, untrained } => {
            let s = plan::cmd_plan(&load(&config)?, untrained)?;
            println!("{} episodes: welfare {:.6}, normalized {:.2}", s.rows.len(), s.mean_welfare, s.mean_normalized);
        }
        Command::Eval { config, oracle, fit, input, svg } => {
            let cfg = load(&config)?;
            let opts = EvalOptions { oracle, fit_horizon: fit.and(input) };
            let rows = cmd_eval(&cfg, &opts)?;
            print!("{}", format_metrics(&rows)?);
            if svg {
                let dir = cfg.out_dir.join("eval");
                plot(&dir.join(mfdiff_cli::eval::METRICS_FILE), &dir.join("metrics.svg"), &[], Axes::default())?;
            }
            if oracle && rows.iter().any(|r| r.name == "oracle_pass" && r.value != 1.0) {
                return Ok(false);
            }
        }
        Command::Verify { config } => {
            let report = verify::cmd_verify(&load(&config)?);
            println!("{report}");
            return Ok(report.passed());
        }
        Command::Fit { input, window, replicates, seed, out } => {
            if window.len() < 2 {
                bail!("the fit window needs at least two horizons");
            }
            let csv = format_metrics(&horizon_rows(&input, &window, replicates, seed)?)?;
            match out {
                Some(p) => std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::Plot { input, out, metric, log_x, log_y } => plot(&input, &out, &metric, Axes { log_x, log_y })?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
