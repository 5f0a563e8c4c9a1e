use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use lpr_core::harness::OUT_DIR_ENV;
use lpr_core::{
    run, sweep, verify, Capacity, Fault, Method, RunConfig, StreamKind, SweepGrid, VerifyOptions,
};

#[derive(Parser)]
#[command(name = "lpr", version, about = "Layerwise proximal replay experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on one stream and report its metrics.
    Run(RunArgs),
    /// Run a grid of configurations over several seeds.
    Sweep(SweepArgs),
    /// Run the built-in correctness checks.
    Verify(VerifyArgs),
}

/// Overrides for `RunConfig` fields. Unset flags keep the file or default value.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long, value_parser = parse_kind)]
    stream_kind: Option<StreamKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_parser = parse_capacity)]
    capacity: Option<Capacity>,
    #[arg(long)]
    omega0: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    refresh_interval: Option<usize>,
    #[arg(long)]
    subsample: Option<f64>,
    #[arg(long)]
    alpha_proj: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    replay_size: Option<usize>,
    #[arg(long)]
    drift_probes: Option<usize>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    num_tasks: Option<usize>,
    #[arg(long)]
    classes_per_task: Option<usize>,
    #[arg(long)]
    input_dim: Option<usize>,
    #[arg(long)]
    batches_per_task: Option<usize>,
    #[arg(long)]
    cluster_separation: Option<f64>,
    #[arg(long)]
    cluster_std: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON file with `RunConfig` fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (defaults to $LPR_OUT_DIR when set).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON file with a `base` config and grid axes.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds, comma separated. Replaces the file's seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Values of omega0 to sweep, comma separated.
    #[arg(long = "omega0-grid", value_delimiter = ',')]
    omega0_grid: Option<Vec<f64>>,
    /// Methods to sweep, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    methods: Option<Vec<Method>>,
    /// Worker threads (all cores by default).
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true, value_parser = parse_fault)]
    inject_fault: Option<Fault>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: lpr_core::Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<StreamKind, String> {
    match s {
        "class_incremental" => Ok(StreamKind::ClassIncremental),
        "domain_incremental" => Ok(StreamKind::DomainIncremental),
        other => Err(format!("unknown stream kind {other:?}")),
    }
}

fn parse_capacity(s: &str) -> Result<Capacity, String> {
    s.parse().map_err(|e: lpr_core::Error| e.to_string())
}

fn parse_fault(s: &str) -> Result<Fault, String> {
    s.parse().map_err(|e: lpr_core::Error| e.to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        set!(method, stream_kind, seed, eta, steps, alpha, capacity, omega0, beta);
        set!(refresh_interval, subsample, alpha_proj, eval_every, replay_size, drift_probes, hidden);
        let s = &mut cfg.stream;
        if let Some(v) = self.num_tasks {
            s.num_tasks = v;
        }
        if let Some(v) = self.classes_per_task {
            s.classes_per_task = v;
        }
        if let Some(v) = self.input_dim {
            s.input_dim = v;
        }
        if let Some(v) = self.batches_per_task {
            s.batches_per_task = v;
        }
        if let Some(v) = self.cluster_separation {
            s.cluster_separation = v;
        }
        if let Some(v) = self.cluster_std {
            s.cluster_std = v;
        }
    }
}

fn output_dir(flag: Option<PathBuf>, from_file: Option<PathBuf>) -> Option<PathBuf> {
    flag.or(from_file)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut cfg: RunConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    args.overrides.apply(&mut cfg);
    cfg.output = output_dir(args.out, cfg.output.take());
    let outcome = run(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
    if let Some(dir) = &cfg.output {
        eprintln!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut grid: SweepGrid = match &args.config {
        Some(p) => read_json(p)?,
        None => SweepGrid::default(),
    };
    args.overrides.apply(&mut grid.base);
    if let Some(seeds) = args.seeds {
        grid.seeds = seeds;
    }
    if let Some(w) = args.omega0_grid {
        grid.omega0 = w;
    }
    if let Some(m) = args.methods {
        grid.methods = m;
    }
    grid.base.output = output_dir(args.out, grid.base.output.take());
    let result = sweep(&grid, args.jobs)?;
    for a in &result.aggregates {
        println!(
            "cell {:>3} {:<13} omega0 {:<6} beta {} T {} p {}  acc {:.4} ± {:.4}  aaa {:.4} ± {:.4}  wc {:.4} ± {:.4}  runs {} failed {}",
            a.cell, a.method.as_str(), a.omega0, a.beta, a.refresh_interval, a.subsample,
            a.acc_mean, a.acc_se, a.aaa_mean, a.aaa_se, a.wc_acc_mean, a.wc_acc_se, a.runs, a.failed
        );
    }
    for r in &result.runs {
        if let Err(e) = &r.outcome {
            eprintln!("cell {} seed {} failed: {e}", r.cell, r.seed);
        }
    }
    if let Some(dir) = &grid.base.output {
        eprintln!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> ExitCode {
    let report = verify(&VerifyOptions {
        seed: args.seed,
        fault: args.inject_fault,
    });
    println!("{report}");
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        for f in report.failures() {
            eprintln!("failed: {}", f.name);
        }
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => return cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
