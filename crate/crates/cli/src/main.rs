use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sltraj::anomaly::Multiplicity;
use sltraj_cli::config::{BackendKind, RunConfig};
use sltraj_cli::pipeline::{execute, exit_code, Target};

#[derive(Parser)]
#[command(name = "sltraj", version, about = "Sparse trajectory FPCA, segmentation and anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Score text-only records and write them back as JSONL.
    Embed,
    /// Global uFPCA + mFPCA.
    Fit,
    /// Trimmed k-means on scores and covariates.
    Cluster,
    /// Per-cluster split-sample anomaly detection.
    Detect,
    /// Window-level localisation and p-value tables.
    Windows,
    /// Intent profiling of anomalous records.
    Profile,
    /// Subsampling robustness study.
    Simulate,
    /// Cluster label, covariates and mFPC scores per subject.
    ExportFeatures,
    /// Mode-of-variation plot bundles.
    PlotData,
    /// Every stage.
    Run,
}

impl From<Command> for Target {
    fn from(c: Command) -> Self {
        match c {
            Command::Embed => Target::Embed,
            Command::Fit => Target::Fit,
            Command::Cluster => Target::Cluster,
            Command::Detect => Target::Detect,
            Command::Windows => Target::Windows,
            Command::Profile => Target::Profile,
            Command::Simulate => Target::Simulate,
            Command::ExportFeatures => Target::ExportFeatures,
            Command::PlotData => Target::PlotData,
            Command::Run => Target::Run,
        }
    }
}

#[derive(Args)]
struct Overrides {
    /// TOML or JSON run configuration.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    records: Option<PathBuf>,
    #[arg(long, global = true)]
    covariates: Option<PathBuf>,
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    grid_size: Option<usize>,
    /// Fixed number of clusters.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    trim: Option<f64>,
    #[arg(long, global = true)]
    alpha1: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    window_alpha: Option<f64>,
    #[arg(long, global = true)]
    windows: Option<usize>,
    /// bonferroni or bh
    #[arg(long, global = true)]
    multiplicity: Option<Multiplicity>,
    /// offline or live
    #[arg(long, global = true, value_parser = parse_backend)]
    backend: Option<BackendKind>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Also render plot bundles as SVG.
    #[arg(long, global = true)]
    svg: bool,
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    match s {
        "offline" => Ok(BackendKind::Offline),
        "live" => Ok(BackendKind::Live),
        _ => Err(format!("unknown backend '{s}'")),
    }
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        if self.records.is_some() {
            cfg.input.records = self.records.clone();
        }
        if self.covariates.is_some() {
            cfg.input.covariates = self.covariates.clone();
        }
        if self.cache_dir.is_some() {
            cfg.embed.cache_dir = self.cache_dir.clone();
        }
        if self.k.is_some() {
            cfg.segment.k = self.k;
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        set!(self.output_dir, cfg.output_dir);
        set!(self.seed, cfg.seed);
        set!(self.grid_size, cfg.fpca.grid_size);
        set!(self.trim, cfg.segment.trim);
        set!(self.alpha1, cfg.detect.alpha1);
        set!(self.alpha, cfg.detect.alpha);
        set!(self.window_alpha, cfg.detect.window_alpha);
        set!(self.multiplicity, cfg.detect.multiplicity);
        set!(self.backend, cfg.embed.backend);
        set!(self.replicates, cfg.sim.replicates);
        if let Some(w) = self.windows {
            cfg.detect.windows = w;
            cfg.detect.window_bounds = None;
        }
        if self.svg {
            cfg.plot.svg = true;
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match &cli.overrides.config {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    };
    let result = cfg.map_err(anyhow::Error::from).and_then(|mut cfg| {
        cli.overrides.apply(&mut cfg);
        cfg.validate()?;
        if let Some(n) = cfg.threads {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        }
        execute(&cfg, cli.command.into())
    });
    match result {
        Ok(m) => {
            log::info!("wrote {} file(s) to {}", m.outputs.len(), m.config.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
