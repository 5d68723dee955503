use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kfacsim::harness::{
    compare_optimizers, parse_frac, run_experiment, sweep_csv, sweep_frac, ExperimentConfig, OptimizerKind,
};
use kfacsim::kfac::Precision;
use kfacsim::{selftest, Error, Result};

#[derive(Parser)]
#[command(name = "kfacsim", version, about = "Simulated hybrid-parallel K-FAC training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write per-step metrics.
    Train(CommonArgs),
    /// Run the same configuration at several gradient-worker fractions.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated fractions, e.g. `1/8,1/4,1/2,1`.
        #[arg(long, default_value = "1/8,1/4,1/2,1")]
        fracs: String,
    },
    /// Compare a baseline run against the configured run.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Baseline config; defaults to the same config with momentum SGD.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Run the built-in oracle and invariant checks.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Full,
    Half,
}

#[derive(Args)]
struct CommonArgs {
    /// Config file; flags given here override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    world_size: Option<usize>,
    /// Fraction of workers that hold each layer's eigen decomposition, e.g. `1/4`.
    #[arg(long)]
    grad_worker_frac: Option<String>,
    /// Iterations between eigen decompositions.
    #[arg(long)]
    kfac_update_freq: Option<usize>,
    /// Iterations between factor updates.
    #[arg(long)]
    factor_update_freq: Option<usize>,
    #[arg(long)]
    damping: Option<f64>,
    /// Storage and communication precision of factors and eigen data.
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Communicate only the upper triangle of symmetric factors.
    #[arg(long)]
    triangular_comm: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; directories are created as needed.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => {
                if self.seed.is_none() {
                    return Err(Error::Config {
                        field: "seed".into(),
                        message: "pass --seed or a --config file that sets it".into(),
                    });
                }
                ExperimentConfig::default()
            }
        };
        self.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(v) = self.world_size {
            cfg.dist.world_size = v;
        }
        if let Some(v) = &self.grad_worker_frac {
            cfg.dist.grad_worker_frac = parse_frac(v)?;
        }
        if let Some(v) = self.kfac_update_freq {
            cfg.kfac.eigen_update_freq = v;
        }
        if let Some(v) = self.factor_update_freq {
            cfg.kfac.factor_update_freq = v;
        }
        if let Some(v) = self.damping {
            cfg.kfac.damping = v;
        }
        if let Some(p) = self.precision {
            cfg.kfac.precision = match p {
                PrecisionArg::Full => Precision::Full,
                PrecisionArg::Half => Precision::Half,
            };
            cfg.sync_element_bytes();
        }
        if self.triangular_comm {
            cfg.dist.triangular_comm = true;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.output = Some(v.clone());
        }
        Ok(())
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.load()?;
            let result = run_experiment(&cfg)?;
            let summary = result.summary.to_text();
            if let Some(out) = &cfg.output {
                write(out, &result.csv())?;
                write(&with_suffix(out, "summary"), &summary)?;
            }
            print!("{summary}");
        }
        Command::Sweep { common, fracs } => {
            let cfg = common.load()?;
            let fracs = fracs
                .split(',')
                .map(|f| parse_frac(f.trim()))
                .collect::<Result<Vec<_>>>()?;
            let table = sweep_csv(&sweep_frac(&cfg, &fracs)?);
            if let Some(out) = &cfg.output {
                write(out, &table)?;
            }
            print!("{table}");
        }
        Command::Compare { common, baseline } => {
            let cfg = common.load()?;
            let base = match baseline {
                Some(path) => ExperimentConfig::load(&path)?,
                None => ExperimentConfig {
                    optimizer: OptimizerKind::Sgd,
                    ..cfg.clone()
                },
            };
            let report = compare_optimizers(&base, &cfg)?;
            let text = report.to_text();
            if let Some(out) = &cfg.output {
                write(out, &text)?;
                write(&with_suffix(out, "baseline.csv"), &report.baseline.csv())?;
                write(&with_suffix(out, "candidate.csv"), &report.candidate.csv())?;
            }
            print!("{text}");
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            let mut failed = 0;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(Error::Consistency(format!("{failed} self-test checks failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Consistency(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
