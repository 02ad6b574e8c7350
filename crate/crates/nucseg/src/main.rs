use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nucseg::config;
use nucseg::fixtures::{self, FixtureSpec};
use nucseg::io;
use nucseg::run::{self, RunError, RunOptions};
use nucseg_core::pipeline::PipelineConfig;

/// Training-free nuclear instance segmentation for H&E images.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment an image or every image in a directory.
    Run {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth label maps named `<stem>.png`.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// TOML configuration; missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Also write the activation maps as `activations.sprt`.
        #[arg(long)]
        debug_activations: bool,
        /// Resample inputs to N×N with a Lanczos-3 kernel first.
        #[arg(long, value_name = "N")]
        resize: Option<u32>,
        /// Directory of precomputed feature grids, `<stem>.sprt`.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Directory of externally predicted masks, `<stem>/mask_<patch>_<idx>.bin`.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Fail if some image has no ground truth.
        #[arg(long)]
        require_gt: bool,
        /// Keep going when the transport solver does not converge.
        #[arg(long)]
        allow_unconverged: bool,
    },
    /// Compare predicted label maps with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render synthetic images with exact ground truth.
    Fixtures {
        /// TOML fixture spec; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            input,
            out,
            gt,
            config: config_path,
            seed,
            workers,
            debug_activations,
            resize,
            features,
            masks,
            require_gt,
            allow_unconverged,
        } => {
            let mut cfg = match &config_path {
                Some(p) => config::load(p).map_err(|e| Failure::Config(e.to_string()))?,
                None => PipelineConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            cfg.allow_unconverged |= allow_unconverged;
            cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
            let options = RunOptions { debug_activations, resize, features, masks, require_gt };
            if let Some(report) = run::run_dataset(&input, &out, gt.as_deref(), &cfg, &options)? {
                let s = report.summary;
                println!(
                    "{} images: AJI {:.4}  DQ {:.4}  SQ {:.4}  PQ {:.4}  Dice {:.4}",
                    s.images, s.aji, s.dq, s.sq, s.pq, s.dice
                );
            }
            Ok(())
        }
        Command::Eval { pred, gt, out } => {
            let report = run::eval_dirs(&pred, &gt)?;
            io::write_json(&out, &report).map_err(|e| Failure::Runtime(e.to_string()))?;
            let s = report.summary;
            println!("{} images: AJI {:.4}  DQ {:.4}  SQ {:.4}  PQ {:.4}  Dice {:.4}", s.images, s.aji, s.dq, s.sq, s.pq, s.dice);
            Ok(())
        }
        Command::Fixtures { spec, out, seed } => {
            let spec: FixtureSpec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
                    toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
                }
                None => FixtureSpec::default(),
            };
            spec.validate().map_err(|e| Failure::Config(e.to_string()))?;
            let set = fixtures::generate(&spec, seed).map_err(|e| Failure::Runtime(e.to_string()))?;
            fixtures::write(&set, &out).map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("wrote {} fixtures to {}", set.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
