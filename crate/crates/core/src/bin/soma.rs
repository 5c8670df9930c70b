//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use soma::config::{preset, RunConfig};
use soma::data::{write_synthetic_dataset, PerturbationSpec, SceneConfig, Split, SyntheticDatasetSpec};
use soma::fge::build_kernel_bank;
use soma::model::Ablation;
use soma::{pipeline, train, SomaError};

/// Run directories are created under this root unless `--run-dir` is given.
const RUN_ROOT_VAR: &str = "SOMA_RUN_ROOT";

#[derive(Parser)]
#[command(name = "soma", version, about = "Dense SAR-optical image registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a configuration file or preset.
    Train {
        /// Configuration file (`key = value` lines).
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Shipped preset instead of a file: `reference` or `desk`.
        #[arg(long)]
        preset: Option<String>,
        /// Component configuration overriding the dino/fge/glam flags.
        #[arg(long)]
        ablation: Option<String>,
        /// Extra `key=value` overrides, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run directory; defaults to `$SOMA_RUN_ROOT/<run.name>`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long, env = RUN_ROOT_VAR, default_value = "runs")]
        run_root: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate checkpoints on a split with its fixed perturbation manifest.
    Evaluate {
        /// One or more checkpoints; each becomes one method in the report.
        #[arg(long, required = true, num_args = 1..)]
        ckpt: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Dataset root overriding the one stored in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report directory; defaults to `<run dir>/eval_<split>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Warp an optical image onto a SAR image.
    Register {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        optical: PathBuf,
        #[arg(long)]
        sar: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the synthetic dataset in the standard layout.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 16)]
        train: usize,
        #[arg(long, default_value_t = 4)]
        val: usize,
        #[arg(long, default_value_t = 4)]
        test: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Use the extended perturbation bounds for the evaluation manifests.
        #[arg(long)]
        extended: bool,
    },
    /// Print the directional gradient kernels as text.
    Kernels {
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(SomaError),
}

impl From<SomaError> for Failure {
    fn from(e: SomaError) -> Self {
        Failure::Runtime(e)
    }
}

fn build_config(
    config: Option<&Path>,
    preset_name: Option<&str>,
    ablation: Option<&str>,
    overrides: &[String],
) -> Result<RunConfig, Failure> {
    let mut cfg = match (config, preset_name) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => preset(name).map_err(|e| Failure::Usage(e.to_string()))?,
        (None, None) => return Err(Failure::Usage("train needs --config or --preset".into())),
    };
    if let Some(name) = ablation {
        let a: Ablation = name.parse().map_err(|e: SomaError| Failure::Usage(e.to_string()))?;
        a.apply(&mut cfg.model);
    }
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train {
            config,
            preset,
            ablation,
            overrides,
            run_dir,
            run_root,
            resume,
        } => {
            let cfg = build_config(config.as_deref(), preset.as_deref(), ablation.as_deref(), &overrides)?;
            let dir = run_dir.unwrap_or_else(|| run_root.join(&cfg.name));
            let out = train::train(&cfg, &dir, resume.as_deref())?;
            println!(
                "trained {} steps over {} epochs; checkpoint {}",
                out.steps,
                out.epochs,
                out.last_checkpoint.display()
            );
        }
        Command::Evaluate { ckpt, split, data, out } => {
            let split: Split = split.parse().map_err(|e: SomaError| Failure::Usage(e.to_string()))?;
            let out = out.unwrap_or_else(|| {
                let ckpt_dir = ckpt[0].parent().unwrap_or(Path::new("."));
                let run_dir = ckpt_dir.parent().unwrap_or(ckpt_dir);
                run_dir.join(format!("eval_{split}"))
            });
            let (runs, files) = pipeline::evaluate(&ckpt, split, data.as_deref(), &out)?;
            for r in &runs {
                let ravg = soma::eval::r_avg(&r.records)?;
                println!("{}: {} pairs, R_avg {:.4} px", r.method, r.records.len(), ravg);
            }
            println!("wrote {}", files.metrics.display());
        }
        Command::Register { ckpt, optical, sar, out } => {
            let reg = pipeline::register(&ckpt, &optical, &sar, &out)?;
            println!(
                "registered {}x{}; wrote {} and {}",
                reg.height,
                reg.width,
                reg.warped_png.display(),
                reg.field.display()
            );
        }
        Command::GenerateData {
            out,
            size,
            train,
            val,
            test,
            seed,
            extended,
        } => {
            let perturbation = if extended {
                PerturbationSpec::extended()
            } else {
                PerturbationSpec::default()
            };
            let spec = SyntheticDatasetSpec {
                scene: SceneConfig {
                    height: size,
                    width: size,
                    ..SceneConfig::default()
                },
                counts: vec![(Split::Train, train), (Split::Val, val), (Split::Test, test)],
                perturbation: perturbation.with_seed(seed),
                seed,
            };
            write_synthetic_dataset(&out, &spec)?;
            println!("wrote {} + {} + {} tiles to {}", train, val, test, out.display());
        }
        Command::Kernels { out } => {
            let text = build_kernel_bank().dump();
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| SomaError::Io {
                    path: path.clone(),
                    source: e,
                })?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
