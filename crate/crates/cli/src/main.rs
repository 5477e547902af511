//! `pathryoshka`: distill, evaluate, export and benchmark nested-embedding
//! students.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pathryoshka::checkpoint::Archive;
use pathryoshka::dataset::{materialize, synthetic_tile_dataset};
use pathryoshka::eval::{knn_runtime_profile, throughput_benchmark, ThroughputConfig};
use pathryoshka::experiment::{run_crop_ablation, run_distill, run_eval, run_nesting_ablation, EvalTask, ExperimentConfig};
use pathryoshka::model::{build_student, BackboneConfig};
use pathryoshka::nn::Parameters;
use pathryoshka::report::build_report;
use pathryoshka::teacher::TeacherRegistry;
use pathryoshka::trainer::{export_deployed, load_backbone, Precision};
use pathryoshka::Error;

const CODE_HASH: &str = env!("PATHRYOSHKA_CODE_HASH");

#[derive(Parser)]
#[command(name = "pathryoshka", version, about = "Multi-teacher distillation into nested embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Recipe {
    Standard,
    CropAblation,
    NestingAblation,
}

#[derive(Subcommand)]
enum Command {
    /// Train a student from an experiment file.
    Distill {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `train.total_steps=100`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_enum, default_value = "standard")]
        recipe: Recipe,
        /// Continue from `checkpoints/last.safetensors` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated subset of knn, subset, linear, retrieval, pca, runtime, impact, bench.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        /// Defaults to `<output_dir>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Strip heads and optimizer state from a training checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Export the EMA shadow instead of the raw student.
        #[arg(long)]
        ema: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Throughput of a preset or checkpoint, or the k-NN runtime profile.
    Bench {
        #[arg(long, conflicts_with = "checkpoint")]
        preset: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 500)]
        batches: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value = "f16")]
        precision: String,
        /// Profile k-NN over this many random embeddings instead.
        #[arg(long)]
        knn_n: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "768,384,192,96,48,24,12")]
        dims: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a labeled synthetic tile dataset and its manifest.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        per_class: usize,
        #[arg(long, default_value_t = 256)]
        size: u32,
    },
    /// Collect every CSV under a directory into `report.md`.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Key(_) | Error::InvalidDim { .. } | Error::InvalidK { .. } | Error::ManifestParse { .. } => 2,
        Error::CheckpointNotFound(_) => 3,
        Error::MissingEma => 4,
        _ => 1,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Key(_) => "key",
        Error::InvalidDim { .. } => "invalid_dim",
        Error::InvalidK { .. } => "invalid_k",
        Error::ManifestParse { .. } => "manifest_parse",
        Error::CheckpointNotFound(_) => "checkpoint_not_found",
        Error::MissingEma => "missing_ema",
        Error::MissingHeads => "missing_heads",
        Error::NonFiniteLoss { .. } => "non_finite_loss",
        Error::TeacherUnavailable(_) => "teacher_unavailable",
        _ => "runtime",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({"error": kind(&e), "message": e.to_string()}));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> pathryoshka::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(p) = out {
        if let Some(d) = p.parent() {
            std::fs::create_dir_all(d)?;
        }
        std::fs::write(p, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn run(cmd: Command) -> pathryoshka::Result<()> {
    let registry = TeacherRegistry::default();
    match cmd {
        Command::Distill {
            config,
            overrides,
            recipe,
            resume,
        } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            match recipe {
                Recipe::Standard => {
                    let total = cfg.train.total_steps;
                    let out = run_distill(&cfg, &registry, CODE_HASH, resume, |r| {
                        if r.step == 1 || r.step % 10 == 0 || r.step == total {
                            log::info!("step {}/{} loss {:.4} lr {:.2e}", r.step, total, r.loss.total, r.lr);
                        }
                    })?;
                    emit(
                        &serde_json::json!({
                            "steps": out.state.step,
                            "checkpoint": out.final_checkpoint,
                            "deploy": out.deploy,
                            "final_loss": out.records.last().map(|r| r.loss.total),
                        }),
                        None,
                    )
                }
                Recipe::CropAblation => {
                    let out = run_crop_ablation(&cfg, &registry, CODE_HASH)?;
                    emit(&serde_json::json!({"csv": out.csv, "rows": out.rows}), None)
                }
                Recipe::NestingAblation => {
                    let out = run_nesting_ablation(&cfg, &registry, CODE_HASH)?;
                    emit(
                        &serde_json::json!({"csv": out.csv, "dims": out.dims, "nested": out.nested, "single": out.single}),
                        None,
                    )
                }
            }
        }
        Command::Eval {
            config,
            checkpoint,
            tasks,
            out,
            overrides,
        } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let tasks: Vec<EvalTask> = if tasks.is_empty() {
                cfg.eval.tasks.clone()
            } else {
                tasks.iter().map(|t| t.trim().parse()).collect::<pathryoshka::Result<_>>()?
            };
            let dir = out.unwrap_or_else(|| cfg.output_dir.join("eval"));
            let res = run_eval(&cfg, &checkpoint, &tasks, &dir, &registry)?;
            emit(&serde_json::json!({"files": res.files, "results": res.records}), None)
        }
        Command::Export { checkpoint, ema, out } => {
            let a = Archive::load(&checkpoint)?;
            let d = export_deployed(&a, ema)?;
            d.save(&out)?;
            let params = load_backbone(&d)?.num_params();
            emit(&serde_json::json!({"deploy": out, "params": params, "source": if ema { "ema" } else { "student" }}), None)
        }
        Command::Bench {
            preset,
            checkpoint,
            batch_size,
            batches,
            warmup,
            precision,
            knn_n,
            dims,
            out,
        } => {
            if let Some(n) = knn_n {
                let rows = knn_runtime_profile(n, &dims, 10.min(n), 3, 0)?;
                return emit(&serde_json::to_value(rows)?, out.as_deref());
            }
            let model = match (&preset, &checkpoint) {
                (_, Some(c)) => load_backbone(&Archive::load(c)?)?,
                (p, None) => build_student(&BackboneConfig::preset(p.as_deref().unwrap_or("S"))?, 0)?,
            };
            let precision: Precision = serde_json::from_value(serde_json::Value::String(precision.clone()))
                .map_err(|_| Error::config(format!("unknown precision `{precision}`")))?;
            let t = throughput_benchmark(
                &model,
                &ThroughputConfig {
                    batch_size,
                    batches,
                    warmup,
                    precision,
                    seed: 0,
                },
            )?;
            emit(&serde_json::to_value(t)?, out.as_deref())
        }
        Command::MakeSynthetic {
            out,
            seed,
            classes,
            per_class,
            size,
        } => {
            let data = synthetic_tile_dataset(seed, classes, per_class, size)?;
            let m = materialize(&data, &out)?;
            emit(&serde_json::json!({"manifest": out.join("manifest.tsv"), "tiles": m.len()}), None)
        }
        Command::Report { dir } => {
            let md = build_report(&dir)?;
            print!("{md}");
            Ok(())
        }
    }
}
