use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evidet::checkpoint::{load_checkpoint, save_checkpoint};
use evidet::config::RunConfig;
use evidet::dataset::{write_dataset, Dataset, SynthSpec};
use evidet::gradsuite::{gradient_suite, SUITE_TOLERANCE};
use evidet::metrics::calibration_csv;
use evidet::pipeline::{above_threshold, calibration_from_detections, infer, report, train_on, ImageDetections};
use evidet::synth::SceneConfig;
use evidet::trainer::{write_log_csv, StepInfo};
use evidet::{Error, ErrorKind, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const CONFIG_HELP: &str = "\
JSON run configuration with sections data, model, loss, train and eval. Missing keys take their defaults:
  train: lr0 1.25e-4, lr_decay_factor 10 at fractions [0.5625, 0.75], epochs 40, freeze_offset_at 0.875,
         batch 4, lambda_cls_max 0.06 ramped until 0.75, AdamW betas 0.9/0.999, eps 1e-8, weight_decay 1e-2, seed 7
  loss:  zeta 2, eta 4, beta_cb 0.99, n_cls_fraction 0.4, lambda_un_cls 0.1, lambda_w 1, lambda_un_reg 0.1,
         uniform_when_absent false, n_w 55, n_obj_max 50, kappa2 1e-3, head weights 1 / 0.27 / 0.27 / 1
  model: channels [16, 32, 64, 64], dropout_p 0.2 on the objectness head, input_mean 0.2, input_std 0.2
  eval:  bins 10, score_threshold 0.3, band_multiplier 1, max_det 50, iou_threshold 0.5";

#[derive(Parser)]
#[command(name = "evidet", version, about = "Evidential center-point detection on synthetic shape scenes")]
#[command(after_help = "Exit codes: 0 success, 1 invalid input, 2 I/O failure, 3 numeric failure.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        n_train: usize,
        #[arg(long, default_value_t = 100)]
        n_val: usize,
        /// Fraction of validation images carrying an out-of-distribution ring
        #[arg(long, default_value_t = 0.2)]
        ood_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
    },
    /// Train on the train split; writes checkpoint.evc and train_log.csv
    #[command(after_help = CONFIG_HELP)]
    Train {
        /// Run configuration (all defaults when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the validation split
    #[command(after_help = CONFIG_HELP)]
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also dump detections scoring at least eval.score_threshold (default 0.3)
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Write the reliability table (bin_lo, bin_hi, count, mean_conf, accuracy)
    Calibration {
        /// Checkpoint to evaluate; exclusive with --predictions
        #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Previously dumped detections (JSON) instead of a checkpoint
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of every loss term
    Gradcheck {
        /// Random points per term
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn to_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    write_text(path, &text)
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            n_train,
            n_val,
            ood_frac,
            seed,
            width,
            height,
        } => {
            let spec = SynthSpec {
                n_train,
                n_val,
                ood_frac,
                seed,
                scene: SceneConfig {
                    width,
                    height,
                    ..SceneConfig::default()
                },
            };
            let entries = write_dataset(&out, &spec)?;
            let ood = entries.iter().filter(|e| e.ood).count();
            println!("wrote {} images ({ood} with out-of-distribution objects) to {}", entries.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let dataset = Dataset::load(&data)?;
            create_dir(&out)?;
            let mut progress = |s: &StepInfo| {
                if s.iter.is_multiple_of(100) {
                    eprintln!("iter {:5}  epoch {:3}  loss {:.4}  lr {:e}", s.iter, s.epoch, s.loss.total, s.lr);
                }
            };
            let outcome = train_on(&cfg, &dataset, Some(&mut progress))?;
            save_checkpoint(&outcome.params, &out.join("checkpoint.evc"))?;
            write_log_csv(&out.join("train_log.csv"), &outcome.log)?;
            if outcome.skipped_updates > 0 {
                eprintln!("{} tensor updates skipped for non-finite gradients", outcome.skipped_updates);
            }
            println!("wrote {} and {}", out.join("checkpoint.evc").display(), out.join("train_log.csv").display());
        }
        Command::Eval {
            checkpoint,
            data,
            report: report_path,
            config,
            predictions,
        } => {
            let cfg = load_config(config.as_deref())?;
            let params = load_checkpoint(&checkpoint)?;
            let dataset = Dataset::load(&data)?;
            let (preds, dets) = infer(&cfg, &params, &dataset)?;
            let mut r = report(&cfg, &dataset, &preds, &dets)?;
            r.timestamp = Some(timestamp());
            to_json(&report_path, &r)?;
            if let Some(path) = predictions {
                to_json(&path, &above_threshold(&dets, cfg.eval.score_threshold))?;
            }
            println!("mAP@{} {}", cfg.eval.iou_threshold, r.map.map_or("undefined".into(), |m| format!("{m:.4}")));
        }
        Command::Calibration {
            checkpoint,
            predictions,
            data,
            bins,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let dataset = Dataset::load(&data)?;
            let dets: Vec<ImageDetections> = match (checkpoint, predictions) {
                (Some(ckpt), _) => infer(&cfg, &load_checkpoint(&ckpt)?, &dataset)?.1,
                (None, Some(path)) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
                        path: path.clone(),
                        source: e,
                    })?;
                    serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })?
                }
                (None, None) => unreachable!("clap requires one source"),
            };
            let table = calibration_from_detections(&cfg, &dataset, &dets, bins)?;
            write_text(&out, &calibration_csv(&table))?;
            println!("wrote {}", out.display());
        }
        Command::Gradcheck { points, seed } => {
            let entries = gradient_suite(points, seed)?;
            let mut failed = false;
            for e in &entries {
                let verdict = if e.passed() { "ok" } else { "FAIL" };
                failed |= !e.passed();
                println!("{:<16} points {:4}  max rel error {:.3e}  {verdict}", e.name, e.points, e.max_rel_error);
            }
            if failed {
                return Err(Error::GradientMismatch {
                    tolerance: SUITE_TOLERANCE,
                });
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
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Validation => 1,
                ErrorKind::Io => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}
