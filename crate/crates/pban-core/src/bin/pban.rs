//! Command-line interface: training, scoring, evaluation, gradient
//! verification, checkpoint inspection, and feature-map dumps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
//! Standard output carries machine-readable results (the score line, JSON
//! reports, written paths); everything meant for humans goes to standard
//! error. `PBAN_THREADS` (default 1) parallelizes scoring and evaluation;
//! predictions are per-item in eval mode, so the thread count never changes
//! a result, only how it is partitioned.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use pban_core::data::{load_checkpoint, load_manifest, read_image, ImageRGB};
use pban_core::gradcheck;
use pban_core::metrics::evaluate;
use pban_core::model::{dump_features, param_count, NamedWeights, PBANConfig};
use pban_core::training::{build_dataset, predict_record, train, PatchPair, SGDConfig};
use pban_core::{PbanError, Result};

#[derive(Parser)]
#[command(
    name = "pban",
    version,
    about = "Full-reference super-resolution image quality assessment"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a manifest with k-fold cross-validation, then fit the
    /// final model on every record and save it.
    Train {
        /// CSV manifest: sr_path,hr_path,mos
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint output path; the training report is written beside it
        #[arg(long)]
        out: PathBuf,
        /// Architecture config JSON (defaults to the full-size model)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Epochs per fold
        #[arg(long)]
        epochs: Option<usize>,
        /// Cross-validation folds (k >= 2)
        #[arg(long)]
        folds: Option<usize>,
        /// Seed for initialization, shuffling, and dropout
        #[arg(long)]
        seed: Option<u64>,
        /// Mini-batch size in patches
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Score one SR image against its HR reference; prints exactly one
    /// number to standard output.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        hr: PathBuf,
    },
    /// Score every record in a manifest and write correlation metrics as
    /// JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output path for the metric report JSON
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify operator gradients against central finite differences.
    Gradcheck {
        /// Check a single op by name instead of the full table
        #[arg(long)]
        op: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a checkpoint's architecture config and parameter counts.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
    /// Write per-stage feature-map images for one SR/HR pair.
    DumpFeatures {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        hr: PathBuf,
        /// Directory for the stage images (created if missing)
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let requested = matches!(
                e.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            );
            let _ = e.print();
            std::process::exit(if requested { 0 } else { 1 });
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            manifest,
            out,
            config,
            epochs,
            folds,
            seed,
            batch,
        } => cmd_train(&manifest, &out, config.as_deref(), epochs, folds, seed, batch),
        Cmd::Score { model, sr, hr } => cmd_score(&model, &sr, &hr),
        Cmd::Eval {
            model,
            manifest,
            out,
        } => cmd_eval(&model, &manifest, &out),
        Cmd::Gradcheck { op, seed } => cmd_gradcheck(op.as_deref(), seed.unwrap_or(0)),
        Cmd::Inspect { model } => cmd_inspect(&model),
        Cmd::DumpFeatures { model, sr, hr, out } => cmd_dump_features(&model, &sr, &hr, &out),
    }
}

fn read_config(path: &Path) -> Result<PBANConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| PbanError::io(path, e))?;
    let cfg: PBANConfig = serde_json::from_str(&text)
        .map_err(|e| PbanError::Format(format!("config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| PbanError::Format(format!("serializing report: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| PbanError::io(path, e))
}

fn thread_count() -> Result<usize> {
    match std::env::var("PBAN_THREADS") {
        Err(_) => Ok(1),
        Ok(raw) => match raw.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(PbanError::Parameter(format!(
                "PBAN_THREADS must be a positive integer, got \"{raw}\""
            ))),
        },
    }
}

/// Runs `job` over `0..n` split into at most `threads` contiguous index
/// ranges and returns the per-index results in order. Each worker builds
/// its own graphs; only plain data crosses threads, and the merge order is
/// fixed, so results are identical for every thread count.
fn partitioned<R: Send>(
    n: usize,
    threads: usize,
    job: impl Fn(std::ops::Range<usize>) -> Result<Vec<R>> + Sync,
) -> Result<Vec<R>> {
    let threads = threads.min(n).max(1);
    if threads == 1 {
        return job(0..n);
    }
    let per = n.div_ceil(threads);
    let ranges: Vec<std::ops::Range<usize>> =
        (0..threads).map(|t| (t * per).min(n)..((t + 1) * per).min(n)).collect();
    let chunks = std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .into_iter()
            .map(|r| scope.spawn(|| job(r)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .map_err(|_| PbanError::Contract("worker thread panicked".into()))?
            })
            .collect::<Result<Vec<Vec<R>>>>()
    })?;
    Ok(chunks.into_iter().flatten().collect())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    manifest_path: &Path,
    out: &Path,
    config: Option<&Path>,
    epochs: Option<usize>,
    folds: Option<usize>,
    seed: Option<u64>,
    batch: Option<usize>,
) -> Result<()> {
    let cfg = match config {
        Some(path) => read_config(path)?,
        None => PBANConfig::default(),
    };
    let mut sgd = SGDConfig::default();
    if let Some(e) = epochs {
        sgd.epochs = e;
    }
    if let Some(s) = seed {
        sgd.seed = s;
    }
    if let Some(b) = batch {
        sgd.batch_size = b;
    }
    let k = folds.unwrap_or(5);
    let manifest = load_manifest(manifest_path)?;
    let report = train(&manifest, &cfg, &sgd, k, out)?;
    let report_path = PathBuf::from(format!("{}.train.json", out.display()));
    write_json(&report_path, &report)?;
    eprintln!(
        "trained on {} records ({} patch pairs) in {:.1}s",
        report.records, report.patch_pairs, report.wall_seconds
    );
    for fold in &report.folds {
        match (&fold.metrics, &fold.note) {
            (Some(m), _) => eprintln!(
                "fold {}: srcc {:.4} krcc {:.4} plcc {:.4} rmse {:.4}",
                fold.fold, m.srcc, m.krcc, m.plcc, m.rmse
            ),
            (None, Some(note)) => eprintln!("fold {}: metrics undefined: {note}", fold.fold),
            (None, None) => {}
        }
    }
    eprintln!("checkpoint: {}", out.display());
    eprintln!("report: {}", report_path.display());
    Ok(())
}

/// Patch-average score over an aligned SR/HR pair, partitioned across
/// `threads`.
fn score_image(
    weights: &NamedWeights<f32>,
    cfg: &PBANConfig,
    sr: &ImageRGB,
    hr: &ImageRGB,
    threads: usize,
) -> Result<f64> {
    if (sr.width, sr.height) != (hr.width, hr.height) {
        return Err(PbanError::Data(format!(
            "image sizes differ: {}x{} vs reference {}x{}",
            sr.width, sr.height, hr.width, hr.height
        )));
    }
    let sr_patches = pban_core::data::extract_patches(sr, pban_core::model::PATCH_SIZE)?;
    let hr_patches = pban_core::data::extract_patches(hr, pban_core::model::PATCH_SIZE)?;
    if sr_patches.is_empty() {
        return Err(PbanError::Data(format!(
            "image {}x{} is smaller than one patch",
            sr.width, sr.height
        )));
    }
    let pairs: Vec<PatchPair> = sr_patches
        .into_iter()
        .zip(hr_patches)
        .map(|(s, h)| PatchPair {
            record: 0,
            sr: s,
            hr: h,
        })
        .collect();
    let scores = partitioned(pairs.len(), threads, |range| {
        let chunk: Vec<&PatchPair> = pairs[range].iter().collect();
        pban_core::training::score_pairs(weights, cfg, &chunk)
    })?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn cmd_score(model: &Path, sr: &Path, hr: &Path) -> Result<()> {
    let (weights, cfg) = load_checkpoint(model)?;
    let sr = read_image(sr)?;
    let hr = read_image(hr)?;
    let score = score_image(&weights, &cfg, &sr, &hr, thread_count()?)?;
    println!("{score}");
    Ok(())
}

fn cmd_eval(model: &Path, manifest_path: &Path, out: &Path) -> Result<()> {
    let (weights, cfg) = load_checkpoint(model)?;
    let manifest = load_manifest(manifest_path)?;
    if manifest.records.is_empty() {
        return Err(PbanError::Data(format!(
            "manifest {} has no records",
            manifest_path.display()
        )));
    }
    let dataset = build_dataset(&manifest)?;
    let preds = partitioned(dataset.mos.len(), thread_count()?, |range| {
        range
            .map(|rec| {
                let pairs: Vec<&PatchPair> = dataset
                    .pairs
                    .iter()
                    .filter(|p| p.record == rec)
                    .collect();
                predict_record(&weights, &cfg, &pairs)
            })
            .collect()
    })?;
    let report = evaluate(&preds, &dataset.mos)?;
    write_json(out, &report)?;
    eprintln!(
        "evaluated {} records: srcc {:.4} krcc {:.4} plcc {:.4} rmse {:.4}",
        report.n, report.srcc, report.krcc, report.plcc, report.rmse
    );
    eprintln!("report: {}", out.display());
    Ok(())
}

fn cmd_gradcheck(op: Option<&str>, seed: u64) -> Result<()> {
    let report = gradcheck::run(op, seed)?;
    eprint!("{}", gradcheck::render_table(&report));
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| PbanError::Format(format!("serializing report: {e}")))?;
    println!("{json}");
    if report.all_pass {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .ops
            .iter()
            .filter(|o| !o.pass)
            .map(|o| o.name.as_str())
            .collect();
        Err(PbanError::Contract(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn cmd_inspect(model: &Path) -> Result<()> {
    let (_, cfg) = load_checkpoint(model)?;
    let count = param_count(&cfg)?;
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "config": cfg,
        "param_count": count,
    }))
    .map_err(|e| PbanError::Format(format!("serializing report: {e}")))?;
    println!("{json}");
    Ok(())
}

fn cmd_dump_features(model: &Path, sr: &Path, hr: &Path, out: &Path) -> Result<()> {
    let (weights, cfg) = load_checkpoint(model)?;
    let sr = read_image(sr)?;
    let hr = read_image(hr)?;
    let paths = dump_features(&weights, &cfg, &sr, Some(&hr), out)?;
    for path in &paths {
        println!("{}", path.display());
    }
    eprintln!("wrote {} stage images to {}", paths.len(), out.display());
    Ok(())
}
