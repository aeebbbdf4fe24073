//! Run configuration, training loop, evaluation and visualization behind the
//! command-line subcommands.

mod config;
mod eval;
mod train;
mod visualize;

use std::fs;
use std::path::{Path, PathBuf};

pub use config::{DataConfig, EvalConfig, OptimConfig, RunConfig, SCHEMA_VERSION};
pub use eval::{
    entries, evaluate_model, full_report, infer_samples, localization, visibility_accuracy, EvalSummary,
    FullReport, LocalizationReport, ModeReport, VisibilityReport,
};
pub use train::{
    load_data, lr_at, make_batch, pk_batches, train, train_step, train_until, Batch, Checkpoint, LogRecord, TrainOutcome,
    BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE,
};
pub use visualize::{attention_image, colormap, render_panel, visualize_samples};

use crate::error::{Error, Result};
use crate::synth::{generate, write_dataset};

/// Synthesizes the configured dataset into `data.root`.
pub fn cmd_generate(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.data.synth.validate()?;
    let data = generate(&cfg.data.synth)?;
    write_dataset(&cfg.data.root, &data)?;
    Ok(cfg.data.root.clone())
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let data = load_data(cfg)?;
    train(cfg, &data, resume)
}

/// Evaluates a checkpoint; writes `eval_report.json` next to it.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, ablate: bool) -> Result<FullReport> {
    let data = load_data(cfg)?;
    let ck = Checkpoint::load(checkpoint)?;
    let report = full_report(&ck.model, &data, &cfg.parts, &cfg.eval, ablate)?;
    let path = checkpoint.with_file_name("eval_report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

pub fn cmd_visualize(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: &str,
    ids: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let data = load_data(cfg)?;
    let ck = Checkpoint::load(checkpoint)?;
    let samples = data.split(split)?;
    if let Some(&bad) = ids.iter().find(|&&i| i >= samples.len()) {
        return Err(Error::OutOfRange {
            what: "sample id",
            index: bad,
            size: samples.len(),
        });
    }
    let picked: Vec<_> = ids.iter().map(|&i| samples[i].clone()).collect();
    let outputs = infer_samples(&ck.model, &picked, cfg.eval.batch_size)?;
    let all: Vec<_> = samples.to_vec();
    visualize_samples(out_dir, split, &all, &outputs, ids, &ck.model.config)
}
