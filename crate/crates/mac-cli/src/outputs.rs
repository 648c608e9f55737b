//! Artifact writing: run manifests, training reports, epoch logs, and fold
//! checkpoints. Report files are pure functions of the run inputs so a
//! repeated run produces byte-identical reports; wall-clock timestamps live
//! only in the manifest.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use mac::checkpoint::Checkpoint;
use mac::data::Schema;
use mac::metrics::EvalReport;
use mac::model::MacConfig;
use mac::training::{CvOutcome, TrainSettings};
use mac::Result;

/// Describes exactly what produced the artifacts next to it.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub corpus_path: String,
    pub corpus_sha256: String,
    pub schema: String,
    pub seed: u64,
    pub config: MacConfig,
    pub settings: TrainSettings,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// File names written into the same directory, in creation order.
    pub outputs: Vec<String>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn argv() -> Vec<String> {
    std::env::args().skip(1).collect()
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Serialize as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    write_json(&dir.join("manifest.json"), manifest)
}

#[derive(Serialize)]
struct FoldSummary<'a> {
    fold: usize,
    best_epoch: usize,
    report: &'a EvalReport,
}

#[derive(Serialize)]
struct TrainReport<'a> {
    schema: String,
    aggregate: &'a mac::training::AggregateReport,
    folds: Vec<FoldSummary<'a>>,
}

/// Write report.json, epochs.jsonl, and one checkpoint per fold. Returns
/// the file names written.
pub fn write_train_outputs(
    dir: &Path,
    schema: Schema,
    outcome: &CvOutcome,
    seed: u64,
) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut outputs = Vec::new();

    let report = TrainReport {
        schema: schema.to_string(),
        aggregate: &outcome.aggregate,
        folds: outcome
            .folds
            .iter()
            .map(|f| FoldSummary {
                fold: f.fold,
                best_epoch: f.best_epoch,
                report: &f.report,
            })
            .collect(),
    };
    write_json(&dir.join("report.json"), &report)?;
    outputs.push("report.json".to_string());

    let mut log = std::fs::File::create(dir.join("epochs.jsonl"))?;
    for fold in &outcome.folds {
        for record in &fold.epochs {
            let line = serde_json::to_string(record)?;
            writeln!(log, "{line}")?;
        }
    }
    log.flush()?;
    outputs.push("epochs.jsonl".to_string());

    for fold in &outcome.folds {
        let name = format!("fold{}.ckpt", fold.fold);
        Checkpoint::from_fold(fold, schema, seed).save(&dir.join(&name))?;
        outputs.push(name);
    }
    Ok(outputs)
}

/// The manifest fields common to the directory-producing commands.
pub struct ManifestInputs<'a> {
    pub command: &'a str,
    pub corpus: &'a Path,
    pub schema: Schema,
    pub config: &'a MacConfig,
    pub settings: &'a TrainSettings,
    pub started_unix: u64,
}

pub fn finish_manifest(
    inputs: ManifestInputs<'_>,
    outputs: Vec<String>,
    dir: &Path,
) -> Result<PathBuf> {
    let manifest = RunManifest {
        command: inputs.command.to_string(),
        argv: argv(),
        corpus_path: inputs.corpus.display().to_string(),
        corpus_sha256: sha256_hex(inputs.corpus)?,
        schema: inputs.schema.to_string(),
        seed: inputs.settings.seed,
        config: inputs.config.clone(),
        settings: inputs.settings.clone(),
        started_unix: inputs.started_unix,
        finished_unix: unix_now(),
        outputs,
    };
    write_manifest(dir, &manifest)?;
    Ok(dir.join("manifest.json"))
}
