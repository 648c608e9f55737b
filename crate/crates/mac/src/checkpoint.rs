//! Binary model snapshots: a JSON header (architecture, embedded
//! vocabularies with content hashes, seed, per-epoch metric history)
//! followed by one flat little-endian f64 blob holding every parameter in
//! canonical tensor order. Loading is bitwise exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Schema, Vocabulary};
use crate::model::{init_params, MacConfig, MacParams};
use crate::training::{EpochRecord, FoldOutcome};
use crate::{Error, Result};

const MAGIC: &[u8] = b"MACCKPT1\n";

/// Everything needed to rebuild and verify a trained model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub schema: Schema,
    pub config: MacConfig,
    pub vocab: Vocabulary,
    pub speakers: Option<Vocabulary>,
    pub publishers: Option<Vocabulary>,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    /// Values per tensor, in canonical order.
    pub param_values: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: Schema,
    config: MacConfig,
    vocab: Vocabulary,
    speakers: Option<Vocabulary>,
    publishers: Option<Vocabulary>,
    vocab_hash: String,
    speaker_hash: Option<String>,
    publisher_hash: Option<String>,
    seed: u64,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorMeta>,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() - *at < n {
        return Err(corrupt(format!(
            "truncated checkpoint: {what} needs {n} bytes, {} left",
            bytes.len() - *at
        )));
    }
    let slice = &bytes[*at..*at + n];
    *at += n;
    Ok(slice)
}

impl Checkpoint {
    pub fn from_fold(outcome: &FoldOutcome, schema: Schema, seed: u64) -> Checkpoint {
        Checkpoint {
            schema,
            config: outcome.config.clone(),
            vocab: outcome.vocab.clone(),
            speakers: outcome.speakers.clone(),
            publishers: outcome.publishers.clone(),
            seed,
            history: outcome.epochs.clone(),
            param_values: outcome.param_values.clone(),
        }
    }

    /// Rebuild the trained parameters described by this checkpoint.
    pub fn materialize(&self) -> Result<MacParams> {
        let params = init_params(&self.config, self.seed, &self.vocab, None)?;
        params.load_values(&self.param_values)?;
        Ok(params)
    }

    fn tensor_meta(&self) -> Result<Vec<TensorMeta>> {
        // Shapes come from a throwaway instantiation of the architecture,
        // which also validates that the stored values fit it.
        let params = self.materialize()?;
        Ok(params
            .named_tensors()
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            schema: self.schema,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            speakers: self.speakers.clone(),
            publishers: self.publishers.clone(),
            vocab_hash: self.vocab.content_hash(),
            speaker_hash: self.speakers.as_ref().map(Vocabulary::content_hash),
            publisher_hash: self.publishers.as_ref().map(Vocabulary::content_hash),
            seed: self.seed,
            history: self.history.clone(),
            tensors: self.tensor_meta()?,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let count: usize = self.param_values.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 16 + header_bytes.len() + count * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for values in &self.param_values {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let mut at = 0usize;
        let magic = take(&bytes, &mut at, MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(corrupt("not a model checkpoint (bad magic)"));
        }
        let header_len = u64::from_le_bytes(
            take(&bytes, &mut at, 8, "header length")?
                .try_into()
                .expect("8 bytes"),
        ) as usize;
        let header_bytes = take(&bytes, &mut at, header_len, "header")?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| corrupt(format!("header corrupt: {e}")))?;
        let count = u64::from_le_bytes(
            take(&bytes, &mut at, 8, "value count")?
                .try_into()
                .expect("8 bytes"),
        ) as usize;
        let declared: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
        if declared != count {
            return Err(corrupt(format!(
                "header declares {declared} values, blob header says {count}"
            )));
        }
        let blob = take(&bytes, &mut at, count * 8, "parameter blob")?;
        if at != bytes.len() {
            return Err(corrupt(format!(
                "{} trailing bytes after the parameter blob",
                bytes.len() - at
            )));
        }
        if header.vocab_hash != header.vocab.content_hash() {
            return Err(corrupt("vocabulary hash mismatch"));
        }
        if header.speaker_hash != header.speakers.as_ref().map(Vocabulary::content_hash) {
            return Err(corrupt("speaker vocabulary hash mismatch"));
        }
        if header.publisher_hash != header.publishers.as_ref().map(Vocabulary::content_hash) {
            return Err(corrupt("publisher vocabulary hash mismatch"));
        }
        let mut param_values = Vec::with_capacity(header.tensors.len());
        let mut offset = 0usize;
        for meta in &header.tensors {
            let len = meta.rows * meta.cols;
            let mut values = Vec::with_capacity(len);
            for i in 0..len {
                let start = (offset + i) * 8;
                let raw: [u8; 8] = blob[start..start + 8].try_into().expect("8 bytes");
                values.push(f64::from_le_bytes(raw));
            }
            offset += len;
            param_values.push(values);
        }
        let checkpoint = Checkpoint {
            schema: header.schema,
            config: header.config,
            vocab: header.vocab,
            speakers: header.speakers,
            publishers: header.publishers,
            seed: header.seed,
            history: header.history,
            param_values,
        };
        // Confirm the values actually fit the declared architecture.
        checkpoint.materialize()?;
        Ok(checkpoint)
    }
}
