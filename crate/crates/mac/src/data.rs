//! Corpus ingestion and preparation: JSONL parsing, label merging,
//! vocabulary construction, pre-trained embedding loading, padded/masked
//! instance encoding, and the stratified split protocol (10% validation
//! holdout plus 5-fold cross-validation on the remainder).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Which dataset's label set and metadata channels apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    /// Two labels; no speaker metadata.
    Snopes,
    /// Six labels merged to two; speakers available.
    Politifact,
}

impl Schema {
    pub fn has_speakers(&self) -> bool {
        matches!(self, Schema::Politifact)
    }
}

impl std::str::FromStr for Schema {
    type Err = Error;
    fn from_str(s: &str) -> Result<Schema> {
        match s.to_ascii_lowercase().as_str() {
            "snopes" => Ok(Schema::Snopes),
            "politifact" => Ok(Schema::Politifact),
            other => Err(Error::Config(format!("unknown schema '{other}'"))),
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schema::Snopes => write!(f, "snopes"),
            Schema::Politifact => write!(f, "politifact"),
        }
    }
}

/// One evidence document as found in the corpus file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawDocument {
    pub text: String,
    pub publisher: String,
}

/// One corpus record as found in the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawClaim {
    pub claim_id: String,
    pub claim_text: String,
    pub speaker: Option<String>,
    pub label: String,
    pub evidence: Vec<RawDocument>,
}

/// A parsed, label-merged claim with cleaned evidence.
#[derive(Debug, Clone)]
pub struct LabeledClaim {
    pub claim_id: String,
    pub claim_text: String,
    pub speaker: Option<String>,
    pub label: u8,
    pub evidence: Vec<RawDocument>,
}

/// Corpus-level counts, in the shape of the dataset summary tables.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub true_claims: usize,
    pub false_claims: usize,
    pub speakers: usize,
    pub documents: usize,
    pub publishers: usize,
    /// Claims discarded because no usable evidence document remained.
    pub dropped_claims_without_evidence: usize,
    /// Claims discarded because the claim text had no tokens.
    pub dropped_claims_without_text: usize,
    /// Evidence documents discarded for being empty after normalization.
    pub dropped_empty_documents: usize,
}

/// Lowercase + whitespace tokenization; the corpora ship pre-normalized.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Merge a dataset label string into the binary target: 1 means true news.
pub fn merge_labels(raw_label: &str, schema: Schema) -> Result<u8> {
    let norm = normalize_ws(raw_label).to_lowercase();
    let known: &[(&str, u8)] = match schema {
        Schema::Snopes => &[("true", 1), ("false", 0)],
        Schema::Politifact => &[
            ("true", 1),
            ("mostly true", 1),
            ("half true", 1),
            ("false", 0),
            ("mostly false", 0),
            ("pants on fire", 0),
        ],
    };
    known
        .iter()
        .find(|(s, _)| *s == norm)
        .map(|&(_, y)| y)
        .ok_or_else(|| Error::Label(format!("unrecognized {schema} label '{raw_label}'")))
}

/// Parse a JSONL corpus, merge labels, normalize whitespace, and drop
/// unusable records (empty documents, then claims left with no evidence or
/// no text), all counted in the stats.
pub fn load_corpus(path: &Path, schema: Schema) -> Result<(Vec<LabeledClaim>, CorpusStats)> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut claims = Vec::new();
    let mut stats = CorpusStats::default();
    let mut speakers = std::collections::BTreeSet::new();
    let mut publishers = std::collections::BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawClaim = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let label = merge_labels(&raw.label, schema)?;
        let claim_text = normalize_ws(&raw.claim_text);
        if claim_text.is_empty() {
            stats.dropped_claims_without_text += 1;
            continue;
        }
        let mut evidence = Vec::with_capacity(raw.evidence.len());
        for doc in raw.evidence {
            let text = normalize_ws(&doc.text);
            if text.is_empty() {
                stats.dropped_empty_documents += 1;
                continue;
            }
            evidence.push(RawDocument {
                text,
                publisher: normalize_ws(&doc.publisher),
            });
        }
        if evidence.is_empty() {
            stats.dropped_claims_without_evidence += 1;
            continue;
        }
        if label == 1 {
            stats.true_claims += 1;
        } else {
            stats.false_claims += 1;
        }
        stats.documents += evidence.len();
        if let Some(s) = &raw.speaker {
            let s = normalize_ws(s);
            if !s.is_empty() {
                speakers.insert(s.clone());
            }
        }
        for d in &evidence {
            publishers.insert(d.publisher.clone());
        }
        claims.push(LabeledClaim {
            claim_id: raw.claim_id,
            claim_text,
            speaker: raw.speaker.map(|s| normalize_ws(&s)).filter(|s| !s.is_empty()),
            label,
            evidence,
        });
    }
    stats.speakers = speakers.len();
    stats.publishers = publishers.len();
    Ok((claims, stats))
}

/// Token-to-id map with ids 0/1 reserved for PAD/UNK. Ids are assigned by
/// descending frequency, ties broken lexicographically, so the map is a
/// pure function of the corpus and the threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabEncoded", into = "VocabEncoded")]
pub struct Vocabulary {
    map: BTreeMap<String, usize>,
    inverse: Vec<String>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabEncoded {
    entries: BTreeMap<String, usize>,
    min_freq: usize,
}

impl From<VocabEncoded> for Vocabulary {
    fn from(e: VocabEncoded) -> Vocabulary {
        let mut inverse = vec![String::new(); e.entries.len() + 2];
        inverse[PAD_ID] = PAD_TOKEN.to_owned();
        inverse[UNK_ID] = UNK_TOKEN.to_owned();
        for (tok, &id) in &e.entries {
            inverse[id] = tok.clone();
        }
        Vocabulary {
            map: e.entries,
            inverse,
            min_freq: e.min_freq,
        }
    }
}

impl From<Vocabulary> for VocabEncoded {
    fn from(v: Vocabulary) -> VocabEncoded {
        VocabEncoded {
            entries: v.map,
            min_freq: v.min_freq,
        }
    }
}

impl Vocabulary {
    /// Build from an iterator of token streams, keeping tokens that occur
    /// at least `min_freq` times.
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>, min_freq: usize) -> Vocabulary {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        Vocabulary::from_counts(counts, min_freq)
    }

    /// Build from whole strings (speaker or publisher names), one id per
    /// distinct label. Labels are not tokenized.
    pub fn from_labels<'a>(labels: impl Iterator<Item = &'a str>, min_freq: usize) -> Vocabulary {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for label in labels {
            *counts.entry(label.to_owned()).or_insert(0) += 1;
        }
        Vocabulary::from_counts(counts, min_freq)
    }

    fn from_counts(counts: BTreeMap<String, usize>, min_freq: usize) -> Vocabulary {
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_freq)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut map = BTreeMap::new();
        let mut inverse = vec![PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()];
        for (next_id, (tok, _)) in kept.into_iter().enumerate() {
            map.insert(tok.clone(), next_id + 2);
            inverse.push(tok);
        }
        Vocabulary {
            map,
            inverse,
            min_freq,
        }
    }

    /// Total id count including PAD and UNK.
    pub fn size(&self) -> usize {
        self.inverse.len()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    /// Id for a token, UNK when absent.
    pub fn id(&self, token: &str) -> usize {
        self.map.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.inverse[id]
    }

    /// Content hash binding checkpoints to the exact map they trained with.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.min_freq.to_le_bytes());
        for (tok, id) in &self.map {
            hasher.update(tok.as_bytes());
            hasher.update([0xff]);
            hasher.update(id.to_le_bytes());
        }
        hex(&hasher.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One padded, masked evidence document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDoc {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub publisher_id: usize,
}

/// A claim ready for the model: fixed-length id sequences with masks.
#[derive(Debug, Clone)]
pub struct ClaimInstance {
    pub claim_key: String,
    pub claim_ids: Vec<usize>,
    pub claim_mask: Vec<bool>,
    pub speaker_id: Option<usize>,
    /// Real documents only, at most `max_docs` of them, in corpus order.
    pub docs: Vec<EncodedDoc>,
    /// One flag per document slot; the first `docs.len()` are true.
    pub doc_mask: Vec<bool>,
    pub label: u8,
}

/// Vocabularies and lengths needed to encode a claim.
pub struct EncodeContext<'v> {
    pub vocab: &'v Vocabulary,
    /// Present exactly when the speaker channel is enabled.
    pub speakers: Option<&'v Vocabulary>,
    /// Present exactly when the publisher channel is enabled.
    pub publishers: Option<&'v Vocabulary>,
    pub claim_len: usize,
    pub doc_len: usize,
    pub max_docs: usize,
}

fn encode_text(text: &str, vocab: &Vocabulary, len: usize) -> (Vec<usize>, Vec<bool>) {
    let tokens = tokenize(text);
    let real = tokens.len().min(len);
    let mut ids = Vec::with_capacity(len);
    let mut mask = Vec::with_capacity(len);
    for tok in tokens.into_iter().take(len) {
        ids.push(vocab.id(&tok));
        mask.push(true);
    }
    ids.resize(len, PAD_ID);
    mask.resize(len, false);
    debug_assert_eq!(mask.iter().filter(|&&m| m).count(), real);
    (ids, mask)
}

/// Encode one claim against fold vocabularies: truncate/pad the claim to
/// `claim_len`, each document to `doc_len`, and the document list to
/// `max_docs`. Unseen tokens, speakers, and publishers map to UNK.
pub fn encode_instance(claim: &LabeledClaim, ctx: &EncodeContext) -> Result<ClaimInstance> {
    let (claim_ids, claim_mask) = encode_text(&claim.claim_text, ctx.vocab, ctx.claim_len);
    if !claim_mask[0] {
        return Err(Error::DegenerateInput(format!(
            "claim {} has no tokens",
            claim.claim_id
        )));
    }
    let mut docs = Vec::new();
    for doc in claim.evidence.iter().take(ctx.max_docs) {
        let (ids, mask) = encode_text(&doc.text, ctx.vocab, ctx.doc_len);
        if !mask[0] {
            return Err(Error::DegenerateInput(format!(
                "claim {} has an empty evidence document",
                claim.claim_id
            )));
        }
        let publisher_id = ctx
            .publishers
            .map(|p| p.id(&doc.publisher))
            .unwrap_or(PAD_ID);
        docs.push(EncodedDoc {
            ids,
            mask,
            publisher_id,
        });
    }
    if docs.is_empty() {
        return Err(Error::DegenerateInput(format!(
            "claim {} has no evidence documents",
            claim.claim_id
        )));
    }
    let mut doc_mask = vec![true; docs.len()];
    doc_mask.resize(ctx.max_docs, false);
    let speaker_id = ctx
        .speakers
        .map(|s| claim.speaker.as_deref().map_or(UNK_ID, |name| s.id(name)));
    Ok(ClaimInstance {
        claim_key: claim.claim_id.clone(),
        claim_ids,
        claim_mask,
        speaker_id,
        docs,
        doc_mask,
        label: claim.label,
    })
}

/// Pre-trained word vectors in the whitespace text format: token followed
/// by `dim` reals per line.
pub struct EmbeddingSource {
    pub vectors: HashMap<String, Vec<f64>>,
    pub dim: usize,
    /// Lines skipped for being malformed or duplicates (first kept).
    pub skipped: usize,
}

impl EmbeddingSource {
    pub fn load(path: &Path, dim: usize) -> Result<EmbeddingSource> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut vectors: HashMap<String, Vec<f64>> = HashMap::new();
        let mut malformed = 0usize;
        let mut duplicates = 0usize;
        let mut total = 0usize;
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            total += 1;
            let mut parts = line.split_whitespace();
            let token = parts.next().expect("non-empty line has a first field");
            let vals: std::result::Result<Vec<f64>, _> =
                parts.map(|p| p.parse::<f64>()).collect();
            match vals {
                Ok(v) if v.len() == dim => {
                    if vectors.contains_key(token) {
                        duplicates += 1;
                    } else {
                        vectors.insert(token.to_owned(), v);
                    }
                }
                _ => malformed += 1,
            }
        }
        if total > 0 && malformed * 100 > total {
            return Err(Error::Parse {
                line: 0,
                message: format!(
                    "{malformed} of {total} embedding lines malformed for dimension {dim}"
                ),
            });
        }
        Ok(EmbeddingSource {
            vectors,
            dim,
            skipped: malformed + duplicates,
        })
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }
}

fn class_indices(labels: &[u8]) -> [Vec<usize>; 2] {
    let mut by_class = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y as usize].push(i);
    }
    by_class
}

/// Stratified holdout: per class, a `fraction` share (rounded) is drawn
/// into the validation set. Returns `(rest, validation)` index lists.
pub fn split_validation(
    labels: &[u8],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut rest = Vec::new();
    let mut validation = Vec::new();
    for mut indices in class_indices(labels) {
        let take = (indices.len() as f64 * fraction).round() as usize;
        if indices.is_empty() || take == 0 || take >= indices.len() {
            return Err(Error::Split(format!(
                "class with {} instances cannot yield a {:.0}% validation share",
                indices.len(),
                fraction * 100.0
            )));
        }
        indices.shuffle(&mut rng);
        validation.extend(indices.drain(..take));
        rest.extend(indices);
    }
    rest.sort_unstable();
    validation.sort_unstable();
    Ok((rest, validation))
}

/// Stratified k-fold partition: each class is split into `folds` near-equal
/// parts (sizes differing by at most one); fold i tests part i and trains
/// on the rest. Returns `(train, test)` index lists per fold.
pub fn stratified_folds(
    labels: &[u8],
    folds: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if folds < 2 {
        return Err(Error::Split(format!("{folds} folds is not a partition")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); folds];
    for mut indices in class_indices(labels) {
        if indices.len() < folds {
            return Err(Error::Split(format!(
                "class with {} instances cannot be split into {folds} folds",
                indices.len()
            )));
        }
        indices.shuffle(&mut rng);
        let base = indices.len() / folds;
        let extra = indices.len() % folds;
        let mut cursor = 0;
        for (f, part) in parts.iter_mut().enumerate() {
            let size = base + usize::from(f < extra);
            part.extend(&indices[cursor..cursor + size]);
            cursor += size;
        }
    }
    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let mut test = parts[f].clone();
        let mut train: Vec<usize> = parts
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != f)
            .flat_map(|(_, p)| p.iter().copied())
            .collect();
        test.sort_unstable();
        train.sort_unstable();
        out.push((train, test));
    }
    Ok(out)
}

/// Index batches for one epoch: a seeded shuffle of `0..count` chopped into
/// `batch_size` groups; the last group may be smaller. The shuffle depends
/// on `(seed, epoch)` only.
pub fn batches(count: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| chunk.to_vec())
        .collect()
}
