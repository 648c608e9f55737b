//! The six subcommands. Each one is deterministic given the inputs named
//! in its manifest: the same corpus bytes, configuration, and seed always
//! reproduce the same report bytes.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;

use mac::checkpoint::Checkpoint;
use mac::data::{
    encode_instance, load_corpus, tokenize, EmbeddingSource, EncodeContext, LabeledClaim,
    RawClaim, RawDocument, Schema,
};
use mac::metrics::{evaluate, wilcoxon_one_sided, EvalReport, DEFAULT_THRESHOLD};
use mac::model::{predict, AttentionMode};
use mac::training::run_cv;
use mac::{Error, Result};

use crate::cli::{
    AblateArgs, Command, ConvertArgs, EvalArgs, ExplainArgs, SweepArgs, TrainArgs,
};
use crate::config::{build_setup, FlagOverrides, Setup};
use crate::outputs::{
    finish_manifest, unix_now, write_json, write_train_outputs, ManifestInputs,
};

pub fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Ablate(args) => ablate(args),
        Command::Sweep(args) => sweep(args),
        Command::Explain(args) => explain(args),
        Command::Convert(args) => convert(args),
    }
}

fn setup_from(
    schema_flag: &str,
    config: Option<&Path>,
    seed: Option<u64>,
    h1: Option<usize>,
    h2: Option<usize>,
) -> Result<Setup> {
    let schema: Schema = schema_flag.parse()?;
    build_setup(schema, config, FlagOverrides { seed, h1, h2 })
}

/// Name the offending file in bare I/O errors without changing their class.
fn with_path_context(err: Error, path: &Path) -> Error {
    match err {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    }
}

fn load_claims(path: &Path, schema: Schema) -> Result<Vec<LabeledClaim>> {
    let (claims, _) = load_corpus(path, schema).map_err(|e| with_path_context(e, path))?;
    if claims.is_empty() {
        return Err(Error::DegenerateInput(format!(
            "no usable claims in {}",
            path.display()
        )));
    }
    Ok(claims)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| with_path_context(e, path))
}

fn load_embeddings(path: Option<&Path>, dim: usize) -> Result<Option<EmbeddingSource>> {
    path.map(|p| EmbeddingSource::load(p, dim).map_err(|e| with_path_context(e, p)))
        .transpose()
}

// ---------------------------------------------------------------- train

fn train(args: &TrainArgs) -> Result<()> {
    let setup = setup_from(
        &args.schema,
        args.config.as_deref(),
        args.seed,
        args.h1,
        args.h2,
    )?;
    let started = unix_now();
    let claims = load_claims(&args.corpus, setup.schema)?;
    let pretrained = load_embeddings(args.embeddings.as_deref(), setup.config.embed_dim)?;
    let outcome = run_cv(&claims, &setup.config, &setup.settings, pretrained.as_ref())?;
    let outputs = write_train_outputs(&args.out, setup.schema, &outcome, setup.settings.seed)?;
    finish_manifest(
        ManifestInputs {
            command: "train",
            corpus: &args.corpus,
            schema: setup.schema,
            config: &setup.config,
            settings: &setup.settings,
            started_unix: started,
        },
        outputs,
        &args.out,
    )?;
    let agg = &outcome.aggregate;
    println!(
        "trained {} folds on {} claims: mean AUC {:.5} (sd {:.5}), mean macro F1 {:.5} (sd {:.5})",
        agg.folds,
        claims.len(),
        agg.mean_auc,
        agg.std_auc,
        agg.mean_f1_macro,
        agg.std_f1_macro
    );
    println!("artifacts written to {}", args.out.display());
    Ok(())
}

// ----------------------------------------------------------------- eval

#[derive(Serialize)]
struct EvalFile {
    schema: String,
    corpus_sha256: String,
    claims: usize,
    threshold: f64,
    report: EvalReport,
}

fn eval(args: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let claims = load_claims(&args.corpus, ck.schema)?;
    let params = ck.materialize()?;
    let ctx = EncodeContext {
        vocab: &ck.vocab,
        speakers: ck.speakers.as_ref(),
        publishers: ck.publishers.as_ref(),
        claim_len: ck.config.claim_len,
        doc_len: ck.config.doc_len,
        max_docs: ck.config.max_docs,
    };
    let mut scores = Vec::with_capacity(claims.len());
    let mut labels = Vec::with_capacity(claims.len());
    for claim in &claims {
        let inst = encode_instance(claim, &ctx)?;
        scores.push(predict(&params, &ck.config, &inst, false)?.y_hat);
        labels.push(claim.label);
    }
    let report = evaluate(&scores, &labels, DEFAULT_THRESHOLD)?;
    write_json(
        &args.out,
        &EvalFile {
            schema: ck.schema.to_string(),
            corpus_sha256: crate::outputs::sha256_hex(&args.corpus)?,
            claims: claims.len(),
            threshold: DEFAULT_THRESHOLD,
            report,
        },
    )?;
    println!(
        "evaluated {} claims: AUC {:.5}, macro F1 {:.5}, micro F1 {:.5}",
        claims.len(),
        report.auc,
        report.f1_macro,
        report.f1_micro
    );
    Ok(())
}

// --------------------------------------------------------------- ablate

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AblateMode {
    Full,
    WordOnly,
    EvidenceOnly,
}

impl AblateMode {
    fn parse(s: &str) -> Result<AblateMode> {
        match s {
            "full" => Ok(AblateMode::Full),
            "word_only" => Ok(AblateMode::WordOnly),
            "evidence_only" => Ok(AblateMode::EvidenceOnly),
            other => Err(Error::Config(format!(
                "unknown ablation mode '{other}' (expected full, word_only, or evidence_only)"
            ))),
        }
    }

    fn label(self) -> &'static str {
        match self {
            AblateMode::Full => "full",
            AblateMode::WordOnly => "word_only",
            AblateMode::EvidenceOnly => "evidence_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct FeatureSet {
    publishers: bool,
    speakers: bool,
}

impl FeatureSet {
    fn parse(s: &str) -> Result<FeatureSet> {
        match s {
            "text" => Ok(FeatureSet {
                publishers: false,
                speakers: false,
            }),
            "text+pub" => Ok(FeatureSet {
                publishers: true,
                speakers: false,
            }),
            "text+spk" => Ok(FeatureSet {
                publishers: false,
                speakers: true,
            }),
            "text+pub+spk" => Ok(FeatureSet {
                publishers: true,
                speakers: true,
            }),
            other => Err(Error::Config(format!(
                "unknown feature set '{other}' (expected text, text+pub, text+spk, or text+pub+spk)"
            ))),
        }
    }

    fn label(self) -> &'static str {
        match (self.publishers, self.speakers) {
            (false, false) => "text",
            (true, false) => "text+pub",
            (false, true) => "text+spk",
            (true, true) => "text+pub+spk",
        }
    }
}

fn parse_variant_list<T: Copy + PartialEq>(
    raw: &str,
    parse: impl Fn(&str) -> Result<T>,
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let value = parse(part)?;
        if !out.contains(&value) {
            out.push(value);
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("empty variant list '{raw}'")));
    }
    Ok(out)
}

#[derive(Serialize)]
struct VariantResult {
    mode: String,
    features: String,
    aggregate: mac::training::AggregateReport,
    per_fold_auc: Vec<f64>,
    per_fold_f1_macro: Vec<f64>,
}

#[derive(Serialize)]
struct Comparison {
    candidate: String,
    baseline: String,
    metric: String,
    /// One-sided signed-rank p-value for candidate > baseline over paired
    /// folds; null when the test is undefined (for example, identical
    /// per-fold scores).
    p_value: Option<f64>,
}

#[derive(Serialize)]
struct AblateFile {
    schema: String,
    variants: Vec<VariantResult>,
    comparisons: Vec<Comparison>,
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let setup = setup_from(
        &args.schema,
        args.config.as_deref(),
        args.seed,
        args.h1,
        args.h2,
    )?;
    let modes = parse_variant_list(&args.mode, AblateMode::parse)?;
    let features = match &args.features {
        Some(raw) => parse_variant_list(raw, FeatureSet::parse)?,
        None => vec![FeatureSet {
            publishers: true,
            speakers: setup.schema.has_speakers(),
        }],
    };
    for feat in &features {
        if feat.speakers && !setup.schema.has_speakers() {
            return Err(Error::Config(format!(
                "feature set '{}' needs speaker metadata, which schema {} does not have",
                feat.label(),
                setup.schema
            )));
        }
    }
    let started = unix_now();
    let claims = load_claims(&args.corpus, setup.schema)?;

    let mut variants = Vec::new();
    for &mode in &modes {
        for &feat in &features {
            let mut cfg = setup.config.clone();
            match mode {
                AblateMode::Full => {}
                AblateMode::WordOnly => cfg.doc_attention_mode = AttentionMode::MeanPool,
                AblateMode::EvidenceOnly => cfg.word_attention_mode = AttentionMode::MeanPool,
            }
            cfg.use_publishers = feat.publishers;
            cfg.use_speakers = feat.speakers;
            let outcome = run_cv(&claims, &cfg, &setup.settings, None)?;
            variants.push(VariantResult {
                mode: mode.label().to_string(),
                features: feat.label().to_string(),
                per_fold_auc: outcome.folds.iter().map(|f| f.report.auc).collect(),
                per_fold_f1_macro: outcome.folds.iter().map(|f| f.report.f1_macro).collect(),
                aggregate: outcome.aggregate,
            });
        }
    }

    let mut comparisons = Vec::new();
    for a in &variants {
        for b in &variants {
            if std::ptr::eq(a, b) {
                continue;
            }
            let pairs = [
                ("auc", &a.per_fold_auc, &b.per_fold_auc),
                ("f1_macro", &a.per_fold_f1_macro, &b.per_fold_f1_macro),
            ];
            for (metric, xa, xb) in pairs {
                comparisons.push(Comparison {
                    candidate: format!("{}/{}", a.mode, a.features),
                    baseline: format!("{}/{}", b.mode, b.features),
                    metric: metric.to_string(),
                    p_value: wilcoxon_one_sided(xa, xb).ok(),
                });
            }
        }
    }

    std::fs::create_dir_all(&args.out)?;
    write_json(
        &args.out.join("ablate_report.json"),
        &AblateFile {
            schema: setup.schema.to_string(),
            variants,
            comparisons,
        },
    )?;
    finish_manifest(
        ManifestInputs {
            command: "ablate",
            corpus: &args.corpus,
            schema: setup.schema,
            config: &setup.config,
            settings: &setup.settings,
            started_unix: started,
        },
        vec!["ablate_report.json".to_string()],
        &args.out,
    )?;

    let file = std::fs::read_to_string(args.out.join("ablate_report.json"))?;
    let parsed: serde_json::Value = serde_json::from_str(&file)?;
    println!("{:<16} {:<14} {:>9} {:>9}", "mode", "features", "mean_auc", "mean_f1");
    if let Some(rows) = parsed["variants"].as_array() {
        for row in rows {
            println!(
                "{:<16} {:<14} {:>9.5} {:>9.5}",
                row["mode"].as_str().unwrap_or("?"),
                row["features"].as_str().unwrap_or("?"),
                row["aggregate"]["mean_auc"].as_f64().unwrap_or(f64::NAN),
                row["aggregate"]["mean_f1_macro"].as_f64().unwrap_or(f64::NAN),
            );
        }
    }
    println!("full report in {}", args.out.join("ablate_report.json").display());
    Ok(())
}

// ---------------------------------------------------------------- sweep

fn parse_grid(raw: &str, name: &str) -> Result<Vec<usize>> {
    let mut grid = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let value: usize = part
            .parse()
            .map_err(|_| Error::Config(format!("{name}: '{part}' is not a head count")))?;
        if !(1..=5).contains(&value) {
            return Err(Error::Config(format!(
                "{name}: head count {value} is outside 1..=5"
            )));
        }
        if !grid.contains(&value) {
            grid.push(value);
        }
    }
    if grid.is_empty() {
        return Err(Error::Config(format!("{name}: empty grid '{raw}'")));
    }
    grid.sort_unstable();
    Ok(grid)
}

#[derive(Serialize)]
struct SweepCell {
    h1: usize,
    h2: usize,
    mean_auc: f64,
    std_auc: f64,
    mean_f1_macro: f64,
    per_fold_auc: Vec<f64>,
}

#[derive(Serialize)]
struct SweepFile {
    schema: String,
    cells: Vec<SweepCell>,
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let setup = setup_from(&args.schema, args.config.as_deref(), args.seed, None, None)?;
    let h1_grid = parse_grid(&args.h1_grid, "--h1-grid")?;
    let h2_grid = parse_grid(&args.h2_grid, "--h2-grid")?;
    let started = unix_now();
    let claims = load_claims(&args.corpus, setup.schema)?;

    let mut cells = Vec::new();
    for &h1 in &h1_grid {
        for &h2 in &h2_grid {
            let mut cfg = setup.config.clone();
            cfg.word_heads = h1;
            cfg.doc_heads = h2;
            let outcome = run_cv(&claims, &cfg, &setup.settings, None)?;
            cells.push(SweepCell {
                h1,
                h2,
                mean_auc: outcome.aggregate.mean_auc,
                std_auc: outcome.aggregate.std_auc,
                mean_f1_macro: outcome.aggregate.mean_f1_macro,
                per_fold_auc: outcome.folds.iter().map(|f| f.report.auc).collect(),
            });
        }
    }

    std::fs::create_dir_all(&args.out)?;
    let mut csv = String::from("h1,h2,mean_auc,std_auc\n");
    for cell in &cells {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            cell.h1, cell.h2, cell.mean_auc, cell.std_auc
        ));
    }
    std::fs::write(args.out.join("sweep.csv"), csv)?;
    let file = SweepFile {
        schema: setup.schema.to_string(),
        cells,
    };
    write_json(&args.out.join("sweep.json"), &file)?;
    finish_manifest(
        ManifestInputs {
            command: "sweep",
            corpus: &args.corpus,
            schema: setup.schema,
            config: &setup.config,
            settings: &setup.settings,
            started_unix: started,
        },
        vec!["sweep.json".to_string(), "sweep.csv".to_string()],
        &args.out,
    )?;

    let best = file
        .cells
        .iter()
        .max_by(|a, b| a.mean_auc.partial_cmp(&b.mean_auc).expect("finite AUC"))
        .expect("non-empty grid");
    println!(
        "swept {} cells; best mean AUC {:.5} at h1={} h2={}",
        file.cells.len(),
        best.mean_auc,
        best.h1,
        best.h2
    );
    println!("results in {}", args.out.display());
    Ok(())
}

// -------------------------------------------------------------- explain

#[derive(Serialize)]
struct TokenWeight {
    token: String,
    weight: f64,
}

#[derive(Serialize)]
struct ExplainDoc {
    position: usize,
    publisher: String,
    /// One `(token, weight)` list per word attention head, covering the
    /// real (unmasked) tokens; each list sums to 1.
    heads: Vec<Vec<TokenWeight>>,
}

#[derive(Serialize)]
struct Explanation {
    claim_id: String,
    label: u8,
    y_hat: f64,
    documents: Vec<ExplainDoc>,
    /// Document slots x document heads; masked slots are exact zeros and
    /// every head column sums to 1 over the real slots.
    doc_attention: Vec<Vec<f64>>,
}

fn explain(args: &ExplainArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let (claims, _) = load_corpus(&args.corpus, ck.schema)?;
    let claim = claims
        .iter()
        .find(|c| c.claim_id == args.claim_id)
        .ok_or_else(|| {
            Error::Evaluation(format!(
                "claim '{}' not found in {}",
                args.claim_id,
                args.corpus.display()
            ))
        })?;
    let params = ck.materialize()?;
    let ctx = EncodeContext {
        vocab: &ck.vocab,
        speakers: ck.speakers.as_ref(),
        publishers: ck.publishers.as_ref(),
        claim_len: ck.config.claim_len,
        doc_len: ck.config.doc_len,
        max_docs: ck.config.max_docs,
    };
    let inst = encode_instance(claim, &ctx)?;
    let pred = predict(&params, &ck.config, &inst, true)?;
    let trace = pred.trace.expect("trace requested");
    trace.check_columns(1e-9)?;

    let mut documents = Vec::new();
    for (position, doc) in claim.evidence.iter().take(ck.config.max_docs).enumerate() {
        let tokens: Vec<String> = tokenize(&doc.text)
            .into_iter()
            .take(ck.config.doc_len)
            .collect();
        let weights = &trace.word_weights[position];
        let head_count = weights.first().map_or(0, Vec::len);
        let heads = (0..head_count)
            .map(|head| {
                tokens
                    .iter()
                    .enumerate()
                    .map(|(t, token)| TokenWeight {
                        token: token.clone(),
                        weight: weights[t][head],
                    })
                    .collect()
            })
            .collect();
        documents.push(ExplainDoc {
            position,
            publisher: doc.publisher.clone(),
            heads,
        });
    }

    write_json(
        &args.out,
        &Explanation {
            claim_id: claim.claim_id.clone(),
            label: claim.label,
            y_hat: pred.y_hat,
            documents,
            doc_attention: trace.doc_weights.clone(),
        },
    )?;
    println!(
        "explained claim '{}': y_hat {:.5} over {} documents, written to {}",
        claim.claim_id,
        pred.y_hat,
        inst.docs.len(),
        args.out.display()
    );
    Ok(())
}

// -------------------------------------------------------------- convert

fn parse_tsv(text: &str, schema: Schema) -> Result<Vec<RawClaim>> {
    let expected = if schema.has_speakers() { 6 } else { 5 };
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, RawClaim> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != expected {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!(
                    "expected {expected} tab-separated fields for schema {schema}, found {}",
                    cols.len()
                ),
            });
        }
        let (id, label, speaker, claim_text, doc_text, publisher) = if schema.has_speakers() {
            (cols[0], cols[1], Some(cols[2]), cols[3], cols[4], cols[5])
        } else {
            (cols[0], cols[1], None, cols[2], cols[3], cols[4])
        };
        if id.trim().is_empty() {
            return Err(Error::Parse {
                line: idx + 1,
                message: "empty claim id".into(),
            });
        }
        let publisher = {
            let p = publisher.trim();
            if p.is_empty() {
                "unknown".to_string()
            } else {
                p.to_string()
            }
        };
        let claim = by_id.entry(id.to_string()).or_insert_with(|| {
            order.push(id.to_string());
            RawClaim {
                claim_id: id.to_string(),
                claim_text: claim_text.to_string(),
                speaker: speaker
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string),
                label: label.to_string(),
                evidence: Vec::new(),
            }
        });
        claim.evidence.push(RawDocument {
            text: doc_text.to_string(),
            publisher,
        });
    }
    Ok(order
        .into_iter()
        .map(|id| by_id.remove(&id).expect("grouped claim"))
        .collect())
}

fn parse_jsonl(text: &str) -> Result<Vec<RawClaim>> {
    let mut claims = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let claim: RawClaim = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        claims.push(claim);
    }
    Ok(claims)
}

fn convert(args: &ConvertArgs) -> Result<()> {
    let schema: Schema = args.schema.parse()?;
    let text = std::fs::read_to_string(&args.tsv_in)
        .map_err(|e| with_path_context(Error::Io(e), &args.tsv_in))?;
    let claims = if text.trim_start().starts_with('{') {
        parse_jsonl(&text)?
    } else {
        parse_tsv(&text, schema)?
    };
    if claims.is_empty() {
        return Err(Error::DegenerateInput(format!(
            "no records in {}",
            args.tsv_in.display()
        )));
    }
    let mut out = String::new();
    for claim in &claims {
        out.push_str(&serde_json::to_string(claim)?);
        out.push('\n');
    }
    std::fs::write(&args.jsonl_out, out)?;
    // Loading the result validates labels and structure and yields the
    // corpus summary for comparison against the dataset tables.
    let (_, stats) = load_corpus(&args.jsonl_out, schema)?;
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}
