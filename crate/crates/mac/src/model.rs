//! The full network: a claim and its evidence documents are encoded by two
//! BiLSTMs, combined through word-level and document-level multi-head
//! attention (optionally replaced by mean pooling for ablations), enriched
//! with speaker/publisher embeddings, and scored by a two-layer MLP with a
//! sigmoid output giving the probability that the claim is true.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    document_attention, extend_claim, extend_document, word_attention, AttentionTrace,
    MultiHeadAttentionParams,
};
use crate::data::{ClaimInstance, EmbeddingSource, Vocabulary, UNK_ID};
use crate::layers::{linear, BiLstm, EmbeddingTable};
use crate::tensor::{uniform_values, Tape, Tensor, PROB_CLAMP};
use crate::{Error, Result};

/// How a level of the hierarchy summarizes its items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    MultiHead,
    MeanPool,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<AttentionMode> {
        match s {
            "multi_head" => Ok(AttentionMode::MultiHead),
            "mean_pool" => Ok(AttentionMode::MeanPool),
            other => Err(Error::Config(format!("unknown attention mode '{other}'"))),
        }
    }
}

/// Nonlinearity between the two MLP layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerActivation {
    Tanh,
    Identity,
}

impl std::str::FromStr for InnerActivation {
    type Err = Error;
    fn from_str(s: &str) -> Result<InnerActivation> {
        match s {
            "tanh" => Ok(InnerActivation::Tanh),
            "identity" => Ok(InnerActivation::Identity),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Every knob of the architecture and input geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacConfig {
    /// LSTM hidden width H; BiLSTM states are 2H wide.
    pub hidden: usize,
    /// Word embedding width D.
    pub embed_dim: usize,
    /// Speaker embedding width D1.
    pub speaker_dim: usize,
    /// Publisher embedding width D2.
    pub publisher_dim: usize,
    /// Word-attention heads h1.
    pub word_heads: usize,
    /// Document-attention heads h2.
    pub doc_heads: usize,
    /// Word-attention projection width a1 (2H by default).
    pub word_attn_dim: usize,
    /// Document-attention projection width a2 (2H by default).
    pub doc_attn_dim: usize,
    /// Claim length n after truncation/padding.
    pub claim_len: usize,
    /// Document length m after truncation/padding.
    pub doc_len: usize,
    /// Document-slot count k per claim.
    pub max_docs: usize,
    pub use_speakers: bool,
    pub use_publishers: bool,
    pub word_attention_mode: AttentionMode,
    pub doc_attention_mode: AttentionMode,
    /// Width of the MLP hidden layer (2H by default).
    pub mlp_hidden: usize,
    pub mlp_inner: InnerActivation,
    pub vocab_size: usize,
    pub speaker_count: usize,
    pub publisher_count: usize,
}

impl MacConfig {
    /// Reference defaults: n=30, m=100, k=30, H=300, GloVe-width embeddings,
    /// D1=D2=128, attention widths 2H, MLP hidden 2H with tanh.
    pub fn base() -> MacConfig {
        MacConfig {
            hidden: 300,
            embed_dim: 300,
            speaker_dim: 128,
            publisher_dim: 128,
            word_heads: 1,
            doc_heads: 1,
            word_attn_dim: 600,
            doc_attn_dim: 600,
            claim_len: 30,
            doc_len: 100,
            max_docs: 30,
            use_speakers: false,
            use_publishers: true,
            word_attention_mode: AttentionMode::MultiHead,
            doc_attention_mode: AttentionMode::MultiHead,
            mlp_hidden: 600,
            mlp_inner: InnerActivation::Tanh,
            vocab_size: 2,
            speaker_count: 2,
            publisher_count: 2,
        }
    }

    /// Best reported head counts and channels per dataset.
    pub fn for_schema(schema: crate::data::Schema) -> MacConfig {
        let mut cfg = MacConfig::base();
        match schema {
            crate::data::Schema::Snopes => {
                cfg.word_heads = 5;
                cfg.doc_heads = 2;
                cfg.use_speakers = false;
            }
            crate::data::Schema::Politifact => {
                cfg.word_heads = 3;
                cfg.doc_heads = 1;
                cfg.use_speakers = true;
            }
        }
        cfg
    }

    /// Extended claim width x.
    pub fn claim_ext_width(&self) -> usize {
        2 * self.hidden + if self.use_speakers { self.speaker_dim } else { 0 }
    }

    /// Width of one document summary before publisher extension.
    pub fn doc_summary_width(&self) -> usize {
        match self.word_attention_mode {
            AttentionMode::MultiHead => self.word_heads * 2 * self.hidden,
            AttentionMode::MeanPool => 2 * self.hidden,
        }
    }

    /// Extended document width y.
    pub fn doc_ext_width(&self) -> usize {
        self.doc_summary_width() + if self.use_publishers { self.publisher_dim } else { 0 }
    }

    /// Width of the attended evidence summary.
    pub fn evidence_width(&self) -> usize {
        match self.doc_attention_mode {
            AttentionMode::MultiHead => self.doc_heads * self.doc_ext_width(),
            AttentionMode::MeanPool => self.doc_ext_width(),
        }
    }

    /// Width of the MLP input `[claim_ext ; evidence]`.
    pub fn mlp_input_width(&self) -> usize {
        self.claim_ext_width() + self.evidence_width()
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 10] = [
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("word_heads", self.word_heads),
            ("doc_heads", self.doc_heads),
            ("word_attn_dim", self.word_attn_dim),
            ("doc_attn_dim", self.doc_attn_dim),
            ("claim_len", self.claim_len),
            ("doc_len", self.doc_len),
            ("max_docs", self.max_docs),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(
                "vocabulary needs at least PAD and UNK".into(),
            ));
        }
        if self.use_speakers && (self.speaker_count < 2 || self.speaker_dim == 0) {
            return Err(Error::Config("speaker channel enabled without a table".into()));
        }
        if self.use_publishers && (self.publisher_count < 2 || self.publisher_dim == 0) {
            return Err(Error::Config(
                "publisher channel enabled without a table".into(),
            ));
        }
        Ok(())
    }

    /// Copy with per-fold table sizes filled in.
    pub fn with_tables(
        &self,
        vocab_size: usize,
        speaker_count: usize,
        publisher_count: usize,
    ) -> MacConfig {
        let mut cfg = self.clone();
        cfg.vocab_size = vocab_size;
        cfg.speaker_count = speaker_count;
        cfg.publisher_count = publisher_count;
        cfg
    }
}

/// All trainable state. Optional parts exist exactly when the
/// configuration enables them.
pub struct MacParams {
    pub word_table: EmbeddingTable,
    pub speaker_table: Option<EmbeddingTable>,
    pub publisher_table: Option<EmbeddingTable>,
    pub claim_encoder: BiLstm,
    pub doc_encoder: BiLstm,
    pub word_attn: Option<MultiHeadAttentionParams>,
    pub doc_attn: Option<MultiHeadAttentionParams>,
    pub mlp_w5: Tensor,
    pub mlp_b5: Tensor,
    pub mlp_w6: Tensor,
    pub mlp_b6: Tensor,
}

/// Deterministic initialization: the random stream is consumed in the
/// fixed order of [`MacParams::named_tensors`]. Word vectors come from the
/// embedding source where available and uniform `[-0.1, 0.1]` otherwise;
/// speaker/publisher tables are uniform `[-0.2, 0.2]`.
pub fn init_params(
    cfg: &MacConfig,
    seed: u64,
    vocab: &Vocabulary,
    pretrained: Option<&EmbeddingSource>,
) -> Result<MacParams> {
    cfg.validate()?;
    if vocab.size() != cfg.vocab_size {
        return Err(Error::Config(format!(
            "config says {} vocabulary ids but the vocabulary has {}",
            cfg.vocab_size,
            vocab.size()
        )));
    }
    if let Some(src) = pretrained {
        if src.dim != cfg.embed_dim {
            return Err(Error::Config(format!(
                "pre-trained vectors are {}-dimensional, config wants {}",
                src.dim, cfg.embed_dim
            )));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d = cfg.embed_dim;
    let mut word_values = vec![0.0; cfg.vocab_size * d];
    for id in 1..cfg.vocab_size {
        let row = pretrained
            .and_then(|src| {
                if id == UNK_ID {
                    None
                } else {
                    src.get(vocab.token(id)).map(<[f64]>::to_vec)
                }
            })
            .unwrap_or_else(|| uniform_values(&mut rng, d, 0.1));
        word_values[id * d..(id + 1) * d].copy_from_slice(&row);
    }
    let word_table = EmbeddingTable::from_values(cfg.vocab_size, d, word_values, true);
    let speaker_table = cfg
        .use_speakers
        .then(|| EmbeddingTable::init(&mut rng, cfg.speaker_count, cfg.speaker_dim, 0.2, true));
    let publisher_table = cfg.use_publishers.then(|| {
        EmbeddingTable::init(&mut rng, cfg.publisher_count, cfg.publisher_dim, 0.2, true)
    });
    let claim_encoder = BiLstm::init(&mut rng, d, cfg.hidden);
    let doc_encoder = BiLstm::init(&mut rng, d, cfg.hidden);
    let word_attn = match cfg.word_attention_mode {
        AttentionMode::MultiHead => Some(MultiHeadAttentionParams::init(
            &mut rng,
            4 * cfg.hidden,
            cfg.word_attn_dim,
            cfg.word_heads,
        )),
        AttentionMode::MeanPool => None,
    };
    let doc_attn = match cfg.doc_attention_mode {
        AttentionMode::MultiHead => Some(MultiHeadAttentionParams::init(
            &mut rng,
            cfg.claim_ext_width() + cfg.doc_ext_width(),
            cfg.doc_attn_dim,
            cfg.doc_heads,
        )),
        AttentionMode::MeanPool => None,
    };
    let mlp_in = cfg.mlp_input_width();
    let wb = 1.0 / (mlp_in as f64).sqrt();
    let mlp_w5 = Tensor::param(
        mlp_in,
        cfg.mlp_hidden,
        uniform_values(&mut rng, mlp_in * cfg.mlp_hidden, wb),
    );
    let mlp_b5 = Tensor::param(1, cfg.mlp_hidden, vec![0.0; cfg.mlp_hidden]);
    let hb = 1.0 / (cfg.mlp_hidden as f64).sqrt();
    let mlp_w6 = Tensor::param(
        cfg.mlp_hidden,
        1,
        uniform_values(&mut rng, cfg.mlp_hidden, hb),
    );
    let mlp_b6 = Tensor::param(1, 1, vec![0.0]);
    Ok(MacParams {
        word_table,
        speaker_table,
        publisher_table,
        claim_encoder,
        doc_encoder,
        word_attn,
        doc_attn,
        mlp_w5,
        mlp_b5,
        mlp_w6,
        mlp_b6,
    })
}

impl MacParams {
    /// Every trainable tensor with a stable name, in the canonical order
    /// used for checkpoint blobs and optimizer state.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("word_table".into(), &self.word_table.table));
        if let Some(t) = &self.speaker_table {
            out.push(("speaker_table".into(), &t.table));
        }
        if let Some(t) = &self.publisher_table {
            out.push(("publisher_table".into(), &t.table));
        }
        let cells = [
            ("claim_fwd", &self.claim_encoder.forward_cell),
            ("claim_bwd", &self.claim_encoder.backward_cell),
            ("doc_fwd", &self.doc_encoder.forward_cell),
            ("doc_bwd", &self.doc_encoder.backward_cell),
        ];
        let gate_names = [
            "w_i", "u_i", "b_i", "w_f", "u_f", "b_f", "w_g", "u_g", "b_g", "w_o", "u_o", "b_o",
        ];
        for (prefix, cell) in cells {
            for (name, tensor) in gate_names.iter().zip(cell.tensors()) {
                out.push((format!("{prefix}.{name}"), tensor));
            }
        }
        if let Some(a) = &self.word_attn {
            out.push(("word_attn.proj".into(), &a.proj));
            out.push(("word_attn.heads".into(), &a.heads));
        }
        if let Some(a) = &self.doc_attn {
            out.push(("doc_attn.proj".into(), &a.proj));
            out.push(("doc_attn.heads".into(), &a.heads));
        }
        out.push(("mlp.w5".into(), &self.mlp_w5));
        out.push(("mlp.b5".into(), &self.mlp_b5));
        out.push(("mlp.w6".into(), &self.mlp_w6));
        out.push(("mlp.b6".into(), &self.mlp_b6));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Zero every accumulated gradient.
    pub fn zero_grads(&self) {
        for t in self.tensors() {
            t.zero_grad();
        }
    }

    /// Drop gradients on PAD rows so those rows never move.
    pub fn discard_pad_gradients(&self) {
        self.word_table.discard_pad_gradient();
        if let Some(t) = &self.speaker_table {
            t.discard_pad_gradient();
        }
        if let Some(t) = &self.publisher_table {
            t.discard_pad_gradient();
        }
    }

    /// Re-zero PAD rows after an optimizer step.
    pub fn reset_pad_rows(&self) {
        self.word_table.reset_pad_row();
        if let Some(t) = &self.speaker_table {
            t.reset_pad_row();
        }
        if let Some(t) = &self.publisher_table {
            t.reset_pad_row();
        }
    }

    /// Structural copy with freshly allocated tensors (zeroed gradients).
    pub fn deep_clone(&self) -> MacParams {
        let clone_table = |t: &EmbeddingTable| EmbeddingTable {
            table: t.table.deep_clone(),
            trainable: t.trainable,
        };
        let clone_cell = |c: &crate::layers::LstmParams| crate::layers::LstmParams {
            w_i: c.w_i.deep_clone(),
            u_i: c.u_i.deep_clone(),
            b_i: c.b_i.deep_clone(),
            w_f: c.w_f.deep_clone(),
            u_f: c.u_f.deep_clone(),
            b_f: c.b_f.deep_clone(),
            w_g: c.w_g.deep_clone(),
            u_g: c.u_g.deep_clone(),
            b_g: c.b_g.deep_clone(),
            w_o: c.w_o.deep_clone(),
            u_o: c.u_o.deep_clone(),
            b_o: c.b_o.deep_clone(),
        };
        let clone_attn = |a: &MultiHeadAttentionParams| MultiHeadAttentionParams {
            proj: a.proj.deep_clone(),
            heads: a.heads.deep_clone(),
        };
        MacParams {
            word_table: clone_table(&self.word_table),
            speaker_table: self.speaker_table.as_ref().map(clone_table),
            publisher_table: self.publisher_table.as_ref().map(clone_table),
            claim_encoder: BiLstm {
                forward_cell: clone_cell(&self.claim_encoder.forward_cell),
                backward_cell: clone_cell(&self.claim_encoder.backward_cell),
            },
            doc_encoder: BiLstm {
                forward_cell: clone_cell(&self.doc_encoder.forward_cell),
                backward_cell: clone_cell(&self.doc_encoder.backward_cell),
            },
            word_attn: self.word_attn.as_ref().map(clone_attn),
            doc_attn: self.doc_attn.as_ref().map(clone_attn),
            mlp_w5: self.mlp_w5.deep_clone(),
            mlp_b5: self.mlp_b5.deep_clone(),
            mlp_w6: self.mlp_w6.deep_clone(),
            mlp_b6: self.mlp_b6.deep_clone(),
        }
    }

    /// Overwrite every tensor's values from `other` (same architecture).
    pub fn copy_values_from(&self, other: &MacParams) {
        let mine = self.tensors();
        let theirs = other.tensors();
        assert_eq!(mine.len(), theirs.len(), "parameter sets differ");
        for (dst, src) in mine.iter().zip(theirs.iter()) {
            dst.set_values(&src.values());
        }
    }

    /// Values of every tensor in canonical order (checkpoints, best-epoch
    /// snapshots).
    pub fn snapshot_values(&self) -> Vec<Vec<f64>> {
        self.tensors().iter().map(|t| t.values()).collect()
    }

    /// Restore a snapshot taken by [`MacParams::snapshot_values`].
    pub fn load_values(&self, values: &[Vec<f64>]) -> Result<()> {
        let tensors = self.tensors();
        if tensors.len() != values.len() {
            return Err(Error::Contract(format!(
                "snapshot holds {} tensors, parameters have {}",
                values.len(),
                tensors.len()
            )));
        }
        for (t, vals) in tensors.iter().zip(values) {
            if t.len() != vals.len() {
                return Err(Error::Contract(format!(
                    "snapshot tensor of {} values loaded into shape {}x{}",
                    vals.len(),
                    t.rows(),
                    t.cols()
                )));
            }
            t.set_values(vals);
        }
        Ok(())
    }
}

/// Total trainable scalar count implied by a configuration.
pub fn param_count(cfg: &MacConfig) -> usize {
    let h = cfg.hidden;
    let d = cfg.embed_dim;
    let lstm = |input: usize| 4 * (input * h + h * h + h);
    let mut total = cfg.vocab_size * d;
    if cfg.use_speakers {
        total += cfg.speaker_count * cfg.speaker_dim;
    }
    if cfg.use_publishers {
        total += cfg.publisher_count * cfg.publisher_dim;
    }
    total += 4 * lstm(d);
    if cfg.word_attention_mode == AttentionMode::MultiHead {
        total += 4 * h * cfg.word_attn_dim + cfg.word_attn_dim * cfg.word_heads;
    }
    if cfg.doc_attention_mode == AttentionMode::MultiHead {
        total += (cfg.claim_ext_width() + cfg.doc_ext_width()) * cfg.doc_attn_dim
            + cfg.doc_attn_dim * cfg.doc_heads;
    }
    total += cfg.mlp_input_width() * cfg.mlp_hidden + cfg.mlp_hidden;
    total += cfg.mlp_hidden + 1;
    total
}

/// Output of one forward pass, still attached to the tape.
pub struct ForwardOutput {
    /// 1x1 probability tensor.
    pub prob: Tensor,
    pub trace: Option<AttentionTrace>,
}

/// A detached prediction.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Probability that the claim is true, clamped inside (0, 1).
    pub y_hat: f64,
    pub trace: Option<AttentionTrace>,
}

fn check_instance(cfg: &MacConfig, inst: &ClaimInstance) -> Result<()> {
    if inst.claim_ids.len() != cfg.claim_len || inst.claim_mask.len() != cfg.claim_len {
        return Err(Error::Contract(format!(
            "claim {} encoded for length {}, config wants {}",
            inst.claim_key,
            inst.claim_ids.len(),
            cfg.claim_len
        )));
    }
    if inst.doc_mask.len() != cfg.max_docs || inst.docs.len() > cfg.max_docs {
        return Err(Error::Contract(format!(
            "claim {} encoded for {} document slots, config wants {}",
            inst.claim_key,
            inst.doc_mask.len(),
            cfg.max_docs
        )));
    }
    if inst.docs.is_empty() {
        return Err(Error::DegenerateInput(format!(
            "claim {} has no evidence documents",
            inst.claim_key
        )));
    }
    for doc in &inst.docs {
        if doc.ids.len() != cfg.doc_len || doc.mask.len() != cfg.doc_len {
            return Err(Error::Contract(format!(
                "claim {} has a document encoded for length {}, config wants {}",
                inst.claim_key,
                doc.ids.len(),
                cfg.doc_len
            )));
        }
    }
    if cfg.use_speakers != inst.speaker_id.is_some() {
        return Err(Error::Contract(format!(
            "claim {} speaker channel does not match the configuration",
            inst.claim_key
        )));
    }
    Ok(())
}

fn uniform_trace_weights(mask: &[bool]) -> Vec<Vec<f64>> {
    let count = mask.iter().filter(|&&m| m).count().max(1);
    mask.iter()
        .map(|&m| vec![if m { 1.0 / count as f64 } else { 0.0 }])
        .collect()
}

fn weights_to_rows(weights: &Tensor) -> Vec<Vec<f64>> {
    (0..weights.rows()).map(|i| weights.row_vec(i)).collect()
}

/// Run the network over one instance on the given tape.
pub fn forward(
    tape: &Tape,
    params: &MacParams,
    cfg: &MacConfig,
    inst: &ClaimInstance,
    want_trace: bool,
) -> Result<ForwardOutput> {
    check_instance(cfg, inst)?;
    let mut trace = want_trace.then(AttentionTrace::default);

    // Claim: embed, encode, pool over real tokens.
    let claim_emb = params.word_table.embed(tape, &inst.claim_ids)?;
    let claim_states = params
        .claim_encoder
        .encode(tape, &claim_emb, &inst.claim_mask)?;
    let claim_vec = tape.mean_rows(&claim_states, Some(&inst.claim_mask))?;

    // Each real document: embed, encode, summarize words, extend.
    let mut doc_rows = Vec::with_capacity(cfg.max_docs);
    for doc in &inst.docs {
        let emb = params.word_table.embed(tape, &doc.ids)?;
        let states = params.doc_encoder.encode(tape, &emb, &doc.mask)?;
        let summary = match (&cfg.word_attention_mode, &params.word_attn) {
            (AttentionMode::MultiHead, Some(attn)) => {
                let (d_i, weights) = word_attention(tape, &states, &claim_vec, attn, &doc.mask)?;
                if let Some(t) = trace.as_mut() {
                    t.word_weights.push(weights_to_rows(&weights));
                }
                d_i
            }
            (AttentionMode::MeanPool, None) => {
                if let Some(t) = trace.as_mut() {
                    t.word_weights.push(uniform_trace_weights(&doc.mask));
                }
                tape.mean_rows(&states, Some(&doc.mask))?
            }
            _ => {
                return Err(Error::Contract(
                    "word attention parameters do not match the configured mode".into(),
                ))
            }
        };
        let publisher_emb = match (&params.publisher_table, cfg.use_publishers) {
            (Some(table), true) => Some(table.embed(tape, &[doc.publisher_id])?),
            (None, false) => None,
            _ => {
                return Err(Error::Contract(
                    "publisher table does not match the configuration".into(),
                ))
            }
        };
        doc_rows.push(extend_document(tape, &summary, publisher_emb.as_ref())?);
    }

    // Stack into the k x y evidence matrix, zero rows in empty slots.
    let zero_row = Tensor::zeros(1, cfg.doc_ext_width());
    while doc_rows.len() < cfg.max_docs {
        doc_rows.push(zero_row.clone());
    }
    let doc_matrix = tape.stack_rows(&doc_rows)?;

    // Extend the claim with the speaker embedding.
    let speaker_emb = match (&params.speaker_table, inst.speaker_id) {
        (Some(table), Some(id)) => Some(table.embed(tape, &[id])?),
        (None, None) => None,
        _ => {
            return Err(Error::Contract(
                "speaker table does not match the configuration".into(),
            ))
        }
    };
    let claim_ext = extend_claim(tape, &claim_vec, speaker_emb.as_ref())?;

    // Summarize the evidence set.
    let evidence = match (&cfg.doc_attention_mode, &params.doc_attn) {
        (AttentionMode::MultiHead, Some(attn)) => {
            let (rich, weights) =
                document_attention(tape, &doc_matrix, &claim_ext, attn, &inst.doc_mask)?;
            if let Some(t) = trace.as_mut() {
                t.doc_weights = weights_to_rows(&weights);
            }
            rich
        }
        (AttentionMode::MeanPool, None) => {
            if let Some(t) = trace.as_mut() {
                t.doc_weights = uniform_trace_weights(&inst.doc_mask);
            }
            tape.mean_rows(&doc_matrix, Some(&inst.doc_mask))?
        }
        _ => {
            return Err(Error::Contract(
                "document attention parameters do not match the configured mode".into(),
            ))
        }
    };

    // Score.
    let joined = tape.concat_cols(&claim_ext, &evidence)?;
    let hidden = linear(tape, &joined, &params.mlp_w5, Some(&params.mlp_b5))?;
    let activated = match cfg.mlp_inner {
        InnerActivation::Tanh => tape.tanh(&hidden)?,
        InnerActivation::Identity => hidden,
    };
    let logit = linear(tape, &activated, &params.mlp_w6, Some(&params.mlp_b6))?;
    let prob = tape.sigmoid(&logit)?;
    Ok(ForwardOutput { prob, trace })
}

/// Cross-entropy against a 0/1 label.
pub fn loss(tape: &Tape, prob: &Tensor, label: u8) -> Result<Tensor> {
    tape.bce(prob, label as f64)
}

/// Mean cross-entropy of a batch on one tape.
pub fn batch_loss(
    tape: &Tape,
    params: &MacParams,
    cfg: &MacConfig,
    insts: &[&ClaimInstance],
) -> Result<Tensor> {
    if insts.is_empty() {
        return Err(Error::Contract("batch loss of an empty batch".into()));
    }
    let mut total: Option<Tensor> = None;
    for inst in insts {
        let out = forward(tape, params, cfg, inst, false)?;
        let l = loss(tape, &out.prob, inst.label)?;
        total = Some(match total {
            Some(t) => tape.add(&t, &l)?,
            None => l,
        });
    }
    tape.scale(&total.expect("non-empty batch"), 1.0 / insts.len() as f64)
}

/// Forward on a private tape, detached into plain numbers.
pub fn predict(
    params: &MacParams,
    cfg: &MacConfig,
    inst: &ClaimInstance,
    want_trace: bool,
) -> Result<Prediction> {
    let tape = Tape::new();
    let out = forward(&tape, params, cfg, inst, want_trace)?;
    let raw = out.prob.item();
    if !raw.is_finite() {
        return Err(Error::Evaluation(format!(
            "non-finite probability for claim {}",
            inst.claim_key
        )));
    }
    Ok(Prediction {
        y_hat: raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP),
        trace: out.trace,
    })
}

/// Order-preserving per-instance prediction.
pub fn predict_batch(
    params: &MacParams,
    cfg: &MacConfig,
    insts: &[ClaimInstance],
) -> Result<Vec<Prediction>> {
    insts
        .iter()
        .map(|inst| predict(params, cfg, inst, false))
        .collect()
}
