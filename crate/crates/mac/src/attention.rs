//! Multi-head additive attention, applied twice: over the words of each
//! evidence document (conditioned on the claim) and over the documents of
//! the evidence set (conditioned on the speaker-extended claim).
//!
//! One head is one column of the head-weight matrix; each head produces an
//! independent softmax distribution over items, and the attended outputs of
//! all heads are flattened side by side.

use rand::Rng;
use serde::Serialize;

use crate::tensor::{uniform_values, Tape, Tensor};
use crate::{Error, Result};

/// Bias-free additive attention parameters: a projection `in_dim x a`
/// followed by a head matrix `a x h`.
pub struct MultiHeadAttentionParams {
    pub proj: Tensor,
    pub heads: Tensor,
}

impl MultiHeadAttentionParams {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per matrix.
    pub fn init<R: Rng>(rng: &mut R, in_dim: usize, attn_dim: usize, heads: usize) -> Self {
        let pb = 1.0 / (in_dim as f64).sqrt();
        let hb = 1.0 / (attn_dim as f64).sqrt();
        MultiHeadAttentionParams {
            proj: Tensor::param(in_dim, attn_dim, uniform_values(rng, in_dim * attn_dim, pb)),
            heads: Tensor::param(attn_dim, heads, uniform_values(rng, attn_dim * heads, hb)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.proj.rows()
    }

    pub fn head_count(&self) -> usize {
        self.heads.cols()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.proj, &self.heads]
    }
}

/// Attend over `items` (r x w) conditioned on a `context` row (1 x u):
/// the context is replicated beside every item, scores are
/// `tanh([items;C] * proj) * heads`, and each head's column is soft-maxed
/// over unmasked items. Returns the flattened attended matrix
/// (1 x h*w, head blocks in order) and the weights (r x h).
pub fn multi_head_attend(
    tape: &Tape,
    items: &Tensor,
    context: &Tensor,
    params: &MultiHeadAttentionParams,
    mask: Option<&[bool]>,
) -> Result<(Tensor, Tensor)> {
    let (r, w) = items.shape();
    let (cr, u) = context.shape();
    if cr != 1 {
        return Err(Error::Contract(format!(
            "attention context must be a single row, got {}",
            context.shape_string()
        )));
    }
    if params.in_dim() != w + u {
        return Err(Error::shape(
            "attention projection",
            format!("{}x{}", w + u, params.proj.cols()),
            params.proj.shape_string(),
        ));
    }
    let replicated = tape.stack_rows(&vec![context.clone(); r])?;
    let joined = tape.concat_cols(items, &replicated)?;
    let hidden = tape.tanh(&tape.matmul(&joined, &params.proj)?)?;
    let scores = tape.matmul(&hidden, &params.heads)?;
    let weights = tape.softmax_columns(&scores, mask)?;
    let attended = tape.flatten(&tape.matmul(&tape.transpose(&weights)?, items)?)?;
    Ok((attended, weights))
}

/// Word-level attention inside one evidence document: items are the
/// document's BiLSTM states, the context is the pooled claim vector.
pub fn word_attention(
    tape: &Tape,
    doc_states: &Tensor,
    claim_vec: &Tensor,
    params: &MultiHeadAttentionParams,
    word_mask: &[bool],
) -> Result<(Tensor, Tensor)> {
    multi_head_attend(tape, doc_states, claim_vec, params, Some(word_mask))
}

/// Claim vector extended with the speaker embedding when that channel is
/// enabled; identity otherwise.
pub fn extend_claim(
    tape: &Tape,
    claim_vec: &Tensor,
    speaker_emb: Option<&Tensor>,
) -> Result<Tensor> {
    match speaker_emb {
        Some(s) => tape.concat_cols(claim_vec, s),
        None => Ok(claim_vec.clone()),
    }
}

/// Document summary extended with the publisher embedding when enabled.
pub fn extend_document(
    tape: &Tape,
    doc_vec: &Tensor,
    publisher_emb: Option<&Tensor>,
) -> Result<Tensor> {
    match publisher_emb {
        Some(p) => tape.concat_cols(doc_vec, p),
        None => Ok(doc_vec.clone()),
    }
}

/// Document-level attention over the stacked extended document vectors,
/// conditioned on the extended claim.
pub fn document_attention(
    tape: &Tape,
    doc_matrix: &Tensor,
    claim_ext: &Tensor,
    params: &MultiHeadAttentionParams,
    doc_mask: &[bool],
) -> Result<(Tensor, Tensor)> {
    multi_head_attend(tape, doc_matrix, claim_ext, params, Some(doc_mask))
}

/// Attention weights captured during a forward pass, aligned with token
/// strings and document identifiers for export. Tokens and identifiers are
/// filled in by the caller that knows the vocabulary.
#[derive(Debug, Clone, Default, Serialize)]
pub struct AttentionTrace {
    /// Per real document: rows = real tokens, cols = word heads.
    pub word_weights: Vec<Vec<Vec<f64>>>,
    /// Rows = real documents, cols = document heads.
    pub doc_weights: Vec<Vec<f64>>,
    /// Per real document: its real token strings.
    pub tokens: Vec<Vec<String>>,
    /// One identifier per real document.
    pub doc_keys: Vec<String>,
}

impl AttentionTrace {
    /// Every stored weight column must sum to 1 within `tol`.
    pub fn check_columns(&self, tol: f64) -> Result<()> {
        let check = |rows: &[Vec<f64>], what: &str| -> Result<()> {
            if rows.is_empty() {
                return Ok(());
            }
            let heads = rows[0].len();
            for h in 0..heads {
                let sum: f64 = rows.iter().map(|r| r[h]).sum();
                if (sum - 1.0).abs() > tol {
                    return Err(Error::Evaluation(format!(
                        "{what} head {h} weights sum to {sum}, expected 1"
                    )));
                }
            }
            Ok(())
        };
        for (d, doc) in self.word_weights.iter().enumerate() {
            check(doc, &format!("document {d} word"))?;
        }
        check(&self.doc_weights, "document")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, DEFAULT_GRAD_CHECK_EPS};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    fn rand_params(rng: &mut ChaCha8Rng, in_dim: usize, a: usize, h: usize) -> MultiHeadAttentionParams {
        MultiHeadAttentionParams::init(rng, in_dim, a, h)
    }

    /// Plain-slice recomputation of additive multi-head attention.
    fn brute_force(
        items: &[Vec<f64>],
        context: &[f64],
        proj: &[Vec<f64>],
        heads: &[Vec<f64>],
        mask: &[bool],
    ) -> (Vec<f64>, Vec<Vec<f64>>) {
        let r = items.len();
        let w = items[0].len();
        let a = proj[0].len();
        let h = heads[0].len();
        let mut scores = vec![vec![0.0; h]; r];
        for i in 0..r {
            let joined: Vec<f64> = items[i].iter().chain(context.iter()).cloned().collect();
            let mut hidden = vec![0.0; a];
            for (q, hq) in hidden.iter_mut().enumerate() {
                *hq = joined
                    .iter()
                    .enumerate()
                    .map(|(p, v)| v * proj[p][q])
                    .sum::<f64>()
                    .tanh();
            }
            for (c, sc) in scores[i].iter_mut().enumerate() {
                *sc = hidden.iter().enumerate().map(|(q, v)| v * heads[q][c]).sum();
            }
        }
        let mut weights = vec![vec![0.0; h]; r];
        for c in 0..h {
            let max = (0..r)
                .filter(|&i| mask[i])
                .map(|i| scores[i][c])
                .fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..r)
                .filter(|&i| mask[i])
                .map(|i| (scores[i][c] - max).exp())
                .sum();
            for i in 0..r {
                if mask[i] {
                    weights[i][c] = (scores[i][c] - max).exp() / denom;
                }
            }
        }
        let mut attended = vec![0.0; h * w];
        for c in 0..h {
            for j in 0..w {
                attended[c * w + j] = (0..r).map(|i| weights[i][c] * items[i][j]).sum();
            }
        }
        (attended, weights)
    }

    fn as_rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|i| t.row_vec(i)).collect()
    }

    #[test]
    fn matches_brute_force_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let items = Tensor::new(4, 3, uniform_values(&mut rng, 12, 1.0));
        let context = Tensor::new(1, 2, uniform_values(&mut rng, 2, 1.0));
        let params = rand_params(&mut rng, 5, 4, 2);
        let mask = [true, true, false, true];
        let tape = Tape::new();
        let (attended, weights) =
            multi_head_attend(&tape, &items, &context, &params, Some(&mask)).unwrap();
        let (exp_att, exp_w) = brute_force(
            &as_rows(&items),
            &context.values(),
            &as_rows(&params.proj),
            &as_rows(&params.heads),
            &mask,
        );
        assert_close(&attended.values(), &exp_att, 1e-12);
        for (i, row) in exp_w.iter().enumerate() {
            assert_close(&weights.row_vec(i), row, 1e-12);
        }
    }

    #[test]
    fn zero_head_weights_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let items = Tensor::new(3, 2, uniform_values(&mut rng, 6, 1.0));
        let context = Tensor::new(1, 2, uniform_values(&mut rng, 2, 1.0));
        let params = rand_params(&mut rng, 4, 3, 2);
        params.heads.set_values(&vec![0.0; params.heads.len()]);
        let mask = [true, false, true];
        let tape = Tape::new();
        let (attended, weights) =
            multi_head_attend(&tape, &items, &context, &params, Some(&mask)).unwrap();
        for i in [0usize, 2] {
            assert_close(&weights.row_vec(i), &[0.5, 0.5], 1e-12);
        }
        assert_eq!(weights.row_vec(1), vec![0.0, 0.0]);
        let mean: Vec<f64> = (0..2)
            .map(|j| (items.value_at(0, j) + items.value_at(2, j)) / 2.0)
            .collect();
        assert_close(&attended.values()[0..2], &mean, 1e-12);
        assert_close(&attended.values()[2..4], &mean, 1e-12);
    }

    #[test]
    fn single_item_gets_all_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let items = Tensor::new(1, 3, uniform_values(&mut rng, 3, 1.0));
        let context = Tensor::new(1, 1, uniform_values(&mut rng, 1, 1.0));
        let params = rand_params(&mut rng, 4, 2, 3);
        let tape = Tape::new();
        let (attended, weights) =
            multi_head_attend(&tape, &items, &context, &params, Some(&[true])).unwrap();
        assert_eq!(weights.values(), vec![1.0, 1.0, 1.0]);
        let item = items.values();
        for head in 0..3 {
            assert_close(&attended.values()[head * 3..(head + 1) * 3], &item, 1e-12);
        }
    }

    #[test]
    fn head_blocks_are_per_head_weighted_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let items = Tensor::new(5, 4, uniform_values(&mut rng, 20, 1.0));
        let context = Tensor::new(1, 3, uniform_values(&mut rng, 3, 1.0));
        let params = rand_params(&mut rng, 7, 5, 3);
        let mask = [true, true, true, false, true];
        let tape = Tape::new();
        let (attended, weights) =
            multi_head_attend(&tape, &items, &context, &params, Some(&mask)).unwrap();
        let att = attended.values();
        for head in 0..3 {
            for j in 0..4 {
                let expect: f64 = (0..5)
                    .map(|i| weights.value_at(i, head) * items.value_at(i, j))
                    .sum();
                assert!((att[head * 4 + j] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_head_column_appends_identical_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let items = Tensor::new(3, 2, uniform_values(&mut rng, 6, 1.0));
        let context = Tensor::new(1, 2, uniform_values(&mut rng, 2, 1.0));
        let base = rand_params(&mut rng, 4, 3, 1);
        let col = base.heads.values();
        let mut doubled = Vec::new();
        for v in col.chunks(1) {
            doubled.extend([v[0], v[0]]);
        }
        let wide = MultiHeadAttentionParams {
            proj: base.proj.deep_clone(),
            heads: Tensor::param(3, 2, doubled),
        };
        let tape = Tape::new();
        let mask = [true; 3];
        let (one, _) = multi_head_attend(&tape, &items, &context, &base, Some(&mask)).unwrap();
        let (two, _) = multi_head_attend(&tape, &items, &context, &wide, Some(&mask)).unwrap();
        let v = two.values();
        assert_close(&v[0..2], &one.values(), 1e-12);
        assert_close(&v[2..4], &one.values(), 1e-12);
    }

    #[test]
    fn rejects_degenerate_and_mismatched_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let items = Tensor::new(2, 2, uniform_values(&mut rng, 4, 1.0));
        let context = Tensor::new(1, 2, uniform_values(&mut rng, 2, 1.0));
        let params = rand_params(&mut rng, 4, 3, 1);
        let tape = Tape::new();
        assert!(matches!(
            multi_head_attend(&tape, &items, &context, &params, Some(&[false, false])),
            Err(Error::DegenerateInput(_))
        ));
        let narrow = rand_params(&mut rng, 3, 3, 1);
        assert!(matches!(
            multi_head_attend(&tape, &items, &context, &narrow, Some(&[true, true])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn extend_claim_and_document_concatenate() {
        let tape = Tape::new();
        let claim = Tensor::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let same = extend_claim(&tape, &claim, None).unwrap();
        assert_eq!(same.values(), claim.values());

        let spk = Tensor::new(1, 2, vec![9.0, 8.0]);
        let ext = extend_claim(&tape, &claim, Some(&spk)).unwrap();
        assert_eq!(ext.shape(), (1, 6));
        assert_eq!(&ext.values()[0..4], &claim.values()[..]);
        assert_eq!(&ext.values()[4..6], &[9.0, 8.0]);

        // h1=2 heads, H=3 -> 12-wide document summary; D2=2 -> width 14.
        let doc = Tensor::new(1, 12, (0..12).map(|v| v as f64).collect());
        let publ = Tensor::new(1, 2, vec![0.5, 0.6]);
        let dext = extend_document(&tape, &doc, Some(&publ)).unwrap();
        assert_eq!(dext.shape(), (1, 14));
        let plain = extend_document(&tape, &doc, None).unwrap();
        assert_eq!(plain.values(), doc.values());
    }

    #[test]
    fn document_permutation_leaves_summary_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let k = 5;
        let rows: Vec<Vec<f64>> = (0..k).map(|_| uniform_values(&mut rng, 3, 1.0)).collect();
        let mask = [true, true, true, false, true];
        let context = Tensor::new(1, 2, uniform_values(&mut rng, 2, 1.0));
        let params = rand_params(&mut rng, 5, 4, 2);
        let perm = [2usize, 4, 0, 3, 1];

        let tape = Tape::new();
        let m = Tensor::from_rows(&rows);
        let (rich, _) = document_attention(&tape, &m, &context, &params, &mask).unwrap();

        let p_rows: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let p_mask: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
        let pm = Tensor::from_rows(&p_rows);
        let (rich_p, _) = document_attention(&tape, &pm, &context, &params, &p_mask).unwrap();
        assert_close(&rich.values(), &rich_p.values(), 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let items = Tensor::param(4, 3, uniform_values(&mut rng, 12, 1.0));
        let context = Tensor::param(1, 2, uniform_values(&mut rng, 2, 1.0));
        let params = rand_params(&mut rng, 5, 4, 2);
        let mask = [true, true, false, true];
        let worst = grad_check(
            |tape| {
                let (att, _) = multi_head_attend(tape, &items, &context, &params, Some(&mask))?;
                let sq = tape.mul(&att, &att)?;
                tape.sum_all(&sq)
            },
            &[&items, &context, &params.proj, &params.heads],
            DEFAULT_GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(worst < 1e-4, "rel err {worst}");
    }

    #[test]
    fn trace_column_check_catches_bad_sums() {
        let good = AttentionTrace {
            word_weights: vec![vec![vec![0.5, 0.25], vec![0.5, 0.75]]],
            doc_weights: vec![vec![1.0]],
            tokens: vec![],
            doc_keys: vec![],
        };
        good.check_columns(1e-9).unwrap();
        let bad = AttentionTrace {
            word_weights: vec![vec![vec![0.5, 0.25], vec![0.4, 0.75]]],
            ..Default::default()
        };
        assert!(bad.check_columns(1e-9).is_err());
    }

    proptest! {
        #[test]
        fn weights_are_column_stochastic_with_masked_zeros(
            seed in 0u64..500,
            mask in proptest::collection::vec(any::<bool>(), 4),
        ) {
            prop_assume!(mask.iter().any(|&b| b));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let items = Tensor::new(4, 3, uniform_values(&mut rng, 12, 2.0));
            let context = Tensor::new(1, 2, uniform_values(&mut rng, 2, 2.0));
            let params = rand_params(&mut rng, 5, 3, 2);
            let tape = Tape::new();
            let (_, weights) =
                multi_head_attend(&tape, &items, &context, &params, Some(&mask)).unwrap();
            for h in 0..2 {
                let mut sum = 0.0;
                for i in 0..4 {
                    let v = weights.value_at(i, h);
                    if mask[i] {
                        sum += v;
                    } else {
                        prop_assert_eq!(v, 0.0);
                    }
                }
                prop_assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }
}
