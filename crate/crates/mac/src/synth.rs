//! Synthetic corpora with a planted lexical signal: true claims carry a
//! designated keyword in at least one evidence document, false claims never
//! do. The classes are otherwise identically distributed, so any model that
//! separates them must have found the keyword. Used by end-to-end sanity
//! checks for learning, attention placement, and the cross-validation
//! protocol.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::data::{LabeledClaim, RawDocument};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub train_claims: usize,
    pub holdout_claims: usize,
    /// Distinct filler tokens drawn uniformly for all text.
    pub filler_vocab: usize,
    pub docs_per_claim: usize,
    pub doc_tokens: usize,
    pub claim_tokens: usize,
    pub signal_token: String,
    /// Attach rotating speaker names to the claims.
    pub with_speakers: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            train_claims: 64,
            holdout_claims: 32,
            filler_vocab: 12,
            docs_per_claim: 2,
            doc_tokens: 4,
            claim_tokens: 3,
            signal_token: "zqsignal".to_owned(),
            with_speakers: false,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub train: Vec<LabeledClaim>,
    pub holdout: Vec<LabeledClaim>,
    pub signal_token: String,
}

/// Deterministically generate a planted-signal corpus. Labels alternate so
/// both splits stay balanced.
pub fn planted_signal_corpus(cfg: &SynthConfig) -> SynthCorpus {
    assert!(cfg.filler_vocab > 0, "need at least one filler token");
    assert!(cfg.doc_tokens > 0 && cfg.claim_tokens > 0 && cfg.docs_per_claim > 0);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let section = |prefix: &str, count: usize, rng: &mut ChaCha20Rng| {
        (0..count)
            .map(|i| make_claim(cfg, prefix, i, rng))
            .collect::<Vec<LabeledClaim>>()
    };
    let train = section("train", cfg.train_claims, &mut rng);
    let holdout = section("holdout", cfg.holdout_claims, &mut rng);
    SynthCorpus {
        train,
        holdout,
        signal_token: cfg.signal_token.clone(),
    }
}

fn make_claim(cfg: &SynthConfig, prefix: &str, index: usize, rng: &mut ChaCha20Rng) -> LabeledClaim {
    let label = (index % 2 == 0) as u8;
    let filler = |rng: &mut ChaCha20Rng| format!("w{:02}", rng.gen_range(0..cfg.filler_vocab));
    let text_of = |len: usize, rng: &mut ChaCha20Rng| {
        (0..len).map(|_| filler(rng)).collect::<Vec<_>>().join(" ")
    };
    let claim_text = text_of(cfg.claim_tokens, rng);
    let mut planted = vec![false; cfg.docs_per_claim];
    if label == 1 {
        for p in planted.iter_mut() {
            *p = rng.gen_bool(0.5);
        }
        if !planted.iter().any(|&p| p) {
            planted[rng.gen_range(0..cfg.docs_per_claim)] = true;
        }
    }
    let evidence = planted
        .iter()
        .enumerate()
        .map(|(d, &plant)| {
            let mut tokens: Vec<String> = (0..cfg.doc_tokens).map(|_| filler(rng)).collect();
            if plant {
                let at = rng.gen_range(0..tokens.len());
                tokens[at] = cfg.signal_token.clone();
            }
            RawDocument {
                text: tokens.join(" "),
                publisher: format!("outlet{}", d % 3),
            }
        })
        .collect();
    LabeledClaim {
        claim_id: format!("{prefix}-{index:04}"),
        claim_text,
        speaker: cfg.with_speakers.then(|| format!("speaker{}", index % 4)),
        label,
        evidence,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = planted_signal_corpus(&cfg);
        let b = planted_signal_corpus(&cfg);
        assert_eq!(a.train.len(), cfg.train_claims);
        assert_eq!(a.holdout.len(), cfg.holdout_claims);
        for (x, y) in a.train.iter().zip(b.train.iter()) {
            assert_eq!(x.claim_id, y.claim_id);
            assert_eq!(x.claim_text, y.claim_text);
            assert_eq!(x.label, y.label);
            for (dx, dy) in x.evidence.iter().zip(y.evidence.iter()) {
                assert_eq!(dx.text, dy.text);
            }
        }
        let c = planted_signal_corpus(&SynthConfig {
            seed: 8,
            ..SynthConfig::default()
        });
        assert_ne!(a.train[0].claim_text, c.train[0].claim_text);
    }

    #[test]
    fn signal_appears_exactly_in_true_claims() {
        let cfg = SynthConfig::default();
        let corpus = planted_signal_corpus(&cfg);
        for claim in corpus.train.iter().chain(corpus.holdout.iter()) {
            let hits = claim
                .evidence
                .iter()
                .filter(|d| d.text.split_whitespace().any(|t| t == cfg.signal_token))
                .count();
            if claim.label == 1 {
                assert!(hits >= 1, "true claim {} lacks the signal", claim.claim_id);
            } else {
                assert_eq!(hits, 0, "false claim {} has the signal", claim.claim_id);
            }
            assert!(!claim.claim_text.contains(&cfg.signal_token));
        }
    }

    #[test]
    fn labels_are_balanced_and_ids_distinct() {
        let cfg = SynthConfig::default();
        let corpus = planted_signal_corpus(&cfg);
        let trues = corpus.train.iter().filter(|c| c.label == 1).count();
        assert_eq!(trues, cfg.train_claims / 2);
        let mut ids: Vec<&str> = corpus
            .train
            .iter()
            .chain(corpus.holdout.iter())
            .map(|c| c.claim_id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), cfg.train_claims + cfg.holdout_claims);
    }

    #[test]
    fn speakers_follow_the_flag() {
        let without = planted_signal_corpus(&SynthConfig::default());
        assert!(without.train.iter().all(|c| c.speaker.is_none()));
        let with = planted_signal_corpus(&SynthConfig {
            with_speakers: true,
            ..SynthConfig::default()
        });
        assert!(with.train.iter().all(|c| c.speaker.is_some()));
    }
}
