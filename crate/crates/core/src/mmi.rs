//! Maximum-mutual-information decoding baselines.
//!
//! Two standard ways to trade generic responses for informative ones at
//! inference time, both built on a trained generator pair:
//!
//! * **anti-LM**: greedy decoding under a per-step score that subtracts
//!   a weighted language-model log-probability for the first few
//!   positions, discouraging openings every response shares.
//! * **bidirectional**: decode an N-best list with the forward
//!   generator, then rerank by a convex combination of forward and
//!   reverse log-probabilities.

use crate::autodiff::Tape;
use crate::bigram::{BigramError, BigramLm};
use crate::data::{TokenSeq, BOS_ID, EOS_ID, PAD_ID};
use crate::scalar::Scalar;
use crate::seq2seq::{beam_decode, greedy_decode, Seq2SeqError, Seq2SeqParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MmiError {
    #[error("bad mmi configuration: {0}")]
    BadConfig(String),

    #[error("vocabulary sizes disagree: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },

    #[error(transparent)]
    Generator(#[from] Seq2SeqError),

    #[error(transparent)]
    LanguageModel(#[from] BigramError),
}

/// Knobs for both decoders.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmiConfig {
    /// Anti-LM penalty weight; `0` reduces to plain greedy decoding.
    pub anti_lm_weight: f64,
    /// Penalize only the first this-many positions.
    pub anti_lm_length_threshold: usize,
    /// N-best width for the bidirectional reranker.
    pub bidi_nbest: usize,
    /// Weight on the reverse score in `[0, 1]`; `0` keeps the forward
    /// ranking.
    pub bidi_reverse_weight: f64,
}

impl Default for MmiConfig {
    fn default() -> Self {
        MmiConfig {
            anti_lm_weight: 0.5,
            anti_lm_length_threshold: 5,
            bidi_nbest: 5,
            bidi_reverse_weight: 0.5,
        }
    }
}

impl MmiConfig {
    pub fn validate(&self) -> Result<(), MmiError> {
        if !self.anti_lm_weight.is_finite() || self.anti_lm_weight < 0.0 {
            return Err(MmiError::BadConfig(format!(
                "anti-lm-weight must be finite and non-negative, got {}",
                self.anti_lm_weight
            )));
        }
        if self.bidi_nbest == 0 {
            return Err(MmiError::BadConfig("bidi-nbest must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bidi_reverse_weight) {
            return Err(MmiError::BadConfig(format!(
                "bidi-reverse-weight must lie in [0, 1], got {}",
                self.bidi_reverse_weight
            )));
        }
        Ok(())
    }
}

/// Greedy decoding under the anti-LM score: at positions below the
/// threshold each candidate token's log-probability is reduced by
/// `weight · log P_lm(token | previous)`. Ties break toward the lowest
/// token id, exactly like plain greedy decoding, and `<eos>` ends the
/// sequence. Tokens the language model defines no event for (`<pad>`,
/// `<bos>`) keep their raw score; a trained generator gives them
/// negligible mass anyway.
pub fn mmi_anti_decode<F: Scalar>(
    gen_qr: &Seq2SeqParams<F>,
    lm_r: &BigramLm,
    cfg: &MmiConfig,
    source: &TokenSeq,
    max_len: usize,
) -> Result<TokenSeq, MmiError> {
    cfg.validate()?;
    if gen_qr.vocab_size != lm_r.vocab_size() {
        return Err(MmiError::VocabMismatch {
            left: gen_qr.vocab_size,
            right: lm_r.vocab_size(),
        });
    }
    gen_qr.check_seq(source)?;
    let tape = Tape::<F>::new();
    let vars = gen_qr.lease(&tape);
    let encoded = vars.encode(source)?;
    let mut state = encoded.initial.clone();
    let mut prev = BOS_ID;
    let mut tokens = Vec::new();
    for position in 0..max_len {
        let (next_state, log_probs) = vars.decode_step(&encoded, prev, &state)?;
        state = next_state;
        let values = tape.value(&log_probs);
        // `<pad>` is no LM context; it only arises as `prev` when an
        // untrained generator emits it, and then the raw scores stand.
        let penalized = position < cfg.anti_lm_length_threshold
            && cfg.anti_lm_weight > 0.0
            && prev != PAD_ID;
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (i, v) in values.iter().enumerate() {
            let mut score = v.to_f64_lossy();
            let id = i as u32;
            if penalized && id != PAD_ID && id != BOS_ID {
                score -= cfg.anti_lm_weight * lm_r.transition_log_prob(prev, id)?;
            }
            if score > best_score {
                best_score = score;
                best = i;
            }
        }
        if best as u32 == EOS_ID {
            break;
        }
        tokens.push(best as u32);
        prev = best as u32;
    }
    Ok(TokenSeq::new(tokens))
}

/// What the bidirectional reranker produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BidiOutcome {
    pub tokens: TokenSeq,
    /// True when every N-best hypothesis was empty (unscorable in
    /// reverse) and the result fell back to plain greedy decoding.
    pub used_fallback: bool,
}

/// N-best decoding with the forward generator, reranked by
/// `(1 − w)·log P(r|q) + w·log P(q|r)`. Empty hypotheses cannot be
/// reverse-scored and are skipped; when none remain the result is the
/// plain greedy output, flagged. Ties keep the earlier (better forward)
/// hypothesis, so `w = 0` returns the best non-empty beam hypothesis
/// and `N = 1` reduces to greedy decoding.
pub fn mmi_bidi_decode<F: Scalar>(
    gen_qr: &Seq2SeqParams<F>,
    gen_rq: &Seq2SeqParams<F>,
    cfg: &MmiConfig,
    source: &TokenSeq,
    max_len: usize,
) -> Result<BidiOutcome, MmiError> {
    cfg.validate()?;
    if gen_qr.vocab_size != gen_rq.vocab_size {
        return Err(MmiError::VocabMismatch {
            left: gen_qr.vocab_size,
            right: gen_rq.vocab_size,
        });
    }
    let nbest = beam_decode(gen_qr, source, cfg.bidi_nbest, max_len)?;
    let w = cfg.bidi_reverse_weight;
    let mut winner: Option<(TokenSeq, f64)> = None;
    for (tokens, forward) in nbest {
        if tokens.is_empty() {
            continue;
        }
        let reverse =
            crate::seq2seq::conditional_log_prob(gen_rq, &tokens, source)?.to_f64_lossy();
        let combined = (1.0 - w) * forward.to_f64_lossy() + w * reverse;
        let better = match &winner {
            None => true,
            Some((_, best)) => combined > *best,
        };
        if better {
            winner = Some((tokens, combined));
        }
    }
    match winner {
        Some((tokens, _)) => Ok(BidiOutcome {
            tokens,
            used_fallback: false,
        }),
        None => Ok(BidiOutcome {
            tokens: greedy_decode(gen_qr, source, max_len)?,
            used_fallback: true,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::data::QRPair;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(ids: &[u32]) -> TokenSeq {
        TokenSeq::new(ids.to_vec())
    }

    fn random_model(seed: u64, vocab: usize) -> Seq2SeqParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Seq2SeqParams::init(vocab, 2, 3, &mut rng).unwrap()
    }

    fn random_source(seed: u64, vocab: usize) -> TokenSeq {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
        let len = rng.random_range(1..=4);
        seq(&(0..len)
            .map(|_| rng.random_range(4..vocab as u32))
            .collect::<Vec<_>>())
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(MmiConfig::default().validate().is_ok());
        for mutate in [
            |c: &mut MmiConfig| c.anti_lm_weight = -0.1,
            |c: &mut MmiConfig| c.anti_lm_weight = f64::NAN,
            |c: &mut MmiConfig| c.bidi_nbest = 0,
            |c: &mut MmiConfig| c.bidi_reverse_weight = 1.5,
            |c: &mut MmiConfig| c.bidi_reverse_weight = -0.01,
        ] {
            let mut cfg = MmiConfig::default();
            mutate(&mut cfg);
            assert!(matches!(cfg.validate(), Err(MmiError::BadConfig(_))));
        }
    }

    #[test]
    fn mismatched_vocabularies_are_rejected() {
        let model = random_model(0, 7);
        let lm = BigramLm::uniform(9, 1.0).unwrap();
        let cfg = MmiConfig::default();
        assert!(matches!(
            mmi_anti_decode(&model, &lm, &cfg, &seq(&[4]), 4),
            Err(MmiError::VocabMismatch { left: 7, right: 9 })
        ));
        let other = random_model(1, 9);
        assert!(matches!(
            mmi_bidi_decode(&model, &other, &cfg, &seq(&[4]), 4),
            Err(MmiError::VocabMismatch { left: 7, right: 9 })
        ));
    }

    #[test]
    fn zero_weight_and_zero_threshold_match_plain_greedy() {
        let lm = BigramLm::uniform(7, 1.0).unwrap();
        for seed in 0..50 {
            let model = random_model(seed, 7);
            let source = random_source(seed, 7);
            let plain = greedy_decode(&model, &source, 6).unwrap();

            let mut cfg = MmiConfig::default();
            cfg.anti_lm_weight = 0.0;
            assert_eq!(
                mmi_anti_decode(&model, &lm, &cfg, &source, 6).unwrap(),
                plain,
                "weight 0 diverged from greedy at seed {seed}"
            );

            let mut cfg = MmiConfig::default();
            cfg.anti_lm_weight = 2.0;
            cfg.anti_lm_length_threshold = 0;
            assert_eq!(
                mmi_anti_decode(&model, &lm, &cfg, &source, 6).unwrap(),
                plain,
                "threshold 0 diverged from greedy at seed {seed}"
            );
        }
    }

    #[test]
    fn anti_lm_penalty_suppresses_the_lm_favorite_in_first_position() {
        // Constant-distribution generator: all weights zeroed except a
        // bias toward token 4, so plain greedy emits 4 at every step.
        let mut model = random_model(0, 8);
        for t in model.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = Tensor::zeros(shape);
        }
        model.out_b =
            Tensor::from_values(vec![8], vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0]).unwrap();
        let source = seq(&[5]);
        assert_eq!(greedy_decode(&model, &source, 3).unwrap().ids()[0], 4);

        // LM trained on sequences opening with token 4 strongly favors
        // it after <bos>; weight 2 pushes it below every alternative.
        let data: Vec<TokenSeq> = (0..20).map(|_| seq(&[4, 4])).collect();
        let lm = BigramLm::fit(&data, 8, 0.1).unwrap();
        let mut cfg = MmiConfig::default();
        cfg.anti_lm_weight = 2.0;
        let out = mmi_anti_decode(&model, &lm, &cfg, &source, 3).unwrap();
        assert!(
            out.is_empty() || out.ids()[0] != 4,
            "penalized favorite still emitted first: {out}"
        );
    }

    #[test]
    fn bidi_with_single_hypothesis_matches_greedy() {
        for seed in 0..50 {
            let gen_qr = random_model(seed, 7);
            let gen_rq = random_model(seed.wrapping_add(1000), 7);
            let source = random_source(seed, 7);
            let mut cfg = MmiConfig::default();
            cfg.bidi_nbest = 1;
            let out = mmi_bidi_decode(&gen_qr, &gen_rq, &cfg, &source, 6).unwrap();
            assert_eq!(out.tokens, greedy_decode(&gen_qr, &source, 6).unwrap());
        }
    }

    #[test]
    fn bidi_with_zero_reverse_weight_keeps_the_forward_ranking() {
        for seed in 0..50 {
            let gen_qr = random_model(seed, 7);
            let gen_rq = random_model(seed.wrapping_add(2000), 7);
            let source = random_source(seed, 7);
            let mut cfg = MmiConfig::default();
            cfg.bidi_nbest = 4;
            cfg.bidi_reverse_weight = 0.0;
            let out = mmi_bidi_decode(&gen_qr, &gen_rq, &cfg, &source, 5).unwrap();
            let expect = beam_decode(&gen_qr, &source, 4, 5)
                .unwrap()
                .into_iter()
                .map(|(t, _)| t)
                .find(|t| !t.is_empty());
            match expect {
                Some(t) => {
                    assert!(!out.used_fallback);
                    assert_eq!(out.tokens, t);
                }
                None => assert!(out.used_fallback),
            }
        }
    }

    /// Forward generator with constant per-step distribution (only the
    /// output bias is non-zero), so the N-best is easy to enumerate;
    /// reverse generator reads the candidate through an encoder whose
    /// context feeds the output layer, giving `[5]` a far better
    /// reverse score than the forward favorite `[4]`.
    fn rerank_pair() -> (Seq2SeqParams<f64>, Seq2SeqParams<f64>) {
        let zero = |m: &mut Seq2SeqParams<f64>| {
            for t in m.tensors_mut() {
                let shape = t.shape().to_vec();
                *t = Tensor::zeros(shape);
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fwd = Seq2SeqParams::init(6, 1, 1, &mut rng).unwrap();
        zero(&mut fwd);
        // Per-step log-probabilities rank token 4 > <eos> > token 5.
        fwd.out_b =
            Tensor::from_values(vec![6], vec![-9.0, -9.0, 1.0, -9.0, 2.0, 0.5]).unwrap();

        let mut rev = Seq2SeqParams::init(6, 1, 1, &mut rng).unwrap();
        zero(&mut rev);
        // Encoder folds ±1 embeddings through tanh(5x); the attention
        // context therefore carries the sign of the encoded candidate,
        // and the output row turns a negative context (candidate [5])
        // into a high probability for the true query token 4.
        rev.embedding =
            Tensor::from_values(vec![6, 1], vec![0.0, 0.0, 0.0, 0.0, 1.0, -1.0]).unwrap();
        rev.encoder.w_cand = Tensor::from_values(vec![1, 1], vec![5.0]).unwrap();
        rev.out_w = Tensor::from_values(
            vec![2, 6],
            vec![
                0.0, 0.0, 0.0, 0.0, 0.0, 0.0, // decoder-state row
                0.0, 0.0, 0.0, 0.0, -10.0, 0.0, // context row
            ],
        )
        .unwrap();
        (fwd, rev)
    }

    #[test]
    fn reverse_score_flips_the_reranked_winner() {
        let (fwd, rev) = rerank_pair();
        let source = seq(&[4]);

        // Sanity on the hand construction: [4] beats [5] forward, [5]
        // beats [4] in reverse by a wide margin.
        let fwd_4 = crate::seq2seq::conditional_log_prob(&fwd, &source, &seq(&[4])).unwrap();
        let fwd_5 = crate::seq2seq::conditional_log_prob(&fwd, &source, &seq(&[5])).unwrap();
        assert!(fwd_4 > fwd_5);
        let rev_4 = crate::seq2seq::conditional_log_prob(&rev, &seq(&[4]), &source).unwrap();
        let rev_5 = crate::seq2seq::conditional_log_prob(&rev, &seq(&[5]), &source).unwrap();
        assert!(rev_5 - rev_4 > 3.0, "reverse gap only {}", rev_5 - rev_4);

        let mut cfg = MmiConfig::default();
        cfg.bidi_nbest = 4;
        cfg.bidi_reverse_weight = 0.0;
        let forward_only = mmi_bidi_decode(&fwd, &rev, &cfg, &source, 1).unwrap();
        assert_eq!(forward_only.tokens, seq(&[4]));

        cfg.bidi_reverse_weight = 0.5;
        let reranked = mmi_bidi_decode(&fwd, &rev, &cfg, &source, 1).unwrap();
        assert!(!reranked.used_fallback);
        assert_eq!(reranked.tokens, seq(&[5]), "reranking did not flip the winner");
    }

    #[test]
    fn all_empty_nbest_falls_back_to_greedy_with_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = Seq2SeqParams::<f64>::init(6, 1, 1, &mut rng).unwrap();
        for t in model.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = Tensor::zeros(shape);
        }
        // <eos> dominates every step; with a width-1 beam the only
        // hypothesis retires empty immediately.
        model.out_b =
            Tensor::from_values(vec![6], vec![0.0, 0.0, 30.0, 0.0, 0.0, 0.0]).unwrap();
        let rev = model.clone();
        let mut cfg = MmiConfig::default();
        cfg.bidi_nbest = 1;
        let out = mmi_bidi_decode(&model, &rev, &cfg, &seq(&[4]), 4).unwrap();
        assert!(out.used_fallback);
        assert!(out.tokens.is_empty());

        // A wider beam keeps non-empty survivors, so no fallback.
        cfg.bidi_nbest = 5;
        let out = mmi_bidi_decode(&model, &rev, &cfg, &seq(&[4]), 4).unwrap();
        assert!(!out.used_fallback);
        assert!(!out.tokens.is_empty());
    }

    #[test]
    fn decoders_are_deterministic() {
        let gen_qr = random_model(3, 7);
        let gen_rq = random_model(4, 7);
        let pairs: Vec<QRPair> = (0..5)
            .map(|i| QRPair::new(random_source(i, 7), random_source(i + 50, 7)).unwrap())
            .collect();
        let lm = BigramLm::fit(
            &pairs.iter().map(|p| p.response().clone()).collect::<Vec<_>>(),
            7,
            1.0,
        )
        .unwrap();
        let cfg = MmiConfig::default();
        for p in &pairs {
            let a = mmi_anti_decode(&gen_qr, &lm, &cfg, p.query(), 6).unwrap();
            let b = mmi_anti_decode(&gen_qr, &lm, &cfg, p.query(), 6).unwrap();
            assert_eq!(a, b);
            let x = mmi_bidi_decode(&gen_qr, &gen_rq, &cfg, p.query(), 6).unwrap();
            let y = mmi_bidi_decode(&gen_qr, &gen_rq, &cfg, p.query(), 6).unwrap();
            assert_eq!(x, y);
        }
    }
}
