//! Add-k smoothed bigram language models.
//!
//! One model scores each side of the corpus (queries or responses) and
//! supplies the marginal terms of the joint-probability duality
//! constraint. Probabilities are exact ratios of integer counts, so the
//! same corpus always yields the same model, bit for bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{TokenSeq, BOS_ID, EOS_ID, PAD_ID};

#[derive(Debug, Error)]
pub enum BigramError {
    #[error("cannot fit a bigram model on an empty sequence list")]
    EmptyInput,

    #[error("smoothing k must be positive, got {0}")]
    BadK(f64),

    #[error("vocabulary size {0} leaves no room for the reserved ids")]
    BadVocabSize(usize),

    #[error("id {id} invalid for a bigram model over vocabulary size {vocab_size}")]
    InvalidId { id: u32, vocab_size: usize },

    #[error("cannot score an empty sequence")]
    EmptySequence,
}

/// Smoothed bigram model. The event space is every id except `<pad>`
/// (so `<bos>`, `<eos>` and `<unk>` are events); `<bos>` occurs only as
/// a context. With `V` the event-space size and `k` the smoothing mass,
/// `P(w|p) = (count(p,w) + k) / (context(p) + k·V)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BigramLm {
    vocab_size: usize,
    k: f64,
    /// context id → (next id → count); nested maps keep serialization
    /// deterministic.
    counts: BTreeMap<u32, BTreeMap<u32, u64>>,
    context_totals: BTreeMap<u32, u64>,
}

fn check_params(vocab_size: usize, k: f64) -> Result<(), BigramError> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(BigramError::BadK(k));
    }
    if vocab_size <= EOS_ID as usize {
        return Err(BigramError::BadVocabSize(vocab_size));
    }
    Ok(())
}

impl BigramLm {
    /// Model with no observations: every transition uniform at `1/V`.
    pub fn uniform(vocab_size: usize, k: f64) -> Result<Self, BigramError> {
        check_params(vocab_size, k)?;
        Ok(BigramLm {
            vocab_size,
            k,
            counts: BTreeMap::new(),
            context_totals: BTreeMap::new(),
        })
    }

    /// Accumulates transition counts over `<bos> w1 … wn <eos>` for each
    /// sequence. Sequence ids must be modelable tokens (not `<pad>`,
    /// `<bos>` or `<eos>`).
    pub fn fit(sequences: &[TokenSeq], vocab_size: usize, k: f64) -> Result<Self, BigramError> {
        check_params(vocab_size, k)?;
        if sequences.is_empty() {
            return Err(BigramError::EmptyInput);
        }
        let mut lm = BigramLm::uniform(vocab_size, k)?;
        for seq in sequences {
            let mut prev = BOS_ID;
            for &id in seq.ids() {
                lm.check_token(id)?;
                lm.observe(prev, id);
                prev = id;
            }
            lm.observe(prev, EOS_ID);
        }
        Ok(lm)
    }

    fn observe(&mut self, prev: u32, next: u32) {
        *self
            .counts
            .entry(prev)
            .or_default()
            .entry(next)
            .or_insert(0) += 1;
        *self.context_totals.entry(prev).or_insert(0) += 1;
    }

    fn check_token(&self, id: u32) -> Result<(), BigramError> {
        if id as usize >= self.vocab_size || id == PAD_ID || id == BOS_ID || id == EOS_ID {
            return Err(BigramError::InvalidId {
                id,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Event-space size: every id except `<pad>`.
    pub fn event_space(&self) -> usize {
        self.vocab_size - 1
    }

    fn check_event(&self, id: u32, context: bool) -> Result<(), BigramError> {
        let bad = id as usize >= self.vocab_size || id == PAD_ID || (!context && id == BOS_ID);
        if bad {
            return Err(BigramError::InvalidId {
                id,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    /// `log P(next | prev)`, always finite thanks to smoothing.
    pub fn transition_log_prob(&self, prev: u32, next: u32) -> Result<f64, BigramError> {
        self.check_event(prev, true)?;
        self.check_event(next, false)?;
        let pair = self
            .counts
            .get(&prev)
            .and_then(|m| m.get(&next))
            .copied()
            .unwrap_or(0) as f64;
        let total = self.context_totals.get(&prev).copied().unwrap_or(0) as f64;
        let v = self.event_space() as f64;
        Ok(((pair + self.k) / (total + self.k * v)).ln())
    }

    /// `Σ log P` over the transitions `<bos>→w1→…→wn→<eos>`.
    pub fn sequence_log_prob(&self, seq: &TokenSeq) -> Result<f64, BigramError> {
        if seq.is_empty() {
            return Err(BigramError::EmptySequence);
        }
        let mut total = 0.0;
        let mut prev = BOS_ID;
        for &id in seq.ids() {
            total += self.transition_log_prob(prev, id)?;
            prev = id;
        }
        total += self.transition_log_prob(prev, EOS_ID)?;
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Toy vocabulary {<pad>,<bos>,<eos>,a,b,c}: event space of 5.
    const A: u32 = 3;
    const B: u32 = 4;
    const C: u32 = 5;

    fn toy() -> BigramLm {
        let seqs = vec![TokenSeq::new(vec![A, B]), TokenSeq::new(vec![A, C])];
        BigramLm::fit(&seqs, 6, 1.0).unwrap()
    }

    #[test]
    fn hand_counted_probabilities() {
        let lm = toy();
        let p = |prev, next| lm.transition_log_prob(prev, next).unwrap().exp();
        assert!((p(A, B) - 2.0 / 7.0).abs() < 1e-12, "count 1 of 2, smoothed");
        assert!((p(BOS_ID, A) - 3.0 / 7.0).abs() < 1e-12);
        assert!((p(C, B) - 1.0 / 6.0).abs() < 1e-12, "unseen bigram");
    }

    #[test]
    fn hand_counted_sequence_score() {
        let lm = toy();
        let got = lm.sequence_log_prob(&TokenSeq::new(vec![A])).unwrap();
        let want = (3.0f64 / 7.0).ln() + (1.0f64 / 7.0).ln();
        assert!((got - want).abs() < 1e-12);
        assert!(got <= 0.0);
    }

    #[test]
    fn every_context_normalizes() {
        let lm = toy();
        // Events are every non-pad id, including <bos> and <eos>.
        for context in [BOS_ID, A, B, C, EOS_ID] {
            let total: f64 = (1..6)
                .map(|next| {
                    let pair = lm
                        .counts
                        .get(&context)
                        .and_then(|m| m.get(&next))
                        .copied()
                        .unwrap_or(0) as f64;
                    let ctx = lm.context_totals.get(&context).copied().unwrap_or(0) as f64;
                    ((pair + lm.k) / (ctx + lm.k * 5.0)).max(0.0)
                })
                .sum();
            assert!((total - 1.0).abs() < 1e-9, "context {context}: {total}");
        }
    }

    #[test]
    fn context_totals_match_bigram_sums() {
        let lm = toy();
        for (context, next_counts) in &lm.counts {
            let by_sum: u64 = next_counts.values().sum();
            assert_eq!(lm.context_totals[context], by_sum);
        }
    }

    #[test]
    fn enumeration_mass_stays_proper() {
        let lm = toy();
        let tokens = [A, B, C];
        let mut mass_by_len = vec![0.0f64; 5];
        for len in 1..=4usize {
            let mut idx = vec![0usize; len];
            loop {
                let seq = TokenSeq::new(idx.iter().map(|&i| tokens[i]).collect());
                mass_by_len[len] += lm.sequence_log_prob(&seq).unwrap().exp();
                let mut pos = 0;
                while pos < len {
                    idx[pos] += 1;
                    if idx[pos] < tokens.len() {
                        break;
                    }
                    idx[pos] = 0;
                    pos += 1;
                }
                if pos == len {
                    break;
                }
            }
        }
        let up_to_2: f64 = mass_by_len[1..=2].iter().sum();
        let up_to_4: f64 = mass_by_len[1..=4].iter().sum();
        assert!(up_to_4 <= 1.0 + 1e-12, "total mass {up_to_4}");
        assert!(up_to_4 > up_to_2, "longer sequences add mass");
    }

    #[test]
    fn uniform_model_gives_one_over_v() {
        let lm = BigramLm::uniform(6, 0.5).unwrap();
        for context in [BOS_ID, A, C] {
            for next in [A, B, EOS_ID] {
                let p = lm.transition_log_prob(context, next).unwrap().exp();
                assert!((p - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extra_observation_never_lowers_its_probability() {
        let base = vec![TokenSeq::new(vec![A, B]), TokenSeq::new(vec![A, C])];
        let mut extended = base.clone();
        extended.push(TokenSeq::new(vec![A, B]));
        let lm0 = BigramLm::fit(&base, 6, 1.0).unwrap();
        let lm1 = BigramLm::fit(&extended, 6, 1.0).unwrap();
        assert!(
            lm1.transition_log_prob(A, B).unwrap() >= lm0.transition_log_prob(A, B).unwrap()
        );
    }

    #[test]
    fn fit_is_deterministic() {
        assert_eq!(toy(), toy());
        let json = serde_json::to_string(&toy()).unwrap();
        assert_eq!(json, serde_json::to_string(&toy()).unwrap());
        let back: BigramLm = serde_json::from_str(&json).unwrap();
        assert_eq!(back, toy());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            BigramLm::fit(&[], 6, 1.0),
            Err(BigramError::EmptyInput)
        ));
        let seqs = vec![TokenSeq::new(vec![A])];
        assert!(matches!(
            BigramLm::fit(&seqs, 6, 0.0),
            Err(BigramError::BadK(_))
        ));
        assert!(matches!(
            BigramLm::fit(&seqs, 2, 1.0),
            Err(BigramError::BadVocabSize(2))
        ));
        let bad = vec![TokenSeq::new(vec![PAD_ID])];
        assert!(matches!(
            BigramLm::fit(&bad, 6, 1.0),
            Err(BigramError::InvalidId { .. })
        ));
        let oob = vec![TokenSeq::new(vec![9])];
        assert!(matches!(
            BigramLm::fit(&oob, 6, 1.0),
            Err(BigramError::InvalidId { id: 9, .. })
        ));

        let lm = toy();
        assert!(lm.sequence_log_prob(&TokenSeq::new(vec![])).is_err());
        assert!(lm.transition_log_prob(A, BOS_ID).is_err(), "<bos> is context-only");
        assert!(lm.transition_log_prob(PAD_ID, A).is_err());
    }

    proptest::proptest! {
        #[test]
        fn sequence_scores_are_nonpositive(
            ids in proptest::collection::vec(3u32..6, 1..8),
            k in 0.1f64..4.0,
        ) {
            let lm = BigramLm::fit(&[TokenSeq::new(vec![A, B, C])], 6, k).unwrap();
            let lp = lm.sequence_log_prob(&TokenSeq::new(ids)).unwrap();
            proptest::prop_assert!(lp <= 0.0 && lp.is_finite());
        }
    }
}
