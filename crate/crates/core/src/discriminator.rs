//! Pair discriminator: two GRU sequence encoders (query side and
//! response side, no shared weights), concatenated final states, two
//! fully-connected layers and a sigmoid probability that the pair is
//! human-generated.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{optimizer_step, AutodiffError, Sgd, Tape, Tensor, Var};
use crate::data::QRPair;
use crate::scalar::Scalar;
use crate::seq2seq::{gru_cell, GruWeights};

/// Fan-scaled uniform initialization. The discriminator's scalar head
/// has no softmax stretching its logits the way the generators' output
/// layer does; at a small fixed scale the whole stack sits in a
/// near-constant regime where gradients vanish and adversarial training
/// never takes off.
fn glorot<F: Scalar>(
    fan_in: usize,
    fan_out: usize,
    shape: Vec<usize>,
    rng: &mut ChaCha8Rng,
) -> Tensor<F> {
    use rand::Rng;
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| F::from_f64_lossy(rng.random_range(-limit..limit)))
        .collect();
    Tensor::from_values(shape, values).expect("fan-scaled init values are finite")
}

fn glorot_gru<F: Scalar>(
    input_dim: usize,
    hidden_dim: usize,
    rng: &mut ChaCha8Rng,
) -> GruWeights<F> {
    let mut mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        glorot(rows, cols, vec![rows, cols], rng)
    };
    GruWeights {
        w_update: mat(input_dim, hidden_dim, rng),
        u_update: mat(hidden_dim, hidden_dim, rng),
        b_update: Tensor::zeros(vec![hidden_dim]),
        w_reset: mat(input_dim, hidden_dim, rng),
        u_reset: mat(hidden_dim, hidden_dim, rng),
        b_reset: Tensor::zeros(vec![hidden_dim]),
        w_cand: mat(input_dim, hidden_dim, rng),
        u_cand: mat(hidden_dim, hidden_dim, rng),
        b_cand: Tensor::zeros(vec![hidden_dim]),
    }
}

#[derive(Debug, Error)]
pub enum DiscError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("token id {id} invalid for discriminator with vocabulary size {vocab_size}")]
    InvalidId { id: u32, vocab_size: usize },

    #[error("cannot score an empty sequence")]
    EmptyUtterance,

    #[error("{0}")]
    BadDims(String),

    #[error("{0}")]
    BadParam(String),
}

/// All learnable parameters of one pair discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorParams<F: Scalar> {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Width of the first fully-connected layer.
    pub feature_dim: usize,
    pub query_embedding: Tensor<F>,
    pub query_encoder: GruWeights<F>,
    pub response_embedding: Tensor<F>,
    pub response_encoder: GruWeights<F>,
    /// `[2H, F]` then tanh.
    pub fc1_w: Tensor<F>,
    pub fc1_b: Tensor<F>,
    /// `[F, 1]` then sigmoid.
    pub fc2_w: Tensor<F>,
    pub fc2_b: Tensor<F>,
}

impl<F: Scalar> DiscriminatorParams<F> {
    pub fn init(
        vocab_size: usize,
        embed_dim: usize,
        hidden_dim: usize,
        feature_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, DiscError> {
        if vocab_size < 4 {
            return Err(DiscError::BadDims(format!(
                "vocabulary must include the reserved tokens, got size {vocab_size}"
            )));
        }
        if embed_dim == 0 || hidden_dim == 0 || feature_dim == 0 {
            return Err(DiscError::BadDims(
                "embedding, hidden and feature sizes must be positive".into(),
            ));
        }
        Ok(DiscriminatorParams {
            vocab_size,
            embed_dim,
            hidden_dim,
            feature_dim,
            query_embedding: glorot(vocab_size, embed_dim, vec![vocab_size, embed_dim], rng),
            query_encoder: glorot_gru(embed_dim, hidden_dim, rng),
            response_embedding: glorot(
                vocab_size,
                embed_dim,
                vec![vocab_size, embed_dim],
                rng,
            ),
            response_encoder: glorot_gru(embed_dim, hidden_dim, rng),
            fc1_w: glorot(2 * hidden_dim, feature_dim, vec![2 * hidden_dim, feature_dim], rng),
            fc1_b: Tensor::zeros(vec![feature_dim]),
            fc2_w: glorot(feature_dim, 1, vec![feature_dim, 1], rng),
            fc2_b: Tensor::zeros(vec![1]),
        })
    }

    /// Stable flat view of all 24 parameter tensors.
    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut out = vec![&self.query_embedding];
        out.extend(self.query_encoder.tensors());
        out.push(&self.response_embedding);
        out.extend(self.response_encoder.tensors());
        out.push(&self.fc1_w);
        out.push(&self.fc1_b);
        out.push(&self.fc2_w);
        out.push(&self.fc2_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> = vec![&mut self.query_embedding];
        out.extend(self.query_encoder.tensors_mut());
        out.push(&mut self.response_embedding);
        out.extend(self.response_encoder.tensors_mut());
        out.push(&mut self.fc1_w);
        out.push(&mut self.fc1_b);
        out.push(&mut self.fc2_w);
        out.push(&mut self.fc2_b);
        out
    }

    pub fn lease(&self, tape: &Tape<F>) -> DiscriminatorVars<F> {
        DiscriminatorVars {
            tape: tape.clone(),
            vocab_size: self.vocab_size,
            hidden_dim: self.hidden_dim,
            vars: self.tensors().into_iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    pub fn accumulate_grads(&mut self, vars: &DiscriminatorVars<F>) {
        let tape = vars.tape.clone();
        for (tensor, var) in self.tensors_mut().into_iter().zip(&vars.vars) {
            tape.accumulate_into(var, tensor);
        }
    }

    pub fn apply_step(&mut self, lr: F, clip: F) -> Result<(), DiscError> {
        let mut tensors = self.tensors_mut();
        if lr == F::zero() {
            for t in tensors {
                t.clear_grad();
            }
            return Ok(());
        }
        optimizer_step(&mut tensors, lr, clip, &mut Sgd)?;
        Ok(())
    }
}

/// A discriminator leased onto a tape.
pub struct DiscriminatorVars<F: Scalar> {
    tape: Tape<F>,
    vocab_size: usize,
    hidden_dim: usize,
    vars: Vec<Var<F>>,
}

impl<F: Scalar> DiscriminatorVars<F> {
    /// Wraps leaves created elsewhere on `tape` (gradient verification
    /// needs to route externally owned leaves through the forward pass).
    /// The leaves must mirror [`DiscriminatorParams::tensors`] in order
    /// and shape.
    pub fn from_leaves(
        tape: &Tape<F>,
        vocab_size: usize,
        hidden_dim: usize,
        vars: Vec<Var<F>>,
    ) -> Self {
        DiscriminatorVars {
            tape: tape.clone(),
            vocab_size,
            hidden_dim,
            vars,
        }
    }

    fn idx(&self, i: usize) -> &Var<F> {
        &self.vars[i]
    }

    fn encoder(&self, base: usize) -> [&Var<F>; 9] {
        [
            self.idx(base),
            self.idx(base + 1),
            self.idx(base + 2),
            self.idx(base + 3),
            self.idx(base + 4),
            self.idx(base + 5),
            self.idx(base + 6),
            self.idx(base + 7),
            self.idx(base + 8),
        ]
    }

    fn encode_side(
        &self,
        embedding: &Var<F>,
        weights: [&Var<F>; 9],
        seq: &[u32],
    ) -> Result<Var<F>, DiscError> {
        if seq.is_empty() {
            return Err(DiscError::EmptyUtterance);
        }
        let mut h = self
            .tape
            .constant(vec![self.hidden_dim], vec![F::zero(); self.hidden_dim])?;
        for &id in seq {
            if id as usize >= self.vocab_size {
                return Err(DiscError::InvalidId {
                    id,
                    vocab_size: self.vocab_size,
                });
            }
            let x = self.tape.embed(embedding, id as usize)?;
            h = gru_cell(&self.tape, weights, &x, &h, self.hidden_dim)?;
        }
        Ok(h)
    }

    /// Raw pre-sigmoid score `s` of a pair, shape `[1]`.
    pub fn score_logit(&self, query: &[u32], response: &[u32]) -> Result<Var<F>, DiscError> {
        let hq = self.encode_side(self.idx(0), self.encoder(1), query)?;
        let hr = self.encode_side(self.idx(10), self.encoder(11), response)?;
        let joint = self.tape.concat(&[&hq, &hr])?;
        let features = joint.matmul(self.idx(20))?.add(self.idx(21))?.tanh()?;
        let s = features.matmul(self.idx(22))?.add(self.idx(23))?;
        Ok(s)
    }

    /// `(log D, log(1−D))` for one pair, computed as the log-softmax of
    /// `[s, 0]` so that neither term saturates for extreme scores.
    pub fn log_scores(&self, query: &[u32], response: &[u32]) -> Result<(Var<F>, Var<F>), DiscError> {
        let s = self.score_logit(query, response)?;
        let zero = self.tape.constant(vec![1], vec![F::zero()])?;
        let both = self.tape.concat(&[&s, &zero])?.log_softmax()?;
        let log_d = both.matmul(&self.tape.constant(vec![2], vec![F::one(), F::zero()])?)?;
        let log_not_d = both.matmul(&self.tape.constant(vec![2], vec![F::zero(), F::one()])?)?;
        Ok((log_d, log_not_d))
    }

    /// Probability the pair is real, strictly inside `(0, 1)`.
    pub fn score(&self, query: &[u32], response: &[u32]) -> Result<Var<F>, DiscError> {
        Ok(self.score_logit(query, response)?.sigmoid()?)
    }
}

/// Value-level probability that the pair is human-generated.
pub fn score_pair<F: Scalar>(
    params: &DiscriminatorParams<F>,
    query: &[u32],
    response: &[u32],
) -> Result<F, DiscError> {
    let tape = Tape::new();
    let vars = params.lease(&tape);
    let s = vars.score(query, response)?;
    Ok(tape.scalar_value(&s))
}

/// Builds the discriminator objective on the tape:
/// `−mean(log D(real)) − mean(log(1−D(fake)))`.
pub fn discriminator_loss<F: Scalar>(
    vars: &DiscriminatorVars<F>,
    real: &[&QRPair],
    fake: &[&QRPair],
) -> Result<Var<F>, DiscError> {
    if real.is_empty() || fake.is_empty() {
        return Err(DiscError::BadParam(
            "real and fake batches must both be non-empty".into(),
        ));
    }
    let mut real_sum: Option<Var<F>> = None;
    for pair in real {
        let (log_d, _) = vars.log_scores(pair.query().ids(), pair.response().ids())?;
        real_sum = Some(match real_sum {
            None => log_d,
            Some(t) => t.add(&log_d)?,
        });
    }
    let mut fake_sum: Option<Var<F>> = None;
    for pair in fake {
        let (_, log_not_d) = vars.log_scores(pair.query().ids(), pair.response().ids())?;
        fake_sum = Some(match fake_sum {
            None => log_not_d,
            Some(t) => t.add(&log_not_d)?,
        });
    }
    let real_mean = real_sum
        .expect("real non-empty")
        .scale(-F::one() / F::from_f64_lossy(real.len() as f64))?;
    let fake_mean = fake_sum
        .expect("fake non-empty")
        .scale(-F::one() / F::from_f64_lossy(fake.len() as f64))?;
    Ok(real_mean.add(&fake_mean)?)
}

/// One update minimizing the discriminator objective; returns the
/// pre-update loss.
pub fn discriminator_step<F: Scalar>(
    params: &mut DiscriminatorParams<F>,
    real: &[&QRPair],
    fake: &[&QRPair],
    lr: F,
    clip: F,
) -> Result<F, DiscError> {
    let tape = Tape::new();
    let vars = params.lease(&tape);
    let loss = discriminator_loss(&vars, real, fake)?;
    let value = tape.scalar_value(&loss);
    tape.backward(&loss)?;
    params.accumulate_grads(&vars);
    params.apply_step(lr, clip)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::data::TokenSeq;
    use rand::{Rng, SeedableRng};

    type P = DiscriminatorParams<f64>;

    fn tiny(seed: u64) -> P {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        P::init(8, 4, 6, 6, &mut rng).unwrap()
    }

    fn zeroed() -> P {
        let mut p = tiny(0);
        for t in p.tensors_mut() {
            let zero = Tensor::zeros(t.shape().to_vec());
            *t = zero;
        }
        p
    }

    fn pair(q: &[u32], r: &[u32]) -> QRPair {
        QRPair::new(TokenSeq::new(q.to_vec()), TokenSeq::new(r.to_vec())).unwrap()
    }

    #[test]
    fn all_zero_weights_score_exactly_half() {
        let p = zeroed();
        assert_eq!(score_pair(&p, &[4, 5], &[6]).unwrap(), 0.5);
    }

    #[test]
    fn scores_stay_strictly_inside_unit_interval() {
        for seed in 0..10 {
            let p = tiny(seed);
            let s = score_pair(&p, &[4, 5, 6], &[7, 4]).unwrap();
            assert!(s > 0.0 && s < 1.0, "seed {seed}: {s}");
        }
    }

    #[test]
    fn uninformative_discriminator_loss_is_two_log_two() {
        let mut p = zeroed();
        let real = [pair(&[4], &[5])];
        let fake = [pair(&[4], &[6])];
        let loss = discriminator_step(
            &mut p,
            &[&real[0]],
            &[&fake[0]],
            0.0,
            5.0,
        )
        .unwrap();
        assert!((loss - 2.0 * (2.0f64).ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn separating_scores_drive_the_loss_to_zero() {
        // Hand-built separator over E=1, H=1, F=1: the response token
        // decides the score. Response a (+1 embedding) ends near +40
        // pre-sigmoid, response b (−1) near −40.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = P::init(6, 1, 1, 1, &mut rng).unwrap();
        for t in p.tensors_mut() {
            let zero = Tensor::zeros(t.shape().to_vec());
            *t = zero;
        }
        p.response_embedding = Tensor::from_values(
            vec![6, 1],
            vec![0.0, 0.0, 0.0, 0.0, 1.0, -1.0],
        )
        .unwrap();
        p.response_encoder.w_cand = Tensor::from_values(vec![1, 1], vec![5.0]).unwrap();
        p.fc1_w = Tensor::from_values(vec![2, 1], vec![0.0, 20.0]).unwrap();
        p.fc2_w = Tensor::from_values(vec![1, 1], vec![40.0]).unwrap();

        let real = pair(&[4], &[4]);
        let fake = pair(&[4], &[5]);
        let s_real = score_pair(&p, real.query().ids(), real.response().ids()).unwrap();
        let s_fake = score_pair(&p, fake.query().ids(), fake.response().ids()).unwrap();
        assert!(s_real > 0.999 && s_fake < 0.001);

        let loss = discriminator_step(&mut p, &[&real], &[&fake], 0.0, 5.0).unwrap();
        assert!(loss >= 0.0 && loss < 1e-10, "loss {loss}");
    }

    #[test]
    fn log_scores_match_sigmoid_without_saturating() {
        let p = tiny(3);
        let tape = Tape::new();
        let vars = p.lease(&tape);
        let s = tape.scalar_value(&vars.score_logit(&[4, 5], &[6, 7]).unwrap());
        let (log_d, log_not_d) = vars.log_scores(&[4, 5], &[6, 7]).unwrap();
        let sig = 1.0 / (1.0 + (-s).exp());
        assert!((tape.scalar_value(&log_d) - sig.ln()).abs() < 1e-12);
        assert!((tape.scalar_value(&log_not_d) - (1.0 - sig).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let p = tiny(4);
        let real = pair(&[4, 5], &[6]);
        let fake = pair(&[4, 5], &[7, 7]);
        let tensors: Vec<Tensor<f64>> = p.tensors().into_iter().cloned().collect();
        let skeleton = p.clone();
        let err = grad_check(&tensors, 1e-5, move |tape, vars| {
            let leased = DiscriminatorVars {
                tape: tape.clone(),
                vocab_size: skeleton.vocab_size,
                hidden_dim: skeleton.hidden_dim,
                vars: vars.to_vec(),
            };
            discriminator_loss(&leased, &[&real], &[&fake]).map_err(|e| match e {
                DiscError::Autodiff(a) => a,
                other => panic!("unexpected build error: {other}"),
            })
        })
        .unwrap();
        assert!(err < 1e-4, "discriminator loss gradient error {err}");
    }

    #[test]
    fn training_separates_ordered_from_shuffled_responses() {
        // Real responses alternate strictly (4 5 4 5 …); fakes are the
        // same multisets shuffled, so only order separates them.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = P::init(8, 4, 8, 8, &mut rng).unwrap();
        let mut reals = Vec::new();
        let mut fakes = Vec::new();
        for i in 0..8u32 {
            let q = vec![4 + (i % 4), 4 + ((i + 1) % 4)];
            let r: Vec<u32> = (0..6).map(|j| if j % 2 == 0 { 4 } else { 5 }).collect();
            reals.push(pair(&q, &r));
            let mut shuffled = r.clone();
            // Deterministic shuffle that breaks the alternation.
            for k in (1..shuffled.len()).rev() {
                let j = rng.random_range(0..=k);
                shuffled.swap(k, j);
            }
            if shuffled == r {
                shuffled.swap(0, 1);
            }
            fakes.push(pair(&q, &shuffled));
        }
        let real_refs: Vec<&QRPair> = reals.iter().collect();
        let fake_refs: Vec<&QRPair> = fakes.iter().collect();

        let mut last = f64::INFINITY;
        for _ in 0..2000 {
            last = discriminator_step(&mut p, &real_refs, &fake_refs, 0.5, 5.0).unwrap();
            if last < 0.05 {
                break;
            }
        }
        assert!(last < 2.0 * (2.0f64).ln(), "loss should beat chance, got {last}");

        let mean = |pairs: &[QRPair]| -> f64 {
            let total: f64 = pairs
                .iter()
                .map(|pr| score_pair(&p, pr.query().ids(), pr.response().ids()).unwrap())
                .sum();
            total / pairs.len() as f64
        };
        let gap = mean(&reals) - mean(&fakes);
        assert!(gap > 0.2, "separation gap {gap}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = tiny(5);
        assert!(matches!(
            score_pair(&p, &[], &[4]),
            Err(DiscError::EmptyUtterance)
        ));
        assert!(matches!(
            score_pair(&p, &[4], &[99]),
            Err(DiscError::InvalidId { id: 99, .. })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            P::init(3, 2, 2, 2, &mut rng),
            Err(DiscError::BadDims(_))
        ));
        assert!(matches!(
            P::init(8, 0, 2, 2, &mut rng),
            Err(DiscError::BadDims(_))
        ));
    }
}
