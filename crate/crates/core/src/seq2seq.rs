//! One directional sequence generator: GRU encoder, multiplicative
//! attention, input-feeding GRU decoder, and the decoding strategies
//! built on top of it (teacher forcing, multinomial sampling, greedy and
//! beam search).
//!
//! The same forward code drives training and inference; decoders simply
//! discard the record instead of backpropagating through it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{optimizer_step, AutodiffError, Sgd, Tape, Tensor, Var};
use crate::data::{Direction, QRPair, TokenSeq, BOS_ID, EOS_ID};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum Seq2SeqError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("{0}")]
    BadDims(String),

    #[error("token id {id} invalid for generator with vocabulary size {vocab_size}")]
    InvalidId { id: u32, vocab_size: usize },

    #[error("source and target must both be non-empty")]
    EmptyUtterance,

    #[error("{0}")]
    BadParam(String),
}

/// One GRU cell's weights: update gate `z`, reset gate `r`, candidate
/// state. Input matrices are `[input_dim, H]`, recurrent `[H, H]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruWeights<F: Scalar> {
    pub w_update: Tensor<F>,
    pub u_update: Tensor<F>,
    pub b_update: Tensor<F>,
    pub w_reset: Tensor<F>,
    pub u_reset: Tensor<F>,
    pub b_reset: Tensor<F>,
    pub w_cand: Tensor<F>,
    pub u_cand: Tensor<F>,
    pub b_cand: Tensor<F>,
}

impl<F: Scalar> GruWeights<F> {
    pub(crate) fn init(input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mat = |rows, cols, rng: &mut ChaCha8Rng| init_tensor(vec![rows, cols], rng);
        GruWeights {
            w_update: mat(input_dim, hidden_dim, rng),
            u_update: mat(hidden_dim, hidden_dim, rng),
            b_update: init_tensor(vec![hidden_dim], rng),
            w_reset: mat(input_dim, hidden_dim, rng),
            u_reset: mat(hidden_dim, hidden_dim, rng),
            b_reset: init_tensor(vec![hidden_dim], rng),
            w_cand: mat(input_dim, hidden_dim, rng),
            u_cand: mat(hidden_dim, hidden_dim, rng),
            b_cand: init_tensor(vec![hidden_dim], rng),
        }
    }

    pub(crate) fn tensors(&self) -> [&Tensor<F>; 9] {
        [
            &self.w_update,
            &self.u_update,
            &self.b_update,
            &self.w_reset,
            &self.u_reset,
            &self.b_reset,
            &self.w_cand,
            &self.u_cand,
            &self.b_cand,
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor<F>; 9] {
        [
            &mut self.w_update,
            &mut self.u_update,
            &mut self.b_update,
            &mut self.w_reset,
            &mut self.u_reset,
            &mut self.b_reset,
            &mut self.w_cand,
            &mut self.u_cand,
            &mut self.b_cand,
        ]
    }
}

const INIT_RANGE: f64 = 0.08;

pub(crate) fn init_tensor<F: Scalar>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| F::from_f64_lossy(rng.random_range(-INIT_RANGE..INIT_RANGE)))
        .collect();
    Tensor::from_values(shape, values).expect("uniform init values are finite")
}

/// Every learnable parameter of one directional generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqParams<F: Scalar> {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// `[V, E]` token embeddings shared by encoder and decoder.
    pub embedding: Tensor<F>,
    /// Encoder cell over inputs of size `E`.
    pub encoder: GruWeights<F>,
    /// Decoder cell over inputs of size `E + H` (previous attention
    /// context is fed back in).
    pub decoder: GruWeights<F>,
    /// `[H, H]` bilinear attention score matrix.
    pub attention: Tensor<F>,
    /// `[2H, V]` projection of `[decoder state, context]` to logits.
    pub out_w: Tensor<F>,
    pub out_b: Tensor<F>,
}

impl<F: Scalar> Seq2SeqParams<F> {
    /// Uniform `±0.08` initialization of every weight.
    pub fn init(
        vocab_size: usize,
        embed_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, Seq2SeqError> {
        if vocab_size < 4 {
            return Err(Seq2SeqError::BadDims(format!(
                "vocabulary must include the reserved tokens, got size {vocab_size}"
            )));
        }
        if embed_dim == 0 || hidden_dim == 0 {
            return Err(Seq2SeqError::BadDims(
                "embedding and hidden sizes must be positive".into(),
            ));
        }
        Ok(Seq2SeqParams {
            vocab_size,
            embed_dim,
            hidden_dim,
            embedding: init_tensor(vec![vocab_size, embed_dim], rng),
            encoder: GruWeights::init(embed_dim, hidden_dim, rng),
            decoder: GruWeights::init(embed_dim + hidden_dim, hidden_dim, rng),
            attention: init_tensor(vec![hidden_dim, hidden_dim], rng),
            out_w: init_tensor(vec![2 * hidden_dim, vocab_size], rng),
            out_b: init_tensor(vec![vocab_size], rng),
        })
    }

    /// Stable flat view of all 22 parameter tensors; the order is part of
    /// the update and checkpoint contract.
    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut out = vec![&self.embedding];
        out.extend(self.encoder.tensors());
        out.extend(self.decoder.tensors());
        out.push(&self.attention);
        out.push(&self.out_w);
        out.push(&self.out_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> = vec![&mut self.embedding];
        out.extend(self.encoder.tensors_mut());
        out.extend(self.decoder.tensors_mut());
        out.push(&mut self.attention);
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    /// Checks that a sequence can appear as a source or target: ids in
    /// range and no `<eos>` (framing adds it).
    pub(crate) fn check_seq(&self, seq: &TokenSeq) -> Result<(), Seq2SeqError> {
        for &id in seq.ids() {
            if id as usize >= self.vocab_size || id == EOS_ID {
                return Err(Seq2SeqError::InvalidId {
                    id,
                    vocab_size: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Copies all parameters onto `tape` as differentiable leaves.
    pub fn lease(&self, tape: &Tape<F>) -> Seq2SeqVars<F> {
        Seq2SeqVars {
            tape: tape.clone(),
            vocab_size: self.vocab_size,
            hidden_dim: self.hidden_dim,
            vars: self.tensors().into_iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Adds the tape gradients of a lease back into the parameters'
    /// gradient buffers.
    pub fn accumulate_grads(&mut self, vars: &Seq2SeqVars<F>) {
        let tape = vars.tape.clone();
        for (tensor, var) in self.tensors_mut().into_iter().zip(&vars.vars) {
            tape.accumulate_into(var, tensor);
        }
    }

    /// One SGD step from the accumulated gradients; clears them. A zero
    /// learning rate is a no-op (gradients still cleared).
    pub fn apply_step(&mut self, lr: F, clip: F) -> Result<(), Seq2SeqError> {
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

/// A generator leased onto a tape: parameter leaves plus the forward
/// passes that build on them.
pub struct Seq2SeqVars<F: Scalar> {
    tape: Tape<F>,
    vocab_size: usize,
    hidden_dim: usize,
    vars: Vec<Var<F>>,
}

impl<F: Scalar> Seq2SeqVars<F> {
    /// Wraps leaves created elsewhere on `tape` (gradient verification
    /// needs to route externally owned leaves through the forward pass).
    /// The leaves must mirror [`Seq2SeqParams::tensors`] in order and
    /// shape.
    pub fn from_leaves(
        tape: &Tape<F>,
        vocab_size: usize,
        hidden_dim: usize,
        vars: Vec<Var<F>>,
    ) -> Self {
        Seq2SeqVars {
            tape: tape.clone(),
            vocab_size,
            hidden_dim,
            vars,
        }
    }
}

/// Decoder recurrence state: hidden vector and previous attention
/// context, both `[H]`.
#[derive(Clone)]
pub struct DecoderState<F: Scalar> {
    h: Var<F>,
    context: Var<F>,
}

/// Encoded source: per-position states, the one-hot selectors reused by
/// every attention query, and the initial decoder state.
pub struct EncodedSource<F: Scalar> {
    states: Vec<Var<F>>,
    selectors: Vec<Var<F>>,
    pub initial: DecoderState<F>,
}

/// One sampled trajectory and the differentiable log-probability of
/// exactly the choices made (the `<eos>` term is present only when the
/// model actually emitted `<eos>`).
pub struct SampledOutput<F: Scalar> {
    pub tokens: TokenSeq,
    pub log_prob: Var<F>,
    pub step_log_probs: Vec<F>,
    pub ended_with_eos: bool,
}

enum StepChoice {
    Sample,
    Forced(u32),
}

impl<F: Scalar> Seq2SeqVars<F> {
    fn idx(&self, i: usize) -> &Var<F> {
        &self.vars[i]
    }

    fn embedding(&self) -> &Var<F> {
        self.idx(0)
    }

    fn gru(&self, base: usize) -> [&Var<F>; 9] {
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

    fn attention(&self) -> &Var<F> {
        self.idx(19)
    }

    fn out_w(&self) -> &Var<F> {
        self.idx(20)
    }

    fn out_b(&self) -> &Var<F> {
        self.idx(21)
    }

    fn gru_cell(
        &self,
        weights: [&Var<F>; 9],
        x: &Var<F>,
        h: &Var<F>,
    ) -> Result<Var<F>, AutodiffError> {
        gru_cell(&self.tape, weights, x, h, self.hidden_dim)
    }

    fn one_hot(&self, len: usize, index: usize) -> Result<Var<F>, AutodiffError> {
        let mut v = vec![F::zero(); len];
        v[index] = F::one();
        self.tape.constant(vec![len], v)
    }

    /// Runs the encoder over the source tokens.
    pub fn encode(&self, source: &TokenSeq) -> Result<EncodedSource<F>, Seq2SeqError> {
        if source.is_empty() {
            return Err(Seq2SeqError::EmptyUtterance);
        }
        let mut h = self.tape.constant(
            vec![self.hidden_dim],
            vec![F::zero(); self.hidden_dim],
        )?;
        let enc = self.gru(1);
        let mut states = Vec::with_capacity(source.len());
        for &id in source.ids() {
            let x = self.tape.embed(self.embedding(), id as usize)?;
            h = self.gru_cell(enc, &x, &h)?;
            states.push(h.clone());
        }
        let selectors = (0..states.len())
            .map(|i| self.one_hot(states.len(), i))
            .collect::<Result<Vec<_>, _>>()?;
        let zero_context = self.tape.constant(
            vec![self.hidden_dim],
            vec![F::zero(); self.hidden_dim],
        )?;
        Ok(EncodedSource {
            initial: DecoderState {
                h: states.last().expect("source non-empty").clone(),
                context: zero_context,
            },
            states,
            selectors,
        })
    }

    /// Multiplicative attention over the encoded source for one decoder
    /// state: `score_j = h·W_a·enc_j`, weights by softmax, context as the
    /// weighted sum of encoder states.
    fn attend(&self, encoded: &EncodedSource<F>, h: &Var<F>) -> Result<Var<F>, AutodiffError> {
        let query = h.matmul(self.attention())?;
        let scores: Vec<Var<F>> = encoded
            .states
            .iter()
            .map(|s| query.matmul(s))
            .collect::<Result<_, _>>()?;
        let score_refs: Vec<&Var<F>> = scores.iter().collect();
        let weights = self.tape.concat(&score_refs)?.softmax()?;
        let mut context: Option<Var<F>> = None;
        for (state, selector) in encoded.states.iter().zip(&encoded.selectors) {
            let w = weights.matmul(selector)?;
            let term = w.mul(state)?;
            context = Some(match context {
                None => term,
                Some(c) => c.add(&term)?,
            });
        }
        Ok(context.expect("source non-empty"))
    }

    /// One decoder step conditioned on the previous token; returns the
    /// next state and the `[V]` log-softmax over the next token.
    pub fn decode_step(
        &self,
        encoded: &EncodedSource<F>,
        prev_token: u32,
        state: &DecoderState<F>,
    ) -> Result<(DecoderState<F>, Var<F>), Seq2SeqError> {
        if prev_token as usize >= self.vocab_size {
            return Err(Seq2SeqError::InvalidId {
                id: prev_token,
                vocab_size: self.vocab_size,
            });
        }
        let emb = self.tape.embed(self.embedding(), prev_token as usize)?;
        let input = self.tape.concat(&[&emb, &state.context])?;
        let h = self.gru_cell(self.gru(10), &input, &state.h)?;
        let context = self.attend(encoded, &h)?;
        let logits = self
            .tape
            .concat(&[&h, &context])?
            .matmul(self.out_w())?
            .add(self.out_b())?;
        let log_probs = logits.log_softmax()?;
        Ok((DecoderState { h, context }, log_probs))
    }

    fn rollout(
        &self,
        source: &TokenSeq,
        steps: &[StepChoice],
        include_final_eos: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<SampledOutput<F>, Seq2SeqError> {
        let encoded = self.encode(source)?;
        let mut state = encoded.initial.clone();
        let mut prev = BOS_ID;
        let mut rng = rng;
        let mut tokens = Vec::new();
        let mut step_log_probs = Vec::new();
        let mut total: Option<Var<F>> = None;
        let mut ended_with_eos = false;

        for choice in steps {
            let (next_state, log_probs) = self.decode_step(&encoded, prev, &state)?;
            state = next_state;
            let chosen = match choice {
                StepChoice::Forced(id) => *id,
                StepChoice::Sample => {
                    let rng = rng.as_mut().expect("sampling steps carry an rng");
                    let values = self.tape.value(&log_probs);
                    sample_index(&values, rng) as u32
                }
            };
            let lp = log_probs.matmul(&self.one_hot(self.vocab_size, chosen as usize)?)?;
            step_log_probs.push(self.tape.scalar_value(&lp));
            total = Some(match total {
                None => lp,
                Some(t) => t.add(&lp)?,
            });
            if chosen == EOS_ID {
                ended_with_eos = true;
                break;
            }
            tokens.push(chosen);
            prev = chosen;
        }

        if include_final_eos && !ended_with_eos {
            let (_state, log_probs) = self.decode_step(&encoded, prev, &state)?;
            let lp = log_probs.matmul(&self.one_hot(self.vocab_size, EOS_ID as usize)?)?;
            step_log_probs.push(self.tape.scalar_value(&lp));
            total = Some(match total {
                None => lp,
                Some(t) => t.add(&lp)?,
            });
            ended_with_eos = true;
        }

        let log_prob = match total {
            Some(t) => t,
            // Zero-step rollout: log-probability of the empty prefix.
            None => self.tape.constant(vec![1], vec![F::zero()])?,
        };
        Ok(SampledOutput {
            tokens: TokenSeq::new(tokens),
            log_prob,
            step_log_probs,
            ended_with_eos,
        })
    }

    /// Teacher-forced `log P(target | source)`: the decoder consumes
    /// `<bos> target`, the labels are `target <eos>`.
    pub fn conditional_log_prob(
        &self,
        source: &TokenSeq,
        target: &TokenSeq,
    ) -> Result<Var<F>, Seq2SeqError> {
        if target.is_empty() {
            return Err(Seq2SeqError::EmptyUtterance);
        }
        self.check_target(target)?;
        let steps: Vec<StepChoice> = target
            .ids()
            .iter()
            .map(|&id| StepChoice::Forced(id))
            .collect();
        Ok(self.rollout(source, &steps, true, None)?.log_prob)
    }

    /// `log P` of an already-drawn trajectory: forced tokens, with the
    /// terminal `<eos>` transition only if the trajectory ended with one.
    pub fn trajectory_log_prob(
        &self,
        source: &TokenSeq,
        tokens: &TokenSeq,
        ended_with_eos: bool,
    ) -> Result<Var<F>, Seq2SeqError> {
        self.check_target(tokens)?;
        let steps: Vec<StepChoice> = tokens
            .ids()
            .iter()
            .map(|&id| StepChoice::Forced(id))
            .collect();
        Ok(self.rollout(source, &steps, ended_with_eos, None)?.log_prob)
    }

    fn check_target(&self, target: &TokenSeq) -> Result<(), Seq2SeqError> {
        for &id in target.ids() {
            if id as usize >= self.vocab_size || id == EOS_ID {
                return Err(Seq2SeqError::InvalidId {
                    id,
                    vocab_size: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Multinomial sampling from each step's softmax until `<eos>` or
    /// `max_len` tokens.
    pub fn sample(
        &self,
        source: &TokenSeq,
        max_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<SampledOutput<F>, Seq2SeqError> {
        if max_len == 0 {
            return Err(Seq2SeqError::BadParam("max-len must be at least 1".into()));
        }
        let steps: Vec<StepChoice> = (0..max_len).map(|_| StepChoice::Sample).collect();
        self.rollout(source, &steps, false, Some(rng))
    }
}

/// One GRU transition `h' = (1 − z)·h + z·tanh(x·W + (r⊙h)·U + b)` with
/// update gate `z` and reset gate `r`, all on the given tape.
pub(crate) fn gru_cell<F: Scalar>(
    tape: &Tape<F>,
    weights: [&Var<F>; 9],
    x: &Var<F>,
    h: &Var<F>,
    hidden_dim: usize,
) -> Result<Var<F>, AutodiffError> {
    let [w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h] = weights;
    let z = x
        .matmul(w_z)?
        .add(&h.matmul(u_z)?)?
        .add(b_z)?
        .sigmoid()?;
    let r = x
        .matmul(w_r)?
        .add(&h.matmul(u_r)?)?
        .add(b_r)?
        .sigmoid()?;
    let cand = x
        .matmul(w_h)?
        .add(&r.mul(h)?.matmul(u_h)?)?
        .add(b_h)?
        .tanh()?;
    let keep = tape.ones(vec![hidden_dim]).add(&z.scale(-F::one())?)?;
    keep.mul(h)?.add(&z.mul(&cand)?)
}

fn sample_index<F: Scalar>(log_probs: &[F], rng: &mut ChaCha8Rng) -> usize {
    let u = F::from_f64_lossy(rng.random::<f64>());
    let mut acc = F::zero();
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// Value-level `log P(target | source)`.
pub fn conditional_log_prob<F: Scalar>(
    params: &Seq2SeqParams<F>,
    source: &TokenSeq,
    target: &TokenSeq,
) -> Result<F, Seq2SeqError> {
    params.check_seq(source)?;
    let tape = Tape::new();
    let vars = params.lease(&tape);
    let lp = vars.conditional_log_prob(source, target)?;
    Ok(tape.scalar_value(&lp))
}

/// Samples one output sequence; deterministic in `rng_seed`.
pub fn sample_output<F: Scalar>(
    params: &Seq2SeqParams<F>,
    source: &TokenSeq,
    max_len: usize,
    rng_seed: u64,
) -> Result<(TokenSeq, Vec<F>), Seq2SeqError> {
    use rand::SeedableRng;
    params.check_seq(source)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let tape = Tape::new();
    let vars = params.lease(&tape);
    let out = vars.sample(source, max_len, &mut rng)?;
    Ok((out.tokens, out.step_log_probs))
}

/// Argmax decoding, ties broken by the lowest token id; stops at `<eos>`
/// or after `max_len` tokens.
pub fn greedy_decode<F: Scalar>(
    params: &Seq2SeqParams<F>,
    source: &TokenSeq,
    max_len: usize,
) -> Result<TokenSeq, Seq2SeqError> {
    params.check_seq(source)?;
    let tape = Tape::new();
    let vars = params.lease(&tape);
    let encoded = vars.encode(source)?;
    let mut state = encoded.initial.clone();
    let mut prev = BOS_ID;
    let mut tokens = Vec::new();
    for _ in 0..max_len {
        let (next_state, log_probs) = vars.decode_step(&encoded, prev, &state)?;
        state = next_state;
        let values = tape.value(&log_probs);
        let mut best = 0usize;
        for (i, v) in values.iter().enumerate() {
            if *v > values[best] {
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

struct BeamHyp<F: Scalar> {
    tokens: Vec<u32>,
    score: F,
    state: DecoderState<F>,
    prev: u32,
}

struct PoolEntry<F> {
    tokens: Vec<u32>,
    score: F,
    completed_at: usize,
}

/// Beam search over raw summed log-probabilities (no length
/// normalization). Hypotheses that emit `<eos>` retire with its
/// log-probability included; hypotheses alive after `max_len` steps
/// retire as-is. Returns up to `beam_size` results sorted by score
/// descending, ties by earlier completion then lexicographic tokens.
pub fn beam_decode<F: Scalar>(
    params: &Seq2SeqParams<F>,
    source: &TokenSeq,
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<(TokenSeq, F)>, Seq2SeqError> {
    if beam_size == 0 {
        return Err(Seq2SeqError::BadParam("beam size must be at least 1".into()));
    }
    params.check_seq(source)?;
    let tape = Tape::new();
    let vars = params.lease(&tape);
    let encoded = vars.encode(source)?;

    let mut active = vec![BeamHyp {
        tokens: Vec::new(),
        score: F::zero(),
        state: encoded.initial.clone(),
        prev: BOS_ID,
    }];
    let mut pool: Vec<PoolEntry<F>> = Vec::new();

    for step in 1..=max_len {
        if active.is_empty() {
            break;
        }
        // Candidates in (hypothesis, token id) order; the stable sort
        // below then resolves score ties toward lower ids, matching the
        // greedy tie-break.
        let mut candidates: Vec<(usize, u32, F)> = Vec::new();
        let mut expansions = Vec::with_capacity(active.len());
        for (hi, hyp) in active.iter().enumerate() {
            let (state, log_probs) = vars.decode_step(&encoded, hyp.prev, &hyp.state)?;
            let values = tape.value(&log_probs);
            for (id, lp) in values.iter().enumerate() {
                candidates.push((hi, id as u32, hyp.score + *lp));
            }
            expansions.push(state);
        }
        candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).expect("scores are finite"));
        candidates.truncate(beam_size);

        let mut next_active = Vec::new();
        for (hi, id, score) in candidates {
            if id == EOS_ID {
                pool.push(PoolEntry {
                    tokens: active[hi].tokens.clone(),
                    score,
                    completed_at: step,
                });
            } else {
                let mut tokens = active[hi].tokens.clone();
                tokens.push(id);
                next_active.push(BeamHyp {
                    tokens,
                    score,
                    state: expansions[hi].clone(),
                    prev: id,
                });
            }
        }
        active = next_active;
    }
    for hyp in active {
        pool.push(PoolEntry {
            tokens: hyp.tokens,
            score: hyp.score,
            completed_at: max_len + 1,
        });
    }

    pool.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then(a.completed_at.cmp(&b.completed_at))
            .then(a.tokens.cmp(&b.tokens))
    });
    pool.truncate(beam_size);
    Ok(pool
        .into_iter()
        .map(|e| (TokenSeq::new(e.tokens), e.score))
        .collect())
}

/// One teacher-forced maximum-likelihood update on a batch; returns the
/// pre-update mean negative log-likelihood. `lr` of zero skips the
/// update but still reports the loss.
pub fn mle_step<F: Scalar>(
    params: &mut Seq2SeqParams<F>,
    batch: &[&QRPair],
    direction: Direction,
    lr: F,
    clip: F,
) -> Result<F, Seq2SeqError> {
    if batch.is_empty() {
        return Err(Seq2SeqError::BadParam("batch must be non-empty".into()));
    }
    let tape = Tape::new();
    let vars = params.lease(&tape);
    let mut total: Option<Var<F>> = None;
    for pair in batch {
        let (source, target) = direction.split(pair);
        params.check_seq(source)?;
        let lp = vars.conditional_log_prob(source, target)?;
        total = Some(match total {
            None => lp,
            Some(t) => t.add(&lp)?,
        });
    }
    let mean_nll = total
        .expect("batch non-empty")
        .scale(-F::one() / F::from_f64_lossy(batch.len() as f64))?;
    let loss = tape.scalar_value(&mean_nll);
    tape.backward(&mean_nll)?;
    params.accumulate_grads(&vars);
    params.apply_step(lr, clip)?;
    Ok(loss)
}
