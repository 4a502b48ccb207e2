//! Dual adversarial training.
//!
//! Couples the two directional generators through a duality regularizer
//! on real pairs, drives them with discriminator rewards through policy
//! gradients, and wraps both in the alternating loop: `d` discriminator
//! steps, then `g` generator steps (regularizer + policy + teacher
//! forcing), per group of batches, per epoch.
//!
//! Ablations share one code path, switched by [`TrainMode`]:
//! `mle-only` keeps just teacher forcing, `dual-only` adds the duality
//! term, `adv-only` the policy term, `dual-adv` both. With both
//! adversarial weights at zero, `dual-adv` reproduces `dual-only`
//! bit for bit (the policy branch is skipped before it draws anything).

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::bigram::{BigramError, BigramLm};
use crate::data::{batch_iter, BatchIter, Corpus, DataError, Direction, QRPair, TokenSeq, Vocab};
use crate::discriminator::{discriminator_step, score_pair, DiscError, DiscriminatorParams};
use crate::rng::{derive_seed, streams};
use crate::scalar::Scalar;
use crate::seq2seq::{mle_step, Seq2SeqError, Seq2SeqParams, Seq2SeqVars};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Current checkpoint file format tag. Readers refuse anything else.
pub const CHECKPOINT_FORMAT: &str = "dal-ckpt-v1";

const DIRECTIONS: [Direction; 2] = [Direction::QueryToResponse, Direction::ResponseToQuery];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training configuration: {0}")]
    BadConfig(String),

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error(transparent)]
    Generator(#[from] Seq2SeqError),

    #[error(transparent)]
    Discriminator(#[from] DiscError),

    #[error(transparent)]
    LanguageModel(#[from] BigramError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("training diverged in {phase} epoch {epoch}: {detail}")]
    Diverged {
        phase: TrainPhase,
        epoch: usize,
        detail: String,
    },

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("checkpoint format {found:?} is not supported; this build reads {expected:?}")]
    CheckpointFormat { found: String, expected: String },

    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which loss terms the generator updates carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Teacher forcing only.
    MleOnly,
    /// Duality regularizer + teacher forcing.
    DualOnly,
    /// Policy gradient + teacher forcing.
    AdvOnly,
    /// Duality regularizer + policy gradient + teacher forcing.
    DualAdv,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::MleOnly,
        TrainMode::DualOnly,
        TrainMode::AdvOnly,
        TrainMode::DualAdv,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::MleOnly => "mle-only",
            TrainMode::DualOnly => "dual-only",
            TrainMode::AdvOnly => "adv-only",
            TrainMode::DualAdv => "dual-adv",
        }
    }

    /// Does this mode optimize the duality regularizer?
    pub fn uses_duality(&self) -> bool {
        matches!(self, TrainMode::DualOnly | TrainMode::DualAdv)
    }

    /// Does this mode train discriminators and apply policy gradients?
    pub fn uses_adversary(&self) -> bool {
        matches!(self, TrainMode::AdvOnly | TrainMode::DualAdv)
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TrainMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                TrainError::BadConfig(format!(
                    "unknown mode {s:?}; expected one of mle-only, dual-only, adv-only, dual-adv"
                ))
            })
    }
}

/// Everything that pins a training run. One seed determines every
/// random choice: initialization, shuffles, sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Token embedding width for generators and discriminators.
    pub embed_dim: usize,
    /// GRU state width; discriminator feature width reuses this.
    pub hidden_dim: usize,
    /// Adversarial weight on the query→response generator.
    pub lambda_qr: f64,
    /// Adversarial weight on the response→query generator.
    pub lambda_rq: f64,
    /// Discriminator inner steps per group.
    pub disc_steps: usize,
    /// Generator inner steps per group.
    pub gen_steps: usize,
    pub lr_gen: f64,
    pub lr_disc: f64,
    /// Global gradient-norm clip; `f64::INFINITY` disables clipping.
    /// (JSON has no infinity, so that case round-trips as the string
    /// `"inf"`.)
    #[serde(with = "clip_serde")]
    pub grad_clip: f64,
    /// Reward-baseline EMA decay, in `[0, 1)`.
    pub baseline_decay: f64,
    /// Add-k smoothing for the marginal bigram language models.
    pub smoothing_k: f64,
    pub pretrain_epochs_gen: usize,
    pub pretrain_epochs_disc: usize,
    pub dal_epochs: usize,
    pub batch_size: usize,
    /// Sampling and decoding length cap.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::DualAdv,
            embed_dim: 32,
            hidden_dim: 64,
            lambda_qr: 1.0,
            lambda_rq: 1.0,
            disc_steps: 1,
            gen_steps: 1,
            lr_gen: 0.2,
            lr_disc: 0.2,
            grad_clip: 5.0,
            baseline_decay: 0.9,
            smoothing_k: 1.0,
            pretrain_epochs_gen: 10,
            pretrain_epochs_disc: 5,
            dal_epochs: 30,
            batch_size: 16,
            max_len: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("embed-dim and hidden-dim must be positive".into());
        }
        for (name, v) in [("lambda-qr", self.lambda_qr), ("lambda-rq", self.lambda_rq)] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.disc_steps == 0 || self.gen_steps == 0 {
            return bad("disc-steps and gen-steps must be at least 1".into());
        }
        for (name, v) in [("lr-gen", self.lr_gen), ("lr-disc", self.lr_disc)] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad(format!(
                "grad-clip must be positive (infinity disables clipping), got {}",
                self.grad_clip
            ));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad(format!(
                "baseline-decay must lie in [0, 1), got {}",
                self.baseline_decay
            ));
        }
        if !self.smoothing_k.is_finite() || self.smoothing_k <= 0.0 {
            return bad(format!(
                "smoothing-k must be finite and positive, got {}",
                self.smoothing_k
            ));
        }
        if self.batch_size == 0 {
            return bad("batch-size must be at least 1".into());
        }
        if self.max_len == 0 {
            return bad("max-len must be at least 1".into());
        }
        Ok(())
    }
}

/// JSON representation of the clip threshold: a plain number when
/// finite, the string `"inf"` when clipping is disabled.
mod clip_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!(
                "grad-clip must be a number or \"inf\", got {t:?}"
            ))),
        }
    }
}

/// Exponential moving average of observed rewards. Rewards are
/// discriminator probabilities, so starting at `0.5` keeps the value in
/// `[0, 1]` forever.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBaseline {
    value: f64,
    decay: f64,
}

impl RewardBaseline {
    pub fn new(decay: f64) -> Result<Self, TrainError> {
        Self::with_value(decay, 0.5)
    }

    pub fn with_value(decay: f64, value: f64) -> Result<Self, TrainError> {
        if !(0.0..1.0).contains(&decay) {
            return Err(TrainError::BadConfig(format!(
                "baseline decay must lie in [0, 1), got {decay}"
            )));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(TrainError::BadConfig(format!(
                "baseline value must lie in [0, 1], got {value}"
            )));
        }
        Ok(RewardBaseline { value, decay })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// Folds a batch-mean reward into the average.
    pub fn update(&mut self, mean_reward: f64) {
        debug_assert!((0.0..=1.0).contains(&mean_reward));
        self.value = self.decay * self.value + (1.0 - self.decay) * mean_reward;
    }
}

/// The advantage a sampled trajectory's log-probability is scaled by.
/// Shifting rewards and baseline by the same constant cancels here,
/// which is what makes the update baseline-shift invariant.
pub(crate) fn advantage(reward: f64, baseline: f64) -> f64 {
    reward - baseline
}

/// The full trained state: both generators, both discriminators, the
/// marginal language models, reward baselines, vocabulary and config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DalModel<F: Scalar> {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub gen_qr: Seq2SeqParams<F>,
    pub gen_rq: Seq2SeqParams<F>,
    pub disc_qr: DiscriminatorParams<F>,
    pub disc_rq: DiscriminatorParams<F>,
    pub lm_q: BigramLm,
    pub lm_r: BigramLm,
    pub baseline_qr: RewardBaseline,
    pub baseline_rq: RewardBaseline,
    /// Completed epochs of the adversarial phase.
    pub epochs_trained: usize,
}

impl<F: Scalar> DalModel<F> {
    /// Fresh model: random generators and discriminators (independent
    /// sub-seeds of `config.seed`), uniform language models until
    /// [`pretrain`] fits them, baselines at `0.5`.
    pub fn init(vocab: Vocab, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let v = vocab.size();
        let rng = |stream| ChaCha8Rng::seed_from_u64(derive_seed(config.seed, stream, 0));
        let gen_qr = Seq2SeqParams::init(
            v,
            config.embed_dim,
            config.hidden_dim,
            &mut rng(streams::INIT_GEN_QR),
        )?;
        let gen_rq = Seq2SeqParams::init(
            v,
            config.embed_dim,
            config.hidden_dim,
            &mut rng(streams::INIT_GEN_RQ),
        )?;
        let disc_qr = DiscriminatorParams::init(
            v,
            config.embed_dim,
            config.hidden_dim,
            config.hidden_dim,
            &mut rng(streams::INIT_DISC_QR),
        )?;
        let disc_rq = DiscriminatorParams::init(
            v,
            config.embed_dim,
            config.hidden_dim,
            config.hidden_dim,
            &mut rng(streams::INIT_DISC_RQ),
        )?;
        Ok(DalModel {
            vocab,
            gen_qr,
            gen_rq,
            disc_qr,
            disc_rq,
            lm_q: BigramLm::uniform(v, config.smoothing_k)?,
            lm_r: BigramLm::uniform(v, config.smoothing_k)?,
            baseline_qr: RewardBaseline::new(config.baseline_decay)?,
            baseline_rq: RewardBaseline::new(config.baseline_decay)?,
            epochs_trained: 0,
            config,
        })
    }

    pub fn generator(&self, direction: Direction) -> &Seq2SeqParams<F> {
        match direction {
            Direction::QueryToResponse => &self.gen_qr,
            Direction::ResponseToQuery => &self.gen_rq,
        }
    }

    pub fn generator_mut(&mut self, direction: Direction) -> &mut Seq2SeqParams<F> {
        match direction {
            Direction::QueryToResponse => &mut self.gen_qr,
            Direction::ResponseToQuery => &mut self.gen_rq,
        }
    }

    /// The discriminator that judges `(source, generated target)` pairs
    /// for this direction.
    pub fn discriminator(&self, direction: Direction) -> &DiscriminatorParams<F> {
        match direction {
            Direction::QueryToResponse => &self.disc_qr,
            Direction::ResponseToQuery => &self.disc_rq,
        }
    }

    pub fn discriminator_mut(&mut self, direction: Direction) -> &mut DiscriminatorParams<F> {
        match direction {
            Direction::QueryToResponse => &mut self.disc_qr,
            Direction::ResponseToQuery => &mut self.disc_rq,
        }
    }

    pub fn baseline(&self, direction: Direction) -> &RewardBaseline {
        match direction {
            Direction::QueryToResponse => &self.baseline_qr,
            Direction::ResponseToQuery => &self.baseline_rq,
        }
    }

    pub fn baseline_mut(&mut self, direction: Direction) -> &mut RewardBaseline {
        match direction {
            Direction::QueryToResponse => &mut self.baseline_qr,
            Direction::ResponseToQuery => &mut self.baseline_rq,
        }
    }

    pub fn lambda(&self, direction: Direction) -> f64 {
        match direction {
            Direction::QueryToResponse => self.config.lambda_qr,
            Direction::ResponseToQuery => self.config.lambda_rq,
        }
    }

    fn check_corpus(&self, corpus: &Corpus) -> Result<(), TrainError> {
        if corpus.is_empty() {
            return Err(TrainError::BadConfig("training corpus is empty".into()));
        }
        if corpus.vocab() != &self.vocab {
            return Err(TrainError::BadConfig(
                "corpus vocabulary differs from the model's".into(),
            ));
        }
        Ok(())
    }
}

/// `(log P_r(r) + log P(q|r) − log P_q(q) − log P(r|q))²` as plain
/// arithmetic; the tape version below matches this on its node values.
pub fn duality_gap_value(
    log_p_r: f64,
    log_q_given_r: f64,
    log_p_q: f64,
    log_r_given_q: f64,
) -> f64 {
    let gap = log_p_r + log_q_given_r - log_p_q - log_r_given_q;
    gap * gap
}

/// Signed duality gap of one pair: how far the two factorizations of
/// `log P(q, r)` disagree. Squaring it gives the regularizer.
pub fn duality_gap<F: Scalar>(model: &DalModel<F>, pair: &QRPair) -> Result<f64, TrainError> {
    let fwd =
        crate::seq2seq::conditional_log_prob(&model.gen_qr, pair.query(), pair.response())?
            .to_f64_lossy();
    let rev =
        crate::seq2seq::conditional_log_prob(&model.gen_rq, pair.response(), pair.query())?
            .to_f64_lossy();
    let lp_r = model.lm_r.sequence_log_prob(pair.response())?;
    let lp_q = model.lm_q.sequence_log_prob(pair.query())?;
    Ok(lp_r + rev - lp_q - fwd)
}

/// Squared duality gap of one real pair, off-tape.
pub fn dual_regularizer<F: Scalar>(model: &DalModel<F>, pair: &QRPair) -> Result<f64, TrainError> {
    let gap = duality_gap(model, pair)?;
    Ok(gap * gap)
}

/// Builds the squared duality gap of one pair on `tape`. The language
/// model terms are constants; gradients flow into both generators.
pub fn dual_regularizer_term<F: Scalar>(
    tape: &Tape<F>,
    gen_qr: &Seq2SeqVars<F>,
    gen_rq: &Seq2SeqVars<F>,
    lm_q: &BigramLm,
    lm_r: &BigramLm,
    pair: &QRPair,
) -> Result<Var<F>, TrainError> {
    let lp_r = lm_r.sequence_log_prob(pair.response())?;
    let lp_q = lm_q.sequence_log_prob(pair.query())?;
    let fwd = gen_qr.conditional_log_prob(pair.query(), pair.response())?;
    let rev = gen_rq.conditional_log_prob(pair.response(), pair.query())?;
    let shift = tape.constant_scalar(F::from_f64_lossy(lp_r - lp_q));
    let gap = rev.add(&shift)?.add(&fwd.scale(-F::one())?)?;
    Ok(gap.mul(&gap)?)
}

/// What one policy-gradient update saw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyOutcome {
    /// Mean discriminator reward over scored samples; `None` when every
    /// sample came out empty and no update was applied.
    pub mean_reward: Option<f64>,
    pub sampled: usize,
    pub skipped_empty: usize,
}

/// One REINFORCE step: sample a target per source, read its reward from
/// the frozen discriminator, and ascend `mean((R − b)·log P)`. The
/// baseline is the pre-update EMA value and is folded forward after.
pub fn policy_gradient_step<F: Scalar>(
    generator: &mut Seq2SeqParams<F>,
    discriminator: &DiscriminatorParams<F>,
    baseline: &mut RewardBaseline,
    sources: &[&TokenSeq],
    max_len: usize,
    lr: F,
    clip: F,
    rng: &mut ChaCha8Rng,
) -> Result<PolicyOutcome, TrainError> {
    if sources.is_empty() {
        return Err(TrainError::BadConfig(
            "policy step needs at least one source".into(),
        ));
    }
    let tape = Tape::new();
    let vars = generator.lease(&tape);
    let b = baseline.value();
    let mut weighted: Option<Var<F>> = None;
    let mut rewards = Vec::new();
    let mut skipped = 0usize;
    for source in sources {
        let out = vars.sample(source, max_len, rng)?;
        if out.tokens.is_empty() {
            skipped += 1;
            continue;
        }
        let reward = score_pair(discriminator, source.ids(), out.tokens.ids())?.to_f64_lossy();
        let term = out
            .log_prob
            .scale(F::from_f64_lossy(advantage(reward, b)))?;
        weighted = Some(match weighted {
            None => term,
            Some(w) => w.add(&term)?,
        });
        rewards.push(reward);
    }
    let Some(weighted) = weighted else {
        return Ok(PolicyOutcome {
            mean_reward: None,
            sampled: 0,
            skipped_empty: skipped,
        });
    };
    let n = rewards.len();
    let loss = weighted.scale(-F::one() / F::from_f64_lossy(n as f64))?;
    tape.backward(&loss)?;
    generator.accumulate_grads(&vars);
    generator.apply_step(lr, clip)?;
    let mean = rewards.iter().sum::<f64>() / n as f64;
    baseline.update(mean);
    Ok(PolicyOutcome {
        mean_reward: Some(mean),
        sampled: n,
        skipped_empty: skipped,
    })
}

/// What one combined generator update saw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorStepMetrics {
    /// Batch-mean squared duality gap, when the mode carries that term.
    pub mean_dual: Option<f64>,
    /// Mean reward over scored samples, when the policy term ran.
    pub mean_reward: Option<f64>,
    pub sampled: usize,
    pub skipped_empty: usize,
}

/// One combined update of the generator for `direction`: gradient of
/// `mean Υ − λ·mean((R − b)·log P)` where Υ is the squared duality gap
/// on the real batch. Which terms are present follows the config mode;
/// with the policy term absent (or λ = 0) the RNG is never touched, so
/// `dual-adv` at λ = 0 is bitwise `dual-only`. Only this direction's
/// generator moves; the partner only shapes the duality term.
pub fn combined_generator_step<F: Scalar>(
    model: &mut DalModel<F>,
    batch: &[&QRPair],
    direction: Direction,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratorStepMetrics, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::BadConfig("batch must be non-empty".into()));
    }
    let lambda = model.lambda(direction);
    let use_dual = model.config.mode.uses_duality();
    let use_adv = model.config.mode.uses_adversary() && lambda > 0.0;
    let max_len = model.config.max_len;
    let lr = F::from_f64_lossy(model.config.lr_gen);
    let clip = F::from_f64_lossy(model.config.grad_clip);

    let tape = Tape::new();
    let main = model.generator(direction).lease(&tape);
    let mut loss: Option<Var<F>> = None;
    let mut mean_dual = None;

    if use_dual {
        let partner = model.generator(direction.flip()).lease(&tape);
        let (qr, rq) = match direction {
            Direction::QueryToResponse => (&main, &partner),
            Direction::ResponseToQuery => (&partner, &main),
        };
        let mut sum: Option<Var<F>> = None;
        for pair in batch {
            let term = dual_regularizer_term(&tape, qr, rq, &model.lm_q, &model.lm_r, pair)?;
            sum = Some(match sum {
                None => term,
                Some(s) => s.add(&term)?,
            });
        }
        let mean = sum
            .expect("batch non-empty")
            .scale(F::one() / F::from_f64_lossy(batch.len() as f64))?;
        mean_dual = Some(tape.scalar_value(&mean).to_f64_lossy());
        loss = Some(mean);
    }

    let mut rewards = Vec::new();
    let mut skipped = 0usize;
    if use_adv {
        let b = model.baseline(direction).value();
        let mut weighted: Option<Var<F>> = None;
        for pair in batch {
            let (source, _) = direction.split(pair);
            let out = main.sample(source, max_len, rng)?;
            if out.tokens.is_empty() {
                skipped += 1;
                continue;
            }
            let reward = score_pair(model.discriminator(direction), source.ids(), out.tokens.ids())?
                .to_f64_lossy();
            let term = out
                .log_prob
                .scale(F::from_f64_lossy(advantage(reward, b)))?;
            weighted = Some(match weighted {
                None => term,
                Some(w) => w.add(&term)?,
            });
            rewards.push(reward);
        }
        if let Some(w) = weighted {
            let policy =
                w.scale(-F::from_f64_lossy(lambda) / F::from_f64_lossy(rewards.len() as f64))?;
            loss = Some(match loss {
                None => policy,
                Some(l) => l.add(&policy)?,
            });
        }
    }

    let sampled = rewards.len();
    let mean_reward = (!rewards.is_empty()).then(|| rewards.iter().sum::<f64>() / sampled as f64);

    if let Some(loss) = loss {
        tape.backward(&loss)?;
        let generator = model.generator_mut(direction);
        generator.accumulate_grads(&main);
        generator.apply_step(lr, clip)?;
    }
    if let Some(mean) = mean_reward {
        model.baseline_mut(direction).update(mean);
    }
    Ok(GeneratorStepMetrics {
        mean_dual,
        mean_reward,
        sampled,
        skipped_empty: skipped,
    })
}

/// Supervised anchor: one MLE step on the real batch. Every mode runs
/// this after its generator update so the models never drift off the
/// data distribution.
pub fn teacher_forcing_step<F: Scalar>(
    generator: &mut Seq2SeqParams<F>,
    batch: &[&QRPair],
    direction: Direction,
    lr: F,
    clip: F,
) -> Result<F, TrainError> {
    Ok(mle_step(generator, batch, direction, lr, clip)?)
}

/// One discriminator update for `direction`: real `(source, target)`
/// pairs against `(source, sampled target)` fakes from the current
/// generator. Returns the pre-update loss, or `None` when every sample
/// came out empty and the step was skipped.
fn discriminator_update<F: Scalar>(
    model: &mut DalModel<F>,
    batch: &[&QRPair],
    direction: Direction,
    rng: &mut ChaCha8Rng,
) -> Result<Option<f64>, TrainError> {
    let max_len = model.config.max_len;
    let mut real = Vec::with_capacity(batch.len());
    let mut fake = Vec::new();
    {
        let tape = Tape::new();
        let vars = model.generator(direction).lease(&tape);
        for pair in batch {
            let (source, target) = direction.split(pair);
            real.push(QRPair::new(source.clone(), target.clone())?);
            let out = vars.sample(source, max_len, rng)?;
            if !out.tokens.is_empty() {
                fake.push(QRPair::new(source.clone(), out.tokens)?);
            }
        }
    }
    if fake.is_empty() {
        return Ok(None);
    }
    let real_refs: Vec<&QRPair> = real.iter().collect();
    let fake_refs: Vec<&QRPair> = fake.iter().collect();
    let lr = F::from_f64_lossy(model.config.lr_disc);
    let clip = F::from_f64_lossy(model.config.grad_clip);
    let loss = discriminator_step(
        model.discriminator_mut(direction),
        &real_refs,
        &fake_refs,
        lr,
        clip,
    )?;
    Ok(Some(loss.to_f64_lossy()))
}

/// Training phases, in the order they run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainPhase {
    PretrainGenerator,
    PretrainDiscriminator,
    Dal,
}

impl TrainPhase {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainPhase::PretrainGenerator => "pretrain-generator",
            TrainPhase::PretrainDiscriminator => "pretrain-discriminator",
            TrainPhase::Dal => "dal",
        }
    }
}

impl std::fmt::Display for TrainPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-epoch averages. Fields are `None` when the phase or mode never
/// produced that quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: TrainPhase,
    /// 1-based within its phase.
    pub epoch: usize,
    pub mean_nll_qr: Option<f64>,
    pub mean_nll_rq: Option<f64>,
    pub mean_disc_loss_qr: Option<f64>,
    pub mean_disc_loss_rq: Option<f64>,
    /// Mean squared duality gap across both directions' updates.
    pub mean_dual: Option<f64>,
    pub mean_reward_qr: Option<f64>,
    pub mean_reward_rq: Option<f64>,
    /// Baseline values at the end of the epoch.
    pub baseline_qr: f64,
    pub baseline_rq: f64,
}

/// Chronological record of a whole run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn phase(&self, phase: TrainPhase) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.phase == phase)
    }
}

#[derive(Default)]
struct MeanAcc {
    sum: f64,
    n: usize,
}

impl MeanAcc {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn push_opt(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.push(v);
        }
    }

    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Non-finite values surface as tape errors; those are divergence, not
/// caller mistakes, and get wrapped with phase and epoch context.
fn is_divergence(err: &TrainError) -> bool {
    matches!(
        err,
        TrainError::Autodiff(AutodiffError::NonFinite { .. })
            | TrainError::Generator(Seq2SeqError::Autodiff(AutodiffError::NonFinite { .. }))
            | TrainError::Discriminator(DiscError::Autodiff(AutodiffError::NonFinite { .. }))
    )
}

fn mark_divergence(err: TrainError, phase: TrainPhase, epoch: usize) -> TrainError {
    if is_divergence(&err) {
        TrainError::Diverged {
            phase,
            epoch,
            detail: err.to_string(),
        }
    } else {
        err
    }
}

/// Fits the marginal language models, then runs the supervised MLE
/// epochs for both generators and the warm-up epochs for both
/// discriminators (against samples from the pretrained generators).
/// With zero epochs configured, only the language models change.
pub fn pretrain<F: Scalar>(model: &mut DalModel<F>, corpus: &Corpus) -> Result<TrainLog, TrainError> {
    model.check_corpus(corpus)?;
    let cfg = model.config;
    let lr_gen = F::from_f64_lossy(cfg.lr_gen);
    let clip = F::from_f64_lossy(cfg.grad_clip);

    let queries: Vec<TokenSeq> = corpus.pairs().iter().map(|p| p.query().clone()).collect();
    let responses: Vec<TokenSeq> = corpus.pairs().iter().map(|p| p.response().clone()).collect();
    model.lm_q = BigramLm::fit(&queries, model.vocab.size(), cfg.smoothing_k)?;
    model.lm_r = BigramLm::fit(&responses, model.vocab.size(), cfg.smoothing_k)?;

    let mut log = TrainLog::default();
    for epoch in 1..=cfg.pretrain_epochs_gen {
        let phase = TrainPhase::PretrainGenerator;
        let shuffle = derive_seed(cfg.seed, streams::SHUFFLE_PRETRAIN_GEN, epoch as u64);
        let mut nll_qr = MeanAcc::default();
        let mut nll_rq = MeanAcc::default();
        for batch in batch_iter(corpus, cfg.batch_size, shuffle) {
            let v = mle_step(&mut model.gen_qr, &batch, Direction::QueryToResponse, lr_gen, clip)
                .map_err(|e| mark_divergence(e.into(), phase, epoch))?;
            nll_qr.push(v.to_f64_lossy());
            let v = mle_step(&mut model.gen_rq, &batch, Direction::ResponseToQuery, lr_gen, clip)
                .map_err(|e| mark_divergence(e.into(), phase, epoch))?;
            nll_rq.push(v.to_f64_lossy());
        }
        log.records.push(EpochRecord {
            phase,
            epoch,
            mean_nll_qr: nll_qr.mean(),
            mean_nll_rq: nll_rq.mean(),
            mean_disc_loss_qr: None,
            mean_disc_loss_rq: None,
            mean_dual: None,
            mean_reward_qr: None,
            mean_reward_rq: None,
            baseline_qr: model.baseline_qr.value(),
            baseline_rq: model.baseline_rq.value(),
        });
    }

    for epoch in 1..=cfg.pretrain_epochs_disc {
        let phase = TrainPhase::PretrainDiscriminator;
        let shuffle = derive_seed(cfg.seed, streams::SHUFFLE_PRETRAIN_DISC, epoch as u64);
        let mut fake_rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            streams::PRETRAIN_FAKES,
            epoch as u64,
        ));
        let mut loss_qr = MeanAcc::default();
        let mut loss_rq = MeanAcc::default();
        for batch in batch_iter(corpus, cfg.batch_size, shuffle) {
            for direction in DIRECTIONS {
                let loss = discriminator_update(model, &batch, direction, &mut fake_rng)
                    .map_err(|e| mark_divergence(e, phase, epoch))?;
                match direction {
                    Direction::QueryToResponse => loss_qr.push_opt(loss),
                    Direction::ResponseToQuery => loss_rq.push_opt(loss),
                }
            }
        }
        log.records.push(EpochRecord {
            phase,
            epoch,
            mean_nll_qr: None,
            mean_nll_rq: None,
            mean_disc_loss_qr: loss_qr.mean(),
            mean_disc_loss_rq: loss_rq.mean(),
            mean_dual: None,
            mean_reward_qr: None,
            mean_reward_rq: None,
            baseline_qr: model.baseline_qr.value(),
            baseline_rq: model.baseline_rq.value(),
        });
    }
    Ok(log)
}

/// Discriminator batches cycle independently of the generator stream so
/// generator updates see the same batches in every mode.
struct CyclingBatches<'a> {
    corpus: &'a Corpus,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    refresh: u64,
    iter: BatchIter<'a>,
}

impl<'a> CyclingBatches<'a> {
    fn new(corpus: &'a Corpus, batch_size: usize, seed: u64, epoch: u64) -> Self {
        let iter = batch_iter(
            corpus,
            batch_size,
            derive_seed(seed, streams::SHUFFLE_DAL_DISC, epoch << 32),
        );
        CyclingBatches {
            corpus,
            batch_size,
            seed,
            epoch,
            refresh: 0,
            iter,
        }
    }

    fn next_batch(&mut self) -> Vec<&'a QRPair> {
        loop {
            if let Some(batch) = self.iter.next() {
                return batch;
            }
            self.refresh += 1;
            self.iter = batch_iter(
                self.corpus,
                self.batch_size,
                derive_seed(
                    self.seed,
                    streams::SHUFFLE_DAL_DISC,
                    (self.epoch << 32) | self.refresh,
                ),
            );
        }
    }
}

/// The adversarial loop. Per epoch, groups of `gen_steps` generator
/// batches are preceded by `disc_steps` discriminator batches (in the
/// adversarial modes); each generator batch gets the combined update
/// and then a teacher-forcing step, in both directions. A checkpoint is
/// written after every epoch when a path is given, so divergence aborts
/// with the last good epoch on disk.
pub fn train_dal<F: Scalar + Serialize>(
    model: &mut DalModel<F>,
    corpus: &Corpus,
    checkpoint: Option<&Path>,
) -> Result<TrainLog, TrainError> {
    model.check_corpus(corpus)?;
    let cfg = model.config;
    let lr_gen = F::from_f64_lossy(cfg.lr_gen);
    let clip = F::from_f64_lossy(cfg.grad_clip);
    let phase = TrainPhase::Dal;
    let mut log = TrainLog::default();

    for epoch in 1..=cfg.dal_epochs {
        let mut gen_batches = batch_iter(
            corpus,
            cfg.batch_size,
            derive_seed(cfg.seed, streams::SHUFFLE_DAL, epoch as u64),
        );
        let mut disc_batches = CyclingBatches::new(corpus, cfg.batch_size, cfg.seed, epoch as u64);
        let mut fake_rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            streams::FAKE_SAMPLING,
            epoch as u64,
        ));
        let mut policy_rng_qr = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            streams::POLICY_QR,
            epoch as u64,
        ));
        let mut policy_rng_rq = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            streams::POLICY_RQ,
            epoch as u64,
        ));

        let mut nll_qr = MeanAcc::default();
        let mut nll_rq = MeanAcc::default();
        let mut disc_qr = MeanAcc::default();
        let mut disc_rq = MeanAcc::default();
        let mut dual = MeanAcc::default();
        let mut reward_qr = MeanAcc::default();
        let mut reward_rq = MeanAcc::default();

        loop {
            let group: Vec<Vec<&QRPair>> = (0..cfg.gen_steps)
                .map_while(|_| gen_batches.next())
                .collect();
            if group.is_empty() {
                break;
            }
            if cfg.mode.uses_adversary() {
                for _ in 0..cfg.disc_steps {
                    let batch = disc_batches.next_batch();
                    for direction in DIRECTIONS {
                        let loss = discriminator_update(model, &batch, direction, &mut fake_rng)
                            .map_err(|e| mark_divergence(e, phase, epoch))?;
                        match direction {
                            Direction::QueryToResponse => disc_qr.push_opt(loss),
                            Direction::ResponseToQuery => disc_rq.push_opt(loss),
                        }
                    }
                }
            }
            for batch in &group {
                for direction in DIRECTIONS {
                    if cfg.mode != TrainMode::MleOnly {
                        let rng = match direction {
                            Direction::QueryToResponse => &mut policy_rng_qr,
                            Direction::ResponseToQuery => &mut policy_rng_rq,
                        };
                        let metrics = combined_generator_step(model, batch, direction, rng)
                            .map_err(|e| mark_divergence(e, phase, epoch))?;
                        dual.push_opt(metrics.mean_dual);
                        match direction {
                            Direction::QueryToResponse => {
                                reward_qr.push_opt(metrics.mean_reward)
                            }
                            Direction::ResponseToQuery => {
                                reward_rq.push_opt(metrics.mean_reward)
                            }
                        }
                    }
                    let nll = teacher_forcing_step(
                        model.generator_mut(direction),
                        batch,
                        direction,
                        lr_gen,
                        clip,
                    )
                    .map_err(|e| mark_divergence(e, phase, epoch))?;
                    match direction {
                        Direction::QueryToResponse => nll_qr.push(nll.to_f64_lossy()),
                        Direction::ResponseToQuery => nll_rq.push(nll.to_f64_lossy()),
                    }
                }
            }
        }

        model.epochs_trained += 1;
        if let Some(path) = checkpoint {
            save_checkpoint(model, path)?;
        }
        log.records.push(EpochRecord {
            phase,
            epoch,
            mean_nll_qr: nll_qr.mean(),
            mean_nll_rq: nll_rq.mean(),
            mean_disc_loss_qr: disc_qr.mean(),
            mean_disc_loss_rq: disc_rq.mean(),
            mean_dual: dual.mean(),
            mean_reward_qr: reward_qr.mean(),
            mean_reward_rq: reward_rq.mean(),
            baseline_qr: model.baseline_qr.value(),
            baseline_rq: model.baseline_rq.value(),
        });
    }
    Ok(log)
}

/// Full run: pretraining, a checkpoint of the pretrained state, then
/// the adversarial loop with per-epoch checkpoints.
pub fn train<F: Scalar + Serialize>(
    model: &mut DalModel<F>,
    corpus: &Corpus,
    checkpoint: Option<&Path>,
) -> Result<TrainLog, TrainError> {
    let mut log = pretrain(model, corpus)?;
    if let Some(path) = checkpoint {
        save_checkpoint(model, path)?;
    }
    let dal = train_dal(model, corpus, checkpoint)?;
    log.records.extend(dal.records);
    Ok(log)
}

#[derive(Serialize)]
struct CheckpointOut<'a, F: Scalar> {
    format: &'a str,
    model: &'a DalModel<F>,
}

#[derive(Deserialize)]
struct CheckpointHeader {
    format: String,
}

#[derive(Deserialize)]
struct CheckpointIn<F: Scalar> {
    #[allow(dead_code)]
    format: String,
    model: DalModel<F>,
}

/// Writes the model atomically: serialize to `<path>.tmp` in the same
/// directory, then rename over the target. A crash mid-write leaves the
/// previous checkpoint intact.
pub fn save_checkpoint<F: Scalar + Serialize>(
    model: &DalModel<F>,
    path: &Path,
) -> Result<(), TrainError> {
    let payload = serde_json::to_vec(&CheckpointOut {
        format: CHECKPOINT_FORMAT,
        model,
    })?;
    let mut tmp_name = path.as_os_str().to_os_string();
    tmp_name.push(".tmp");
    let tmp = PathBuf::from(tmp_name);
    std::fs::write(&tmp, payload)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint back. The format tag is checked before anything
/// else, so files from other versions fail with a clear error instead
/// of a field-level parse failure; basic structural consistency of the
/// loaded model is verified too.
pub fn load_checkpoint<F: Scalar + serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<DalModel<F>, TrainError> {
    let text = std::fs::read_to_string(path)?;
    let header: CheckpointHeader = serde_json::from_str(&text)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(TrainError::CheckpointFormat {
            found: header.format,
            expected: CHECKPOINT_FORMAT.to_string(),
        });
    }
    let file: CheckpointIn<F> = serde_json::from_str(&text)?;
    let model = file.model;
    model.config.validate()?;
    let v = model.vocab.size();
    if model.gen_qr.vocab_size != v
        || model.gen_rq.vocab_size != v
        || model.disc_qr.vocab_size != v
        || model.disc_rq.vocab_size != v
        || model.lm_q.vocab_size() != v
        || model.lm_r.vocab_size() != v
    {
        return Err(TrainError::Checkpoint {
            path: path.to_path_buf(),
            detail: "vocabulary size disagrees between components".into(),
        });
    }
    Ok(model)
}
