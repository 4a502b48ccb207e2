//! Dual adversarial learning for paired sequence generation.
//!
//! Two attention Seq2Seq generators (query→response and response→query)
//! are tied together by a joint-probability duality regularizer and
//! trained against pair discriminators with policy-gradient rewards.
//! Everything runs on a small built-in reverse-mode autodiff engine;
//! no external numeric runtime is required.

pub mod autodiff;
pub mod bigram;
pub mod data;
pub mod discriminator;
pub mod eval;
pub mod mmi;
pub mod rng;
pub mod scalar;
pub mod seq2seq;
pub mod trainer;

pub use scalar::Scalar;

/// Default-precision tensor.
pub type Tensor = autodiff::Tensor<f64>;
/// Default-precision computation record.
pub type Tape = autodiff::Tape<f64>;
/// Default-precision tape variable.
pub type Var = autodiff::Var<f64>;
/// Default-precision directional generator.
pub type Seq2SeqParams = seq2seq::Seq2SeqParams<f64>;
/// Default-precision pair discriminator.
pub type DiscriminatorParams = discriminator::DiscriminatorParams<f64>;
/// Default-precision full trained state.
pub type DalModel = trainer::DalModel<f64>;
