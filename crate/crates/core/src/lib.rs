//! Causally-aware, metric-guided text generation.
//!
//! The crate covers the whole pipeline: text feature extraction, corpus
//! preparation (with a synthetic generator that plants known causal effects),
//! doubly-robust estimation of feature effects on an engagement metric,
//! hashed bag-of-n-grams feedback classifiers, a control-injected toy
//! transformer, a causal conditional VAE, and an evaluation harness.
//!
//! Numeric kernels are generic over [`scalar::Real`]; models are trained in
//! `f64` through the aliases below.

pub mod autodiff;
pub mod causal;
pub mod classifier;
pub mod corpus;
pub mod cvae;
pub mod eval;
pub mod error;
pub mod features;
pub mod scalar;
pub mod stats;
pub mod transformer;
pub mod vocab;

pub use error::{Error, Result};

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type Adam64 = autodiff::Adam<f64>;
