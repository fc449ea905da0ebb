//! Conditional VAE next-sentence generator with the causal extension of its
//! bound: a metric posterior informed by binarized causal features and a
//! treatment likelihood.

pub mod kl;
mod model;
pub mod train;

pub use kl::{categorical_kl, categorical_kl_var, gaussian_kl, gaussian_kl_var, PROBABILITY_FLOOR};
pub use model::{
    elbo_causal, elbo_noncausal, pairs_from_document, split_sentences, Cvae, CvaeConfig, CvaePair, CvaeVariant, ElboNoise,
    ElboTerms, ElboValues, ElboWeights, MetricPolicy, TreatmentSpec,
};
pub use train::{evaluate_cvae, kl_weight, train_cvae, CvaeEpoch, CvaeTrainConfig};
