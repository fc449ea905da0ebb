//! Decoder-only language model with metric-conditioned control adapters and
//! the classifier-feedback objectives used to train it.

pub mod generate;
pub mod losses;
mod model;
pub mod train;

pub use generate::Decode;
pub use losses::{
    causal_cross_entropy, loss_causal, loss_lm, loss_metric, loss_topic, negative_log_probability, CausalMode, CausalTerm,
    LossBundle, LossWeights, CAUSAL_SMOOTHING,
};
pub use model::{causal_attention, controlled_layer_norm, AttentionMode, Transformer, TransformerConfig};
pub use train::{evaluate_losses, train_transformer, Example, Feedback, FeedbackMode, TrainConfig};
