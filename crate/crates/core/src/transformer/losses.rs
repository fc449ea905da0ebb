use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::classifier::{BagClassifier, FeatureClassifier, SoftVocabulary};
use crate::error::{Error, Result};
use crate::features::{soft_expected_features, FeatureClassMatrix, FeatureVector};

/// Smoothing applied to the feature classifier's output before the log.
pub const CAUSAL_SMOOTHING: f64 = 1e-9;

/// Mean next-token negative log-likelihood.
pub fn loss_lm(g: &mut Graph<f64>, logits: Var, targets: &[usize]) -> Result<Var> {
    let vocab = g.value(logits).cols();
    if let Some(bad) = targets.iter().find(|t| **t >= vocab) {
        return Err(Error::Invalid(format!("target id {bad} is outside the vocabulary of {vocab}")));
    }
    g.cross_entropy(logits, targets)
}

/// `−log probs[class]` for a `[1, k]` probability row.
pub fn negative_log_probability(g: &mut Graph<f64>, probs: Var, class: usize) -> Result<Var> {
    let k = g.value(probs).len();
    if class >= k {
        return Err(Error::Invalid(format!("class {class} out of range for {k} outputs")));
    }
    let mut mask = vec![0.0; k];
    mask[class] = -1.0;
    let logp = g.log(probs);
    let m = g.constant(Tensor::row(&mask));
    let picked = g.mul(logp, m)?;
    Ok(g.sum(picked))
}

/// Metric feedback: `−log P(class | expected text)` under a frozen classifier.
pub fn loss_metric(
    g: &mut Graph<f64>,
    token_distributions: Var,
    class: usize,
    classifier: &BagClassifier,
    vocab: &SoftVocabulary,
) -> Result<Var> {
    let probs = classifier.predict_soft(g, token_distributions, vocab)?;
    negative_log_probability(g, probs, class)
}

/// Topic feedback; the same form as the metric loss over topic classes.
pub fn loss_topic(
    g: &mut Graph<f64>,
    token_distributions: Var,
    topic: usize,
    classifier: &BagClassifier,
    vocab: &SoftVocabulary,
) -> Result<Var> {
    loss_metric(g, token_distributions, topic, classifier, vocab)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CausalMode {
    /// `−Σ_c p_c log q_c`.
    Full,
    /// `−p_y log q_y` for the target class only.
    Literal,
}

impl FromStr for CausalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(CausalMode::Full),
            "literal" => Ok(CausalMode::Literal),
            other => Err(Error::Config(format!("unknown causal loss mode {other:?} (expected full or literal)"))),
        }
    }
}

impl fmt::Display for CausalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CausalMode::Full => "full",
            CausalMode::Literal => "literal",
        })
    }
}

/// Cross-entropy between fixed reference probabilities `p` and a `[1, k]`
/// prediction `q`, with `q` smoothed by [`CAUSAL_SMOOTHING`].
pub fn causal_cross_entropy(g: &mut Graph<f64>, p: &[f64], q: Var, class: usize, mode: CausalMode) -> Result<Var> {
    let k = g.value(q).len();
    if p.len() != k || class >= k {
        return Err(Error::Invalid(format!("reference of {} classes, prediction of {k}, target {class}", p.len())));
    }
    let weights: Vec<f64> = match mode {
        CausalMode::Full => p.iter().map(|x| -x).collect(),
        CausalMode::Literal => (0..k).map(|c| if c == class { -p[c] } else { 0.0 }).collect(),
    };
    let smoothed = g.affine_scalar(q, 1.0 - CAUSAL_SMOOTHING, CAUSAL_SMOOTHING / k as f64);
    let logq = g.log(smoothed);
    let w = g.constant(Tensor::row(&weights));
    let terms = g.mul(logq, w)?;
    Ok(g.sum(terms))
}

/// The causal loss and the soft prediction it compares against.
#[derive(Clone, Copy, Debug)]
pub struct CausalTerm {
    pub loss: Var,
    /// Feature-classifier probabilities for the expected generated text.
    pub q: Var,
}

/// Causal feedback: the feature classifier's view of the real text against
/// its view of the expected generated text.
pub fn loss_causal(
    g: &mut Graph<f64>,
    real_features: &FeatureVector,
    token_distributions: Var,
    class: usize,
    classifier: &FeatureClassifier,
    feature_classes: &FeatureClassMatrix,
    mode: CausalMode,
) -> Result<CausalTerm> {
    let p = classifier.predict(real_features)?;
    let soft = soft_expected_features(g, token_distributions, feature_classes)?;
    let q = classifier.predict_soft(g, &soft)?;
    let loss = causal_cross_entropy(g, &p, q, class, mode)?;
    Ok(CausalTerm { loss, q })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lm: f64,
    pub metric: f64,
    pub topic: f64,
    pub causal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lm: 1.0, metric: 1.0, topic: 1.0, causal: 1.0 }
    }
}

impl LossWeights {
    pub fn lm_only() -> Self {
        LossWeights { lm: 1.0, metric: 0.0, topic: 0.0, causal: 0.0 }
    }
}

/// Component values, their weights and the weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_g: f64,
    pub l_metric: f64,
    pub l_topic: f64,
    pub l_causal: f64,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBundle {
    pub fn new(l_g: f64, l_metric: f64, l_topic: f64, l_causal: f64, weights: LossWeights) -> Self {
        let total = weights.lm * l_g + weights.metric * l_metric + weights.topic * l_topic + weights.causal * l_causal;
        LossBundle { l_g, l_metric, l_topic, l_causal, weights, total }
    }

    /// Component-wise mean; weights are taken from the first bundle.
    pub fn mean(bundles: &[LossBundle]) -> Option<LossBundle> {
        let first = bundles.first()?;
        let n = bundles.len() as f64;
        let avg = |f: fn(&LossBundle) -> f64| bundles.iter().map(f).sum::<f64>() / n;
        Some(LossBundle::new(avg(|b| b.l_g), avg(|b| b.l_metric), avg(|b| b.l_topic), avg(|b| b.l_causal), first.weights))
    }
}
