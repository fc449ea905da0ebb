use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::init;
use crate::autodiff::{Adam, Graph, ParamStore};
use crate::cvae::model::{Cvae, CvaePair, CvaeVariant, ElboNoise, ElboValues, ElboWeights};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeTrainConfig {
    pub variant: CvaeVariant,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning-rate multiplier applied after an epoch without enough improvement.
    pub lr_decay: f64,
    /// An epoch improves when its validation loss is at most this times the best so far.
    pub improvement_threshold: f64,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    /// Fraction of all steps over which the KL weight rises linearly from 0 to 1.
    pub kl_anneal_fraction: f64,
    /// Probability of replacing a decoder input token by `<unk>`.
    pub word_dropout: f64,
    /// Fraction of pairs held out for validation; with 0 the training loss is used.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for CvaeTrainConfig {
    fn default() -> Self {
        CvaeTrainConfig {
            variant: CvaeVariant::Causal,
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            lr_decay: 0.6,
            improvement_threshold: 0.996,
            patience: 3,
            kl_anneal_fraction: 0.3,
            word_dropout: 0.25,
            holdout: 0.1,
            seed: 0,
        }
    }
}

/// KL weight after `step` updates with an annealing window of `window` steps.
pub fn kl_weight(step: u64, window: u64) -> f64 {
    if window == 0 {
        1.0
    } else {
        (step as f64 / window as f64).min(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvaeEpoch {
    pub epoch: usize,
    pub train: ElboValues,
    pub validation: f64,
    pub learning_rate: f64,
    /// KL weight at the epoch's first step.
    pub kl_weight: f64,
    pub improved: bool,
}

/// Mean negated bound with full KL weight, fixed noise and no word dropout.
pub fn evaluate_cvae(model: &Cvae, pairs: &[CvaePair], variant: CvaeVariant, seed: u64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no pairs to evaluate".into()));
    }
    let mut rng = init::rng(seed);
    let weights = ElboWeights::for_variant(variant, 1.0);
    let mut total = 0.0;
    for pair in pairs {
        let noise = ElboNoise::draw(&mut rng, model.config().latent_dim, pair.target.len(), 0.0);
        let mut g = Graph::new();
        let terms = model.elbo(&mut g, model.params(), pair, &weights, &noise)?;
        total += g.value(terms.total).item()?;
    }
    Ok(total / pairs.len() as f64)
}

/// Trains in place and leaves the model at its best validation checkpoint.
pub fn train_cvae(model: &mut Cvae, pairs: &[CvaePair], cfg: &CvaeTrainConfig) -> Result<Vec<CvaeEpoch>> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no training pairs".into()));
    }
    if cfg.variant == CvaeVariant::Causal && model.treatments().is_empty() {
        return Err(Error::Config("the causal variant needs at least one treatment feature".into()));
    }
    let mut rng = init::rng(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let held = ((pairs.len() as f64) * cfg.holdout).round() as usize;
    let held = if held >= pairs.len() { 0 } else { held };
    let validation: Vec<CvaePair> = order[..held].iter().map(|i| pairs[*i].clone()).collect();
    let mut train_idx: Vec<usize> = order[held..].to_vec();

    let batch = cfg.batch_size.max(1);
    let steps_per_epoch = train_idx.len().div_ceil(batch) as u64;
    let window = (cfg.kl_anneal_fraction * (steps_per_epoch * cfg.epochs as u64) as f64).round() as u64;
    let eval_seed = init::derive_seed(cfg.seed, 3);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut best: Option<(f64, ParamStore<f64>)> = None;
    let mut stale = 0;
    let mut log = Vec::new();

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut values = Vec::with_capacity(train_idx.len());
        let start_weight = kl_weight(adam.steps(), window);
        for chunk in train_idx.chunks(batch) {
            let weight = kl_weight(adam.steps(), window);
            let weights = ElboWeights::for_variant(cfg.variant, weight);
            for &i in chunk {
                let pair = &pairs[i];
                let noise = ElboNoise::draw(&mut rng, model.config().latent_dim, pair.target.len(), cfg.word_dropout);
                let mut g = Graph::new();
                let terms = model.elbo(&mut g, model.params(), pair, &weights, &noise)?;
                let v = terms.values(&g)?;
                if !v.total.is_finite() {
                    return Err(Error::NonFinite {
                        context: "cvae training".into(),
                        detail: format!(
                            "kl_z {} reconstruction {} metric {} metric_kl {} treatment {}",
                            v.kl_z, v.reconstruction, v.metric, v.metric_kl, v.treatment
                        ),
                    });
                }
                let objective = g.scale(terms.total, 1.0 / chunk.len() as f64);
                g.backward(objective)?;
                g.accumulate_param_grads(model.params_mut());
                values.push(v);
            }
            adam.step(model.params_mut())?;
        }
        let train = ElboValues::mean(&values).expect("non-empty training split");
        let score = if validation.is_empty() {
            evaluate_cvae(model, pairs, cfg.variant, eval_seed)?
        } else {
            evaluate_cvae(model, &validation, cfg.variant, eval_seed)?
        };
        let improved = best.as_ref().map_or(true, |(b, _)| score <= cfg.improvement_threshold * b);
        log.push(CvaeEpoch { epoch, train, validation: score, learning_rate: adam.lr, kl_weight: start_weight, improved });
        if improved {
            best = Some((score, model.params().clone()));
            stale = 0;
        } else {
            adam.lr *= cfg.lr_decay;
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        *model.params_mut() = params;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_schedule_endpoints() {
        assert_eq!(kl_weight(0, 100), 0.0);
        assert_eq!(kl_weight(50, 100), 0.5);
        assert_eq!(kl_weight(100, 100), 1.0);
        assert_eq!(kl_weight(1000, 100), 1.0);
        assert_eq!(kl_weight(0, 0), 1.0);
    }
}
