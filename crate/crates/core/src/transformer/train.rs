use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::init::{self, SeededRng};
use crate::autodiff::{Adam, Graph, ParamStore, Var};
use crate::classifier::{BagClassifier, FeatureClassifier, SoftVocabulary};
use crate::corpus::{ControlClass, Document};
use crate::error::{Error, Result};
use crate::features::{extract_features, extract_text_features, FeatureClassMatrix, FeatureVector, PosLexicon};
use crate::transformer::generate::Decode;
use crate::transformer::losses::{
    causal_cross_entropy, loss_causal, loss_lm, loss_metric, loss_topic, CausalMode, LossBundle, LossWeights,
};
use crate::transformer::model::Transformer;
use crate::vocab::{TokenId, Vocab, TEXT_START};

/// One formatted training sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub ids: Vec<TokenId>,
    /// Index of the text-start token; positions from here on predict article tokens.
    pub text_start: usize,
    pub class: ControlClass,
    pub topic: usize,
    pub real_features: FeatureVector,
}

impl Example {
    /// Formats a bucketed document; sequences longer than `max_len` lose their tail.
    pub fn from_document(doc: &Document, metric: &str, vocab: &Vocab, lexicon: &PosLexicon, max_len: usize) -> Result<Self> {
        let class = *doc
            .buckets
            .get(metric)
            .ok_or_else(|| Error::Invalid(format!("document {} has no {metric} bucket", doc.id)))?;
        let topic = doc.topic.unwrap_or(0).min(vocab.topics().saturating_sub(1));
        let mut ids = vocab.format_example(class, topic, &doc.keywords, &doc.text)?;
        ids.truncate(max_len);
        let sot = vocab.special(TEXT_START)?;
        let text_start = ids.iter().position(|i| *i == sot).ok_or_else(|| {
            Error::Invalid(format!("document {} prompt does not fit in {max_len} tokens", doc.id))
        })?;
        if text_start + 1 >= ids.len() {
            return Err(Error::Invalid(format!("document {} leaves no room for text within {max_len} tokens", doc.id)));
        }
        Ok(Example { ids, text_start, class, topic, real_features: extract_features(doc, lexicon) })
    }

    /// Positions whose outputs predict text tokens.
    pub fn text_rows(&self) -> Vec<usize> {
        (self.text_start..self.ids.len() - 1).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// Teacher-forced softmax outputs on the reference text feed the
    /// classifiers' differentiable paths.
    Soft,
    /// Softmax outputs along a free-running sample of the model feed the
    /// differentiable paths; gradients flow through the per-position
    /// distributions, not through the sampling choices.
    SoftSampled,
    /// Sampled continuations are scored by the classifiers and reinforced.
    Reinforce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub causal_mode: CausalMode,
    pub feedback: FeedbackMode,
    /// Global gradient-norm bound per step; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Moving-average factor of the reinforcement baseline.
    pub baseline_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 1e-3,
            weights: LossWeights::default(),
            causal_mode: CausalMode::Literal,
            feedback: FeedbackMode::SoftSampled,
            clip_norm: Some(1.0),
            baseline_decay: 0.9,
            seed: 0,
        }
    }
}

/// Frozen classifiers providing the feedback terms, with their soft-path inputs.
pub struct Feedback<'a> {
    metric: Option<(&'a BagClassifier, SoftVocabulary)>,
    topic: Option<(&'a BagClassifier, SoftVocabulary)>,
    causal: Option<(&'a FeatureClassifier, FeatureClassMatrix)>,
}

impl<'a> Feedback<'a> {
    pub fn none() -> Self {
        Feedback { metric: None, topic: None, causal: None }
    }

    pub fn new(
        vocab: &Vocab,
        metric: Option<&'a BagClassifier>,
        topic: Option<&'a BagClassifier>,
        causal: Option<&'a FeatureClassifier>,
        lexicon: &PosLexicon,
    ) -> Self {
        let words = || vocab.entries().map(|(t, k)| (t, k == crate::features::TokenKind::Word));
        Feedback {
            metric: metric.map(|c| (c, c.soft_vocabulary(words()))),
            topic: topic.map(|c| (c, c.soft_vocabulary(words()))),
            causal: causal.map(|c| (c, vocab.feature_classes(lexicon))),
        }
    }

    fn check(&self, weights: &LossWeights) -> Result<()> {
        let missing = [
            (weights.metric, self.metric.is_none(), "metric"),
            (weights.topic, self.topic.is_none(), "topic"),
            (weights.causal, self.causal.is_none(), "causal"),
        ];
        match missing.iter().find(|(w, absent, _)| *w != 0.0 && *absent) {
            Some((_, _, name)) => Err(Error::Config(format!("{name} loss has a nonzero weight but no classifier"))),
            None => Ok(()),
        }
    }
}

/// Adds `weight · term` to the running total unless the weight is zero.
fn accumulate(g: &mut Graph<f64>, total: Option<Var>, term: Var, weight: f64) -> Result<Option<Var>> {
    if weight == 0.0 {
        return Ok(total);
    }
    let scaled = g.scale(term, weight);
    Ok(Some(match total {
        Some(t) => g.add(t, scaled)?,
        None => scaled,
    }))
}

fn clip_gradients(store: &mut ParamStore<f64>, max_norm: f64) {
    let norm = store.iter().map(|(_, p)| p.grad.data().iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }
}

struct StepOutcome {
    bundle: LossBundle,
    /// Objective already divided by the batch size; `None` when nothing is trained.
    objective: Option<Var>,
}

/// Teacher-forced language-model loss plus soft feedback terms, evaluated on
/// the reference text or, with `sampler`, on a fresh sample of the model.
fn soft_step(
    g: &mut Graph<f64>,
    model: &Transformer,
    ex: &Example,
    feedback: &Feedback,
    cfg: &TrainConfig,
    sampler: Option<&mut SeededRng>,
) -> Result<StepOutcome> {
    let n = ex.ids.len();
    let logits = model.forward(g, &ex.ids[..n - 1], ex.class)?;
    let text_logits = g.gather(logits, &ex.text_rows())?;
    let lm = loss_lm(g, text_logits, &ex.ids[ex.text_start + 1..])?;
    let w = cfg.weights;
    let mut total = accumulate(g, None, lm, w.lm)?;
    let needs_dists = feedback.metric.is_some() || feedback.topic.is_some() || feedback.causal.is_some();
    let dists = match (needs_dists, sampler) {
        (false, _) => None,
        (true, None) => Some(g.softmax(text_logits)?),
        (true, Some(rng)) => {
            let prompt = &ex.ids[..=ex.text_start];
            let decode = Decode::Sample { temperature: 1.0, seed: rng.gen() };
            let mut seq = prompt.to_vec();
            seq.extend(model.generate(prompt, ex.class, decode, n - 1 - ex.text_start)?);
            let own = model.forward(g, &seq, ex.class)?;
            let rows: Vec<usize> = (ex.text_start..seq.len()).collect();
            let own_text = g.gather(own, &rows)?;
            Some(g.softmax(own_text)?)
        }
    };

    let mut values = [g.value(lm).item()?, 0.0, 0.0, 0.0];
    if let (Some((clf, sv)), Some(d)) = (&feedback.metric, dists) {
        let term = loss_metric(g, d, ex.class.index(), clf, sv)?;
        values[1] = g.value(term).item()?;
        total = accumulate(g, total, term, w.metric)?;
    }
    if let (Some((clf, sv)), Some(d)) = (&feedback.topic, dists) {
        let term = loss_topic(g, d, ex.topic, clf, sv)?;
        values[2] = g.value(term).item()?;
        total = accumulate(g, total, term, w.topic)?;
    }
    if let (Some((clf, classes)), Some(d)) = (&feedback.causal, dists) {
        let term = loss_causal(g, &ex.real_features, d, ex.class.index(), clf, classes, cfg.causal_mode)?;
        values[3] = g.value(term.loss).item()?;
        total = accumulate(g, total, term.loss, w.causal)?;
    }
    let bundle = LossBundle::new(values[0], values[1], values[2], values[3], w);
    let objective = total.map(|t| g.scale(t, 1.0 / cfg.batch_size.max(1) as f64));
    Ok(StepOutcome { bundle, objective })
}

/// Log-likelihood reward of a decoded sample under the frozen classifiers.
fn sample_rewards(text: &str, ex: &Example, feedback: &Feedback, cfg: &TrainConfig, lexicon: &PosLexicon) -> Result<[f64; 3]> {
    let mut rewards = [0.0; 3];
    if let Some((clf, _)) = &feedback.metric {
        rewards[0] = clf.predict(text)[ex.class.index()].ln();
    }
    if let Some((clf, _)) = &feedback.topic {
        rewards[1] = clf.predict(text)[ex.topic].ln();
    }
    if let Some((clf, _)) = &feedback.causal {
        let p = clf.predict(&ex.real_features)?;
        let mut g = Graph::new();
        let q = g.constant(crate::autodiff::Tensor::row(&clf.predict(&extract_text_features(text, lexicon))?));
        let ce = causal_cross_entropy(&mut g, &p, q, ex.class.index(), cfg.causal_mode)?;
        rewards[2] = -g.value(ce).item()?;
    }
    Ok(rewards)
}

struct Reinforcer {
    baseline: Option<f64>,
}

impl Reinforcer {
    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        g: &mut Graph<f64>,
        model: &Transformer,
        ex: &Example,
        feedback: &Feedback,
        cfg: &TrainConfig,
        lexicon: &PosLexicon,
        rng: &mut SeededRng,
    ) -> Result<StepOutcome> {
        let n = ex.ids.len();
        let logits = model.forward(g, &ex.ids[..n - 1], ex.class)?;
        let text_logits = g.gather(logits, &ex.text_rows())?;
        let lm = loss_lm(g, text_logits, &ex.ids[ex.text_start + 1..])?;
        let w = cfg.weights;
        let mut total = accumulate(g, None, lm, w.lm)?;

        let prompt = &ex.ids[..=ex.text_start];
        let budget = n - 1 - ex.text_start;
        let decode = Decode::Sample { temperature: 1.0, seed: rng.gen() };
        let sample = model.generate(prompt, ex.class, decode, budget)?;
        let text = model.vocab().decode_text(&sample);
        let rewards = sample_rewards(&text, ex, feedback, cfg, lexicon)?;
        let reward = w.metric * rewards[0] + w.topic * rewards[1] + w.causal * rewards[2];
        let advantage = reward - self.baseline.unwrap_or(reward);
        self.baseline = Some(match self.baseline {
            Some(b) => cfg.baseline_decay * b + (1.0 - cfg.baseline_decay) * reward,
            None => reward,
        });
        if !sample.is_empty() && advantage != 0.0 {
            let mut seq = prompt.to_vec();
            seq.extend(&sample);
            let sample_logits = model.forward(g, &seq[..seq.len() - 1], ex.class)?;
            let rows: Vec<usize> = (ex.text_start..seq.len() - 1).collect();
            let picked = g.gather(sample_logits, &rows)?;
            let nll = g.cross_entropy(picked, &sample)?;
            total = accumulate(g, total, nll, advantage)?;
        }
        let bundle = LossBundle::new(g.value(lm).item()?, -rewards[0], -rewards[1], -rewards[2], w);
        let objective = total.map(|t| g.scale(t, 1.0 / cfg.batch_size.max(1) as f64));
        Ok(StepOutcome { bundle, objective })
    }
}

/// Trains in place; returns the mean loss bundle of every epoch.
pub fn train_transformer(
    model: &mut Transformer,
    examples: &[Example],
    feedback: &Feedback,
    cfg: &TrainConfig,
    lexicon: &PosLexicon,
) -> Result<Vec<LossBundle>> {
    if examples.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    feedback.check(&cfg.weights)?;
    let mut rng = init::rng(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut reinforcer = Reinforcer { baseline: None };
    // Separate stream so sampling never perturbs the example order.
    let mut sampler = init::rng(init::derive_seed(cfg.seed, 2));
    let mut log = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut bundles = Vec::with_capacity(examples.len());
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut any = false;
            for &i in batch {
                let ex = &examples[i];
                let mut g = Graph::new();
                let outcome = match cfg.feedback {
                    FeedbackMode::Soft => soft_step(&mut g, model, ex, feedback, cfg, None)?,
                    FeedbackMode::SoftSampled => soft_step(&mut g, model, ex, feedback, cfg, Some(&mut sampler))?,
                    FeedbackMode::Reinforce => reinforcer.step(&mut g, model, ex, feedback, cfg, lexicon, &mut rng)?,
                };
                let b = outcome.bundle;
                if !b.total.is_finite() {
                    return Err(Error::NonFinite {
                        context: "transformer training".into(),
                        detail: format!("l_g {} l_metric {} l_topic {} l_causal {}", b.l_g, b.l_metric, b.l_topic, b.l_causal),
                    });
                }
                if let Some(obj) = outcome.objective {
                    g.backward(obj)?;
                    g.accumulate_param_grads(model.params_mut());
                    any = true;
                }
                bundles.push(b);
            }
            if any {
                if let Some(max) = cfg.clip_norm {
                    clip_gradients(model.params_mut(), max);
                }
                adam.step(model.params_mut())?;
            }
        }
        log.push(LossBundle::mean(&bundles).expect("at least one example"));
    }
    Ok(log)
}

/// Mean teacher-forced loss bundle without updating the model.
pub fn evaluate_losses(
    model: &Transformer,
    examples: &[Example],
    feedback: &Feedback,
    cfg: &TrainConfig,
) -> Result<LossBundle> {
    let mut bundles = Vec::with_capacity(examples.len());
    for ex in examples {
        let mut g = Graph::new();
        bundles.push(soft_step(&mut g, model, ex, feedback, cfg, None)?.bundle);
    }
    LossBundle::mean(&bundles).ok_or_else(|| Error::Invalid("no examples to evaluate".into()))
}

