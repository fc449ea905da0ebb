use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{read_bundle, restore_into, write_bundle};
use crate::autodiff::init::{self, SeededRng};
use crate::autodiff::layers::{Activation, GruCell, Linear, Mlp};
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::corpus::{ControlClass, Document};
use crate::cvae::kl::{categorical_kl_var, gaussian_kl_var};
use crate::error::{Error, Result};
use crate::features::{extract_features, Feature, PosLexicon, TokenKind};
use crate::scalar::softmax_in_place;
use crate::transformer::generate::sample_index;
use crate::vocab::{TokenId, Vocab, END_OF_TEXT, TEXT_START, UNKNOWN};

const CLASSES: usize = ControlClass::ALL.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeConfig {
    pub embed_dim: usize,
    /// Per-sentence summary width; split evenly between the two GRU directions.
    pub sentence_dim: usize,
    pub context_dim: usize,
    pub decoder_dim: usize,
    pub latent_dim: usize,
    /// Width of the learned y′ embedding.
    pub class_dim: usize,
    /// Hidden width of the prior, recognition, metric and treatment nets.
    pub hidden: usize,
    /// Previous sentences kept as context.
    pub max_context: usize,
    /// Longest target sentence in tokens, excluding the start and end tokens.
    pub max_sentence_len: usize,
    pub seed: u64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            embed_dim: 200,
            sentence_dim: 300,
            context_dim: 600,
            decoder_dim: 400,
            latent_dim: 64,
            class_dim: 16,
            hidden: 200,
            max_context: 3,
            max_sentence_len: 40,
            seed: 0,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [self.embed_dim, self.sentence_dim, self.context_dim, self.decoder_dim, self.latent_dim, self.class_dim, self.hidden];
        if widths.contains(&0) || self.max_sentence_len == 0 {
            return Err(Error::Config("CVAE widths and sentence length must be positive".into()));
        }
        if self.sentence_dim % 2 != 0 {
            return Err(Error::Config(format!("sentence_dim {} must be even", self.sentence_dim)));
        }
        Ok(())
    }
}

/// Which bound is optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvaeVariant {
    NonCausal,
    Causal,
}

impl FromStr for CvaeVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noncausal" | "non-causal" => Ok(CvaeVariant::NonCausal),
            "causal" => Ok(CvaeVariant::Causal),
            other => Err(Error::Config(format!("unknown CVAE variant {other:?} (expected causal or noncausal)"))),
        }
    }
}

impl fmt::Display for CvaeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CvaeVariant::NonCausal => "noncausal",
            CvaeVariant::Causal => "causal",
        })
    }
}

/// Source of y′ at generation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricPolicy {
    /// Use the requested target class.
    Force,
    /// Draw from p(y′ | c, z).
    Sample,
    /// Take the mode of p(y′ | c, z).
    Argmax,
}

impl FromStr for MetricPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "force" => Ok(MetricPolicy::Force),
            "sample" => Ok(MetricPolicy::Sample),
            "argmax" => Ok(MetricPolicy::Argmax),
            other => Err(Error::Config(format!("unknown metric policy {other:?} (expected force, sample or argmax)"))),
        }
    }
}

/// A binarized causal feature: treated when the value exceeds the threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreatmentSpec {
    pub feature: Feature,
    pub threshold: f64,
}

/// One (context, next sentence) training tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct CvaePair {
    pub context: Vec<Vec<TokenId>>,
    pub target: Vec<TokenId>,
    pub class: ControlClass,
    /// Binarized causal features of the source document, in model order.
    pub treatments: Vec<bool>,
}

/// Splits encoded text after every terminator; paragraph breaks and a
/// trailing unterminated fragment are kept with their sentence.
pub fn split_sentences(vocab: &Vocab, ids: &[TokenId]) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    for &id in ids {
        match vocab.kind(id) {
            TokenKind::ParagraphBreak => {}
            TokenKind::SentenceEnd => {
                current.push(id);
                out.push(std::mem::take(&mut current));
            }
            _ => current.push(id),
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Every sentence of `doc` as a target with up to `max_context` predecessors;
/// the first sentence has an empty context.
pub fn pairs_from_document(
    doc: &Document,
    metric: &str,
    vocab: &Vocab,
    lexicon: &PosLexicon,
    treatments: &[TreatmentSpec],
    config: &CvaeConfig,
) -> Result<Vec<CvaePair>> {
    let class = *doc
        .buckets
        .get(metric)
        .ok_or_else(|| Error::Invalid(format!("document {} has no {metric} bucket", doc.id)))?;
    let features = extract_features(doc, lexicon);
    let t: Vec<bool> = treatments.iter().map(|s| features.get(s.feature) > s.threshold).collect();
    let sentences: Vec<Vec<TokenId>> = split_sentences(vocab, &vocab.encode_text(&doc.text))
        .into_iter()
        .map(|mut s| {
            s.truncate(config.max_sentence_len);
            s
        })
        .collect();
    Ok((0..sentences.len())
        .map(|i| CvaePair {
            context: sentences[i.saturating_sub(config.max_context)..i].to_vec(),
            target: sentences[i].clone(),
            class,
            treatments: t.clone(),
        })
        .collect())
}

/// Graph handles of one bound's terms.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    pub kl_z: Var,
    /// `−log p(x | c, z, y′)`, summed over target tokens.
    pub reconstruction: Var,
    /// `−log p(y′ = y | c, z)`.
    pub metric: Var,
    pub metric_kl: Option<Var>,
    /// `−log p(t | x)`, summed over treatments.
    pub treatment: Option<Var>,
    pub total: Var,
}

/// Scalar values of [`ElboTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboValues {
    pub kl_z: f64,
    pub reconstruction: f64,
    pub metric: f64,
    pub metric_kl: f64,
    pub treatment: f64,
    pub total: f64,
}

impl ElboValues {
    pub fn mean(values: &[ElboValues]) -> Option<ElboValues> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let avg = |f: fn(&ElboValues) -> f64| values.iter().map(f).sum::<f64>() / n;
        Some(ElboValues {
            kl_z: avg(|v| v.kl_z),
            reconstruction: avg(|v| v.reconstruction),
            metric: avg(|v| v.metric),
            metric_kl: avg(|v| v.metric_kl),
            treatment: avg(|v| v.treatment),
            total: avg(|v| v.total),
        })
    }
}

impl ElboTerms {
    pub fn values(&self, g: &Graph<f64>) -> Result<ElboValues> {
        let opt = |v: Option<Var>| v.map_or(Ok(0.0), |v| g.value(v).item());
        Ok(ElboValues {
            kl_z: g.value(self.kl_z).item()?,
            reconstruction: g.value(self.reconstruction).item()?,
            metric: g.value(self.metric).item()?,
            metric_kl: opt(self.metric_kl)?,
            treatment: opt(self.treatment)?,
            total: g.value(self.total).item()?,
        })
    }
}

/// Term weights of the bound. Terms with weight zero are left out of the
/// total entirely, so a zero-weighted causal bound equals the non-causal one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElboWeights {
    pub kl: f64,
    pub reconstruction: f64,
    pub metric: f64,
    pub metric_kl: f64,
    pub treatment: f64,
}

impl Default for ElboWeights {
    fn default() -> Self {
        ElboWeights { kl: 1.0, reconstruction: 1.0, metric: 1.0, metric_kl: 1.0, treatment: 1.0 }
    }
}

impl ElboWeights {
    pub fn for_variant(variant: CvaeVariant, kl: f64) -> Self {
        match variant {
            CvaeVariant::NonCausal => ElboWeights { kl, metric_kl: 0.0, treatment: 0.0, ..Default::default() },
            CvaeVariant::Causal => ElboWeights { kl, ..Default::default() },
        }
    }
}

/// Inputs drawn outside the bound so that it is a deterministic function of
/// the parameters: the reparameterization noise and the decoder inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboNoise {
    pub epsilon: Vec<f64>,
    /// Tokens whose decoder input is replaced by `<unk>` (word dropout).
    pub dropped: Vec<bool>,
}

impl ElboNoise {
    pub fn draw(rng: &mut SeededRng, latent_dim: usize, target_len: usize, word_dropout: f64) -> Self {
        let epsilon = init::normal::<f64>(rng, &[latent_dim], 1.0).data().to_vec();
        let dropped = (0..target_len).map(|_| word_dropout > 0.0 && rng.gen::<f64>() < word_dropout).collect();
        ElboNoise { epsilon, dropped }
    }
}

#[derive(Serialize, Deserialize)]
struct CvaeHeader {
    kind: String,
    config: CvaeConfig,
    vocab: Vocab,
    treatments: Vec<TreatmentSpec>,
}

/// Conditional VAE over (context, next sentence, metric class) with the
/// treatment-aware metric posterior of the causal bound.
#[derive(Clone, Debug)]
pub struct Cvae {
    config: CvaeConfig,
    vocab: Vocab,
    treatments: Vec<TreatmentSpec>,
    pub(crate) store: ParamStore<f64>,
    word_embedding: ParamId,
    class_embedding: ParamId,
    null_context: ParamId,
    forward_gru: GruCell,
    backward_gru: GruCell,
    context_gru: GruCell,
    prior: Mlp,
    recognition: Mlp,
    metric_prior: Mlp,
    metric_posterior: Option<Mlp>,
    treatment_head: Option<Mlp>,
    decoder_init: Linear,
    decoder: GruCell,
    output: Linear,
}

impl Cvae {
    /// Fresh networks. The causal heads exist only when `treatments` is non-empty.
    pub fn new(config: CvaeConfig, vocab: Vocab, treatments: Vec<TreatmentSpec>) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let mut rng = init::rng(c.seed);
        let rng = &mut rng;
        let half = c.sentence_dim / 2;
        let relu = Activation::Relu;
        let word_embedding = store.add("embed.word", init::normal(rng, &[vocab.len(), c.embed_dim], 0.1));
        let class_embedding = store.add("embed.class", init::normal(rng, &[CLASSES, c.class_dim], 0.1));
        let null_context = store.add("context.null", Tensor::zeros(&[1, c.context_dim]));
        let forward_gru = GruCell::new(&mut store, rng, "sentence.forward", c.embed_dim, half);
        let backward_gru = GruCell::new(&mut store, rng, "sentence.backward", c.embed_dim, half);
        let context_gru = GruCell::new(&mut store, rng, "context", c.sentence_dim, c.context_dim);
        let latent2 = 2 * c.latent_dim;
        let prior = Mlp::new(&mut store, rng, "prior", c.context_dim, &[c.hidden], latent2, Activation::Tanh);
        let recognition =
            Mlp::new(&mut store, rng, "recognition", c.sentence_dim + c.context_dim + c.class_dim, &[c.hidden], latent2, Activation::Tanh);
        let metric_prior = Mlp::new(&mut store, rng, "metric.prior", c.context_dim + c.latent_dim, &[c.hidden], CLASSES, relu);
        let k = treatments.len();
        let (metric_posterior, treatment_head) = if k > 0 {
            let inputs = k + c.sentence_dim + c.context_dim;
            (
                Some(Mlp::new(&mut store, rng, "metric.posterior", inputs, &[c.hidden], CLASSES, relu)),
                Some(Mlp::new(&mut store, rng, "treatment", c.sentence_dim, &[c.hidden], k, relu)),
            )
        } else {
            (None, None)
        };
        let decoder_init = Linear::new(&mut store, rng, "decoder.init", c.context_dim + c.latent_dim + c.class_dim, c.decoder_dim);
        let decoder = GruCell::new(&mut store, rng, "decoder", c.embed_dim + c.latent_dim + c.class_dim, c.decoder_dim);
        let output = Linear::new(&mut store, rng, "decoder.output", c.decoder_dim, vocab.len());
        Ok(Cvae {
            config,
            vocab,
            treatments,
            store,
            word_embedding,
            class_embedding,
            null_context,
            forward_gru,
            backward_gru,
            context_gru,
            prior,
            recognition,
            metric_prior,
            metric_posterior,
            treatment_head,
            decoder_init,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &CvaeConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn treatments(&self) -> &[TreatmentSpec] {
        &self.treatments
    }

    pub fn params(&self) -> &ParamStore<f64> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }

    fn embed(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, ids: &[TokenId]) -> Result<Vec<Var>> {
        let table = g.param(store, self.word_embedding);
        ids.iter().map(|id| g.gather(table, &[*id])).collect()
    }

    /// Final states of the forward and backward GRUs, concatenated.
    pub fn encode_sentence(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, ids: &[TokenId]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Invalid("cannot encode an empty sentence".into()));
        }
        let rows = self.embed(g, store, ids)?;
        let h0 = g.constant(Tensor::zeros(&[1, self.config.sentence_dim / 2]));
        let forward = *self.forward_gru.run(g, store, &rows, h0)?.last().expect("non-empty");
        let reversed: Vec<Var> = rows.iter().rev().copied().collect();
        let backward = *self.backward_gru.run(g, store, &reversed, h0)?.last().expect("non-empty");
        g.concat_cols(&[forward, backward])
    }

    /// Context GRU over sentence summaries; an empty context maps to a learned null vector.
    pub fn encode_context(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, sentences: &[Vec<TokenId>]) -> Result<Var> {
        if sentences.is_empty() {
            return Ok(g.param(store, self.null_context));
        }
        let summaries = sentences.iter().map(|s| self.encode_sentence(g, store, s)).collect::<Result<Vec<_>>>()?;
        let h0 = g.constant(Tensor::zeros(&[1, self.config.context_dim]));
        Ok(*self.context_gru.run(g, store, &summaries, h0)?.last().expect("non-empty"))
    }

    /// Context vector as plain values.
    pub fn context_vector(&self, sentences: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let c = self.encode_context(&mut g, &self.store, sentences)?;
        Ok(g.value(c).data().to_vec())
    }

    fn class_row(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, class: ControlClass) -> Result<Var> {
        let table = g.param(store, self.class_embedding);
        g.gather(table, &[class.index()])
    }

    fn gaussian_head(&self, g: &mut Graph<f64>, out: Var) -> Result<(Var, Var)> {
        let d = self.config.latent_dim;
        Ok((g.slice_cols(out, 0, d)?, g.slice_cols(out, d, d)?))
    }

    /// `μ + exp(½ log σ²) ⊙ ε`.
    fn reparameterize(g: &mut Graph<f64>, mu: Var, logvar: Var, epsilon: &[f64]) -> Result<Var> {
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let eps = g.constant(Tensor::row(epsilon));
        let spread = g.mul(std, eps)?;
        g.add(mu, spread)
    }

    /// Teacher-forced decoder logits `[n + 1, V]` for `<sot> x₁…xₙ`.
    fn decode_logits(
        &self,
        g: &mut Graph<f64>,
        store: &ParamStore<f64>,
        conditioning: [Var; 3],
        inputs: &[TokenId],
    ) -> Result<Var> {
        let [c, z, y] = conditioning;
        let init_in = g.concat_cols(&[c, z, y])?;
        let h0 = self.decoder_init.forward(g, store, init_in)?;
        let mut h = g.tanh(h0);
        let rows = self.embed(g, store, inputs)?;
        let mut logits = Vec::with_capacity(rows.len());
        for row in rows {
            let x = g.concat_cols(&[row, z, y])?;
            h = self.decoder.step(g, store, x, h)?;
            logits.push(self.output.forward(g, store, h)?);
        }
        g.concat_rows(&logits)
    }

    /// Bernoulli `−Σ_j log p(t_j | x)` from per-treatment logits, computed
    /// stably as two-way cross-entropies against a zero logit.
    fn treatment_nll(g: &mut Graph<f64>, logits: Var, t: &[bool]) -> Result<Var> {
        let k = t.len();
        let column = g.transpose(logits)?;
        let zeros = g.constant(Tensor::zeros(&[k, 1]));
        let pairs = g.concat_cols(&[zeros, column])?;
        let targets: Vec<usize> = t.iter().map(|b| usize::from(*b)).collect();
        let mean = g.cross_entropy(pairs, &targets)?;
        Ok(g.scale(mean, k as f64))
    }

    /// The bound with explicit term weights; see [`elbo_noncausal`] and [`elbo_causal`].
    pub fn elbo(
        &self,
        g: &mut Graph<f64>,
        store: &ParamStore<f64>,
        pair: &CvaePair,
        weights: &ElboWeights,
        noise: &ElboNoise,
    ) -> Result<ElboTerms> {
        let cfg = &self.config;
        if noise.epsilon.len() != cfg.latent_dim || noise.dropped.len() != pair.target.len() {
            return Err(Error::Invalid("noise does not match the latent width or target length".into()));
        }
        if pair.target.is_empty() {
            return Err(Error::Invalid("empty target sentence".into()));
        }
        let c = self.encode_context(g, store, &pair.context)?;
        let x = self.encode_sentence(g, store, &pair.target)?;
        let y = self.class_row(g, store, pair.class)?;

        let prior_out = self.prior.forward(g, store, c)?;
        let (mu_p, logvar_p) = self.gaussian_head(g, prior_out)?;
        let rec_in = g.concat_cols(&[x, c, y])?;
        let rec_out = self.recognition.forward(g, store, rec_in)?;
        let (mu_q, logvar_q) = self.gaussian_head(g, rec_out)?;
        let kl_z = gaussian_kl_var(g, mu_q, logvar_q, mu_p, logvar_p)?;
        let z = Self::reparameterize(g, mu_q, logvar_q, &noise.epsilon)?;

        let sot = self.vocab.special(TEXT_START)?;
        let unk = self.vocab.special(UNKNOWN)?;
        let mut inputs = vec![sot];
        inputs.extend(pair.target.iter().zip(&noise.dropped).map(|(t, d)| if *d { unk } else { *t }));
        let mut targets = pair.target.clone();
        targets.push(self.vocab.special(END_OF_TEXT)?);
        let logits = self.decode_logits(g, store, [c, z, y], &inputs)?;
        let mean_nll = g.cross_entropy(logits, &targets)?;
        let reconstruction = g.scale(mean_nll, targets.len() as f64);

        let mp_in = g.concat_cols(&[c, z])?;
        let metric_logits = self.metric_prior.forward(g, store, mp_in)?;
        let metric = g.cross_entropy(metric_logits, &[pair.class.index()])?;

        let mut total = g.scale(kl_z, weights.kl);
        let rec = g.scale(reconstruction, weights.reconstruction);
        total = g.add(total, rec)?;
        let met = g.scale(metric, weights.metric);
        total = g.add(total, met)?;

        let (mut metric_kl, mut treatment) = (None, None);
        if weights.metric_kl != 0.0 || weights.treatment != 0.0 {
            let (Some(posterior), Some(head)) = (&self.metric_posterior, &self.treatment_head) else {
                return Err(Error::Config("the causal bound needs at least one treatment feature".into()));
            };
            if pair.treatments.len() != self.treatments.len() {
                return Err(Error::Invalid(format!(
                    "pair has {} treatments, model expects {}",
                    pair.treatments.len(),
                    self.treatments.len()
                )));
            }
            if weights.metric_kl != 0.0 {
                let t_row: Vec<f64> = pair.treatments.iter().map(|b| f64::from(u8::from(*b))).collect();
                let t = g.constant(Tensor::row(&t_row));
                let post_in = g.concat_cols(&[t, x, c])?;
                let post_logits = posterior.forward(g, store, post_in)?;
                let q = g.softmax(post_logits)?;
                let p = g.softmax(metric_logits)?;
                let term = categorical_kl_var(g, q, p)?;
                let weighted = g.scale(term, weights.metric_kl);
                total = g.add(total, weighted)?;
                metric_kl = Some(term);
            }
            if weights.treatment != 0.0 {
                let logits = head.forward(g, store, x)?;
                let term = Self::treatment_nll(g, logits, &pair.treatments)?;
                let weighted = g.scale(term, weights.treatment);
                total = g.add(total, weighted)?;
                treatment = Some(term);
            }
        }
        Ok(ElboTerms { kl_z, reconstruction, metric, metric_kl, treatment, total })
    }

    /// p(y′ | c, z) and the metric posterior q(y′ | t, x, c) as plain rows.
    pub fn metric_distributions(
        &self,
        pair: &CvaePair,
        epsilon: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let store = &self.store;
        let c = self.encode_context(&mut g, store, &pair.context)?;
        let prior_out = self.prior.forward(&mut g, store, c)?;
        let (mu, logvar) = self.gaussian_head(&mut g, prior_out)?;
        let z = match epsilon {
            Some(eps) => Self::reparameterize(&mut g, mu, logvar, eps)?,
            None => mu,
        };
        let mp_in = g.concat_cols(&[c, z])?;
        let logits = self.metric_prior.forward(&mut g, store, mp_in)?;
        let p = g.softmax(logits)?;
        let q = match (&self.metric_posterior, pair.target.is_empty()) {
            (Some(posterior), false) if pair.treatments.len() == self.treatments.len() => {
                let x = self.encode_sentence(&mut g, store, &pair.target)?;
                let t_row: Vec<f64> = pair.treatments.iter().map(|b| f64::from(u8::from(*b))).collect();
                let t = g.constant(Tensor::row(&t_row));
                let post_in = g.concat_cols(&[t, x, c])?;
                let post_logits = posterior.forward(&mut g, store, post_in)?;
                let q = g.softmax(post_logits)?;
                Some(g.value(q).data().to_vec())
            }
            _ => None,
        };
        Ok((g.value(p).data().to_vec(), q))
    }

    /// Samples `z ~ p(z | c)`, picks y′ per `policy`, then decodes until the
    /// end token or `max_len` tokens. `temperature = None` decodes greedily.
    pub fn generate(
        &self,
        context: &[Vec<TokenId>],
        target: ControlClass,
        policy: MetricPolicy,
        temperature: Option<f64>,
        max_len: usize,
        seed: u64,
    ) -> Result<Vec<TokenId>> {
        if let Some(t) = temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("sampling temperature must be positive, got {t}")));
            }
        }
        let mut rng = init::rng(seed);
        let store = &self.store;
        let mut g = Graph::new();
        let c = self.encode_context(&mut g, store, context)?;
        let prior_out = self.prior.forward(&mut g, store, c)?;
        let (mu, logvar) = self.gaussian_head(&mut g, prior_out)?;
        let eps = init::normal::<f64>(&mut rng, &[self.config.latent_dim], 1.0);
        let z = Self::reparameterize(&mut g, mu, logvar, eps.data())?;

        let class = match policy {
            MetricPolicy::Force => target,
            MetricPolicy::Sample | MetricPolicy::Argmax => {
                let mp_in = g.concat_cols(&[c, z])?;
                let logits = self.metric_prior.forward(&mut g, store, mp_in)?;
                let mut p = g.value(logits).data().to_vec();
                softmax_in_place(&mut p);
                let idx = if policy == MetricPolicy::Sample {
                    sample_index(&p, &mut rng)
                } else {
                    crate::classifier::bag::argmax(&p)
                };
                ControlClass::from_index(idx).expect("three classes")
            }
        };
        let y = self.class_row(&mut g, store, class)?;
        let init_in = g.concat_cols(&[c, z, y])?;
        let h0 = self.decoder_init.forward(&mut g, store, init_in)?;
        let mut h = g.tanh(h0);

        let allowed: Vec<bool> = (0..self.vocab.len()).map(|i| self.vocab.is_text_token(i)).collect();
        let eot = self.vocab.special(END_OF_TEXT)?;
        let table = g.param(store, self.word_embedding);
        let mut prev = self.vocab.special(TEXT_START)?;
        let mut out = Vec::new();
        while out.len() < max_len {
            let row = g.gather(table, &[prev])?;
            let x = g.concat_cols(&[row, z, y])?;
            h = self.decoder.step(&mut g, store, x, h)?;
            let logits = self.output.forward(&mut g, store, h)?;
            let values = g.value(logits).data();
            let next = match temperature {
                Some(t) => {
                    let mut p: Vec<f64> =
                        values.iter().zip(&allowed).map(|(l, ok)| if *ok { l / t } else { f64::NEG_INFINITY }).collect();
                    softmax_in_place(&mut p);
                    sample_index(&p, &mut rng)
                }
                None => values
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| allowed[*i])
                    .fold((0, f64::NEG_INFINITY), |best, (i, l)| if *l > best.1 { (i, *l) } else { best })
                    .0,
            };
            if next == eot {
                break;
            }
            out.push(next);
            prev = next;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CvaeHeader {
            kind: "cvae".into(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            treatments: self.treatments.clone(),
        };
        write_bundle(path, &header, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, stored): (CvaeHeader, ParamStore<f64>) = read_bundle(path)?;
        if header.kind != "cvae" {
            return Err(Error::Checkpoint(format!("expected a cvae checkpoint, found {:?}", header.kind)));
        }
        let mut model = Cvae::new(header.config, header.vocab, header.treatments)?;
        restore_into(&mut model.store, &stored)?;
        Ok(model)
    }

    pub fn parameter_bits(&self) -> Vec<u64> {
        self.store.flat_values().iter().map(|x| x.to_bits()).collect()
    }
}

/// Negated non-causal bound: KL on z, reconstruction and metric reconstruction.
pub fn elbo_noncausal(
    g: &mut Graph<f64>,
    model: &Cvae,
    store: &ParamStore<f64>,
    pair: &CvaePair,
    kl_weight: f64,
    noise: &ElboNoise,
) -> Result<ElboTerms> {
    model.elbo(g, store, pair, &ElboWeights::for_variant(CvaeVariant::NonCausal, kl_weight), noise)
}

/// Negated causal bound: the non-causal terms plus the metric-posterior KL and
/// the treatment likelihood.
pub fn elbo_causal(
    g: &mut Graph<f64>,
    model: &Cvae,
    store: &ParamStore<f64>,
    pair: &CvaePair,
    kl_weight: f64,
    noise: &ElboNoise,
) -> Result<ElboTerms> {
    model.elbo(g, store, pair, &ElboWeights::for_variant(CvaeVariant::Causal, kl_weight), noise)
}
