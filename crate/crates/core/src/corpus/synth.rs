//! Synthetic corpora with planted causal structure.
//!
//! Each document has a latent confounder level `k` (revealed exactly by its
//! noun count, which falls in a level-specific disjoint range) and one latent
//! level per treatment knob. Knob levels pick disjoint ranges for the knob's
//! feature, so binarizing at the recorded threshold recovers the latent
//! treatment. The outcome is linear-Gaussian:
//!
//! `y = base + Σ_knob effect·level + shift·k + N(0, noise_std²)`
//!
//! and is stored as the count `round_stochastic(y · outcome_scale)`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{bucketize, ControlClass, Document};
use crate::autodiff::init::{self, SeededRng};
use crate::error::{Error, Result};
use crate::features::Feature;

/// Nouns per confounder level; the level decides which pool a document draws from.
pub const TOPIC_NOUNS: [&[&str]; 5] = [
    &["hospital", "nurse", "patient", "doctor", "clinic", "vaccine", "virus", "symptom", "dose", "treatment", "infection", "surgeon"],
    &["market", "investor", "bank", "profit", "revenue", "loan", "budget", "salary", "debt", "customer", "brand", "stock"],
    &["stadium", "coach", "athlete", "league", "medal", "championship", "runner", "ticket", "fan", "goal", "season", "captain"],
    &["forest", "river", "mountain", "ocean", "island", "valley", "storm", "lake", "desert", "coast", "harbor", "beach"],
    &["museum", "sculpture", "concert", "album", "singer", "novel", "poem", "gallery", "actor", "festival", "theater", "artist"],
];
pub const VERBS: &[&str] = &[
    "said", "reported", "announced", "opened", "closed", "moved", "visited", "helped", "joined", "raised", "launched", "warned",
    "decided", "claimed", "followed", "watched", "changed", "started", "added", "showed",
];
pub const ADJECTIVES: &[&str] = &["new", "local", "major", "recent", "strong", "public", "large", "small", "modern", "serious"];
pub const ADVERBS: &[&str] = &["quickly", "recently", "clearly", "slowly", "finally", "nearly"];
pub const PRONOUNS: &[&str] = &["they", "we", "she", "he", "it"];
/// Marker words for the marker corpus, indexed by [`ControlClass::index`].
pub const MARKERS: [&str; 3] = ["zinc", "amber", "cobalt"];

/// Disjoint inclusive value range of a knob's feature at one latent level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRange {
    pub min: u32,
    pub max: u32,
}

/// A feature whose value is set by a latent level with a planted linear effect.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnobSpec {
    pub feature: Feature,
    /// Outcome change per level step.
    pub effect: f64,
    pub ranges: Vec<LevelRange>,
    /// Whether level assignment depends on the confounder.
    #[serde(default = "yes")]
    pub confounded: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfounderSpec {
    /// Probability of an upper-half knob level, per confounder level.
    pub propensities: Vec<f64>,
    /// Outcome shift per confounder level.
    pub outcome_shift: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub samples: usize,
    pub seed: u64,
    pub metric_name: String,
    pub base_outcome: f64,
    pub noise_std: f64,
    /// Metric counts per outcome unit.
    pub outcome_scale: f64,
    pub confounder: ConfounderSpec,
    pub knobs: Vec<KnobSpec>,
    /// Sentences per document before paragraph constraints.
    pub sentences: LevelRange,
    /// Optional `(t_low, t_high)` used to fill `buckets[metric_name]`.
    pub bucket_thresholds: Option<(u64, u64)>,
    /// Extra topic-free sentences supplied as preceding context.
    pub context_sentences: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 5000,
            seed: 7,
            metric_name: "participation".into(),
            base_outcome: 5.0,
            noise_std: 0.1,
            outcome_scale: 100.0,
            confounder: ConfounderSpec { propensities: vec![0.2, 0.5, 0.8], outcome_shift: 1.5 },
            knobs: vec![
                KnobSpec {
                    feature: Feature::ParagraphCount,
                    effect: 2.0,
                    ranges: vec![LevelRange { min: 1, max: 2 }, LevelRange { min: 4, max: 5 }],
                    confounded: true,
                },
                KnobSpec {
                    feature: Feature::VerbCount,
                    effect: 0.0,
                    ranges: vec![LevelRange { min: 4, max: 10 }, LevelRange { min: 14, max: 20 }],
                    confounded: true,
                },
            ],
            sentences: LevelRange { min: 5, max: 8 },
            bucket_thresholds: None,
            context_sentences: 2,
        }
    }
}

impl SynthConfig {
    /// Sets the planted effect of an existing knob.
    pub fn with_effect(mut self, feature: Feature, effect: f64) -> Self {
        if let Some(k) = self.knobs.iter_mut().find(|k| k.feature == feature) {
            k.effect = effect;
        }
        self
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.confounder.propensities.is_empty() || self.confounder.propensities.len() > TOPIC_NOUNS.len() {
            return bad(format!("confounder needs 1..={} levels", TOPIC_NOUNS.len()));
        }
        if self.confounder.propensities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("confounder propensities must lie in [0, 1]".into());
        }
        if self.noise_std < 0.0 || self.outcome_scale <= 0.0 {
            return bad("noise_std must be ≥ 0 and outcome_scale > 0".into());
        }
        // every sentence holds a noun, and the smallest noun range starts at 10
        if self.sentences.min == 0 || self.sentences.min > self.sentences.max || self.sentences.max > 10 {
            return bad("sentence range must be non-empty and lie in 1..=10".into());
        }
        for knob in &self.knobs {
            if !matches!(knob.feature, Feature::ParagraphCount | Feature::VerbCount) {
                return bad(format!("knob feature {} is not supported (paragraph_count, verb_count)", knob.feature));
            }
            if knob.ranges.len() < 2 {
                return bad(format!("knob {} needs at least two levels", knob.feature));
            }
            for pair in knob.ranges.windows(2) {
                if pair[0].min > pair[0].max || pair[0].max >= pair[1].min {
                    return bad(format!("knob {} ranges must be ordered and disjoint", knob.feature));
                }
            }
            let last = knob.ranges.last().expect("≥ 2 ranges");
            if last.min > last.max {
                return bad(format!("knob {} has an empty range", knob.feature));
            }
            if knob.feature == Feature::ParagraphCount && (knob.ranges[0].min == 0 || last.max > 10) {
                return bad("paragraph ranges must lie in 1..=10".into());
            }
        }
        if let Some((lo, hi)) = self.bucket_thresholds {
            bucketize(0, lo, hi)?;
        }
        Ok(())
    }

    fn noun_range(level: usize) -> LevelRange {
        let base = 10 + 10 * level as u32;
        LevelRange { min: base, max: base + 7 }
    }
}

/// Planted structure recorded next to a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub metric_name: String,
    pub outcome_scale: f64,
    /// Feature → outcome change per level step (0 for features without a knob).
    pub effects: BTreeMap<String, f64>,
    /// Binary knobs: `T = 1` iff the feature exceeds this value.
    pub thresholds: BTreeMap<String, f64>,
    /// Binary knobs: expected naive mean difference minus the planted effect.
    pub naive_bias: BTreeMap<String, f64>,
    pub confounder_levels: usize,
    pub confounder_shift: f64,
    pub samples: usize,
    pub seed: u64,
}

impl GroundTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&src)?)
    }
}

fn pick<'a>(rng: &mut SeededRng, pool: &[&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

fn in_range(rng: &mut SeededRng, r: LevelRange) -> u32 {
    rng.gen_range(r.min..=r.max)
}

/// Rounds up with probability equal to the fractional part, so the count's
/// expectation is exactly `x`.
fn stochastic_round(rng: &mut SeededRng, x: f64) -> u64 {
    let x = x.max(0.0);
    let floor = x.floor();
    floor as u64 + u64::from(rng.gen::<f64>() < x - floor)
}

/// Splits `total` items over `slots` slots with at least `min_each` per slot.
fn spread(rng: &mut SeededRng, total: u32, slots: usize, min_each: u32) -> Vec<u32> {
    let mut out = vec![min_each; slots];
    for _ in 0..total.saturating_sub(min_each * slots as u32) {
        out[rng.gen_range(0..slots)] += 1;
    }
    out
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

/// Lowercase words with exactly `nouns` nouns and `verbs` verbs, plus optional
/// adjectives/adverbs/pronouns and untagged fillers.
fn sentence_body(rng: &mut SeededRng, noun_pool: &[&str], nouns: u32, verbs: u32, extras: [u32; 3]) -> String {
    let mut chunks: Vec<String> = Vec::new();
    for _ in 0..nouns {
        chunks.push(format!("the {}", pick(rng, noun_pool)));
    }
    for _ in 0..verbs {
        chunks.push(pick(rng, VERBS).to_string());
    }
    for (pool, count) in [ADJECTIVES, ADVERBS, PRONOUNS].iter().zip(extras) {
        for _ in 0..count {
            chunks.push(pick(rng, pool).to_string());
        }
    }
    chunks.shuffle(rng);
    chunks.join(" ")
}

fn sentence(rng: &mut SeededRng, noun_pool: &[&str], nouns: u32, verbs: u32, extras: [u32; 3]) -> String {
    format!("{}.", capitalize(&sentence_body(rng, noun_pool, nouns, verbs, extras)))
}

/// Generates the corpus and its ground truth. Identical configs give identical output.
pub fn synthesize_corpus(cfg: &SynthConfig) -> Result<(Vec<Document>, GroundTruth)> {
    cfg.validate()?;
    let mut rng = init::rng(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let conf_levels = cfg.confounder.propensities.len();
    let knob = |f: Feature| cfg.knobs.iter().find(|k| k.feature == f);

    let mut docs = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let k = rng.gen_range(0..conf_levels);
        let mut outcome = cfg.base_outcome + cfg.confounder.outcome_shift * k as f64;
        let mut levels = BTreeMap::new();
        for spec in &cfg.knobs {
            let m = spec.ranges.len();
            let split = m.div_ceil(2);
            let p_upper = if spec.confounded { cfg.confounder.propensities[k] } else { 0.5 };
            let level = if rng.gen::<f64>() < p_upper { rng.gen_range(split..m) } else { rng.gen_range(0..split) };
            outcome += spec.effect * level as f64;
            levels.insert(spec.feature, level);
        }
        outcome += noise.sample(&mut rng);

        let paragraphs = match knob(Feature::ParagraphCount) {
            Some(spec) => in_range(&mut rng, spec.ranges[levels[&Feature::ParagraphCount]]),
            None => 1,
        } as usize;
        let sentences = (in_range(&mut rng, cfg.sentences) as usize).max(paragraphs);
        let verbs = match knob(Feature::VerbCount) {
            Some(spec) => in_range(&mut rng, spec.ranges[levels[&Feature::VerbCount]]),
            None => rng.gen_range(sentences as u32..=2 * sentences as u32),
        };
        let nouns = in_range(&mut rng, SynthConfig::noun_range(k)).max(sentences as u32);

        let pool = TOPIC_NOUNS[k];
        let noun_split = spread(&mut rng, nouns, sentences, 1);
        let verb_split = spread(&mut rng, verbs, sentences, 0);
        let texts: Vec<String> = (0..sentences)
            .map(|s| {
                let extras = [rng.gen_range(0..=1), u32::from(rng.gen_bool(0.2)), u32::from(rng.gen_bool(0.3))];
                sentence(&mut rng, pool, noun_split[s], verb_split[s], extras)
            })
            .collect();
        let para_sizes = spread(&mut rng, sentences as u32, paragraphs, 1);
        let mut cursor = 0;
        let text = para_sizes
            .iter()
            .map(|n| {
                let block = texts[cursor..cursor + *n as usize].join(" ");
                cursor += *n as usize;
                block
            })
            .collect::<Vec<_>>()
            .join("\n\n");

        let context = (0..cfg.context_sentences)
            .map(|_| {
                let nouns = rng.gen_range(1..=3);
                sentence(&mut rng, pool, nouns, 1, [0, 0, 0])
            })
            .collect();
        let count = stochastic_round(&mut rng, outcome * cfg.outcome_scale);

        let mut doc = Document { id: format!("synth-{i:05}"), text, context, ..Default::default() };
        doc.metrics.insert(cfg.metric_name.clone(), count);
        doc.metadata.insert("confounder".into(), k.into());
        doc.metadata.insert("link_count".into(), rng.gen_range(0..=2u32).into());
        for (f, level) in &levels {
            doc.metadata.insert(format!("{}_level", f.name()), (*level).into());
        }
        if let Some((lo, hi)) = cfg.bucket_thresholds {
            doc.buckets.insert(cfg.metric_name.clone(), bucketize(count, lo, hi)?);
        }
        docs.push(doc);
    }

    Ok((docs, ground_truth(cfg)))
}

fn ground_truth(cfg: &SynthConfig) -> GroundTruth {
    let props = &cfg.confounder.propensities;
    let levels = props.len() as f64;
    let mut effects: BTreeMap<String, f64> = Feature::TEXTUAL.iter().map(|f| (f.name().to_string(), 0.0)).collect();
    let mut thresholds = BTreeMap::new();
    let mut naive_bias = BTreeMap::new();
    for spec in &cfg.knobs {
        effects.insert(spec.feature.name().into(), spec.effect);
        if spec.ranges.len() == 2 {
            thresholds.insert(spec.feature.name().into(), spec.ranges[0].max as f64);
            // E[k | T=1] − E[k | T=0] under a uniform confounder
            let bias = if spec.confounded {
                let p1: f64 = props.iter().sum::<f64>() / levels;
                let ek1: f64 = props.iter().enumerate().map(|(k, p)| k as f64 * p).sum::<f64>() / levels / p1;
                let ek0: f64 = props.iter().enumerate().map(|(k, p)| k as f64 * (1.0 - p)).sum::<f64>() / levels / (1.0 - p1);
                cfg.confounder.outcome_shift * (ek1 - ek0)
            } else {
                0.0
            };
            naive_bias.insert(spec.feature.name().into(), bias);
        }
    }
    GroundTruth {
        metric_name: cfg.metric_name.clone(),
        outcome_scale: cfg.outcome_scale,
        effects,
        thresholds,
        naive_bias,
        confounder_levels: props.len(),
        confounder_shift: cfg.confounder.outcome_shift,
        samples: cfg.samples,
        seed: cfg.seed,
    }
}

/// Short documents whose class is marked by a class-specific word
/// ([`MARKERS`]); the metric count encodes the class (0, 10, 20).
pub fn synthesize_marker_corpus(samples: usize, metric_name: &str, seed: u64) -> Vec<Document> {
    let mut rng = init::rng(seed);
    (0..samples)
        .map(|i| {
            let class = ControlClass::ALL[i % 3];
            let pool = TOPIC_NOUNS[rng.gen_range(0..2)];
            let marker = MARKERS[class.index()];
            let sentences = rng.gen_range(2..=3);
            let text = (0..sentences)
                .map(|_| {
                    let nouns = rng.gen_range(1..=2);
                    let body = sentence_body(&mut rng, pool, nouns, 1, [0, 0, 0]);
                    format!("{} {body}.", capitalize(marker))
                })
                .collect::<Vec<_>>()
                .join(" ");
            let mut doc = Document { id: format!("marker-{i:05}"), text, ..Default::default() };
            doc.metrics.insert(metric_name.to_string(), 10 * class.index() as u64);
            doc.buckets.insert(metric_name.to_string(), class);
            doc
        })
        .collect()
}

/// Verb totals per document for each class of the control corpus; the ranges
/// are disjoint so the verb count alone decides the bucket.
pub const CONTROL_VERB_RANGES: [LevelRange; 3] =
    [LevelRange { min: 0, max: 2 }, LevelRange { min: 5, max: 7 }, LevelRange { min: 10, max: 12 }];

/// Probability, per class, that a control-corpus document uses the
/// adjective-heavy style; style is correlated with the bucket but never
/// decides it.
pub const CONTROL_STYLE_RATES: [f64; 3] = [0.1, 0.5, 0.9];

/// Four-sentence documents over two topic pools whose bucket is a function of
/// the verb count ([`CONTROL_VERB_RANGES`]). An adjective-heavy style
/// ([`CONTROL_STYLE_RATES`]) is a spurious correlate of the bucket; nouns and
/// topic are independent of it. Keywords are the first two nouns.
pub fn synthesize_control_corpus(samples: usize, metric_name: &str, seed: u64) -> Vec<Document> {
    let mut rng = init::rng(seed);
    (0..samples)
        .map(|i| {
            let class = ControlClass::ALL[i % 3];
            let topic = rng.gen_range(0..2);
            let pool = TOPIC_NOUNS[topic];
            let total = in_range(&mut rng, CONTROL_VERB_RANGES[class.index()]);
            let verbs = spread(&mut rng, total, 4, 0);
            let ornate = rng.gen::<f64>() < CONTROL_STYLE_RATES[class.index()];
            let adjective_total = if ornate { rng.gen_range(5..=7) } else { rng.gen_range(0..=1) };
            let adjectives = spread(&mut rng, adjective_total, 4, 0);
            let mut keywords = Vec::new();
            let text = verbs
                .iter()
                .zip(&adjectives)
                .map(|(v, a)| {
                    let nouns = rng.gen_range(1..=2);
                    let extras = [*a, 0, 0];
                    let s = sentence(&mut rng, pool, nouns, *v, extras);
                    keywords.extend(
                        s.split(|c: char| !c.is_alphanumeric())
                            .map(str::to_lowercase)
                            .filter(|w| pool.contains(&w.as_str())),
                    );
                    s
                })
                .collect::<Vec<_>>()
                .join(" ");
            keywords.truncate(2);
            let mut doc = Document { id: format!("control-{i:05}"), text, topic: Some(topic), keywords, ..Default::default() };
            doc.metadata.insert("ornate".into(), ornate.into());
            doc.metrics.insert(metric_name.to_string(), 10 * class.index() as u64);
            doc.buckets.insert(metric_name.to_string(), class);
            doc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{extract_features, PosLexicon, PosTag};

    #[test]
    fn pools_carry_their_tags() {
        let lex = PosLexicon::bundled();
        for pool in TOPIC_NOUNS {
            for w in pool {
                assert_eq!(lex.tag(w), PosTag::Noun, "{w}");
            }
        }
        for (pool, tag) in [(VERBS, PosTag::Verb), (ADJECTIVES, PosTag::Adjective), (ADVERBS, PosTag::Adverb), (PRONOUNS, PosTag::Pronoun)] {
            for w in pool {
                assert_eq!(lex.tag(w), tag, "{w}");
            }
        }
        assert_eq!(lex.tag("the"), PosTag::Other);
        for m in MARKERS {
            assert!(TOPIC_NOUNS.iter().all(|p| !p.contains(&m)));
        }
    }

    #[test]
    fn knob_levels_are_recoverable_from_text() {
        let cfg = SynthConfig { samples: 300, ..Default::default() };
        let (docs, truth) = synthesize_corpus(&cfg).unwrap();
        let lex = PosLexicon::bundled();
        for doc in &docs {
            let fv = extract_features(doc, lex);
            let k = doc.metadata["confounder"].as_u64().unwrap() as usize;
            let nouns = fv.get(Feature::NounCount) as u32;
            let r = SynthConfig::noun_range(k);
            assert!(nouns >= r.min && nouns <= r.max, "{nouns} outside level {k}");
            for (name, threshold) in &truth.thresholds {
                let f: Feature = name.parse().unwrap();
                let level = doc.metadata[&format!("{name}_level")].as_u64().unwrap();
                assert_eq!(u64::from(fv.get(f) > *threshold), level, "{name} in {}", doc.id);
            }
        }
    }

    #[test]
    fn control_corpus_bucket_follows_verb_count() {
        let lex = PosLexicon::bundled();
        for doc in synthesize_control_corpus(90, "m", 4) {
            let verbs = extract_features(&doc, lex).get(Feature::VerbCount) as u32;
            let r = CONTROL_VERB_RANGES[doc.buckets["m"].index()];
            assert!(verbs >= r.min && verbs <= r.max, "{}: {verbs} verbs", doc.text);
            assert_eq!(doc.keywords.len().min(2), doc.keywords.len());
        }
    }

    #[test]
    fn ground_truth_bookkeeping() {
        let cfg = SynthConfig { samples: 10, ..Default::default() }.with_effect(Feature::ParagraphCount, 2.0);
        let (_, truth) = synthesize_corpus(&cfg).unwrap();
        assert_eq!(truth.effects["paragraph_count"], 2.0);
        assert_eq!(truth.effects["verb_count"], 0.0);
        // (0·.2 + 1·.5 + 2·.8)/1.5 − (0·.8 + 1·.5 + 2·.2)/1.5 = 0.8, times the shift
        assert!((truth.naive_bias["paragraph_count"] - 0.8 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_knob_is_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.knobs[0].ranges = vec![LevelRange { min: 1, max: 4 }, LevelRange { min: 3, max: 5 }];
        assert!(synthesize_corpus(&cfg).is_err());
    }

    #[test]
    fn marker_documents_contain_their_marker() {
        for doc in synthesize_marker_corpus(30, "m", 1) {
            let class = doc.buckets["m"];
            let tokens = crate::features::tokenize(&doc.text);
            for (c, m) in MARKERS.iter().enumerate() {
                assert_eq!(tokens.contains(&m.to_string()), c == class.index(), "{}", doc.text);
            }
        }
    }
}
