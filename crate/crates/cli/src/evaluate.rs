//! Automatic evaluation of a trained generator on a held-out corpus.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use camgen::autodiff::checkpoint::read_bundle;
use camgen::autodiff::init::derive_seed;
use camgen::classifier::{BagClassifier, FeatureClassifier};
use camgen::corpus::{ControlClass, Document};
use camgen::cvae::{pairs_from_document, split_sentences, Cvae, MetricPolicy};
use camgen::eval::{
    control_accuracy, feature_distribution_report, perplexity, rouge, ControlJudge, EvalReport, FeatureJudge,
    ReportPaths, RougeVariant,
};
use camgen::features::{Feature, PosLexicon};
use camgen::transformer::{Example, Transformer};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{resolve, write_snapshot, Overrides};
use crate::data::{lexicon, load_corpus, required};
use crate::generate::DecodeKind;
use crate::log;

const DEFAULT_FEATURES: [Feature; 4] = [Feature::WordCount, Feature::NounCount, Feature::VerbCount, Feature::AdjectiveCount];

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateRun {
    /// Transformer or CVAE checkpoint.
    pub model: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    /// Bag or feature classifier that judges control accuracy.
    pub classifier: Option<PathBuf>,
    pub metric: String,
    pub samples_per_prompt: usize,
    pub decode: DecodeKind,
    pub temperature: f64,
    pub max_tokens: usize,
    /// Features summarized per class; empty means the judge's own features
    /// for a feature classifier, otherwise word, noun, verb and adjective counts.
    pub features: Vec<Feature>,
    pub lexicon: Option<PathBuf>,
    pub seed: u64,
}

impl Default for EvaluateRun {
    fn default() -> Self {
        EvaluateRun {
            model: None,
            corpus: None,
            classifier: None,
            metric: "participation".into(),
            samples_per_prompt: 1,
            decode: DecodeKind::Sample,
            temperature: 1.0,
            max_tokens: 64,
            features: Vec::new(),
            lexicon: None,
            seed: 0,
        }
    }
}

fn checkpoint_kind(path: &Path) -> Result<String> {
    let (header, _): (serde_json::Value, camgen::ParamStore64) =
        read_bundle(path).with_context(|| format!("reading {}", path.display()))?;
    header["kind"].as_str().map(str::to_string).with_context(|| format!("{} has no kind", path.display()))
}

enum Judge {
    Bag(BagClassifier),
    Features(FeatureClassifier),
}

impl Judge {
    fn load(path: &Path) -> Result<Self> {
        Ok(match checkpoint_kind(path)?.as_str() {
            "bag" => Judge::Bag(BagClassifier::load(path)?),
            "feature" => Judge::Features(FeatureClassifier::load(path)?),
            other => bail!("{} is a {other:?} checkpoint, not a classifier", path.display()),
        })
    }

    fn describe(&self) -> String {
        match self {
            Judge::Bag(c) => format!("bag classifier, orders {:?}, dim {}", c.header().orders, c.dim()),
            Judge::Features(c) => {
                let names: Vec<&str> = c.features().iter().map(|f| f.name()).collect();
                format!("feature classifier over {}", names.join(", "))
            }
        }
    }

    fn features(&self) -> Option<Vec<Feature>> {
        match self {
            Judge::Bag(_) => None,
            Judge::Features(c) => Some(c.features().to_vec()),
        }
    }

    fn accuracy(&self, gens: &[(String, ControlClass)], lexicon: &PosLexicon) -> Result<camgen::eval::ControlScore> {
        Ok(match self {
            Judge::Bag(c) => control_accuracy(gens, c as &dyn ControlJudge)?,
            Judge::Features(c) => control_accuracy(gens, &FeatureJudge { classifier: c, lexicon })?,
        })
    }
}

/// Generated text, its target class and the reference it is compared with.
struct Sample {
    text: String,
    target: ControlClass,
    reference: String,
}

fn class_of(doc: &Document, metric: &str) -> Result<ControlClass> {
    doc.buckets.get(metric).copied().with_context(|| format!("document {} has no {metric} bucket", doc.id))
}

fn transformer_samples(model: &Transformer, docs: &[Document], cfg: &EvaluateRun, lex: &PosLexicon) -> Result<(Vec<Sample>, f64)> {
    let vocab = model.vocab();
    let max_len = model.config().max_len;
    let mut samples = Vec::new();
    for (i, doc) in docs.iter().enumerate() {
        let target = class_of(doc, &cfg.metric)?;
        let topic = doc.topic.unwrap_or(0).min(vocab.topics().saturating_sub(1));
        let prompt = vocab.format_prompt(target, topic, &doc.keywords)?;
        for k in 0..cfg.samples_per_prompt {
            let seed = derive_seed(cfg.seed, (i * cfg.samples_per_prompt + k) as u64);
            let ids = model.generate(&prompt, target, cfg.decode.with(cfg.temperature, seed), cfg.max_tokens)?;
            samples.push(Sample { text: vocab.decode_text(&ids), target, reference: doc.text.clone() });
        }
    }
    let examples = docs
        .iter()
        .map(|d| Example::from_document(d, &cfg.metric, vocab, lex, max_len))
        .collect::<camgen::Result<Vec<_>>>()?;
    Ok((samples, perplexity(model, &examples)?))
}

/// Each document's last sentence is the reference; the sentences before it are the context.
fn cvae_samples(model: &Cvae, docs: &[Document], cfg: &EvaluateRun, lex: &PosLexicon) -> Result<(Vec<Sample>, f64)> {
    let vocab = model.vocab();
    let temperature = (cfg.decode == DecodeKind::Sample).then_some(cfg.temperature);
    let mut samples = Vec::new();
    let mut pairs = Vec::new();
    for (i, doc) in docs.iter().enumerate() {
        let target = class_of(doc, &cfg.metric)?;
        let sentences = split_sentences(vocab, &vocab.encode_text(&doc.text));
        let Some((last, before)) = sentences.split_last() else { continue };
        let context = &before[before.len().saturating_sub(model.config().max_context)..];
        for k in 0..cfg.samples_per_prompt {
            let seed = derive_seed(cfg.seed, (i * cfg.samples_per_prompt + k) as u64);
            let ids = model.generate(context, target, MetricPolicy::Force, temperature, cfg.max_tokens, seed)?;
            samples.push(Sample { text: vocab.decode_text(&ids), target, reference: vocab.decode_text(last) });
        }
        pairs.extend(pairs_from_document(doc, &cfg.metric, vocab, lex, model.treatments(), model.config())?);
    }
    Ok((samples, perplexity(model, &pairs)?))
}

/// Score a generator: control accuracy, perplexity, ROUGE and feature distributions.
#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    samples_per_prompt: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

impl EvaluateArgs {
    pub fn run(self, config: Option<&Path>) -> Result<()> {
        let mut o = Overrides::default();
        o.set("model", self.model)?.set("corpus", self.corpus)?.set("classifier", self.classifier)?;
        o.set("samples_per_prompt", self.samples_per_prompt)?.set("seed", self.seed)?;
        let cfg: EvaluateRun = resolve("evaluate", config, o)?;
        write_snapshot(&self.out, &cfg)?;
        let model_path = required(&cfg.model, "model")?;
        let docs = load_corpus(required(&cfg.corpus, "corpus")?)?;
        let judge = Judge::load(required(&cfg.classifier, "classifier")?)?;
        let lex = lexicon(&cfg.lexicon)?;

        let (samples, ppl) = match checkpoint_kind(model_path)?.as_str() {
            "transformer" => transformer_samples(&Transformer::load(model_path)?, &docs, &cfg, &lex)?,
            "cvae" => cvae_samples(&Cvae::load(model_path)?, &docs, &cfg, &lex)?,
            other => bail!("{} is a {other:?} checkpoint, not a generator", model_path.display()),
        };
        if samples.is_empty() {
            bail!("no generations were produced");
        }
        let gens: Vec<(String, ControlClass)> = samples.iter().map(|s| (s.text.clone(), s.target)).collect();
        let score = judge.accuracy(&gens, &lex)?;
        let mean_rouge = |variant| -> Result<f64> {
            let mut sum = 0.0;
            for s in &samples {
                sum += rouge(&s.text, &[&s.reference], variant)?.f1;
            }
            Ok(sum / samples.len() as f64)
        };
        let features = if cfg.features.is_empty() {
            judge.features().unwrap_or_else(|| DEFAULT_FEATURES.to_vec())
        } else {
            cfg.features.clone()
        };
        let name = model_path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
        let distribution = feature_distribution_report(&name, &gens, &features, &lex)?;
        for w in &distribution.warnings {
            log::warn("feature_distribution", json!({ "message": w }));
        }
        let report = EvalReport {
            model: name,
            judge: judge.describe(),
            samples: samples.len(),
            control_accuracy: score.accuracy,
            perplexity: ppl,
            rouge_1: mean_rouge(RougeVariant::Unigram)?,
            rouge_2: mean_rouge(RougeVariant::Bigram)?,
            rouge_l: mean_rouge(RougeVariant::LongestCommonSubsequence)?,
            bleurt: None,
            confusion: score.confusion,
            features: distribution,
        };
        report.emit(&ReportPaths::under(&self.out))?;
        log::info(
            "evaluate",
            json!({ "control_accuracy": report.control_accuracy, "perplexity": report.perplexity, "samples": report.samples }),
        );
        Ok(())
    }
}
