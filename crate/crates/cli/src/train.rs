//! Model training: train-clf, train-gen, train-cvae.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use camgen::autodiff::init::derive_seed;
use camgen::causal::AteReport;
use camgen::classifier::{
    train_bag_classifier, train_feature_classifier, BagClassifier, BagConfig, FeatureClassifier,
    FeatureClassifierConfig,
};
use camgen::corpus::{ControlClass, Document};
use camgen::cvae::{pairs_from_document, train_cvae, Cvae, CvaeConfig, CvaeTrainConfig, CvaeVariant, TreatmentSpec};
use camgen::features::{extract_features, Feature};
use camgen::transformer::{train_transformer, AttentionMode, Example, Feedback, TrainConfig, Transformer, TransformerConfig};
use camgen::vocab::Vocab;
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{resolve, write_snapshot, Overrides};
use crate::data::{lexicon, load_corpus, required};
use crate::log;

pub const METRIC_CLASSIFIER: &str = "metric.clf";
pub const TOPIC_CLASSIFIER: &str = "topic.clf";
pub const CAUSAL_CLASSIFIER: &str = "causal.clf";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn class_names() -> Vec<String> {
    ControlClass::ALL.iter().map(|c| c.name().to_string()).collect()
}

fn labels(docs: &[Document], metric: &str) -> Result<Vec<ControlClass>> {
    docs.iter()
        .map(|d| d.buckets.get(metric).copied().with_context(|| format!("document {} has no {metric} bucket", d.id)))
        .collect()
}

fn topic_count(docs: &[Document]) -> usize {
    docs.iter().filter_map(|d| d.topic).max().map_or(1, |t| t + 1)
}

fn read_ate(path: &Option<PathBuf>) -> Result<Option<AteReport>> {
    path.as_deref().map(|p| AteReport::read_json(p).with_context(|| format!("reading {}", p.display()))).transpose()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainClfRun {
    pub corpus: Option<PathBuf>,
    pub metric: String,
    /// Its significant features drive the causal classifier when given.
    pub ate_report: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    /// Metric and topic classifiers; their seeds derive from the run seed.
    pub bag: BagConfig,
    /// Causal feature classifier; its seed derives from the run seed.
    pub causal: FeatureClassifierConfig,
    pub topic: bool,
    pub seed: u64,
}

impl Default for TrainClfRun {
    fn default() -> Self {
        TrainClfRun {
            corpus: None,
            metric: "participation".into(),
            ate_report: None,
            lexicon: None,
            bag: BagConfig::default(),
            causal: FeatureClassifierConfig::default(),
            topic: true,
            seed: 0,
        }
    }
}

/// Train the metric, topic and causal-feature classifiers used as feedback.
#[derive(Debug, Args)]
pub struct TrainClfArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    ate_report: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

impl TrainClfArgs {
    pub fn run(self, config: Option<&Path>) -> Result<()> {
        let mut o = Overrides::default();
        o.set("corpus", self.corpus)?.set("metric", self.metric)?.set("ate_report", self.ate_report)?.set("seed", self.seed)?;
        let mut cfg: TrainClfRun = resolve("train-clf", config, o)?;
        cfg.bag.seed = derive_seed(cfg.seed, 1);
        cfg.causal.seed = derive_seed(cfg.seed, 2);
        if let Some(report) = read_ate(&cfg.ate_report)? {
            let significant = report.significant_features();
            if significant.is_empty() {
                log::warn("no_significant_features", json!({ "fallback": cfg.causal.features }));
            } else {
                cfg.causal.features = significant;
            }
        }
        write_snapshot(&self.out, &cfg)?;
        let docs = load_corpus(required(&cfg.corpus, "corpus")?)?;
        let ys = labels(&docs, &cfg.metric)?;

        let data: Vec<(String, usize)> = docs.iter().zip(&ys).map(|(d, y)| (d.text.clone(), y.index())).collect();
        let (metric, metric_report) = train_bag_classifier(&data, class_names(), &cfg.bag)?;
        metric.save(&self.out.join(METRIC_CLASSIFIER))?;

        let lex = lexicon(&cfg.lexicon)?;
        let rows: Vec<_> = docs.iter().map(|d| extract_features(d, &lex)).collect();
        let idx: Vec<usize> = ys.iter().map(|y| y.index()).collect();
        let (causal, causal_report) = train_feature_classifier(&rows, &idx, class_names(), &cfg.causal)?;
        causal.save(&self.out.join(CAUSAL_CLASSIFIER))?;

        let topics = topic_count(&docs);
        let topic_report = if cfg.topic && topics > 1 {
            let data: Vec<(String, usize)> = docs.iter().map(|d| (d.text.clone(), d.topic.unwrap_or(0))).collect();
            let names = (0..topics).map(|t| format!("topic{t}")).collect();
            let bag = BagConfig { seed: derive_seed(cfg.seed, 3), ..cfg.bag.clone() };
            let (topic, report) = train_bag_classifier(&data, names, &bag)?;
            topic.save(&self.out.join(TOPIC_CLASSIFIER))?;
            Some(report)
        } else {
            None
        };
        let summary = json!({
            "metric": metric_report,
            "causal": causal_report,
            "causal_features": cfg.causal.features,
            "topic": topic_report,
        });
        write_json(&self.out.join("classifiers.json"), &summary)?;
        log::info("train_clf", summary);
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainGenRun {
    pub corpus: Option<PathBuf>,
    pub metric: String,
    /// Directory written by `train-clf`; required for nonzero feedback weights.
    pub classifiers: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub vocab_size: usize,
    /// Architecture; its seed is the run seed.
    pub model: TransformerConfig,
    /// Optimization; its seed derives from the run seed.
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for TrainGenRun {
    fn default() -> Self {
        TrainGenRun {
            corpus: None,
            metric: "participation".into(),
            classifiers: None,
            lexicon: None,
            vocab_size: 2048,
            model: TransformerConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

fn load_optional<T>(dir: Option<&Path>, name: &str, load: impl Fn(&Path) -> camgen::Result<T>) -> Result<Option<T>> {
    match dir.map(|d| d.join(name)) {
        Some(path) if path.exists() => Ok(Some(load(&path).with_context(|| format!("loading {}", path.display()))?)),
        _ => Ok(None),
    }
}

/// Train the control-injected transformer with classifier feedback.
#[derive(Debug, Args)]
pub struct TrainGenArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    classifiers: Option<PathBuf>,
    #[arg(long)]
    lambda_g: Option<f64>,
    #[arg(long)]
    lambda_metric: Option<f64>,
    #[arg(long)]
    lambda_topic: Option<f64>,
    #[arg(long)]
    lambda_causal: Option<f64>,
    /// Attention injection: additive, replace or off.
    #[arg(long)]
    mode: Option<AttentionMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

impl TrainGenArgs {
    pub fn run(self, config: Option<&Path>) -> Result<()> {
        let mut o = Overrides::default();
        o.set("corpus", self.corpus)?.set("metric", self.metric)?.set("classifiers", self.classifiers)?;
        o.set("train.weights.lm", self.lambda_g)?.set("train.weights.metric", self.lambda_metric)?;
        o.set("train.weights.topic", self.lambda_topic)?.set("train.weights.causal", self.lambda_causal)?;
        o.set("model.attention", self.mode)?.set("train.epochs", self.epochs)?.set("seed", self.seed)?;
        let mut cfg: TrainGenRun = resolve("train-gen", config, o)?;
        cfg.model.seed = cfg.seed;
        cfg.train.seed = derive_seed(cfg.seed, 1);
        let docs = load_corpus(required(&cfg.corpus, "corpus")?)?;
        let lex = lexicon(&cfg.lexicon)?;
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let vocab = Vocab::build(&texts, topic_count(&docs), cfg.vocab_size)?;
        cfg.model.vocab_size = vocab.len();
        write_snapshot(&self.out, &cfg)?;

        let examples = docs
            .iter()
            .map(|d| Example::from_document(d, &cfg.metric, &vocab, &lex, cfg.model.max_len))
            .collect::<camgen::Result<Vec<_>>>()?;
        let dir = cfg.classifiers.as_deref();
        let metric = load_optional(dir, METRIC_CLASSIFIER, BagClassifier::load)?;
        let topic = load_optional(dir, TOPIC_CLASSIFIER, BagClassifier::load)?;
        let causal = load_optional(dir, CAUSAL_CLASSIFIER, FeatureClassifier::load)?;
        let feedback = Feedback::new(&vocab, metric.as_ref(), topic.as_ref(), causal.as_ref(), &lex);

        let mut model = Transformer::new(cfg.model.clone(), vocab)?;
        let log_entries = train_transformer(&mut model, &examples, &feedback, &cfg.train, &lex)?;
        for (epoch, bundle) in log_entries.iter().enumerate() {
            log::info("epoch", json!({ "epoch": epoch, "losses": bundle }));
        }
        model.save(&self.out.join("model.ckpt"))?;
        write_json(&self.out.join("losses.json"), &log_entries)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCvaeRun {
    pub corpus: Option<PathBuf>,
    pub metric: String,
    /// Significant features become binarized treatments at the report's thresholds.
    pub ate_report: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub vocab_size: usize,
    pub model: CvaeConfig,
    pub train: CvaeTrainConfig,
    pub seed: u64,
}

impl Default for TrainCvaeRun {
    fn default() -> Self {
        TrainCvaeRun {
            corpus: None,
            metric: "participation".into(),
            ate_report: None,
            lexicon: None,
            vocab_size: 2048,
            model: CvaeConfig::default(),
            train: CvaeTrainConfig::default(),
            seed: 0,
        }
    }
}

fn treatments(report: Option<&AteReport>) -> Vec<TreatmentSpec> {
    report
        .map(|r| {
            r.rows
                .iter()
                .filter(|row| row.significant)
                .map(|row| TreatmentSpec { feature: row.feature, threshold: row.threshold })
                .collect()
        })
        .unwrap_or_default()
}

/// Train the conditional VAE, optionally with the causal bound.
#[derive(Debug, Args)]
pub struct TrainCvaeArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    ate_report: Option<PathBuf>,
    /// causal or noncausal.
    #[arg(long)]
    variant: Option<CvaeVariant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

impl TrainCvaeArgs {
    pub fn run(self, config: Option<&Path>) -> Result<()> {
        let mut o = Overrides::default();
        o.set("corpus", self.corpus)?.set("metric", self.metric)?.set("ate_report", self.ate_report)?;
        o.set("train.variant", self.variant)?.set("train.epochs", self.epochs)?.set("seed", self.seed)?;
        let mut cfg: TrainCvaeRun = resolve("train-cvae", config, o)?;
        cfg.model.seed = cfg.seed;
        cfg.train.seed = derive_seed(cfg.seed, 1);
        write_snapshot(&self.out, &cfg)?;
        let report = read_ate(&cfg.ate_report)?;
        let specs = treatments(report.as_ref());
        if cfg.train.variant == CvaeVariant::Causal && specs.is_empty() {
            bail!("the causal variant needs an ATE report with at least one significant feature");
        }
        let docs = load_corpus(required(&cfg.corpus, "corpus")?)?;
        let lex = lexicon(&cfg.lexicon)?;
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let vocab = Vocab::build(&texts, 1, cfg.vocab_size)?;
        let mut pairs = Vec::new();
        for doc in &docs {
            pairs.extend(pairs_from_document(doc, &cfg.metric, &vocab, &lex, &specs, &cfg.model)?);
        }
        let features: Vec<Feature> = specs.iter().map(|s| s.feature).collect();
        log::info("cvae_data", json!({ "pairs": pairs.len(), "treatments": features }));
        let mut model = Cvae::new(cfg.model.clone(), vocab, specs)?;
        let epochs = train_cvae(&mut model, &pairs, &cfg.train)?;
        for e in &epochs {
            log::info("epoch", serde_json::to_value(e)?);
        }
        model.save(&self.out.join("cvae.ckpt"))?;
        write_json(&self.out.join("log.json"), &epochs)
    }
}
