//! Corpus creation and analysis: synth, ingest, features, ate.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use camgen::causal::{ate_report_for_corpus, AteConfig};
use camgen::corpus::synth::{synthesize_control_corpus, synthesize_corpus, synthesize_marker_corpus, SynthConfig};
use camgen::corpus::{
    assign_buckets, featurize, filter_corpus, lda_topics, load_jsonl, save_jsonl, split, tfidf_keywords, Document,
    FilterConfig, LdaConfig,
};
use camgen::features::{tokenize, write_features_csv, Feature, PosLexicon};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{resolve, write_snapshot, Overrides};
use crate::log;

pub fn parse_list<T: std::str::FromStr>(raw: &str) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| Ok(s.parse()?)).collect()
}

pub fn required<'a>(value: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    value.as_deref().with_context(|| format!("missing required setting `{name}` (flag or config key)"))
}

pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let docs = load_jsonl(path)?;
    if docs.is_empty() {
        bail!("corpus {} is empty", path.display());
    }
    Ok(docs)
}

fn write_splits(out: &Path, docs: &[Document], ratios: [f64; 3], seed: u64) -> Result<()> {
    save_jsonl(&out.join("corpus.jsonl"), docs)?;
    let (train, dev, test) = split(docs, ratios, seed)?;
    for (name, part) in [("train", &train), ("dev", &dev), ("test", &test)] {
        save_jsonl(&out.join(format!("{name}.jsonl")), part)?;
    }
    log::info("split", json!({ "train": train.len(), "dev": dev.len(), "test": test.len() }));
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Bucket decided by verb totals, with a spurious style correlate.
    Control,
    /// Planted effects with a categorical confounder and a ground-truth sidecar.
    Planted,
    /// Bucket-specific marker tokens.
    Marker,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthRun {
    pub kind: SynthKind,
    pub samples: usize,
    pub metric: String,
    pub split: [f64; 3],
    /// Settings of the planted generator; `samples`, `seed` and `metric` above take precedence.
    pub planted: SynthConfig,
    pub seed: u64,
}

impl Default for SynthRun {
    fn default() -> Self {
        SynthRun {
            kind: SynthKind::Control,
            samples: 200,
            metric: "participation".into(),
            split: [0.8, 0.1, 0.1],
            planted: SynthConfig::default(),
            seed: 0,
        }
    }
}

/// Generate a synthetic corpus and its train/dev/test split.
#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    kind: Option<SynthKind>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl SynthArgs {
    pub fn run(self, config: Option<&Path>) -> Result<()> {
        let mut o = Overrides::default();
        o.set("kind", self.kind)?.set("samples", self.samples)?.set("metric", self.metric)?.set("seed", self.seed)?;
        let cfg: SynthRun = resolve("synth", config, o)?;
        write_snapshot(&self.out, &cfg)?;
        let docs = match cfg.kind {
            SynthKind::Control => synthesize_control_corpus(cfg.samples, &cfg.metric, cfg.seed),
            SynthKind::Marker => synthesize_marker_corpus(cfg.samples, &cfg.metric, cfg.seed),
            SynthKind::Planted => {
                let planted =
                    SynthConfig { samples: cfg.samples, seed: cfg.seed, metric_name: cfg.metric.clone(), ..cfg.planted.clone() };
                let (docs, truth) = synthesize_corpus(&planted)?;
                let path = self.out.join("ground_truth.json");
                fs::write(&path, serde_json::to_string_pretty(&truth)? + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
                docs
            }
        };
        log::info("synth", json!({ "kind": cfg.kind, "documents": docs.len() }));
        write_splits(&self.out, &docs, cfg.split, cfg.seed)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestRun {
    pub input: Option<PathBuf>,
    pub metric: String,
    /// `(t_low, t_high)`; without them the metric's terciles are used.
    pub thresholds: Option<(u64, u64)>,
    pub filter: FilterConfig,
    /// Keywords per document; 0 keeps existing keywords.
    pub keywords: usize,
    /// Topic model; `topics = 0` keeps existing topics.
    pub lda: LdaConfig,
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for IngestRun {
    fn default() -> Self {
        IngestRun {
            input: None,
            metric: "participation".into(),
            thresholds: None,
            filter: FilterConfig::default(),
            keywords: 10,
            lda: LdaConfig::default(),
            split: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

/// Values at the one- and two-thirds order statistics.
fn tercile_thresholds(docs: &[Document], metric: &str) -> Result<(u64, u64)> {
    let mut values: Vec<u64> = docs.iter().filter_map(|d| d.metrics.get(metric).copied()).collect();
    if values.is_empty() {
        bail!("no document carries metric {metric:?}");
    }
    values.sort_unstable();
    let (lo, hi) = (values[values.len() / 3], values[2 * values.len() / 3]);
    if lo >= hi {
        bail!("metric {metric:?} terciles coincide at {lo}; pass explicit thresholds");
    }
    Ok((lo, hi))
}

/// Filter, bucket, annotate keywords and topics, and split a JSONL corpus.
#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    t_low: Option<u64>,
    #[arg(long, requires = "t_low")]
    t_high: Option<u64>,
    #[arg(long)]
    topics: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

impl IngestArgs {
    pub fn run(self, config: Option<&Path>) -> Result<()> {
        let mut o = Overrides::default();
        o.set("input", self.input)?.set("metric", self.metric)?.set("lda.topics", self.topics)?.set("seed", self.seed)?;
        o.set("thresholds", self.t_low.zip(self.t_high))?;
        let cfg: IngestRun = resolve("ingest", config, o)?;
        write_snapshot(&self.out, &cfg)?;
        let raw = load_corpus(required(&cfg.input, "input")?)?;
        let before = raw.len();
        let mut docs = filter_corpus(raw, &cfg.filter);
        if docs.is_empty() {
            bail!("the filter removed all {before} documents");
        }
        let (t_low, t_high) = match cfg.thresholds {
            Some(t) => t,
            None => tercile_thresholds(&docs, &cfg.metric)?,
        };
        let bucketed = assign_buckets(&mut docs, &cfg.metric, t_low, t_high)?;
        if cfg.keywords > 0 {
            let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
            let keywords = tfidf_keywords(&texts, cfg.keywords)?;
            for (doc, kw) in docs.iter_mut().zip(keywords) {
                doc.keywords = kw;
            }
        }
        if cfg.lda.topics > 0 {
            let tokens: Vec<Vec<String>> = docs.iter().map(|d| tokenize(&d.text)).collect();
            for (doc, topic) in docs.iter_mut().zip(lda_topics(&tokens, &cfg.lda)?) {
                doc.topic = Some(topic);
            }
        }
        log::info(
            "ingest",
            json!({ "read": before, "kept": docs.len(), "bucketed": bucketed, "t_low": t_low, "t_high": t_high }),
        );
        write_splits(&self.out, &docs, cfg.split, cfg.seed)
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturesRun {
    pub corpus: Option<PathBuf>,
    /// Plain-text lexicon replacing the bundled one.
    pub lexicon: Option<PathBuf>,
}

pub fn lexicon(path: &Option<PathBuf>) -> Result<PosLexicon> {
    Ok(match path {
        Some(p) => PosLexicon::load(p)?,
        None => PosLexicon::bundled().clone(),
    })
}

/// Export per-document feature vectors as CSV.
#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

impl FeaturesArgs {
    pub fn run(self, config: Option<&Path>) -> Result<()> {
        let mut o = Overrides::default();
        o.set("corpus", self.corpus)?.set("lexicon", self.lexicon)?;
        let cfg: FeaturesRun = resolve("features", config, o)?;
        write_snapshot(&self.out, &cfg)?;
        let docs = load_corpus(required(&cfg.corpus, "corpus")?)?;
        let features = featurize(&docs, &lexicon(&cfg.lexicon)?);
        write_features_csv(&self.out.join("features.csv"), docs.iter().map(|d| d.id.as_str()).zip(&features))?;
        log::info("features", json!({ "documents": docs.len() }));
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AteRun {
    pub corpus: Option<PathBuf>,
    pub metric: String,
    pub features: Vec<Feature>,
    pub lexicon: Option<PathBuf>,
    /// Estimator settings; its seed is replaced by the run seed.
    pub estimator: AteConfig,
    pub seed: u64,
}

impl Default for AteRun {
    fn default() -> Self {
        AteRun {
            corpus: None,
            metric: "participation".into(),
            features: Feature::TEXTUAL.to_vec(),
            lexicon: None,
            estimator: AteConfig::default(),
            seed: 0,
        }
    }
}

/// Estimate doubly-robust treatment effects of text features on a metric.
#[derive(Debug, Args)]
pub struct AteArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    metric: Option<String>,
    /// Comma-separated feature names, e.g. word_count,verb_count.
    #[arg(long)]
    features: Option<String>,
    /// Significance threshold on |ATE|.
    #[arg(long)]
    tau: Option<f64>,
    /// Divides raw metric counts before estimation.
    #[arg(long)]
    outcome_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

impl AteArgs {
    pub fn run(self, config: Option<&Path>) -> Result<()> {
        let features = self.features.as_deref().map(parse_list::<Feature>).transpose()?;
        let mut o = Overrides::default();
        o.set("corpus", self.corpus)?.set("metric", self.metric)?.set("features", features)?.set("seed", self.seed)?;
        o.set("estimator.tau_sig", self.tau)?.set("estimator.outcome_scale", self.outcome_scale)?;
        let mut cfg: AteRun = resolve("ate", config, o)?;
        cfg.estimator.seed = cfg.seed;
        write_snapshot(&self.out, &cfg)?;
        let docs = load_corpus(required(&cfg.corpus, "corpus")?)?;
        let report = ate_report_for_corpus(&docs, &cfg.metric, &cfg.features, &lexicon(&cfg.lexicon)?, &cfg.estimator)?;
        report.write_json(&self.out.join("ate.json"))?;
        report.write_csv(&self.out.join("ate.csv"))?;
        for row in &report.rows {
            log::info("ate", json!({ "feature": row.feature, "ate": row.ate, "significant": row.significant }));
        }
        Ok(())
    }
}
