//! Corpus ingestion and preparation: JSON Lines IO, length/participation
//! filters, metric bucketing, TF-IDF keywords, LDA topics and seeded splits.

mod keywords;
mod lda;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::init;
use crate::error::{Error, Result};
use crate::features::{extract_features, tokenize, FeatureVector, PosLexicon};

pub use keywords::tfidf_keywords;
pub use lda::{lda_topics, LdaConfig};
pub use synth::{synthesize_corpus, GroundTruth, SynthConfig};

/// Engagement class of a document under one metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlClass {
    Low,
    Medium,
    High,
}

impl ControlClass {
    pub const ALL: [ControlClass; 3] = [ControlClass::Low, ControlClass::Medium, ControlClass::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ControlClass::Low => "low",
            ControlClass::Medium => "medium",
            ControlClass::High => "high",
        }
    }
}

impl fmt::Display for ControlClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControlClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown control class {s:?}")))
    }
}

/// A control class tied to the metric it was derived from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlLabel {
    pub class: ControlClass,
    pub metric_name: String,
}

/// One article or comment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub metadata: serde_json::Map<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keywords: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<usize>,
    /// Metric name → class. Written only by [`assign_buckets`].
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub buckets: BTreeMap<String, ControlClass>,
}

impl Document {
    pub fn label(&self, metric: &str) -> Option<ControlLabel> {
        self.buckets
            .get(metric)
            .map(|class| ControlLabel { class: *class, metric_name: metric.to_string() })
    }

    pub fn word_count(&self) -> usize {
        tokenize(&self.text).len()
    }
}

/// Reads one document per non-blank line. Errors cite the 1-based line number.
pub fn load_jsonl(path: &Path) -> Result<Vec<Document>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: origin.clone(), line: i + 1, message };
        let doc: Document = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(doc.id.clone()) {
            return Err(parse_err(format!("duplicate id {:?}", doc.id)));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn save_jsonl(path: &Path, docs: &[Document]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for doc in docs {
        serde_json::to_writer(&mut w, doc)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Feature vectors for every document, computed in parallel; order matches `docs`.
pub fn featurize(docs: &[Document], lexicon: &PosLexicon) -> Vec<FeatureVector> {
    docs.par_iter().map(|d| extract_features(d, lexicon)).collect()
}

/// Length and participation filter. Bounds are strict.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub min_words: usize,
    pub max_words: usize,
    pub min_participation: u64,
    pub participation_metric: String,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { min_words: 30, max_words: 5000, min_participation: 1, participation_metric: "participation".into() }
    }
}

/// Keeps documents with `min_words < words < max_words` and, when the participation
/// metric is present, `participation > min_participation`. Relative order is preserved.
pub fn filter_corpus(docs: Vec<Document>, cfg: &FilterConfig) -> Vec<Document> {
    docs.into_iter()
        .filter(|d| {
            let words = d.word_count();
            let participation_ok =
                d.metrics.get(&cfg.participation_metric).map_or(true, |p| *p > cfg.min_participation);
            cfg.min_words < words && words < cfg.max_words && participation_ok
        })
        .collect()
}

/// `low` iff `value ≤ t_low`, `high` iff `value > t_high`, otherwise `medium`.
pub fn bucketize(value: u64, t_low: u64, t_high: u64) -> Result<ControlClass> {
    if t_low >= t_high {
        return Err(Error::Config(format!("bucket thresholds must satisfy t_low < t_high, got {t_low} and {t_high}")));
    }
    Ok(if value <= t_low {
        ControlClass::Low
    } else if value > t_high {
        ControlClass::High
    } else {
        ControlClass::Medium
    })
}

/// Sets `buckets[metric]` on every document carrying that metric; returns how many were labelled.
pub fn assign_buckets(docs: &mut [Document], metric: &str, t_low: u64, t_high: u64) -> Result<usize> {
    let mut labelled = 0;
    for doc in docs.iter_mut() {
        if let Some(value) = doc.metrics.get(metric) {
            let class = bucketize(*value, t_low, t_high)?;
            doc.buckets.insert(metric.to_string(), class);
            labelled += 1;
        }
    }
    Ok(labelled)
}

/// Seeded shuffle followed by contiguous train/dev/test slices.
pub fn split<T: Clone>(items: &[T], ratios: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut init::rng(seed));
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_dev = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|i| items[*i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..n_train + n_dev]), pick(&order[n_train + n_dev..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, words: usize, participation: Option<u64>) -> Document {
        let mut d = Document { id: id.into(), text: vec!["word"; words].join(" "), ..Default::default() };
        if let Some(p) = participation {
            d.metrics.insert("participation".into(), p);
        }
        d
    }

    #[test]
    fn filter_bounds_are_strict() {
        let docs = vec![doc("a", 30, Some(2)), doc("b", 31, Some(2)), doc("c", 5000, Some(2)), doc("d", 31, Some(1)), doc("e", 40, None)];
        let kept: Vec<_> = filter_corpus(docs, &FilterConfig::default()).into_iter().map(|d| d.id).collect();
        assert_eq!(kept, ["b", "e"]);
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(bucketize(2, 2, 21).unwrap(), ControlClass::Low);
        assert_eq!(bucketize(22, 2, 21).unwrap(), ControlClass::High);
        assert_eq!(bucketize(21, 2, 21).unwrap(), ControlClass::Medium);
        assert_eq!(bucketize(10, 2, 21).unwrap(), ControlClass::Medium);
        assert!(bucketize(5, 21, 21).is_err());
    }

    #[test]
    fn split_sizes_and_partition() {
        let items: Vec<usize> = (0..10).collect();
        let (a, b, c) = split(&items, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        let mut all: Vec<_> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split(&items, [0.8, 0.1, 0.1], 3).unwrap(), (a, b, c));
        assert!(split(&items, [0.8, 0.1, 0.2], 3).is_err());
    }

    #[test]
    fn jsonl_errors_cite_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "{\"id\":\"a\"}\n").unwrap();
        let err = load_jsonl(&path).unwrap_err().to_string();
        assert!(err.contains(":1:") && err.contains("text"), "{err}");

        std::fs::write(&path, "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n").unwrap();
        let err = load_jsonl(&path).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("duplicate"), "{err}");

        std::fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path).unwrap().is_empty());
    }
}
