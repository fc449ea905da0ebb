//! Hashed bag-of-n-grams classifier with a linear softmax head.
//!
//! The embedding table is conceptually `buckets × dim` with a deterministic
//! per-bucket initialization; only rows touched by training are stored.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{read_bundle, write_bundle};
use crate::autodiff::init;
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::tokenize;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const NGRAM_SEPARATOR: u8 = 0x1f;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BagConfig {
    pub buckets: u32,
    pub dim: usize,
    /// N-gram orders to hash, each 1 or 2.
    pub orders: Vec<usize>,
    pub hash_seed: u64,
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Fraction of examples held out for the accuracy report.
    pub holdout: f64,
}

impl Default for BagConfig {
    fn default() -> Self {
        BagConfig {
            buckets: 1 << 18,
            dim: 64,
            orders: vec![1, 2],
            hash_seed: 0,
            seed: 0,
            epochs: 10,
            learning_rate: 0.01,
            holdout: 0.1,
        }
    }
}

/// Everything except learned values; stored as the checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagHeader {
    pub kind: String,
    pub buckets: u32,
    pub dim: usize,
    pub orders: Vec<usize>,
    pub hash_seed: u64,
    pub init_seed: u64,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub final_loss: f64,
}

/// Adam moments for one parameter block.
#[derive(Clone, Debug, Default)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Moments { first: vec![0.0; n], second: vec![0.0; n] }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_update(values: &mut [f64], grads: &[f64], m: &mut Moments, lr: f64, step: i32) {
    let c1 = 1.0 - BETA1.powi(step);
    let c2 = 1.0 - BETA2.powi(step);
    for i in 0..values.len() {
        m.first[i] = BETA1 * m.first[i] + (1.0 - BETA1) * grads[i];
        m.second[i] = BETA2 * m.second[i] + (1.0 - BETA2) * grads[i] * grads[i];
        values[i] -= lr * (m.first[i] / c1) / ((m.second[i] / c2).sqrt() + ADAM_EPS);
    }
}

#[derive(Clone, Debug)]
pub struct BagClassifier {
    header: BagHeader,
    /// Bucket id → index into `rows`; rows are stored in first-touch order.
    row_of: HashMap<u32, usize>,
    buckets_in_order: Vec<u32>,
    rows: Vec<f64>,
    /// `[dim, classes]`, zero at initialization.
    head_weight: Tensor<f64>,
    head_bias: Tensor<f64>,
}

impl BagClassifier {
    pub fn new(classes: Vec<String>, cfg: &BagConfig) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Config("a classifier needs at least two classes".into()));
        }
        if cfg.buckets == 0 || cfg.dim == 0 {
            return Err(Error::Config("buckets and dim must be positive".into()));
        }
        if cfg.orders.is_empty() || cfg.orders.iter().any(|o| !(1..=2).contains(o)) {
            return Err(Error::Config(format!("n-gram orders {:?} must be a non-empty subset of {{1, 2}}", cfg.orders)));
        }
        let c = classes.len();
        Ok(BagClassifier {
            header: BagHeader {
                kind: "bag".into(),
                buckets: cfg.buckets,
                dim: cfg.dim,
                orders: cfg.orders.clone(),
                hash_seed: cfg.hash_seed,
                init_seed: cfg.seed,
                classes,
            },
            row_of: HashMap::new(),
            buckets_in_order: Vec::new(),
            rows: Vec::new(),
            head_weight: Tensor::zeros(&[cfg.dim, c]),
            head_bias: Tensor::zeros(&[1, c]),
        })
    }

    pub fn header(&self) -> &BagHeader {
        &self.header
    }

    pub fn classes(&self) -> &[String] {
        &self.header.classes
    }

    pub fn num_classes(&self) -> usize {
        self.header.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    fn bucket(&self, parts: &[&str]) -> u32 {
        let mut bytes = self.header.hash_seed.to_le_bytes().to_vec();
        bytes.push(parts.len() as u8);
        for (i, p) in parts.iter().enumerate() {
            if i > 0 {
                bytes.push(NGRAM_SEPARATOR);
            }
            bytes.extend_from_slice(p.as_bytes());
        }
        (fnv1a(&bytes) % u64::from(self.header.buckets)) as u32
    }

    /// Bucket ids of the configured n-grams, unigrams first, in text order.
    pub fn ngram_ids(&self, tokens: &[String], orders: &[usize]) -> Vec<u32> {
        let mut ids = Vec::new();
        if orders.contains(&1) {
            ids.extend(tokens.iter().map(|t| self.bucket(&[t])));
        }
        if orders.contains(&2) {
            ids.extend(tokens.windows(2).map(|w| self.bucket(&[&w[0], &w[1]])));
        }
        ids
    }

    /// Initial value of a bucket's row: `U(−1/dim, 1/dim)` from a per-bucket stream.
    fn initial_row(&self, bucket: u32) -> Vec<f64> {
        let mut rng = init::rng(init::derive_seed(self.header.init_seed, u64::from(bucket)));
        let a = 1.0 / self.header.dim as f64;
        (0..self.header.dim).map(|_| rng.gen_range(-a..a)).collect()
    }

    /// Current embedding of a bucket (stored or initial).
    pub fn embedding(&self, bucket: u32) -> Vec<f64> {
        match self.row_of.get(&bucket) {
            Some(r) => self.rows[r * self.header.dim..(r + 1) * self.header.dim].to_vec(),
            None => self.initial_row(bucket),
        }
    }

    fn materialize(&mut self, bucket: u32) -> usize {
        if let Some(r) = self.row_of.get(&bucket) {
            return *r;
        }
        let row = self.initial_row(bucket);
        let r = self.buckets_in_order.len();
        self.rows.extend(row);
        self.buckets_in_order.push(bucket);
        self.row_of.insert(bucket, r);
        r
    }

    /// Summed embedding rows in id order, divided by the count.
    fn hidden(&self, ids: &[u32]) -> Vec<f64> {
        let mut h = vec![0.0; self.header.dim];
        for id in ids {
            for (a, b) in h.iter_mut().zip(self.embedding(*id)) {
                *a += b;
            }
        }
        let count = ids.len() as f64;
        h.iter_mut().for_each(|x| *x /= count);
        h
    }

    fn probabilities_from_hidden(&self, hidden: &[f64]) -> Vec<f64> {
        let h = Tensor::row(hidden);
        let mut logits = h.matmul(&self.head_weight).expect("dim matches");
        logits.add_assign(&self.head_bias);
        crate::scalar::softmax(logits.data())
    }

    fn predict_ids(&self, ids: &[u32]) -> Vec<f64> {
        if ids.is_empty() {
            return vec![1.0 / self.num_classes() as f64; self.num_classes()];
        }
        self.probabilities_from_hidden(&self.hidden(ids))
    }

    /// Class probabilities over the configured n-gram orders; uniform for text without tokens.
    pub fn predict(&self, text: &str) -> Vec<f64> {
        let ids = self.ngram_ids(&tokenize(text), &self.header.orders);
        self.predict_ids(&ids)
    }

    /// Prediction from the unigram channel alone (the soft path's hard counterpart).
    pub fn predict_unigram(&self, text: &str) -> Vec<f64> {
        let ids = self.ngram_ids(&tokenize(text), &[1]);
        self.predict_ids(&ids)
    }

    pub fn argmax(&self, text: &str) -> usize {
        argmax(&self.predict(text))
    }

    /// Cross-entropy of one example and gradients with respect to the head and
    /// every embedding row involved (one entry per occurrence).
    fn example_gradients(&self, ids: &[u32], label: usize) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
        let (d, c) = (self.header.dim, self.num_classes());
        let hidden = self.hidden(ids);
        let probs = self.probabilities_from_hidden(&hidden);
        let loss = -probs[label].ln();
        let mut dz = probs;
        dz[label] -= 1.0;
        let mut dw = vec![0.0; d * c];
        for i in 0..d {
            for j in 0..c {
                dw[i * c + j] = hidden[i] * dz[j];
            }
        }
        let w = self.head_weight.data();
        let dh: Vec<f64> = (0..d).map(|i| (0..c).map(|j| w[i * c + j] * dz[j]).sum::<f64>() / ids.len() as f64).collect();
        (loss, dw, dz, dh)
    }

    /// Mean cross-entropy over examples (used by finite-difference checks).
    pub fn loss(&self, examples: &[(String, usize)]) -> f64 {
        examples
            .iter()
            .map(|(text, y)| -self.predict(text)[*y].ln())
            .sum::<f64>()
            / examples.len().max(1) as f64
    }

    /// Soft-path inputs for a fixed vocabulary: word entries map to their
    /// unigram rows, every other entry to a zero row and zero word weight.
    pub fn soft_vocabulary<'a>(&self, entries: impl IntoIterator<Item = (&'a str, bool)>) -> SoftVocabulary {
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        for (token, is_word) in entries {
            if is_word {
                rows.extend(self.embedding(self.bucket(&[token])));
                weights.push(1.0);
            } else {
                rows.extend(std::iter::repeat(0.0).take(self.header.dim));
                weights.push(0.0);
            }
        }
        let v = weights.len();
        SoftVocabulary {
            embeddings: Tensor::matrix(v, self.header.dim, rows).expect("rows are full"),
            word_weights: Tensor::matrix(v, 1, weights).expect("one weight per entry"),
        }
    }

    /// Probabilities `[1, classes]` from per-position token distributions:
    /// expected unigram embedding sum divided by the expected word count.
    pub fn predict_soft(&self, g: &mut Graph<f64>, token_distributions: Var, vocab: &SoftVocabulary) -> Result<Var> {
        let probs = g.value(token_distributions);
        if probs.cols() != vocab.embeddings.rows() {
            return Err(Error::shape("predict_soft", &[probs.shape(), vocab.embeddings.shape()]));
        }
        for i in 0..probs.rows() {
            let s: f64 = probs.row_slice(i).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!("distribution row {i} sums to {s}, not 1")));
            }
        }
        let table = g.constant(vocab.embeddings.clone());
        let weights = g.constant(vocab.word_weights.clone());
        let per_position = g.matmul(token_distributions, table)?;
        let summed = g.sum_rows(per_position)?;
        let word_mass = g.matmul(token_distributions, weights)?;
        let count = g.sum(word_mass);
        let hidden = g.div_scalar(summed, count)?;
        let w = g.constant(self.head_weight.clone());
        let b = g.constant(self.head_bias.clone());
        let logits = g.affine(hidden, w, b)?;
        g.softmax(logits)
    }

    fn to_store(&self) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let r = self.buckets_in_order.len();
        store.add(
            "embedding.buckets",
            Tensor::new(vec![r], self.buckets_in_order.iter().map(|b| f64::from(*b)).collect()).expect("sized"),
        );
        store.add("embedding.rows", Tensor::new(vec![r, self.header.dim], self.rows.clone()).expect("sized"));
        store.add("head.weight", self.head_weight.clone());
        store.add("head.bias", self.head_bias.clone());
        store
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bundle(path, &self.header, &self.to_store())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, store): (BagHeader, ParamStore<f64>) = read_bundle(path)?;
        if header.kind != "bag" {
            return Err(Error::Checkpoint(format!("expected a bag classifier, found {:?}", header.kind)));
        }
        let get = |name: &str| {
            store
                .find(name)
                .map(|id| store.value(id).clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let buckets: Vec<u32> = get("embedding.buckets")?.data().iter().map(|b| *b as u32).collect();
        let rows = get("embedding.rows")?.into_data();
        if rows.len() != buckets.len() * header.dim {
            return Err(Error::Checkpoint("embedding rows do not match bucket list".into()));
        }
        let head_weight = get("head.weight")?;
        let head_bias = get("head.bias")?;
        if head_weight.shape() != [header.dim, header.classes.len()] || head_bias.shape() != [1, header.classes.len()] {
            return Err(Error::Checkpoint("head shape does not match header".into()));
        }
        Ok(BagClassifier {
            row_of: buckets.iter().enumerate().map(|(i, b)| (*b, i)).collect(),
            buckets_in_order: buckets,
            rows,
            head_weight,
            head_bias,
            header,
        })
    }

    /// Parameters in a fixed order, for bitwise comparisons.
    pub fn parameter_bits(&self) -> Vec<u64> {
        self.rows
            .iter()
            .chain(self.head_weight.data())
            .chain(self.head_bias.data())
            .map(|x| x.to_bits())
            .chain(self.buckets_in_order.iter().map(|b| u64::from(*b)))
            .collect()
    }
}

/// Constant inputs of the soft path for one vocabulary.
#[derive(Clone, Debug)]
pub struct SoftVocabulary {
    /// `[vocab, dim]`
    pub embeddings: Tensor<f64>,
    /// `[vocab, 1]`: 1 for word entries, 0 otherwise.
    pub word_weights: Tensor<f64>,
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    xs.iter().enumerate().fold(0, |best, (i, x)| if *x > xs[best] { i } else { best })
}

/// Trains with per-example Adam; embedding rows use lazy moments updated only when touched.
pub fn train_bag_classifier(
    examples: &[(String, usize)],
    classes: Vec<String>,
    cfg: &BagConfig,
) -> Result<(BagClassifier, TrainReport)> {
    let mut clf = BagClassifier::new(classes, cfg)?;
    let c = clf.num_classes();
    if let Some((_, y)) = examples.iter().find(|(_, y)| *y >= c) {
        return Err(Error::Invalid(format!("label {y} out of range for {c} classes")));
    }
    let present = (0..c).filter(|k| examples.iter().any(|(_, y)| y == k)).count();
    if present < 2 {
        return Err(Error::Invalid("training data covers fewer than two classes".into()));
    }

    let mut rng = init::rng(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let n_test = ((examples.len() as f64 * cfg.holdout).round() as usize).min(examples.len().saturating_sub(1));
    let (test, train) = order.split_at(n_test);
    let mut train = train.to_vec();

    let encoded: Vec<Vec<u32>> =
        examples.iter().map(|(text, _)| clf.ngram_ids(&tokenize(text), &clf.header.orders)).collect();
    let d = clf.dim();
    let mut head_m = Moments::zeros(d * c);
    let mut bias_m = Moments::zeros(c);
    let mut row_m: Vec<Moments> = Vec::new();
    let mut step = 0i32;
    let mut final_loss = f64::NAN;

    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for &i in &train {
            let ids = &encoded[i];
            if ids.is_empty() {
                continue;
            }
            step += 1;
            let (loss, dw, db, dh) = clf.example_gradients(ids, examples[i].1);
            total += loss;
            seen += 1;

            // accumulate per distinct row so repeated n-grams receive one update
            let mut row_grads: Vec<(usize, Vec<f64>)> = Vec::new();
            for id in ids {
                let r = clf.materialize(*id);
                if r == row_m.len() {
                    row_m.push(Moments::zeros(d));
                }
                match row_grads.iter_mut().find(|(rr, _)| *rr == r) {
                    Some((_, g)) => g.iter_mut().zip(&dh).for_each(|(a, b)| *a += b),
                    None => row_grads.push((r, dh.clone())),
                }
            }
            adam_update(clf.head_weight.data_mut(), &dw, &mut head_m, cfg.learning_rate, step);
            adam_update(clf.head_bias.data_mut(), &db, &mut bias_m, cfg.learning_rate, step);
            for (r, g) in row_grads {
                adam_update(&mut clf.rows[r * d..(r + 1) * d], &g, &mut row_m[r], cfg.learning_rate, step);
            }
        }
        final_loss = total / seen.max(1) as f64;
        if !final_loss.is_finite() && seen > 0 {
            return Err(Error::NonFinite { context: "bag classifier training".into(), detail: format!("loss {final_loss}") });
        }
    }

    let accuracy = |idx: &[usize]| {
        if idx.is_empty() {
            return f64::NAN;
        }
        idx.iter().filter(|i| argmax(&clf.predict_ids(&encoded[**i])) == examples[**i].1).count() as f64 / idx.len() as f64
    };
    let report = TrainReport { train_accuracy: accuracy(&train), heldout_accuracy: accuracy(test), final_loss };
    Ok((clf, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BagConfig {
        BagConfig { buckets: 1 << 10, dim: 8, epochs: 30, learning_rate: 0.05, ..Default::default() }
    }

    fn classes() -> Vec<String> {
        ["low", "medium", "high"].map(String::from).to_vec()
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn untrained_is_uniform_and_empty_text_is_uniform() {
        let clf = BagClassifier::new(classes(), &tiny()).unwrap();
        assert_eq!(clf.predict("any words at all"), vec![1.0 / 3.0; 3]);
        assert_eq!(clf.predict(""), vec![1.0 / 3.0; 3]);
        assert_eq!(clf.predict("?!"), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn head_and_row_gradients_match_finite_differences() {
        let examples: Vec<(String, usize)> =
            vec![("red fox jumps".into(), 0), ("blue fox sleeps".into(), 2), ("red red sky".into(), 1)];
        let (mut clf, _) = train_bag_classifier(&examples, classes(), &BagConfig { epochs: 2, ..tiny() }).unwrap();
        let (text, y) = &examples[2];
        let ids = clf.ngram_ids(&tokenize(text), &clf.header.orders.clone());
        let (_, dw, _, dh) = clf.example_gradients(&ids, *y);
        let single = vec![(text.clone(), *y)];
        let h = 1e-6;

        for k in [0, 5, 17] {
            let orig = clf.head_weight.data()[k];
            clf.head_weight.data_mut()[k] = orig + h;
            let up = clf.loss(&single);
            clf.head_weight.data_mut()[k] = orig - h;
            let down = clf.loss(&single);
            clf.head_weight.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            assert!((numeric - dw[k]).abs() <= 1e-6 * (1.0 + numeric.abs()), "head {k}: {numeric} vs {}", dw[k]);
        }

        // "red" occurs twice: its row gradient is twice dh
        let red = ids[0];
        let r = clf.materialize(red);
        let d = clf.dim();
        for j in 0..d {
            let orig = clf.rows[r * d + j];
            clf.rows[r * d + j] = orig + h;
            let up = clf.loss(&single);
            clf.rows[r * d + j] = orig - h;
            let down = clf.loss(&single);
            clf.rows[r * d + j] = orig;
            let numeric = (up - down) / (2.0 * h);
            assert!((numeric - 2.0 * dh[j]).abs() <= 1e-6 * (1.0 + numeric.abs()), "row {j}: {numeric} vs {}", 2.0 * dh[j]);
        }
    }

    #[test]
    fn bigram_channel_sees_order() {
        let examples: Vec<(String, usize)> =
            (0..40).map(|i| if i % 2 == 0 { ("dog bites man".into(), 0) } else { ("man bites dog".into(), 2) }).collect();
        let (clf, _) = train_bag_classifier(&examples, classes(), &tiny()).unwrap();
        assert_ne!(clf.predict("dog bites man"), clf.predict("man bites dog"));
        assert_eq!(clf.predict_unigram("dog bites man"), clf.predict_unigram("man bites dog"));
    }

    #[test]
    fn single_class_is_rejected() {
        let examples = vec![("a b".to_string(), 1), ("c d".to_string(), 1)];
        assert!(train_bag_classifier(&examples, classes(), &tiny()).is_err());
    }
}
