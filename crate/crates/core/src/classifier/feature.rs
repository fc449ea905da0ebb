//! Small MLP over standardized text features.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{read_bundle, restore_into, write_bundle};
use crate::autodiff::init;
use crate::autodiff::layers::{Activation, Mlp};
use crate::autodiff::{Adam, Graph, ParamStore, Tensor, Var};
use crate::classifier::bag::{argmax, TrainReport};
use crate::error::{Error, Result};
use crate::features::{Feature, FeatureVector, SoftFeatures};
use crate::stats::Standardizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureClassifierConfig {
    pub features: Vec<Feature>,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout: f64,
    pub seed: u64,
}

impl Default for FeatureClassifierConfig {
    fn default() -> Self {
        FeatureClassifierConfig {
            features: Feature::TEXTUAL.to_vec(),
            hidden: vec![32],
            epochs: 40,
            batch_size: 16,
            learning_rate: 1e-2,
            holdout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FeatureHeader {
    kind: String,
    features: Vec<Feature>,
    hidden: Vec<usize>,
    classes: Vec<String>,
    inputs: Standardizer,
}

#[derive(Clone, Debug)]
pub struct FeatureClassifier {
    header: FeatureHeader,
    store: ParamStore<f64>,
    mlp: Mlp,
}

impl FeatureClassifier {
    fn build(header: FeatureHeader, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = init::rng(seed);
        let mlp = Mlp::new(
            &mut store,
            &mut rng,
            "clf",
            header.features.len(),
            &header.hidden,
            header.classes.len(),
            Activation::Relu,
        );
        FeatureClassifier { header, store, mlp }
    }

    pub fn features(&self) -> &[Feature] {
        &self.header.features
    }

    pub fn classes(&self) -> &[String] {
        &self.header.classes
    }

    fn standardize(&self, g: &mut Graph<f64>, x: Var) -> Result<Var> {
        let neg_mean: Vec<f64> = self.header.inputs.mean.iter().map(|m| -m).collect();
        let inv_scale: Vec<f64> = self.header.inputs.scale.iter().map(|s| 1.0 / s).collect();
        let shift = g.constant(Tensor::row(&neg_mean));
        let scale = g.constant(Tensor::row(&inv_scale));
        let centred = g.add_row(x, shift)?;
        g.mul_row(centred, scale)
    }

    /// Standardize, MLP, softmax; rows of `x` are selected feature values.
    fn head(&self, g: &mut Graph<f64>, x: Var) -> Result<Var> {
        let z = self.standardize(g, x)?;
        let logits = self.mlp.forward_frozen(g, &self.store, z)?;
        g.softmax(logits)
    }

    pub fn predict(&self, fv: &FeatureVector) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&fv.select(&self.header.features)));
        let probs = self.head(&mut g, x)?;
        Ok(g.value(probs).data().to_vec())
    }

    /// `[1, classes]` probabilities from expected feature counts. Metadata
    /// features have no expected counterpart and make this an error.
    pub fn predict_soft(&self, g: &mut Graph<f64>, soft: &SoftFeatures) -> Result<Var> {
        let mut cols = Vec::with_capacity(self.header.features.len());
        for f in &self.header.features {
            let col = SoftFeatures::column(*f)
                .ok_or_else(|| Error::Invalid(format!("feature {f} is not computable from token distributions")))?;
            cols.push(g.slice_cols(soft.values, col, 1)?);
        }
        let x = g.concat_cols(&cols)?;
        self.head(g, x)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bundle(path, &self.header, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, stored): (FeatureHeader, ParamStore<f64>) = read_bundle(path)?;
        if header.kind != "feature" {
            return Err(Error::Checkpoint(format!("expected a feature classifier, found {:?}", header.kind)));
        }
        let mut clf = Self::build(header, 0);
        restore_into(&mut clf.store, &stored)?;
        Ok(clf)
    }

    pub fn parameter_bits(&self) -> Vec<u64> {
        self.store.flat_values().iter().map(|x| x.to_bits()).collect()
    }
}

pub fn train_feature_classifier(
    rows: &[FeatureVector],
    labels: &[usize],
    classes: Vec<String>,
    cfg: &FeatureClassifierConfig,
) -> Result<(FeatureClassifier, TrainReport)> {
    if rows.len() != labels.len() || rows.is_empty() {
        return Err(Error::Invalid(format!("{} feature rows for {} labels", rows.len(), labels.len())));
    }
    if classes.len() < 2 || cfg.features.is_empty() {
        return Err(Error::Config("a feature classifier needs two classes and at least one feature".into()));
    }
    if let Some(y) = labels.iter().find(|y| **y >= classes.len()) {
        return Err(Error::Invalid(format!("label {y} out of range for {} classes", classes.len())));
    }
    let selected: Vec<Vec<f64>> = rows.iter().map(|r| r.select(&cfg.features)).collect();

    let mut rng = init::rng(cfg.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut rng);
    let n_test = ((rows.len() as f64 * cfg.holdout).round() as usize).min(rows.len() - 1);
    let (test, train) = order.split_at(n_test);
    let mut train = train.to_vec();

    let train_rows: Vec<Vec<f64>> = train.iter().map(|i| selected[*i].clone()).collect();
    let header = FeatureHeader {
        kind: "feature".into(),
        features: cfg.features.clone(),
        hidden: cfg.hidden.clone(),
        classes,
        inputs: Standardizer::fit(&train_rows)?,
    };
    let mut clf = FeatureClassifier::build(header, init::derive_seed(cfg.seed, 1));
    let mut adam = Adam::new(cfg.learning_rate);
    let mut final_loss = f64::NAN;

    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for batch in train.chunks(cfg.batch_size.max(1)) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_rows(&batch.iter().map(|i| selected[*i].clone()).collect::<Vec<_>>())?);
            let z = clf.standardize(&mut g, x)?;
            let logits = clf.mlp.forward(&mut g, &clf.store, z)?;
            let targets: Vec<usize> = batch.iter().map(|i| labels[*i]).collect();
            let loss = g.cross_entropy(logits, &targets)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite { context: "feature classifier training".into(), detail: format!("loss {value}") });
            }
            g.backward(loss)?;
            g.accumulate_param_grads(&mut clf.store);
            adam.step(&mut clf.store)?;
            total += value;
            batches += 1;
        }
        final_loss = total / batches.max(1) as f64;
    }

    let accuracy = |idx: &[usize]| -> Result<f64> {
        if idx.is_empty() {
            return Ok(f64::NAN);
        }
        let mut hits = 0usize;
        for i in idx {
            if argmax(&clf.predict(&rows[*i])?) == labels[*i] {
                hits += 1;
            }
        }
        Ok(hits as f64 / idx.len() as f64)
    };
    let report = TrainReport { train_accuracy: accuracy(&train)?, heldout_accuracy: accuracy(test)?, final_loss };
    Ok((clf, report))
}
