//! Doubly-robust average treatment effect estimation over binarized text features.
//!
//! For each treatment feature: binarize it, fit a propensity network on the
//! remaining features, fit one outcome regressor per arm, then average the
//! difference of the doubly-robust responses.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::init::{self, SeededRng};
use crate::autodiff::layers::{Activation, Mlp};
use crate::autodiff::{Adam, Graph, ParamStore, Tensor};
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::features::{Feature, FeatureVector, PosLexicon};
use crate::scalar::Real;
use crate::stats::{self, Standardizer};

/// Binary treatment derived from one feature: `treated[i]` iff value > threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreatmentAssignment {
    pub feature: Feature,
    pub threshold: f64,
    pub treated: Vec<bool>,
}

impl TreatmentAssignment {
    pub fn arm_sizes(&self) -> (usize, usize) {
        let n1 = self.treated.iter().filter(|t| **t).count();
        (self.treated.len() - n1, n1)
    }
}

/// Thresholds at the median unless `threshold` is given; ties go to the control arm.
pub fn binarize_treatment(features: &[FeatureVector], feature: Feature, threshold: Option<f64>) -> Result<TreatmentAssignment> {
    let values: Vec<f64> = features.iter().map(|fv| fv.get(feature)).collect();
    let first = *values.first().ok_or_else(|| Error::Invalid("no documents to binarize".into()))?;
    if values.iter().all(|v| *v == first) {
        return Err(Error::DegenerateTreatment(format!("{feature} is constant ({first}) across the corpus")));
    }
    let threshold = threshold.unwrap_or_else(|| stats::median(&values).expect("non-empty"));
    Ok(TreatmentAssignment { feature, threshold, treated: values.iter().map(|v| *v > threshold).collect() })
}

fn check_propensity<S: Real>(p: S) -> Result<()> {
    if p > S::zero() && p < S::one() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("propensity {p} outside (0, 1)")))
    }
}

fn indicator<S: Real>(treated: bool) -> S {
    if treated {
        S::one()
    } else {
        S::zero()
    }
}

/// `R̂(0) = Y·(1−T)/(1−p) + Ŷ0·(T−p)/(1−p)`, evaluated as `Ŷ0 + (1−T)(Y−Ŷ0)/(1−p)`
/// so that a treated unit returns `Ŷ0` exactly.
pub fn response_without_treatment<S: Real>(observed: S, treated: bool, predicted_control: S, propensity: S) -> Result<S> {
    check_propensity(propensity)?;
    let untreated = S::one() - indicator::<S>(treated);
    Ok(predicted_control + untreated * (observed - predicted_control) / (S::one() - propensity))
}

/// `R̂(1) = Y·T/p − Ŷ1·(T−p)/p`, evaluated as `Ŷ1 + T(Y−Ŷ1)/p` so that an
/// untreated unit returns `Ŷ1` exactly.
pub fn response_with_treatment<S: Real>(observed: S, treated: bool, predicted_treated: S, propensity: S) -> Result<S> {
    check_propensity(propensity)?;
    Ok(predicted_treated + indicator::<S>(treated) * (observed - predicted_treated) / propensity)
}

/// Mean of `R̂(1) − R̂(0)` over documents.
pub fn average_treatment_effect<S: Real>(with_treatment: &[S], without_treatment: &[S]) -> Result<S> {
    if with_treatment.len() != without_treatment.len() {
        return Err(Error::Invalid(format!(
            "response lengths differ ({} vs {})",
            with_treatment.len(),
            without_treatment.len()
        )));
    }
    let diffs: Vec<S> = with_treatment.iter().zip(without_treatment).map(|(a, b)| *a - *b).collect();
    stats::mean(&diffs).ok_or_else(|| Error::Invalid("average treatment effect of an empty corpus".into()))
}

/// Difference of observed outcome means between arms (ignores confounding).
pub fn naive_difference(outcomes: &[f64], treated: &[bool]) -> Result<f64> {
    let arm = |t: bool| -> Vec<f64> { outcomes.iter().zip(treated).filter(|(_, x)| **x == t).map(|(y, _)| *y).collect() };
    match (stats::mean(&arm(true)), stats::mean(&arm(false))) {
        (Some(a), Some(b)) => Ok(a - b),
        _ => Err(Error::DegenerateTreatment("naive difference needs both arms".into())),
    }
}

/// Network and optimizer settings shared by the propensity and outcome models.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of rows held out for evaluation.
    pub holdout: f64,
    /// Decay the learning rate linearly to zero over training.
    pub anneal: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { hidden: vec![128; 5], epochs: 10, batch_size: 5, learning_rate: 1e-3, holdout: 0.1, anneal: true }
    }
}

#[derive(Clone, Copy)]
enum Objective {
    /// Two-logit softmax cross-entropy on 0/1 labels.
    Binary,
    /// Mean squared error on a single output.
    Squared,
}

/// Feed-forward network over standardized inputs, trained by minibatch Adam.
#[derive(Clone, Debug)]
struct Net {
    store: ParamStore<f64>,
    mlp: Mlp,
    inputs: Standardizer,
}

impl Net {
    /// Trains on `rows`; returns the network and the mean loss of the final epoch.
    fn train(rows: &[Vec<f64>], targets: &[f64], objective: Objective, cfg: &NetConfig, rng: &mut SeededRng) -> Result<(Self, f64)> {
        let inputs = Standardizer::fit(rows)?;
        let outputs = match objective {
            Objective::Binary => 2,
            Objective::Squared => 1,
        };
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, rng, "net", inputs.width(), &cfg.hidden, outputs, Activation::Relu);
        let mut net = Net { store, mlp, inputs };
        let xs: Vec<Vec<f64>> = rows.iter().map(|r| net.inputs.apply(r)).collect();
        let mut adam = Adam::new(cfg.learning_rate);
        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mut last_epoch = f64::NAN;
        let total_steps = (cfg.epochs * rows.len().div_ceil(cfg.batch_size.max(1))) as f64;
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            let mut batches = 0;
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let mut g = Graph::new();
                let x = g.constant(Tensor::from_rows(&batch.iter().map(|i| xs[*i].clone()).collect::<Vec<_>>())?);
                let out = net.mlp.forward(&mut g, &net.store, x)?;
                let loss = match objective {
                    Objective::Binary => {
                        let labels: Vec<usize> = batch.iter().map(|i| usize::from(targets[*i] > 0.5)).collect();
                        g.cross_entropy(out, &labels)?
                    }
                    Objective::Squared => {
                        let y = g.constant(Tensor::matrix(batch.len(), 1, batch.iter().map(|i| targets[*i]).collect())?);
                        let diff = g.sub(out, y)?;
                        let sq = g.mul(diff, diff)?;
                        g.mean(sq)
                    }
                };
                let value = g.value(loss).item()?;
                if !value.is_finite() {
                    return Err(Error::NonFinite { context: "estimator training".into(), detail: format!("loss {value}") });
                }
                g.backward(loss)?;
                g.accumulate_param_grads(&mut net.store);
                if cfg.anneal {
                    adam.lr = cfg.learning_rate * (1.0 - adam.steps() as f64 / total_steps);
                }
                adam.step(&mut net.store)?;
                total += value;
                batches += 1;
            }
            last_epoch = total / batches.max(1) as f64;
        }
        Ok((net, last_epoch))
    }

    fn forward(&self, rows: &[Vec<f64>]) -> Result<Tensor<f64>> {
        let xs: Vec<Vec<f64>> = rows.iter().map(|r| self.inputs.apply(r)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&xs)?);
        let out = self.mlp.forward(&mut g, &self.store, x)?;
        Ok(g.value(out).clone())
    }
}

/// p(T=1 | X) with outputs clipped to `[clip, 1 − clip]`.
#[derive(Clone, Debug)]
pub struct PropensityModel {
    net: Net,
    pub clip: f64,
    /// Mean training loss of the final epoch.
    pub training_loss: f64,
}

impl PropensityModel {
    pub fn fit(rows: &[Vec<f64>], treated: &[bool], cfg: &NetConfig, clip: f64, rng: &mut SeededRng) -> Result<Self> {
        if !(0.0..0.5).contains(&clip) {
            return Err(Error::Config(format!("propensity clip {clip} must lie in [0, 0.5)")));
        }
        let n1 = treated.iter().filter(|t| **t).count();
        if n1 == 0 || n1 == treated.len() {
            return Err(Error::DegenerateTreatment("propensity model needs both arms".into()));
        }
        let labels: Vec<f64> = treated.iter().map(|t| f64::from(u8::from(*t))).collect();
        let (net, training_loss) = Net::train(rows, &labels, Objective::Binary, cfg, rng)?;
        Ok(PropensityModel { net, clip, training_loss })
    }

    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let logits = self.net.forward(rows)?;
        Ok((0..logits.rows())
            .map(|i| {
                let (a, b) = (logits.get2(i, 0), logits.get2(i, 1));
                let p = crate::scalar::softmax(&[a, b])[1];
                p.clamp(self.clip, 1.0 - self.clip)
            })
            .collect())
    }
}

/// Minimum rows an outcome arm needs.
pub const MIN_ARM_ROWS: usize = 10;

/// One regressor per arm, each fit on its own arm's training rows.
#[derive(Clone, Debug)]
pub struct OutcomeModel {
    arms: [Net; 2],
    /// Outcome standardization per arm: (mean, scale).
    targets: [(f64, f64); 2],
    /// Held-out mean absolute error per arm, in outcome units.
    pub mae: [f64; 2],
}

impl OutcomeModel {
    pub fn fit(rows: &[Vec<f64>], treated: &[bool], outcomes: &[f64], cfg: &NetConfig, rng: &mut SeededRng) -> Result<Self> {
        let mut fitted = Vec::with_capacity(2);
        for arm in [false, true] {
            let idx: Vec<usize> = (0..rows.len()).filter(|i| treated[*i] == arm).collect();
            if idx.len() < MIN_ARM_ROWS {
                return Err(Error::DegenerateTreatment(format!(
                    "arm T={} has {} rows; at least {MIN_ARM_ROWS} are needed",
                    u8::from(arm),
                    idx.len()
                )));
            }
            let mut idx = idx;
            idx.shuffle(rng);
            let n_test = ((idx.len() as f64 * cfg.holdout).round() as usize).clamp(1, idx.len() - 1);
            let (test, train) = idx.split_at(n_test);
            let ys: Vec<f64> = train.iter().map(|i| outcomes[*i]).collect();
            let center = stats::mean(&ys).expect("non-empty");
            let spread = stats::std_dev(&ys).filter(|s| *s > 1e-12).unwrap_or(1.0);
            let train_rows: Vec<Vec<f64>> = train.iter().map(|i| rows[*i].clone()).collect();
            let scaled: Vec<f64> = ys.iter().map(|y| (y - center) / spread).collect();
            let (net, _) = Net::train(&train_rows, &scaled, Objective::Squared, cfg, rng)?;
            let test_rows: Vec<Vec<f64>> = test.iter().map(|i| rows[*i].clone()).collect();
            let pred = net.forward(&test_rows)?;
            let mae = test.iter().enumerate().map(|(k, i)| (pred.data()[k] * spread + center - outcomes[*i]).abs()).sum::<f64>()
                / test.len() as f64;
            fitted.push((net, (center, spread), mae));
        }
        let (n1, t1, m1) = fitted.pop().expect("two arms");
        let (n0, t0, m0) = fitted.pop().expect("two arms");
        Ok(OutcomeModel { arms: [n0, n1], targets: [t0, t1], mae: [m0, m1] })
    }

    /// Predicted outcome under arm `treated` for every row.
    pub fn predict(&self, rows: &[Vec<f64>], treated: bool) -> Result<Vec<f64>> {
        let arm = usize::from(treated);
        let (center, spread) = self.targets[arm];
        Ok(self.arms[arm].forward(rows)?.data().iter().map(|z| z * spread + center).collect())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AteConfig {
    pub net: NetConfig,
    pub propensity_clip: f64,
    /// `|ATE| > tau_sig` marks a feature significant.
    pub tau_sig: f64,
    pub seed: u64,
    /// Observed metric counts are divided by this before estimation.
    pub outcome_scale: f64,
    /// Per-feature binarization thresholds replacing the median.
    pub thresholds: BTreeMap<Feature, f64>,
    /// Covariate pool; each treatment is removed from its own covariates.
    pub covariates: Vec<Feature>,
    /// Also drop covariates that mechanically contain the treatment or are contained by it.
    pub exclude_linked: bool,
    /// Run features on the rayon pool (results do not depend on it).
    pub parallel: bool,
}

impl Default for AteConfig {
    fn default() -> Self {
        AteConfig {
            net: NetConfig::default(),
            propensity_clip: 0.01,
            tau_sig: 0.1,
            seed: 0,
            outcome_scale: 1.0,
            thresholds: BTreeMap::new(),
            covariates: Feature::ALL.to_vec(),
            exclude_linked: true,
            parallel: true,
        }
    }
}

/// Per-feature estimate and model diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteRow {
    pub feature: Feature,
    pub ate: f64,
    pub significant: bool,
    pub propensity_loss: f64,
    pub mae_t0: f64,
    pub mae_t1: f64,
    pub n_t0: usize,
    pub n_t1: usize,
    pub threshold: f64,
    pub naive_difference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub metric: String,
    pub tau_sig: f64,
    pub seed: u64,
    pub rows: Vec<AteRow>,
}

impl AteReport {
    pub fn row(&self, feature: Feature) -> Option<&AteRow> {
        self.rows.iter().find(|r| r.feature == feature)
    }

    pub fn significant_features(&self) -> Vec<Feature> {
        self.rows.iter().filter(|r| r.significant).map(|r| r.feature).collect()
    }

    /// Columns: feature, ate, significant, propensity_loss, mae_t0, mae_t1, n_t0, n_t1.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["feature", "ate", "significant", "propensity_loss", "mae_t0", "mae_t1", "n_t0", "n_t1"])?;
        for r in &self.rows {
            w.write_record([
                r.feature.name().to_string(),
                r.ate.to_string(),
                r.significant.to_string(),
                r.propensity_loss.to_string(),
                r.mae_t0.to_string(),
                r.mae_t1.to_string(),
                r.n_t0.to_string(),
                r.n_t1.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&src)?)
    }
}

/// Full pipeline for one treatment feature.
pub fn estimate_feature(features: &[FeatureVector], outcomes: &[f64], feature: Feature, cfg: &AteConfig) -> Result<AteRow> {
    let assignment = binarize_treatment(features, feature, cfg.thresholds.get(&feature).copied())?;
    let covariates: Vec<Feature> = cfg
        .covariates
        .iter()
        .copied()
        .filter(|f| *f != feature && !(cfg.exclude_linked && f.linked(feature)))
        .collect();
    if covariates.is_empty() {
        return Err(Error::Config(format!("no covariates left for treatment {feature}")));
    }
    let rows: Vec<Vec<f64>> = features.iter().map(|fv| fv.select(&covariates)).collect();
    let mut rng = init::rng(init::derive_seed(cfg.seed, feature.index() as u64));

    let propensity = PropensityModel::fit(&rows, &assignment.treated, &cfg.net, cfg.propensity_clip, &mut rng)?;
    let outcome = OutcomeModel::fit(&rows, &assignment.treated, outcomes, &cfg.net, &mut rng)?;
    let p = propensity.predict(&rows)?;
    let y0 = outcome.predict(&rows, false)?;
    let y1 = outcome.predict(&rows, true)?;

    let mut with = Vec::with_capacity(rows.len());
    let mut without = Vec::with_capacity(rows.len());
    for i in 0..rows.len() {
        let t = assignment.treated[i];
        with.push(response_with_treatment(outcomes[i], t, y1[i], p[i])?);
        without.push(response_without_treatment(outcomes[i], t, y0[i], p[i])?);
    }
    let ate = average_treatment_effect(&with, &without)?;
    let (n_t0, n_t1) = assignment.arm_sizes();
    Ok(AteRow {
        feature,
        ate,
        significant: ate.abs() > cfg.tau_sig,
        propensity_loss: propensity.training_loss,
        mae_t0: outcome.mae[0],
        mae_t1: outcome.mae[1],
        n_t0,
        n_t1,
        threshold: assignment.threshold,
        naive_difference: naive_difference(outcomes, &assignment.treated)?,
    })
}

/// Estimates every feature in `treatments`; rows follow the input order.
pub fn ate_report(
    features: &[FeatureVector],
    outcomes: &[f64],
    treatments: &[Feature],
    metric: &str,
    cfg: &AteConfig,
) -> Result<AteReport> {
    if features.len() != outcomes.len() {
        return Err(Error::Invalid(format!("{} feature rows but {} outcomes", features.len(), outcomes.len())));
    }
    let outcomes: Vec<f64> = outcomes.iter().map(|y| y / cfg.outcome_scale).collect();
    let run = |f: &Feature| estimate_feature(features, &outcomes, *f, cfg);
    let rows: Result<Vec<AteRow>> = if cfg.parallel {
        treatments.par_iter().map(run).collect()
    } else {
        treatments.iter().map(run).collect()
    };
    Ok(AteReport { metric: metric.to_string(), tau_sig: cfg.tau_sig, seed: cfg.seed, rows: rows? })
}

/// Featurizes `docs` and runs [`ate_report`] on the named metric.
pub fn ate_report_for_corpus(
    docs: &[Document],
    metric: &str,
    treatments: &[Feature],
    lexicon: &PosLexicon,
    cfg: &AteConfig,
) -> Result<AteReport> {
    let outcomes = docs
        .iter()
        .map(|d| {
            d.metrics
                .get(metric)
                .map(|v| *v as f64)
                .ok_or_else(|| Error::Invalid(format!("document {} has no metric {metric:?}", d.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let features = crate::corpus::featurize(docs, lexicon);
    ate_report(&features, &outcomes, treatments, metric, cfg)
}
