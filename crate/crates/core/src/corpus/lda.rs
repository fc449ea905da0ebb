//! Collapsed Gibbs sampling for latent Dirichlet allocation.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::init;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdaConfig {
    pub topics: usize,
    pub seed: u64,
    pub sweeps: usize,
    /// Document-topic prior; `None` means 50 / topics.
    pub alpha: Option<f64>,
    pub beta: f64,
}

impl Default for LdaConfig {
    fn default() -> Self {
        LdaConfig { topics: 20, seed: 23, sweeps: 500, alpha: None, beta: 0.01 }
    }
}

/// Per-document topic: argmax of the document's topic counts after the final
/// sweep (lowest index on ties). Empty documents get topic 0.
pub fn lda_topics(docs: &[Vec<String>], cfg: &LdaConfig) -> Result<Vec<usize>> {
    let k = cfg.topics;
    if k < 1 {
        return Err(Error::Config("lda needs at least one topic".into()));
    }
    let alpha = cfg.alpha.unwrap_or(50.0 / k as f64);
    let beta = cfg.beta;
    if alpha <= 0.0 || beta <= 0.0 {
        return Err(Error::Config(format!("lda priors must be positive (alpha {alpha}, beta {beta})")));
    }

    // word ids in first-appearance order
    let mut vocab: HashMap<&str, usize> = HashMap::new();
    let words: Vec<Vec<usize>> = docs
        .iter()
        .map(|d| {
            d.iter()
                .map(|w| {
                    let next = vocab.len();
                    *vocab.entry(w.as_str()).or_insert(next)
                })
                .collect()
        })
        .collect();
    let v = vocab.len();
    let vbeta = v as f64 * beta;

    let mut rng = init::rng(cfg.seed);
    let mut doc_topic = vec![vec![0usize; k]; docs.len()];
    let mut topic_word = vec![0usize; k * v];
    let mut topic_total = vec![0usize; k];
    let mut assignment: Vec<Vec<usize>> = Vec::with_capacity(docs.len());
    for (d, ws) in words.iter().enumerate() {
        let zs: Vec<usize> = ws.iter().map(|_| rng.gen_range(0..k)).collect();
        for (w, z) in ws.iter().zip(&zs) {
            doc_topic[d][*z] += 1;
            topic_word[z * v + w] += 1;
            topic_total[*z] += 1;
        }
        assignment.push(zs);
    }

    let mut weights = vec![0.0; k];
    for _ in 0..cfg.sweeps {
        for (d, ws) in words.iter().enumerate() {
            for (i, &w) in ws.iter().enumerate() {
                let old = assignment[d][i];
                doc_topic[d][old] -= 1;
                topic_word[old * v + w] -= 1;
                topic_total[old] -= 1;

                let mut total = 0.0;
                for t in 0..k {
                    total += (doc_topic[d][t] as f64 + alpha) * (topic_word[t * v + w] as f64 + beta)
                        / (topic_total[t] as f64 + vbeta);
                    weights[t] = total;
                }
                let u = rng.gen::<f64>() * total;
                let new = weights.iter().position(|c| u < *c).unwrap_or(k - 1);

                assignment[d][i] = new;
                doc_topic[d][new] += 1;
                topic_word[new * v + w] += 1;
                topic_total[new] += 1;
            }
        }
    }

    Ok(doc_topic
        .iter()
        .map(|counts| {
            counts.iter().enumerate().fold(0, |best, (t, c)| if *c > counts[best] { t } else { best })
        })
        .collect())
}
