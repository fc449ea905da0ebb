use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::features::tokenize;

/// Top-`n` tokens per document by raw-count tf × ln(N/df); equal scores rank lexicographically.
pub fn tfidf_keywords<S: AsRef<str>>(texts: &[S], n: usize) -> Result<Vec<Vec<String>>> {
    if texts.len() < 2 {
        return Err(Error::Invalid(format!("tf-idf needs at least 2 documents, got {}", texts.len())));
    }
    let counts: Vec<HashMap<String, usize>> = texts
        .iter()
        .map(|t| {
            let mut tf = HashMap::new();
            for tok in tokenize(t.as_ref()) {
                *tf.entry(tok).or_insert(0) += 1;
            }
            tf
        })
        .collect();
    let mut df: HashMap<&str, usize> = HashMap::new();
    for tf in &counts {
        for tok in tf.keys() {
            *df.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    let docs = texts.len() as f64;
    Ok(counts
        .iter()
        .map(|tf| {
            let mut scored: Vec<(f64, &str)> = tf
                .iter()
                .map(|(tok, c)| (*c as f64 * (docs / df[tok.as_str()] as f64).ln(), tok.as_str()))
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            scored.into_iter().take(n).map(|(_, t)| t.to_string()).collect()
        })
        .collect())
}
