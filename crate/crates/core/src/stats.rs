//! Small descriptive statistics shared by the estimators and classifiers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn mean<S: Real>(xs: &[S]) -> Option<S> {
    (!xs.is_empty()).then(|| xs.iter().copied().sum::<S>() / S::lit(xs.len() as f64))
}

/// Midpoint of the two central order statistics for even lengths.
pub fn median<S: Real>(xs: &[S]) -> Option<S> {
    if xs.is_empty() {
        return None;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    Some(if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / S::lit(2.0) })
}

/// Population standard deviation.
pub fn std_dev<S: Real>(xs: &[S]) -> Option<S> {
    let m = mean(xs)?;
    let var = xs.iter().map(|x| (*x - m) * (*x - m)).sum::<S>() / S::lit(xs.len() as f64);
    Some(var.sqrt())
}

/// Per-column z-scoring fitted on training rows. Constant columns keep unit scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map(Vec::len).ok_or_else(|| Error::Invalid("cannot standardize zero rows".into()))?;
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Invalid("rows have unequal widths".into()));
        }
        let mut mean = vec![0.0; width];
        let mut scale = vec![0.0; width];
        for j in 0..width {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            mean[j] = self::mean(&col).expect("non-empty");
            let sd = std_dev(&col).expect("non-empty");
            scale[j] = if sd > 1e-12 { sd } else { 1.0 };
        }
        Ok(Standardizer { mean, scale })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[3.0f32, 1.0, 2.0]), Some(2.0));
        assert_eq!(median::<f64>(&[]), None);
    }

    #[test]
    fn standardizer_handles_constant_columns() {
        let s = Standardizer::fit(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(s.apply(&[3.0, 5.0]), vec![1.0, 0.0]);
    }
}
