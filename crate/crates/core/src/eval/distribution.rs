use serde::{Deserialize, Serialize};

use crate::corpus::ControlClass;
use crate::error::{Error, Result};
use crate::features::{extract_text_features, Feature, PosLexicon};
use crate::stats::{mean, std_dev};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStat {
    pub feature: Feature,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: ControlClass,
    pub samples: usize,
    pub stats: Vec<FeatureStat>,
}

/// Mean of the feature on high-target texts minus its mean on low-target texts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGap {
    pub feature: Feature,
    pub high_minus_low: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDistribution {
    pub variant: String,
    /// Present classes only, in low/medium/high order.
    pub classes: Vec<ClassSummary>,
    /// Empty unless both the high and the low class have samples.
    pub gaps: Vec<FeatureGap>,
    pub warnings: Vec<String>,
}

impl FeatureDistribution {
    pub fn summary(&self, class: ControlClass) -> Option<&ClassSummary> {
        self.classes.iter().find(|s| s.class == class)
    }

    pub fn gap(&self, feature: Feature) -> Option<f64> {
        self.gaps.iter().find(|g| g.feature == feature).map(|g| g.high_minus_low)
    }
}

/// Per-class feature statistics of generated texts grouped by their target class.
pub fn feature_distribution_report(
    variant: &str,
    generations: &[(String, ControlClass)],
    features: &[Feature],
    lexicon: &PosLexicon,
) -> Result<FeatureDistribution> {
    let mut values: [Vec<Vec<f64>>; 3] = Default::default();
    for (text, class) in generations {
        let fv = extract_text_features(text, lexicon);
        values[class.index()].push(features.iter().map(|f| fv.get(*f)).collect());
    }
    let present = values.iter().filter(|v| !v.is_empty()).count();
    if present < 2 {
        return Err(Error::Invalid(format!("feature distributions need two target classes, found {present}")));
    }
    let mut classes = Vec::new();
    let mut warnings = Vec::new();
    for class in ControlClass::ALL {
        let rows = &values[class.index()];
        if rows.is_empty() {
            warnings.push(format!("class {class} has no samples and is omitted"));
            continue;
        }
        let stats = features
            .iter()
            .enumerate()
            .map(|(j, feature)| {
                let column: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                FeatureStat {
                    feature: *feature,
                    mean: mean(&column).expect("non-empty class"),
                    std: std_dev(&column).expect("non-empty class"),
                }
            })
            .collect();
        classes.push(ClassSummary { class, samples: rows.len(), stats });
    }
    let mut report = FeatureDistribution { variant: variant.to_string(), classes, gaps: Vec::new(), warnings };
    if let (Some(high), Some(low)) = (report.summary(ControlClass::High), report.summary(ControlClass::Low)) {
        report.gaps = high
            .stats
            .iter()
            .zip(&low.stats)
            .map(|(h, l)| FeatureGap { feature: h.feature, high_minus_low: h.mean - l.mean })
            .collect();
    }
    Ok(report)
}
