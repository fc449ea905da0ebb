//! Automatic evaluation: perplexity, control accuracy, ROUGE and
//! per-class feature distributions, with JSON/CSV/SVG report emission.

mod distribution;
mod metrics;
mod report;

pub use distribution::{feature_distribution_report, ClassSummary, FeatureDistribution, FeatureGap, FeatureStat};
pub use metrics::{
    control_accuracy, perplexity, rouge, ConfusionMatrix, ControlJudge, ControlScore, FeatureJudge, RougeScore,
    RougeVariant, SequenceScorer, TokenNll, UniformScorer,
};
pub use report::{EvalReport, ReportPaths, CONFUSION_COLUMNS, FEATURE_COLUMNS, GAP_COLUMNS, SUMMARY_COLUMNS};
