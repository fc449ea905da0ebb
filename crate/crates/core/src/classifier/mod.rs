//! Feedback classifiers that score generated text against a metric class.

pub mod bag;
pub mod feature;

pub use bag::{train_bag_classifier, BagClassifier, BagConfig, SoftVocabulary, TrainReport};
pub use feature::{train_feature_classifier, FeatureClassifier, FeatureClassifierConfig};
