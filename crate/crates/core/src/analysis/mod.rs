//! Attention traces, class-wise weight statistics and branch importance.

mod forest;
mod importance;
mod trace;

pub use forest::{
    fit_forest, gini_importance, FeatureImportance, ForestConfig, Node, RegressionForest,
    RegressionTree,
};
pub use importance::{branch_importance, BlockImportance, ImportanceReport};
pub use trace::{
    capture_traces, class_mean_weights, class_spread, write_class_means_csv, AttentionTrace,
    ClassMean, TraceSet,
};
