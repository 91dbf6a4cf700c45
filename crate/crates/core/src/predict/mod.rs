//! Success and dropout predictors over windowed interaction histories.

pub mod eval;
pub mod features;
pub mod forest;
pub mod metrics;

pub use eval::{
    build_dropout_data, build_success_data, chronological_split, evaluate_table1, fit_dropout_model,
    fit_success_model, user_holdout_split, DropoutEvaluation, PredictError, Report, SuccessEvaluation,
};
pub use features::{build_dropout_features, build_success_features, FeatureLayout};
pub use forest::{fit_forest, upsample_minority, Dataset, Forest, ForestConfig, ForestError, Task};
pub use metrics::{pearson, rmse, roc_auc, MetricError, RocCurve};
