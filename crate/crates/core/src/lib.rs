//! Variance-reduced estimators for randomized experiments.
//!
//! Raw effect estimates (g-transformed differences, mean ratios, sum ratios
//! and ratios of mean ratios) are adjusted with predictions from an
//! auxiliary model that ignores the arm assignment. The adjustment keeps the
//! estimator asymptotically unbiased, and the coefficient θ is chosen to
//! minimize its delta-method variance.

pub mod adjustment;
pub mod error;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod predictors;
pub mod simulation;
pub mod stats;

pub use adjustment::{
    adjusted_estimate, adjusted_estimate_arm_specific, blend_predictions, ghost_estimate, grid_search_component_thetas,
    optimal_theta_single, optimal_theta_two_arm, theta_bracket_check, AdjustedEstimate, ArmMoments, GhostForm,
    GridThetaResult, MomentSummary, PredictionSet, ThetaChoice, ThetaEstimate, ThetaGridConfig,
};
pub use error::{Error, Result};
pub use inference::{
    delta_variance_gdiff, jackknife_ci, jackknife_ci_multi, sample_size_equivalent, variance_forecast,
    ConfidenceInterval, DeltaQuadratic, JackknifeConfig, VarianceForecast,
};
pub use metrics::{
    arm_mean, log_scale_view, raw_estimate, Arm, DatasetColumns, ExperimentDataset, FeatureColumn, GTransform,
    MetricSpec, UnitRecord,
};
pub use predictors::{
    cross_validated_correlation, fit_predictor, predict_as_control, CellMeanModel, FitMode, FittedPredictor, Predictor,
};
