//! Fit-then-adjust helpers tying predictors to the adjusted estimators.
//!
//! The predictor is fitted in-sample on the same experiment it adjusts, one
//! model per metric component, using [`CellMeanModel`].

use crate::adjustment::{adjusted_estimate, AdjustedEstimate, PredictionSet, ThetaChoice};
use crate::error::Result;
use crate::metrics::{ExperimentDataset, MetricSpec};
use crate::predictors::{cross_validated_correlation, fit_predictor, predict_as_control, CellMeanModel, FitMode};

/// One prediction set per component of `metric`. When `folds` is given, each
/// set also carries its cross-validated correlation.
pub fn fit_predictions<S: AsRef<str>>(
    data: &ExperimentDataset,
    metric: &MetricSpec,
    features: &[S],
    mode: FitMode,
    folds: Option<usize>,
) -> Result<Vec<PredictionSet>> {
    metric
        .components()
        .iter()
        .map(|c| {
            let fitted = fit_predictor(data, c.response, features, mode, CellMeanModel::new())?;
            let set = predict_as_control(&fitted, data)?;
            match folds {
                Some(k) => {
                    let rho = cross_validated_correlation(data, c.response, features, mode, &CellMeanModel::new(), k)?;
                    set.with_cv_correlation(rho)
                }
                None => Ok(set),
            }
        })
        .collect()
}

/// Fits the predictor under `mode` and returns the adjusted estimate.
pub fn fit_and_adjust<S: AsRef<str>>(
    data: &ExperimentDataset,
    metric: &MetricSpec,
    features: &[S],
    mode: FitMode,
    theta: &ThetaChoice,
) -> Result<AdjustedEstimate> {
    let preds = fit_predictions(data, metric, features, mode, None)?;
    adjusted_estimate(data, metric, &preds, theta)
}
