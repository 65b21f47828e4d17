//! One function per subcommand. Each reads its inputs, computes, and writes
//! its report files under the output directory.

use std::collections::BTreeSet;

use varred_core::inference::{variance_forecast, DeltaQuadratic, JackknifeConfig};
use varred_core::io::{read_csv_path, write_csv, CsvSchema};
use varred_core::metrics::{raw_estimate, Arm, ExperimentDataset, MetricSpec};
use varred_core::pipeline::fit_predictions;
use varred_core::predictors::{cross_validated_correlation, CellMeanModel, FitMode};
use varred_core::simulation::{
    adjustment_bias_sweep, ci_convergence_sweep, generate_population_detailed, imbalance_report, replication_sweep,
    SimulationConfig, SweepConfig,
};
use varred_core::{
    adjusted_estimate, grid_search_component_thetas, jackknife_ci_multi, theta_bracket_check, AdjustedEstimate,
    PredictionSet, ThetaChoice, ThetaGridConfig,
};

use crate::config::RunConfig;
use crate::output::{num, opt, Outputs, Table, NA};
use crate::CliError;

fn jackknife(rc: &RunConfig) -> JackknifeConfig {
    JackknifeConfig {
        bucket_count: rc.buckets,
        confidence_level: rc.level,
    }
}

/// Metrics and features for a CSV input; every referenced column must exist.
fn load_input(rc: &RunConfig) -> Result<(ExperimentDataset, Vec<MetricSpec>), CliError> {
    let metrics = rc.metrics(&rc.responses)?;
    if rc.features.is_empty() {
        return Err(CliError::Config("--features is required".into()));
    }
    let mut seen = BTreeSet::new();
    let responses: Vec<String> = metrics
        .iter()
        .flat_map(|m| m.components().iter().map(|c| c.response.to_owned()).collect::<Vec<_>>())
        .filter(|r| seen.insert(r.clone()))
        .collect();
    let data = read_csv_path(rc.input()?, &CsvSchema::new(&responses, &rc.features))?;
    Ok((data, metrics))
}

/// Simulated population with the metrics and features that apply to it.
fn load_simulated(
    rc: &RunConfig,
) -> Result<(SimulationConfig, ExperimentDataset, Vec<MetricSpec>, Vec<String>), CliError> {
    let sim = rc.simulation()?;
    let data = generate_population_detailed(&sim)?.data;
    let metrics = rc.metrics(&rc.simulated_responses())?;
    let features = rc.simulated_features(&sim);
    Ok((sim, data, metrics, features))
}

/// Prediction sets with cross-validated correlations attached where the
/// data allow them.
fn predictions(
    data: &ExperimentDataset,
    metric: &MetricSpec,
    features: &[String],
    mode: FitMode,
    folds: usize,
) -> Result<Vec<PredictionSet>, CliError> {
    let preds = fit_predictions(data, metric, features, mode, None)?;
    preds
        .into_iter()
        .map(|p| {
            match cross_validated_correlation(data, &p.response, features, mode, &CellMeanModel::new(), folds) {
                Ok(rho) => Ok(p.with_cv_correlation(rho)?),
                Err(_) => Ok(p),
            }
        })
        .collect()
}

fn theta_choice(
    rc: &RunConfig,
    data: &ExperimentDataset,
    metric: &MetricSpec,
    preds: &[PredictionSet],
) -> Result<ThetaChoice, CliError> {
    if let Some(t) = rc.theta {
        return Ok(ThetaChoice::Fixed(t));
    }
    if !rc.joint_theta_grid {
        return Ok(ThetaChoice::Optimal);
    }
    if metric.components().len() != 2 {
        return Err(CliError::Config(format!(
            "--joint-theta-grid needs a two-response metric, got {}",
            metric.kind_name()
        )));
    }
    let grid = ThetaGridConfig {
        seed: rc.seed,
        ..ThetaGridConfig::default()
    };
    let r = grid_search_component_thetas(data, metric, preds, &grid)?;
    Ok(ThetaChoice::PerComponent(vec![r.theta_numerator, r.theta_denominator]))
}

fn adjust(
    data: &ExperimentDataset,
    metric: &MetricSpec,
    features: &[String],
    mode: FitMode,
    choice: &ThetaChoice,
) -> varred_core::Result<AdjustedEstimate> {
    let preds = fit_predictions(data, metric, features, mode, None)?;
    adjusted_estimate(data, metric, &preds, choice)
}

pub fn estimate(rc: &RunConfig) -> Result<Outputs, CliError> {
    let (data, metrics) = load_input(rc)?;
    let jk = jackknife(rc);
    let mut table = Table::new(&[
        "metric",
        "response",
        "fit_mode",
        "n_control",
        "n_treatment",
        "raw",
        "adjusted",
        "theta",
        "theta1",
        "theta2",
        "theta_denominator",
        "cv_cor",
        "predicted_sd_ratio",
        "ci_raw_lo",
        "ci_raw_hi",
        "ci_adj_lo",
        "ci_adj_hi",
        "degenerate",
    ]);
    for metric in &metrics {
        for &mode in &rc.fit_modes {
            let preds = predictions(&data, metric, &rc.features, mode, rc.folds)?;
            let choice = theta_choice(rc, &data, metric, &preds)?;
            let est = adjusted_estimate(&data, metric, &preds, &choice)?;
            let cis = jackknife_ci_multi(
                &data,
                |d| {
                    let e = adjust(d, metric, &rc.features, mode, &choice)?;
                    Ok(vec![e.raw, e.adjusted])
                },
                &jk,
            );
            let (raw_ci, adj_ci) = match cis {
                Ok(c) => (Some(c[0].clone()), Some(c[1].clone())),
                Err(e) => {
                    eprintln!("warning: no jackknife CI for {metric} ({mode}): {e}");
                    (None, None)
                }
            };
            let t = &est.thetas[0];
            table.push(vec![
                metric.kind_name().into(),
                metric.response_label(),
                mode.label().into(),
                data.arm_count(Arm::Control).to_string(),
                data.arm_count(Arm::Treatment).to_string(),
                num(est.raw),
                num(est.adjusted),
                num(t.theta),
                num(t.theta_control),
                num(t.theta_treatment),
                opt(est.thetas.get(1).map(|t| t.theta)),
                opt(preds[0].cv_correlation),
                num(est.predicted_sd_ratio),
                opt(raw_ci.as_ref().map(|c| c.lower)),
                opt(raw_ci.as_ref().map(|c| c.upper)),
                opt(adj_ci.as_ref().map(|c| c.lower)),
                opt(adj_ci.as_ref().map(|c| c.upper)),
                est.degenerate.to_string(),
            ]);
        }
    }
    let mut out = Outputs::new(&rc.out);
    out.csv("estimate.csv", &table)?;
    out.text("estimate.txt", &table.to_text())?;
    Ok(out)
}

pub fn theta(rc: &RunConfig) -> Result<Outputs, CliError> {
    let (data, metrics) = load_input(rc)?;
    let mut table = Table::new(&[
        "metric",
        "response",
        "component",
        "fit_mode",
        "theta",
        "theta1",
        "theta2",
        "bracket_ok",
        "rho_control",
        "rho_treatment",
        "raw_variance",
        "min_variance",
        "variance_reduction",
        "degenerate",
    ]);
    for metric in &metrics {
        let g = metric.transform();
        for &mode in &rc.fit_modes {
            let preds = fit_predictions(&data, metric, &rc.features, mode, None)?;
            let est = adjusted_estimate(&data, metric, &preds, &ThetaChoice::Optimal)?;
            for (comp, t) in metric.components().iter().zip(&est.thetas) {
                let q = DeltaQuadratic::new(&t.moments, &g);
                table.push(vec![
                    metric.kind_name().into(),
                    metric.response_label(),
                    comp.response.into(),
                    mode.label().into(),
                    num(t.theta),
                    num(t.theta_control),
                    num(t.theta_treatment),
                    theta_bracket_check(t).to_string(),
                    num(t.moments.control.cor_yh),
                    num(t.moments.treatment.cor_yh),
                    num(q.c),
                    num(q.minimum()),
                    num(q.delta()),
                    t.degenerate.to_string(),
                ]);
            }
        }
    }
    let mut out = Outputs::new(&rc.out);
    out.csv("theta.csv", &table)?;
    out.text("theta.txt", &table.to_text())?;
    Ok(out)
}

pub fn simulate(rc: &RunConfig) -> Result<Outputs, CliError> {
    let sim = rc.simulation()?;
    let generated = generate_population_detailed(&sim)?;
    let data = &generated.data;
    let mut population = Vec::new();
    write_csv(data, &mut population)?;

    let balance = imbalance_report(data);
    let mut imbalance = Table::new(&[
        "feature",
        "level",
        "control_count",
        "treatment_count",
        "control_share",
        "treatment_share",
        "standardized_difference",
    ]);
    for r in &balance.rows {
        imbalance.push(vec![
            r.feature.clone(),
            r.level.clone(),
            r.control_count.to_string(),
            r.treatment_count.to_string(),
            num(r.control_share),
            num(r.treatment_share),
            num(r.standardized_difference),
        ]);
    }

    let features = rc.simulated_features(&sim);
    let mut cv = Table::new(&["response", "fit_mode", "cv_cor", "predicted_sd_ratio"]);
    for response in data.response_names() {
        for &mode in &rc.fit_modes {
            let rho = cross_validated_correlation(data, response, &features, mode, &CellMeanModel::new(), rc.folds)?;
            cv.push(vec![
                response.clone(),
                mode.label().into(),
                num(rho),
                num(variance_forecast(rho)?.sd_ratio),
            ]);
        }
    }

    let mut summary = format!(
        "units {}\ncontrol drawn {} dropped {}\ntreatment drawn {} dropped {}\nmax |standardized difference| {:.4} ({})\n\n",
        data.len(),
        generated.drawn[0],
        generated.dropped[0],
        generated.drawn[1],
        generated.dropped[1],
        balance.max_abs_standardized_difference(),
        if balance.is_balanced() { "balanced" } else { "imbalanced" },
    );
    summary.push_str(&cv.to_text());

    let mut out = Outputs::new(&rc.out);
    out.bytes("population.csv", &population)?;
    out.csv("imbalance.csv", &imbalance)?;
    out.csv("cv_cor.csv", &cv)?;
    out.text("simulate.txt", &summary)?;
    out.text("config.toml", &sim.to_toml()?)?;
    Ok(out)
}

pub fn sweep(rc: &RunConfig) -> Result<Outputs, CliError> {
    let (_, pop, metrics, features) = load_simulated(rc)?;
    let mut table = Table::new(&[
        "metric",
        "response",
        "sample_size",
        "estimator",
        "replicates",
        "mean",
        "sd",
        "sd_ratio",
        "predicted_sd_ratio",
    ]);
    let mut plot = Table::new(&["series", "sample_size", "sd_ratio"]);
    for metric in &metrics {
        let mut forecast = Vec::new();
        for &mode in &rc.fit_modes {
            let preds = predictions(&pop, metric, &features, mode, rc.folds)?;
            let est = adjusted_estimate(&pop, metric, &preds, &ThetaChoice::Optimal)?;
            forecast.push((mode.label(), est.predicted_sd_ratio));
        }
        let cfg = SweepConfig::new(metric.clone(), &features, &rc.fit_modes, rc.seed);
        let report = replication_sweep(&pop, &rc.sizes, rc.replicates, &cfg)?;
        for r in &report.rows {
            let predicted = forecast.iter().find(|(m, _)| *m == r.estimator).map(|(_, p)| *p);
            table.push(vec![
                metric.kind_name().into(),
                r.response.clone(),
                r.sample_size.to_string(),
                r.estimator.clone(),
                r.replicates.to_string(),
                num(r.mean),
                num(r.sd),
                num(r.sd_ratio),
                if r.estimator == "raw" { "1".into() } else { opt(predicted) },
            ]);
            plot.push(vec![
                format!("{}:{}", r.response, r.estimator),
                r.sample_size.to_string(),
                num(r.sd_ratio),
            ]);
        }
    }
    let mut out = Outputs::new(&rc.out);
    out.csv("sweep.csv", &table)?;
    out.csv("sweep_plot.csv", &plot)?;
    out.text("sweep.txt", &table.to_text())?;
    Ok(out)
}

pub fn bias_check(rc: &RunConfig) -> Result<Outputs, CliError> {
    let (_, pop, metrics, features) = load_simulated(rc)?;
    let n = rc.sizes[0];
    let mut table = Table::new(&[
        "metric",
        "response",
        "fit_mode",
        "sample_size",
        "replicates",
        "mean_log_adjustment",
        "sd",
        "se",
        "z",
        "unbiased",
    ]);
    let mut plot = Table::new(&["response", "fit_mode", "replicate", "log_adjustment"]);
    for metric in &metrics {
        let cfg = SweepConfig::new(metric.clone(), &features, &rc.fit_modes, rc.seed);
        for s in adjustment_bias_sweep(&pop, n, rc.replicates, &cfg)? {
            let a = &s.log_adjustment;
            table.push(vec![
                metric.kind_name().into(),
                metric.response_label(),
                s.fit_mode.label().into(),
                n.to_string(),
                a.replicates.to_string(),
                num(a.mean),
                num(a.sd),
                num(a.se()),
                num(s.z()),
                (s.z().abs() < 3.0).to_string(),
            ]);
            for (i, v) in s.values.iter().enumerate() {
                plot.push(vec![
                    metric.response_label(),
                    s.fit_mode.label().into(),
                    i.to_string(),
                    num(*v),
                ]);
            }
        }
    }
    let mut out = Outputs::new(&rc.out);
    out.csv("bias.csv", &table)?;
    out.csv("bias_plot.csv", &plot)?;
    out.text("bias.txt", &table.to_text())?;
    Ok(out)
}

pub fn ci_sweep(rc: &RunConfig) -> Result<Outputs, CliError> {
    let (_, pop, metrics, features) = load_simulated(rc)?;
    let mut table = Table::new(&[
        "metric",
        "response",
        "sample_size",
        "estimator",
        "point",
        "lower",
        "upper",
        "width",
        "se",
        "level",
        "skipped_buckets",
        "within_raw",
        "covers_truth",
    ]);
    let mut plot = Table::new(&["series", "sample_size", "point", "lower", "upper"]);
    for metric in &metrics {
        let truth = raw_estimate(&pop, metric)?;
        let cfg = SweepConfig::new(metric.clone(), &features, &rc.fit_modes, rc.seed);
        for r in ci_convergence_sweep(&pop, &rc.sizes, &cfg, &jackknife(rc))? {
            let ci = &r.ci;
            table.push(vec![
                metric.kind_name().into(),
                metric.response_label(),
                r.sample_size.to_string(),
                r.estimator.clone(),
                num(ci.point),
                num(ci.lower),
                num(ci.upper),
                num(ci.width()),
                num(ci.se),
                num(ci.level),
                ci.skipped_buckets.len().to_string(),
                r.within_raw.to_string(),
                ci.contains(truth).to_string(),
            ]);
            plot.push(vec![
                format!("{}:{}", metric.response_label(), r.estimator),
                r.sample_size.to_string(),
                num(ci.point),
                num(ci.lower),
                num(ci.upper),
            ]);
        }
    }
    let mut out = Outputs::new(&rc.out);
    out.csv("ci.csv", &table)?;
    out.csv("ci_plot.csv", &plot)?;
    out.text("ci.txt", &table.to_text())?;
    Ok(out)
}

pub fn report(rc: &RunConfig) -> Result<Outputs, CliError> {
    let (data, metrics, features) = if rc.input.is_some() {
        let (data, metrics) = load_input(rc)?;
        (data, metrics, rc.features.clone())
    } else {
        let (_, data, metrics, features) = load_simulated(rc)?;
        (data, metrics, features)
    };
    let mut table = Table::new(&[
        "metric",
        "response",
        "fit_mode",
        "cv_cor",
        "theta",
        "predicted_sd_ratio",
        "ci_reduction",
        "sample_size_multiplier",
    ]);
    for metric in &metrics {
        for &mode in &rc.fit_modes {
            let preds = fit_predictions(&data, metric, &features, mode, Some(rc.folds))?;
            let est = adjusted_estimate(&data, metric, &preds, &ThetaChoice::Optimal)?;
            let rho = preds[0].cv_correlation;
            let forecast = rho.map(variance_forecast).transpose()?;
            table.push(vec![
                metric.kind_name().into(),
                metric.response_label(),
                mode.label().into(),
                opt(rho),
                num(est.theta()),
                num(est.predicted_sd_ratio),
                opt(forecast.map(|f| f.ci_reduction)),
                forecast
                    .map(|f| f.equivalent_sample_multiplier)
                    .filter(|m| m.is_finite())
                    .map_or_else(|| NA.to_owned(), num),
            ]);
        }
    }
    let mut out = Outputs::new(&rc.out);
    out.csv("report.csv", &table)?;
    out.text("report.txt", &table.to_text())?;
    Ok(out)
}
