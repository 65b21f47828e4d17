//! Monte Carlo protocols over a simulated population: balance checks,
//! unbiasedness of the adjustment, replication of estimator spread across
//! sample sizes, and jackknife CI convergence.
//!
//! Replicate `r` at sample size `n` draws its sample with seed
//! `derive_seed(derive_seed(seed, n), r)`, so serial and parallel runs agree
//! and sizes can be added without disturbing others.

use rayon::prelude::*;

use super::generator::sample_experiment;
use crate::adjustment::ThetaChoice;
use crate::error::{Error, Result};
use crate::inference::{jackknife_ci_multi, ConfidenceInterval, JackknifeConfig};
use crate::metrics::{raw_estimate, Arm, ExperimentDataset, MetricSpec};
use crate::pipeline::fit_and_adjust;
use crate::predictors::FitMode;
use crate::stats::{self, derive_seed};

/// Seed of replicate `r` at sample size `n`.
pub fn replicate_seed(seed: u64, n: usize, r: usize) -> u64 {
    derive_seed(derive_seed(seed, n as u64), r as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImbalanceRow {
    pub feature: String,
    pub level: String,
    pub control_count: usize,
    pub treatment_count: usize,
    pub control_share: f64,
    pub treatment_share: f64,
    /// Difference in shares over the pooled binomial standard deviation.
    pub standardized_difference: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImbalanceReport {
    pub rows: Vec<ImbalanceRow>,
}

impl ImbalanceReport {
    pub fn max_abs_standardized_difference(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.standardized_difference.abs())
            .fold(0.0, f64::max)
    }

    /// All standardized differences below 0.05.
    pub fn is_balanced(&self) -> bool {
        self.max_abs_standardized_difference() < 0.05
    }
}

/// Unit counts per feature level and arm, with standardized differences of
/// the level shares.
pub fn imbalance_report(data: &ExperimentDataset) -> ImbalanceReport {
    let n_c = data.arm_count(Arm::Control) as f64;
    let n_t = data.arm_count(Arm::Treatment) as f64;
    let mut rows = Vec::new();
    for f in data.features() {
        let mut counts = vec![[0usize; 2]; f.levels.len()];
        for (code, arm) in f.codes.iter().zip(data.arms()) {
            counts[*code as usize][arm.indicator() as usize] += 1;
        }
        for (level, [c, t]) in f.levels.iter().zip(counts) {
            let pc = c as f64 / n_c;
            let pt = t as f64 / n_t;
            let pooled = ((pc * (1.0 - pc) + pt * (1.0 - pt)) / 2.0).sqrt();
            rows.push(ImbalanceRow {
                feature: f.name.clone(),
                level: level.clone(),
                control_count: c,
                treatment_count: t,
                control_share: pc,
                treatment_share: pt,
                standardized_difference: if pooled > 0.0 { (pt - pc) / pooled } else { 0.0 },
            });
        }
    }
    ImbalanceReport { rows }
}

/// Shared settings for the replicate sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub metric: MetricSpec,
    pub features: Vec<String>,
    pub fit_modes: Vec<FitMode>,
    pub seed: u64,
}

impl SweepConfig {
    pub fn new<S: AsRef<str>>(metric: MetricSpec, features: &[S], fit_modes: &[FitMode], seed: u64) -> Self {
        SweepConfig {
            metric,
            features: features.iter().map(|s| s.as_ref().to_owned()).collect(),
            fit_modes: fit_modes.to_vec(),
            seed,
        }
    }
}

/// Raw estimate followed by one adjusted estimate per fit mode.
fn estimates(sample: &ExperimentDataset, cfg: &SweepConfig) -> Result<Vec<f64>> {
    let mut out = vec![raw_estimate(sample, &cfg.metric)?];
    for &mode in &cfg.fit_modes {
        out.push(fit_and_adjust(sample, &cfg.metric, &cfg.features, mode, &ThetaChoice::Optimal)?.adjusted);
    }
    Ok(out)
}

/// Spread of a replicated quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub replicates: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        Summary {
            mean: stats::mean(values),
            sd: stats::std_dev(values),
            replicates: values.len(),
        }
    }

    pub fn se(&self) -> f64 {
        self.sd / (self.replicates as f64).sqrt()
    }

    /// Mean over its standard error; 0 when there is no spread.
    pub fn z(&self) -> f64 {
        let se = self.se();
        if se > 0.0 {
            self.mean / se
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasSummary {
    pub fit_mode: FitMode,
    pub log_adjustment: Summary,
    /// Per-replicate log adjustment factors, in replicate order.
    pub values: Vec<f64>,
}

impl BiasSummary {
    pub fn z(&self) -> f64 {
        self.log_adjustment.z()
    }
}

/// Distribution of the log adjustment factor `ln(adjusted) − ln(raw)` (or
/// `adjusted − raw` for g-differences) per fit mode over `replicates`
/// samples of size `n`. Unbiased adjustment centers it on zero.
pub fn adjustment_bias_sweep(
    population: &ExperimentDataset,
    n: usize,
    replicates: usize,
    cfg: &SweepConfig,
) -> Result<Vec<BiasSummary>> {
    if replicates < 100 {
        return Err(Error::InvalidParameter(format!(
            "bias sweep needs at least 100 replicates, got {replicates}"
        )));
    }
    let per_rep: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let sample = sample_experiment(population, n, replicate_seed(cfg.seed, n, r))?;
            cfg.fit_modes
                .iter()
                .map(|&mode| {
                    Ok(fit_and_adjust(&sample, &cfg.metric, &cfg.features, mode, &ThetaChoice::Optimal)?
                        .adjustment_log_factor)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(cfg
        .fit_modes
        .iter()
        .enumerate()
        .map(|(k, &mode)| {
            let values: Vec<f64> = per_rep.iter().map(|v| v[k]).collect();
            BiasSummary {
                fit_mode: mode,
                log_adjustment: Summary::of(&values),
                values,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRow {
    pub sample_size: usize,
    /// `raw` or the fit-mode label of an adjusted estimator.
    pub estimator: String,
    pub response: String,
    pub mean: f64,
    pub sd: f64,
    /// sd of this estimator over sd of the raw estimator.
    pub sd_ratio: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationReport {
    pub rows: Vec<ReplicationRow>,
}

impl ReplicationReport {
    pub fn row(&self, sample_size: usize, estimator: &str) -> Option<&ReplicationRow> {
        self.rows
            .iter()
            .find(|r| r.sample_size == sample_size && r.estimator == estimator)
    }

    /// sd ratios of one estimator in sample-size order.
    pub fn sd_ratios(&self, estimator: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.estimator == estimator)
            .map(|r| r.sd_ratio)
            .collect()
    }
}

/// Mean and sd of the raw and every adjusted estimator at each sample size.
pub fn replication_sweep(
    population: &ExperimentDataset,
    sample_sizes: &[usize],
    replicates: usize,
    cfg: &SweepConfig,
) -> Result<ReplicationReport> {
    if replicates < 2 {
        return Err(Error::InvalidParameter(format!(
            "replication sweep needs at least 2 replicates, got {replicates}"
        )));
    }
    let mut rows = Vec::new();
    let response = cfg.metric.response_label();
    for &n in sample_sizes {
        let per_rep: Vec<Vec<f64>> = (0..replicates)
            .into_par_iter()
            .map(|r| estimates(&sample_experiment(population, n, replicate_seed(cfg.seed, n, r))?, cfg))
            .collect::<Result<_>>()?;
        let summaries: Vec<Summary> = (0..=cfg.fit_modes.len())
            .map(|k| Summary::of(&per_rep.iter().map(|v| v[k]).collect::<Vec<_>>()))
            .collect();
        let raw_sd = summaries[0].sd;
        let names = std::iter::once("raw".to_owned()).chain(cfg.fit_modes.iter().map(|m| m.label().to_owned()));
        for (name, s) in names.zip(&summaries) {
            rows.push(ReplicationRow {
                sample_size: n,
                estimator: name,
                response: response.clone(),
                mean: s.mean,
                sd: s.sd,
                sd_ratio: if raw_sd > 0.0 { s.sd / raw_sd } else { 1.0 },
                replicates,
            });
        }
    }
    Ok(ReplicationReport { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CiRow {
    pub sample_size: usize,
    pub estimator: String,
    pub ci: ConfidenceInterval,
    /// Whether this interval lies inside the raw interval at the same size.
    pub within_raw: bool,
}

/// One sample per size; bucketed jackknife CIs for the raw estimator and
/// each adjusted estimator, with the predictor refitted on every
/// leave-one-bucket-out subset.
pub fn ci_convergence_sweep(
    population: &ExperimentDataset,
    sample_sizes: &[usize],
    cfg: &SweepConfig,
    jackknife: &JackknifeConfig,
) -> Result<Vec<CiRow>> {
    if sample_sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidParameter("sample sizes must be ascending".into()));
    }
    let mut rows = Vec::new();
    for (i, &n) in sample_sizes.iter().enumerate() {
        let sample = sample_experiment(population, n, replicate_seed(cfg.seed, n, i))?;
        let cis = jackknife_ci_multi(&sample, |d| estimates(d, cfg), jackknife)?;
        let raw = cis[0].clone();
        let names = std::iter::once("raw".to_owned()).chain(cfg.fit_modes.iter().map(|m| m.label().to_owned()));
        for (name, ci) in names.zip(cis) {
            rows.push(CiRow {
                sample_size: n,
                estimator: name,
                within_raw: ci.is_within(&raw),
                ci,
            });
        }
    }
    Ok(rows)
}
