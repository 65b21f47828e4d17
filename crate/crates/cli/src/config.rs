//! Run settings: command-line flags layered over an optional TOML file.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;
use varred_core::metrics::{GTransform, MetricSpec};
use varred_core::predictors::{FitMode, DEFAULT_FOLDS};
use varred_core::simulation::{Scenario, SimulationConfig, RESPONSES};

use crate::CliError;

/// Flags shared by every subcommand. Each may also come from `--config`;
/// flags win.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Experiment CSV with `unit_id` and `arm` columns.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// g_difference, mean_ratio, sum_ratio or ratio_of_mean_ratios.
    #[arg(long)]
    pub metric: Option<String>,
    /// Response column(s); ratio_of_mean_ratios takes numerator,denominator pairs.
    #[arg(long, value_delimiter = ',')]
    pub response: Vec<String>,
    /// Categorical feature columns used by the predictor.
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<String>,
    /// control_only, all_with_arm or all_no_arm; repeatable.
    #[arg(long = "fit-mode", value_delimiter = ',')]
    pub fit_mode: Vec<String>,
    /// Transform for g_difference: identity or log.
    #[arg(long)]
    pub g: Option<String>,
    /// Fixed adjustment coefficient instead of the optimum.
    #[arg(long, allow_negative_numbers = true)]
    pub theta: Option<f64>,
    /// Jackknife bucket count.
    #[arg(long)]
    pub buckets: Option<usize>,
    /// Confidence level of the intervals.
    #[arg(long)]
    pub level: Option<f64>,
    /// Sample sizes for simulation sweeps.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Built-in simulation scenario: default, no_power, bias or high_power.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Simulation config file (TOML); overrides --scenario.
    #[arg(long = "sim-config")]
    pub sim_config: Option<PathBuf>,
    #[arg(long = "population-size")]
    pub population_size: Option<usize>,
    /// Folds for the cross-validated correlation.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Pick both θs of a ratio of mean ratios by a joint bootstrap grid search.
    #[arg(long = "joint-theta-grid")]
    pub joint_theta_grid: bool,
}

/// The same settings as they appear in a config file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    input: Option<PathBuf>,
    metric: Option<String>,
    response: Option<Vec<String>>,
    features: Option<Vec<String>>,
    fit_mode: Option<Vec<String>>,
    g: Option<String>,
    theta: Option<f64>,
    buckets: Option<usize>,
    level: Option<f64>,
    sizes: Option<Vec<usize>>,
    replicates: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    scenario: Option<String>,
    sim_config: Option<PathBuf>,
    population_size: Option<usize>,
    folds: Option<usize>,
    joint_theta_grid: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub metric: String,
    pub responses: Vec<String>,
    pub features: Vec<String>,
    pub fit_modes: Vec<FitMode>,
    pub g: GTransform,
    pub theta: Option<f64>,
    pub buckets: usize,
    pub level: f64,
    pub sizes: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    /// Seed given explicitly; replaces the simulation config's own seed.
    pub seed_override: Option<u64>,
    pub out: PathBuf,
    pub scenario: Option<String>,
    pub sim_config: Option<PathBuf>,
    pub population_size: Option<usize>,
    pub folds: usize,
    pub joint_theta_grid: bool,
}

fn vec_or(flag: Vec<String>, file: Option<Vec<String>>) -> Vec<String> {
    if flag.is_empty() {
        file.unwrap_or_default()
    } else {
        flag
    }
}

impl RunConfig {
    pub fn resolve(flags: Flags, file: FileConfig) -> Result<Self, CliError> {
        let modes = vec_or(flags.fit_mode, file.fit_mode);
        let fit_modes = if modes.is_empty() {
            FitMode::ALL.to_vec()
        } else {
            modes
                .iter()
                .map(|m| FitMode::parse(m).ok_or_else(|| CliError::Config(format!("unknown fit mode `{m}`"))))
                .collect::<Result<_, _>>()?
        };
        let g = match flags.g.or(file.g).as_deref() {
            None | Some("identity") => GTransform::Identity,
            Some("log") => GTransform::Log,
            Some(other) => return Err(CliError::Config(format!("unknown transform `{other}`"))),
        };
        let sizes = if flags.sizes.is_empty() {
            file.sizes.unwrap_or_else(|| vec![500, 2000, 10_000])
        } else {
            flags.sizes
        };
        let rc = RunConfig {
            input: flags.input.or(file.input),
            metric: flags.metric.or(file.metric).unwrap_or_else(|| "mean_ratio".into()),
            responses: vec_or(flags.response, file.response),
            features: vec_or(flags.features, file.features),
            fit_modes,
            g,
            theta: flags.theta.or(file.theta),
            buckets: flags.buckets.or(file.buckets).unwrap_or(50),
            level: flags.level.or(file.level).unwrap_or(0.95),
            sizes,
            replicates: flags.replicates.or(file.replicates).unwrap_or(1000),
            seed: flags.seed.or(file.seed).unwrap_or(1),
            seed_override: flags.seed.or(file.seed),
            out: flags.out.or(file.out).unwrap_or_else(|| PathBuf::from("out")),
            scenario: flags.scenario.or(file.scenario),
            sim_config: flags.sim_config.or(file.sim_config),
            population_size: flags.population_size.or(file.population_size),
            folds: flags.folds.or(file.folds).unwrap_or(DEFAULT_FOLDS),
            joint_theta_grid: flags.joint_theta_grid || file.joint_theta_grid.unwrap_or(false),
        };
        if rc.theta.is_some_and(|t| !t.is_finite()) {
            return Err(CliError::Config("--theta must be finite".into()));
        }
        if rc.sizes.is_empty() || rc.sizes.contains(&0) {
            return Err(CliError::Config("--sizes must list positive sample sizes".into()));
        }
        Ok(rc)
    }

    pub fn input(&self) -> Result<&Path, CliError> {
        self.input
            .as_deref()
            .ok_or_else(|| CliError::Config("--input is required for this subcommand".into()))
    }

    /// Responses, defaulting to the simulated ones.
    pub fn simulated_responses(&self) -> Vec<String> {
        if self.responses.is_empty() {
            match self.metric.as_str() {
                "ratio_of_mean_ratios" => vec!["obs_interact".into(), "imp_count".into()],
                _ => RESPONSES.iter().map(|s| s.to_string()).collect(),
            }
        } else {
            self.responses.clone()
        }
    }

    /// Features, defaulting to those of the simulation config.
    pub fn simulated_features(&self, sim: &SimulationConfig) -> Vec<String> {
        if self.features.is_empty() {
            sim.features.iter().map(|f| f.name.clone()).collect()
        } else {
            self.features.clone()
        }
    }

    /// One metric per response, or per numerator/denominator pair.
    pub fn metrics(&self, responses: &[String]) -> Result<Vec<MetricSpec>, CliError> {
        if responses.is_empty() {
            return Err(CliError::Config("--response is required".into()));
        }
        let single = |f: &dyn Fn(&str) -> MetricSpec| Ok(responses.iter().map(|r| f(r)).collect());
        match self.metric.as_str() {
            "g_difference" => single(&|r| MetricSpec::g_difference(r, self.g.clone())),
            "mean_ratio" => single(&|r| MetricSpec::mean_ratio(r)),
            "sum_ratio" => single(&|r| MetricSpec::sum_ratio(r)),
            "ratio_of_mean_ratios" => {
                if responses.len() % 2 != 0 {
                    return Err(CliError::Config(
                        "ratio_of_mean_ratios needs numerator,denominator response pairs".into(),
                    ));
                }
                Ok(responses
                    .chunks(2)
                    .map(|p| MetricSpec::ratio_of_mean_ratios(&p[0], &p[1]))
                    .collect())
            }
            other => Err(CliError::Config(format!("unknown metric `{other}`"))),
        }
    }

    /// Simulation config from `--sim-config` or `--scenario`, with
    /// `--seed` and `--population-size` applied on top.
    pub fn simulation(&self) -> Result<SimulationConfig, CliError> {
        let mut cfg = match (&self.sim_config, &self.scenario) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                SimulationConfig::from_toml(&text)?
            }
            (None, Some(name)) => Scenario::parse(name)
                .ok_or_else(|| CliError::Config(format!("unknown scenario `{name}`")))?
                .config(),
            (None, None) => Scenario::Default.config(),
        };
        if let Some(seed) = self.seed_override {
            cfg.seed = seed;
        }
        if let Some(n) = self.population_size {
            cfg.population_size = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
