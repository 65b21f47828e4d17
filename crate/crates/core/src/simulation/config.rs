//! Generative-model parameters and the shipped scenarios.
//!
//! Configs are TOML documents. The random-effect covariance is given as a
//! row-major list of nine numbers.
//!
//! ```toml
//! population_size = 100000
//! seed = 20240501
//! impression_law = "zero_truncated_poisson"
//! effect1 = 0.05
//! effect2 = 0.05
//! effect3 = 0.1
//! random_effect_covariance = [0.22, 0.066, 0.066, 0.066, 0.08, 0.04, 0.066, 0.04, 0.22]
//!
//! [[features]]
//! name = "gender"
//! levels = ["female", "male"]
//! probabilities = [0.5, 0.5]
//!
//! [beta1]
//! intercept = 1.5
//! features = [[0.0, 0.4]]
//! # beta2 and beta3 follow the same shape
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub levels: Vec<String>,
    pub probabilities: Vec<f64>,
}

/// Linear predictor: an intercept plus one coefficient per level of each
/// feature, in the order of [`SimulationConfig::features`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    pub intercept: f64,
    pub features: Vec<Vec<f64>>,
}

impl Coefficients {
    pub fn linear_predictor(&self, levels: &[usize]) -> f64 {
        self.intercept
            + self
                .features
                .iter()
                .zip(levels)
                .map(|(b, &l)| b[l])
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpressionLaw {
    /// Every unit has at least one impression, so all units are observed.
    ZeroTruncatedPoisson,
    /// Units drawing zero impressions are dropped from the dataset.
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub population_size: usize,
    pub seed: u64,
    pub impression_law: ImpressionLaw,
    pub features: Vec<FeatureSpec>,
    /// Log-mean of impressions.
    pub beta1: Coefficients,
    /// Log-mean of the amount per impression.
    pub beta2: Coefficients,
    /// Logit of the interaction probability per impression.
    pub beta3: Coefficients,
    pub effect1: f64,
    pub effect2: f64,
    pub effect3: f64,
    pub random_effect_covariance: Vec<f64>,
}

/// Named configurations shipped with the library.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Features predict every response with cross-validated correlation near 0.7.
    Default,
    /// Features carry no signal.
    NoPower,
    /// Poisson impressions with a treatment effect on them, so which units
    /// appear depends on the arm.
    Bias,
    /// Small random effects; correlation near 0.95.
    HighPower,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Default, Scenario::NoPower, Scenario::Bias, Scenario::HighPower];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Default => "default",
            Scenario::NoPower => "no_power",
            Scenario::Bias => "bias",
            Scenario::HighPower => "high_power",
        }
    }

    pub fn parse(s: &str) -> Option<Scenario> {
        Scenario::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn config(self) -> SimulationConfig {
        match self {
            Scenario::Default => SimulationConfig::default_scenario(),
            Scenario::NoPower => SimulationConfig::no_power(),
            Scenario::Bias => SimulationConfig::bias(),
            Scenario::HighPower => SimulationConfig::high_power(),
        }
    }
}

/// Covariance matrix (row-major) from standard deviations and the three
/// pairwise correlations (1-2, 1-3, 2-3).
pub fn covariance_from(sd: [f64; 3], cor: [f64; 3]) -> Vec<f64> {
    let [r12, r13, r23] = cor;
    let c = |i: usize, j: usize, r: f64| r * sd[i] * sd[j];
    vec![
        sd[0] * sd[0],
        c(0, 1, r12),
        c(0, 2, r13),
        c(0, 1, r12),
        sd[1] * sd[1],
        c(1, 2, r23),
        c(0, 2, r13),
        c(1, 2, r23),
        sd[2] * sd[2],
    ]
}

fn coefficients(intercept: f64, country: [f64; 5], gender: [f64; 2]) -> Coefficients {
    Coefficients {
        intercept,
        features: vec![country.to_vec(), gender.to_vec()],
    }
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl SimulationConfig {
    /// Calibrated so that country + gender cell means reach a
    /// cross-validated correlation of about 0.7 for every response.
    pub fn default_scenario() -> Self {
        SimulationConfig {
            population_size: 100_000,
            seed: 20_240_501,
            impression_law: ImpressionLaw::ZeroTruncatedPoisson,
            features: vec![
                FeatureSpec {
                    name: "country".into(),
                    levels: strings(&["us", "uk", "de", "jp", "br"]),
                    probabilities: vec![0.3, 0.25, 0.2, 0.15, 0.1],
                },
                FeatureSpec {
                    name: "gender".into(),
                    levels: strings(&["female", "male"]),
                    probabilities: vec![0.5, 0.5],
                },
            ],
            beta1: coefficients(1.5, [0.0, 0.5, 1.0, 1.5, -0.5], [0.0, 0.4]),
            beta2: coefficients(0.0, [0.0, 0.3, 0.6, 0.9, -0.3], [0.0, 0.3]),
            beta3: coefficients(-1.0, [0.0, 0.4, 0.8, 1.2, -0.4], [0.0, 0.3]),
            effect1: 0.05,
            effect2: 0.05,
            effect3: 0.1,
            random_effect_covariance: covariance_from(
                [0.22f64.sqrt(), 0.08f64.sqrt(), 0.22f64.sqrt()],
                [0.5, 0.3, 0.3],
            ),
        }
    }

    /// Default scenario with every feature coefficient set to zero.
    pub fn no_power() -> Self {
        let mut cfg = Self::default_scenario();
        for beta in [&mut cfg.beta1, &mut cfg.beta2, &mut cfg.beta3] {
            for level_coefs in &mut beta.features {
                level_coefs.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        cfg
    }

    /// Poisson impressions at a low baseline with a large impression effect.
    pub fn bias() -> Self {
        let mut cfg = Self::default_scenario();
        cfg.impression_law = ImpressionLaw::Poisson;
        cfg.beta1.intercept = -1.0;
        cfg.effect1 = 0.5;
        cfg
    }

    /// Default scenario with much smaller random effects.
    pub fn high_power() -> Self {
        let mut cfg = Self::default_scenario();
        cfg.random_effect_covariance = covariance_from([0.05, 0.05, 0.05], [0.5, 0.3, 0.3]);
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SimulationConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.population_size == 0 {
            return bad("population_size must be positive".into());
        }
        if self.features.is_empty() {
            return bad("at least one feature is required".into());
        }
        for f in &self.features {
            if f.levels.is_empty() || f.levels.len() != f.probabilities.len() {
                return bad(format!(
                    "feature `{}` needs one probability per level",
                    f.name
                ));
            }
            if f.probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return bad(format!("feature `{}` has an invalid probability", f.name));
            }
            let total: f64 = f.probabilities.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return bad(format!(
                    "probabilities of feature `{}` sum to {total}, not 1",
                    f.name
                ));
            }
        }
        for (label, beta) in [("beta1", &self.beta1), ("beta2", &self.beta2), ("beta3", &self.beta3)] {
            if beta.features.len() != self.features.len() {
                return bad(format!(
                    "{label} has {} feature blocks, expected {}",
                    beta.features.len(),
                    self.features.len()
                ));
            }
            for (b, f) in beta.features.iter().zip(&self.features) {
                if b.len() != f.levels.len() {
                    return bad(format!(
                        "{label} has {} coefficients for feature `{}` with {} levels",
                        b.len(),
                        f.name,
                        f.levels.len()
                    ));
                }
            }
            if !beta.intercept.is_finite() || beta.features.iter().flatten().any(|b| !b.is_finite()) {
                return bad(format!("{label} has a non-finite coefficient"));
            }
        }
        if ![self.effect1, self.effect2, self.effect3].iter().all(|e| e.is_finite()) {
            return bad("effects must be finite".into());
        }
        self.cholesky().map(|_| ())
    }

    /// Lower Cholesky factor of the random-effect covariance, allowing
    /// semi-definite matrices.
    pub fn cholesky(&self) -> Result<[[f64; 3]; 3]> {
        let c = &self.random_effect_covariance;
        if c.len() != 9 || c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "random_effect_covariance must hold 9 finite numbers".into(),
            ));
        }
        let m = |i: usize, j: usize| c[3 * i + j];
        let scale = (0..3).map(|i| m(i, i).abs()).fold(1e-300, f64::max);
        for i in 0..3 {
            for j in 0..i {
                if (m(i, j) - m(j, i)).abs() > 1e-12 * scale {
                    return Err(Error::InvalidConfig("covariance matrix is not symmetric".into()));
                }
            }
        }
        let tol = 1e-12 * scale;
        let mut l = [[0.0; 3]; 3];
        for j in 0..3 {
            let d = m(j, j) - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
            if d < -tol {
                return Err(Error::InvalidConfig(
                    "covariance matrix is not positive semi-definite".into(),
                ));
            }
            let d = d.max(0.0).sqrt();
            l[j][j] = d;
            for i in j + 1..3 {
                let s = m(i, j) - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
                if d > 0.0 {
                    l[i][j] = s / d;
                } else if s.abs() > tol {
                    return Err(Error::InvalidConfig(
                        "covariance matrix is not positive semi-definite".into(),
                    ));
                }
            }
        }
        Ok(l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_scenarios_are_valid() {
        for s in Scenario::ALL {
            s.config().validate().unwrap();
            assert_eq!(Scenario::parse(s.name()), Some(s));
        }
    }

    #[test]
    fn toml_round_trip() {
        let cfg = SimulationConfig::default_scenario();
        let text = cfg.to_toml().unwrap();
        assert_eq!(SimulationConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut cfg = SimulationConfig::default_scenario();
        cfg.features[0].probabilities[0] = 0.5;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));

        let mut cfg = SimulationConfig::default_scenario();
        cfg.random_effect_covariance = vec![1.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));

        let mut cfg = SimulationConfig::default_scenario();
        cfg.random_effect_covariance[1] += 0.01;
        assert!(cfg.validate().is_err());

        let mut cfg = SimulationConfig::default_scenario();
        cfg.beta2.features[1].push(0.0);
        assert!(cfg.validate().is_err());

        assert!(SimulationConfig::from_toml("population_size = 'x'").is_err());
    }

    #[test]
    fn semi_definite_covariance_is_accepted() {
        let mut cfg = SimulationConfig::default_scenario();
        cfg.random_effect_covariance = vec![0.0; 9];
        assert_eq!(cfg.cholesky().unwrap(), [[0.0; 3]; 3]);
        cfg.random_effect_covariance = covariance_from([1.0, 1.0, 0.5], [1.0, 0.0, 0.0]);
        let l = cfg.cholesky().unwrap();
        assert_eq!(l[1][0], 1.0);
        assert_eq!(l[1][1], 0.0);
    }
}
