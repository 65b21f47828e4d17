//! Synthetic populations and experiment samples.
//!
//! Per unit: categorical features, a fair-coin arm, correlated normal random
//! effects `(ε₁, ε₂, ε₃)`, then
//!
//! - impressions with mean `μ₁ = exp(Xβ₁ + effect₁·W + ε₁)`,
//! - an exponential amount with mean `μ₂ = exp(Xβ₂ + effect₂·W + ε₂)` per impression,
//! - a Bernoulli interaction with probability `logit⁻¹(Xβ₃ + effect₃·W + ε₃)` per impression.
//!
//! Units are generated in fixed-size chunks, each with its own derived seed,
//! so output does not depend on the thread count.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::config::{ImpressionLaw, SimulationConfig};
use crate::error::{Error, Result};
use crate::metrics::{Arm, DatasetColumns, ExperimentDataset, FeatureColumn};
use crate::stats;

pub const IMPRESSIONS: &str = "imp_count";
pub const AMOUNT: &str = "obs_amount";
pub const INTERACTIONS: &str = "obs_interact";
pub const RESPONSES: [&str; 3] = [IMPRESSIONS, AMOUNT, INTERACTIONS];

const CHUNK: usize = 4096;

/// Uniform draw in (0, 1].
fn open_unit(rng: &mut impl Rng) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Inverse-CDF walk over `k = start, start + 1, …` given the log of the
/// first probability mass.
fn inverse_cdf_walk(mu: f64, start: u64, log_p_start: f64, rng: &mut impl Rng) -> u64 {
    let u = rng.random::<f64>();
    let mut k = start;
    let mut p = log_p_start.exp();
    let mut cdf = p;
    // Past this point the remaining mass is negligible; also guards rounding.
    let cap = (mu + 40.0 * mu.sqrt() + 100.0) as u64;
    while u > cdf && k < cap {
        k += 1;
        p *= mu / k as f64;
        cdf += p;
    }
    k
}

/// Zero-truncated Poisson draw: Poisson(μ) conditioned on being at least 1.
pub fn sample_ztp(mu: f64, rng: &mut impl Rng) -> u64 {
    debug_assert!(mu > 0.0);
    let log_p1 = -mu + mu.ln() - (-(-mu).exp_m1()).ln();
    inverse_cdf_walk(mu, 1, log_p1, rng)
}

pub fn sample_poisson(mu: f64, rng: &mut impl Rng) -> u64 {
    if mu <= 0.0 {
        return 0;
    }
    inverse_cdf_walk(mu, 0, -mu, rng)
}

/// Draws `(ε₁, ε₂, ε₃) = L z` with `z` standard normal.
fn random_effects(l: &[[f64; 3]; 3], rng: &mut impl Rng) -> [f64; 3] {
    let z: [f64; 3] = [
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    ];
    let mut e = [0.0; 3];
    for i in 0..3 {
        e[i] = (0..=i).map(|k| l[i][k] * z[k]).sum();
    }
    e
}

/// `n` random-effect vectors from the configured covariance.
pub fn sample_random_effects(cfg: &SimulationConfig, n: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    let l = cfg.cholesky()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| random_effects(&l, &mut rng)).collect())
}

fn categorical(probabilities: &[f64], rng: &mut impl Rng) -> usize {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Only reached through rounding in the cumulative sum.
    probabilities.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Unit {
    index: usize,
    arm: Arm,
    levels: Vec<usize>,
    responses: [f64; 3],
}

/// Returns the unit's arm, and the unit itself unless it drew zero impressions.
fn generate_unit(cfg: &SimulationConfig, l: &[[f64; 3]; 3], index: usize, rng: &mut impl Rng) -> (Arm, Option<Unit>) {
    let levels: Vec<usize> = cfg.features.iter().map(|f| categorical(&f.probabilities, rng)).collect();
    let arm = if rng.random::<f64>() < 0.5 { Arm::Treatment } else { Arm::Control };
    let w = f64::from(arm.indicator());
    let e = random_effects(l, rng);
    let mu1 = (cfg.beta1.linear_predictor(&levels) + cfg.effect1 * w + e[0]).exp();
    let mu2 = (cfg.beta2.linear_predictor(&levels) + cfg.effect2 * w + e[1]).exp();
    let p3 = logistic(cfg.beta3.linear_predictor(&levels) + cfg.effect3 * w + e[2]);
    let impressions = match cfg.impression_law {
        ImpressionLaw::ZeroTruncatedPoisson => sample_ztp(mu1, rng),
        ImpressionLaw::Poisson => sample_poisson(mu1, rng),
    };
    if impressions == 0 {
        return (arm, None);
    }
    let mut amount = 0.0;
    let mut interactions = 0u64;
    for _ in 0..impressions {
        amount += -mu2 * open_unit(rng).ln();
        interactions += u64::from(rng.random::<f64>() < p3);
    }
    let unit = Unit {
        index,
        arm,
        levels,
        responses: [impressions as f64, amount, interactions as f64],
    };
    (arm, Some(unit))
}

/// A generated population together with how many units were drawn and
/// dropped (zero impressions) per arm, indexed by the arm indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPopulation {
    pub data: ExperimentDataset,
    pub drawn: [usize; 2],
    pub dropped: [usize; 2],
}

impl GeneratedPopulation {
    pub fn dropped_fraction(&self, arm: Arm) -> f64 {
        let i = arm.indicator() as usize;
        self.dropped[i] as f64 / self.drawn[i].max(1) as f64
    }
}

pub fn generate_population(cfg: &SimulationConfig) -> Result<ExperimentDataset> {
    Ok(generate_population_detailed(cfg)?.data)
}

pub fn generate_population_detailed(cfg: &SimulationConfig) -> Result<GeneratedPopulation> {
    cfg.validate()?;
    let l = cfg.cholesky()?;
    let n = cfg.population_size;
    let chunks: Vec<(Vec<Unit>, [usize; 2], [usize; 2])> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(stats::derive_seed(cfg.seed, c as u64));
            let mut units = Vec::with_capacity(CHUNK);
            let mut drawn = [0usize; 2];
            let mut dropped = [0usize; 2];
            for index in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let (arm, unit) = generate_unit(cfg, &l, index, &mut rng);
                let a = arm.indicator() as usize;
                drawn[a] += 1;
                match unit {
                    Some(u) => units.push(u),
                    None => dropped[a] += 1,
                }
            }
            (units, drawn, dropped)
        })
        .collect();

    let mut drawn = [0usize; 2];
    let mut dropped = [0usize; 2];
    let mut cols = DatasetColumns::default();
    let mut responses: [Vec<f64>; 3] = Default::default();
    let mut level_codes: Vec<Vec<u32>> = vec![Vec::new(); cfg.features.len()];
    for (units, d, x) in chunks {
        for a in 0..2 {
            drawn[a] += d[a];
            dropped[a] += x[a];
        }
        for u in units {
            cols.unit_ids.push(format!("u{:06}", u.index));
            cols.arms.push(u.arm);
            for (k, r) in u.responses.iter().enumerate() {
                responses[k].push(*r);
            }
            for (k, &lvl) in u.levels.iter().enumerate() {
                level_codes[k].push(lvl as u32);
            }
        }
    }
    cols.responses = RESPONSES
        .iter()
        .zip(responses)
        .map(|(name, values)| (name.to_string(), values))
        .collect();
    cols.features = cfg
        .features
        .iter()
        .zip(level_codes)
        .map(|(f, codes)| FeatureColumn {
            name: f.name.clone(),
            levels: f.levels.clone(),
            codes,
        })
        .collect();
    let data = ExperimentDataset::from_columns(cols).map_err(|e| match e {
        Error::EmptyArm(arm) => Error::InvalidConfig(format!("population has no {arm} units")),
        other => other,
    })?;
    Ok(GeneratedPopulation { data, drawn, dropped })
}

/// Simple random sample of `n` units without replacement, kept in
/// population order.
pub fn sample_experiment(population: &ExperimentDataset, n: usize, seed: u64) -> Result<ExperimentDataset> {
    if n > population.len() {
        return Err(Error::SampleTooLarge {
            requested: n,
            available: population.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = index::sample(&mut rng, population.len(), n).into_vec();
    rows.sort_unstable();
    population.subset(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ztp_mean_matches_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mu in [0.3, 2.0, 12.0] {
            let draws: Vec<f64> = (0..1_000_000).map(|_| sample_ztp(mu, &mut rng) as f64).collect();
            assert!(draws.iter().all(|&k| k >= 1.0));
            let mean = stats::mean(&draws);
            let se = stats::std_dev(&draws) / (draws.len() as f64).sqrt();
            let expect = mu / (1.0 - (-mu).exp());
            assert!((mean - expect).abs() < 3.0 * se, "mu {mu}: {mean} vs {expect}");
        }
    }

    #[test]
    fn poisson_mean_matches_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws: Vec<f64> = (0..200_000).map(|_| sample_poisson(3.5, &mut rng) as f64).collect();
        let se = (3.5f64 / draws.len() as f64).sqrt();
        assert!((stats::mean(&draws) - 3.5).abs() < 3.0 * se);
        assert_eq!(sample_poisson(0.0, &mut rng), 0);
    }

    #[test]
    fn categorical_respects_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 3];
        for _ in 0..100_000 {
            counts[categorical(&[0.2, 0.0, 0.8], &mut rng)] += 1;
        }
        assert_eq!(counts[1], 0);
        assert!((counts[0] as f64 / 1e5 - 0.2).abs() < 0.01);
    }
}
