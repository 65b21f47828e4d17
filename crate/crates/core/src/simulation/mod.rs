//! Seeded synthetic experiments for validating the estimators.

pub mod config;
pub mod generator;
pub mod sweeps;

pub use config::{covariance_from, Coefficients, FeatureSpec, ImpressionLaw, Scenario, SimulationConfig};
pub use generator::{
    generate_population, generate_population_detailed, sample_experiment, sample_poisson, sample_random_effects,
    sample_ztp, GeneratedPopulation, AMOUNT, IMPRESSIONS, INTERACTIONS, RESPONSES,
};
pub use sweeps::{
    adjustment_bias_sweep, ci_convergence_sweep, imbalance_report, replicate_seed, replication_sweep, BiasSummary,
    CiRow, ImbalanceReport, ImbalanceRow, ReplicationReport, ReplicationRow, Summary, SweepConfig,
};
