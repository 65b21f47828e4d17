//! Variance forecasts, delta-method variance of adjusted estimators, and
//! bucketed jackknife confidence intervals.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::adjustment::MomentSummary;
use crate::error::{Error, Result};
use crate::metrics::{ExperimentDataset, GTransform};
use crate::stats;

/// What a predictor with correlation `rho` buys: variance and standard
/// deviation ratios, CI shortening, and the equivalent sample-size multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceForecast {
    pub rho: f64,
    pub var_ratio: f64,
    pub sd_ratio: f64,
    pub ci_reduction: f64,
    pub equivalent_sample_multiplier: f64,
}

pub fn variance_forecast(rho: f64) -> Result<VarianceForecast> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::RhoOutOfRange(rho));
    }
    let var_ratio = (1.0 - rho * rho).max(0.0);
    let sd_ratio = var_ratio.sqrt();
    let ci_reduction = 1.0 - sd_ratio;
    let equivalent_sample_multiplier = if sd_ratio > 0.0 {
        1.0 / (sd_ratio * sd_ratio)
    } else {
        f64::INFINITY
    };
    Ok(VarianceForecast {
        rho,
        var_ratio,
        sd_ratio,
        ci_reduction,
        equivalent_sample_multiplier,
    })
}

/// Sample-size multiplier `k` giving the same CI shortening: `1 − 1/√k = r`.
pub fn sample_size_equivalent(ci_reduction: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&ci_reduction) {
        return Err(Error::ReductionOutOfRange(ci_reduction));
    }
    let keep = 1.0 - ci_reduction;
    Ok(1.0 / (keep * keep))
}

/// Delta-method variance of the adjusted g-difference as a quadratic
/// `a θ² + b θ + c` in θ. Arm means enter with unit-level moments divided by
/// the arm size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaQuadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl DeltaQuadratic {
    pub fn new(m: &MomentSummary, g: &GTransform) -> Self {
        let mut q = DeltaQuadratic { a: 0.0, b: 0.0, c: 0.0 };
        for arm in [&m.treatment, &m.control] {
            let n = arm.n as f64;
            let gy = g.derivative(arm.mean_y);
            let gh = g.derivative(arm.mean_h);
            q.a += gh * gh * arm.sd_h * arm.sd_h / n;
            q.b -= 2.0 * gh * gy * arm.cov_yh / n;
            q.c += gy * gy * arm.sd_y * arm.sd_y / n;
        }
        q
    }

    pub fn eval(&self, theta: f64) -> f64 {
        (self.a * theta + self.b) * theta + self.c
    }

    /// Minimizer `−b / 2a`, or 0 when the quadratic is flat.
    pub fn argmin(&self) -> f64 {
        if self.a > 0.0 {
            -self.b / (2.0 * self.a)
        } else {
            0.0
        }
    }

    /// Variance removed at the optimum: `b² / 4a`.
    pub fn delta(&self) -> f64 {
        if self.a > 0.0 {
            self.b * self.b / (4.0 * self.a)
        } else {
            0.0
        }
    }

    pub fn minimum(&self) -> f64 {
        self.c - self.delta()
    }
}

/// Delta-method variance of `g(Ȳ_t) − g(Ȳ_c) − θ (g(f̄_t) − g(f̄_c))`.
pub fn delta_variance_gdiff(moments: &MomentSummary, g: &GTransform, theta: f64) -> f64 {
    DeltaQuadratic::new(moments, g).eval(theta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JackknifeConfig {
    pub bucket_count: usize,
    pub confidence_level: f64,
}

impl Default for JackknifeConfig {
    fn default() -> Self {
        JackknifeConfig {
            bucket_count: 50,
            confidence_level: 0.95,
        }
    }
}

impl JackknifeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bucket_count < 2 {
            return Err(Error::InvalidParameter(format!(
                "jackknife needs at least 2 buckets, got {}",
                self.bucket_count
            )));
        }
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "confidence level {} must lie in (0, 1)",
                self.confidence_level
            )));
        }
        Ok(())
    }

    /// Two-sided normal quantile for the configured level.
    pub fn z(&self) -> f64 {
        let normal = Normal::standard();
        normal.inverse_cdf(0.5 + self.confidence_level / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceInterval {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub se: f64,
    pub level: f64,
    /// Buckets whose leave-one-out estimate failed and were left out.
    pub skipped_buckets: Vec<usize>,
}

impl ConfidenceInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    /// Whether `self` lies within `other`.
    pub fn is_within(&self, other: &ConfidenceInterval) -> bool {
        other.lower <= self.lower && self.upper <= other.upper
    }
}

/// Bucket of every unit: FNV-1a of its id modulo the bucket count.
pub fn bucket_assignment(data: &ExperimentDataset, bucket_count: usize) -> Vec<usize> {
    data.unit_ids()
        .iter()
        .map(|id| (stats::fnv1a64(id.as_bytes()) % bucket_count as u64) as usize)
        .collect()
}

/// Leave-one-bucket-out jackknife for an estimator returning several values
/// at once, so that related estimates share each subset. Returns one
/// interval per returned value, centered on the full-sample estimate.
///
/// Up to 2% of the buckets may fail on their leave-one-out subset; those are
/// dropped from the variance. More failures are an error.
pub fn jackknife_ci_multi<F>(
    data: &ExperimentDataset,
    estimator: F,
    cfg: &JackknifeConfig,
) -> Result<Vec<ConfidenceInterval>>
where
    F: Fn(&ExperimentDataset) -> Result<Vec<f64>> + Sync,
{
    cfg.validate()?;
    let b = cfg.bucket_count;
    let bucket = bucket_assignment(data, b);
    let mut members = vec![Vec::new(); b];
    for (row, &k) in bucket.iter().enumerate() {
        members[k].push(row);
    }
    if let Some(empty) = members.iter().position(Vec::is_empty) {
        return Err(Error::EmptyBucket(empty));
    }
    let point = estimator(data)?;

    let leave_out: Vec<Result<Vec<f64>>> = (0..b)
        .into_par_iter()
        .map(|k| {
            let rows: Vec<usize> = (0..data.len()).filter(|&r| bucket[r] != k).collect();
            let est = estimator(&data.subset(&rows)?)?;
            if est.len() != point.len() {
                return Err(Error::InvalidParameter(
                    "estimator returned a different number of values on a subset".into(),
                ));
            }
            if let Some(v) = est.iter().find(|v| !v.is_finite()) {
                return Err(Error::DomainViolation(format!("estimate {v} is not finite")));
            }
            Ok(est)
        })
        .collect();

    let mut skipped = Vec::new();
    let mut first_failure = None;
    let mut ok = Vec::with_capacity(b);
    for (k, r) in leave_out.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                skipped.push(k);
                first_failure.get_or_insert(e.to_string());
            }
        }
    }
    if skipped.len() as f64 > 0.02 * b as f64 || ok.len() < 2 {
        return Err(Error::EstimatorDomainViolation {
            failed: skipped.len(),
            buckets: b,
            message: first_failure.unwrap_or_default(),
        });
    }

    let used = ok.len() as f64;
    let z = cfg.z();
    Ok(point
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let values: Vec<f64> = ok.iter().map(|v| v[j]).collect();
            let m = stats::mean(&values);
            let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
            let se = ((used - 1.0) / used * ss).sqrt();
            ConfidenceInterval {
                point: p,
                lower: p - z * se,
                upper: p + z * se,
                se,
                level: cfg.confidence_level,
                skipped_buckets: skipped.clone(),
            }
        })
        .collect())
}

/// Bucketed jackknife CI for a scalar estimator.
pub fn jackknife_ci<F>(data: &ExperimentDataset, estimator: F, cfg: &JackknifeConfig) -> Result<ConfidenceInterval>
where
    F: Fn(&ExperimentDataset) -> Result<f64> + Sync,
{
    let mut cis = jackknife_ci_multi(data, |d| estimator(d).map(|v| vec![v]), cfg)?;
    Ok(cis.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjustment::{optimal_theta_two_arm, ArmMoments};
    use crate::metrics::tests::two_arm;
    use crate::metrics::{self, Arm};
    use proptest::prelude::*;

    #[test]
    fn forecast_examples() {
        assert!((variance_forecast(0.6).unwrap().ci_reduction - 0.20).abs() < 1e-12);
        assert!((variance_forecast(0.8).unwrap().ci_reduction - 0.40).abs() < 1e-12);
        let zero = variance_forecast(0.0).unwrap();
        assert_eq!(zero.ci_reduction, 0.0);
        assert_eq!(zero.equivalent_sample_multiplier, 1.0);
        assert!(matches!(variance_forecast(1.2), Err(Error::RhoOutOfRange(_))));
    }

    #[test]
    fn sample_size_examples() {
        assert!((sample_size_equivalent(0.2).unwrap() - 1.5625).abs() < 1e-12);
        assert!((sample_size_equivalent(0.4).unwrap() - 2.78).abs() < 0.01);
        assert_eq!(sample_size_equivalent(0.0).unwrap(), 1.0);
        assert!(matches!(sample_size_equivalent(1.0), Err(Error::ReductionOutOfRange(_))));
    }

    fn summary(cov_t: f64, cov_c: f64, sh_t: f64, sh_c: f64, n_t: usize, n_c: usize) -> MomentSummary {
        let arm = |cov: f64, sh: f64, n: usize, my: f64, mh: f64| ArmMoments {
            n,
            mean_y: my,
            mean_h: mh,
            sd_y: 2.0,
            sd_h: sh,
            cov_yh: cov,
            cor_yh: cov / (2.0 * sh),
        };
        MomentSummary {
            treatment: arm(cov_t, sh_t, n_t, 3.0, 2.5),
            control: arm(cov_c, sh_c, n_c, 2.8, 2.4),
        }
    }

    #[test]
    fn quadratic_at_zero_is_raw_variance() {
        let m = summary(1.0, 0.8, 1.2, 1.1, 100, 80);
        let q = DeltaQuadratic::new(&m, &GTransform::Identity);
        assert_eq!(delta_variance_gdiff(&m, &GTransform::Identity, 0.0), q.c);
        assert!((q.c - (4.0 / 100.0 + 4.0 / 80.0)).abs() < 1e-15);
    }

    #[test]
    fn constant_estimator_has_zero_width() {
        let ys: Vec<f64> = (0..200).map(f64::from).collect();
        let d = two_arm(&ys, &ys);
        let ci = jackknife_ci(&d, |_| Ok(4.2), &JackknifeConfig::default()).unwrap();
        assert_eq!(ci.width(), 0.0);
        assert_eq!(ci.point, 4.2);
    }

    #[test]
    fn empty_bucket_is_reported() {
        let d = two_arm(&[1.0, 2.0], &[3.0]);
        assert!(matches!(
            jackknife_ci(&d, |_| Ok(0.0), &JackknifeConfig::default()),
            Err(Error::EmptyBucket(_))
        ));
    }

    #[test]
    fn failing_subsets() {
        let ys: Vec<f64> = (1..=300).map(f64::from).collect();
        let d = two_arm(&ys, &ys);
        let cfg = JackknifeConfig::default();
        let full = d.len();
        let buckets = bucket_assignment(&d, cfg.bucket_count);
        let skip = buckets[0];
        let skip_size = buckets.iter().filter(|&&b| b == skip).count();
        // Fails only on the subset that leaves out bucket `skip`.
        let one_bad = |s: &ExperimentDataset| {
            if s.len() == full - skip_size && !s.unit_ids().contains(&d.unit_ids()[0]) {
                Err(Error::DomainViolation("bad".into()))
            } else {
                metrics::arm_mean(s, "y", Arm::Treatment)
            }
        };
        let ci = jackknife_ci(&d, one_bad, &cfg).unwrap();
        assert_eq!(ci.skipped_buckets, vec![skip]);
        let all_bad = |s: &ExperimentDataset| {
            if s.len() < full {
                Err(Error::DomainViolation("bad".into()))
            } else {
                Ok(1.0)
            }
        };
        assert!(matches!(
            jackknife_ci(&d, all_bad, &cfg),
            Err(Error::EstimatorDomainViolation { failed: 50, .. })
        ));
    }

    #[test]
    fn z_quantile() {
        assert!((JackknifeConfig::default().z() - 1.959963984540054).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn forecast_round_trip(rho in -0.999f64..0.999) {
            let f = variance_forecast(rho).unwrap();
            let k = sample_size_equivalent(f.ci_reduction).unwrap();
            prop_assert!((k - 1.0 / (1.0 - rho * rho)).abs() <= 1e-9 * k);
            prop_assert!((0.0..=1.0).contains(&f.sd_ratio));
            prop_assert!((0.0..=1.0).contains(&f.ci_reduction));
        }

        #[test]
        fn quadratic_argmin_matches_closed_form(
            cov_t in -3.0f64..3.0, cov_c in -3.0f64..3.0,
            sh_t in 0.1f64..3.0, sh_c in 0.1f64..3.0,
            n_t in 2usize..5000, n_c in 2usize..5000,
        ) {
            let m = summary(cov_t, cov_c, sh_t, sh_c, n_t, n_c);
            for g in [GTransform::Identity, GTransform::Log] {
                let q = DeltaQuadratic::new(&m, &g);
                prop_assert!(q.a >= 0.0);
                let theta = optimal_theta_two_arm(&m, &g).unwrap().theta;
                prop_assert!((q.argmin() - theta).abs() <= 1e-10 * theta.abs().max(1e-300) + 1e-15);
                let at = delta_variance_gdiff(&m, &g, theta);
                prop_assert!((at - q.minimum()).abs() <= 1e-10 * q.c);
                prop_assert!(delta_variance_gdiff(&m, &g, theta + 0.1) >= at);
            }
        }
    }
}
