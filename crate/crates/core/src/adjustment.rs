//! Prediction-adjusted estimators and the choice of the adjustment
//! coefficient θ.
//!
//! Every adjusted estimator subtracts `θ · (g(f̄_t) − g(f̄_c))` from the raw
//! g-scale estimate, where `f` is a model prediction that does not depend on
//! the unit's arm. Because `f̄_t` and `f̄_c` have the same expectation under
//! randomization, the adjustment term has zero mean and the estimator stays
//! asymptotically unbiased for any θ. θ is then picked to minimize the
//! delta-method variance of the adjusted estimator.
//!
//! Ratio metrics are adjusted on the log scale, which gives the
//! multiplicative form `τ̂ · (f̄_c / f̄_t)^θ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::inference;
use crate::metrics::{self, Arm, ExperimentDataset, GTransform, MetricSpec, MIN_POSITIVE_MEAN};
use crate::predictors::FitMode;
use crate::stats;

/// Per-unit model predictions aligned row-for-row with a dataset.
///
/// `h0` holds `h(x_i, 0)` (the prediction as if the unit were in control),
/// `h1` optionally holds `h(x_i, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub response: String,
    h0: Vec<f64>,
    h1: Option<Vec<f64>>,
    pub fit_mode: Option<FitMode>,
    pub cv_correlation: Option<f64>,
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::DomainViolation(format!(
            "{what} prediction for row {} is not finite",
            i + 1
        ))),
        None => Ok(()),
    }
}

impl PredictionSet {
    pub fn new(response: impl Into<String>, h0: Vec<f64>) -> Result<Self> {
        check_finite(&h0, "h(x, 0)")?;
        Ok(PredictionSet {
            response: response.into(),
            h0,
            h1: None,
            fit_mode: None,
            cv_correlation: None,
        })
    }

    pub fn with_treatment(mut self, h1: Vec<f64>) -> Result<Self> {
        check_finite(&h1, "h(x, 1)")?;
        if h1.len() != self.h0.len() {
            return Err(Error::MissingPredictions(format!(
                "h(x, 1) has {} values but h(x, 0) has {}",
                h1.len(),
                self.h0.len()
            )));
        }
        self.h1 = Some(h1);
        Ok(self)
    }

    pub fn with_fit_mode(mut self, mode: FitMode) -> Self {
        self.fit_mode = Some(mode);
        self
    }

    pub fn with_cv_correlation(mut self, rho: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&rho) {
            return Err(Error::RhoOutOfRange(rho));
        }
        self.cv_correlation = Some(rho);
        Ok(self)
    }

    pub fn h0(&self) -> &[f64] {
        &self.h0
    }

    pub fn h1(&self) -> Option<&[f64]> {
        self.h1.as_deref()
    }

    pub fn len(&self) -> usize {
        self.h0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h0.is_empty()
    }

    /// Predictions `h(x_i, w)` for the counterfactual arm `w`.
    pub fn for_arm(&self, w: Arm) -> Result<&[f64]> {
        match w {
            Arm::Control => Ok(&self.h0),
            Arm::Treatment => self.h1.as_deref().ok_or(Error::MissingTreatmentPredictions),
        }
    }

    fn check_covers(&self, data: &ExperimentDataset) -> Result<()> {
        if self.h0.len() != data.len() {
            return Err(Error::MissingPredictions(format!(
                "predictions for `{}` cover {} units, dataset has {}",
                self.response,
                self.h0.len(),
                data.len()
            )));
        }
        Ok(())
    }
}

/// Unit-level moments of a response `Y` and its prediction `H` within one arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmMoments {
    pub n: usize,
    pub mean_y: f64,
    pub mean_h: f64,
    pub sd_y: f64,
    pub sd_h: f64,
    pub cov_yh: f64,
    pub cor_yh: f64,
}

impl ArmMoments {
    pub fn from_rows(y: &[f64], h: &[f64], rows: &[usize]) -> Self {
        let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let hs: Vec<f64> = rows.iter().map(|&i| h[i]).collect();
        Self::from_pairs(&ys, &hs)
    }

    pub fn from_pairs(y: &[f64], h: &[f64]) -> Self {
        let sd_y = stats::std_dev(y);
        let sd_h = stats::std_dev(h);
        let cov_yh = stats::covariance(y, h);
        let cor_yh = if sd_y > 0.0 && sd_h > 0.0 {
            (cov_yh / (sd_y * sd_h)).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        ArmMoments {
            n: y.len(),
            mean_y: stats::mean(y),
            mean_h: stats::mean(h),
            sd_y,
            sd_h,
            cov_yh,
            cor_yh,
        }
    }

    /// True when the prediction carries no variation in this arm.
    pub fn predictor_is_constant(&self) -> bool {
        !(self.sd_h > f64::EPSILON * self.mean_h.abs())
    }
}

/// Moments of both arms. In the two-arm variance formulas `(Y, H)` are the
/// treatment-arm means and `(Y*, H*)` the control-arm means, so unit-level
/// (co)variances enter divided by the arm size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentSummary {
    pub control: ArmMoments,
    pub treatment: ArmMoments,
}

/// `g′` evaluated at the arm means of `Y` and `H`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GDerivatives {
    pub y_control: f64,
    pub h_control: f64,
    pub y_treatment: f64,
    pub h_treatment: f64,
}

impl MomentSummary {
    pub fn estimate(y: &[f64], h: &[f64], arms: &[Arm]) -> Result<Self> {
        let control = arms_rows(arms, Arm::Control)?;
        let treatment = arms_rows(arms, Arm::Treatment)?;
        Ok(MomentSummary {
            control: ArmMoments::from_rows(y, h, &control),
            treatment: ArmMoments::from_rows(y, h, &treatment),
        })
    }

    pub fn arm(&self, arm: Arm) -> &ArmMoments {
        match arm {
            Arm::Control => &self.control,
            Arm::Treatment => &self.treatment,
        }
    }

    /// Derivatives of `g` at the four means, after domain checks.
    pub fn g_derivatives(&self, g: &GTransform) -> Result<GDerivatives> {
        let d = |x: f64, what: &str| -> Result<f64> {
            g.check_domain(x, what)?;
            g.check_derivative(x)?;
            Ok(g.derivative(x))
        };
        Ok(GDerivatives {
            y_control: d(self.control.mean_y, "control response mean")?,
            h_control: d(self.control.mean_h, "control prediction mean")?,
            y_treatment: d(self.treatment.mean_y, "treatment response mean")?,
            h_treatment: d(self.treatment.mean_h, "treatment prediction mean")?,
        })
    }
}

fn arms_rows(arms: &[Arm], arm: Arm) -> Result<Vec<usize>> {
    let rows: Vec<usize> = arms
        .iter()
        .enumerate()
        .filter_map(|(i, &a)| (a == arm).then_some(i))
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyArm(arm));
    }
    Ok(rows)
}

/// Minimizer of `var(g(Y) − θ g(H))` for a single pair of variables:
/// `(g′(μ_Y) / g′(μ_H)) · cov(Y, H) / σ_H²`.
pub fn optimal_theta_single(
    mean_y: f64,
    mean_h: f64,
    sd_h: f64,
    cov_yh: f64,
    g: &GTransform,
) -> Result<f64> {
    if !(sd_h > 0.0) {
        return Err(Error::DegenerateVariance(
            "prediction has zero variance; use θ = 0".into(),
        ));
    }
    let gy = g.derivative(mean_y);
    let gh = g.derivative(mean_h);
    if gh == 0.0 || !gh.is_finite() || !gy.is_finite() {
        return Err(Error::DomainViolation(format!(
            "g′ at the prediction mean {mean_h} is {gh}"
        )));
    }
    Ok(gy / gh * cov_yh / (sd_h * sd_h))
}

/// θ for the two-arm adjusted estimator together with the per-arm minimizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaEstimate {
    pub theta: f64,
    /// θ₁, minimizing the variance of the control-arm term alone.
    pub theta_control: f64,
    /// θ₂, minimizing the variance of the treatment-arm term alone.
    pub theta_treatment: f64,
    pub moments: MomentSummary,
    /// θ was forced to zero because the prediction has no variance.
    pub degenerate: bool,
    /// θ was supplied by the caller instead of optimized.
    pub overridden: bool,
}

/// Numerator and denominator of the per-arm θ, with the arm-size scaling.
fn arm_theta_terms(m: &ArmMoments, gy: f64, gh: f64) -> (f64, f64) {
    if m.predictor_is_constant() {
        return (0.0, 0.0);
    }
    let n = m.n as f64;
    (gh * gy * m.cov_yh / n, gh * gh * m.sd_h * m.sd_h / n)
}

/// θ minimizing the delta-method variance of
/// `g(Ȳ_t) − θ g(f̄_t) − (g(Ȳ_c) − θ g(f̄_c))`, assuming the two arms are
/// independent.
pub fn optimal_theta_two_arm(moments: &MomentSummary, g: &GTransform) -> Result<ThetaEstimate> {
    let d = moments.g_derivatives(g)?;
    let (num_t, den_t) = arm_theta_terms(&moments.treatment, d.y_treatment, d.h_treatment);
    let (num_c, den_c) = arm_theta_terms(&moments.control, d.y_control, d.h_control);
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    let den = den_t + den_c;
    let degenerate = !(den > 0.0);
    Ok(ThetaEstimate {
        theta: ratio(num_t + num_c, den),
        theta_control: ratio(num_c, den_c),
        theta_treatment: ratio(num_t, den_t),
        moments: *moments,
        degenerate,
        overridden: false,
    })
}

/// Whether `min(θ₁, θ₂) ≤ θ ≤ max(θ₁, θ₂)`, allowing for rounding at the
/// level of 1e-12 relative.
pub fn theta_bracket_check(t: &ThetaEstimate) -> bool {
    let lo = t.theta_control.min(t.theta_treatment);
    let hi = t.theta_control.max(t.theta_treatment);
    let tol = 1e-12 * t.theta.abs().max(1.0);
    t.theta >= lo - tol && t.theta <= hi + tol
}

/// How θ is chosen for each adjusted component.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ThetaChoice {
    /// Closed-form delta-method optimum, per component.
    #[default]
    Optimal,
    /// The same fixed θ for every component.
    Fixed(f64),
    /// One fixed θ per component (numerator first).
    PerComponent(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedEstimate {
    pub metric: MetricSpec,
    pub raw: f64,
    pub adjusted: f64,
    /// One entry per adjusted component, numerator first.
    pub thetas: Vec<ThetaEstimate>,
    /// `g(f̄_t) − g(f̄_c)` per component.
    pub contrasts: Vec<f64>,
    pub rho_control: f64,
    pub rho_treatment: f64,
    pub predicted_sd_ratio: f64,
    /// `ln(adjusted) − ln(raw)` for ratio metrics, `adjusted − raw` otherwise.
    pub adjustment_log_factor: f64,
    /// Some component fell back to θ = 0 because its prediction is constant.
    pub degenerate: bool,
}

impl AdjustedEstimate {
    pub fn theta(&self) -> f64 {
        self.thetas[0].theta
    }
}

struct ComponentAdjustment {
    theta: ThetaEstimate,
    contrast: f64,
    mean_h_control: f64,
    mean_h_treatment: f64,
}

fn adjust_component(
    y: &[f64],
    h: &[f64],
    arms: &[Arm],
    g: &GTransform,
    response: &str,
    fixed: Option<f64>,
) -> Result<ComponentAdjustment> {
    let moments = MomentSummary::estimate(y, h, arms)?;
    if matches!(g, GTransform::Log) {
        for arm in Arm::BOTH {
            let m = moments.arm(arm).mean_h;
            if !(m > MIN_POSITIVE_MEAN) {
                return Err(Error::DomainViolation(format!(
                    "{arm} mean prediction for `{response}` is {m}; must be positive under g = log"
                )));
            }
        }
    }
    let mut theta = optimal_theta_two_arm(&moments, g)?;
    if let Some(v) = fixed {
        theta.theta = v;
        theta.overridden = true;
    }
    let contrast = g.eval_checked(moments.treatment.mean_h, "treatment mean prediction")?
        - g.eval_checked(moments.control.mean_h, "control mean prediction")?;
    Ok(ComponentAdjustment {
        theta,
        contrast,
        mean_h_control: moments.control.mean_h,
        mean_h_treatment: moments.treatment.mean_h,
    })
}

fn fixed_theta(choice: &ThetaChoice, k: usize, n: usize) -> Result<Option<f64>> {
    match choice {
        ThetaChoice::Optimal => Ok(None),
        ThetaChoice::Fixed(v) => Ok(Some(*v)),
        ThetaChoice::PerComponent(vs) => {
            if vs.len() != n {
                return Err(Error::InvalidParameter(format!(
                    "{} θ values given for a metric with {n} components",
                    vs.len()
                )));
            }
            Ok(Some(vs[k]))
        }
    }
}

/// Adjusted estimate of `metric` using one prediction set per metric
/// component (numerator first for two-response metrics).
///
/// A constant prediction yields θ = 0 and `adjusted == raw` exactly.
pub fn adjusted_estimate(
    data: &ExperimentDataset,
    metric: &MetricSpec,
    preds: &[PredictionSet],
    theta: &ThetaChoice,
) -> Result<AdjustedEstimate> {
    let comps = metric.components();
    if preds.len() != comps.len() {
        return Err(Error::MissingPredictions(format!(
            "metric {metric} needs {} prediction sets, got {}",
            comps.len(),
            preds.len()
        )));
    }
    for (c, p) in comps.iter().zip(preds) {
        if c.response != p.response {
            return Err(Error::MissingPredictions(format!(
                "expected predictions for `{}`, got `{}`",
                c.response, p.response
            )));
        }
        p.check_covers(data)?;
    }
    let raw = metrics::raw_estimate(data, metric)?;
    let g = metric.transform();

    let mut parts = Vec::with_capacity(comps.len());
    for (k, (c, p)) in comps.iter().zip(preds).enumerate() {
        let y = data.response(c.response)?;
        let fixed = fixed_theta(theta, k, comps.len())?;
        parts.push(adjust_component(y, p.h0(), data.arms(), &g, c.response, fixed)?);
    }

    let adjusted = if metric.is_ratio() {
        let factor: f64 = comps
            .iter()
            .zip(&parts)
            .map(|(c, p)| (p.mean_h_control / p.mean_h_treatment).powf(c.sign * p.theta.theta))
            .product();
        raw * factor
    } else {
        comps
            .iter()
            .zip(&parts)
            .fold(raw, |acc, (c, p)| acc - c.sign * p.theta.theta * p.contrast)
    };
    let adjustment_log_factor = if metric.is_ratio() {
        adjusted.ln() - raw.ln()
    } else {
        adjusted - raw
    };

    let first = &parts[0].theta;
    let predicted_sd_ratio = match preds[0].cv_correlation {
        Some(rho) => inference::variance_forecast(rho)?.sd_ratio,
        None => {
            let base = inference::delta_variance_gdiff(&first.moments, &g, 0.0);
            let best = inference::delta_variance_gdiff(&first.moments, &g, first.theta);
            if base > 0.0 {
                (best / base).clamp(0.0, 1.0).sqrt()
            } else {
                1.0
            }
        }
    };

    Ok(AdjustedEstimate {
        metric: metric.clone(),
        raw,
        adjusted,
        rho_control: first.moments.control.cor_yh,
        rho_treatment: first.moments.treatment.cor_yh,
        predicted_sd_ratio,
        adjustment_log_factor,
        degenerate: parts.iter().any(|p| p.theta.degenerate && !p.theta.overridden),
        contrasts: parts.iter().map(|p| p.contrast).collect(),
        thetas: parts.into_iter().map(|p| p.theta).collect(),
    })
}

/// Adjusted estimate using the counterfactual predictions `h(x, w)` for a
/// fixed arm `w`.
pub fn adjusted_estimate_arm_specific(
    data: &ExperimentDataset,
    metric: &MetricSpec,
    preds: &[PredictionSet],
    theta: &ThetaChoice,
    w: Arm,
) -> Result<AdjustedEstimate> {
    let arm_preds = preds
        .iter()
        .map(|p| {
            let mut q = PredictionSet::new(p.response.clone(), p.for_arm(w)?.to_vec())?;
            q.fit_mode = p.fit_mode;
            q.cv_correlation = p.cv_correlation;
            Ok(q)
        })
        .collect::<Result<Vec<_>>>()?;
    adjusted_estimate(data, metric, &arm_preds, theta)
}

/// `f(x) = γ₁ h(x, 0) + (1 − γ₁) h(x, 1)` as an arm-free prediction set.
pub fn blend_predictions(preds: &PredictionSet, gamma1: f64) -> Result<PredictionSet> {
    if !(0.0..=1.0).contains(&gamma1) {
        return Err(Error::InvalidParameter(format!(
            "γ₁ = {gamma1} must lie in [0, 1]"
        )));
    }
    let h1 = preds.h1().ok_or(Error::MissingTreatmentPredictions)?;
    let blended = if gamma1 == 1.0 {
        preds.h0().to_vec()
    } else if gamma1 == 0.0 {
        h1.to_vec()
    } else {
        preds
            .h0()
            .iter()
            .zip(h1)
            .map(|(a, b)| gamma1 * a + (1.0 - gamma1) * b)
            .collect()
    };
    let mut out = PredictionSet::new(preds.response.clone(), blended)?;
    out.fit_mode = preds.fit_mode;
    Ok(out)
}

/// Which imputation-based estimator [`ghost_estimate`] computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GhostForm {
    /// `γ₁ τ̂_g + γ₂ (g(h̄_c(1)) − g(h̄_t(0)))`.
    Counterfactual,
    /// `γ₁ (g(Ȳ_t) − g(h̄_c(0))) + γ₂ (g(h̄_t(1)) − g(Ȳ_c))`.
    CrossArm,
}

/// Estimators that substitute model predictions for unobserved potential
/// outcomes, with weights `γ₁ + γ₂ = 1`. They are only unbiased when the
/// model predicts the arm-specific means correctly; no θ optimization is
/// offered. Supports `GDifference` and `MeanRatio` (returned on the ratio
/// scale).
pub fn ghost_estimate(
    data: &ExperimentDataset,
    metric: &MetricSpec,
    preds: &PredictionSet,
    gamma1: f64,
    form: GhostForm,
) -> Result<f64> {
    let (response, g, ratio) = match metric {
        MetricSpec::GDifference { response, g } => (response, g.clone(), false),
        MetricSpec::MeanRatio { response } => (response, GTransform::Log, true),
        other => {
            return Err(Error::InvalidParameter(format!(
                "imputation estimators are defined for g-differences and mean ratios, not {other}"
            )))
        }
    };
    preds.check_covers(data)?;
    let h0 = preds.h0();
    let h1 = preds.h1().ok_or(Error::MissingTreatmentPredictions)?;
    let gamma2 = 1.0 - gamma1;
    let y = data.response(response)?;
    let control = data.arm_rows(Arm::Control);
    let treatment = data.arm_rows(Arm::Treatment);
    if control.is_empty() {
        return Err(Error::EmptyArm(Arm::Control));
    }
    if treatment.is_empty() {
        return Err(Error::EmptyArm(Arm::Treatment));
    }
    let gm = |xs: &[f64], rows: &[usize], what: &str| g.eval_checked(stats::mean_at(xs, rows), what);
    let y_t = gm(y, &treatment, "treatment response mean")?;
    let y_c = gm(y, &control, "control response mean")?;
    let log_scale = match form {
        GhostForm::Counterfactual => {
            let hc1 = gm(h1, &control, "control mean of h(x, 1)")?;
            let ht0 = gm(h0, &treatment, "treatment mean of h(x, 0)")?;
            gamma1 * (y_t - y_c) + gamma2 * (hc1 - ht0)
        }
        GhostForm::CrossArm => {
            let hc0 = gm(h0, &control, "control mean of h(x, 0)")?;
            let ht1 = gm(h1, &treatment, "treatment mean of h(x, 1)")?;
            gamma1 * (y_t - hc0) + gamma2 * (ht1 - y_c)
        }
    };
    Ok(if ratio { log_scale.exp() } else { log_scale })
}

/// Settings for the joint (θ_Y, θ_Z) grid search on two-response metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGridConfig {
    pub min: f64,
    pub max: f64,
    pub step: f64,
    pub bootstrap_replicates: usize,
    pub seed: u64,
}

impl Default for ThetaGridConfig {
    fn default() -> Self {
        ThetaGridConfig {
            min: -2.0,
            max: 2.0,
            step: 0.02,
            bootstrap_replicates: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridThetaResult {
    pub theta_numerator: f64,
    pub theta_denominator: f64,
    /// Bootstrap variance of the g-scale estimator at the grid optimum.
    pub variance: f64,
    /// Bootstrap variance of the unadjusted g-scale estimator.
    pub raw_variance: f64,
}

/// Grid search over `(θ_Y, θ_Z)` minimizing the bootstrap variance of the
/// g-scale two-response estimator `ΔY − θ_Y Δf_Y − (ΔZ − θ_Z Δf_Z)`.
/// Units are resampled with replacement within each arm.
pub fn grid_search_component_thetas(
    data: &ExperimentDataset,
    metric: &MetricSpec,
    preds: &[PredictionSet],
    cfg: &ThetaGridConfig,
) -> Result<GridThetaResult> {
    let comps = metric.components();
    if comps.len() != 2 || preds.len() != 2 {
        return Err(Error::InvalidParameter(
            "the joint θ grid applies to two-response metrics".into(),
        ));
    }
    if !(cfg.step > 0.0) || !(cfg.max >= cfg.min) || cfg.bootstrap_replicates < 2 {
        return Err(Error::InvalidParameter("invalid θ grid configuration".into()));
    }
    for p in preds {
        p.check_covers(data)?;
    }
    let g = metric.transform();
    let y = data.response(comps[0].response)?;
    let z = data.response(comps[1].response)?;
    let (fy, fz) = (preds[0].h0(), preds[1].h0());
    let control = data.arm_rows(Arm::Control);
    let treatment = data.arm_rows(Arm::Treatment);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Per replicate: (ΔY − ΔZ, Δf_Y, Δf_Z) on the g scale.
    let mut draws: Vec<[f64; 3]> = Vec::with_capacity(cfg.bootstrap_replicates);
    for _ in 0..cfg.bootstrap_replicates {
        let bt: Vec<usize> = (0..treatment.len())
            .map(|_| treatment[rng.random_range(0..treatment.len())])
            .collect();
        let bc: Vec<usize> = (0..control.len())
            .map(|_| control[rng.random_range(0..control.len())])
            .collect();
        let diff = |xs: &[f64]| -> Result<f64> {
            Ok(g.eval_checked(stats::mean_at(xs, &bt), "bootstrap treatment mean")?
                - g.eval_checked(stats::mean_at(xs, &bc), "bootstrap control mean")?)
        };
        draws.push([diff(y)? - diff(z)?, diff(fy)?, diff(fz)?]);
    }
    let col = |k: usize| draws.iter().map(|d| d[k]).collect::<Vec<_>>();
    let (d0, ey, ez) = (col(0), col(1), col(2));
    let v00 = stats::variance(&d0);
    let v11 = stats::variance(&ey);
    let v22 = stats::variance(&ez);
    let c01 = stats::covariance(&d0, &ey);
    let c02 = stats::covariance(&d0, &ez);
    let c12 = stats::covariance(&ey, &ez);
    // var(D0 − a·EY + b·EZ)
    let var_at = |a: f64, b: f64| {
        v00 + a * a * v11 + b * b * v22 - 2.0 * a * c01 + 2.0 * b * c02 - 2.0 * a * b * c12
    };
    let steps = ((cfg.max - cfg.min) / cfg.step).round() as usize;
    let grid: Vec<f64> = (0..=steps).map(|i| cfg.min + i as f64 * cfg.step).collect();
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for &a in &grid {
        for &b in &grid {
            let v = var_at(a, b);
            if v < best.0 {
                best = (v, a, b);
            }
        }
    }
    Ok(GridThetaResult {
        theta_numerator: best.1,
        theta_denominator: best.2,
        variance: best.0,
        raw_variance: v00,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tests::two_arm;
    use crate::metrics::{DatasetColumns, FeatureColumn};
    use proptest::prelude::*;
    use rand::Rng;

    fn moments(y_t: (f64, f64), h_t: (f64, f64), cov_t: f64, y_c: (f64, f64), h_c: (f64, f64), cov_c: f64, n: usize) -> MomentSummary {
        let arm = |y: (f64, f64), h: (f64, f64), cov: f64| ArmMoments {
            n,
            mean_y: y.0,
            sd_y: y.1,
            mean_h: h.0,
            sd_h: h.1,
            cov_yh: cov,
            cor_yh: cov / (y.1 * h.1),
        };
        MomentSummary {
            treatment: arm(y_t, h_t, cov_t),
            control: arm(y_c, h_c, cov_c),
        }
    }

    #[test]
    fn single_theta_examples() {
        let g = GTransform::Identity;
        assert_eq!(optimal_theta_single(5.0, 7.0, 2.0, 4.0, &g).unwrap(), 1.0);
        assert_eq!(optimal_theta_single(5.0, 7.0, 2.0, 0.0, &g).unwrap(), 0.0);
        assert!(matches!(
            optimal_theta_single(5.0, 7.0, 0.0, 0.0, &g),
            Err(Error::DegenerateVariance(_))
        ));
        // log: (μ_H / μ_Y) cov / σ_H²
        let t = optimal_theta_single(2.0, 4.0, 1.5, 0.9, &GTransform::Log).unwrap();
        assert!((t - (4.0 / 2.0) * 0.9 / 2.25).abs() < 1e-15);
    }

    #[test]
    fn symmetric_arms_collapse_to_single_theta() {
        let m = moments((3.0, 2.0), (3.0, 1.5), 1.2, (3.0, 2.0), (3.0, 1.5), 1.2, 100);
        let t = optimal_theta_two_arm(&m, &GTransform::Identity).unwrap();
        let single = optimal_theta_single(3.0, 3.0, 1.5, 1.2, &GTransform::Identity).unwrap();
        assert!((t.theta - single).abs() < 1e-15);
        assert!((t.theta_control - single).abs() < 1e-15);
        assert!(theta_bracket_check(&t));
    }

    #[test]
    fn zero_covariances_give_zero_theta() {
        let m = moments((3.0, 2.0), (3.0, 1.5), 0.0, (2.0, 1.0), (2.5, 1.0), 0.0, 50);
        assert_eq!(optimal_theta_two_arm(&m, &GTransform::Log).unwrap().theta, 0.0);
    }

    #[test]
    fn identity_and_log_specializations() {
        let m = moments((3.0, 2.0), (3.5, 1.5), 1.1, (2.0, 1.0), (2.5, 1.2), 0.7, 1);
        let mut m2 = m;
        m2.control.n = 1;
        let id = optimal_theta_two_arm(&m2, &GTransform::Identity).unwrap().theta;
        assert!((id - (1.1 + 0.7) / (1.5f64.powi(2) + 1.2f64.powi(2))).abs() < 1e-15);
        let lg = optimal_theta_two_arm(&m2, &GTransform::Log).unwrap().theta;
        let expect = (1.1 / (3.5 * 3.0) + 0.7 / (2.5 * 2.0))
            / (1.5f64.powi(2) / 3.5f64.powi(2) + 1.2f64.powi(2) / 2.5f64.powi(2));
        assert!((lg - expect).abs() < 1e-14);
        let custom = GTransform::custom("ln", f64::ln, |x| 1.0 / x);
        let cu = optimal_theta_two_arm(&m2, &custom).unwrap().theta;
        assert!((cu - lg).abs() < 1e-14);
    }

    #[test]
    fn bracket_examples() {
        let m = moments((1.0, 1.0), (1.0, 1.0), 0.5, (1.0, 1.0), (1.0, 1.0), 0.5, 10);
        let mut t = optimal_theta_two_arm(&m, &GTransform::Identity).unwrap();
        t.theta_control = 0.5;
        t.theta_treatment = 0.9;
        t.theta = 0.7;
        assert!(theta_bracket_check(&t));
        t.theta_control = 0.7;
        t.theta_treatment = 0.7;
        assert!(theta_bracket_check(&t));
        t.theta = 0.95;
        assert!(!theta_bracket_check(&t));
    }

    fn with_predictions(treatment: &[f64], control: &[f64]) -> (ExperimentDataset, Vec<f64>) {
        let d = two_arm(treatment, control);
        let h = d.response("y").unwrap().iter().map(|v| v * 0.5 + 1.0).collect();
        (d, h)
    }

    #[test]
    fn constant_predictor_leaves_estimate_unchanged() {
        let d = two_arm(&[2.0, 4.0, 7.0], &[1.0, 3.0]);
        let p = PredictionSet::new("y", vec![0.3; d.len()]).unwrap();
        for metric in [
            MetricSpec::mean_ratio("y"),
            MetricSpec::sum_ratio("y"),
            MetricSpec::g_difference("y", GTransform::Identity),
        ] {
            for theta in [ThetaChoice::Optimal, ThetaChoice::Fixed(0.8), ThetaChoice::Fixed(-3.0)] {
                let est = adjusted_estimate(&d, &metric, &[p.clone()], &theta).unwrap();
                assert_eq!(est.adjusted, est.raw, "{metric} {theta:?}");
            }
            let est = adjusted_estimate(&d, &metric, &[p.clone()], &ThetaChoice::Optimal).unwrap();
            assert!(est.degenerate);
            assert_eq!(est.theta(), 0.0);
        }
    }

    #[test]
    fn zero_theta_is_raw() {
        let (d, h) = with_predictions(&[2.0, 4.0, 5.0], &[1.0, 3.0, 2.0]);
        let p = PredictionSet::new("y", h).unwrap();
        let est = adjusted_estimate(&d, &MetricSpec::mean_ratio("y"), &[p], &ThetaChoice::Fixed(0.0)).unwrap();
        assert_eq!(est.adjusted, est.raw);
        assert_eq!(est.adjustment_log_factor, 0.0);
    }

    #[test]
    fn multiplicative_form_matches_log_scale() {
        let (d, h) = with_predictions(&[2.0, 4.0, 5.0, 9.0], &[1.0, 3.0, 2.0]);
        let p = PredictionSet::new("y", h).unwrap();
        let ratio = adjusted_estimate(&d, &MetricSpec::mean_ratio("y"), &[p.clone()], &ThetaChoice::Optimal).unwrap();
        let log = adjusted_estimate(
            &d,
            &metrics::log_scale_view(&MetricSpec::mean_ratio("y")).unwrap(),
            &[p],
            &ThetaChoice::Optimal,
        )
        .unwrap();
        assert_eq!(ratio.theta(), log.theta());
        assert!((log.adjusted.exp() - ratio.adjusted).abs() <= 1e-12 * ratio.adjusted);
        assert!((ratio.adjustment_log_factor - log.adjustment_log_factor).abs() < 1e-12);
    }

    #[test]
    fn missing_predictions_are_reported() {
        let (d, h) = with_predictions(&[2.0, 4.0], &[1.0, 3.0]);
        let p = PredictionSet::new("y", h[..3].to_vec()).unwrap();
        assert!(matches!(
            adjusted_estimate(&d, &MetricSpec::mean_ratio("y"), &[p], &ThetaChoice::Optimal),
            Err(Error::MissingPredictions(_))
        ));
        let p = PredictionSet::new("other", h).unwrap();
        assert!(matches!(
            adjusted_estimate(&d, &MetricSpec::mean_ratio("y"), &[p], &ThetaChoice::Optimal),
            Err(Error::MissingPredictions(_))
        ));
    }

    #[test]
    fn log_prediction_domain() {
        let d = two_arm(&[2.0, 4.0], &[1.0, 3.0]);
        let p = PredictionSet::new("y", vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        assert!(matches!(
            adjusted_estimate(&d, &MetricSpec::mean_ratio("y"), &[p], &ThetaChoice::Optimal),
            Err(Error::DomainViolation(_))
        ));
    }

    #[test]
    fn arm_specific_collapses_when_predictions_agree() {
        let (d, h) = with_predictions(&[2.0, 4.0, 5.0], &[1.0, 3.0, 2.5]);
        let p = PredictionSet::new("y", h.clone()).unwrap().with_treatment(h).unwrap();
        let metric = MetricSpec::mean_ratio("y");
        let a = adjusted_estimate(&d, &metric, &[p.clone()], &ThetaChoice::Optimal).unwrap();
        for w in Arm::BOTH {
            let b = adjusted_estimate_arm_specific(&d, &metric, &[p.clone()], &ThetaChoice::Optimal, w).unwrap();
            assert_eq!(a.adjusted, b.adjusted);
        }
        let c = PredictionSet::new("y", vec![2.0; d.len()]).unwrap().with_treatment(vec![5.0; d.len()]).unwrap();
        let e = adjusted_estimate_arm_specific(&d, &metric, &[c.clone()], &ThetaChoice::Fixed(0.7), Arm::Treatment).unwrap();
        assert_eq!(e.adjusted, e.raw);
        let no_h1 = PredictionSet::new("y", vec![2.0; d.len()]).unwrap();
        assert!(matches!(
            adjusted_estimate_arm_specific(&d, &metric, &[no_h1], &ThetaChoice::Optimal, Arm::Treatment),
            Err(Error::MissingTreatmentPredictions)
        ));
    }

    #[test]
    fn blend_examples() {
        let p = PredictionSet::new("y", vec![2.0; 3]).unwrap().with_treatment(vec![4.0; 3]).unwrap();
        assert_eq!(blend_predictions(&p, 1.0).unwrap().h0(), p.h0());
        assert_eq!(blend_predictions(&p, 0.0).unwrap().h0(), p.h1().unwrap());
        assert_eq!(blend_predictions(&p, 0.5).unwrap().h0(), &[3.0, 3.0, 3.0]);
        assert!(blend_predictions(&p, 1.5).is_err());
        let q = PredictionSet::new("y", vec![2.0; 3]).unwrap();
        assert!(matches!(blend_predictions(&q, 0.5), Err(Error::MissingTreatmentPredictions)));
    }

    #[test]
    fn ghost_examples() {
        let d = two_arm(&[2.0, 4.0], &[1.0, 3.0]);
        let p = PredictionSet::new("y", vec![1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .with_treatment(vec![5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let id = MetricSpec::g_difference("y", GTransform::Identity);
        let raw = metrics::raw_estimate(&d, &id).unwrap();
        assert_eq!(ghost_estimate(&d, &id, &p, 1.0, GhostForm::Counterfactual).unwrap(), raw);
        // γ₁ = 0: h̄_c(1) − h̄_t(0) = 7.5 − 1.5
        assert_eq!(ghost_estimate(&d, &id, &p, 0.0, GhostForm::Counterfactual).unwrap(), 6.0);
        // γ₁ = 1 cross-arm: Ȳ_t − h̄_c(0) = 3 − 3.5
        assert_eq!(ghost_estimate(&d, &id, &p, 1.0, GhostForm::CrossArm).unwrap(), -0.5);
        let sym = PredictionSet::new("y", vec![2.0; 4]).unwrap().with_treatment(vec![2.0; 4]).unwrap();
        assert_eq!(ghost_estimate(&d, &id, &sym, 0.0, GhostForm::Counterfactual).unwrap(), 0.0);
        let ratio = ghost_estimate(&d, &MetricSpec::mean_ratio("y"), &p, 1.0, GhostForm::Counterfactual).unwrap();
        assert!((ratio - 1.5).abs() < 1e-15);
    }

    #[test]
    fn joint_grid_on_two_response_metric() {
        let mut cols = DatasetColumns::default();
        let (mut y, mut z) = (Vec::new(), Vec::new());
        let mut fy = Vec::new();
        let mut fz = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..400 {
            let arm = if i % 2 == 0 { Arm::Treatment } else { Arm::Control };
            let level = rng.random_range(1..5) as f64;
            cols.unit_ids.push(format!("u{i}"));
            cols.arms.push(arm);
            y.push(level * 3.0 + rng.random::<f64>());
            z.push(level + rng.random::<f64>());
            fy.push(level * 3.0 + 0.5);
            fz.push(level + 0.5);
        }
        cols.responses = vec![("y".into(), y), ("z".into(), z)];
        cols.features.push(FeatureColumn::from_values("f", &vec!["a"; 400]));
        let d = ExperimentDataset::from_columns(cols).unwrap();
        let metric = MetricSpec::ratio_of_mean_ratios("y", "z");
        let preds = [PredictionSet::new("y", fy).unwrap(), PredictionSet::new("z", fz).unwrap()];
        let cfg = ThetaGridConfig { bootstrap_replicates: 300, seed: 9, ..Default::default() };
        let r = grid_search_component_thetas(&d, &metric, &preds, &cfg).unwrap();
        assert!(r.variance <= r.raw_variance);
        let per = adjusted_estimate(&d, &metric, &preds, &ThetaChoice::Optimal).unwrap();
        let joint = adjusted_estimate(
            &d,
            &metric,
            &preds,
            &ThetaChoice::PerComponent(vec![r.theta_numerator, r.theta_denominator]),
        )
        .unwrap();
        assert!(joint.adjusted.is_finite() && per.adjusted.is_finite());
        assert_eq!(per.thetas.len(), 2);
    }

    proptest! {
        #[test]
        fn bracket_holds_for_random_moments(
            cov_t in -3.0f64..3.0, cov_c in -3.0f64..3.0,
            sh_t in 0.1f64..3.0, sh_c in 0.1f64..3.0,
            mh_t in 0.5f64..5.0, mh_c in 0.5f64..5.0,
            n_t in 2usize..1000, n_c in 2usize..1000,
        ) {
            let mut m = moments((2.0, 1.0), (mh_t, sh_t), cov_t, (2.5, 1.0), (mh_c, sh_c), cov_c, n_t);
            m.control.n = n_c;
            for g in [GTransform::Identity, GTransform::Log] {
                let t = optimal_theta_two_arm(&m, &g).unwrap();
                prop_assert!(theta_bracket_check(&t));
            }
        }

        #[test]
        fn g_independence_of_log_adjustment(
            t in prop::collection::vec((0.1f64..50.0, 0.1f64..5.0), 2..30),
            c in prop::collection::vec((0.1f64..50.0, 0.1f64..5.0), 2..30),
        ) {
            let ys_t: Vec<f64> = t.iter().map(|p| p.0).collect();
            let ys_c: Vec<f64> = c.iter().map(|p| p.0).collect();
            let d = two_arm(&ys_t, &ys_c);
            let h: Vec<f64> = t.iter().chain(&c).map(|p| p.0 * 0.3 + p.1).collect();
            let p = PredictionSet::new("y", h).unwrap();
            let ratio = adjusted_estimate(&d, &MetricSpec::mean_ratio("y"), &[p.clone()], &ThetaChoice::Optimal).unwrap();
            let log = adjusted_estimate(&d, &MetricSpec::g_difference("y", GTransform::Log), &[p], &ThetaChoice::Optimal).unwrap();
            prop_assert!((log.adjusted.exp() - ratio.adjusted).abs() <= 1e-12 * ratio.adjusted);
        }
    }
}
