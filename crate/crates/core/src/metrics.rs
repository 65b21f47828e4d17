//! Experiment data, g-transforms and raw (unadjusted) effect estimators.
//!
//! A dataset holds one row per observed unit. Units that never appeared in
//! the experiment (zero impressions) are simply absent, which is what the
//! sum-ratio estimator relies on.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::stats;

/// Means at or below this value are rejected wherever a log or a ratio is taken.
pub const MIN_POSITIVE_MEAN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Control,
    Treatment,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Treatment];

    /// Treatment indicator `w`: 0 for control, 1 for treatment.
    pub fn indicator(self) -> u8 {
        match self {
            Arm::Control => 0,
            Arm::Treatment => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::Control => "control",
            Arm::Treatment => "treatment",
        }
    }

    pub fn parse(s: &str) -> Option<Arm> {
        match s.trim() {
            "control" => Some(Arm::Control),
            "treatment" => Some(Arm::Treatment),
            _ => None,
        }
    }

    pub fn other(self) -> Arm {
        match self {
            Arm::Control => Arm::Treatment,
            Arm::Treatment => Arm::Control,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One observed unit, in row form.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub unit_id: String,
    pub arm: Arm,
    pub responses: BTreeMap<String, f64>,
    pub features: BTreeMap<String, String>,
    pub date: Option<String>,
}

/// A categorical column stored as codes into a level dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureColumn {
    pub name: String,
    pub levels: Vec<String>,
    pub codes: Vec<u32>,
}

impl FeatureColumn {
    /// Builds a column from raw level strings, assigning codes in order of
    /// first appearance.
    pub fn from_values<S: AsRef<str>>(name: impl Into<String>, values: &[S]) -> Self {
        let mut levels: Vec<String> = Vec::new();
        let mut index: BTreeMap<String, u32> = BTreeMap::new();
        let codes = values
            .iter()
            .map(|v| {
                let v = v.as_ref();
                *index.entry(v.to_string()).or_insert_with(|| {
                    levels.push(v.to_string());
                    (levels.len() - 1) as u32
                })
            })
            .collect();
        FeatureColumn {
            name: name.into(),
            levels,
            codes,
        }
    }
}

/// Column-oriented input for [`ExperimentDataset::from_columns`].
#[derive(Debug, Clone, Default)]
pub struct DatasetColumns {
    pub unit_ids: Vec<String>,
    pub arms: Vec<Arm>,
    pub dates: Option<Vec<Option<String>>>,
    pub responses: Vec<(String, Vec<f64>)>,
    pub features: Vec<FeatureColumn>,
}

/// Unit-level data for one two-arm experiment, stored column-wise.
///
/// Invariants checked at construction: unique unit ids, finite responses,
/// at least one unit in each arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentDataset {
    unit_ids: Vec<String>,
    arms: Vec<Arm>,
    dates: Option<Vec<Option<String>>>,
    response_names: Vec<String>,
    responses: Vec<Vec<f64>>,
    features: Vec<FeatureColumn>,
}

impl ExperimentDataset {
    pub fn from_columns(cols: DatasetColumns) -> Result<Self> {
        let n = cols.unit_ids.len();
        if cols.arms.len() != n {
            return Err(Error::Schema(format!(
                "arm column has {} values, expected {n}",
                cols.arms.len()
            )));
        }
        if let Some(d) = &cols.dates {
            if d.len() != n {
                return Err(Error::Schema(format!(
                    "date column has {} values, expected {n}",
                    d.len()
                )));
            }
        }
        let mut seen_names = HashSet::new();
        for (name, values) in &cols.responses {
            if !seen_names.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate column `{name}`")));
            }
            if values.len() != n {
                return Err(Error::Schema(format!(
                    "response `{name}` has {} values, expected {n}",
                    values.len()
                )));
            }
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Schema(format!(
                    "response `{name}` is not finite for unit `{}` (row {})",
                    cols.unit_ids[i],
                    i + 1
                )));
            }
        }
        for f in &cols.features {
            if !seen_names.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column `{}`", f.name)));
            }
            if f.codes.len() != n {
                return Err(Error::Schema(format!(
                    "feature `{}` has {} values, expected {n}",
                    f.name,
                    f.codes.len()
                )));
            }
            if f.codes.iter().any(|&c| c as usize >= f.levels.len()) {
                return Err(Error::Schema(format!(
                    "feature `{}` has a code outside its level dictionary",
                    f.name
                )));
            }
        }
        let mut ids = HashSet::with_capacity(n);
        for id in &cols.unit_ids {
            if !ids.insert(id.as_str()) {
                return Err(Error::Schema(format!("duplicate unit_id `{id}`")));
            }
        }
        let (names, responses) = cols.responses.into_iter().unzip();
        let data = ExperimentDataset {
            unit_ids: cols.unit_ids,
            arms: cols.arms,
            dates: cols.dates,
            response_names: names,
            responses,
            features: cols.features,
        };
        data.check_arms()?;
        Ok(data)
    }

    /// Builds a dataset from row records. All records must carry the same
    /// response and feature names.
    pub fn from_records(records: Vec<UnitRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Schema("dataset has no records".into()))?;
        let response_names: Vec<String> = first.responses.keys().cloned().collect();
        let feature_names: Vec<String> = first.features.keys().cloned().collect();
        let has_dates = records.iter().any(|r| r.date.is_some());

        let mut cols = DatasetColumns::default();
        let mut responses: Vec<Vec<f64>> = vec![Vec::with_capacity(records.len()); response_names.len()];
        let mut raw_features: Vec<Vec<String>> = vec![Vec::with_capacity(records.len()); feature_names.len()];
        let mut dates = Vec::new();
        for (row, rec) in records.into_iter().enumerate() {
            if rec.responses.len() != response_names.len()
                || !response_names.iter().all(|k| rec.responses.contains_key(k))
            {
                return Err(Error::Schema(format!(
                    "record `{}` (row {}) has a different response set",
                    rec.unit_id,
                    row + 1
                )));
            }
            if rec.features.len() != feature_names.len()
                || !feature_names.iter().all(|k| rec.features.contains_key(k))
            {
                return Err(Error::Schema(format!(
                    "record `{}` (row {}) has a different feature set",
                    rec.unit_id,
                    row + 1
                )));
            }
            for (col, name) in responses.iter_mut().zip(&response_names) {
                col.push(rec.responses[name]);
            }
            for (col, name) in raw_features.iter_mut().zip(&feature_names) {
                col.push(rec.features[name].clone());
            }
            cols.unit_ids.push(rec.unit_id);
            cols.arms.push(rec.arm);
            dates.push(rec.date);
        }
        cols.responses = response_names.into_iter().zip(responses).collect();
        cols.features = feature_names
            .into_iter()
            .zip(raw_features)
            .map(|(name, values)| FeatureColumn::from_values(name, &values))
            .collect();
        cols.dates = has_dates.then_some(dates);
        Self::from_columns(cols)
    }

    fn check_arms(&self) -> Result<()> {
        for arm in Arm::BOTH {
            if !self.arms.contains(&arm) {
                return Err(Error::EmptyArm(arm));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_ids.is_empty()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn arms(&self) -> &[Arm] {
        &self.arms
    }

    pub fn dates(&self) -> Option<&[Option<String>]> {
        self.dates.as_deref()
    }

    pub fn response_names(&self) -> &[String] {
        &self.response_names
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn response(&self, name: &str) -> Result<&[f64]> {
        self.response_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.responses[i].as_slice())
            .ok_or_else(|| Error::UnknownResponse(name.to_string()))
    }

    pub fn feature(&self, name: &str) -> Result<&FeatureColumn> {
        self.features
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::UnknownFeature(name.to_string()))
    }

    pub fn features(&self) -> &[FeatureColumn] {
        &self.features
    }

    /// Row indices of the units in `arm`, in dataset order.
    pub fn arm_rows(&self, arm: Arm) -> Vec<usize> {
        self.arms
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| (a == arm).then_some(i))
            .collect()
    }

    pub fn arm_count(&self, arm: Arm) -> usize {
        self.arms.iter().filter(|&&a| a == arm).count()
    }

    pub fn record(&self, row: usize) -> UnitRecord {
        UnitRecord {
            unit_id: self.unit_ids[row].clone(),
            arm: self.arms[row],
            responses: self
                .response_names
                .iter()
                .zip(&self.responses)
                .map(|(n, col)| (n.clone(), col[row]))
                .collect(),
            features: self
                .features
                .iter()
                .map(|f| (f.name.clone(), f.levels[f.codes[row] as usize].clone()))
                .collect(),
            date: self.dates.as_ref().and_then(|d| d[row].clone()),
        }
    }

    pub fn records(&self) -> impl Iterator<Item = UnitRecord> + '_ {
        (0..self.len()).map(|i| self.record(i))
    }

    /// Restricts the dataset to the given rows (which must be distinct),
    /// keeping their order. Level dictionaries are shared with the parent.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if !rows.windows(2).all(|w| w[0] < w[1]) {
            let mut sorted = rows.to_vec();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidParameter("subset rows must be distinct".into()));
            }
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::InvalidParameter(format!(
                "row {bad} out of range for dataset of {} units",
                self.len()
            )));
        }
        let pick_f = |col: &[f64]| rows.iter().map(|&r| col[r]).collect::<Vec<_>>();
        let data = ExperimentDataset {
            unit_ids: rows.iter().map(|&r| self.unit_ids[r].clone()).collect(),
            arms: rows.iter().map(|&r| self.arms[r]).collect(),
            dates: self
                .dates
                .as_ref()
                .map(|d| rows.iter().map(|&r| d[r].clone()).collect()),
            response_names: self.response_names.clone(),
            responses: self.responses.iter().map(|c| pick_f(c)).collect(),
            features: self
                .features
                .iter()
                .map(|f| FeatureColumn {
                    name: f.name.clone(),
                    levels: f.levels.clone(),
                    codes: rows.iter().map(|&r| f.codes[r]).collect(),
                })
                .collect(),
        };
        data.check_arms()?;
        Ok(data)
    }

    /// Same units with control and treatment labels exchanged.
    pub fn with_arms_swapped(&self) -> Self {
        let mut out = self.clone();
        for a in &mut out.arms {
            *a = a.other();
        }
        out
    }
}

/// Custom differentiable transform with a user-supplied derivative.
#[derive(Clone)]
pub struct CustomTransform {
    name: Arc<str>,
    value: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    derivative: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GKind {
    Identity,
    Log,
    Custom,
}

/// The transform `g` applied to arm means, together with its derivative.
#[derive(Clone)]
pub enum GTransform {
    Identity,
    Log,
    Custom(CustomTransform),
}

impl GTransform {
    pub fn custom(
        name: &str,
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        derivative: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        GTransform::Custom(CustomTransform {
            name: name.into(),
            value: Arc::new(value),
            derivative: Arc::new(derivative),
        })
    }

    pub fn kind(&self) -> GKind {
        match self {
            GTransform::Identity => GKind::Identity,
            GTransform::Log => GKind::Log,
            GTransform::Custom(_) => GKind::Custom,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            GTransform::Identity => "identity",
            GTransform::Log => "log",
            GTransform::Custom(c) => &c.name,
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        match self {
            GTransform::Identity => x,
            GTransform::Log => x.ln(),
            GTransform::Custom(c) => (c.value)(x),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            GTransform::Identity => 1.0,
            GTransform::Log => 1.0 / x,
            GTransform::Custom(c) => (c.derivative)(x),
        }
    }

    /// Rejects points outside the transform's domain.
    pub fn check_domain(&self, x: f64, what: &str) -> Result<()> {
        if !x.is_finite() {
            return Err(Error::DomainViolation(format!("{what} is not finite ({x})")));
        }
        if matches!(self, GTransform::Log) && x <= MIN_POSITIVE_MEAN {
            return Err(Error::DomainViolation(format!(
                "{what} = {x} must be positive under g = log"
            )));
        }
        Ok(())
    }

    /// For custom transforms, verifies the supplied derivative against a
    /// central finite difference with step `1e-6 * max(1, |x|)`.
    pub fn check_derivative(&self, x: f64) -> Result<()> {
        let GTransform::Custom(c) = self else {
            return Ok(());
        };
        let h = 1e-6 * x.abs().max(1.0);
        let fd = ((c.value)(x + h) - (c.value)(x - h)) / (2.0 * h);
        let d = (c.derivative)(x);
        let scale = d.abs().max(fd.abs()).max(1e-12);
        if !d.is_finite() || (fd - d).abs() > 1e-4 * scale {
            return Err(Error::InvalidTransform(format!(
                "derivative of `{}` at {x} is {d}, finite difference gives {fd}",
                c.name
            )));
        }
        Ok(())
    }

    /// Domain and derivative checks followed by `g(x)`.
    pub fn eval_checked(&self, x: f64, what: &str) -> Result<f64> {
        self.check_domain(x, what)?;
        self.check_derivative(x)?;
        let v = self.value(x);
        if !v.is_finite() {
            return Err(Error::DomainViolation(format!("g({what}) is not finite")));
        }
        Ok(v)
    }
}

impl fmt::Debug for GTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GTransform::Identity => f.write_str("Identity"),
            GTransform::Log => f.write_str("Log"),
            GTransform::Custom(c) => write!(f, "Custom({})", c.name),
        }
    }
}

impl PartialEq for GTransform {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (GTransform::Identity, GTransform::Identity) => true,
            (GTransform::Log, GTransform::Log) => true,
            (GTransform::Custom(a), GTransform::Custom(b)) => {
                a.name == b.name && Arc::ptr_eq(&a.value, &b.value)
            }
            _ => false,
        }
    }
}

/// The effect metric being estimated.
///
/// `GSumDifference` and `GDifferenceOfDifferences` are the g-scale forms of
/// the sum ratio and the ratio of mean ratios; [`log_scale_view`] maps the
/// ratio kinds onto them.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricSpec {
    /// `g(mean_t) - g(mean_c)`.
    GDifference { response: String, g: GTransform },
    /// `mean_t / mean_c`.
    MeanRatio { response: String },
    /// `sum_t / sum_c` over observed units.
    SumRatio { response: String },
    /// `(Y_t / Z_t) / (Y_c / Z_c)` on arm means.
    RatioOfMeanRatios { numerator: String, denominator: String },
    /// `g(sum_t) - g(sum_c)`.
    GSumDifference { response: String, g: GTransform },
    /// `g(Y_t) - g(Y_c) - (g(Z_t) - g(Z_c))` on arm means.
    GDifferenceOfDifferences {
        numerator: String,
        denominator: String,
        g: GTransform,
    },
}

/// One adjusted component of a metric: a response entering with sign +1
/// (numerator) or -1 (denominator).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricComponent<'a> {
    pub response: &'a str,
    pub sign: f64,
}

impl MetricSpec {
    pub fn g_difference(response: &str, g: GTransform) -> Self {
        MetricSpec::GDifference {
            response: response.into(),
            g,
        }
    }

    pub fn mean_ratio(response: &str) -> Self {
        MetricSpec::MeanRatio {
            response: response.into(),
        }
    }

    pub fn sum_ratio(response: &str) -> Self {
        MetricSpec::SumRatio {
            response: response.into(),
        }
    }

    pub fn ratio_of_mean_ratios(numerator: &str, denominator: &str) -> Self {
        MetricSpec::RatioOfMeanRatios {
            numerator: numerator.into(),
            denominator: denominator.into(),
        }
    }

    /// Short machine-friendly name of the metric family.
    pub fn kind_name(&self) -> &'static str {
        match self {
            MetricSpec::GDifference { .. } => "g_difference",
            MetricSpec::MeanRatio { .. } => "mean_ratio",
            MetricSpec::SumRatio { .. } => "sum_ratio",
            MetricSpec::RatioOfMeanRatios { .. } => "ratio_of_mean_ratios",
            MetricSpec::GSumDifference { .. } => "g_sum_difference",
            MetricSpec::GDifferenceOfDifferences { .. } => "g_difference_of_differences",
        }
    }

    /// Response label, `numerator/denominator` for two-response metrics.
    pub fn response_label(&self) -> String {
        let comps = self.components();
        comps
            .iter()
            .map(|c| c.response)
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn is_ratio(&self) -> bool {
        matches!(
            self,
            MetricSpec::MeanRatio { .. }
                | MetricSpec::SumRatio { .. }
                | MetricSpec::RatioOfMeanRatios { .. }
        )
    }

    /// The transform applied to each component's arm means. Ratio kinds are
    /// adjusted on the log scale.
    pub fn transform(&self) -> GTransform {
        match self {
            MetricSpec::GDifference { g, .. }
            | MetricSpec::GSumDifference { g, .. }
            | MetricSpec::GDifferenceOfDifferences { g, .. } => g.clone(),
            _ => GTransform::Log,
        }
    }

    pub fn components(&self) -> Vec<MetricComponent<'_>> {
        match self {
            MetricSpec::GDifference { response, .. }
            | MetricSpec::MeanRatio { response }
            | MetricSpec::SumRatio { response }
            | MetricSpec::GSumDifference { response, .. } => vec![MetricComponent {
                response,
                sign: 1.0,
            }],
            MetricSpec::RatioOfMeanRatios {
                numerator,
                denominator,
            }
            | MetricSpec::GDifferenceOfDifferences {
                numerator,
                denominator,
                ..
            } => vec![
                MetricComponent {
                    response: numerator,
                    sign: 1.0,
                },
                MetricComponent {
                    response: denominator,
                    sign: -1.0,
                },
            ],
        }
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricSpec::GDifference { g, .. }
            | MetricSpec::GSumDifference { g, .. }
            | MetricSpec::GDifferenceOfDifferences { g, .. } => {
                write!(f, "{}[{}]({})", self.kind_name(), g.name(), self.response_label())
            }
            _ => write!(f, "{}({})", self.kind_name(), self.response_label()),
        }
    }
}

/// Per-arm count, sum and mean of one column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ArmTotals {
    pub n: usize,
    pub sum: f64,
    pub mean: f64,
}

pub(crate) fn arm_totals(values: &[f64], arms: &[Arm], arm: Arm) -> Result<ArmTotals> {
    let rows: Vec<usize> = arms
        .iter()
        .enumerate()
        .filter_map(|(i, &a)| (a == arm).then_some(i))
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyArm(arm));
    }
    let mean = stats::mean_at(values, &rows);
    Ok(ArmTotals {
        n: rows.len(),
        sum: rows.iter().map(|&i| values[i]).sum(),
        mean,
    })
}

pub fn arm_mean(data: &ExperimentDataset, response: &str, arm: Arm) -> Result<f64> {
    let values = data.response(response)?;
    Ok(arm_totals(values, data.arms(), arm)?.mean)
}

fn check_nonnegative(data: &ExperimentDataset, response: &str) -> Result<()> {
    let values = data.response(response)?;
    if let Some(i) = values.iter().position(|&v| v < 0.0) {
        return Err(Error::DomainViolation(format!(
            "ratio metrics need non-negative `{response}`; unit `{}` has {}",
            data.unit_ids()[i],
            values[i]
        )));
    }
    Ok(())
}

fn positive(x: f64, what: &str) -> Result<f64> {
    if !(x > MIN_POSITIVE_MEAN) {
        return Err(Error::DomainViolation(format!("{what} = {x} must be positive")));
    }
    Ok(x)
}

/// Control and treatment totals of a response, with the domain checks that
/// ratio kinds require.
pub(crate) fn response_totals(
    data: &ExperimentDataset,
    response: &str,
    ratio: bool,
) -> Result<(ArmTotals, ArmTotals)> {
    if ratio {
        check_nonnegative(data, response)?;
    }
    let values = data.response(response)?;
    let c = arm_totals(values, data.arms(), Arm::Control)?;
    let t = arm_totals(values, data.arms(), Arm::Treatment)?;
    if ratio {
        positive(c.mean, &format!("control mean of `{response}`"))?;
        positive(t.mean, &format!("treatment mean of `{response}`"))?;
    }
    Ok((c, t))
}

fn g_contrast(g: &GTransform, t: f64, c: f64, what: &str) -> Result<f64> {
    Ok(g.eval_checked(t, &format!("treatment {what}"))? - g.eval_checked(c, &format!("control {what}"))?)
}

/// The unadjusted estimate of `metric` on `data`.
pub fn raw_estimate(data: &ExperimentDataset, metric: &MetricSpec) -> Result<f64> {
    match metric {
        MetricSpec::GDifference { response, g } => {
            let (c, t) = response_totals(data, response, false)?;
            g_contrast(g, t.mean, c.mean, &format!("mean of `{response}`"))
        }
        MetricSpec::MeanRatio { response } => {
            let (c, t) = response_totals(data, response, true)?;
            Ok(t.mean / c.mean)
        }
        MetricSpec::SumRatio { response } => {
            let (c, t) = response_totals(data, response, true)?;
            Ok(t.sum / c.sum)
        }
        MetricSpec::RatioOfMeanRatios {
            numerator,
            denominator,
        } => {
            let (yc, yt) = response_totals(data, numerator, true)?;
            let (zc, zt) = response_totals(data, denominator, true)?;
            Ok((yt.mean / zt.mean) / (yc.mean / zc.mean))
        }
        MetricSpec::GSumDifference { response, g } => {
            let (c, t) = response_totals(data, response, false)?;
            g_contrast(g, t.sum, c.sum, &format!("sum of `{response}`"))
        }
        MetricSpec::GDifferenceOfDifferences {
            numerator,
            denominator,
            g,
        } => {
            let (yc, yt) = response_totals(data, numerator, false)?;
            let (zc, zt) = response_totals(data, denominator, false)?;
            Ok(g_contrast(g, yt.mean, yc.mean, &format!("mean of `{numerator}`"))?
                - g_contrast(g, zt.mean, zc.mean, &format!("mean of `{denominator}`"))?)
        }
    }
}

/// The g = log form of a ratio metric; exponentiating its raw estimate
/// recovers the ratio estimate.
pub fn log_scale_view(metric: &MetricSpec) -> Result<MetricSpec> {
    match metric {
        MetricSpec::MeanRatio { response } => Ok(MetricSpec::GDifference {
            response: response.clone(),
            g: GTransform::Log,
        }),
        MetricSpec::SumRatio { response } => Ok(MetricSpec::GSumDifference {
            response: response.clone(),
            g: GTransform::Log,
        }),
        MetricSpec::RatioOfMeanRatios {
            numerator,
            denominator,
        } => Ok(MetricSpec::GDifferenceOfDifferences {
            numerator: numerator.clone(),
            denominator: denominator.clone(),
            g: GTransform::Log,
        }),
        other => Err(Error::NotARatioMetric(other.to_string())),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Single-response fixture: treatment values then control values.
    pub(crate) fn two_arm(treatment: &[f64], control: &[f64]) -> ExperimentDataset {
        let mut cols = DatasetColumns::default();
        let mut y = Vec::new();
        for (i, &v) in treatment.iter().enumerate() {
            cols.unit_ids.push(format!("t{i}"));
            cols.arms.push(Arm::Treatment);
            y.push(v);
        }
        for (i, &v) in control.iter().enumerate() {
            cols.unit_ids.push(format!("c{i}"));
            cols.arms.push(Arm::Control);
            y.push(v);
        }
        let levels = vec!["a"; y.len()];
        cols.features.push(FeatureColumn::from_values("f", &levels));
        cols.responses.push(("y".into(), y));
        ExperimentDataset::from_columns(cols).unwrap()
    }

    fn two_response(t: &[(f64, f64)], c: &[(f64, f64)]) -> ExperimentDataset {
        let mut cols = DatasetColumns::default();
        let (mut y, mut z) = (Vec::new(), Vec::new());
        for (arm, rows) in [(Arm::Treatment, t), (Arm::Control, c)] {
            for (i, &(a, b)) in rows.iter().enumerate() {
                cols.unit_ids.push(format!("{}{i}", arm.label()));
                cols.arms.push(arm);
                y.push(a);
                z.push(b);
            }
        }
        cols.responses.push(("y".into(), y));
        cols.responses.push(("z".into(), z));
        ExperimentDataset::from_columns(cols).unwrap()
    }

    #[test]
    fn arm_mean_examples() {
        let d = two_arm(&[2.0, 4.0], &[1.0, 3.0]);
        assert_eq!(arm_mean(&d, "y", Arm::Treatment).unwrap(), 3.0);
        let d = two_arm(&[7.0], &[1.0]);
        assert_eq!(arm_mean(&d, "y", Arm::Treatment).unwrap(), 7.0);
        assert!(matches!(
            arm_mean(&d, "nope", Arm::Control),
            Err(Error::UnknownResponse(_))
        ));
    }

    #[test]
    fn arm_mean_of_exponential_draws() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let draws: Vec<f64> = (0..1000).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let d = two_arm(&draws, &[1.0]);
        let m = arm_mean(&d, "y", Arm::Treatment).unwrap();
        // Exp(1) has sd 1, so SE = 1/sqrt(1000).
        assert!((m - 1.0).abs() < 3.0 / 1000f64.sqrt(), "mean {m}");
    }

    #[test]
    fn empty_arm_is_rejected() {
        let mut cols = DatasetColumns::default();
        cols.unit_ids = vec!["a".into(), "b".into()];
        cols.arms = vec![Arm::Control, Arm::Control];
        cols.responses.push(("y".into(), vec![1.0, 2.0]));
        assert!(matches!(
            ExperimentDataset::from_columns(cols),
            Err(Error::EmptyArm(Arm::Treatment))
        ));
    }

    #[test]
    fn schema_violations() {
        let mut cols = DatasetColumns::default();
        cols.unit_ids = vec!["a".into(), "a".into()];
        cols.arms = vec![Arm::Control, Arm::Treatment];
        cols.responses.push(("y".into(), vec![1.0, 2.0]));
        assert!(matches!(ExperimentDataset::from_columns(cols.clone()), Err(Error::Schema(_))));
        cols.unit_ids[1] = "b".into();
        cols.responses[0].1[1] = f64::NAN;
        assert!(matches!(ExperimentDataset::from_columns(cols), Err(Error::Schema(_))));
    }

    #[test]
    fn raw_estimate_examples() {
        let d = two_arm(&[2.0, 4.0], &[1.0, 3.0]);
        assert_eq!(raw_estimate(&d, &MetricSpec::mean_ratio("y")).unwrap(), 1.5);
        assert_eq!(raw_estimate(&d, &MetricSpec::sum_ratio("y")).unwrap(), 1.5);
        let same = two_arm(&[2.0, 4.0], &[2.0, 4.0]);
        assert_eq!(
            raw_estimate(&same, &MetricSpec::g_difference("y", GTransform::Log)).unwrap(),
            0.0
        );
    }

    #[test]
    fn sum_ratio_uses_arm_sizes() {
        let d = two_arm(&[2.0, 4.0, 6.0], &[1.0, 3.0]);
        assert_eq!(raw_estimate(&d, &MetricSpec::sum_ratio("y")).unwrap(), 12.0 / 4.0);
        assert_eq!(raw_estimate(&d, &MetricSpec::mean_ratio("y")).unwrap(), 2.0);
    }

    #[test]
    fn ratio_of_mean_ratios_fixture() {
        let d = two_response(&[(4.0, 2.0), (6.0, 2.0)], &[(1.0, 1.0), (3.0, 1.0)]);
        // (5/2) / (2/1)
        let v = raw_estimate(&d, &MetricSpec::ratio_of_mean_ratios("y", "z")).unwrap();
        assert!((v - 1.25).abs() < 1e-15);
    }

    #[test]
    fn log_domain_guard() {
        let d = two_arm(&[0.0, 0.0], &[1.0, 3.0]);
        assert!(matches!(
            raw_estimate(&d, &MetricSpec::g_difference("y", GTransform::Log)),
            Err(Error::DomainViolation(_))
        ));
        assert!(matches!(
            raw_estimate(&d, &MetricSpec::mean_ratio("y")),
            Err(Error::DomainViolation(_))
        ));
        let neg = two_arm(&[-1.0, 5.0], &[1.0, 3.0]);
        assert!(matches!(
            raw_estimate(&neg, &MetricSpec::mean_ratio("y")),
            Err(Error::DomainViolation(_))
        ));
    }

    #[test]
    fn log_view_of_mean_ratio() {
        assert_eq!(
            log_scale_view(&MetricSpec::mean_ratio("y")).unwrap(),
            MetricSpec::g_difference("y", GTransform::Log)
        );
        assert!(matches!(
            log_scale_view(&MetricSpec::g_difference("y", GTransform::Identity)),
            Err(Error::NotARatioMetric(_))
        ));
    }

    #[test]
    fn custom_transform_derivative_check() {
        let good = GTransform::custom("sqrt", f64::sqrt, |x| 0.5 / x.sqrt());
        assert!(good.check_derivative(4.0).is_ok());
        let bad = GTransform::custom("sqrt-wrong", f64::sqrt, |x| 1.0 / x.sqrt());
        assert!(matches!(bad.check_derivative(4.0), Err(Error::InvalidTransform(_))));
        let d = two_arm(&[4.0, 4.0], &[1.0, 1.0]);
        assert!(raw_estimate(&d, &MetricSpec::g_difference("y", bad)).is_err());
        let v = raw_estimate(&d, &MetricSpec::g_difference("y", good)).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_and_log_transform_laws() {
        for x in [0.5, 1.0, 3.0, 1e6] {
            assert_eq!(GTransform::Identity.value(x), x);
            assert_eq!(GTransform::Identity.derivative(x), 1.0);
            assert_eq!(GTransform::Log.value(x), x.ln());
            assert_eq!(GTransform::Log.derivative(x), 1.0 / x);
        }
    }

    #[test]
    fn records_round_trip() {
        let d = two_arm(&[2.0, 4.0], &[1.0, 3.0]);
        let back = ExperimentDataset::from_records(d.records().collect()).unwrap();
        assert_eq!(back, d);
    }

    fn arb_dataset() -> impl Strategy<Value = ExperimentDataset> {
        (
            prop::collection::vec(0.01f64..100.0, 1..20),
            prop::collection::vec(0.01f64..100.0, 1..20),
        )
            .prop_map(|(t, c)| two_arm(&t, &c))
    }

    proptest! {
        #[test]
        fn log_view_exponentiates_to_ratio(d in arb_dataset()) {
            for metric in [MetricSpec::mean_ratio("y"), MetricSpec::sum_ratio("y")] {
                let ratio = raw_estimate(&d, &metric).unwrap();
                let view = raw_estimate(&d, &log_scale_view(&metric).unwrap()).unwrap();
                prop_assert!((view.exp() - ratio).abs() <= 1e-12 * ratio);
            }
        }

        #[test]
        fn invariant_to_record_order(d in arb_dataset(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rows: Vec<usize> = (0..d.len()).collect();
            rows.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled = ExperimentDataset::from_records(rows.iter().map(|&i| d.record(i)).collect()).unwrap();
            for metric in [MetricSpec::mean_ratio("y"), MetricSpec::sum_ratio("y"),
                           MetricSpec::g_difference("y", GTransform::Identity)] {
                let a = raw_estimate(&d, &metric).unwrap();
                let b = raw_estimate(&shuffled, &metric).unwrap();
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }

        #[test]
        fn swapping_arms_negates_or_inverts(d in arb_dataset()) {
            let s = d.with_arms_swapped();
            let id = MetricSpec::g_difference("y", GTransform::Identity);
            let a = raw_estimate(&d, &id).unwrap();
            let b = raw_estimate(&s, &id).unwrap();
            prop_assert!((a + b).abs() <= 1e-12 * a.abs().max(1.0));
            for metric in [MetricSpec::mean_ratio("y"), MetricSpec::sum_ratio("y")] {
                let r = raw_estimate(&d, &metric).unwrap();
                let rs = raw_estimate(&s, &metric).unwrap();
                prop_assert!((r * rs - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn custom_derivative_matches_finite_difference(x in 0.01f64..1e4) {
            let g = GTransform::custom("log1p", f64::ln_1p, |x| 1.0 / (1.0 + x));
            prop_assert!(g.check_derivative(x).is_ok());
        }

        #[test]
        fn ratio_of_ratios_log_view(
            t in prop::collection::vec((0.1f64..50.0, 0.1f64..50.0), 1..15),
            c in prop::collection::vec((0.1f64..50.0, 0.1f64..50.0), 1..15),
        ) {
            let d = two_response(&t, &c);
            let metric = MetricSpec::ratio_of_mean_ratios("y", "z");
            let r = raw_estimate(&d, &metric).unwrap();
            let v = raw_estimate(&d, &log_scale_view(&metric).unwrap()).unwrap();
            prop_assert!((v.exp() - r).abs() <= 1e-12 * r);
        }
    }
}
