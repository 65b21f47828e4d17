//! Auxiliary prediction models `h(x, w)` and the ways they are trained on
//! experiment data.
//!
//! The adjustment only stays unbiased when a unit's prediction is independent
//! of its own arm assignment. [`Predictor::predict`] therefore takes the arm
//! as an explicit argument and never sees the unit's actual arm.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use crate::adjustment::PredictionSet;
use crate::error::{Error, Result};
use crate::metrics::{Arm, ExperimentDataset, FeatureColumn};
use crate::stats;

pub const DEFAULT_FOLDS: usize = 10;

/// Which experiment rows train the predictor, and whether it sees the arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FitMode {
    /// Train on control units only.
    ControlOnly,
    /// Train on every unit with the arm as a feature; predict as control.
    AllDataWithArmLabel,
    /// Train on every unit, ignoring the arm.
    AllDataNoArmLabel,
}

impl FitMode {
    pub const ALL: [FitMode; 3] = [
        FitMode::ControlOnly,
        FitMode::AllDataWithArmLabel,
        FitMode::AllDataNoArmLabel,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FitMode::ControlOnly => "control_only",
            FitMode::AllDataWithArmLabel => "all_with_arm",
            FitMode::AllDataNoArmLabel => "all_no_arm",
        }
    }

    pub fn parse(s: &str) -> Option<FitMode> {
        FitMode::ALL.into_iter().find(|m| m.label() == s)
    }

    pub fn uses_arm_label(self) -> bool {
        self == FitMode::AllDataWithArmLabel
    }
}

impl fmt::Display for FitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Categorical design matrix: the selected feature columns of a dataset.
#[derive(Debug, Clone)]
pub struct Design<'a> {
    columns: Vec<&'a FeatureColumn>,
    len: usize,
}

impl<'a> Design<'a> {
    pub fn new<S: AsRef<str>>(data: &'a ExperimentDataset, features: &[S]) -> Result<Self> {
        let columns = features
            .iter()
            .map(|f| data.feature(f.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Design {
            columns,
            len: data.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    /// Dense code of the row's level combination, unique within this design.
    pub fn cell_code(&self, row: usize) -> u64 {
        self.columns.iter().fold(0u64, |acc, c| {
            acc * c.levels.len().max(1) as u64 + u64::from(c.codes[row])
        })
    }

    pub fn levels(&self, row: usize) -> Vec<&'a str> {
        self.columns
            .iter()
            .map(|c| c.levels[c.codes[row] as usize].as_str())
            .collect()
    }
}

/// A model `h(x, w)` over categorical features.
pub trait Predictor {
    /// Trains on `rows` of the design. `arms` is given only when the arm
    /// label is a training feature.
    fn fit(&mut self, design: &Design<'_>, rows: &[usize], y: &[f64], arms: Option<&[Arm]>) -> Result<()>;

    /// Predictions for every row of the design, all evaluated at arm `arm`.
    fn predict(&self, design: &Design<'_>, arm: Arm) -> Result<Vec<f64>>;
}

/// Cell means over the full interaction of the features, optionally
/// including the arm. Equals least squares on fully interacted dummies.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellMeanModel {
    fitted: Option<CellMeans>,
}

#[derive(Debug, Clone, PartialEq)]
struct CellMeans {
    features: Vec<String>,
    uses_arm: bool,
    cells: BTreeMap<Vec<String>, f64>,
    global_mean: f64,
}

impl CellMeanModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted.is_some()
    }

    pub fn global_mean(&self) -> Result<f64> {
        Ok(self.fitted.as_ref().ok_or(Error::UnfittedModel)?.global_mean)
    }

    /// Fitted cells keyed by feature levels, with the arm label last when
    /// the model uses it.
    pub fn cells(&self) -> Result<&BTreeMap<Vec<String>, f64>> {
        Ok(&self.fitted.as_ref().ok_or(Error::UnfittedModel)?.cells)
    }

    /// Writes the model as tab-separated text: a header naming the key
    /// columns, a `global` line, then one line per cell.
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        let m = self.fitted.as_ref().ok_or(Error::UnfittedModel)?;
        let mut header = m.features.clone();
        if m.uses_arm {
            header.push("arm".into());
        }
        writeln!(out, "#cells\t{}", header.join("\t"))?;
        writeln!(out, "global\t{}", m.global_mean)?;
        for (key, mean) in &m.cells {
            writeln!(out, "cell\t{}\t{}", key.join("\t"), mean)?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Schema(format!("model line {line}: {msg}"));
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| bad(1, "empty model file"))??;
        let mut cols: Vec<String> = header.split('\t').map(str::to_owned).collect();
        if cols.first().map(String::as_str) != Some("#cells") {
            return Err(bad(1, "expected `#cells` header"));
        }
        cols.remove(0);
        let uses_arm = cols.last().map(String::as_str) == Some("arm");
        if uses_arm {
            cols.pop();
        }
        let width = cols.len() + usize::from(uses_arm);
        let mut global_mean = None;
        let mut cells = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            let parts: Vec<&str> = line.split('\t').collect();
            let parse = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(lineno, "invalid mean"))
            };
            match parts.first() {
                Some(&"global") if parts.len() == 2 => global_mean = Some(parse(parts[1])?),
                Some(&"cell") if parts.len() == width + 2 => {
                    let key = parts[1..=width].iter().map(|s| s.to_string()).collect();
                    cells.insert(key, parse(parts[width + 1])?);
                }
                _ => return Err(bad(lineno, "unrecognized line")),
            }
        }
        Ok(CellMeanModel {
            fitted: Some(CellMeans {
                features: cols,
                uses_arm,
                cells,
                global_mean: global_mean.ok_or_else(|| bad(2, "missing global mean"))?,
            }),
        })
    }
}

impl Predictor for CellMeanModel {
    fn fit(&mut self, design: &Design<'_>, rows: &[usize], y: &[f64], arms: Option<&[Arm]>) -> Result<()> {
        if rows.is_empty() {
            return Err(Error::EmptyTrainingSet("cell-mean model".into()));
        }
        let mut groups: HashMap<(u64, Option<Arm>), Vec<f64>> = HashMap::new();
        let mut example_row: HashMap<(u64, Option<Arm>), usize> = HashMap::new();
        for &r in rows {
            let key = (design.cell_code(r), arms.map(|a| a[r]));
            groups.entry(key).or_default().push(y[r]);
            example_row.entry(key).or_insert(r);
        }
        let mut cells = BTreeMap::new();
        for (key, values) in &groups {
            let mut levels: Vec<String> =
                design.levels(example_row[key]).into_iter().map(str::to_owned).collect();
            if let Some(arm) = key.1 {
                levels.push(arm.label().to_owned());
            }
            cells.insert(levels, stats::mean(values));
        }
        let training: Vec<f64> = rows.iter().map(|&r| y[r]).collect();
        self.fitted = Some(CellMeans {
            features: design.feature_names().into_iter().map(str::to_owned).collect(),
            uses_arm: arms.is_some(),
            cells,
            global_mean: stats::mean(&training),
        });
        Ok(())
    }

    fn predict(&self, design: &Design<'_>, arm: Arm) -> Result<Vec<f64>> {
        let m = self.fitted.as_ref().ok_or(Error::UnfittedModel)?;
        if design.feature_names() != m.features {
            return Err(Error::Schema(format!(
                "model was fitted on features [{}], design has [{}]",
                m.features.join(", "),
                design.feature_names().join(", ")
            )));
        }
        let mut cache: HashMap<u64, f64> = HashMap::new();
        Ok((0..design.len())
            .map(|r| {
                *cache.entry(design.cell_code(r)).or_insert_with(|| {
                    let mut key: Vec<String> =
                        design.levels(r).into_iter().map(str::to_owned).collect();
                    if m.uses_arm {
                        key.push(arm.label().to_owned());
                    }
                    m.cells.get(&key).copied().unwrap_or(m.global_mean)
                })
            })
            .collect())
    }
}

/// A predictor trained on one response under one fit mode.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedPredictor<P> {
    pub model: P,
    pub response: String,
    pub features: Vec<String>,
    pub mode: FitMode,
}

fn training_rows(data: &ExperimentDataset, mode: FitMode, candidates: impl Iterator<Item = usize>) -> Vec<usize> {
    let arms = data.arms();
    match mode {
        FitMode::ControlOnly => candidates.filter(|&r| arms[r] == Arm::Control).collect(),
        _ => candidates.collect(),
    }
}

/// Trains `model` on the rows selected by `mode`.
pub fn fit_predictor<P: Predictor, S: AsRef<str>>(
    data: &ExperimentDataset,
    response: &str,
    features: &[S],
    mode: FitMode,
    mut model: P,
) -> Result<FittedPredictor<P>> {
    let y = data.response(response)?;
    let design = Design::new(data, features)?;
    let rows = training_rows(data, mode, 0..data.len());
    if rows.is_empty() {
        return Err(Error::EmptyTrainingSet(mode.label().into()));
    }
    let arms = mode.uses_arm_label().then(|| data.arms());
    model.fit(&design, &rows, y, arms)?;
    Ok(FittedPredictor {
        model,
        response: response.to_owned(),
        features: features.iter().map(|f| f.as_ref().to_owned()).collect(),
        mode,
    })
}

/// Predictions for every unit of `data` evaluated as if in control.
/// `h(x, 1)` is filled in when the model can distinguish arms, and equals
/// `h(x, 0)` for the arm-agnostic mode.
pub fn predict_as_control<P: Predictor>(
    fitted: &FittedPredictor<P>,
    data: &ExperimentDataset,
) -> Result<PredictionSet> {
    let design = Design::new(data, &fitted.features)?;
    let h0 = fitted.model.predict(&design, Arm::Control)?;
    let set = PredictionSet::new(fitted.response.clone(), h0.clone())?.with_fit_mode(fitted.mode);
    match fitted.mode {
        FitMode::ControlOnly => Ok(set),
        FitMode::AllDataNoArmLabel => set.with_treatment(h0),
        FitMode::AllDataWithArmLabel => set.with_treatment(fitted.model.predict(&design, Arm::Treatment)?),
    }
}

/// Fold of a unit, from a stable hash of its id.
pub fn fold_of(unit_id: &str, folds: usize) -> usize {
    (stats::fnv1a64(unit_id.as_bytes()) % folds as u64) as usize
}

/// Pearson correlation between out-of-fold predictions and observed
/// responses, pooled over all folds. Arm-labelled models predict each unit
/// at its observed arm. Returns 0 when the pooled predictions are constant.
pub fn cross_validated_correlation<P: Predictor + Clone, S: AsRef<str>>(
    data: &ExperimentDataset,
    response: &str,
    features: &[S],
    mode: FitMode,
    model: &P,
    folds: usize,
) -> Result<f64> {
    if folds < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 folds, got {folds}")));
    }
    let y = data.response(response)?;
    let design = Design::new(data, features)?;
    let fold: Vec<usize> = data.unit_ids().iter().map(|id| fold_of(id, folds)).collect();
    let arms = mode.uses_arm_label().then(|| data.arms());

    let mut observed = Vec::with_capacity(data.len());
    let mut predicted = Vec::with_capacity(data.len());
    for k in 0..folds {
        let test: Vec<usize> = (0..data.len()).filter(|&r| fold[r] == k).collect();
        let train = training_rows(data, mode, (0..data.len()).filter(|&r| fold[r] != k));
        if test.is_empty() || train.is_empty() {
            return Err(Error::InsufficientData(format!(
                "fold {k} of {folds} has {} held-out and {} training rows",
                test.len(),
                train.len()
            )));
        }
        let mut m = model.clone();
        m.fit(&design, &train, y, arms)?;
        let by_arm = if arms.is_some() {
            [m.predict(&design, Arm::Control)?, m.predict(&design, Arm::Treatment)?]
        } else {
            let h = m.predict(&design, Arm::Control)?;
            [h.clone(), h]
        };
        for r in test {
            let arm = data.arms()[r];
            observed.push(y[r]);
            predicted.push(by_arm[arm.indicator() as usize][r]);
        }
    }
    Ok(stats::pearson(&predicted, &observed).unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::DatasetColumns;

    fn fixture(rows: &[(&str, &str, Arm, f64)]) -> ExperimentDataset {
        let mut c = DatasetColumns::default();
        let mut y = Vec::new();
        let (mut g, mut k) = (Vec::new(), Vec::new());
        for (i, &(gender, country, arm, v)) in rows.iter().enumerate() {
            c.unit_ids.push(format!("id{i}"));
            c.arms.push(arm);
            y.push(v);
            g.push(gender);
            k.push(country);
        }
        c.responses.push(("y".into(), y));
        c.features.push(FeatureColumn::from_values("gender", &g));
        c.features.push(FeatureColumn::from_values("country", &k));
        ExperimentDataset::from_columns(c).unwrap()
    }

    use Arm::{Control as C, Treatment as T};

    #[test]
    fn per_cell_recovery() {
        let d = fixture(&[
            ("f", "us", C, 1.0),
            ("f", "us", T, 3.0),
            ("f", "de", C, 10.0),
            ("m", "us", T, 5.0),
            ("m", "de", C, 7.0),
            ("m", "de", T, 8.0),
        ]);
        let fit = fit_predictor(&d, "y", &["gender", "country"], FitMode::AllDataNoArmLabel, CellMeanModel::new()).unwrap();
        let p = predict_as_control(&fit, &d).unwrap();
        assert_eq!(p.h0(), &[2.0, 2.0, 10.0, 5.0, 7.5, 7.5]);
        assert_eq!(p.h1().unwrap(), p.h0());
    }

    #[test]
    fn single_level_predicts_training_mean() {
        let d = fixture(&[("f", "us", C, 1.0), ("f", "us", T, 4.0), ("f", "us", C, 2.5)]);
        let fit = fit_predictor(&d, "y", &["gender"], FitMode::AllDataNoArmLabel, CellMeanModel::new()).unwrap();
        let p = predict_as_control(&fit, &d).unwrap();
        let mean = stats::mean(&[1.0, 4.0, 2.5]);
        assert!(p.h0().iter().all(|&v| v == mean));
    }

    #[test]
    fn control_only_falls_back_to_global_mean() {
        let d = fixture(&[("f", "us", C, 1.0), ("f", "us", C, 3.0), ("m", "de", T, 9.0)]);
        let fit = fit_predictor(&d, "y", &["gender", "country"], FitMode::ControlOnly, CellMeanModel::new()).unwrap();
        let p = predict_as_control(&fit, &d).unwrap();
        assert_eq!(p.h0(), &[2.0, 2.0, 2.0]);
        assert!(p.h1().is_none());
    }

    #[test]
    fn arm_label_model_predicts_as_control() {
        let d = fixture(&[("f", "us", C, 1.0), ("f", "us", T, 3.0), ("m", "us", C, 5.0)]);
        let fit = fit_predictor(&d, "y", &["gender"], FitMode::AllDataWithArmLabel, CellMeanModel::new()).unwrap();
        let p = predict_as_control(&fit, &d).unwrap();
        assert_eq!(p.h0(), &[1.0, 1.0, 5.0]);
        // (m, treatment) is unseen and falls back to the global mean.
        assert_eq!(p.h1().unwrap(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn errors() {
        let d = fixture(&[("f", "us", T, 1.0), ("f", "us", C, 2.0)]);
        assert!(matches!(
            fit_predictor(&d, "y", &["age"], FitMode::ControlOnly, CellMeanModel::new()),
            Err(Error::UnknownFeature(_))
        ));
        let design = Design::new(&d, &["gender"]).unwrap();
        assert!(matches!(
            CellMeanModel::new().predict(&design, C),
            Err(Error::UnfittedModel)
        ));
        assert!(matches!(
            cross_validated_correlation(&d, "y", &["gender"], FitMode::AllDataNoArmLabel, &CellMeanModel::new(), 1),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            cross_validated_correlation(&d, "y", &["gender"], FitMode::AllDataNoArmLabel, &CellMeanModel::new(), 10),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn persistence_round_trip() {
        let d = fixture(&[("f", "us", C, 1.0 / 3.0), ("f", "de", T, 3.0), ("m", "us", C, 5.0)]);
        let fit = fit_predictor(&d, "y", &["gender", "country"], FitMode::AllDataWithArmLabel, CellMeanModel::new()).unwrap();
        let mut buf = Vec::new();
        fit.model.save(&mut buf).unwrap();
        let loaded = CellMeanModel::load(buf.as_slice()).unwrap();
        assert_eq!(loaded, fit.model);
        assert!(CellMeanModel::load("nonsense\n".as_bytes()).is_err());
    }

    /// Least squares on fully interacted dummies by normal equations.
    fn least_squares_fit(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let p = x[0].len();
        let mut a = vec![vec![0.0; p + 1]; p];
        for (row, &yi) in x.iter().zip(y) {
            for i in 0..p {
                for j in 0..p {
                    a[i][j] += row[i] * row[j];
                }
                a[i][p] += row[i] * yi;
            }
        }
        for col in 0..p {
            let piv = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..p {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=p {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        let beta: Vec<f64> = (0..p).map(|i| a[i][p] / a[i][i]).collect();
        x.iter().map(|row| row.iter().zip(&beta).map(|(a, b)| a * b).sum()).collect()
    }

    #[test]
    fn matches_least_squares_with_interactions() {
        let rows = [
            ("f", "us", C, 1.0),
            ("f", "us", T, 2.5),
            ("f", "de", C, 4.0),
            ("f", "de", T, 4.5),
            ("m", "us", C, 7.0),
            ("m", "us", T, 6.0),
            ("m", "de", C, 0.5),
            ("m", "de", T, 2.0),
            ("m", "de", C, 3.0),
        ];
        let d = fixture(&rows);
        // intercept, male, de, male:de
        let x: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let m = f64::from(u8::from(r.0 == "m"));
                let de = f64::from(u8::from(r.1 == "de"));
                vec![1.0, m, de, m * de]
            })
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| r.3).collect();
        let ls = least_squares_fit(&x, &y);
        let fit = fit_predictor(&d, "y", &["gender", "country"], FitMode::AllDataNoArmLabel, CellMeanModel::new()).unwrap();
        let p = predict_as_control(&fit, &d).unwrap();
        for (a, b) in p.h0().iter().zip(&ls) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
