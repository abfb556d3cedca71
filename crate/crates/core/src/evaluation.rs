//! Evaluation metrics: cross- and within-user R², per-user quintile
//! buckets, classification and pairwise ranking accuracy, and paired seed
//! comparisons.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{design_with_intercept, ols, paired_t, AnalyticsError, TTestResult};
use crate::dataset::{TargetType, TaskRecord};
use crate::features::{extract, FeatureNorm, NUMERIC_FEATURES, NUM_NUMERIC};

pub const NUM_CLASSES: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 values, got {0}")]
    TooFew(usize),
    #[error("truth values are constant; R² is undefined")]
    ConstantTruth,
    #[error("no usable users")]
    NoUsers,
    #[error("no pairs with distinct truths")]
    NoPairs,
    #[error(transparent)]
    Stats(#[from] AnalyticsError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(EvalError::LengthMismatch(a, b));
    }
    if a < 2 {
        return Err(EvalError::TooFew(a));
    }
    Ok(())
}

/// Pooled coefficient of determination.
pub fn r2_cross(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_pair(preds.len(), truths.len())?;
    let m = truths.iter().sum::<f64>() / truths.len() as f64;
    let ss_tot: f64 = truths.iter().map(|t| (t - m).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(EvalError::ConstantTruth);
    }
    let ss_res: f64 = preds.iter().zip(truths).map(|(p, t)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WithinUserR2 {
    pub value: f64,
    pub users_used: usize,
    /// Users with fewer than 2 trials or constant truths.
    pub users_skipped: usize,
}

fn group_by_user<'a>(user_ids: &[&'a str]) -> BTreeMap<&'a str, Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in user_ids.iter().enumerate() {
        groups.entry(u).or_default().push(i);
    }
    groups
}

/// Unweighted mean of per-user R².
pub fn r2_within(preds: &[f64], truths: &[f64], user_ids: &[&str]) -> Result<WithinUserR2> {
    check_pair(preds.len(), truths.len())?;
    if user_ids.len() != preds.len() {
        return Err(EvalError::LengthMismatch(preds.len(), user_ids.len()));
    }
    let mut total = 0.0;
    let (mut used, mut skipped) = (0, 0);
    for idx in group_by_user(user_ids).values() {
        let p: Vec<f64> = idx.iter().map(|&i| preds[i]).collect();
        let t: Vec<f64> = idx.iter().map(|&i| truths[i]).collect();
        match r2_cross(&p, &t) {
            Ok(r2) => {
                total += r2;
                used += 1;
            }
            Err(_) => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("within-user R²: skipped {skipped} users with <2 trials or constant times");
    }
    if used == 0 {
        return Err(EvalError::NoUsers);
    }
    Ok(WithinUserR2 {
        value: total / used as f64,
        users_used: used,
        users_skipped: skipped,
    })
}

/// Per-user rank quintiles: `min(4, ⌊5·rank/n⌋)` over ascending times, ties
/// broken by record order. Users with fewer than 5 trials get `None`.
pub fn bucketize(times: &[f64], user_ids: &[&str]) -> Result<Vec<Option<usize>>> {
    if times.len() != user_ids.len() {
        return Err(EvalError::LengthMismatch(times.len(), user_ids.len()));
    }
    let mut labels = vec![None; times.len()];
    let mut skipped = 0;
    for idx in group_by_user(user_ids).values() {
        let n = idx.len();
        if n < NUM_CLASSES {
            skipped += 1;
            continue;
        }
        let mut order = idx.clone();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        for (rank, &i) in order.iter().enumerate() {
            labels[i] = Some((NUM_CLASSES * rank / n).min(NUM_CLASSES - 1));
        }
    }
    if skipped > 0 {
        log::warn!("bucketize: skipped {skipped} users with fewer than {NUM_CLASSES} trials");
    }
    Ok(labels)
}

pub fn classification_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::TooFew(0));
    }
    Ok(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// Pairwise concordance over all unordered pairs with distinct truths; a
/// predicted tie scores one half.
pub fn ranking_accuracy(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_pair(preds.len(), truths.len())?;
    let mut score = 0.0;
    let mut pairs = 0u64;
    for i in 0..preds.len() {
        for j in i + 1..preds.len() {
            let dt = truths[i] - truths[j];
            if dt == 0.0 {
                continue;
            }
            pairs += 1;
            let dp = preds[i] - preds[j];
            if dp == 0.0 {
                score += 0.5;
            } else if (dp > 0.0) == (dt > 0.0) {
                score += 1.0;
            }
        }
    }
    if pairs == 0 {
        return Err(EvalError::NoPairs);
    }
    Ok(score / pairs as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub test: TTestResult,
    pub significant_05: bool,
    pub significant_01: bool,
    /// Mean of `a − b`.
    pub mean_difference: f64,
}

/// Paired t test of metric runs `a` against `b`, paired by seed.
pub fn compare_models(a: &[f64], b: &[f64]) -> Result<Comparison> {
    let test = paired_t(a, b)?;
    Ok(Comparison {
        significant_05: test.p < 0.05,
        significant_01: test.p < 0.01,
        mean_difference: test.mean_a - test.mean_b,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub within_user_r2: f64,
    pub cross_user_r2: f64,
    pub classification_accuracy: f64,
    pub ranking_accuracy: f64,
}

/// Metrics of one model over one or more seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub split: String,
    pub seeds: Vec<u64>,
    pub within_user_r2: Vec<f64>,
    pub cross_user_r2: Vec<f64>,
    pub classification_accuracy: Vec<f64>,
    pub ranking_accuracy: Vec<f64>,
}

impl EvalReport {
    pub fn new(model: impl Into<String>, split: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            split: split.into(),
            seeds: vec![],
            within_user_r2: vec![],
            cross_user_r2: vec![],
            classification_accuracy: vec![],
            ranking_accuracy: vec![],
        }
    }

    pub fn push(&mut self, m: &SeedMetrics) {
        self.seeds.push(m.seed);
        self.within_user_r2.push(m.within_user_r2);
        self.cross_user_r2.push(m.cross_user_r2);
        self.classification_accuracy.push(m.classification_accuracy);
        self.ranking_accuracy.push(m.ranking_accuracy);
    }

    fn avg(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn mean(&self) -> [f64; 4] {
        [
            Self::avg(&self.within_user_r2),
            Self::avg(&self.cross_user_r2),
            Self::avg(&self.classification_accuracy),
            Self::avg(&self.ranking_accuracy),
        ]
    }
}

/// Table of mean metrics, one row per report.
pub fn table_text(reports: &[EvalReport]) -> String {
    let mut s = format!(
        "{:<20} {:>12} {:>12} {:>14} {:>9}\n",
        "model", "within-user", "cross-user", "classification", "ranking"
    );
    for r in reports {
        let [w, c, k, p] = r.mean();
        let _ = writeln!(s, "{:<20} {:>12.4} {:>12.4} {:>14.4} {:>9.4}", r.model, w, c, k, p);
    }
    s
}

/// Truths and predictions of one model on one split, aligned by index.
pub struct EvalInputs<'a> {
    pub truths: &'a [f64],
    pub user_ids: &'a [&'a str],
    pub regression: &'a [f64],
    /// Predicted labels; `None` derives them by bucketizing `regression`.
    pub classes: Option<&'a [usize]>,
}

/// Computes the four metrics. Classification is scored only on trials of
/// users with at least five test trials.
pub fn evaluate(seed: u64, inputs: &EvalInputs<'_>) -> Result<SeedMetrics> {
    let EvalInputs {
        truths,
        user_ids,
        regression,
        classes,
    } = *inputs;
    let true_labels = bucketize(truths, user_ids)?;
    let pred_labels: Vec<Option<usize>> = match classes {
        Some(c) => c.iter().map(|&v| Some(v)).collect(),
        None => bucketize(regression, user_ids)?,
    };
    if pred_labels.len() != truths.len() {
        return Err(EvalError::LengthMismatch(pred_labels.len(), truths.len()));
    }
    let (p, t): (Vec<usize>, Vec<usize>) = true_labels
        .iter()
        .zip(&pred_labels)
        .filter_map(|(t, p)| Some(((*p)?, (*t)?)))
        .unzip();
    Ok(SeedMetrics {
        seed,
        within_user_r2: r2_within(regression, truths, user_ids)?.value,
        cross_user_r2: r2_cross(regression, truths)?,
        classification_accuracy: classification_accuracy(&p, &t)?,
        ranking_accuracy: ranking_accuracy(regression, truths)?,
    })
}

/// Linear baselines on structured features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// One standardized numeric feature, by index into [`NUMERIC_FEATURES`].
    Numeric(usize),
    /// Target-type dummies.
    Type,
    /// All seven numerics plus type dummies.
    StructuredAll,
}

impl Baseline {
    /// One row per single feature, then structured-all.
    pub fn all() -> Vec<Baseline> {
        let mut v: Vec<Baseline> = (0..NUM_NUMERIC).map(Baseline::Numeric).collect();
        v.insert(6, Baseline::Type);
        v.push(Baseline::StructuredAll);
        v
    }

    pub fn name(&self) -> String {
        match self {
            Baseline::Numeric(i) => NUMERIC_FEATURES[*i].to_string(),
            Baseline::Type => "type".into(),
            Baseline::StructuredAll => "structured-all".into(),
        }
    }

    fn design(&self, records: &[TaskRecord], norm: &FeatureNorm) -> (nalgebra::DMatrix<f64>, Vec<String>) {
        let feats: Vec<_> = records.iter().map(|r| extract(r, norm)).collect();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut names = vec!["intercept".to_string()];
        let numeric: Vec<usize> = match self {
            Baseline::Numeric(i) => vec![*i],
            Baseline::Type => vec![],
            Baseline::StructuredAll => (0..NUM_NUMERIC).collect(),
        };
        for j in numeric {
            cols.push(feats.iter().map(|f| f.numeric[j]).collect());
            names.push(NUMERIC_FEATURES[j].into());
        }
        if matches!(self, Baseline::Type | Baseline::StructuredAll) {
            for t in &TargetType::ALL[1..] {
                cols.push(feats.iter().map(|f| f64::from(u8::from(f.type_id == t.id()))).collect());
                names.push(t.as_str().into());
            }
        }
        (design_with_intercept(&cols), names)
    }

    /// Fits on `train` and predicts normalized time for `test`.
    pub fn fit_predict(&self, train: &[TaskRecord], test: &[TaskRecord], norm: &FeatureNorm) -> Result<Vec<f64>> {
        let (x, names) = self.design(train, norm);
        let y: Vec<f64> = train.iter().map(|r| norm.normalize_time(r.search_time_s)).collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let fit = ols(&x, &y, &name_refs)?;
        let (xt, _) = self.design(test, norm);
        Ok(fit.predict(&xt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2_perfect_and_constant() {
        let t = [1.0, 3.0, 2.0, 5.0];
        assert_eq!(r2_cross(&t, &t).unwrap(), 1.0);
        assert_eq!(r2_cross(&[2.75; 4], &t).unwrap(), 0.0);
        assert_eq!(r2_cross(&t, &[1.0; 4]).unwrap_err(), EvalError::ConstantTruth);
    }

    #[test]
    fn within_single_user_equals_cross() {
        let t = [1.0, 3.0, 2.0, 5.0];
        let p = [1.5, 2.0, 2.5, 4.0];
        let w = r2_within(&p, &t, &["a"; 4]).unwrap();
        assert_eq!(w.value, r2_cross(&p, &t).unwrap());
        let w = r2_within(&t, &t, &["a", "b", "a", "b"]).unwrap();
        assert_eq!(w.value, 1.0);
        assert_eq!(w.users_used, 2);
    }

    #[test]
    fn bucketize_examples() {
        let t: Vec<f64> = (1..=5).map(f64::from).collect();
        let l = bucketize(&t, &["u"; 5]).unwrap();
        assert_eq!(l, (0..5).map(Some).collect::<Vec<_>>());
        let t: Vec<f64> = (0..10).map(|i| f64::from((i * 7) % 10)).collect();
        let l = bucketize(&t, &["u"; 10]).unwrap();
        for c in 0..5 {
            assert_eq!(l.iter().filter(|v| **v == Some(c)).count(), 2);
        }
        assert_eq!(bucketize(&[1.0, 2.0], &["u", "u"]).unwrap(), vec![None, None]);
    }

    #[test]
    fn ranking_examples() {
        let t = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(ranking_accuracy(&t, &t).unwrap(), 1.0);
        assert_eq!(ranking_accuracy(&[0.0; 4], &t).unwrap(), 0.5);
        assert_eq!(ranking_accuracy(&[4.0, 3.0, 2.0, 1.0], &t).unwrap(), 0.0);
        assert_eq!(ranking_accuracy(&t, &[1.0; 4]).unwrap_err(), EvalError::NoPairs);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(classification_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(classification_accuracy(&[0, 1, 2], &[1, 2, 3]).unwrap(), 0.0);
    }

    #[test]
    fn identical_runs_not_significant() {
        let a = [0.3, 0.31, 0.29, 0.33, 0.3];
        let c = compare_models(&a, &a).unwrap();
        assert_eq!(c.test.t, 0.0);
        assert!(!c.significant_05);
        assert_eq!(c.test.dof, 4.0);
    }
}
