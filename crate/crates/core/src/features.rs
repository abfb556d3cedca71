//! Structured features: the seven numeric descriptors of a target plus its
//! type id, standardized with statistics fitted on the training split.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BBox, TargetType, TaskRecord};
use crate::tensor::{Graph, Scalar, TensorError, Var};

/// Names of the numeric features, in vector order.
pub const NUMERIC_FEATURES: [&str; 7] = ["x", "y", "distance", "width", "height", "area", "n_candidates"];
pub const NUM_NUMERIC: usize = 7;
/// Width of the learned target-type embedding.
pub const TYPE_EMBED_DIM: usize = 20;
/// Numerics plus type embedding, as fed to the structured MLP.
pub const STRUCTURED_DIM: usize = NUM_NUMERIC + TYPE_EMBED_DIM;

const _: () = assert!(STRUCTURED_DIM == 27);

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("need at least 2 records to fit normalization, got {0}")]
    TooFewRecords(usize),
    #[error("feature `{0}` has zero variance on the fitting set")]
    ZeroVariance(String),
    #[error("unknown target type `{0}`")]
    UnknownType(String),
    #[error("type id {0} outside 0..5")]
    TypeIdOutOfRange(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

/// Unstandardized numeric features of a target.
pub fn raw_numeric(bbox: &BBox, n_candidates: u32) -> [f64; NUM_NUMERIC] {
    [
        bbox.x,
        bbox.y,
        bbox.x.hypot(bbox.y),
        bbox.w,
        bbox.h,
        bbox.w * bbox.h,
        f64::from(n_candidates),
    ]
}

/// Means and population standard deviations of the numeric features and of
/// search time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub means: [f64; NUM_NUMERIC],
    pub stds: [f64; NUM_NUMERIC],
    pub time_mean: f64,
    pub time_std: f64,
    /// Split the statistics were fitted on.
    pub fitted_on: String,
    /// Always `"population"` (divide by n).
    pub std_kind: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredFeatures {
    pub numeric: [f64; NUM_NUMERIC],
    pub type_id: usize,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fits the normalization on `records`, labelled with the split name.
pub fn fit_norm(records: &[TaskRecord], fitted_on: &str) -> Result<FeatureNorm> {
    if records.len() < 2 {
        return Err(FeatureError::TooFewRecords(records.len()));
    }
    let raw: Vec<[f64; NUM_NUMERIC]> = records.iter().map(|r| raw_numeric(&r.bbox, r.n_candidates)).collect();
    let mut means = [0.0; NUM_NUMERIC];
    let mut stds = [0.0; NUM_NUMERIC];
    for j in 0..NUM_NUMERIC {
        let (m, s) = mean_std(raw.iter().map(|r| r[j]));
        if !(s > 0.0) {
            return Err(FeatureError::ZeroVariance(NUMERIC_FEATURES[j].into()));
        }
        means[j] = m;
        stds[j] = s;
    }
    let (time_mean, time_std) = mean_std(records.iter().map(|r| r.search_time_s));
    if !(time_std > 0.0) {
        return Err(FeatureError::ZeroVariance("search_time_s".into()));
    }
    Ok(FeatureNorm {
        means,
        stds,
        time_mean,
        time_std,
        fitted_on: fitted_on.into(),
        std_kind: "population".into(),
    })
}

impl FeatureNorm {
    pub fn standardize(&self, raw: &[f64; NUM_NUMERIC]) -> [f64; NUM_NUMERIC] {
        std::array::from_fn(|j| (raw[j] - self.means[j]) / self.stds[j])
    }

    pub fn unstandardize(&self, z: &[f64; NUM_NUMERIC]) -> [f64; NUM_NUMERIC] {
        std::array::from_fn(|j| z[j] * self.stds[j] + self.means[j])
    }

    pub fn normalize_time(&self, seconds: f64) -> f64 {
        (seconds - self.time_mean) / self.time_std
    }

    /// Converts a normalized-time prediction back to seconds.
    pub fn denormalize_time(&self, pred: f64) -> f64 {
        pred * self.time_std + self.time_mean
    }
}

pub fn extract(record: &TaskRecord, norm: &FeatureNorm) -> StructuredFeatures {
    StructuredFeatures {
        numeric: norm.standardize(&raw_numeric(&record.bbox, record.n_candidates)),
        type_id: record.target_type.id(),
    }
}

pub fn extract_batch(records: &[TaskRecord], norm: &FeatureNorm) -> Vec<StructuredFeatures> {
    records.iter().map(|r| extract(r, norm)).collect()
}

/// Extraction from loose fields, as received over the wire.
pub fn extract_fields(bbox: &BBox, target_type: &str, n_candidates: u32, norm: &FeatureNorm) -> Result<StructuredFeatures> {
    let kind = TargetType::from_str(target_type).map_err(|_| FeatureError::UnknownType(target_type.into()))?;
    Ok(StructuredFeatures {
        numeric: norm.standardize(&raw_numeric(bbox, n_candidates)),
        type_id: kind.id(),
    })
}

/// Differentiable lookup of type-embedding rows (`table` is 5×20).
pub fn embed_type<T: Scalar>(graph: &mut Graph<T>, table: Var, type_ids: &[usize]) -> Result<Var> {
    if let Some(&bad) = type_ids.iter().find(|&&i| i >= TargetType::COUNT) {
        return Err(FeatureError::TypeIdOutOfRange(bad));
    }
    Ok(graph.embedding(table, type_ids)?)
}
