use std::collections::BTreeMap;

use super::{Batch, ModelConfig, ModelError, Result, TARGET_RES};
use crate::dataset::{page_tensor, target_crop, target_mask, PageImage, TaskRecord};
use crate::evaluation::bucketize;
use crate::features::{extract, FeatureNorm, NUM_NUMERIC};
use crate::tensor::Tensor;

/// One trial, preprocessed for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Index into [`SampleSet::pages`].
    pub page: usize,
    /// 64×64×3 target crop.
    pub target: Tensor<f32>,
    pub numeric: [f32; NUM_NUMERIC],
    pub type_id: usize,
    /// g×g target footprint.
    pub mask: Tensor<f32>,
    /// Normalized search time.
    pub time: f32,
    /// Per-user quintile; `None` for users with fewer than five trials.
    pub label: Option<usize>,
    pub user_id: String,
    pub seconds: f64,
}

/// Preprocessed trials of one split, with page tensors shared across trials.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub page_res: usize,
    pub grid: usize,
    pub pages: Vec<Tensor<f32>>,
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn from_records(
        records: &[TaskRecord],
        images: &BTreeMap<String, PageImage>,
        norm: &FeatureNorm,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let grid = cfg.grid();
        let times: Vec<f64> = records.iter().map(|r| r.search_time_s).collect();
        let users: Vec<&str> = records.iter().map(|r| r.user_id.as_str()).collect();
        let labels = bucketize(&times, &users).map_err(|e| ModelError::Config(e.to_string()))?;
        let mut page_index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut pages = Vec::new();
        let mut samples = Vec::with_capacity(records.len());
        for (r, label) in records.iter().zip(labels) {
            let img = images
                .get(&r.page_id)
                .ok_or_else(|| ModelError::Config(format!("no screenshot loaded for page `{}`", r.page_id)))?;
            let page = *page_index.entry(r.page_id.as_str()).or_insert_with(|| {
                pages.push(page_tensor(img, cfg.page_res as u32));
                pages.len() - 1
            });
            let f = extract(r, norm);
            samples.push(Sample {
                page,
                target: target_crop(img, &r.bbox, TARGET_RES as u32)?,
                numeric: f.numeric.map(|v| v as f32),
                type_id: f.type_id,
                mask: target_mask(&r.bbox, grid)?,
                time: norm.normalize_time(r.search_time_s) as f32,
                label,
                user_id: r.user_id.clone(),
                seconds: r.search_time_s,
            });
        }
        Ok(Self {
            page_res: cfg.page_res,
            grid,
            pages,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples that carry a class label.
    pub fn labeled(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.samples[i].label.is_some()).collect()
    }

    /// Stacks the given samples. Class labels are included only when every
    /// selected sample has one.
    pub fn batch(&self, idx: &[usize]) -> Batch<f32> {
        let pick: Vec<&Sample> = idx.iter().map(|&i| &self.samples[i]).collect();
        let n = pick.len();
        let r = self.page_res;
        let mut pages = Vec::with_capacity(n * r * r * 3);
        let mut targets = Vec::with_capacity(n * TARGET_RES * TARGET_RES * 3);
        let mut masks = Vec::with_capacity(n * self.grid * self.grid);
        let mut numeric = Vec::with_capacity(n * NUM_NUMERIC);
        for s in &pick {
            pages.extend_from_slice(self.pages[s.page].data());
            targets.extend_from_slice(s.target.data());
            masks.extend_from_slice(s.mask.data());
            numeric.extend_from_slice(&s.numeric);
        }
        let labels: Option<Vec<usize>> = pick.iter().map(|s| s.label).collect();
        Batch {
            pages: Tensor::new(vec![n, r, r, 3], pages).expect("page buffer"),
            targets: Tensor::new(vec![n, TARGET_RES, TARGET_RES, 3], targets).expect("target buffer"),
            numeric: Tensor::new(vec![n, NUM_NUMERIC], numeric).expect("numeric buffer"),
            type_ids: pick.iter().map(|s| s.type_id).collect(),
            masks: Tensor::new(vec![n, self.grid, self.grid], masks).expect("mask buffer"),
            times: Some(Tensor::new(vec![n, 1], pick.iter().map(|s| s.time).collect()).expect("time buffer")),
            labels,
        }
    }
}
