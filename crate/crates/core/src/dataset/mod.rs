//! Trial logs: the JSON-lines schema, filtering and user-disjoint splits,
//! screenshot rasters, DOM leaf counting and the synthetic task generator.

mod raster;
mod synth;

pub use raster::{decode_png, encode_png, page_tensor, target_crop, target_mask, PageImage};
pub use synth::{
    clutter_score, synth_generate, DomNode, Element, FeatureStat, OracleParams, SynthConfig,
    SynthCorpus, SynthPage, ORACLE_COEFFICIENTS, ORACLE_TYPE_OFFSETS,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of the canonical page raster in pixels.
pub const PAGE_PX: u32 = 1024;
/// Smallest target width or height accepted.
pub const MIN_TARGET_PX: f64 = 15.0;
/// Trials slower than this are dropped by [`filter_trials`].
pub const MAX_SEARCH_TIME_S: f64 = 10.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{}invalid {field}: {message}", .line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid {
        line: Option<usize>,
        field: &'static str,
        message: String,
    },
    #[error("image error: {0}")]
    Image(String),
    #[error("malformed DOM: {0}")]
    Dom(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("generator config: {0}")]
    Config(String),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// The five target categories, in the fixed id order used everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetType {
    Image,
    Text,
    Link,
    Button,
    InputField,
}

impl TargetType {
    pub const ALL: [TargetType; 5] = [
        TargetType::Image,
        TargetType::Text,
        TargetType::Link,
        TargetType::Button,
        TargetType::InputField,
    ];
    pub const COUNT: usize = 5;

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TargetType::Image => "image",
            TargetType::Text => "text",
            TargetType::Link => "link",
            TargetType::Button => "button",
            TargetType::InputField => "input_field",
        }
    }
}

impl fmt::Display for TargetType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetType {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| DatasetError::Invalid {
                line: None,
                field: "target_type",
                message: format!("unknown target type '{s}'"),
            })
    }
}

/// Target bounding box in page pixels, top-left origin. Serialized as
/// `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Checks that the box is finite, non-degenerate and inside the page.
    pub fn check_bounds(&self) -> Result<()> {
        let page = f64::from(PAGE_PX);
        let invalid = |message: String| DatasetError::Invalid {
            line: None,
            field: "bbox",
            message,
        };
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(invalid(format!("non-finite coordinates {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(invalid(format!("degenerate box {}x{}", self.w, self.h)));
        }
        if self.x < 0.0 || self.y < 0.0 || self.x + self.w > page || self.y + self.h > page {
            return Err(invalid(format!(
                "box [{}, {}, {}, {}] exceeds the {page}x{page} page",
                self.x, self.y, self.w, self.h
            )));
        }
        Ok(())
    }

    /// [`BBox::check_bounds`] plus the 15 px minimum target size.
    pub fn validate(&self) -> Result<()> {
        self.check_bounds()?;
        if self.w < MIN_TARGET_PX || self.h < MIN_TARGET_PX {
            return Err(DatasetError::Invalid {
                line: None,
                field: "bbox",
                message: format!(
                    "target {}x{} is below the {MIN_TARGET_PX}px minimum width/height",
                    self.w, self.h
                ),
            });
        }
        Ok(())
    }
}

/// One visual search trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub page_id: String,
    /// Screenshot path relative to the trial log.
    pub screenshot: String,
    pub bbox: BBox,
    pub target_type: TargetType,
    /// DOM leaf count of the page.
    pub n_candidates: u32,
    pub user_id: String,
    pub search_time_s: f64,
    pub correct: bool,
}

impl TaskRecord {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if self.n_candidates == 0 {
            return Err(DatasetError::Invalid {
                line: None,
                field: "n_candidates",
                message: "must be positive".into(),
            });
        }
        if !(self.search_time_s.is_finite() && self.search_time_s > 0.0) {
            return Err(DatasetError::Invalid {
                line: None,
                field: "search_time_s",
                message: format!("{} is not a positive duration", self.search_time_s),
            });
        }
        if self.user_id.is_empty() {
            return Err(DatasetError::Invalid {
                line: None,
                field: "user_id",
                message: "empty".into(),
            });
        }
        Ok(())
    }
}

/// Reads a JSON-lines trial log. Blank lines are ignored.
pub fn load_trials(path: impl AsRef<Path>) -> Result<Vec<TaskRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: TaskRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        record.validate().map_err(|e| match e {
            DatasetError::Invalid { field, message, .. } => DatasetError::Invalid {
                line: Some(lineno),
                field,
                message,
            },
            other => other,
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn save_trials(records: &[TaskRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| DatasetError::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Decodes the screenshot of every page referenced by `records`, keyed by
/// page id. Relative screenshot paths resolve against `root`.
pub fn load_screenshots(root: impl AsRef<Path>, records: &[TaskRecord]) -> Result<BTreeMap<String, PageImage>> {
    let mut out = BTreeMap::new();
    for r in records {
        if out.contains_key(&r.page_id) {
            continue;
        }
        let bytes = std::fs::read(root.as_ref().join(&r.screenshot))?;
        out.insert(r.page_id.clone(), decode_png(&bytes)?);
    }
    Ok(out)
}

/// Counts and mean durations of the trial classes seen by [`filter_trials`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_count: usize,
    pub kept_count: usize,
    /// Correct trials slower than the 10 s cutoff.
    pub long_count: usize,
    pub incorrect_count: usize,
    pub mean_kept_s: Option<f64>,
    pub mean_long_s: Option<f64>,
    pub mean_incorrect_s: Option<f64>,
    /// Mean over all correct trials, long ones included.
    pub mean_correct_s: Option<f64>,
}

fn mean_of(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Keeps correct trials no slower than 10 s.
pub fn filter_trials(records: &[TaskRecord]) -> (Vec<TaskRecord>, FilterReport) {
    let mut kept = Vec::new();
    let (mut long, mut incorrect, mut correct) = (Vec::new(), Vec::new(), Vec::new());
    for r in records {
        if !r.correct {
            incorrect.push(r.search_time_s);
            continue;
        }
        correct.push(r.search_time_s);
        if r.search_time_s > MAX_SEARCH_TIME_S {
            long.push(r.search_time_s);
        } else {
            kept.push(r.clone());
        }
    }
    let kept_times: Vec<f64> = kept.iter().map(|r| r.search_time_s).collect();
    let report = FilterReport {
        input_count: records.len(),
        kept_count: kept.len(),
        long_count: long.len(),
        incorrect_count: incorrect.len(),
        mean_kept_s: mean_of(&kept_times),
        mean_long_s: mean_of(&long),
        mean_incorrect_s: mean_of(&incorrect),
        mean_correct_s: mean_of(&correct),
    };
    (kept, report)
}

/// Default train/validation/test user proportions, 1520:184:183.
pub const DEFAULT_SPLIT: [f64; 3] = [1520.0 / 1887.0, 184.0 / 1887.0, 183.0 / 1887.0];

/// Train/validation/test partition with no user in more than one part.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSet {
    pub train: Vec<TaskRecord>,
    pub validation: Vec<TaskRecord>,
    pub test: Vec<TaskRecord>,
    pub train_users: BTreeSet<String>,
    pub validation_users: BTreeSet<String>,
    pub test_users: BTreeSet<String>,
}

impl SplitSet {
    /// True when the three user sets are pairwise disjoint.
    pub fn is_user_disjoint(&self) -> bool {
        self.train_users.is_disjoint(&self.validation_users)
            && self.train_users.is_disjoint(&self.test_users)
            && self.validation_users.is_disjoint(&self.test_users)
    }
}

/// Shuffles the distinct users with `seed` and assigns them to
/// train/validation/test in the given proportions (rounded to whole users,
/// each part non-empty). Record order is preserved inside each part.
pub fn split_by_user(records: &[TaskRecord], fractions: [f64; 3], seed: u64) -> Result<SplitSet> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DatasetError::Split(format!(
            "fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let users: BTreeSet<&str> = records.iter().map(|r| r.user_id.as_str()).collect();
    let n = users.len();
    if n < 3 {
        return Err(DatasetError::Split(format!(
            "need at least 3 users for a three-way split, found {n}"
        )));
    }
    let mut order: Vec<&str> = users.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut n_val = ((fractions[1] * n as f64).round() as usize).max(1);
    let mut n_test = ((fractions[2] * n as f64).round() as usize).max(1);
    while n_val + n_test > n - 1 {
        if n_val >= n_test {
            n_val -= 1;
        } else {
            n_test -= 1;
        }
    }
    let n_train = n - n_val - n_test;

    let train_users: BTreeSet<String> = order[..n_train].iter().map(|s| s.to_string()).collect();
    let validation_users: BTreeSet<String> = order[n_train..n_train + n_val]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let test_users: BTreeSet<String> = order[n_train + n_val..]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let pick = |set: &BTreeSet<String>| -> Vec<TaskRecord> {
        records
            .iter()
            .filter(|r| set.contains(&r.user_id))
            .cloned()
            .collect()
    };
    Ok(SplitSet {
        train: pick(&train_users),
        validation: pick(&validation_users),
        test: pick(&test_users),
        train_users,
        validation_users,
        test_users,
    })
}

/// Number of childless nodes in a `{"tag": .., "children": [..]}` tree. A
/// node without a `children` key is a leaf.
pub fn count_dom_leaves(dom: &serde_json::Value) -> Result<usize> {
    let mut stack = vec![(dom, 0usize)];
    let mut leaves = 0;
    while let Some((node, depth)) = stack.pop() {
        if depth > 10_000 {
            return Err(DatasetError::Dom("tree deeper than 10000 levels".into()));
        }
        let obj = node
            .as_object()
            .ok_or_else(|| DatasetError::Dom(format!("node at depth {depth} is not an object")))?;
        match obj.get("children") {
            None => leaves += 1,
            Some(serde_json::Value::Array(children)) if children.is_empty() => leaves += 1,
            Some(serde_json::Value::Array(children)) => {
                stack.extend(children.iter().map(|c| (c, depth + 1)));
            }
            Some(_) => {
                return Err(DatasetError::Dom(format!(
                    "'children' at depth {depth} is not an array"
                )))
            }
        }
    }
    Ok(leaves)
}
