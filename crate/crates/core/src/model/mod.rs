//! The attentional CNN: a page encoder and a target encoder whose per-cell
//! dot product forms the attention map, fused with an MLP over structured
//! features and read out by a regression or 5-way classification head.

mod data;
mod train;

pub use data::{Sample, SampleSet};
pub use train::{evaluate_loss, train, train_step, EpochStats, History, StepStats, TrainConfig};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{encode_png, DatasetError, TargetType};
use crate::features::{FeatureError, FeatureNorm, NUM_NUMERIC, STRUCTURED_DIM, TYPE_EMBED_DIM};
use crate::tensor::{BnBatchStats, Graph, ParamStore, Scalar, Tensor, TensorError, Var};

/// Side length of the target crop fed to the target encoder.
pub const TARGET_RES: usize = 64;
/// Output channels of every convolution.
pub const CHANNELS: usize = 4;
pub const PAGE_BLOCKS: usize = 3;
pub const TARGET_BLOCKS: usize = 6;
/// Widths of the structured MLP's hidden layers.
pub const HIDDEN: [usize; 2] = [100, 50];
pub const NUM_CLASSES: usize = 5;
/// Weight of the previous running statistic in each BatchNorm update.
pub const BN_MOMENTUM: f32 = 0.9;
pub const INIT_SCHEME: &str =
    "lecun_uniform: weights U(-sqrt(3/fan_in), +sqrt(3/fan_in)); biases 0; batchnorm gamma 1, beta 0; type embedding U(-0.1, 0.1)";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what}: expected shape {expected:?}, got {actual:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch is missing {0} labels")]
    MissingLabels(&'static str),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

impl FromStr for Task {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Self::Regression),
            "classification" => Ok(Self::Classification),
            _ => Err(ModelError::Config(format!("unknown task `{s}`"))),
        }
    }
}

/// How the attention map enters the fused vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    /// `A[i,j] = Σₖ I[i,j,k]·T[k]`, flattened.
    Raw,
    /// `A ⊙ I`, every channel of the page embedding scaled by its cell score.
    Modulated,
    /// A normalized to sum to 1 over all cells.
    Softmax,
}

impl FromStr for AttentionVariant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "modulated" => Ok(Self::Modulated),
            "softmax" => Ok(Self::Softmax),
            _ => Err(ModelError::Config(format!("unknown attention variant `{s}`"))),
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Modulated => "modulated",
            Self::Softmax => "softmax",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Side of the resized page raster; the attention grid is `page_res / 8`.
    pub page_res: usize,
    pub attention: AttentionVariant,
    /// L2-normalize page cells and target embedding before the dot product.
    pub cosine: bool,
    pub dropout: f64,
    pub mask_weight: f64,
    pub l2_weight: f64,
    pub task: Task,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            page_res: 512,
            attention: AttentionVariant::Raw,
            cosine: false,
            dropout: 0.10,
            mask_weight: 0.001,
            l2_weight: 1e-4,
            task: Task::Regression,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1 << PAGE_BLOCKS;
        if self.page_res < div || self.page_res % div != 0 {
            return Err(ModelError::Config(format!(
                "page_res {} must be a positive multiple of {div}",
                self.page_res
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.mask_weight < 0.0 || self.l2_weight < 0.0 {
            return Err(ModelError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Side of the attention map.
    pub fn grid(&self) -> usize {
        self.page_res >> PAGE_BLOCKS
    }

    /// Width of the pixel part of the fused vector.
    pub fn pixel_dim(&self) -> usize {
        let cells = self.grid() * self.grid();
        match self.attention {
            AttentionVariant::Modulated => cells * CHANNELS,
            AttentionVariant::Raw | AttentionVariant::Softmax => cells,
        }
    }

    /// Width of the vector read by the output head.
    pub fn fused_dim(&self) -> usize {
        self.pixel_dim() + HIDDEN[1]
    }

    pub fn outputs(&self) -> usize {
        match self.task {
            Task::Regression => 1,
            Task::Classification => NUM_CLASSES,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    LeCun { fan_in: usize },
    Zeros,
    Ones,
    Embedding,
}

/// Name, shape and initializer of every trainable tensor.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut specs = Vec::new();
    for (prefix, blocks) in [("page", PAGE_BLOCKS), ("target", TARGET_BLOCKS)] {
        for b in 0..blocks {
            let cin = if b == 0 { 3 } else { CHANNELS };
            specs.push((format!("{prefix}.conv{b}.kernel"), vec![3, 3, cin, CHANNELS], Init::LeCun { fan_in: 9 * cin }));
            specs.push((format!("{prefix}.conv{b}.bias"), vec![CHANNELS], Init::Zeros));
            specs.push((format!("{prefix}.bn{b}.gamma"), vec![CHANNELS], Init::Ones));
            specs.push((format!("{prefix}.bn{b}.beta"), vec![CHANNELS], Init::Zeros));
        }
    }
    specs.push(("type_embedding".into(), vec![TargetType::COUNT, TYPE_EMBED_DIM], Init::Embedding));
    let mut din = STRUCTURED_DIM;
    for (i, &h) in HIDDEN.iter().enumerate() {
        specs.push((format!("mlp.fc{i}.weight"), vec![h, din], Init::LeCun { fan_in: din }));
        specs.push((format!("mlp.fc{i}.bias"), vec![h], Init::Zeros));
        din = h;
    }
    let fused = cfg.fused_dim();
    specs.push(("head.weight".into(), vec![cfg.outputs(), fused], Init::LeCun { fan_in: fused }));
    specs.push(("head.bias".into(), vec![cfg.outputs()], Init::Zeros));
    specs
}

/// Names and shapes of all trainable tensors.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    param_specs(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Names and shapes of the BatchNorm running statistics.
pub fn buffer_shapes() -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (prefix, blocks) in [("page", PAGE_BLOCKS), ("target", TARGET_BLOCKS)] {
        for b in 0..blocks {
            out.push((format!("{prefix}.bn{b}.running_mean"), vec![CHANNELS]));
            out.push((format!("{prefix}.bn{b}.running_var"), vec![CHANNELS]));
        }
    }
    out
}

/// Whether a parameter is covered by the L2 penalty: kernels, dense weights
/// and the embedding table, not biases or BatchNorm affine terms.
pub fn is_regularized(name: &str) -> bool {
    name.ends_with(".kernel") || name.ends_with(".weight") || name == "type_embedding"
}

pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> (ParamStore<T>, ParamStore<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for (name, shape, init) in param_specs(cfg) {
        let t = match init {
            Init::LeCun { fan_in } => {
                let a = (3.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| T::from_f64_lossy(rng.random_range(-a..a)))
            }
            Init::Embedding => Tensor::from_fn(&shape, |_| T::from_f64_lossy(rng.random_range(-0.1..0.1))),
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::ones(&shape),
        };
        params.insert(name, t);
    }
    let mut buffers = ParamStore::new();
    for (name, shape) in buffer_shapes() {
        let t = if name.ends_with("running_var") { Tensor::ones(&shape) } else { Tensor::zeros(&shape) };
        buffers.insert(name, t);
    }
    (params, buffers)
}

/// Model inputs for N trials. `pages` is N×R×R×3 and `targets` N×64×64×3,
/// both in [0, 1]; `numeric` is N×7 standardized; `masks` is N×g×g.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T = f32> {
    pub pages: Tensor<T>,
    pub targets: Tensor<T>,
    pub numeric: Tensor<T>,
    pub type_ids: Vec<usize>,
    pub masks: Tensor<T>,
    /// Normalized search times, N×1.
    pub times: Option<Tensor<T>>,
    pub labels: Option<Vec<usize>>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.type_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.type_ids.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Batch<U> {
        Batch {
            pages: self.pages.cast(),
            targets: self.targets.cast(),
            numeric: self.numeric.cast(),
            type_ids: self.type_ids.clone(),
            masks: self.masks.cast(),
            times: self.times.as_ref().map(Tensor::cast),
            labels: self.labels.clone(),
        }
    }
}

/// Handles to the interesting nodes of one forward pass.
pub struct Forward<T: Scalar> {
    /// N×1 regression output or N×5 class probabilities.
    pub output: Var,
    /// Raw attention map, N×g×g.
    pub attention: Var,
    pub page_embedding: Var,
    pub target_embedding: Var,
    /// Vector read by the head, N×fused_dim.
    pub fused: Var,
    /// Batch statistics of every BatchNorm layer that used them.
    pub bn_stats: Vec<(String, BnBatchStats<T>)>,
}

/// Loss terms of one batch.
pub struct LossParts {
    pub total: Var,
    pub task: Var,
    pub l2: Var,
    pub mask: Var,
}

fn var(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name).copied().ok_or_else(|| ModelError::MissingParam(name.into()))
}

fn buffer<'a, T: Scalar>(buffers: &'a ParamStore<T>, name: &str) -> Result<&'a Tensor<T>> {
    buffers.get(name).ok_or_else(|| ModelError::MissingParam(name.into()))
}

fn expect_shape(what: &'static str, actual: &[usize], expected: &[usize]) -> Result<()> {
    if actual != expected {
        return Err(ModelError::Shape {
            what,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}

/// Stack of (conv 3×3 → BatchNorm → ReLU → max-pool 2×2) blocks.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    vars: &BTreeMap<String, Var>,
    buffers: &ParamStore<T>,
    prefix: &str,
    blocks: usize,
    x: Var,
    train: bool,
) -> Result<(Var, Vec<(String, BnBatchStats<T>)>)> {
    let mut h = x;
    let mut stats = Vec::new();
    for b in 0..blocks {
        let k = var(vars, &format!("{prefix}.conv{b}.kernel"))?;
        let bias = var(vars, &format!("{prefix}.conv{b}.bias"))?;
        h = g.conv2d(h, k, bias)?;
        let bn = format!("{prefix}.bn{b}");
        let gamma = var(vars, &format!("{bn}.gamma"))?;
        let beta = var(vars, &format!("{bn}.beta"))?;
        let (out, s) = g.batchnorm(
            h,
            gamma,
            beta,
            buffer(buffers, &format!("{bn}.running_mean"))?,
            buffer(buffers, &format!("{bn}.running_var"))?,
            train,
        )?;
        if let Some(s) = s {
            stats.push((bn, s));
        }
        h = g.relu(out)?;
        h = g.maxpool2(h)?;
    }
    Ok((h, stats))
}

/// Page encoder: N×R×R×3 → N×(R/8)×(R/8)×4.
pub fn encode_page<T: Scalar>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    vars: &BTreeMap<String, Var>,
    buffers: &ParamStore<T>,
    pages: Var,
    train: bool,
) -> Result<(Var, Vec<(String, BnBatchStats<T>)>)> {
    let s = g.shape(pages).to_vec();
    let n = s.first().copied().unwrap_or(0);
    expect_shape("page input", &s, &[n, cfg.page_res, cfg.page_res, 3])?;
    encode(g, vars, buffers, "page", PAGE_BLOCKS, pages, train)
}

/// Target encoder: N×64×64×3 → N×1×1×4.
pub fn encode_target<T: Scalar>(
    g: &mut Graph<T>,
    vars: &BTreeMap<String, Var>,
    buffers: &ParamStore<T>,
    targets: Var,
    train: bool,
) -> Result<(Var, Vec<(String, BnBatchStats<T>)>)> {
    let s = g.shape(targets).to_vec();
    let n = s.first().copied().unwrap_or(0);
    expect_shape("target input", &s, &[n, TARGET_RES, TARGET_RES, 3])?;
    encode(g, vars, buffers, "target", TARGET_BLOCKS, targets, train)
}

/// Attention between the page embedding (N×g×g×4) and target embedding
/// (N×1×1×4). Returns the raw map (N×g×g) and the N×pixel_dim block that
/// enters the fused vector.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    page: Var,
    target: Var,
    variant: AttentionVariant,
    cosine: bool,
) -> Result<(Var, Var)> {
    let (i, t) = if cosine {
        (g.l2_normalize(page)?, g.l2_normalize(target)?)
    } else {
        (page, target)
    };
    let raw = g.channel_dot(i, t)?;
    let fused = match variant {
        AttentionVariant::Raw => g.flatten(raw)?,
        AttentionVariant::Modulated => {
            let m = g.scale_by_map(raw, i)?;
            g.flatten(m)?
        }
        AttentionVariant::Softmax => {
            let flat = g.flatten(raw)?;
            g.softmax(flat)?
        }
    };
    Ok((raw, fused))
}

/// Type embedding plus standardized numerics through the tanh MLP: N×50.
fn structured_branch<T: Scalar, R: Rng>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    vars: &BTreeMap<String, Var>,
    numeric: Var,
    type_ids: &[usize],
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let emb = crate::features::embed_type(g, var(vars, "type_embedding")?, type_ids)?;
    let mut h = g.concat(numeric, emb)?;
    debug_assert_eq!(g.shape(h)[1], STRUCTURED_DIM);
    for i in 0..HIDDEN.len() {
        let w = var(vars, &format!("mlp.fc{i}.weight"))?;
        let b = var(vars, &format!("mlp.fc{i}.bias"))?;
        h = g.dense(h, w, b)?;
        h = g.tanh(h)?;
        h = g.dropout(h, cfg.dropout, train, rng)?;
    }
    Ok(h)
}

/// Fused vector through dropout and the output head.
fn head<T: Scalar, R: Rng>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    vars: &BTreeMap<String, Var>,
    fused: Var,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let h = g.dropout(fused, cfg.dropout, train, rng)?;
    let out = g.dense(h, var(vars, "head.weight")?, var(vars, "head.bias")?)?;
    Ok(match cfg.task {
        Task::Regression => out,
        Task::Classification => g.softmax(out)?,
    })
}

/// Full forward pass. Dropout draws from `rng` in train mode only.
pub fn forward<T: Scalar, R: Rng>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    vars: &BTreeMap<String, Var>,
    buffers: &ParamStore<T>,
    batch: &Batch<T>,
    train: bool,
    rng: &mut R,
) -> Result<Forward<T>> {
    let n = batch.len();
    if n == 0 {
        return Err(ModelError::EmptyBatch);
    }
    expect_shape("numeric features", batch.numeric.shape(), &[n, NUM_NUMERIC])?;
    let pages = g.input(batch.pages.clone(), false)?;
    let targets = g.input(batch.targets.clone(), false)?;
    let numeric = g.input(batch.numeric.clone(), false)?;
    let (page_embedding, mut bn_stats) = encode_page(cfg, g, vars, buffers, pages, train)?;
    let (target_embedding, t_stats) = encode_target(g, vars, buffers, targets, train)?;
    bn_stats.extend(t_stats);
    let (raw, pixel) = attention(g, page_embedding, target_embedding, cfg.attention, cfg.cosine)?;
    let structured = structured_branch(cfg, g, vars, numeric, &batch.type_ids, train, rng)?;
    let fused = g.concat(pixel, structured)?;
    let output = head(cfg, g, vars, fused, train, rng)?;
    Ok(Forward {
        output,
        attention: raw,
        page_embedding,
        target_embedding,
        fused,
        bn_stats,
    })
}

/// Task loss + λ2·Σ‖W‖² + mask_weight·mse(A, mask).
pub fn loss<T: Scalar, R: Rng>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    vars: &BTreeMap<String, Var>,
    buffers: &ParamStore<T>,
    batch: &Batch<T>,
    train: bool,
    rng: &mut R,
) -> Result<(LossParts, Forward<T>)> {
    let fwd = forward(cfg, g, vars, buffers, batch, train, rng)?;
    let task = match cfg.task {
        Task::Regression => {
            let times = batch.times.as_ref().ok_or(ModelError::MissingLabels("time"))?;
            let y = g.input(times.clone(), false)?;
            g.mse(fwd.output, y)?
        }
        Task::Classification => {
            let labels = batch.labels.as_ref().ok_or(ModelError::MissingLabels("class"))?;
            g.cross_entropy(fwd.output, labels)?
        }
    };
    let regularized: Vec<Var> = vars
        .iter()
        .filter(|(name, _)| is_regularized(name))
        .map(|(_, &v)| v)
        .collect();
    let l2 = g.l2_penalty(&regularized, T::from_f64_lossy(cfg.l2_weight))?;
    let masks = g.input(batch.masks.clone(), false)?;
    let mask_mse = g.mse(fwd.attention, masks)?;
    let mask = g.scale(mask_mse, T::from_f64_lossy(cfg.mask_weight))?;
    let partial = g.add(task, l2)?;
    let total = g.add(partial, mask)?;
    Ok((LossParts { total, task, l2, mask }, fwd))
}

/// Model outputs in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Normalized time per trial (regression) or 5 probabilities per trial.
    pub outputs: Vec<Vec<f32>>,
    /// Raw attention map per trial, g×g.
    pub attention: Vec<Tensor<f32>>,
}

/// Parameters, running statistics and feature normalization of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ScannabilityNet {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub buffers: ParamStore<f32>,
    pub norm: FeatureNorm,
    pub init_scheme: String,
    pub seed: u64,
}

fn register<T: Scalar>(g: &mut Graph<T>, params: &ParamStore<T>) -> BTreeMap<String, Var> {
    params.iter().map(|(n, t)| (n.to_string(), g.param(t.clone()))).collect()
}

impl ScannabilityNet {
    pub fn new(config: ModelConfig, norm: FeatureNorm, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, buffers) = init_params(&config, seed);
        Ok(Self {
            config,
            params,
            buffers,
            norm,
            init_scheme: INIT_SCHEME.into(),
            seed,
        })
    }

    /// Eval-mode forward pass: dropout off, BatchNorm on running statistics.
    pub fn predict(&self, batch: &Batch<f32>) -> Result<Prediction> {
        let mut g = Graph::new();
        let vars = register(&mut g, &self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = forward(&self.config, &mut g, &vars, &self.buffers, batch, false, &mut rng)?;
        let k = self.config.outputs();
        let outputs = g.value(fwd.output).data().chunks(k).map(<[f32]>::to_vec).collect();
        let grid = self.config.grid();
        let attention = g
            .value(fwd.attention)
            .data()
            .chunks(grid * grid)
            .map(|c| Tensor::new(vec![grid, grid], c.to_vec()).expect("grid buffer"))
            .collect();
        Ok(Prediction { outputs, attention })
    }

    /// Eval-mode outputs for every sample of `set`, in chunks of 64.
    pub fn predict_set(&self, set: &SampleSet) -> Result<Prediction> {
        let mut all = Prediction {
            outputs: Vec::with_capacity(set.len()),
            attention: Vec::with_capacity(set.len()),
        };
        let idx: Vec<usize> = (0..set.len()).collect();
        for chunk in idx.chunks(64) {
            let p = self.predict(&set.batch(chunk))?;
            all.outputs.extend(p.outputs);
            all.attention.extend(p.attention);
        }
        Ok(all)
    }

    /// Eval-mode predictions for one page/target pair under several
    /// structured inputs. The attention map does not depend on them, so
    /// the encoders run once. `batch` holds exactly one trial; `numeric`
    /// is P×7. Returns P output rows and the shared attention map.
    pub fn predict_structured_variants(
        &self,
        batch: &Batch<f32>,
        numeric: &Tensor<f32>,
    ) -> Result<(Vec<Vec<f32>>, Tensor<f32>)> {
        if batch.len() != 1 {
            return Err(ModelError::Shape {
                what: "variant batch",
                expected: vec![1],
                actual: vec![batch.len()],
            });
        }
        let p = numeric.shape()[0];
        expect_shape("numeric variants", numeric.shape(), &[p, NUM_NUMERIC])?;
        let cfg = &self.config;
        let mut g = Graph::new();
        let vars = register(&mut g, &self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pages = g.input(batch.pages.clone(), false)?;
        let targets = g.input(batch.targets.clone(), false)?;
        let (pe, _) = encode_page(cfg, &mut g, &vars, &self.buffers, pages, false)?;
        let (te, _) = encode_target(&mut g, &vars, &self.buffers, targets, false)?;
        let (raw, pixel) = attention(&mut g, pe, te, cfg.attention, cfg.cosine)?;
        let pixel_row = g.value(pixel).data().to_vec();
        let tiled = Tensor::new(vec![p, pixel_row.len()], pixel_row.repeat(p))?;
        let tiled = g.constant(tiled);
        let num = g.input(numeric.clone(), false)?;
        let ids = vec![batch.type_ids[0]; p];
        let structured = structured_branch(cfg, &mut g, &vars, num, &ids, false, &mut rng)?;
        let fused = g.concat(tiled, structured)?;
        let out = head(cfg, &mut g, &vars, fused, false, &mut rng)?;
        let k = cfg.outputs();
        let rows = g.value(out).data().chunks(k).map(<[f32]>::to_vec).collect();
        let grid = cfg.grid();
        let map = g.value(raw).clone().reshape(&[grid, grid])?;
        Ok((rows, map))
    }

    /// Converts a normalized-time prediction to seconds.
    pub fn denormalize_time(&self, pred: f64) -> f64 {
        self.norm.denormalize_time(pred)
    }

    /// Rows of the type-embedding table, 5×20.
    pub fn type_embeddings(&self) -> &Tensor<f32> {
        self.params.get("type_embedding").expect("type_embedding present")
    }
}

/// Pearson correlation of two equal-length slices; 0 when either is constant.
pub fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let mb = b.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (f64::from(x) - ma, f64::from(y) - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Grayscale PNG of an attention map, min-max scaled and upsampled to
/// `size`×`size` with bilinear filtering.
pub fn attention_png(map: &Tensor<f32>, size: u32) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(ModelError::Shape {
            what: "attention map",
            expected: vec![0, 0],
            actual: s.to_vec(),
        });
    }
    let (h, w) = (s[0] as u32, s[1] as u32);
    let lo = map.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let small = image::RgbImage::from_fn(w, h, |x, y| {
        let v = ((map.data()[(y * w + x) as usize] - lo) / span * 255.0).round() as u8;
        image::Rgb([v, v, v])
    });
    let big = image::imageops::resize(&small, size, size, image::imageops::FilterType::Triangle);
    Ok(encode_png(&big)?)
}

/// Regression network plus an optional separately trained classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub regression: ScannabilityNet,
    pub classification: Option<ScannabilityNet>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny_cfg(task: Task) -> ModelConfig {
        ModelConfig {
            page_res: 16,
            task,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn random_batch<T: Scalar>(cfg: &ModelConfig, n: usize, seed: u64) -> Batch<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = cfg.page_res;
        let grid = cfg.grid();
        let mut u = |shape: &[usize]| Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random::<f64>()));
        let pages = u(&[n, r, r, 3]);
        let targets = u(&[n, TARGET_RES, TARGET_RES, 3]);
        let numeric = u(&[n, NUM_NUMERIC]).map(|v| v * T::from_f64_lossy(2.0) - T::one());
        let times = u(&[n, 1]);
        let masks = Tensor::from_fn(&[n, grid, grid], |i| T::from_f64_lossy(if i % 3 == 0 { 1.0 } else { 0.0 }));
        Batch {
            pages,
            targets,
            numeric,
            type_ids: (0..n).map(|i| i % 5).collect(),
            masks,
            times: Some(times),
            labels: Some((0..n).map(|i| (i * 2) % 5).collect()),
        }
    }

    #[test]
    fn default_shapes() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.grid(), 64);
        assert_eq!(cfg.fused_dim(), 4146);
        let specs = param_shapes(&cfg);
        let head = specs.iter().find(|(n, _)| n == "head.weight").unwrap();
        assert_eq!(head.1, vec![1, 4146]);
    }

    #[test]
    fn config_errors() {
        let bad = ModelConfig {
            page_res: 12,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!("dot".parse::<AttentionVariant>().is_err());
    }

    #[test]
    fn eval_predictions_are_deterministic() {
        for task in [Task::Regression, Task::Classification] {
            let cfg = tiny_cfg(task);
            let norm = crate::features::FeatureNorm {
                means: [0.0; 7],
                stds: [1.0; 7],
                time_mean: 0.0,
                time_std: 1.0,
                fitted_on: "train".into(),
                std_kind: "population".into(),
            };
            let net = ScannabilityNet::new(cfg, norm, 3).unwrap();
            let batch = random_batch::<f32>(&net.config, 3, 1);
            let a = net.predict(&batch).unwrap();
            assert_eq!(a, net.predict(&batch).unwrap());
            if task == Task::Classification {
                for row in &a.outputs {
                    assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn variants_match_direct_prediction() {
        let cfg = tiny_cfg(Task::Regression);
        let norm = crate::features::FeatureNorm {
            means: [0.0; 7],
            stds: [1.0; 7],
            time_mean: 0.0,
            time_std: 1.0,
            fitted_on: "train".into(),
            std_kind: "population".into(),
        };
        let net = ScannabilityNet::new(cfg, norm, 5).unwrap();
        let batch = random_batch::<f32>(&net.config, 1, 2);
        let direct = net.predict(&batch).unwrap();
        let (rows, map) = net.predict_structured_variants(&batch, &batch.numeric).unwrap();
        assert!((rows[0][0] - direct.outputs[0][0]).abs() < 1e-6);
        assert_eq!(map, direct.attention[0]);
    }

    #[test]
    fn attention_png_decodes() {
        let map = Tensor::from_fn(&[4, 4], |i| i as f32);
        let png = attention_png(&map, 32).unwrap();
        let img = image::load_from_memory(&png).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
    }
}
