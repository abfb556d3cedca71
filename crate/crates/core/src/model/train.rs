use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss, register, Batch, ModelError, Result, SampleSet, ScannabilityNet, Task, BN_MOMENTUM};
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 8,
            max_epochs: 50,
            patience: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub task: f64,
    pub l2: f64,
    pub mask: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,steps\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.steps);
        }
        s
    }
}

/// One Adam update on `batch` in train mode, including the BatchNorm
/// running-statistic updates. Returns the loss before the update.
pub fn train_step(
    net: &mut ScannabilityNet,
    adam: &mut Adam<f32>,
    batch: &Batch<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let vars = register(&mut g, &net.params);
    let (parts, fwd) = loss(&net.config, &mut g, &vars, &net.buffers, batch, true, rng)?;
    let stats = StepStats {
        loss: f64::from(g.value(parts.total).item()),
        task: f64::from(g.value(parts.task).item()),
        l2: f64::from(g.value(parts.l2).item()),
        mask: f64::from(g.value(parts.mask).item()),
    };
    if !stats.loss.is_finite() {
        return Ok(stats);
    }
    g.backward(parts.total)?;
    let mut grads = ParamStore::new();
    for (name, &v) in &vars {
        if let Some(gr) = g.grad(v) {
            grads.insert(name.clone(), gr.clone());
        }
    }
    adam.step(&mut net.params, &grads)?;
    for (bn, s) in fwd.bn_stats {
        let update = |buf: &mut [f32], batch: &[f32]| {
            for (r, &b) in buf.iter_mut().zip(batch) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        };
        update(net.buffers.get_mut(&format!("{bn}.running_mean")).expect("buffer").data_mut(), &s.mean);
        update(net.buffers.get_mut(&format!("{bn}.running_var")).expect("buffer").data_mut(), &s.var);
    }
    Ok(stats)
}

fn usable(net: &ScannabilityNet, set: &SampleSet) -> Vec<usize> {
    match net.config.task {
        Task::Regression => (0..set.len()).collect(),
        Task::Classification => set.labeled(),
    }
}

/// Mean eval-mode task loss over `set`.
pub fn evaluate_loss(net: &ScannabilityNet, set: &SampleSet) -> Result<f64> {
    let idx = usable(net, set);
    if idx.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut total = 0.0;
    for chunk in idx.chunks(32) {
        let batch = set.batch(chunk);
        let pred = net.predict(&batch)?;
        for (row, &i) in pred.outputs.iter().zip(chunk) {
            let s = &set.samples[i];
            total += match net.config.task {
                Task::Regression => (f64::from(row[0]) - f64::from(s.time)).powi(2),
                Task::Classification => -f64::from(row[s.label.expect("labeled")].max(1e-12)).ln(),
            };
        }
    }
    Ok(total / idx.len() as f64)
}

/// Adam on shuffled mini-batches with early stopping on validation loss.
/// The parameters of the best validation epoch are kept.
pub fn train(net: &mut ScannabilityNet, train_set: &SampleSet, val_set: &SampleSet, cfg: &TrainConfig) -> Result<History> {
    let mut order = usable(net, train_set);
    if order.is_empty() || usable(net, val_set).is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if cfg.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam.clone());
    let mut best = (net.params.clone(), net.buffers.clone());
    let mut history = History {
        epochs: vec![],
        best_epoch: 0,
        best_val_loss: evaluate_loss(net, val_set)?,
        stopped_early: false,
    };
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.batch(chunk);
            let s = train_step(net, &mut adam, &batch, &mut rng)?;
            if !s.loss.is_finite() {
                return Err(ModelError::Divergence { epoch, step: steps, loss: s.loss });
            }
            total += s.loss;
            steps += 1;
        }
        let val_loss = evaluate_loss(net, val_set)?;
        log::info!("epoch {epoch}: train {:.4} val {val_loss:.4}", total / steps as f64);
        history.epochs.push(EpochStats {
            epoch,
            train_loss: total / steps as f64,
            val_loss,
            steps,
        });
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best = (net.params.clone(), net.buffers.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    net.params = best.0;
    net.buffers = best.1;
    Ok(history)
}
