//! Finite-difference checks of every graph layer and of the full model
//! losses, in f64.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::{self, AttentionVariant, Batch, ModelConfig, ModelError, Task, TARGET_RES};
use crate::features::NUM_NUMERIC;
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, ParamStore, Tensor, TensorError, Var};

/// Relative-error bound every check must meet.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct LayerCheck {
    pub layer: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub worst: Option<(String, usize)>,
    pub passed: bool,
    pub seconds: f64,
}

impl LayerCheck {
    fn new(layer: &str, r: GradCheckReport, seconds: f64) -> Self {
        Self {
            layer: layer.into(),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            skipped: r.skipped,
            passed: r.passes(TOLERANCE),
            worst: r.worst,
            seconds,
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Mean squared distance to a fixed random target of the same shape, so the
/// upstream gradient is dense and non-uniform.
fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let t = g.constant(rand_tensor(&mut rng, &shape, 1.0));
    g.mse(y, t)
}

type Build = Box<dyn Fn(&mut Graph<f64>, &BTreeMap<String, Var>) -> Result<Var, TensorError>>;

fn layer_cases(seed: u64) -> Vec<(&'static str, ParamStore<f64>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&'static str, ParamStore<f64>, Build)> = Vec::new();
    let store = |items: &[(&str, &[usize], f64)], rng: &mut ChaCha8Rng| {
        let mut p = ParamStore::new();
        for &(n, s, sc) in items {
            p.insert(n, rand_tensor(rng, s, sc));
        }
        p
    };

    cases.push((
        "conv2d",
        store(&[("x", &[2, 5, 6, 2], 1.0), ("k", &[3, 3, 2, 3], 0.5), ("b", &[3], 0.5)], &mut rng),
        Box::new(move |g, v| {
            let y = g.conv2d(v["x"], v["k"], v["b"])?;
            readout(g, y, seed)
        }),
    ));
    cases.push((
        "maxpool2",
        store(&[("x", &[2, 4, 6, 3], 1.0)], &mut rng),
        Box::new(move |g, v| {
            let y = g.maxpool2(v["x"])?;
            readout(g, y, seed)
        }),
    ));
    for (name, train) in [("batchnorm_train", true), ("batchnorm_eval", false)] {
        let mut p = store(&[("x", &[3, 3, 2, 4], 1.0), ("beta", &[4], 0.5)], &mut rng);
        p.insert("gamma", Tensor::from_fn(&[4], |_| rng.random_range(0.5..1.5)));
        let rm = rand_tensor(&mut rng, &[4], 0.3);
        let rv = Tensor::from_fn(&[4], |_| rng.random_range(0.5..2.0));
        cases.push((
            name,
            p,
            Box::new(move |g, v| {
                let (y, _) = g.batchnorm(v["x"], v["gamma"], v["beta"], &rm, &rv, train)?;
                readout(g, y, seed)
            }),
        ));
    }
    cases.push((
        "relu",
        store(&[("x", &[4, 6], 1.0)], &mut rng),
        Box::new(move |g, v| {
            let y = g.relu(v["x"])?;
            readout(g, y, seed)
        }),
    ));
    cases.push((
        "tanh",
        store(&[("x", &[4, 6], 1.5)], &mut rng),
        Box::new(move |g, v| {
            let y = g.tanh(v["x"])?;
            readout(g, y, seed)
        }),
    ));
    cases.push((
        "softmax",
        store(&[("x", &[3, 5], 2.0)], &mut rng),
        Box::new(move |g, v| {
            let y = g.softmax(v["x"])?;
            readout(g, y, seed)
        }),
    ));
    cases.push((
        "dense",
        store(&[("x", &[3, 4], 1.0), ("w", &[5, 4], 0.5), ("b", &[5], 0.5)], &mut rng),
        Box::new(move |g, v| {
            let y = g.dense(v["x"], v["w"], v["b"])?;
            readout(g, y, seed)
        }),
    ));
    cases.push((
        "reshape_flatten",
        store(&[("x", &[2, 2, 3, 2], 1.0)], &mut rng),
        Box::new(move |g, v| {
            let y = g.flatten(v["x"])?;
            let t = g.tanh(y)?;
            let r = g.reshape(t, &[4, 6])?;
            readout(g, r, seed)
        }),
    ));
    cases.push((
        "concat",
        store(&[("a", &[3, 2], 1.0), ("b", &[3, 4], 1.0)], &mut rng),
        Box::new(move |g, v| {
            let y = g.concat(v["a"], v["b"])?;
            let t = g.tanh(y)?;
            readout(g, t, seed)
        }),
    ));
    cases.push((
        "dropout",
        store(&[("x", &[4, 8], 1.0)], &mut rng),
        Box::new(move |g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(seed + 7);
            let y = g.dropout(v["x"], 0.3, true, &mut r)?;
            readout(g, y, seed)
        }),
    ));
    cases.push((
        "channel_dot",
        store(&[("map", &[2, 3, 3, 4], 1.0), ("q", &[2, 1, 1, 4], 1.0)], &mut rng),
        Box::new(move |g, v| {
            let y = g.channel_dot(v["map"], v["q"])?;
            readout(g, y, seed)
        }),
    ));
    cases.push((
        "scale_by_map",
        store(&[("a", &[2, 3, 3], 1.0), ("x", &[2, 3, 3, 4], 1.0)], &mut rng),
        Box::new(move |g, v| {
            let y = g.scale_by_map(v["a"], v["x"])?;
            readout(g, y, seed)
        }),
    ));
    cases.push((
        "l2_normalize",
        store(&[("x", &[2, 3, 4], 1.0)], &mut rng),
        Box::new(move |g, v| {
            let y = g.l2_normalize(v["x"])?;
            readout(g, y, seed)
        }),
    ));
    cases.push((
        "embedding",
        store(&[("table", &[5, 6], 1.0)], &mut rng),
        Box::new(move |g, v| {
            let y = g.embedding(v["table"], &[0, 3, 3, 4, 1])?;
            let t = g.tanh(y)?;
            readout(g, t, seed)
        }),
    ));
    cases.push((
        "mse",
        store(&[("p", &[6, 1], 1.0)], &mut rng),
        Box::new(move |g, v| readout(g, v["p"], seed)),
    ));
    cases.push((
        "cross_entropy",
        store(&[("x", &[4, 5], 2.0)], &mut rng),
        Box::new(move |g, v| {
            let p = g.softmax(v["x"])?;
            g.cross_entropy(p, &[0, 4, 2, 2])
        }),
    ));
    cases.push((
        "l2_penalty",
        store(&[("a", &[3, 2], 1.0), ("b", &[4], 1.0)], &mut rng),
        Box::new(move |g, v| g.l2_penalty(&[v["a"], v["b"]], 0.37)),
    ));
    cases
}

/// A small-resolution batch with every input populated.
pub fn probe_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = cfg.page_res;
    let grid = cfg.grid();
    let masks = Tensor::from_fn(&[n, grid, grid], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
    Batch {
        pages: Tensor::from_fn(&[n, r, r, 3], |_| rng.random_range(0.0..1.0)),
        targets: Tensor::from_fn(&[n, TARGET_RES, TARGET_RES, 3], |_| rng.random_range(0.0..1.0)),
        numeric: Tensor::from_fn(&[n, NUM_NUMERIC], |_| rng.random_range(-2.0..2.0)),
        type_ids: (0..n).map(|i| i % 5).collect(),
        masks,
        times: Some(Tensor::from_fn(&[n, 1], |_| rng.random_range(-1.5..1.5))),
        labels: Some((0..n).map(|i| (i * 2) % 5).collect()),
    }
}

/// Full-loss checks: both tasks, every attention variant, train mode with
/// BatchNorm batch statistics and a fixed dropout mask.
fn model_cases() -> Vec<(String, ModelConfig)> {
    let base = ModelConfig {
        page_res: 32,
        mask_weight: 0.5,
        l2_weight: 1e-2,
        ..ModelConfig::default()
    };
    let mut out = vec![];
    for (variant, cosine) in [
        (AttentionVariant::Raw, false),
        (AttentionVariant::Modulated, false),
        (AttentionVariant::Softmax, false),
        (AttentionVariant::Raw, true),
    ] {
        let cfg = ModelConfig {
            attention: variant,
            cosine,
            ..base.clone()
        };
        let tag = if cosine { format!("{variant}+cosine") } else { variant.to_string() };
        out.push((format!("regression_loss[{tag}]"), cfg));
    }
    out.push((
        "classification_loss[raw]".into(),
        ModelConfig {
            task: Task::Classification,
            ..base
        },
    ));
    out
}

/// Runs every check. `max_coords` bounds the sampled coordinates per check.
pub fn run(seed: u64, max_coords: usize) -> Result<Vec<LayerCheck>, ModelError> {
    let opts = GradCheckOptions {
        max_coords,
        seed,
        ..GradCheckOptions::default()
    };
    let mut out = Vec::new();
    for (name, params, build) in layer_cases(seed) {
        let t = Instant::now();
        let r = grad_check(&params, |g, v| build(g, v), &opts)?;
        out.push(LayerCheck::new(name, r, t.elapsed().as_secs_f64()));
    }
    // Wider stencil for the full losses: roundoff in their large reductions
    // dominates at the per-layer step.
    let model_opts = GradCheckOptions { step: 1e-3, ..opts.clone() };
    for (name, cfg) in model_cases() {
        let t = Instant::now();
        let (params, buffers) = model::init_params::<f64>(&cfg, seed);
        let batch = probe_batch(&cfg, 3, seed + 1);
        let r = grad_check(
            &params,
            |g, v| -> Result<Var, ModelError> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
                let (parts, _) = model::loss(&cfg, g, v, &buffers, &batch, true, &mut rng)?;
                Ok(parts.total)
            },
            &model_opts,
        )?;
        out.push(LayerCheck::new(&name, r, t.elapsed().as_secs_f64()));
    }
    Ok(out)
}

/// One line per check.
pub fn report_text(checks: &[LayerCheck]) -> String {
    let mut s = String::new();
    for c in checks {
        s.push_str(&format!(
            "{:<32} {}  max_rel_error {:.3e}  checked {:>4}  skipped {:>3}  {:.2}s  worst {:?}\n",
            c.layer,
            if c.passed { "PASS" } else { "FAIL" },
            c.max_rel_error,
            c.checked,
            c.skipped,
            c.seconds,
            c.worst
        ));
    }
    s
}
