//! Acceptance suite. Runs every criterion in sequence and prints one
//! PASS/FAIL line each; exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use scannability::analytics::{layout_regression, paired_t, type_contrast, OlsFit, LAYOUT_FEATURES};
use scannability::cli::{evaluate_models, prepare, train_net};
use scannability::dataset::{
    filter_trials, synth_generate, SynthConfig, TargetType, TaskRecord, ORACLE_COEFFICIENTS, ORACLE_TYPE_OFFSETS,
};
use scannability::evaluation::{bucketize, classification_accuracy, r2_cross, r2_within, ranking_accuracy};
use scannability::features::fit_norm;
use scannability::gradsuite;
use scannability::model::{
    self, attention, encode_page, encode_target, forward, init_params, loss, pearson, train_step, AttentionVariant,
    ModelBundle, ModelConfig, SampleSet, ScannabilityNet, Task, TrainConfig,
};
use scannability::service::{from_bytes, to_bytes};
use scannability::tensor::{Adam, AdamConfig, Graph, Tensor, Var};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let checks = gradsuite::run(0, 200).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    print!("{}", gradsuite::report_text(&checks));
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.layer.as_str()).collect();
    ensure!(failed.is_empty(), "failing checks: {failed:?}");
    ensure!(secs < 120.0, "runtime {secs:.1}s exceeds 120s");
    Ok(format!("{} checks, max rel error {worst:.2e}, {secs:.1}s", checks.len()))
}

fn shape_suite() -> Outcome {
    let cfg = ModelConfig::default();
    ensure!(cfg.page_res == 512, "default page_res {}", cfg.page_res);
    let (params, buffers) = init_params::<f32>(&cfg, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f32>::new();
    let vars: BTreeMap<String, Var> = params.iter().map(|(n, t)| (n.to_string(), g.param(t.clone()))).collect();
    let page = g.constant(Tensor::from_fn(&[1, 512, 512, 3], |_| rng.random_range(0.0..1.0)));
    let target = g.constant(Tensor::from_fn(&[1, 64, 64, 3], |_| rng.random_range(0.0..1.0)));
    let (pe, _) = encode_page(&cfg, &mut g, &vars, &buffers, page, false).map_err(err)?;
    let (te, _) = encode_target(&mut g, &vars, &buffers, target, false).map_err(err)?;
    ensure!(g.shape(pe) == [1, 64, 64, 4], "page embedding {:?}", g.shape(pe));
    ensure!(g.shape(te) == [1, 1, 1, 4], "target embedding {:?}", g.shape(te));
    let (a, _) = attention(&mut g, pe, te, AttentionVariant::Raw, false).map_err(err)?;
    ensure!(g.shape(a) == [1, 64, 64], "attention {:?}", g.shape(a));

    let corpus = synth_generate(&SynthConfig { users: 2, ..Default::default() }, 0).map_err(err)?;
    let (kept, _) = filter_trials(&corpus.records);
    let norm = fit_norm(&kept, "all").map_err(err)?;
    let set = SampleSet::from_records(&kept[..2], &corpus.render_pages(), &norm, &cfg).map_err(err)?;
    let mut g = Graph::<f32>::new();
    let vars: BTreeMap<String, Var> = params.iter().map(|(n, t)| (n.to_string(), g.param(t.clone()))).collect();
    let fwd = forward(&cfg, &mut g, &vars, &buffers, &set.batch(&[0, 1]), false, &mut rng).map_err(err)?;
    ensure!(g.shape(fwd.fused) == [2, 4146], "fused {:?}", g.shape(fwd.fused));
    ensure!(cfg.fused_dim() == 4146, "fused_dim {}", cfg.fused_dim());
    ensure!(g.shape(fwd.output) == [2, 1], "output {:?}", g.shape(fwd.output));
    Ok("512×512×3→64×64×4, 64×64×3→1×1×4, A 64×64, fused 4146".into())
}

fn attention_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..4);
        let grid = rng.random_range(1..10);
        let c = rng.random_range(1..7);
        let page = Tensor::from_fn(&[n, grid, grid, c], |_| rng.random_range(-3.0..3.0));
        let target = Tensor::from_fn(&[n, 1, 1, c], |_| rng.random_range(-3.0..3.0));
        let mut g = Graph::<f64>::new();
        let pv = g.constant(page.clone());
        let tv = g.constant(target.clone());
        let (a, _) = attention(&mut g, pv, tv, AttentionVariant::Raw, false).map_err(err)?;
        let got = g.value(a).data();
        for b in 0..n {
            for i in 0..grid {
                for j in 0..grid {
                    let mut want = 0.0;
                    for k in 0..c {
                        want += page.data()[((b * grid + i) * grid + j) * c + k] * target.data()[b * c + k];
                    }
                    worst = worst.max((got[(b * grid + i) * grid + j] - want).abs());
                }
            }
        }
    }
    ensure!(worst <= 1e-6, "max deviation {worst:.3e}");
    let mut g = Graph::<f64>::new();
    let pv = g.constant(Tensor::ones(&[1, 64, 64, 4]));
    let tv = g.constant(Tensor::ones(&[1, 1, 1, 4]));
    let (a, _) = attention(&mut g, pv, tv, AttentionVariant::Raw, false).map_err(err)?;
    ensure!(g.value(a).data().iter().all(|&v| v == 4.0), "all-ones map not constant 4");
    Ok(format!("100 random cases, max deviation {worst:.1e}; all-ones map = 4"))
}

/// Gauss-Jordan inverse with partial pivoting.
fn invert(mut a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let p = a.len();
    let mut inv: Vec<Vec<f64>> = (0..p).map(|i| (0..p).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for col in 0..p {
        let piv = (col..p).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, piv);
        inv.swap(col, piv);
        let d = a[col][col];
        for j in 0..p {
            a[col][j] /= d;
            inv[col][j] /= d;
        }
        for r in 0..p {
            if r != col {
                let f = a[r][col];
                for j in 0..p {
                    a[r][j] -= f * a[col][j];
                    inv[r][j] -= f * inv[col][j];
                }
            }
        }
    }
    inv
}

/// t and two-sided p of every coefficient from the normal equations.
fn explicit_inverse_oracle(records: &[TaskRecord], fit: &OlsFit) -> (Vec<f64>, Vec<f64>) {
    let n = records.len();
    let z = |v: Vec<f64>| {
        let m = v.iter().sum::<f64>() / n as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        v.into_iter().map(|x| (x - m) / sd).collect::<Vec<_>>()
    };
    let mut cols = vec![
        vec![1.0; n],
        z(records.iter().map(|r| r.bbox.y).collect()),
        z(records.iter().map(|r| r.bbox.area()).collect()),
        z(records.iter().map(|r| f64::from(r.n_candidates)).collect()),
    ];
    for name in &fit.names[4..] {
        cols.push(records.iter().map(|r| f64::from(u8::from(r.target_type.as_str() == name))).collect());
    }
    let p = cols.len();
    let y: Vec<f64> = records.iter().map(|r| r.search_time_s).collect();
    let xtx: Vec<Vec<f64>> = (0..p)
        .map(|i| (0..p).map(|j| (0..n).map(|k| cols[i][k] * cols[j][k]).sum()).collect())
        .collect();
    let xty: Vec<f64> = (0..p).map(|i| (0..n).map(|k| cols[i][k] * y[k]).sum()).collect();
    let inv = invert(xtx);
    let beta: Vec<f64> = (0..p).map(|i| (0..p).map(|j| inv[i][j] * xty[j]).sum()).collect();
    let rss: f64 = (0..n)
        .map(|k| (y[k] - (0..p).map(|i| cols[i][k] * beta[i]).sum::<f64>()).powi(2))
        .sum();
    let dof = (n - p) as f64;
    let s2 = rss / dof;
    let dist = StudentsT::new(0.0, 1.0, dof).unwrap();
    let t: Vec<f64> = (0..p).map(|i| beta[i] / (s2 * inv[i][i]).sqrt()).collect();
    let pv = t.iter().map(|&ti| 2.0 * dist.cdf(-ti.abs())).collect();
    (t, pv)
}

fn ols_oracle() -> Outcome {
    let start = Instant::now();
    let base = SynthConfig { users: 600, ..Default::default() };
    let clean = synth_generate(&base, 5).map_err(err)?;
    let (kept, _) = filter_trials(&clean.records);
    ensure!(kept.len() >= 5000, "only {} trials", kept.len());
    let fit = layout_regression(&kept).map_err(err)?.standardized;
    let mut exact = 0.0f64;
    for (name, want) in LAYOUT_FEATURES.iter().zip(ORACLE_COEFFICIENTS) {
        exact = exact.max((fit.coefficient(name).unwrap() - want).abs());
    }
    ensure!(exact <= 1e-6, "σ=0 coefficients off by {exact:.3e}: {:?}", &fit.coefficients[1..4]);

    let noisy = synth_generate(&SynthConfig { noise_sd: 0.5, ..base }, 6).map_err(err)?;
    let (kept, _) = filter_trials(&noisy.records);
    let fit = layout_regression(&kept).map_err(err)?.standardized;
    let mut max_se = 0.0f64;
    for (name, want) in LAYOUT_FEATURES.iter().zip(ORACLE_COEFFICIENTS) {
        let i = fit.index(name).unwrap();
        let k = (fit.coefficients[i] - want).abs() / fit.std_errors[i];
        max_se = max_se.max(k);
    }
    ensure!(max_se <= 3.0, "σ=0.5 coefficient {max_se:.2} se from truth");

    let (t, p) = explicit_inverse_oracle(&kept, &fit);
    let mut dt = 0.0f64;
    let mut dp = 0.0f64;
    for i in 0..t.len() {
        dt = dt.max((fit.t_values[i] - t[i]).abs() / t[i].abs().max(1.0));
        dp = dp.max((fit.p_values[i] - p[i]).abs());
    }
    ensure!(dt <= 1e-8 && dp <= 1e-8, "t/p deviate from the explicit inverse: {dt:.2e} / {dp:.2e}");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "runtime {secs:.1}s exceeds 30s");
    Ok(format!(
        "n {}, σ=0 error {exact:.1e}, σ=0.5 worst {max_se:.2} se, t/p error {dt:.1e}/{dp:.1e}, {secs:.1}s",
        kept.len()
    ))
}

fn type_contrast_recovery() -> Outcome {
    let cfg = SynthConfig {
        users: 1000,
        pages: 1000,
        noise_sd: 0.3,
        type_weights: [0.2; 5],
        ..Default::default()
    };
    let corpus = synth_generate(&cfg, 21).map_err(err)?;
    let (kept, _) = filter_trials(&corpus.records);
    let times: Vec<f64> = kept.iter().map(|r| r.search_time_s).collect();
    let types: Vec<TargetType> = kept.iter().map(|r| r.target_type).collect();
    let tc = type_contrast(&times, &types).map_err(err)?;
    let mut worst = 0.0f64;
    for t in &TargetType::ALL[1..] {
        let i = tc.fit.index(t.as_str()).unwrap();
        let k = (tc.fit.coefficients[i] - ORACLE_TYPE_OFFSETS[t.id()]).abs() / tc.fit.std_errors[i];
        worst = worst.max(k);
    }
    print!("{}", tc.to_text());
    ensure!(worst <= 3.0, "offset {worst:.2} se from truth");
    let order = [TargetType::Text, TargetType::Button, TargetType::Link, TargetType::InputField, TargetType::Image];
    let means: Vec<f64> = order.iter().map(|t| tc.means[t.id()].unwrap()).collect();
    ensure!(means.windows(2).all(|w| w[0] > w[1]), "mean ordering broken: {means:?}");
    Ok(format!("n {}, worst offset {worst:.2} se, text > button > link > input > image", kept.len()))
}

fn model_ordering() -> Outcome {
    let start = Instant::now();
    let synth = SynthConfig {
        users: 1000,
        clutter_weight: 0.5,
        noise_sd: 0.3,
        ..Default::default()
    };
    let corpus = synth_generate(&synth, 0).map_err(err)?;
    let images = corpus.render_pages();
    let cfg = ModelConfig {
        page_res: 64,
        ..Default::default()
    };
    let mut by_model: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for seed in 0..5u64 {
        let prepared = prepare(&corpus.records, [0.3, 0.1, 0.6], seed).map_err(err)?;
        let train_cfg = TrainConfig {
            adam: AdamConfig { lr: 1e-3, ..Default::default() },
            max_epochs: 3,
            seed,
            ..Default::default()
        };
        let (net, _) = train_net(cfg.clone(), &train_cfg, &prepared, &images).map_err(err)?;
        let bundle = ModelBundle {
            regression: net,
            classification: None,
        };
        let reports = evaluate_models(&bundle, &prepared.split.train, &prepared.split.test, &images, seed, "test")
            .map_err(err)?;
        for r in reports {
            by_model.entry(r.model).or_default().push(r.cross_user_r2[0]);
        }
        println!(
            "  seed {seed}: deep {:.4}  structured-all {:.4}",
            by_model["deep"][seed as usize], by_model["structured-all"][seed as usize]
        );
    }
    let deep = &by_model["deep"];
    let base = &by_model["structured-all"];
    let t = paired_t(deep, base).map_err(err)?;
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let singles: Vec<(&String, f64)> = by_model
        .iter()
        .filter(|(k, _)| *k != "deep" && *k != "structured-all")
        .map(|(k, v)| (k, mean(v)))
        .collect();
    for (k, v) in &singles {
        println!("  single {k:<14} {v:.4}");
    }
    let best = singles.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    ensure!(t.dof == 4.0, "dof {}", t.dof);
    ensure!(mean(deep) > mean(base) && t.p < 0.05, "deep {:.4} vs structured-all {:.4}, t({}) = {:.2}, p = {:.4}", mean(deep), mean(base), t.dof, t.t, t.p);
    ensure!(best.0 == "y", "strongest single feature is {} ({:.4})", best.0, best.1);
    ensure!(secs < 1800.0, "runtime {secs:.0}s exceeds 30 min");
    Ok(format!(
        "deep {:.4} > structured-all {:.4}, t(4) = {:.2}, p = {:.2e}; best single y {:.4}; {secs:.0}s",
        mean(deep),
        mean(base),
        t.t,
        t.p,
        best.1
    ))
}

fn metric_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let users: Vec<String> = (0..400).map(|i| format!("u{}", i % 40)).collect();
    let uref: Vec<&str> = users.iter().map(String::as_str).collect();
    let truths: Vec<f64> = (0..400).map(|_| rng.random_range(0.0..10.0)).collect();
    let r2 = r2_cross(&truths, &truths).map_err(err)?;
    let within = r2_within(&truths, &truths, &uref).map_err(err)?.value;
    let rank = ranking_accuracy(&truths, &truths).map_err(err)?;
    ensure!(r2 == 1.0 && within == 1.0 && rank == 1.0, "perfect predictor: {r2} {within} {rank}");
    let m = truths.iter().sum::<f64>() / truths.len() as f64;
    let constant = vec![m; truths.len()];
    let r2c = r2_cross(&constant, &truths).map_err(err)?;
    let rankc = ranking_accuracy(&constant, &truths).map_err(err)?;
    ensure!(r2c.abs() < 1e-12 && rankc == 0.5, "constant predictor: {r2c} {rankc}");
    let labels = bucketize(&truths, &uref).map_err(err)?;
    for u in 0..40 {
        let mut counts = [0usize; 5];
        for (i, l) in labels.iter().enumerate() {
            if i % 40 == u {
                counts[l.unwrap()] += 1;
            }
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        ensure!(hi - lo <= 1, "user u{u} class counts {counts:?}");
    }
    let n = 100_000;
    let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
    let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
    let acc = classification_accuracy(&pred, &truth).map_err(err)?;
    ensure!((acc - 0.2).abs() <= 0.01, "random accuracy {acc}");
    Ok(format!("perfect 1/1, constant 0/0.5, quintiles balanced, random accuracy {acc:.4}"))
}

/// Total objective and mean corr(A, mask) in train mode with a fixed dropout
/// stream, so that values before and after training are comparable.
fn objective(net: &ScannabilityNet, set: &SampleSet, idx: &[usize]) -> Result<(f64, f64), String> {
    let mut g = Graph::<f32>::new();
    let vars: BTreeMap<String, Var> = net.params.iter().map(|(n, t)| (n.to_string(), g.param(t.clone()))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let batch = set.batch(idx);
    let (parts, fwd) = loss(&net.config, &mut g, &vars, &net.buffers, &batch, true, &mut rng).map_err(err)?;
    let cells = set.grid * set.grid;
    let a = g.value(fwd.attention).data();
    let corr = idx
        .iter()
        .enumerate()
        .map(|(k, &i)| pearson(&a[k * cells..(k + 1) * cells], set.samples[i].mask.data()))
        .sum::<f64>()
        / idx.len() as f64;
    Ok((f64::from(g.value(parts.total).item()), corr))
}

fn overfit_once(seed: u64) -> Result<(f64, f64, f64, f64, Vec<u32>), String> {
    let corpus = synth_generate(
        &SynthConfig {
            users: 20,
            clutter_weight: 0.5,
            noise_sd: 0.3,
            ..Default::default()
        },
        seed,
    )
    .map_err(err)?;
    let (kept, _) = filter_trials(&corpus.records);
    let norm = fit_norm(&kept, "all").map_err(err)?;
    let cfg = ModelConfig::default();
    let set = SampleSet::from_records(&kept[..8], &corpus.render_pages(), &norm, &cfg).map_err(err)?;
    let idx: Vec<usize> = (0..8).collect();
    let batch = set.batch(&idx);
    let mut net = ScannabilityNet::new(cfg, norm, seed).map_err(err)?;
    let mut adam = Adam::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l0, c0) = objective(&net, &set, &idx)?;
    for _ in 0..50 {
        train_step(&mut net, &mut adam, &batch, &mut rng).map_err(err)?;
    }
    let (l1, c1) = objective(&net, &set, &idx)?;
    let bits = net.params.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect();
    Ok((l0, l1, c0, c1, bits))
}

fn overfit_run() -> Outcome {
    let (l0, l1, c0, c1, bits) = overfit_once(0)?;
    let (m0, m1, d0, d1, bits2) = overfit_once(0)?;
    ensure!(
        (l0, l1, c0, c1) == (m0, m1, d0, d1) && bits == bits2,
        "repeat run differs"
    );
    let summary = format!("loss {l0:.4} → {l1:.4}, mean corr(A, mask) {c0:.4} → {c1:.4}, deterministic");
    ensure!(l1 < l0, "loss did not decrease: {summary}");
    ensure!(c1 > c0, "correlation did not increase: {summary}");
    Ok(summary)
}

fn checkpoint_round_trip() -> Outcome {
    let corpus = synth_generate(&SynthConfig { users: 10, ..Default::default() }, 4).map_err(err)?;
    let (kept, _) = filter_trials(&corpus.records);
    let norm = fit_norm(&kept, "all").map_err(err)?;
    let images = corpus.render_pages();
    let reg_cfg = ModelConfig { page_res: 64, ..Default::default() };
    let cls_cfg = ModelConfig { task: Task::Classification, ..reg_cfg.clone() };
    let set = SampleSet::from_records(&kept, &images, &norm, &reg_cfg).map_err(err)?;
    let mut reg = ScannabilityNet::new(reg_cfg, norm.clone(), 1).map_err(err)?;
    let mut adam = Adam::new(AdamConfig { lr: 1e-3, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for step in 0..5 {
        let idx: Vec<usize> = (step * 8..step * 8 + 8).collect();
        train_step(&mut reg, &mut adam, &set.batch(&idx), &mut rng).map_err(err)?;
    }
    let bundle = ModelBundle {
        regression: reg,
        classification: Some(ScannabilityNet::new(cls_cfg, norm, 2).map_err(err)?),
    };
    let bytes = to_bytes(&bundle, serde_json::json!({"note": "round trip"}));
    let (restored, meta) = from_bytes(&bytes).map_err(err)?;
    ensure!(meta.extra["note"] == "round trip", "metadata lost");
    let nets = [
        (&bundle.regression, &restored.regression),
        (bundle.classification.as_ref().unwrap(), restored.classification.as_ref().unwrap()),
    ];
    let mut count = 0;
    for (a, b) in nets {
        for store in [(&a.params, &b.params), (&a.buffers, &b.buffers)] {
            ensure!(store.0.len() == store.1.len(), "tensor count differs");
            for (name, t) in store.0.iter() {
                let u = store.1.get(name).ok_or(format!("missing {name}"))?;
                ensure!(t.shape() == u.shape(), "{name} shape differs");
                ensure!(
                    t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
                    "{name} not bit-identical"
                );
                count += 1;
            }
        }
        ensure!(a.config == b.config && a.norm == b.norm, "metadata differs");
    }
    let metric = |net: &ScannabilityNet| -> Result<f64, String> {
        let p: Vec<f64> = net.predict_set(&set).map_err(err)?.outputs.iter().map(|o| f64::from(o[0])).collect();
        let t: Vec<f64> = set.samples.iter().map(|s| f64::from(s.time)).collect();
        r2_cross(&p, &t).map_err(err)
    };
    let (before, after) = (metric(&bundle.regression)?, metric(&restored.regression)?);
    ensure!(before.to_bits() == after.to_bits(), "metric {before} vs {after}");
    ensure!(model::evaluate_loss(&bundle.regression, &set).map_err(err)?.to_bits()
        == model::evaluate_loss(&restored.regression, &set).map_err(err)?.to_bits(), "eval loss differs");
    Ok(format!("{count} tensors bit-identical, cross-user R² {before:.6} before and after"))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("shape suite", shape_suite),
        ("attention oracle", attention_oracle),
        ("OLS oracle", ols_oracle),
        ("type-contrast recovery", type_contrast_recovery),
        ("model ordering", model_ordering),
        ("metric invariants", metric_invariants),
        ("overfit run", overfit_run),
        ("checkpoint round-trip", checkpoint_round_trip),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut results = Vec::new();
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        println!("--- {name}");
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        results.push((name, outcome, secs));
    }
    println!("\n=== acceptance ===");
    let mut failed = 0;
    for (name, outcome, secs) in &results {
        match outcome {
            Ok(d) => println!("PASS  {name:<26} {d}  [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name:<26} {d}  [{secs:.1}s]")
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
