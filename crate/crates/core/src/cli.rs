//! Command-line pipeline: generate, train, eval, analyze, predict, serve and
//! gradcheck. Every command writes a `config.json` echo of its arguments into
//! its run directory (`runs/<unix-time>-<seed>/` unless `--out` is given).

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analytics::{binned_stats, layout_regression, pca2, two_sample_t, type_contrast};
use crate::dataset::{
    decode_png, filter_trials, load_screenshots, load_trials, split_by_user, synth_generate, DEFAULT_SPLIT, FilterReport,
    PageImage, SplitSet, SynthConfig, TargetType, TaskRecord,
};
use crate::evaluation::{evaluate, table_text, Baseline, EvalInputs, EvalReport};
use crate::features::{fit_norm, raw_numeric, FeatureNorm, NUMERIC_FEATURES};
use crate::model::{
    attention_png, train, AttentionVariant, History, ModelBundle, ModelConfig, SampleSet, ScannabilityNet,
    Task, TrainConfig,
};
use crate::service::{self, load_checkpoint, save_checkpoint, AppState};
use crate::tensor::AdamConfig;
use crate::gradsuite;

#[derive(Debug, Parser, Serialize)]
#[command(name = "scannability", version, about = "Visual search time prediction for webpage targets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Write a synthetic task corpus with a known ground-truth time model.
    Generate(GenerateArgs),
    /// Train the network(s) on a corpus and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint and the linear baselines on the held-out users.
    Eval(EvalArgs),
    /// Layout regression, type contrast, binned curves and embedding PCA.
    Analyze(AnalyzeArgs),
    /// Predict one target's search time and export its attention map.
    Predict(PredictArgs),
    /// Serve /predict, /whatif and /health over HTTP.
    Serve(ServeArgs),
    /// Finite-difference check of every layer and of the full losses.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().users)]
    pub users: usize,
    #[arg(long, default_value_t = SynthConfig::default().trials_per_user)]
    pub trials_per_user: usize,
    #[arg(long, default_value_t = SynthConfig::default().pages)]
    pub pages: usize,
    /// Weight of the pixel-only clutter term.
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    /// Standard deviation of the Gaussian noise term.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = SynthConfig::default().incorrect_rate)]
    pub incorrect_rate: f64,
    #[arg(long, default_value_t = SynthConfig::default().long_rate)]
    pub long_rate: f64,
}

impl GenerateArgs {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            users: self.users,
            trials_per_user: self.trials_per_user,
            pages: self.pages,
            clutter_weight: self.gamma,
            noise_sd: self.sigma,
            incorrect_rate: self.incorrect_rate,
            long_rate: self.long_rate,
            ..SynthConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Regression network only.
    Regression,
    /// Regression network plus a separately trained 5-way classifier.
    Both,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Corpus directory holding trials.jsonl and the screenshots.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seeds the user split, initialization, shuffling and dropout.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Both)]
    pub mode: Mode,
    /// raw, modulated or softmax.
    #[arg(long, default_value = "raw")]
    pub attention: AttentionVariant,
    /// L2-normalize both sides of the attention dot product.
    #[arg(long)]
    pub cosine: bool,
    /// L2 weight on kernels, dense weights and the type embedding.
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    /// Weight of the attention-to-mask term.
    #[arg(long, default_value_t = 0.001)]
    pub mask_weight: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Side of the resized page raster; a multiple of 8.
    #[arg(long, default_value_t = 512)]
    pub page_res: usize,
    /// Train, validation and test user fractions.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SPLIT)]
    pub split: Vec<f64>,
}

impl TrainArgs {
    pub fn model_config(&self, task: Task) -> ModelConfig {
        ModelConfig {
            page_res: self.page_res,
            attention: self.attention,
            cosine: self.cosine,
            dropout: self.dropout,
            mask_weight: self.mask_weight,
            l2_weight: self.l2,
            task,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
        }
    }

    pub fn fractions(&self) -> Result<[f64; 3]> {
        let f: [f64; 3] = self.split.as_slice().try_into().context("--split takes three fractions")?;
        Ok(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Validation,
    Test,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Adds a PCA of the learned type embeddings.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Page screenshot.
    #[arg(long)]
    pub png: PathBuf,
    /// Target box as x,y,w,h in page pixels.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
    pub bbox: Vec<f64>,
    /// image, text, link, button or input_field.
    #[arg(long = "type")]
    pub target_type: String,
    /// DOM leaf count of the page.
    #[arg(long = "n")]
    pub n_candidates: u32,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ServeArgs {
    /// Served model; without one, prediction endpoints answer 503.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Largest rows × cols accepted by /whatif.
    #[arg(long, default_value_t = service::DEFAULT_GRID_CAP)]
    pub grid_cap: usize,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates sampled per check.
    #[arg(long, default_value_t = 200)]
    pub coords: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Echo of a command's arguments.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig<'a> {
    pub version: &'static str,
    #[serde(flatten)]
    pub command: &'a Command,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Creates the run directory and writes `config.json` into it.
fn run_dir(out: &Option<PathBuf>, seed: u64, command: &Command) -> Result<PathBuf> {
    let dir = match out {
        Some(d) => d.clone(),
        None => {
            let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            PathBuf::from("runs").join(format!("{ts}-{seed}"))
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let cfg = RunConfig {
        version: env!("CARGO_PKG_VERSION"),
        command,
    };
    write(&dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    Ok(dir)
}

/// Filtered trials split by user, with features normalized on train.
pub struct Prepared {
    pub filter: FilterReport,
    pub split: SplitSet,
    pub norm: FeatureNorm,
}

pub fn prepare(records: &[TaskRecord], fractions: [f64; 3], seed: u64) -> Result<Prepared> {
    let (kept, filter) = filter_trials(records);
    let split = split_by_user(&kept, fractions, seed)?;
    ensure!(split.is_user_disjoint(), "user split overlaps");
    let norm = fit_norm(&split.train, "train")?;
    Ok(Prepared { filter, split, norm })
}

fn load_corpus(dir: &Path) -> Result<Vec<TaskRecord>> {
    let path = dir.join("trials.jsonl");
    load_trials(&path).with_context(|| format!("loading {}", path.display()))
}

/// Trains one network with early stopping on the validation split.
pub fn train_net(
    cfg: ModelConfig,
    train_cfg: &TrainConfig,
    prepared: &Prepared,
    images: &std::collections::BTreeMap<String, PageImage>,
) -> Result<(ScannabilityNet, History)> {
    let train_set = SampleSet::from_records(&prepared.split.train, images, &prepared.norm, &cfg)?;
    let val_set = SampleSet::from_records(&prepared.split.validation, images, &prepared.norm, &cfg)?;
    let mut net = ScannabilityNet::new(cfg, prepared.norm.clone(), train_cfg.seed)?;
    let history = train(&mut net, &train_set, &val_set, train_cfg)?;
    Ok((net, history))
}

/// Scores the bundle and every linear baseline on `test`. Baselines are fit
/// on `train`; all predictions are in normalized-time units.
pub fn evaluate_models(
    bundle: &ModelBundle,
    train: &[TaskRecord],
    test: &[TaskRecord],
    images: &std::collections::BTreeMap<String, PageImage>,
    seed: u64,
    split: &str,
) -> Result<Vec<EvalReport>> {
    let net = &bundle.regression;
    let norm = &net.norm;
    let truths: Vec<f64> = test.iter().map(|r| norm.normalize_time(r.search_time_s)).collect();
    let users: Vec<&str> = test.iter().map(|r| r.user_id.as_str()).collect();
    let set = SampleSet::from_records(test, images, norm, &net.config)?;
    let deep: Vec<f64> = net.predict_set(&set)?.outputs.iter().map(|o| f64::from(o[0])).collect();
    let classes: Option<Vec<usize>> = match &bundle.classification {
        Some(c) => Some(
            c.predict_set(&set)?
                .outputs
                .iter()
                .map(|p| {
                    p.iter()
                        .enumerate()
                        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                        .0
                })
                .collect(),
        ),
        None => None,
    };
    let mut reports = Vec::new();
    let mut report = EvalReport::new("deep", split);
    report.push(&evaluate(
        seed,
        &EvalInputs {
            truths: &truths,
            user_ids: &users,
            regression: &deep,
            classes: classes.as_deref(),
        },
    )?);
    reports.push(report);
    for b in Baseline::all() {
        let preds = b.fit_predict(train, test, norm)?;
        let mut report = EvalReport::new(b.name(), split);
        report.push(&evaluate(
            seed,
            &EvalInputs {
                truths: &truths,
                user_ids: &users,
                regression: &preds,
                classes: None,
            },
        )?);
        reports.push(report);
    }
    Ok(reports)
}

fn cmd_generate(args: &GenerateArgs, command: &Command) -> Result<()> {
    let dir = run_dir(&args.out, args.seed, command)?;
    let corpus = synth_generate(&args.synth_config(), args.seed)?;
    corpus.write_to(&dir)?;
    println!("wrote {} trials over {} pages to {}", corpus.records.len(), corpus.pages.len(), dir.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs, command: &Command) -> Result<()> {
    let dir = run_dir(&args.out, args.seed, command)?;
    let records = load_corpus(&args.data)?;
    let prepared = prepare(&records, args.fractions()?, args.seed)?;
    let images = load_screenshots(&args.data, &records)?;
    let train_cfg = args.train_config();
    let (regression, history) = train_net(args.model_config(Task::Regression), &train_cfg, &prepared, &images)?;
    write(&dir.join("history.csv"), history.to_csv())?;
    let mut histories = json!({ "regression": history });
    let classification = match args.mode {
        Mode::Regression => None,
        Mode::Both => {
            let (net, h) = train_net(args.model_config(Task::Classification), &train_cfg, &prepared, &images)?;
            write(&dir.join("history_classification.csv"), h.to_csv())?;
            histories["classification"] = json!(h);
            Some(net)
        }
    };
    let bundle = ModelBundle {
        regression,
        classification,
    };
    let extra = json!({
        "train": args,
        "filter": prepared.filter,
        "history": histories,
    });
    let path = dir.join("checkpoint.bin");
    save_checkpoint(&bundle, extra, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs, command: &Command) -> Result<()> {
    let (bundle, meta) = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let train_args: TrainArgs = serde_json::from_value(meta.extra["train"].clone())
        .context("checkpoint lacks the training configuration needed to rebuild the split")?;
    let dir = run_dir(&args.out, train_args.seed, command)?;
    let records = load_corpus(&args.data)?;
    let prepared = prepare(&records, train_args.fractions()?, train_args.seed)?;
    let images = load_screenshots(&args.data, &records)?;
    let (held_out, name) = match args.split {
        SplitName::Test => (&prepared.split.test, "test"),
        SplitName::Validation => (&prepared.split.validation, "validation"),
    };
    let reports = evaluate_models(&bundle, &prepared.split.train, held_out, &images, train_args.seed, name)?;
    let body = json!({
        "config": RunConfig { version: env!("CARGO_PKG_VERSION"), command },
        "train": train_args,
        "normalization": "feature and time statistics fitted on the train split only",
        "reports": reports,
    });
    write(&dir.join("eval.json"), serde_json::to_string_pretty(&body)?)?;
    write(&dir.join("eval_reports.json"), serde_json::to_string_pretty(&reports)?)?;
    let table = table_text(&reports);
    write(&dir.join("eval.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs, command: &Command) -> Result<()> {
    let dir = run_dir(&args.out, 0, command)?;
    let records = load_corpus(&args.data)?;
    let (kept, filter) = filter_trials(&records);
    let incorrect: Vec<f64> = records.iter().filter(|r| !r.correct).map(|r| r.search_time_s).collect();
    let kept_times: Vec<f64> = kept.iter().map(|r| r.search_time_s).collect();
    let incorrect_vs_kept = if incorrect.len() >= 2 && kept_times.len() >= 2 {
        Some(two_sample_t(&incorrect, &kept_times)?)
    } else {
        None
    };
    write(
        &dir.join("filter.json"),
        serde_json::to_string_pretty(&json!({ "filter": filter, "incorrect_vs_kept": incorrect_vs_kept }))?,
    )?;

    let layout = layout_regression(&kept)?;
    write(&dir.join("layout_regression.txt"), layout.to_text())?;
    write(&dir.join("layout_regression_standardized.csv"), layout.standardized.to_csv())?;
    write(&dir.join("layout_regression_raw.csv"), layout.raw.to_csv())?;

    let types: Vec<TargetType> = kept.iter().map(|r| r.target_type).collect();
    let contrast = type_contrast(&kept_times, &types)?;
    write(&dir.join("type_contrast.txt"), contrast.to_text())?;
    write(&dir.join("type_contrast.csv"), contrast.to_csv())?;

    for (i, name) in NUMERIC_FEATURES.iter().enumerate() {
        if !matches!(*name, "y" | "area" | "n_candidates") {
            continue;
        }
        let feature: Vec<f64> = kept.iter().map(|r| raw_numeric(&r.bbox, r.n_candidates)[i]).collect();
        let bins = binned_stats(&kept_times, &feature, args.bins)?;
        write(&dir.join(format!("binned_{name}.csv")), bins.to_csv())?;
    }

    if let Some(path) = &args.checkpoint {
        let (bundle, _) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        let emb = bundle.regression.type_embeddings();
        let (rows, cols) = (emb.shape()[0], emb.shape()[1]);
        let m = DMatrix::from_fn(rows, cols, |i, j| f64::from(emb.data()[i * cols + j]));
        let pca = pca2(&m)?;
        let mut csv = format!(
            "# explained_ratio {} {}\ntype,pc1,pc2\n",
            pca.explained_ratio[0], pca.explained_ratio[1]
        );
        for (t, p) in TargetType::ALL.iter().zip(&pca.projection) {
            csv.push_str(&format!("{},{},{}\n", t.as_str(), p[0], p[1]));
        }
        write(&dir.join("pca_type_embeddings.csv"), csv)?;
    }
    print!("{}\n{}", layout.standardized.to_text("layout regression"), contrast.to_text());
    println!("wrote reports to {}", dir.display());
    Ok(())
}

fn cmd_predict(args: &PredictArgs, command: &Command) -> Result<()> {
    let bbox: [f64; 4] = args.bbox.as_slice().try_into().context("--bbox takes x,y,w,h")?;
    let (bundle, _) = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let bytes = fs::read(&args.png).with_context(|| format!("reading {}", args.png.display()))?;
    let page = decode_png(&bytes)?;
    let resp = service::predict(&bundle, &page, bbox, &args.target_type, args.n_candidates)
        .map_err(|e| anyhow::anyhow!("{}{}", e.field.map(|f| format!("{f}: ")).unwrap_or_default(), e.error))?;
    let dir = run_dir(&args.out, 0, command)?;
    let map = crate::tensor::Tensor::new(vec![resp.grid, resp.grid], resp.attention.clone())?;
    let png_path = dir.join("attention.png");
    write(&png_path, attention_png(&map, page.width())?)?;
    let out = json!({
        "seconds": resp.seconds,
        "normalized": resp.normalized,
        "class_probs": resp.class_probs,
        "attention_png": png_path,
    });
    write(&dir.join("prediction.json"), serde_json::to_string_pretty(&out)?)?;
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_serve(args: &ServeArgs) -> Result<()> {
    let model = match &args.checkpoint {
        Some(p) => Some(service::load_for_serving(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let addr: SocketAddr = format!("{}:{}", args.host, args.port).parse().context("invalid --host/--port")?;
    let state = AppState::new(model, args.grid_cap);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(state, addr))?;
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs, command: &Command) -> Result<()> {
    let checks = gradsuite::run(args.seed, args.coords)?;
    print!("{}", gradsuite::report_text(&checks));
    if let Some(out) = &args.out {
        let dir = run_dir(&Some(out.clone()), args.seed, command)?;
        write(&dir.join("gradcheck.json"), serde_json::to_string_pretty(&checks)?)?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} gradient check(s) exceeded relative error {:e}", gradsuite::TOLERANCE);
    }
    Ok(())
}

/// Runs one parsed command.
pub fn run(cli: &Cli) -> Result<()> {
    let c = &cli.command;
    match c {
        Command::Generate(a) => cmd_generate(a, c),
        Command::Train(a) => cmd_train(a, c),
        Command::Eval(a) => cmd_eval(a, c),
        Command::Analyze(a) => cmd_analyze(a, c),
        Command::Predict(a) => cmd_predict(a, c),
        Command::Serve(a) => cmd_serve(a),
        Command::Gradcheck(a) => cmd_gradcheck(a, c),
    }
}
