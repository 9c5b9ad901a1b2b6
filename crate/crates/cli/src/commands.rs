//! Subcommand implementations. Every command reads its prerequisites from and
//! writes its artifacts into the `--out` directory:
//!
//! | artifact                   | written by        | read by                                   |
//! |----------------------------|-------------------|-------------------------------------------|
//! | `backbone.ckpt`            | `pretrain`        | everything except `export-data`           |
//! | `composer.ckpt`            | `train-composer`  | `generate`, `evaluate`, `bench`           |
//! | `quant_composer_w{b}.ckpt` | `quant-train`     | —                                         |
//! | `ttt_class{c}.ckpt`        | `ttt`             | —                                         |
//!
//! Each command also appends to `metrics.jsonl` and writes a JSON report
//! embedding the resolved config and build id.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use composer_lab::backbone::Denoiser;
use composer_lab::bench::{
    default_grid, run_ablation, run_comparison, toy_frechet, ttt_adapt, AblationAxis, AblationBase, BenchEnv, Strategy,
};
use composer_lab::composer::Composer;
use composer_lab::composition::UpdateSet;
use composer_lab::data::{
    evaluate_val_loss, pretrain_backbone, train_composer, validation_batches, BatchMode, SimilarityIndex,
    SyntheticDataset,
};
use composer_lab::quant::{
    calibrate_activations, calibration_batches, quantize_backbone, train_quant_composer, QuantizedBackbone,
};
use composer_lab::{Module, SeededRng, Tape, Tensor};
use log::info;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::metrics::{write_csv, write_pgm, write_report, MetricsLog};

pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const COMPOSER_FILE: &str = "composer.ckpt";

/// Resolved inputs shared by every command.
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub metrics: MetricsLog,
    pub command: &'static str,
}

impl Context {
    pub fn new(cfg: RunConfig, out: PathBuf, command: &'static str) -> Result<Self, CliError> {
        std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        let millis = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
        let run_id = format!("{command}-s{}-{millis}", cfg.seed);
        let metrics = MetricsLog::open(&out.join("metrics.jsonl"), run_id)?;
        Ok(Context { cfg, out, metrics, command })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn datasets(&self) -> Result<(SyntheticDataset, SyntheticDataset), CliError> {
        let d = &self.cfg.dataset;
        Ok(SyntheticDataset::train_val(self.cfg.seed, d.n, d.c, self.cfg.backbone.image_size)?)
    }

    fn report<P: Serialize>(&self, name: &str, result: P) -> Result<(), CliError> {
        write_report(&self.path(name), self.command, &self.cfg, result)
    }

    fn csv<R: Serialize>(&self, name: &str, rows: &[R]) -> Result<(), CliError> {
        write_csv(&self.path(name), rows, self.command, &self.cfg)
    }

    fn require(&self, name: &str, producer: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::Missing {
                path: p.display().to_string(),
                hint: format!(
                    "run `composer-lab {producer} --out {}` with the same config first",
                    self.out.display()
                ),
            })
        }
    }

    pub fn load_backbone(&self) -> Result<Denoiser<f32>, CliError> {
        let path = self.require(BACKBONE_FILE, "pretrain")?;
        let mut net = Denoiser::<f32>::new(self.cfg.denoiser(), &SeededRng::new(self.cfg.seed))?;
        Checkpoint::load(&path)?.load_into(&mut net)?;
        net.set_requires_grad(false);
        Ok(net)
    }

    pub fn load_composer(&self, net: &Denoiser<f32>) -> Result<Composer<f32>, CliError> {
        let path = self.require(COMPOSER_FILE, "train-composer")?;
        let mut composer = Composer::<f32>::new(self.cfg.composer_config(false, None)?, &net.config, &SeededRng::new(self.cfg.seed))?;
        let ck = Checkpoint::load(&path)?;
        if ck.get("composer.bank.frozen").is_some() {
            composer.prepare_frozen_bank();
        }
        ck.load_into(&mut composer)?;
        Ok(composer)
    }
}

fn save_module<M: Module<f32>>(module: &M, path: &Path) -> Result<(), CliError> {
    Checkpoint::from_module(module).save(path)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn similarity_index(cfg: &RunConfig, train: &SyntheticDataset) -> Option<SimilarityIndex> {
    (cfg.train.pipeline == BatchMode::ContextSimilarity.name()).then(|| SimilarityIndex::build(train))
}

#[derive(Debug, Serialize)]
struct PretrainResult {
    val_loss: Vec<f64>,
    train_loss: Vec<f64>,
    backbone_checksum: u64,
    secs: f64,
}

pub fn pretrain(ctx: &mut Context) -> Result<(), CliError> {
    let (train, val) = ctx.datasets()?;
    let mut net = Denoiser::<f32>::new(ctx.cfg.denoiser(), &SeededRng::new(ctx.cfg.seed))?;
    let start = Instant::now();
    let mut log = Vec::new();
    let report = pretrain_backbone(&mut net, &train, &val, &ctx.cfg.pretrain_config(), |e, tr, va| log.push((e, tr, va)))?;
    for (e, tr, va) in log {
        ctx.metrics.record("pretrain", Some(e), None, "train_loss", tr)?;
        ctx.metrics.record("pretrain", Some(e), None, "val_loss", va)?;
    }
    save_module(&net, &ctx.path(BACKBONE_FILE))?;
    ctx.report(
        "pretrain.json",
        PretrainResult {
            val_loss: report.val_loss,
            train_loss: report.train_loss,
            backbone_checksum: net.checksum(),
            secs: start.elapsed().as_secs_f64(),
        },
    )
}

pub fn train_composer_cmd(ctx: &mut Context) -> Result<(), CliError> {
    let net = ctx.load_backbone()?;
    let (train, val) = ctx.datasets()?;
    let mut composer = Composer::<f32>::new(ctx.cfg.composer_config(false, None)?, &net.config, &SeededRng::new(ctx.cfg.seed))?;
    let index = similarity_index(&ctx.cfg, &train);
    let mut stats = Vec::new();
    let report = train_composer(&net, &mut composer, &train, &val, index.as_ref(), &ctx.cfg.train_config()?, |s| {
        stats.push(s.clone())
    })?;
    ctx.metrics.record("train-composer", Some(0), None, "val_loss", report.initial_val)?;
    ctx.metrics.record("train-composer", None, None, "static_val_loss", report.static_val)?;
    for s in &stats {
        ctx.metrics.record("train-composer", Some(s.epoch), None, "train_loss", s.train_loss)?;
        ctx.metrics.record("train-composer", Some(s.epoch), None, "val_loss", s.val_loss)?;
    }
    save_module(&composer, &ctx.path(COMPOSER_FILE))?;
    ctx.report("train_composer.json", &report)
}

#[derive(Debug, Serialize)]
struct GenerateResult {
    class: usize,
    count: usize,
    steps: usize,
    strategy: &'static str,
    files: Vec<String>,
    secs: f64,
}

pub struct GenerateArgs {
    pub class: usize,
    pub steps: Option<usize>,
    pub count: usize,
    pub use_static: bool,
}

/// Draws images deterministically from `(seed, class)`: the same flags give
/// byte-identical files.
pub fn generate(ctx: &mut Context, args: &GenerateArgs) -> Result<(), CliError> {
    let net = ctx.load_backbone()?;
    if args.class >= net.config.classes {
        return Err(CliError::Usage(format!(
            "--class {} outside [0, {})",
            args.class, net.config.classes
        )));
    }
    let steps = args.steps.unwrap_or(ctx.cfg.bench.steps);
    let start = Instant::now();
    let updates = if args.use_static {
        None
    } else {
        let composer = ctx.load_composer(&net)?;
        composer.generate(&Tape::inference(), &net, &[args.class])?.pop().map(|s| s.detach())
    };
    let mut rng = SeededRng::new(ctx.cfg.seed).fork_indexed("bench.sample", args.class as u64);
    let out = net.sample_loop(args.class, args.count, steps, updates.as_ref(), None, &mut rng, None)?;
    let dir = ctx.path("images");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let side = net.config.image_size;
    let mut files = Vec::new();
    for (i, img) in out.images.data().chunks(side * side).enumerate() {
        let name = format!("class{}_seed{}_{i:03}.pgm", args.class, ctx.cfg.seed);
        write_pgm(&dir.join(&name), img, side)?;
        files.push(format!("images/{name}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ctx.metrics.record("generate", None, Some(steps), "secs", secs)?;
    ctx.report(
        "generate.json",
        GenerateResult {
            class: args.class,
            count: args.count,
            steps,
            strategy: if args.use_static { "static" } else { "composer" },
            files,
            secs,
        },
    )
}

#[derive(Debug, Serialize)]
struct EvalRow {
    strategy: String,
    val_loss: f64,
    toy_frechet: f64,
}

fn generate_all(
    net: &Denoiser<f32>,
    sets: Option<&[UpdateSet<f32>]>,
    cfg: &RunConfig,
) -> Result<Tensor<f32>, CliError> {
    let classes = net.config.classes;
    let per = cfg.bench.samples_per_class;
    let mut images = Vec::new();
    for class in 0..classes {
        let mut rng = SeededRng::new(cfg.seed).fork_indexed("bench.sample", class as u64);
        let out = net.sample_loop(class, per, cfg.bench.steps, sets.map(|s| &s[class]), None, &mut rng, None)?;
        images.extend_from_slice(out.images.data());
    }
    let side = net.config.image_size;
    Ok(Tensor::from_vec(&[classes * per, side, side], images)?)
}

pub fn evaluate(ctx: &mut Context) -> Result<(), CliError> {
    let net = ctx.load_backbone()?;
    let (_, val) = ctx.datasets()?;
    let vb = validation_batches(&val, &net, ctx.cfg.seed)?;
    let mut rows = vec![EvalRow {
        strategy: "static".into(),
        val_loss: evaluate_val_loss(&net, None, &vb)?,
        toy_frechet: toy_frechet(&val.images, &generate_all(&net, None, &ctx.cfg)?)?,
    }];
    if ctx.path(COMPOSER_FILE).is_file() {
        let composer = ctx.load_composer(&net)?;
        let classes: Vec<usize> = (0..net.config.classes).collect();
        let sets: Vec<_> = composer
            .generate(&Tape::inference(), &net, &classes)?
            .into_iter()
            .map(|s| s.detach())
            .collect();
        rows.push(EvalRow {
            strategy: "composer".into(),
            val_loss: evaluate_val_loss(&net, Some(&composer), &vb)?,
            toy_frechet: toy_frechet(&val.images, &generate_all(&net, Some(&sets), &ctx.cfg)?)?,
        });
    }
    for r in &rows {
        ctx.metrics.record(&format!("evaluate.{}", r.strategy), None, None, "val_loss", r.val_loss)?;
        ctx.metrics.record(&format!("evaluate.{}", r.strategy), None, None, "toy_frechet", r.toy_frechet)?;
    }
    ctx.csv("evaluate.csv", &rows)?;
    ctx.report("evaluate.json", &rows)
}

#[derive(Debug, Serialize)]
struct RunRow<'a> {
    strategy: &'a str,
    seed: u64,
    frechet: f64,
    val_loss: f64,
    adapt_secs: f64,
    sample_secs: f64,
    total_secs: f64,
    peak_bytes: usize,
    merges: usize,
    inference_path_applications: usize,
    backbone_passes: usize,
    error: &'a str,
}

pub fn bench(ctx: &mut Context) -> Result<(), CliError> {
    let net = ctx.load_backbone()?;
    let composer = ctx.load_composer(&net)?;
    let (train, val) = ctx.datasets()?;
    let vb = validation_batches(&val, &net, ctx.cfg.seed)?;
    let env = BenchEnv {
        net: &net,
        composer: Some(&composer),
        train: &train,
        real: &val,
        val_batches: &vb,
    };
    let strategies = [Strategy::Static, Strategy::Ttt(ctx.cfg.ttt_config()?), Strategy::Composer];
    let report = run_comparison(&env, &strategies, &ctx.cfg.comparison_config());
    let runs: Vec<RunRow> = report
        .runs
        .iter()
        .map(|r| RunRow {
            strategy: &r.strategy,
            seed: r.seed,
            frechet: r.frechet,
            val_loss: r.val_loss,
            adapt_secs: r.adapt_secs,
            sample_secs: r.sample_secs,
            total_secs: r.total_secs,
            peak_bytes: r.peak_bytes,
            merges: r.merges,
            inference_path_applications: r.inference_path_applications,
            backbone_passes: r.backbone_passes,
            error: r.error.as_deref().unwrap_or(""),
        })
        .collect();
    for s in &report.summary {
        let phase = format!("bench.{}", s.strategy);
        ctx.metrics.record(&phase, None, None, "frechet", s.frechet)?;
        ctx.metrics.record(&phase, None, None, "val_loss", s.val_loss)?;
        ctx.metrics.record(&phase, None, None, "total_secs", s.total_secs)?;
        ctx.metrics.record(&phase, None, None, "peak_bytes", s.peak_bytes)?;
    }
    ctx.csv("bench_runs.csv", &runs)?;
    ctx.csv("bench_summary.csv", &report.summary)?;
    ctx.report("bench.json", &report)?;
    match report.summary.iter().find(|s| s.failed) {
        Some(s) => Err(CliError::Runtime(format!(
            "strategy `{}` failed on every seed; see bench_runs.csv",
            s.strategy
        ))),
        None => Ok(()),
    }
}

pub fn ablate(ctx: &mut Context, axis: &str, grid: Option<&str>) -> Result<(), CliError> {
    let axis = AblationAxis::parse(axis)?;
    let grid: Vec<String> = match grid {
        Some(g) => g.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => default_grid(axis),
    };
    let net = ctx.load_backbone()?;
    let (train, val) = ctx.datasets()?;
    let base = AblationBase {
        net: &net,
        train: &train,
        val: &val,
        composer: ctx.cfg.composer_config(false, None)?,
        train_cfg: ctx.cfg.train_config()?,
        steps: ctx.cfg.bench.steps,
        samples_per_class: ctx.cfg.bench.samples_per_class,
        seed: ctx.cfg.seed,
    };
    let rows = run_ablation(axis, &grid, &base, |r| info!("{}={}: val {:.4} frechet {:.4}", r.axis, r.value, r.val_loss, r.toy_frechet))?;
    for (i, r) in rows.iter().enumerate() {
        let phase = format!("ablate.{}={}", r.axis, r.value);
        ctx.metrics.record(&phase, None, Some(i), "val_loss", r.val_loss)?;
        ctx.metrics.record(&phase, None, Some(i), "toy_frechet", r.toy_frechet)?;
    }
    let name = format!("ablation_{}", axis.name());
    ctx.csv(&format!("{name}.csv"), &rows)?;
    ctx.report(&format!("{name}.json"), &rows)
}

#[derive(Debug, Serialize)]
struct QuantResult {
    w_bits: u32,
    a_bits: u32,
    baseline_kd: f64,
    initial_kd: f64,
    final_kd: f64,
    relative_gain: f64,
    frechet_full_precision: f64,
    frechet_baseline: f64,
    frechet_composer: f64,
}

fn quant_images(qb: &QuantizedBackbone<f32>, sets: Option<&[UpdateSet<f32>]>, cfg: &RunConfig) -> Result<Tensor<f32>, CliError> {
    let net = &qb.net;
    let classes = net.config.classes;
    let per = cfg.bench.samples_per_class;
    let mut images = Vec::new();
    for class in 0..classes {
        let mut rng = SeededRng::new(cfg.seed).fork_indexed("bench.sample", class as u64);
        let out = net.sample_loop(class, per, cfg.bench.steps, sets.map(|s| &s[class]), qb.act.as_ref(), &mut rng, None)?;
        images.extend_from_slice(out.images.data());
    }
    let side = net.config.image_size;
    Ok(Tensor::from_vec(&[classes * per, side, side], images)?)
}

/// Quantizes the backbone at `quant.w_bits`/`quant.a_bits` (the command
/// implies `quant.enabled`) and distils it back towards full precision
/// through a γ-mode composer.
pub fn quant_train(ctx: &mut Context) -> Result<(), CliError> {
    let net = ctx.load_backbone()?;
    let (train, val) = ctx.datasets()?;
    let mut qcfg = ctx.cfg.quant_config();
    qcfg.enabled = true;
    let mut qb = quantize_backbone(&net, &qcfg)?;
    if qcfg.a_bits < 32 {
        let batches = calibration_batches(&train, &net, ctx.cfg.seed, 64)?;
        let act = calibrate_activations(&qb, &batches, qcfg.a_bits)?;
        qb = qb.with_activations(act);
    }
    let vb = validation_batches(&val, &net, ctx.cfg.seed)?;
    let ccfg = ctx.cfg.composer_config(true, Some(qcfg.w_bits).filter(|&b| b < 32))?;
    let mut composer = Composer::<f32>::new(ccfg, &net.config, &SeededRng::new(ctx.cfg.seed))?;
    let index = similarity_index(&ctx.cfg, &train);
    let mut stats = Vec::new();
    let report = train_quant_composer(&net, &qb, &mut composer, &train, &vb, index.as_ref(), &ctx.cfg.train_config()?, |s| {
        stats.push(s.clone())
    })?;
    let phase = format!("quant-train.w{}a{}", qcfg.w_bits, qcfg.a_bits);
    for s in &stats {
        ctx.metrics.record(&phase, Some(s.epoch), None, "kd_loss", s.val_loss)?;
    }
    let classes: Vec<usize> = (0..net.config.classes).collect();
    let sets: Vec<_> = composer
        .generate(&Tape::inference(), &qb.net, &classes)?
        .into_iter()
        .map(|s| s.detach())
        .collect();
    let result = QuantResult {
        w_bits: qcfg.w_bits,
        a_bits: qcfg.a_bits,
        baseline_kd: report.baseline_kd,
        initial_kd: report.initial_kd,
        final_kd: report.final_kd(),
        relative_gain: report.relative_gain(),
        frechet_full_precision: toy_frechet(&val.images, &generate_all(&net, None, &ctx.cfg)?)?,
        frechet_baseline: toy_frechet(&val.images, &quant_images(&qb, None, &ctx.cfg)?)?,
        frechet_composer: toy_frechet(&val.images, &quant_images(&qb, Some(&sets), &ctx.cfg)?)?,
    };
    ctx.metrics.record(&phase, None, None, "relative_gain", result.relative_gain)?;
    ctx.metrics.record(&phase, None, None, "frechet_composer", result.frechet_composer)?;
    save_module(&composer, &ctx.path(&format!("quant_composer_w{}.ckpt", qcfg.w_bits)))?;
    ctx.report(&format!("quant_w{}a{}.json", qcfg.w_bits, qcfg.a_bits), result)
}

#[derive(Debug, Serialize)]
struct TttResult {
    class: usize,
    losses: Vec<f64>,
    backbone_passes: usize,
    secs: f64,
}

pub fn ttt(ctx: &mut Context, class: usize) -> Result<(), CliError> {
    let net = ctx.load_backbone()?;
    if class >= net.config.classes {
        return Err(CliError::Usage(format!("--class {class} outside [0, {})", net.config.classes)));
    }
    let (train, _) = ctx.datasets()?;
    let mut rng = SeededRng::new(ctx.cfg.seed).fork_indexed("bench.ttt", class as u64);
    let start = Instant::now();
    let out = ttt_adapt(&net, &train, class, &ctx.cfg.ttt_config()?, &mut rng)?;
    let secs = start.elapsed().as_secs_f64();
    for (i, l) in out.losses.iter().enumerate() {
        ctx.metrics.record("ttt", None, Some(i + 1), "loss", *l)?;
    }
    let mut ck = Checkpoint::default();
    for (target, u) in &out.updates.entries {
        ck.tensors.push(NamedTensor::from_tensor(format!("{target}.a"), u.a.value()));
        ck.tensors.push(NamedTensor::from_tensor(format!("{target}.b"), u.b.value()));
    }
    ck.save(&ctx.path(&format!("ttt_class{class}.ckpt")))?;
    ctx.report(
        &format!("ttt_class{class}.json"),
        TttResult {
            class,
            losses: out.losses,
            backbone_passes: out.backbone_passes,
            secs,
        },
    )
}

#[derive(Debug, Serialize)]
struct LabelRow {
    split: &'static str,
    index: usize,
    label: usize,
    file: String,
}

/// Writes both splits as PGM files plus a `labels.csv` index.
pub fn export_data(ctx: &mut Context, limit: Option<usize>) -> Result<(), CliError> {
    let (train, val) = ctx.datasets()?;
    let side = ctx.cfg.backbone.image_size;
    let mut rows = Vec::new();
    let mut counts = BTreeMap::new();
    for (split, ds) in [("train", &train), ("val", &val)] {
        let dir = ctx.path(&format!("data/{split}"));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let n = limit.map_or(ds.len(), |l| l.min(ds.len()));
        for i in 0..n {
            let file = format!("data/{split}/{i:05}_c{}.pgm", ds.labels[i]);
            write_pgm(&ctx.path(&file), ds.image(i), side)?;
            rows.push(LabelRow {
                split,
                index: i,
                label: ds.labels[i],
                file,
            });
        }
        counts.insert(split, n);
    }
    ctx.csv("labels.csv", &rows)?;
    ctx.report("export_data.json", counts)
}
