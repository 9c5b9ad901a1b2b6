//! Run configuration: a TOML file (nested tables or dotted keys, both
//! flatten to the same `section.key` names) plus `key=value` overrides that
//! are applied last. Every key is optional; an empty file is the default run.
//!
//! ```toml
//! seed = 0
//! [dataset]
//! N = 2048
//! C = 10
//! [composer]
//! r = 8
//! targets = "QV"
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use composer_lab::backbone::{DenoiserConfig, TargetKind};
use composer_lab::bench::{ComparisonConfig, TttConfig};
use composer_lab::composer::{AttentionScheme, ComposerConfig, GeneratorArch, TokenInit};
use composer_lab::data::{BatchMode, PretrainConfig, TrainConfig};
use composer_lab::quant::QuantConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Value;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("configuration key `{key}` expects {expected}, got `{got}`")]
    Type { key: String, expected: &'static str, got: String },
    #[error("configuration key `{key}`: {msg}")]
    Constraint { key: String, msg: String },
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "C")]
    pub c: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(rename = "T")]
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposerSection {
    pub r: usize,
    pub d_model: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub heads: usize,
    pub m: usize,
    pub targets: String,
    pub attention: String,
    pub arch: String,
    pub token_init: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub alpha: f64,
    pub pipeline: String,
    /// Backbone pretraining epochs.
    pub pretrain_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSection {
    pub enabled: bool,
    pub w_bits: u32,
    pub a_bits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSection {
    pub steps: usize,
    pub samples_per_class: usize,
    /// Number of seeds, counted up from `seed`.
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub backbone: BackboneSection,
    pub composer: ComposerSection,
    pub train: TrainSection,
    pub quant: QuantSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = DenoiserConfig::default();
        let c = ComposerConfig::default();
        let t = TrainConfig::default();
        let q = QuantConfig::default();
        let cmp = ComparisonConfig::default();
        RunConfig {
            seed: 0,
            dataset: DatasetSection { n: 2048, c: b.classes },
            backbone: BackboneSection {
                image_size: b.image_size,
                patch_size: b.patch_size,
                d: b.d,
                layers: b.layers,
                heads: b.heads,
                t: b.timesteps,
            },
            composer: ComposerSection {
                r: c.r,
                d_model: c.d_model,
                l: c.layers,
                heads: c.heads,
                m: c.m,
                targets: TargetKind::set_name(&c.targets),
                attention: c.attention.name().into(),
                arch: c.arch.name().into(),
                token_init: c.token_init.name().into(),
            },
            train: TrainSection {
                epochs: t.epochs,
                lr: t.lr,
                weight_decay: t.weight_decay,
                batch: t.batch,
                alpha: t.alpha,
                pipeline: t.pipeline.name().into(),
                pretrain_epochs: PretrainConfig::default().epochs,
            },
            quant: QuantSection {
                enabled: q.enabled,
                w_bits: q.w_bits,
                a_bits: q.a_bits,
            },
            bench: BenchSection {
                steps: cmp.steps,
                samples_per_class: cmp.samples_per_class,
                seeds: cmp.seeds.len(),
            },
        }
    }
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "seed",
    "dataset.N",
    "dataset.C",
    "backbone.image_size",
    "backbone.patch_size",
    "backbone.d",
    "backbone.layers",
    "backbone.heads",
    "backbone.T",
    "composer.r",
    "composer.d_model",
    "composer.L",
    "composer.heads",
    "composer.m",
    "composer.targets",
    "composer.attention",
    "composer.arch",
    "composer.token_init",
    "train.epochs",
    "train.lr",
    "train.weight_decay",
    "train.batch",
    "train.alpha",
    "train.pipeline",
    "train.pretrain_epochs",
    "quant.enabled",
    "quant.w_bits",
    "quant.a_bits",
    "bench.steps",
    "bench.samples_per_class",
    "bench.seeds",
];

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn type_err(key: &str, expected: &'static str, v: &Value) -> ConfigError {
    ConfigError::Type {
        key: key.into(),
        expected,
        got: v.to_string(),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_integer()
        .and_then(|i| usize::try_from(i).ok())
        .ok_or_else(|| type_err(key, "a non-negative integer", v))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(type_err(key, "a number", v)),
    }
}

fn as_string(key: &str, v: &Value) -> Result<String> {
    v.as_str().map(str::to_string).ok_or_else(|| type_err(key, "a string", v))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| type_err(key, "true or false", v))
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string (`composer.targets=QKV`).
fn parse_override_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Reads `path` (`None` or `"default"` for the built-in defaults), then
    /// applies `overrides` and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) if p.as_os_str() != "default" => std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
                path: p.display().to_string(),
                source: e,
            })?,
            _ => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut entries = Vec::new();
        flatten("", &table, &mut entries);
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
            entries.push((k.trim().to_string(), parse_override_value(v.trim())));
        }
        let mut cfg = RunConfig::default();
        for (k, v) in &entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "seed" => self.seed = as_usize(key, v)? as u64,
            "dataset.N" => self.dataset.n = as_usize(key, v)?,
            "dataset.C" => self.dataset.c = as_usize(key, v)?,
            "backbone.image_size" => self.backbone.image_size = as_usize(key, v)?,
            "backbone.patch_size" => self.backbone.patch_size = as_usize(key, v)?,
            "backbone.d" => self.backbone.d = as_usize(key, v)?,
            "backbone.layers" => self.backbone.layers = as_usize(key, v)?,
            "backbone.heads" => self.backbone.heads = as_usize(key, v)?,
            "backbone.T" => self.backbone.t = as_usize(key, v)?,
            "composer.r" => self.composer.r = as_usize(key, v)?,
            "composer.d_model" => self.composer.d_model = as_usize(key, v)?,
            "composer.L" => self.composer.l = as_usize(key, v)?,
            "composer.heads" => self.composer.heads = as_usize(key, v)?,
            "composer.m" => self.composer.m = as_usize(key, v)?,
            "composer.targets" => self.composer.targets = as_string(key, v)?,
            "composer.attention" => self.composer.attention = as_string(key, v)?,
            "composer.arch" => self.composer.arch = as_string(key, v)?,
            "composer.token_init" => self.composer.token_init = as_string(key, v)?,
            "train.epochs" => self.train.epochs = as_usize(key, v)?,
            "train.lr" => self.train.lr = as_f64(key, v)?,
            "train.weight_decay" => self.train.weight_decay = as_f64(key, v)?,
            "train.batch" => self.train.batch = as_usize(key, v)?,
            "train.alpha" => self.train.alpha = as_f64(key, v)?,
            "train.pipeline" => self.train.pipeline = as_string(key, v)?,
            "train.pretrain_epochs" => self.train.pretrain_epochs = as_usize(key, v)?,
            "quant.enabled" => self.quant.enabled = as_bool(key, v)?,
            "quant.w_bits" => self.quant.w_bits = as_usize(key, v)? as u32,
            "quant.a_bits" => self.quant.a_bits = as_usize(key, v)? as u32,
            "bench.steps" => self.bench.steps = as_usize(key, v)?,
            "bench.samples_per_class" => self.bench.samples_per_class = as_usize(key, v)?,
            "bench.seeds" => self.bench.seeds = as_usize(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| ConfigError::Constraint { key: key.into(), msg };
        if self.dataset.c < 2 || self.dataset.n < self.dataset.c {
            return Err(bad("dataset.N", format!("need N ≥ C ≥ 2 (N={}, C={})", self.dataset.n, self.dataset.c)));
        }
        self.denoiser().validate().map_err(|e| bad("backbone", e.to_string()))?;
        self.composer_config(false, None)?
            .validate()
            .map_err(|e| bad("composer", e.to_string()))?;
        self.train_config()?.validate().map_err(|e| bad("train", e.to_string()))?;
        if self.train.lr <= 0.0 || !self.train.lr.is_finite() {
            return Err(bad("train.lr", "must be positive".into()));
        }
        self.quant_config().validate().map_err(|e| bad("quant.w_bits", e.to_string()))?;
        if self.bench.steps == 0 || self.bench.steps > self.backbone.t {
            return Err(bad("bench.steps", format!("must lie in [1, backbone.T = {}]", self.backbone.t)));
        }
        if self.bench.samples_per_class == 0 {
            return Err(bad("bench.samples_per_class", "must be positive".into()));
        }
        if self.bench.seeds == 0 {
            return Err(bad("bench.seeds", "must be positive".into()));
        }
        Ok(())
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            image_size: self.backbone.image_size,
            patch_size: self.backbone.patch_size,
            d: self.backbone.d,
            layers: self.backbone.layers,
            heads: self.backbone.heads,
            classes: self.dataset.c,
            timesteps: self.backbone.t,
        }
    }

    fn targets(&self) -> Result<BTreeSet<TargetKind>> {
        TargetKind::parse_set(&self.composer.targets).map_err(|e| ConfigError::Constraint {
            key: "composer.targets".into(),
            msg: e.to_string(),
        })
    }

    /// Composer settings; `gamma`/`weight_bits` select the quantization-aware variant.
    pub fn composer_config(&self, gamma: bool, weight_bits: Option<u32>) -> Result<ComposerConfig> {
        let bad = |key: &str, v: &str| ConfigError::Constraint {
            key: key.into(),
            msg: format!("unrecognized value `{v}`"),
        };
        let c = &self.composer;
        Ok(ComposerConfig {
            r: c.r,
            d_model: c.d_model,
            layers: c.l,
            heads: c.heads,
            m: c.m,
            targets: self.targets()?,
            attention: AttentionScheme::parse(&c.attention).ok_or_else(|| bad("composer.attention", &c.attention))?,
            arch: GeneratorArch::parse(&c.arch).ok_or_else(|| bad("composer.arch", &c.arch))?,
            token_init: TokenInit::parse(&c.token_init).ok_or_else(|| bad("composer.token_init", &c.token_init))?,
            gamma,
            weight_bits,
            a_head_std: None,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            epochs: t.epochs,
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch: t.batch,
            alpha: t.alpha,
            pipeline: BatchMode::parse(&t.pipeline).ok_or_else(|| ConfigError::Constraint {
                key: "train.pipeline".into(),
                msg: format!("unrecognized value `{}`", t.pipeline),
            })?,
            seed: self.seed,
            steps_per_epoch: None,
        })
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.train.pretrain_epochs,
            seed: self.seed,
            ..PretrainConfig::default()
        }
    }

    pub fn quant_config(&self) -> QuantConfig {
        QuantConfig {
            enabled: self.quant.enabled,
            w_bits: self.quant.w_bits,
            a_bits: self.quant.a_bits,
        }
    }

    pub fn comparison_config(&self) -> ComparisonConfig {
        ComparisonConfig {
            steps: self.bench.steps,
            samples_per_class: self.bench.samples_per_class,
            seeds: (0..self.bench.seeds as u64).map(|i| self.seed + i).collect(),
        }
    }

    /// TTT baseline at the composer's rank and targets.
    pub fn ttt_config(&self) -> Result<TttConfig> {
        Ok(TttConfig {
            r: self.composer.r,
            targets: self.targets()?,
            ..TttConfig::default()
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
