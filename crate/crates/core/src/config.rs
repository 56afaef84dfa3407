//! Flat `key = value` run configuration.
//!
//! Keys are dotted (`model.*`, `train.*`, `synth.*`, `eval.*`), one per
//! line; `#` starts a comment. Every key has a default, unknown keys are
//! rejected, and a key may appear at most once per file.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::mmf::Combine;
use crate::model::{ModelConfig, Variant};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

/// Everything a CLI command needs, with defaults for every key.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

trait Value: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),+) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )+};
}

plain_value!(usize, u64, f32, f64, bool, Variant);

impl Value for Combine {
    fn parse_value(s: &str) -> Option<Self> {
        Combine::from_str(s).ok()
    }
    fn render(&self) -> String {
        self.as_str().to_string()
    }
}

/// `none` or a count.
impl Value for Option<usize> {
    fn parse_value(s: &str) -> Option<Self> {
        if s == "none" {
            Some(None)
        } else {
            s.parse().ok().map(Some)
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "none".to_string(), |v| v.to_string())
    }
}

struct Key {
    name: &'static str,
    doc: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> bool,
}

macro_rules! keys {
    ($($name:literal => $($field:ident).+ : $ty:ty, $doc:literal;)+) => {
        &[$(Key {
            name: $name,
            doc: $doc,
            get: |c| Value::render(&c.$($field).+),
            set: |c, s| match <$ty as Value>::parse_value(s) {
                Some(v) => {
                    c.$($field).+ = v;
                    true
                }
                None => false,
            },
        }),+]
    };
}

static KEYS: &[Key] = keys! {
    "model.input_size" => model.backbone.input_size: usize, "square input side in pixels";
    "model.feature_size" => model.backbone.feature_size: usize, "feature map and heatmap side";
    "model.channels" => model.backbone.channels: usize, "feature channels of both branches";
    "model.unet_depth" => model.backbone.unet_depth: usize, "U-Net pooling levels";
    "model.unet_width" => model.backbone.unet_width: usize, "U-Net channels at full resolution, doubled per level";
    "model.patch_size" => model.backbone.patch_size: usize, "transformer patch side";
    "model.token_dim" => model.backbone.token_dim: usize, "transformer token width";
    "model.transformer_layers" => model.backbone.transformer_layers: usize, "transformer blocks";
    "model.heads" => model.backbone.heads: usize, "attention heads per block";
    "model.mlp_ratio" => model.backbone.mlp_ratio: usize, "transformer MLP expansion";
    "model.mmf_window" => model.mmf_window: usize, "modulation neighbourhood side (odd)";
    "model.combine" => model.combine: Combine, "fusion of the modulated branches: concat or sum";
    "model.gcn_layers" => model.tgcn.layers: usize, "GCN layers over the landmark graph";
    "model.class_hidden" => model.tgcn.class_hidden: usize, "class head hidden width";
    "model.variant" => model.variant: Variant, "full, no-mmf, no-tgcn or concat-baseline";
    "train.lr" => train.lr: f64, "Adam learning rate";
    "train.epochs" => train.epochs: usize, "epoch budget";
    "train.max_steps" => train.max_steps: Option<usize>, "optimizer step cap, or none";
    "train.batch_size" => train.batch_size: usize, "samples per optimizer step";
    "train.lambda" => train.lambda: f64, "weight of the classification loss";
    "train.sigma" => train.sigma: f64, "ground-truth Gaussian sigma in heatmap pixels";
    "train.hflip_prob" => train.hflip_prob: f64, "probability of a horizontal flip";
    "train.seed" => train.seed: u64, "seed of model init, shuffling and augmentation";
    "synth.n" => synth.n: usize, "number of phantoms";
    "synth.balance" => synth.balance: f64, "fraction of abnormal phantoms";
    "synth.spacing" => synth.spacing: f64, "pixel spacing in mm";
    "synth.size" => synth.size: usize, "phantom side in pixels";
    "synth.seed" => synth.seed: u64, "generator seed";
    "synth.groups" => synth.groups: usize, "subject groups, 0 for none";
    "synth.background" => synth.style.background: f32, "background intensity";
    "synth.line" => synth.style.line: f32, "structure line intensity";
    "synth.blob" => synth.style.blob: f32, "landmark blob peak intensity";
    "synth.blob_sigma" => synth.style.blob_sigma: f64, "landmark blob sigma in pixels";
    "synth.speckle" => synth.style.speckle: f64, "multiplicative speckle amplitude";
    "eval.folds" => eval.folds: usize, "cross-validation folds";
    "eval.grouped" => eval.grouped: bool, "keep manifest groups within one fold";
    "eval.seed" => eval.seed: u64, "fold assignment seed";
};

fn lookup(name: &str) -> Result<&'static Key> {
    KEYS.iter()
        .find(|k| k.name == name)
        .ok_or_else(|| Error::Config(format!("unknown config key `{name}`")))
}

impl RunConfig {
    /// Parses a config file body; keys not mentioned keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
            seen.push(key);
            cfg.set(key, value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Sets one key from its text form. Does not validate the whole config.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = lookup(key)?;
        if (k.set)(self, value) {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok((lookup(key)?.get)(self))
    }

    /// Every key name, in file order.
    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|k| k.name)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.eval.folds < 2 {
            return Err(Error::Config("eval.folds must be at least 2".into()));
        }
        Ok(())
    }

    /// One `key = value` line per key; parses back to an equal config.
    pub fn to_text(&self) -> String {
        KEYS.iter().fold(String::new(), |mut out, k| {
            let _ = writeln!(out, "{} = {}", k.name, (k.get)(self));
            out
        })
    }

    /// [`to_text`](Self::to_text) with a comment above every key.
    pub fn annotated(&self) -> String {
        KEYS.iter().fold(String::new(), |mut out, k| {
            let _ = writeln!(out, "# {}\n{} = {}", k.doc, k.name, (k.get)(self));
            out
        })
    }
}
