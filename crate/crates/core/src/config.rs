//! Model and training configuration.
//!
//! Config files are JSON objects. A file names a `preset` (default `"tiny"`)
//! and overrides any subset of its fields; nested objects (`stage1`, `stage2`)
//! merge field by field.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    Standard,
    TokenBalance,
    VisualQuery,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 3] = [
        FusionVariant::Standard,
        FusionVariant::TokenBalance,
        FusionVariant::VisualQuery,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::Standard => "standard",
            FusionVariant::TokenBalance => "token_balance",
            FusionVariant::VisualQuery => "visual_query",
        }
    }
}

impl std::str::FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(FusionVariant::Standard),
            "token_balance" => Ok(FusionVariant::TokenBalance),
            "visual_query" => Ok(FusionVariant::VisualQuery),
            other => Err(Error::Variant(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    pub seed: u64,

    pub image_resolution: usize,
    pub text_max_len: usize,
    /// Shared embedding width `d` of both encoders and the fusion module.
    pub embed_dim: usize,
    pub vocab_size: usize,

    pub text_embed_factor: usize,
    pub text_hidden: usize,
    pub text_bottleneck: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_ffn_dim: usize,

    pub image_stem_channels: usize,
    /// Output channels of the inverted-bottleneck stages (each halves the resolution).
    pub image_channels: Vec<usize>,
    pub image_expansion: usize,
    pub hybrid_channels: [usize; 3],
    pub hybrid_dims: [usize; 3],
    pub transformer_layers_per_block: [usize; 3],
    pub hybrid_strides: [usize; 3],
    pub image_heads: usize,
    pub image_ffn_mult: usize,

    pub attention_heads_fusion: usize,
    pub gate_hidden: usize,
    pub fusion_ffn_mult: usize,
    pub fusion_variant: FusionVariant,

    pub decoder_layers: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub decoder_ffn_dim: usize,
    /// Fraction of decoder scalars trained in stage 2; `0` keeps the decoder frozen.
    pub unfreeze_ratio: f64,

    pub teacher_dim: usize,

    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,

    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],

    pub stage1: OptimConfig,
    pub stage2: OptimConfig,
}

pub const PRESETS: [&str; 3] = ["tiny", "reference-large", "micro"];

impl ModelConfig {
    /// Desk-scale preset used for training runs and acceptance checks.
    pub fn tiny() -> Self {
        Self {
            preset: "tiny".into(),
            seed: 7,
            image_resolution: 64,
            text_max_len: 24,
            embed_dim: 64,
            vocab_size: 128,
            text_embed_factor: 16,
            text_hidden: 64,
            text_bottleneck: 32,
            text_layers: 2,
            text_heads: 4,
            text_ffn_dim: 64,
            image_stem_channels: 16,
            image_channels: vec![24, 32],
            image_expansion: 4,
            hybrid_channels: [48, 64, 64],
            hybrid_dims: [32, 48, 48],
            transformer_layers_per_block: [2, 4, 3],
            hybrid_strides: [2, 2, 1],
            image_heads: 4,
            image_ffn_mult: 2,
            attention_heads_fusion: 8,
            gate_hidden: 64,
            fusion_ffn_mult: 4,
            fusion_variant: FusionVariant::Standard,
            decoder_layers: 4,
            decoder_dim: 128,
            decoder_heads: 4,
            decoder_ffn_dim: 64,
            unfreeze_ratio: 1.0,
            teacher_dim: 48,
            tau: 0.07,
            alpha: 0.5,
            beta: 0.5,
            lambda1: 1.0,
            lambda2: 1.0,
            norm_mean: [0.481, 0.458, 0.408],
            norm_std: [0.269, 0.261, 0.276],
            stage1: OptimConfig {
                kind: OptimizerKind::Adam,
                lr: 5e-4,
                step_size: 10,
                gamma: 0.5,
                epochs: 20,
                batch_size: 32,
                clip_norm: 1.0,
                weight_decay: 0.0,
            },
            stage2: OptimConfig {
                kind: OptimizerKind::Adamw,
                lr: 1e-3,
                step_size: 20,
                gamma: 0.5,
                epochs: 60,
                batch_size: 8,
                clip_norm: 1.0,
                weight_decay: 0.01,
            },
        }
    }

    /// Full-size preset: parameter and FLOP accounting, and the paper-scale recipe.
    pub fn reference_large() -> Self {
        Self {
            preset: "reference-large".into(),
            seed: 7,
            image_resolution: 224,
            text_max_len: 77,
            embed_dim: 512,
            vocab_size: 30522,
            text_embed_factor: 128,
            text_hidden: 1024,
            text_bottleneck: 128,
            text_layers: 24,
            text_heads: 4,
            text_ffn_dim: 512,
            image_stem_channels: 32,
            image_channels: vec![64, 128],
            image_expansion: 4,
            hybrid_channels: [256, 384, 512],
            hybrid_dims: [224, 288, 352],
            transformer_layers_per_block: [2, 4, 3],
            hybrid_strides: [2, 2, 1],
            image_heads: 4,
            image_ffn_mult: 4,
            attention_heads_fusion: 8,
            gate_hidden: 512,
            fusion_ffn_mult: 4,
            fusion_variant: FusionVariant::Standard,
            decoder_layers: 16,
            decoder_dim: 2048,
            decoder_heads: 32,
            decoder_ffn_dim: 8192,
            unfreeze_ratio: 1.0,
            teacher_dim: 512,
            tau: 0.07,
            alpha: 0.5,
            beta: 0.5,
            lambda1: 1.0,
            lambda2: 1.0,
            norm_mean: [0.481, 0.458, 0.408],
            norm_std: [0.269, 0.261, 0.276],
            stage1: OptimConfig {
                kind: OptimizerKind::Adam,
                lr: 1e-5,
                step_size: 10,
                gamma: 0.5,
                epochs: 64,
                batch_size: 32,
                clip_norm: 1.0,
                weight_decay: 0.0,
            },
            stage2: OptimConfig {
                kind: OptimizerKind::Adamw,
                lr: 1e-4,
                step_size: 5,
                gamma: 0.1,
                epochs: 15,
                batch_size: 32,
                clip_norm: 1.0,
                weight_decay: 0.01,
            },
        }
    }

    /// Very small sizes for finite-difference gradient checks.
    pub fn micro() -> Self {
        Self {
            preset: "micro".into(),
            image_resolution: 48,
            text_max_len: 4,
            embed_dim: 8,
            vocab_size: 12,
            text_embed_factor: 4,
            text_hidden: 8,
            text_bottleneck: 4,
            text_layers: 2,
            text_heads: 2,
            text_ffn_dim: 6,
            image_stem_channels: 4,
            image_channels: vec![4, 6],
            image_expansion: 2,
            hybrid_channels: [6, 8, 8],
            hybrid_dims: [4, 4, 4],
            image_heads: 2,
            image_ffn_mult: 2,
            attention_heads_fusion: 2,
            gate_hidden: 6,
            fusion_ffn_mult: 2,
            decoder_layers: 1,
            decoder_dim: 8,
            decoder_heads: 2,
            decoder_ffn_dim: 12,
            teacher_dim: 6,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "reference-large" => Ok(Self::reference_large()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::invalid(
                "preset",
                format!("unknown preset `{other}`"),
            )),
        }
    }

    /// Parses JSON text: preset defaults merged with the given overrides, then validated.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let user: Value =
            serde_json::from_str(text).map_err(|e| Error::ConfigSyntax(e.to_string()))?;
        let Value::Object(map) = &user else {
            return Err(Error::ConfigSyntax("config must be a JSON object".into()));
        };
        let preset_name = match map.get("preset") {
            None => "tiny",
            Some(Value::String(s)) => s.as_str(),
            Some(_) => return Err(Error::invalid("preset", "must be a string")),
        };
        let mut merged =
            serde_json::to_value(Self::preset(preset_name)?).expect("config serialises");
        merge_json(&mut merged, user);
        let cfg: ModelConfig =
            serde_json::from_value(merged).map_err(|e| Error::ConfigSyntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(field, format!("must be > 0, got {v}")))
            }
        };
        let nonzero = |field: &str, v: usize| -> Result<()> {
            if v > 0 {
                Ok(())
            } else {
                Err(Error::invalid(field, "must be >= 1"))
            }
        };
        let divides = |field: &str, width: usize, heads: usize| -> Result<()> {
            if heads > 0 && width % heads == 0 {
                Ok(())
            } else {
                Err(Error::invalid(
                    field,
                    format!("{width} is not divisible by {heads} attention heads"),
                ))
            }
        };

        positive("tau", self.tau)?;
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)?;
        positive("lambda1", self.lambda1)?;
        positive("lambda2", self.lambda2)?;
        nonzero("attention_heads_fusion", self.attention_heads_fusion)?;
        nonzero("embed_dim", self.embed_dim)?;
        divides("embed_dim", self.embed_dim, self.attention_heads_fusion)?;
        if self.text_max_len < 2 {
            return Err(Error::invalid(
                "text_max_len",
                "must leave room for BOS and EOS",
            ));
        }
        if self.image_resolution < 8 {
            return Err(Error::invalid(
                "image_resolution",
                "must be at least 8 pixels",
            ));
        }
        if self.vocab_size < crate::data::NUM_SPECIALS + 1 {
            return Err(Error::invalid(
                "vocab_size",
                "too small for the special tokens",
            ));
        }
        nonzero("text_layers", self.text_layers)?;
        nonzero("text_hidden", self.text_hidden)?;
        nonzero("text_ffn_dim", self.text_ffn_dim)?;
        if self.text_embed_factor == 0 || self.text_embed_factor >= self.text_hidden {
            return Err(Error::invalid(
                "text_embed_factor",
                "factorised embedding width must be in 1..text_hidden",
            ));
        }
        if self.text_bottleneck == 0 || self.text_bottleneck >= self.text_hidden {
            return Err(Error::invalid(
                "text_bottleneck",
                "must be in 1..text_hidden",
            ));
        }
        divides("text_bottleneck", self.text_bottleneck, self.text_heads)?;

        nonzero("image_stem_channels", self.image_stem_channels)?;
        if self.image_channels.is_empty() || self.image_channels.contains(&0) {
            return Err(Error::invalid(
                "image_channels",
                "needs at least one non-zero stage",
            ));
        }
        nonzero("image_expansion", self.image_expansion)?;
        nonzero("image_ffn_mult", self.image_ffn_mult)?;
        if self.transformer_layers_per_block != [2, 4, 3] {
            return Err(Error::invalid(
                "transformer_layers_per_block",
                "hybrid blocks carry exactly (2, 4, 3) transformer layers",
            ));
        }
        for (i, &dim) in self.hybrid_dims.iter().enumerate() {
            divides("hybrid_dims", dim, self.image_heads)?;
            nonzero("hybrid_channels", self.hybrid_channels[i])?;
        }
        if self.hybrid_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::invalid("hybrid_strides", "strides must be 1 or 2"));
        }

        nonzero("gate_hidden", self.gate_hidden)?;
        nonzero("fusion_ffn_mult", self.fusion_ffn_mult)?;
        nonzero("decoder_layers", self.decoder_layers)?;
        nonzero("decoder_ffn_dim", self.decoder_ffn_dim)?;
        divides("decoder_dim", self.decoder_dim, self.decoder_heads)?;
        if !(0.0..=1.0).contains(&self.unfreeze_ratio) {
            return Err(Error::invalid("unfreeze_ratio", "must lie in [0, 1]"));
        }
        nonzero("teacher_dim", self.teacher_dim)?;
        for (c, &s) in self.norm_std.iter().enumerate() {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::invalid(
                    "norm_std",
                    format!("channel {c} must be > 0"),
                ));
            }
        }
        for (name, o) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            positive(&format!("{name}.lr"), o.lr)?;
            positive(&format!("{name}.clip_norm"), o.clip_norm)?;
            positive(&format!("{name}.gamma"), o.gamma)?;
            nonzero(&format!("{name}.step_size"), o.step_size)?;
            nonzero(&format!("{name}.batch_size"), o.batch_size)?;
            if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
                return Err(Error::invalid(
                    &format!("{name}.weight_decay"),
                    "must be >= 0",
                ));
            }
        }
        Ok(())
    }

    /// Spatial side of the final patch grid under ceiling-division downsampling.
    pub fn patch_grid(&self) -> usize {
        let mut side = ceil_half(self.image_resolution);
        for _ in &self.image_channels {
            side = ceil_half(side);
        }
        for &s in &self.hybrid_strides {
            if s == 2 {
                side = ceil_half(side);
            }
        }
        side
    }

    /// Number of visual tokens `N`.
    pub fn num_patches(&self) -> usize {
        self.patch_grid() * self.patch_grid()
    }

    /// Longest decoder sequence: all visual tokens plus a full text window.
    pub fn decoder_max_len(&self) -> usize {
        self.num_patches() + self.text_max_len
    }
}

pub(crate) fn ceil_half(n: usize) -> usize {
    n.div_ceil(2)
}

fn merge_json(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Reads a JSON config file, or a bare preset name when no such file exists.
pub fn load_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let path = path.as_ref();
    if !path.exists() {
        if let Some(name) = path.to_str().filter(|n| PRESETS.contains(n)) {
            return ModelConfig::preset(name);
        }
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::ConfigSyntax(format!("{} is not valid UTF-8", path.display())))?;
    ModelConfig::from_json_str(&text)
}
