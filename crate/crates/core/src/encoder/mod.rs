//! Image classifier built from a stack of (possibly reduced) transformer
//! encoders: patch embedding, learned positions, `S` encoder layers, pooling,
//! a final layer norm and a linear classifier.

mod checkpoint;
mod count;
mod model;
mod params;

use std::fmt;
use std::str::FromStr;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use count::{count_params, encoder_core, CoreCount, ParamCount};
pub use model::{
    mlp_backward, mlp_forward, model_backward, model_backward_traced, model_forward,
    model_forward_traced, patchify, ModelTrace,
};
pub use params::{EncoderParams, LayerNormParams, MlpParams, ModelParams};

use crate::attention::{AttentionConfig, Mask, QkMode, VoMode};
use crate::config::KeyValues;
use crate::error::{Error, Result};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Pooling {
    #[default]
    Mean,
    ClassToken,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::ClassToken => "cls_token",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(Pooling::Mean),
            "cls_token" | "cls" => Ok(Pooling::ClassToken),
            other => Err(Error::Config(format!("unknown pooling '{other}' (mean, cls_token)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch: usize,
    /// Model width `N`.
    pub width: usize,
    /// Number of encoder layers `S`.
    pub encoders: usize,
    pub heads: usize,
    pub qk_mode: QkMode,
    pub vo_mode: VoMode,
    pub mask: Mask,
    pub scale_logits: bool,
    pub mlp_enabled: bool,
    /// Hidden MLP width is `mlp_multiple · N`.
    pub mlp_multiple: usize,
    pub classes: usize,
    pub pooling: Pooling,
    pub pre_norm: bool,
    pub seed: u64,
}

pub const MODEL_KEYS: [&str; 17] = [
    "model.image_height",
    "model.image_width",
    "model.channels",
    "model.patch",
    "model.width",
    "model.encoders",
    "model.heads",
    "model.qk_mode",
    "model.vo_mode",
    "model.mask",
    "model.scale_logits",
    "model.mlp",
    "model.mlp_multiple",
    "model.classes",
    "model.pooling",
    "model.pre_norm",
    "model.seed",
];

impl ModelConfig {
    /// 28×28 grayscale, 7×7 patches, `N = 64`, six encoders, one head,
    /// MLP on at `4N`.
    pub fn mnist() -> Self {
        ModelConfig {
            image_height: 28,
            image_width: 28,
            channels: 1,
            patch: 7,
            width: 64,
            encoders: 6,
            heads: 1,
            qk_mode: QkMode::Separate,
            vo_mode: VoMode::Separate,
            mask: Mask::Full,
            scale_logits: false,
            mlp_enabled: true,
            mlp_multiple: 4,
            classes: 10,
            pooling: Pooling::Mean,
            pre_norm: true,
            seed: 0,
        }
    }

    /// 32×32 RGB with 8×8 patches; otherwise as [`ModelConfig::mnist`].
    pub fn cifar10() -> Self {
        ModelConfig {
            image_height: 32,
            image_width: 32,
            channels: 3,
            patch: 8,
            ..Self::mnist()
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            width: self.width,
            heads: self.heads,
            qk_mode: self.qk_mode,
            vo_mode: self.vo_mode,
            mask: self.mask,
            scale_logits: self.scale_logits,
        }
    }

    /// Number of image patches.
    pub fn patches(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    /// Sequence length seen by the encoders (patches plus class token).
    pub fn seq_len(&self) -> usize {
        self.patches() + usize::from(self.pooling == Pooling::ClassToken)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("channels", self.channels),
            ("patch", self.patch),
            ("width", self.width),
            ("heads", self.heads),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.image_height.is_multiple_of(self.patch) || !self.image_width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "patch {} does not divide image {}×{}",
                self.patch, self.image_height, self.image_width
            )));
        }
        if self.mlp_enabled && self.mlp_multiple == 0 {
            return Err(Error::Config("mlp_multiple must be positive".into()));
        }
        self.attention().validate()
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let vals: [(&str, String); 17] = [
            ("model.image_height", self.image_height.to_string()),
            ("model.image_width", self.image_width.to_string()),
            ("model.channels", self.channels.to_string()),
            ("model.patch", self.patch.to_string()),
            ("model.width", self.width.to_string()),
            ("model.encoders", self.encoders.to_string()),
            ("model.heads", self.heads.to_string()),
            ("model.qk_mode", self.qk_mode.to_string()),
            ("model.vo_mode", self.vo_mode.to_string()),
            ("model.mask", self.mask.to_string()),
            ("model.scale_logits", self.scale_logits.to_string()),
            ("model.mlp", self.mlp_enabled.to_string()),
            ("model.mlp_multiple", self.mlp_multiple.to_string()),
            ("model.classes", self.classes.to_string()),
            ("model.pooling", self.pooling.to_string()),
            ("model.pre_norm", self.pre_norm.to_string()),
            ("model.seed", self.seed.to_string()),
        ];
        for (k, v) in vals {
            kv.set(k, &v);
        }
        kv
    }

    /// Reads `model.*` keys on top of `base`; missing keys keep base values.
    pub fn from_kv(kv: &KeyValues, base: ModelConfig) -> Result<Self> {
        let mut c = base;
        macro_rules! take {
            ($field:ident, $key:literal) => {
                if let Some(v) = kv.parse_opt($key)? {
                    c.$field = v;
                }
            };
        }
        take!(image_height, "model.image_height");
        take!(image_width, "model.image_width");
        take!(channels, "model.channels");
        take!(patch, "model.patch");
        take!(width, "model.width");
        take!(encoders, "model.encoders");
        take!(heads, "model.heads");
        take!(qk_mode, "model.qk_mode");
        take!(vo_mode, "model.vo_mode");
        take!(mask, "model.mask");
        take!(mlp_multiple, "model.mlp_multiple");
        take!(classes, "model.classes");
        take!(pooling, "model.pooling");
        take!(seed, "model.seed");
        if let Some(b) = kv.get_bool("model.scale_logits")? {
            c.scale_logits = b;
        }
        if let Some(b) = kv.get_bool("model.mlp")? {
            c.mlp_enabled = b;
        }
        if let Some(b) = kv.get_bool("model.pre_norm")? {
            c.pre_norm = b;
        }
        c.validate()?;
        Ok(c)
    }

    /// Short label in the `1H/NoMLP/symmetry` style.
    pub fn variant_label(&self) -> String {
        format!(
            "{}H/{}/{}",
            self.heads,
            if self.mlp_enabled { "MLP" } else { "NoMLP" },
            self.modification()
        )
    }

    /// Human name of the attention modification.
    pub fn modification(&self) -> String {
        match (self.qk_mode, self.vo_mode) {
            (QkMode::Separate, VoMode::Separate) => "unchanged".into(),
            (QkMode::Collapsed, VoMode::Separate) => "Wqk".into(),
            (QkMode::Collapsed, VoMode::Identity) => "Wqk+noWv.Vo".into(),
            (QkMode::Collapsed, VoMode::Collapsed) => "Wqk+Wvo".into(),
            (QkMode::Shared, VoMode::Separate) => "symmetry".into(),
            (QkMode::Cholesky, VoMode::Separate) => "cholesky".into(),
            (qk, vo) => format!("qk={qk},vo={vo}"),
        }
    }
}
