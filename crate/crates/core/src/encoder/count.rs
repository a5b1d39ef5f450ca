use std::fmt;

use super::{ModelConfig, Pooling};
use crate::attention::count_attention_params;
use crate::error::Result;

/// Closed-form parameter tally, split by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    /// Patch projection matrix and its bias.
    pub patch_embedding: usize,
    pub positional: usize,
    pub class_token: usize,
    /// Attention matrices summed over all encoders.
    pub attention: usize,
    /// MLP weights and biases summed over all encoders.
    pub mlp: usize,
    /// Every layer-norm gain and shift, including the head norm.
    pub layer_norms: usize,
    /// Classifier weights and bias.
    pub classifier: usize,
    pub total: usize,
}

/// Per-encoder attention + MLP parameters, the part the reductions act on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CoreCount {
    pub attention: usize,
    /// `2hN²`.
    pub mlp_weights: usize,
    /// `hN + N`.
    pub mlp_biases: usize,
}

impl CoreCount {
    /// Matrix entries only (attention plus MLP weights).
    pub fn matrices(&self) -> usize {
        self.attention + self.mlp_weights
    }

    pub fn total(&self) -> usize {
        self.attention + self.mlp_weights + self.mlp_biases
    }

    pub fn mlp(&self) -> usize {
        self.mlp_weights + self.mlp_biases
    }
}

/// Attention and MLP parameter counts of one encoder layer.
pub fn encoder_core(config: &ModelConfig) -> Result<CoreCount> {
    config.validate()?;
    let n = config.width;
    let h = config.mlp_multiple;
    let (mlp_weights, mlp_biases) = if config.mlp_enabled {
        (2 * h * n * n, h * n + n)
    } else {
        (0, 0)
    };
    Ok(CoreCount {
        attention: count_attention_params(&config.attention())?,
        mlp_weights,
        mlp_biases,
    })
}

/// Parameter count of the whole classifier, without building it.
pub fn count_params(config: &ModelConfig) -> Result<ParamCount> {
    let core = encoder_core(config)?;
    let n = config.width;
    let s = config.encoders;
    let norms_per_encoder = 1 + usize::from(config.mlp_enabled);
    let mut c = ParamCount {
        patch_embedding: config.patch_dim() * n + n,
        positional: config.seq_len() * n,
        class_token: if config.pooling == Pooling::ClassToken { n } else { 0 },
        attention: s * core.attention,
        mlp: s * core.mlp(),
        layer_norms: 2 * n * (s * norms_per_encoder + 1),
        classifier: n * config.classes + config.classes,
        total: 0,
    };
    c.total = c.patch_embedding
        + c.positional
        + c.class_token
        + c.attention
        + c.mlp
        + c.layer_norms
        + c.classifier;
    Ok(c)
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("patch_embedding", self.patch_embedding),
            ("positional", self.positional),
            ("class_token", self.class_token),
            ("attention", self.attention),
            ("mlp", self.mlp),
            ("layer_norms", self.layer_norms),
            ("classifier", self.classifier),
            ("total", self.total),
        ];
        for (name, v) in rows {
            writeln!(f, "{name:<16} {v:>10}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{QkMode, VoMode};

    #[test]
    fn mlp_block_formula() {
        let c = ModelConfig::mnist();
        let core = encoder_core(&c).unwrap();
        // 2·4·64² + 4·64 + 64
        assert_eq!(core.mlp(), 33_088);
    }

    #[test]
    fn attention_variant_counts() {
        let n = 64;
        let base = ModelConfig::mnist();
        assert_eq!(encoder_core(&base).unwrap().attention, 4 * n * n);
        let collapsed = ModelConfig {
            qk_mode: QkMode::Collapsed,
            vo_mode: VoMode::Collapsed,
            ..base.clone()
        };
        assert_eq!(encoder_core(&collapsed).unwrap().attention, 2 * n * n);
        let chol = ModelConfig {
            qk_mode: QkMode::Cholesky,
            vo_mode: VoMode::Identity,
            ..base
        };
        assert_eq!(encoder_core(&chol).unwrap().attention, 2_080);
    }

    #[test]
    fn invalid_combination_rejected() {
        let c = ModelConfig {
            heads: 4,
            qk_mode: QkMode::Collapsed,
            ..ModelConfig::mnist()
        };
        assert!(count_params(&c).is_err());
    }
}
