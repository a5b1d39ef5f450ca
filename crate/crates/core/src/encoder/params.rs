use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, Pooling};
use crate::attention::{glorot_uniform, AttentionParams};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T = f64> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> LayerNormParams<T> {
    pub fn new(width: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::full(&[width], T::one()),
            beta: Tensor::zeros(&[width]),
        }
    }
}

/// Single-hidden-layer MLP with its input layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T = f64> {
    pub norm: LayerNormParams<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = f64> {
    pub attn_norm: LayerNormParams<T>,
    pub attention: AttentionParams<T>,
    pub mlp: Option<MlpParams<T>>,
}

/// All learnable weights of the classifier. Gradients share this type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f64> {
    pub patch_embed: Tensor<T>,
    pub patch_bias: Tensor<T>,
    pub positional: Tensor<T>,
    pub class_token: Option<Tensor<T>>,
    pub encoders: Vec<EncoderParams<T>>,
    pub head_norm: LayerNormParams<T>,
    pub classifier: Tensor<T>,
    pub classifier_bias: Tensor<T>,
}

impl<T: Real> ModelParams<T> {
    /// Fresh weights from `config.seed`: Glorot-uniform matrices, zero
    /// biases and class token, unit layer-norm gains.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = config.width;
        let patch_embed = glorot_uniform(&mut rng, config.patch_dim(), n);
        let positional = glorot_uniform(&mut rng, config.seq_len(), n);
        let class_token = (config.pooling == Pooling::ClassToken).then(|| Tensor::zeros(&[n]));
        let att_cfg = config.attention();
        let mut encoders = Vec::with_capacity(config.encoders);
        for _ in 0..config.encoders {
            let attention = AttentionParams::init(&att_cfg, &mut rng)?;
            let mlp = if config.mlp_enabled {
                let hidden = config.mlp_multiple * n;
                Some(MlpParams {
                    norm: LayerNormParams::new(n),
                    w1: glorot_uniform(&mut rng, n, hidden),
                    b1: Tensor::zeros(&[hidden]),
                    w2: glorot_uniform(&mut rng, hidden, n),
                    b2: Tensor::zeros(&[n]),
                })
            } else {
                None
            };
            encoders.push(EncoderParams {
                attn_norm: LayerNormParams::new(n),
                attention,
                mlp,
            });
        }
        Ok(ModelParams {
            patch_embed,
            patch_bias: Tensor::zeros(&[n]),
            positional,
            class_token,
            encoders,
            head_norm: LayerNormParams::new(n),
            classifier: glorot_uniform(&mut rng, n, config.classes),
            classifier_bias: Tensor::zeros(&[config.classes]),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.fill(T::zero());
        }
        out
    }

    /// Every stored tensor, in checkpoint order, with a dotted name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("embed.weight".to_string(), &self.patch_embed),
            ("embed.bias".to_string(), &self.patch_bias),
            ("embed.positional".to_string(), &self.positional),
        ];
        if let Some(c) = &self.class_token {
            out.push(("embed.class_token".into(), c));
        }
        for (s, enc) in self.encoders.iter().enumerate() {
            out.push((format!("encoder.{s}.attn_norm.gamma"), &enc.attn_norm.gamma));
            out.push((format!("encoder.{s}.attn_norm.beta"), &enc.attn_norm.beta));
            for (name, t) in enc.attention.named_tensors() {
                out.push((format!("encoder.{s}.attn.{name}"), t));
            }
            if let Some(m) = &enc.mlp {
                out.push((format!("encoder.{s}.mlp_norm.gamma"), &m.norm.gamma));
                out.push((format!("encoder.{s}.mlp_norm.beta"), &m.norm.beta));
                out.push((format!("encoder.{s}.mlp.w1"), &m.w1));
                out.push((format!("encoder.{s}.mlp.b1"), &m.b1));
                out.push((format!("encoder.{s}.mlp.w2"), &m.w2));
                out.push((format!("encoder.{s}.mlp.b2"), &m.b2));
            }
        }
        out.push(("head.norm.gamma".into(), &self.head_norm.gamma));
        out.push(("head.norm.beta".into(), &self.head_norm.beta));
        out.push(("head.weight".into(), &self.classifier));
        out.push(("head.bias".into(), &self.classifier_bias));
        out
    }

    /// Mutable tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> =
            vec![&mut self.patch_embed, &mut self.patch_bias, &mut self.positional];
        if let Some(c) = &mut self.class_token {
            out.push(c);
        }
        for enc in &mut self.encoders {
            out.push(&mut enc.attn_norm.gamma);
            out.push(&mut enc.attn_norm.beta);
            out.extend(enc.attention.tensors_mut());
            if let Some(m) = &mut enc.mlp {
                out.push(&mut m.norm.gamma);
                out.push(&mut m.norm.beta);
                out.push(&mut m.w1);
                out.push(&mut m.b1);
                out.push(&mut m.w2);
                out.push(&mut m.b2);
            }
        }
        out.push(&mut self.head_norm.gamma);
        out.push(&mut self.head_norm.beta);
        out.push(&mut self.classifier);
        out.push(&mut self.classifier_bias);
        out
    }

    /// Total number of stored scalars.
    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor. Structures must match.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        let src: Vec<&Tensor<T>> = other.named_tensors().into_iter().map(|(_, t)| t).collect();
        let dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(Error::Config("gradient structures differ".into()));
        }
        for (d, s) in dst.into_iter().zip(src) {
            d.add_assign(s)?;
        }
        Ok(())
    }

    /// Structural check against `config`: same tensor names and shapes as
    /// a fresh initialization.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        if self.encoders.len() != config.encoders {
            return Err(Error::Config(format!(
                "params have {} encoders, config {}",
                self.encoders.len(),
                config.encoders
            )));
        }
        let att = config.attention();
        for enc in &self.encoders {
            enc.attention.check(&att)?;
            if enc.mlp.is_some() != config.mlp_enabled {
                return Err(Error::VariantMismatch {
                    expected: format!("mlp={}", config.mlp_enabled),
                    found: format!("mlp={}", enc.mlp.is_some()),
                });
            }
        }
        let n = config.width;
        let expect = [
            (&self.patch_embed, vec![config.patch_dim(), n]),
            (&self.positional, vec![config.seq_len(), n]),
            (&self.classifier, vec![n, config.classes]),
        ];
        for (t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("model params", t.shape(), &shape));
            }
        }
        if self.class_token.is_some() != (config.pooling == Pooling::ClassToken) {
            return Err(Error::VariantMismatch {
                expected: format!("pooling={}", config.pooling),
                found: "class token presence differs".into(),
            });
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let ln = |p: &LayerNormParams<T>| LayerNormParams {
            gamma: p.gamma.cast(),
            beta: p.beta.cast(),
        };
        ModelParams {
            patch_embed: self.patch_embed.cast(),
            patch_bias: self.patch_bias.cast(),
            positional: self.positional.cast(),
            class_token: self.class_token.as_ref().map(Tensor::cast),
            encoders: self
                .encoders
                .iter()
                .map(|e| EncoderParams {
                    attn_norm: ln(&e.attn_norm),
                    attention: cast_attention(&e.attention),
                    mlp: e.mlp.as_ref().map(|m| MlpParams {
                        norm: ln(&m.norm),
                        w1: m.w1.cast(),
                        b1: m.b1.cast(),
                        w2: m.w2.cast(),
                        b2: m.b2.cast(),
                    }),
                })
                .collect(),
            head_norm: ln(&self.head_norm),
            classifier: self.classifier.cast(),
            classifier_bias: self.classifier_bias.cast(),
        }
    }
}

fn cast_attention<T: Real, U: Real>(p: &AttentionParams<T>) -> AttentionParams<U> {
    use crate::attention::{QkParams, VoParams};
    let many = |v: &Vec<Tensor<T>>| v.iter().map(Tensor::cast).collect::<Vec<_>>();
    AttentionParams {
        qk: match &p.qk {
            QkParams::Separate { wq, wk } => QkParams::Separate {
                wq: many(wq),
                wk: many(wk),
            },
            QkParams::Collapsed { wqk } => QkParams::Collapsed { wqk: wqk.cast() },
            QkParams::Shared { wq } => QkParams::Shared { wq: many(wq) },
            QkParams::Cholesky { tri } => QkParams::Cholesky { tri: tri.cast() },
        },
        vo: match &p.vo {
            VoParams::Separate { wv, wo } => VoParams::Separate {
                wv: many(wv),
                wo: many(wo),
            },
            VoParams::Collapsed { wvo } => VoParams::Collapsed { wvo: wvo.cast() },
            VoParams::Identity => VoParams::Identity,
        },
    }
}
