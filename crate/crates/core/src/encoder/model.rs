use super::{LayerNormParams, MlpParams, ModelConfig, ModelParams, Pooling, LN_EPS};
use crate::attention::{self, AttentionConfig, AttentionParams, AttentionTrace};
use crate::error::{Error, Result};
use crate::tensor::{gelu, gelu_grad, layer_norm, layer_norm_backward, matmul, matmul_nt, matmul_tn, Real, Tensor};

/// Cuts an `H×W×C` image into non-overlapping `p×p` patches.
///
/// Rows follow a raster scan of the patch grid; inside a patch, pixels are
/// in raster order with channels innermost.
pub fn patchify<T: Real>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::shape("patchify", shape, &[0, 0, 0]));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("patch {p} does not divide image {h}×{w}")));
    }
    let (gh, gw) = (h / p, w / p);
    let dim = p * p * c;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * dim);
    for py in 0..gh {
        for px in 0..gw {
            for r in 0..p {
                let start = ((py * p + r) * w + px * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, dim], out)
}

struct MlpTrace<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

fn mlp_forward_traced<T: Real>(
    z: &Tensor<T>,
    w1: &Tensor<T>,
    b1: &Tensor<T>,
    w2: &Tensor<T>,
    b2: &Tensor<T>,
) -> Result<(Tensor<T>, MlpTrace<T>)> {
    let mut pre = matmul(z, w1)?;
    pre.add_row_bias(b1)?;
    let act = gelu(&pre)?;
    let mut y = matmul(&act, w2)?;
    y.add_row_bias(b2)?;
    Ok((
        y,
        MlpTrace {
            input: z.clone(),
            pre,
            act,
        },
    ))
}

/// `y = gelu(z·W¹ + b¹)·W² + b²`, applied row by row.
pub fn mlp_forward<T: Real>(
    z: &Tensor<T>,
    w1: &Tensor<T>,
    b1: &Tensor<T>,
    w2: &Tensor<T>,
    b2: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(mlp_forward_traced(z, w1, b1, w2, b2)?.0)
}

struct MlpGrads<T> {
    dz: Tensor<T>,
    w1: Tensor<T>,
    b1: Tensor<T>,
    w2: Tensor<T>,
    b2: Tensor<T>,
}

fn mlp_backward_traced<T: Real>(
    trace: &MlpTrace<T>,
    w1: &Tensor<T>,
    w2: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<MlpGrads<T>> {
    let dw2 = matmul_tn(&trace.act, dy)?;
    let db2 = dy.sum_rows();
    let dact = matmul_nt(dy, w2)?;
    let slope = gelu_grad(&trace.pre)?;
    let mut dpre = dact;
    for (g, &s) in dpre.data_mut().iter_mut().zip(slope.data()) {
        *g *= s;
    }
    Ok(MlpGrads {
        dz: matmul_nt(&dpre, w1)?,
        w1: matmul_tn(&trace.input, &dpre)?,
        b1: dpre.sum_rows(),
        w2: dw2,
        b2: db2,
    })
}

/// Reverse pass of [`mlp_forward`]: `(dz, dW¹, db¹, dW², db²)`.
#[allow(clippy::type_complexity)]
pub fn mlp_backward<T: Real>(
    z: &Tensor<T>,
    w1: &Tensor<T>,
    b1: &Tensor<T>,
    w2: &Tensor<T>,
    b2: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (_, trace) = mlp_forward_traced(z, w1, b1, w2, b2)?;
    let g = mlp_backward_traced(&trace, w1, w2, dy)?;
    Ok((g.dz, g.w1, g.b1, g.w2, g.b2))
}

fn ln<T: Real>(x: &Tensor<T>, p: &LayerNormParams<T>) -> Result<Tensor<T>> {
    layer_norm(x, &p.gamma, &p.beta, T::lit(LN_EPS))
}

fn ln_back<T: Real>(
    x: &Tensor<T>,
    p: &LayerNormParams<T>,
    dy: &Tensor<T>,
    grad: &mut LayerNormParams<T>,
) -> Result<Tensor<T>> {
    let (dx, dg, db) = layer_norm_backward(x, &p.gamma, T::lit(LN_EPS), dy)?;
    grad.gamma.add_assign(&dg)?;
    grad.beta.add_assign(&db)?;
    Ok(dx)
}

enum EncoderTrace<T> {
    /// `u = x + Attn(LN₁(x))`, `out = u + MLP(LN₂(u))`.
    PreNorm {
        x: Tensor<T>,
        attn: AttentionTrace<T>,
        u: Tensor<T>,
        mlp: Option<MlpTrace<T>>,
    },
    /// `u = LN₁(x + Attn(x))`, `out = LN₂(u + MLP(u))`.
    PostNorm {
        attn: AttentionTrace<T>,
        r1: Tensor<T>,
        mlp: Option<(MlpTrace<T>, Tensor<T>)>,
    },
}

fn encoder_forward<T: Real>(
    x: &Tensor<T>,
    p: &super::EncoderParams<T>,
    att: &AttentionConfig,
    pre_norm: bool,
) -> Result<(Tensor<T>, EncoderTrace<T>)> {
    if pre_norm {
        let n1 = ln(x, &p.attn_norm)?;
        let (a, attn) = attention::forward_traced(&n1, &p.attention, att)?;
        let u = x.add(&a)?;
        match &p.mlp {
            Some(m) => {
                let n2 = ln(&u, &m.norm)?;
                let (y, mt) = mlp_forward_traced(&n2, &m.w1, &m.b1, &m.w2, &m.b2)?;
                let out = u.add(&y)?;
                Ok((
                    out,
                    EncoderTrace::PreNorm {
                        x: x.clone(),
                        attn,
                        u,
                        mlp: Some(mt),
                    },
                ))
            }
            None => Ok((
                u.clone(),
                EncoderTrace::PreNorm {
                    x: x.clone(),
                    attn,
                    u,
                    mlp: None,
                },
            )),
        }
    } else {
        let (a, attn) = attention::forward_traced(x, &p.attention, att)?;
        let r1 = x.add(&a)?;
        let u = ln(&r1, &p.attn_norm)?;
        match &p.mlp {
            Some(m) => {
                let (y, mt) = mlp_forward_traced(&u, &m.w1, &m.b1, &m.w2, &m.b2)?;
                let r2 = u.add(&y)?;
                let out = ln(&r2, &m.norm)?;
                Ok((
                    out,
                    EncoderTrace::PostNorm {
                        attn,
                        r1,
                        mlp: Some((mt, r2)),
                    },
                ))
            }
            None => Ok((u, EncoderTrace::PostNorm { attn, r1, mlp: None })),
        }
    }
}

fn add_attention_grads<T: Real>(dst: &mut AttentionParams<T>, src: &AttentionParams<T>) -> Result<()> {
    let s: Vec<&Tensor<T>> = src.named_tensors().into_iter().map(|(_, t)| t).collect();
    for (d, s) in dst.tensors_mut().into_iter().zip(s) {
        d.add_assign(s)?;
    }
    Ok(())
}

fn add_mlp_grads<T: Real>(dst: &mut MlpParams<T>, g: &MlpGrads<T>) -> Result<()> {
    dst.w1.add_assign(&g.w1)?;
    dst.b1.add_assign(&g.b1)?;
    dst.w2.add_assign(&g.w2)?;
    dst.b2.add_assign(&g.b2)
}

fn encoder_backward<T: Real>(
    trace: &EncoderTrace<T>,
    p: &super::EncoderParams<T>,
    att: &AttentionConfig,
    dout: Tensor<T>,
    grad: &mut super::EncoderParams<T>,
) -> Result<Tensor<T>> {
    match trace {
        EncoderTrace::PreNorm { x, attn, u, mlp } => {
            let mut du = dout;
            if let (Some(mt), Some(m), Some(gm)) = (mlp, &p.mlp, &mut grad.mlp) {
                let g = mlp_backward_traced(mt, &m.w1, &m.w2, &du)?;
                add_mlp_grads(gm, &g)?;
                let d = ln_back(u, &m.norm, &g.dz, &mut gm.norm)?;
                du.add_assign(&d)?;
            }
            let (dn1, ga) = attention::backward_traced(attn, &p.attention, att, &du)?;
            add_attention_grads(&mut grad.attention, &ga)?;
            let mut dx = du;
            dx.add_assign(&ln_back(x, &p.attn_norm, &dn1, &mut grad.attn_norm)?)?;
            Ok(dx)
        }
        EncoderTrace::PostNorm { attn, r1, mlp } => {
            let du = match (mlp, &p.mlp, &mut grad.mlp) {
                (Some((mt, r2)), Some(m), Some(gm)) => {
                    let mut dr2 = ln_back(r2, &m.norm, &dout, &mut gm.norm)?;
                    let g = mlp_backward_traced(mt, &m.w1, &m.w2, &dr2)?;
                    add_mlp_grads(gm, &g)?;
                    dr2.add_assign(&g.dz)?;
                    dr2
                }
                _ => dout,
            };
            let dr1 = ln_back(r1, &p.attn_norm, &du, &mut grad.attn_norm)?;
            let (dxa, ga) = attention::backward_traced(attn, &p.attention, att, &dr1)?;
            add_attention_grads(&mut grad.attention, &ga)?;
            let mut dx = dr1;
            dx.add_assign(&dxa)?;
            Ok(dx)
        }
    }
}

struct ImageTrace<T> {
    tokens: Tensor<T>,
    seq_len: usize,
    encoders: Vec<EncoderTrace<T>>,
    pooled: Tensor<T>,
    head_in: Tensor<T>,
}

/// Everything [`model_backward`] needs from a forward pass over a batch.
pub struct ModelTrace<T = f64> {
    images: Vec<ImageTrace<T>>,
}

fn check_image<T: Real>(img: &Tensor<T>, config: &ModelConfig) -> Result<()> {
    let want = [config.image_height, config.image_width, config.channels];
    if img.shape() != want {
        return Err(Error::shape("model input", img.shape(), &want));
    }
    Ok(())
}

fn image_forward<T: Real>(
    img: &Tensor<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
    att: &AttentionConfig,
) -> Result<(Tensor<T>, ImageTrace<T>)> {
    check_image(img, config)?;
    let tokens = patchify(img, config.patch)?;
    let mut embedded = matmul(&tokens, &params.patch_embed)?;
    embedded.add_row_bias(&params.patch_bias)?;
    let mut x = match &params.class_token {
        Some(cls) => {
            let n = config.width;
            let mut data = Vec::with_capacity((embedded.rows() + 1) * n);
            data.extend_from_slice(cls.data());
            data.extend_from_slice(embedded.data());
            Tensor::new(&[embedded.rows() + 1, n], data)?
        }
        None => embedded,
    };
    x.add_assign(&params.positional)?;
    let seq_len = x.rows();

    let mut traces = Vec::with_capacity(params.encoders.len());
    for enc in &params.encoders {
        let (out, tr) = encoder_forward(&x, enc, att, config.pre_norm)?;
        traces.push(tr);
        x = out;
    }

    let pooled = match config.pooling {
        Pooling::Mean => {
            let inv = T::one() / T::lit(seq_len as f64);
            x.sum_rows().scale(inv).reshape(&[1, config.width])?
        }
        Pooling::ClassToken => Tensor::new(&[1, config.width], x.row(0).to_vec())?,
    };
    let head_in = ln(&pooled, &params.head_norm)?;
    let mut logits = matmul(&head_in, &params.classifier)?;
    logits.add_row_bias(&params.classifier_bias)?;
    Ok((
        logits,
        ImageTrace {
            tokens,
            seq_len,
            encoders: traces,
            pooled,
            head_in,
        },
    ))
}

/// Forward pass that also returns the trace for [`model_backward_traced`].
pub fn model_forward_traced<T: Real>(
    images: &[Tensor<T>],
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<(Tensor<T>, ModelTrace<T>)> {
    params.check(config)?;
    if images.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let att = config.attention();
    let m = config.classes;
    let mut logits = Vec::with_capacity(images.len() * m);
    let mut traces = Vec::with_capacity(images.len());
    for img in images {
        let (l, t) = image_forward(img, params, config, &att)?;
        logits.extend_from_slice(l.data());
        traces.push(t);
    }
    Ok((
        Tensor::new(&[images.len(), m], logits)?.ensure_finite("model_forward")?,
        ModelTrace { images: traces },
    ))
}

/// Class logits `[B × M]` for a batch of `H×W×C` images.
pub fn model_forward<T: Real>(
    images: &[Tensor<T>],
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Tensor<T>> {
    Ok(model_forward_traced(images, params, config)?.0)
}

/// Gradient of `Σ_b ⟨logits_b, dlogits_b⟩` with respect to every parameter.
pub fn model_backward_traced<T: Real>(
    trace: &ModelTrace<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
    dlogits: &Tensor<T>,
) -> Result<ModelParams<T>> {
    let b = trace.images.len();
    if dlogits.shape() != [b, config.classes] {
        return Err(Error::shape("model_backward", dlogits.shape(), &[b, config.classes]));
    }
    let att = config.attention();
    let n = config.width;
    let mut grad = params.zeros_like();
    for (i, it) in trace.images.iter().enumerate() {
        let dlog = Tensor::new(&[1, config.classes], dlogits.row(i).to_vec())?;
        grad.classifier.add_assign(&matmul_tn(&it.head_in, &dlog)?)?;
        grad.classifier_bias.add_assign(&dlog.sum_rows())?;
        let dhead = matmul_nt(&dlog, &params.classifier)?;
        let dpooled = ln_back(&it.pooled, &params.head_norm, &dhead, &mut grad.head_norm)?;

        let mut dx = Tensor::zeros(&[it.seq_len, n]);
        match config.pooling {
            Pooling::Mean => {
                let inv = T::one() / T::lit(it.seq_len as f64);
                for r in 0..it.seq_len {
                    for (d, &g) in dx.row_mut(r).iter_mut().zip(dpooled.data()) {
                        *d = g * inv;
                    }
                }
            }
            Pooling::ClassToken => dx.row_mut(0).copy_from_slice(dpooled.data()),
        }

        for s in (0..params.encoders.len()).rev() {
            dx = encoder_backward(&it.encoders[s], &params.encoders[s], &att, dx, &mut grad.encoders[s])?;
        }

        grad.positional.add_assign(&dx)?;
        let dembed = match &mut grad.class_token {
            Some(gc) => {
                for (g, &d) in gc.data_mut().iter_mut().zip(dx.row(0)) {
                    *g += d;
                }
                Tensor::new(&[it.seq_len - 1, n], dx.data()[n..].to_vec())?
            }
            None => dx,
        };
        grad.patch_embed.add_assign(&matmul_tn(&it.tokens, &dembed)?)?;
        grad.patch_bias.add_assign(&dembed.sum_rows())?;
    }
    for t in grad.named_tensors() {
        if !t.1.is_finite() {
            return Err(Error::NonFinite { op: "model_backward" });
        }
    }
    Ok(grad)
}

/// Reverse pass of [`model_forward`] for an upstream logit gradient.
pub fn model_backward<T: Real>(
    images: &[Tensor<T>],
    params: &ModelParams<T>,
    config: &ModelConfig,
    dlogits: &Tensor<T>,
) -> Result<ModelParams<T>> {
    let (_, trace) = model_forward_traced(images, params, config)?;
    model_backward_traced(&trace, params, config, dlogits)
}
