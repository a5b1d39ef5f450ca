//! Self-attention and its reduced variants.
//!
//! Per head `h` the logits are `S[i][j] = x_i · M_h · x_jᵀ`, where the
//! similarity matrix `M_h` depends on [`QkMode`]:
//!
//! | mode        | stored                         | `M_h`            |
//! |-------------|--------------------------------|------------------|
//! | `Separate`  | `W_Q`, `W_K` (`N × N/H` each)  | `W_Q · W_Kᵀ`     |
//! | `Collapsed` | `W_QK` (`N × N`), `H = 1`      | `W_QK`           |
//! | `Shared`    | `W_Q` only                     | `W_Q · W_Qᵀ`     |
//! | `Cholesky`  | lower triangle of `T`, `H = 1` | `T · Tᵀ`         |
//!
//! Rows of `S` go through a (optionally causal) softmax to give weights `A_h`,
//! and the output is `z = Σ_h A_h · x · V_h` where `V_h` is `W_V · W_O`,
//! `W_VO`, or the identity depending on [`VoMode`]. No projection carries a
//! bias, and logits are unscaled unless [`AttentionConfig::scale_logits`]
//! is set.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QkMode {
    Separate,
    Collapsed,
    Shared,
    Cholesky,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VoMode {
    Separate,
    Collapsed,
    Identity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Mask {
    #[default]
    Full,
    Causal,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} '{other}' (expected one of: {})",
                        stringify!($ty),
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

text_enum!(QkMode { Separate => "separate", Collapsed => "collapsed", Shared => "shared", Cholesky => "cholesky" });
text_enum!(VoMode { Separate => "separate", Collapsed => "collapsed", Identity => "identity" });
text_enum!(Mask { Full => "full", Causal => "causal" });

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub width: usize,
    pub heads: usize,
    pub qk_mode: QkMode,
    pub vo_mode: VoMode,
    pub mask: Mask,
    /// Multiply logits by `1/√(N/H)`. Off by default.
    pub scale_logits: bool,
}

impl AttentionConfig {
    pub fn new(width: usize, heads: usize, qk_mode: QkMode, vo_mode: VoMode) -> Self {
        AttentionConfig {
            width,
            heads,
            qk_mode,
            vo_mode,
            mask: Mask::Full,
            scale_logits: false,
        }
    }

    pub fn with_mask(mut self, mask: Mask) -> Self {
        self.mask = mask;
        self
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 {
            return Err(Error::Config("width and heads must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide width ({})",
                self.heads, self.width
            )));
        }
        if self.heads > 1 {
            if matches!(self.qk_mode, QkMode::Collapsed | QkMode::Cholesky) {
                return Err(Error::UnsupportedVariant(format!(
                    "qk_mode={} requires a single head (got {})",
                    self.qk_mode, self.heads
                )));
            }
            if self.vo_mode == VoMode::Collapsed {
                return Err(Error::UnsupportedVariant(format!(
                    "vo_mode=collapsed requires a single head (got {})",
                    self.heads
                )));
            }
        }
        Ok(())
    }

    fn logit_scale<T: Real>(&self) -> T {
        if self.scale_logits {
            T::one() / T::lit(self.head_width() as f64).sqrt()
        } else {
            T::one()
        }
    }
}

/// Number of stored values in the lower triangle (diagonal included) of an
/// `n × n` matrix.
pub fn triangle_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Expands a packed row-major lower triangle into a dense `n × n` matrix.
pub fn unpack_lower<T: Real>(packed: &Tensor<T>, n: usize) -> Tensor<T> {
    let mut dense = Tensor::zeros(&[n, n]);
    let src = packed.data();
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            dense.set(i, j, src[k]);
            k += 1;
        }
    }
    dense
}

/// Packs the lower triangle of a dense matrix; entries above the diagonal
/// are dropped.
pub fn pack_lower<T: Real>(dense: &Tensor<T>) -> Tensor<T> {
    let n = dense.rows();
    let mut out = Vec::with_capacity(triangle_len(n));
    for i in 0..n {
        for j in 0..=i {
            out.push(dense.at(i, j));
        }
    }
    Tensor::new(&[out.len()], out).expect("n >= 1")
}

#[derive(Clone, Debug, PartialEq)]
pub enum QkParams<T = f64> {
    Separate { wq: Vec<Tensor<T>>, wk: Vec<Tensor<T>> },
    Collapsed { wqk: Tensor<T> },
    Shared { wq: Vec<Tensor<T>> },
    /// Packed lower triangle of `T`, `N(N+1)/2` values.
    Cholesky { tri: Tensor<T> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum VoParams<T = f64> {
    Separate { wv: Vec<Tensor<T>>, wo: Vec<Tensor<T>> },
    Collapsed { wvo: Tensor<T> },
    Identity,
}

/// Learnable attention weights, shaped by the variant. Gradients use the
/// same type, so slots absent from a variant are absent from its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = f64> {
    pub qk: QkParams<T>,
    pub vo: VoParams<T>,
}

fn glorot<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(&[rows, cols], data).expect("positive extents")
}

pub(crate) fn glorot_uniform<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    glorot(rng, rows, cols)
}

impl<T: Real> AttentionParams<T> {
    /// Glorot-uniform matrices; the Cholesky factor starts at
    /// `I/√N` plus small noise so the initial similarity is near `I/N`.
    pub fn init<R: Rng>(config: &AttentionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let n = config.width;
        let d = config.head_width();
        let h = config.heads;
        let qk = match config.qk_mode {
            QkMode::Separate => QkParams::Separate {
                wq: (0..h).map(|_| glorot(rng, n, d)).collect(),
                wk: (0..h).map(|_| glorot(rng, n, d)).collect(),
            },
            QkMode::Collapsed => QkParams::Collapsed {
                wqk: glorot(rng, n, n),
            },
            QkMode::Shared => QkParams::Shared {
                wq: (0..h).map(|_| glorot(rng, n, d)).collect(),
            },
            QkMode::Cholesky => {
                let diag = 1.0 / (n as f64).sqrt();
                let noise = 0.01 * diag;
                let mut data = Vec::with_capacity(triangle_len(n));
                for i in 0..n {
                    for j in 0..=i {
                        let base = if i == j { diag } else { 0.0 };
                        data.push(T::lit(base + rng.gen_range(-noise..noise)));
                    }
                }
                QkParams::Cholesky {
                    tri: Tensor::new(&[data.len()], data)?,
                }
            }
        };
        let vo = match config.vo_mode {
            VoMode::Separate => VoParams::Separate {
                wv: (0..h).map(|_| glorot(rng, n, d)).collect(),
                wo: (0..h).map(|_| glorot(rng, d, n)).collect(),
            },
            VoMode::Collapsed => VoParams::Collapsed {
                wvo: glorot(rng, n, n),
            },
            VoMode::Identity => VoParams::Identity,
        };
        Ok(AttentionParams { qk, vo })
    }

    pub fn qk_mode(&self) -> QkMode {
        match &self.qk {
            QkParams::Separate { .. } => QkMode::Separate,
            QkParams::Collapsed { .. } => QkMode::Collapsed,
            QkParams::Shared { .. } => QkMode::Shared,
            QkParams::Cholesky { .. } => QkMode::Cholesky,
        }
    }

    pub fn vo_mode(&self) -> VoMode {
        match &self.vo {
            VoParams::Separate { .. } => VoMode::Separate,
            VoParams::Collapsed { .. } => VoMode::Collapsed,
            VoParams::Identity => VoMode::Identity,
        }
    }

    /// Same structure, every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.fill(T::zero());
        }
        out
    }

    /// Stored tensors in a fixed order, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        match &self.qk {
            QkParams::Separate { wq, wk } => {
                for (h, (q, k)) in wq.iter().zip(wk).enumerate() {
                    out.push((format!("wq.{h}"), q));
                    out.push((format!("wk.{h}"), k));
                }
            }
            QkParams::Collapsed { wqk } => out.push(("wqk".into(), wqk)),
            QkParams::Shared { wq } => {
                for (h, q) in wq.iter().enumerate() {
                    out.push((format!("wq.{h}"), q));
                }
            }
            QkParams::Cholesky { tri } => out.push(("tqk".into(), tri)),
        }
        match &self.vo {
            VoParams::Separate { wv, wo } => {
                for (h, (v, o)) in wv.iter().zip(wo).enumerate() {
                    out.push((format!("wv.{h}"), v));
                    out.push((format!("wo.{h}"), o));
                }
            }
            VoParams::Collapsed { wvo } => out.push(("wvo".into(), wvo)),
            VoParams::Identity => {}
        }
        out
    }

    /// Mutable view in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        match &mut self.qk {
            QkParams::Separate { wq, wk } => {
                for (q, k) in wq.iter_mut().zip(wk.iter_mut()) {
                    out.push(q);
                    out.push(k);
                }
            }
            QkParams::Collapsed { wqk } => out.push(wqk),
            QkParams::Shared { wq } => out.extend(wq.iter_mut()),
            QkParams::Cholesky { tri } => out.push(tri),
        }
        match &mut self.vo {
            VoParams::Separate { wv, wo } => {
                for (v, o) in wv.iter_mut().zip(wo.iter_mut()) {
                    out.push(v);
                    out.push(o);
                }
            }
            VoParams::Collapsed { wvo } => out.push(wvo),
            VoParams::Identity => {}
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks that the stored variant and every shape agree with `config`.
    pub fn check(&self, config: &AttentionConfig) -> Result<()> {
        config.validate()?;
        if self.qk_mode() != config.qk_mode || self.vo_mode() != config.vo_mode {
            return Err(Error::VariantMismatch {
                expected: format!("{}/{}", config.qk_mode, config.vo_mode),
                found: format!("{}/{}", self.qk_mode(), self.vo_mode()),
            });
        }
        let (n, d, h) = (config.width, config.head_width(), config.heads);
        let want = |t: &Tensor<T>, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::shape("attention params", t.shape(), shape));
            }
            Ok(())
        };
        let heads = |v: &Vec<Tensor<T>>| -> Result<()> {
            if v.len() != h {
                return Err(Error::Config(format!("expected {h} heads, found {}", v.len())));
            }
            Ok(())
        };
        match &self.qk {
            QkParams::Separate { wq, wk } => {
                heads(wq)?;
                heads(wk)?;
                for t in wq.iter().chain(wk) {
                    want(t, &[n, d])?;
                }
            }
            QkParams::Shared { wq } => {
                heads(wq)?;
                for t in wq {
                    want(t, &[n, d])?;
                }
            }
            QkParams::Collapsed { wqk } => want(wqk, &[n, n])?,
            QkParams::Cholesky { tri } => want(tri, &[triangle_len(n)])?,
        }
        match &self.vo {
            VoParams::Separate { wv, wo } => {
                heads(wv)?;
                heads(wo)?;
                for t in wv {
                    want(t, &[n, d])?;
                }
                for t in wo {
                    want(t, &[d, n])?;
                }
            }
            VoParams::Collapsed { wvo } => want(wvo, &[n, n])?,
            VoParams::Identity => {}
        }
        Ok(())
    }

    /// The similarity matrix `M_h` of head `h` as a dense `N × N` matrix.
    pub fn similarity_matrix(&self, head: usize) -> Result<Tensor<T>> {
        match &self.qk {
            QkParams::Separate { wq, wk } => matmul_nt(&wq[head], &wk[head]),
            QkParams::Shared { wq } => matmul_nt(&wq[head], &wq[head]),
            QkParams::Collapsed { wqk } => Ok(wqk.clone()),
            QkParams::Cholesky { tri } => {
                let n = (((8 * tri.len() + 1) as f64).sqrt() as usize - 1) / 2;
                let t = unpack_lower(tri, n);
                matmul_nt(&t, &t)
            }
        }
    }
}

/// Number of stored attention values for `config`.
pub fn count_attention_params(config: &AttentionConfig) -> Result<usize> {
    config.validate()?;
    let (n, d, h) = (config.width, config.head_width(), config.heads);
    let qk = match config.qk_mode {
        QkMode::Separate => 2 * h * n * d,
        QkMode::Shared => h * n * d,
        QkMode::Collapsed => n * n,
        QkMode::Cholesky => triangle_len(n),
    };
    let vo = match config.vo_mode {
        VoMode::Separate => 2 * h * n * d,
        VoMode::Collapsed => n * n,
        VoMode::Identity => 0,
    };
    Ok(qk + vo)
}

fn check_input<T: Real>(x: &Tensor<T>, config: &AttentionConfig) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != config.width {
        return Err(Error::shape("attention input", x.shape(), &[0, config.width]));
    }
    Ok(())
}

enum QkTrace<T> {
    /// Query and key projections `x·W_Q`, `x·W_K` (equal for shared mode).
    Projected { q: Tensor<T>, k: Tensor<T> },
    /// `x·W_QK`.
    Collapsed { xm: Tensor<T> },
    /// Dense factor `T` and `x·T`.
    Cholesky { t: Tensor<T>, u: Tensor<T> },
}

fn head_logits<T: Real>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    config: &AttentionConfig,
    head: usize,
) -> Result<(Tensor<T>, QkTrace<T>)> {
    let (s, trace) = match &params.qk {
        QkParams::Separate { wq, wk } => {
            let q = matmul(x, &wq[head])?;
            let k = matmul(x, &wk[head])?;
            (matmul_nt(&q, &k)?, QkTrace::Projected { q, k })
        }
        QkParams::Shared { wq } => {
            let q = matmul(x, &wq[head])?;
            (matmul_nt(&q, &q)?, QkTrace::Projected { k: q.clone(), q })
        }
        QkParams::Collapsed { wqk } => {
            let xm = matmul(x, wqk)?;
            (matmul_nt(&xm, x)?, QkTrace::Collapsed { xm })
        }
        QkParams::Cholesky { tri } => {
            let t = unpack_lower(tri, config.width);
            let u = matmul(x, &t)?;
            (matmul_nt(&u, &u)?, QkTrace::Cholesky { t, u })
        }
    };
    let scale = config.logit_scale::<T>();
    let s = if scale == T::one() { s } else { s.scale(scale) };
    Ok((s, trace))
}

/// Logit matrix `S[L×L]` of head `head`.
pub fn logits<T: Real>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    config: &AttentionConfig,
    head: usize,
) -> Result<Tensor<T>> {
    check_input(x, config)?;
    params.check(config)?;
    if head >= config.heads {
        return Err(Error::Config(format!("head {head} out of range (H = {})", config.heads)));
    }
    Ok(head_logits(x, params, config, head)?.0)
}

/// Row-wise softmax of the logits; with a causal mask entry `(i, j)` for
/// `j > i` is excluded.
pub fn weights<T: Real>(s: &Tensor<T>, mask: Mask) -> Result<Tensor<T>> {
    match mask {
        Mask::Full => softmax_rows(s),
        Mask::Causal => {
            if !s.is_finite() {
                return Err(Error::NonFinite { op: "weights" });
            }
            let mut masked = s.clone();
            for i in 0..masked.rows() {
                for j in i + 1..masked.cols() {
                    masked.set(i, j, T::neg_infinity());
                }
            }
            softmax_rows(&masked)
        }
    }
}

enum VoTrace<T> {
    /// `v = x·W_V`, `c = A·v`.
    Separate { v: Tensor<T>, c: Tensor<T> },
    /// `c = A·x`.
    Collapsed { c: Tensor<T> },
    Identity,
}

struct HeadTrace<T> {
    qk: QkTrace<T>,
    a: Tensor<T>,
    vo: VoTrace<T>,
}

/// Intermediate values of one forward pass, consumed by [`backward_traced`].
pub struct AttentionTrace<T = f64> {
    x: Tensor<T>,
    heads: Vec<HeadTrace<T>>,
}

impl<T: Real> AttentionTrace<T> {
    /// Attention weights of head `h`.
    pub fn weights(&self, h: usize) -> &Tensor<T> {
        &self.heads[h].a
    }
}

/// Forward pass that keeps what the backward pass needs.
pub fn forward_traced<T: Real>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    config: &AttentionConfig,
) -> Result<(Tensor<T>, AttentionTrace<T>)> {
    check_input(x, config)?;
    params.check(config)?;
    let mut z = Tensor::zeros(x.shape());
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let (s, qk) = head_logits(x, params, config, h)?;
        let a = weights(&s, config.mask)?;
        let vo = match &params.vo {
            VoParams::Separate { wv, wo } => {
                let v = matmul(x, &wv[h])?;
                let c = matmul(&a, &v)?;
                z.add_assign(&matmul(&c, &wo[h])?)?;
                VoTrace::Separate { v, c }
            }
            VoParams::Collapsed { wvo } => {
                let c = matmul(&a, x)?;
                z.add_assign(&matmul(&c, wvo)?)?;
                VoTrace::Collapsed { c }
            }
            VoParams::Identity => {
                z.add_assign(&matmul(&a, x)?)?;
                VoTrace::Identity
            }
        };
        heads.push(HeadTrace { qk, a, vo });
    }
    Ok((
        z.ensure_finite("attention forward")?,
        AttentionTrace {
            x: x.clone(),
            heads,
        },
    ))
}

/// `z_i = Σ_h Σ_j a_hij x_j V_h` for the configured variant.
pub fn forward<T: Real>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    config: &AttentionConfig,
) -> Result<Tensor<T>> {
    Ok(forward_traced(x, params, config)?.0)
}

/// Reverse pass from a stored trace. Returns `(dx, dparams)`.
pub fn backward_traced<T: Real>(
    trace: &AttentionTrace<T>,
    params: &AttentionParams<T>,
    config: &AttentionConfig,
    dz: &Tensor<T>,
) -> Result<(Tensor<T>, AttentionParams<T>)> {
    let x = &trace.x;
    if dz.shape() != x.shape() {
        return Err(Error::shape("attention backward", dz.shape(), x.shape()));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut grads = params.zeros_like();
    let scale = config.logit_scale::<T>();

    for (h, ht) in trace.heads.iter().enumerate() {
        // Value/output side: produces dA.
        let da = match (&ht.vo, &params.vo, &mut grads.vo) {
            (
                VoTrace::Separate { v, c },
                VoParams::Separate { wv, wo },
                VoParams::Separate { wv: gv, wo: go },
            ) => {
                go[h] = matmul_tn(c, dz)?;
                let dc = matmul_nt(dz, &wo[h])?;
                let dv = matmul_tn(&ht.a, &dc)?;
                gv[h] = matmul_tn(x, &dv)?;
                dx.add_assign(&matmul_nt(&dv, &wv[h])?)?;
                matmul_nt(&dc, v)?
            }
            (VoTrace::Collapsed { c }, VoParams::Collapsed { wvo }, VoParams::Collapsed { wvo: g }) => {
                *g = matmul_tn(c, dz)?;
                let dc = matmul_nt(dz, wvo)?;
                dx.add_assign(&matmul_tn(&ht.a, &dc)?)?;
                matmul_nt(&dc, x)?
            }
            (VoTrace::Identity, VoParams::Identity, VoParams::Identity) => {
                dx.add_assign(&matmul_tn(&ht.a, dz)?)?;
                matmul_nt(dz, x)?
            }
            _ => unreachable!("trace and params built from the same config"),
        };

        let mut ds = softmax_rows_backward(&ht.a, &da)?;
        if scale != T::one() {
            ds = ds.scale(scale);
        }

        match (&ht.qk, &params.qk, &mut grads.qk) {
            (
                QkTrace::Projected { q, k },
                QkParams::Separate { wq, wk },
                QkParams::Separate { wq: gq, wk: gk },
            ) => {
                let dq = matmul(&ds, k)?;
                let dk = matmul_tn(&ds, q)?;
                gq[h] = matmul_tn(x, &dq)?;
                gk[h] = matmul_tn(x, &dk)?;
                dx.add_assign(&matmul_nt(&dq, &wq[h])?)?;
                dx.add_assign(&matmul_nt(&dk, &wk[h])?)?;
            }
            (QkTrace::Projected { q, k }, QkParams::Shared { wq }, QkParams::Shared { wq: gq }) => {
                let mut dq = matmul(&ds, k)?;
                dq.add_assign(&matmul_tn(&ds, q)?)?;
                gq[h] = matmul_tn(x, &dq)?;
                dx.add_assign(&matmul_nt(&dq, &wq[h])?)?;
            }
            (QkTrace::Collapsed { xm }, QkParams::Collapsed { wqk }, QkParams::Collapsed { wqk: g }) => {
                let dxm = matmul(&ds, x)?;
                *g = matmul_tn(x, &dxm)?;
                dx.add_assign(&matmul_nt(&dxm, wqk)?)?;
                dx.add_assign(&matmul_tn(&ds, xm)?)?;
            }
            (QkTrace::Cholesky { t, u }, QkParams::Cholesky { .. }, QkParams::Cholesky { tri: g }) => {
                let mut sym = ds.clone();
                sym.add_assign(&ds.transpose())?;
                let du = matmul(&sym, u)?;
                *g = pack_lower(&matmul_tn(x, &du)?);
                dx.add_assign(&matmul_nt(&du, t)?)?;
            }
            _ => unreachable!("trace and params built from the same config"),
        }
    }
    Ok((dx.ensure_finite("attention backward")?, grads))
}

/// Exact reverse-mode gradients of [`forward`] for upstream gradient `dz`.
pub fn backward<T: Real>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    config: &AttentionConfig,
    dz: &Tensor<T>,
) -> Result<(Tensor<T>, AttentionParams<T>)> {
    let (_, trace) = forward_traced(x, params, config)?;
    backward_traced(&trace, params, config, dz)
}

fn require_single_head(config: &AttentionConfig, what: &str) -> Result<()> {
    if config.heads != 1 {
        return Err(Error::UnsupportedVariant(format!(
            "{what} needs a single head; with H = {} the per-head factors are not square",
            config.heads
        )));
    }
    Ok(())
}

/// Replaces `W_Q`, `W_K` by `W_QK = W_Q · W_Kᵀ`. Single head only.
pub fn collapse_qk<T: Real>(
    params: &AttentionParams<T>,
    config: &AttentionConfig,
) -> Result<(AttentionParams<T>, AttentionConfig)> {
    require_single_head(config, "collapsing W_Q, W_K")?;
    params.check(config)?;
    let wqk = match &params.qk {
        QkParams::Separate { wq, wk } => matmul_nt(&wq[0], &wk[0])?,
        other => {
            return Err(Error::UnsupportedVariant(format!(
                "collapse_qk expects qk_mode=separate, got {}",
                other_mode(other)
            )))
        }
    };
    let mut cfg = config.clone();
    cfg.qk_mode = QkMode::Collapsed;
    Ok((
        AttentionParams {
            qk: QkParams::Collapsed { wqk },
            vo: params.vo.clone(),
        },
        cfg,
    ))
}

/// Replaces `W_V`, `W_O` by `W_VO = W_V · W_O`. Single head only.
pub fn collapse_vo<T: Real>(
    params: &AttentionParams<T>,
    config: &AttentionConfig,
) -> Result<(AttentionParams<T>, AttentionConfig)> {
    require_single_head(config, "collapsing W_V, W_O")?;
    params.check(config)?;
    let wvo = match &params.vo {
        VoParams::Separate { wv, wo } => matmul(&wv[0], &wo[0])?,
        _ => {
            return Err(Error::UnsupportedVariant(format!(
                "collapse_vo expects vo_mode=separate, got {}",
                config.vo_mode
            )))
        }
    };
    let mut cfg = config.clone();
    cfg.vo_mode = VoMode::Collapsed;
    Ok((
        AttentionParams {
            qk: params.qk.clone(),
            vo: VoParams::Collapsed { wvo },
        },
        cfg,
    ))
}

/// Collapses both factor pairs of a single-head separate-mode attention.
/// The result computes the same function with `2N²` instead of `4N²` values.
pub fn collapse<T: Real>(
    params: &AttentionParams<T>,
    config: &AttentionConfig,
) -> Result<(AttentionParams<T>, AttentionConfig)> {
    if config.qk_mode != QkMode::Separate || config.vo_mode != VoMode::Separate {
        require_single_head(config, "collapse")?;
        return Err(Error::UnsupportedVariant(format!(
            "collapse expects separate/separate, got {}/{}",
            config.qk_mode, config.vo_mode
        )));
    }
    let (p, c) = collapse_qk(params, config)?;
    collapse_vo(&p, &c)
}

fn other_mode<T>(qk: &QkParams<T>) -> &'static str {
    match qk {
        QkParams::Separate { .. } => "separate",
        QkParams::Collapsed { .. } => "collapsed",
        QkParams::Shared { .. } => "shared",
        QkParams::Cholesky { .. } => "cholesky",
    }
}
