//! Dense row-major tensors of rank 1–3 and the handful of kernels the
//! attention and encoder code is built from.
//!
//! Every op checks its output for NaN/Inf and reports [`Error::NonFinite`]
//! instead of letting the value propagate. Reductions always run in index
//! order, so results are bitwise reproducible for a fixed build.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f64` (default) and `f32`.
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// Short name used in reports ("f32" / "f64").
    const NAME: &'static str;

    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self;

    fn erf(self) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn lit(x: f64) -> Self {
        x
    }

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn lit(x: f64) -> Self {
        x as f32
    }

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 || shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend(r.as_ref().iter().map(|&v| T::lit(v)));
        }
        Tensor::new(&[rows.len(), cols], data).expect("non-empty rows")
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor::new(&[values.len()], values.iter().map(|&v| T::lit(v)).collect())
            .expect("non-empty vector")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor::new(shape, vec![value; len]).expect("valid shape")
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row count of a matrix (rank 2), or 1 for a vector.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: T) {
        let c = self.cols();
        self.data[i * c + j] = value;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `bias` to every row of a matrix.
    pub fn add_row_bias(&mut self, bias: &Self) -> Result<()> {
        if bias.len() != self.cols() {
            return Err(Error::shape("add_row_bias", &self.shape, &bias.shape));
        }
        let c = self.cols();
        for row in self.data.chunks_mut(c) {
            for (a, &b) in row.iter_mut().zip(&bias.data) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Column sums of a matrix, as a vector.
    pub fn sum_rows(&self) -> Self {
        let c = self.cols();
        let mut out = vec![T::zero(); c];
        for row in self.data.chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor {
            shape: vec![c],
            data: out,
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// Largest absolute elementwise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| {
                let d = (a - b).abs();
                if d > m {
                    d
                } else {
                    m
                }
            })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

fn matrix_dims<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::shape(op, &t.shape, &[]));
    }
    Ok((t.shape[0], t.shape[1]))
}

const MR: usize = 4;
const NR: usize = 8;

/// `out[m×n] += A · b[k×n]` where `A[i][p] = a[i·rs + p·cs]`.
///
/// Works on 4×8 output blocks held in registers. Every output entry is
/// accumulated over `p` in ascending order, whatever the blocking.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Real>(a: &[T], rs: usize, cs: usize, b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let full_rows = m - m % MR;
    let full_cols = n - n % NR;
    for i0 in (0..full_rows).step_by(MR) {
        for j0 in (0..full_cols).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            for p in 0..k {
                let bp: &[T; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("NR wide");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * rs + p * cs];
                    for c in 0..NR {
                        row[c] += av * bp[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
        for r in 0..MR {
            gemm_row(a, (i0 + r) * rs, cs, b, &mut out[(i0 + r) * n..(i0 + r + 1) * n], k, n, full_cols);
        }
    }
    for i in full_rows..m {
        gemm_row(a, i * rs, cs, b, &mut out[i * n..(i + 1) * n], k, n, 0);
    }
}

/// Columns `from..n` of one output row.
#[allow(clippy::too_many_arguments)]
fn gemm_row<T: Real>(a: &[T], base: usize, cs: usize, b: &[T], orow: &mut [T], k: usize, n: usize, from: usize) {
    if from == n {
        return;
    }
    for p in 0..k {
        let av = a[base + p * cs];
        for (o, &bv) in orow[from..].iter_mut().zip(&b[p * n + from..(p + 1) * n]) {
            *o += av * bv;
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]` on raw row-major slices.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    gemm_strided(a, k, 1, b, out, m, k, n);
}

/// `out[m×n] += aᵀ · b` for `a[k×m]`, `b[k×n]`.
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    gemm_strided(a, 1, m, b, out, m, k, n);
}

/// `out[m×n] += a · bᵀ` for `a[m×k]`, `b[n×k]`.
pub(crate) fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let mut bt = vec![T::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_strided(a, k, 1, &bt, out, m, k, n);
}

/// Matrix product `a · b`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, n) = matrix_dims("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_acc(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(&[m, n], out)?.ensure_finite("matmul")
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = matrix_dims("matmul_tn", a)?;
    let (k2, n) = matrix_dims("matmul_tn", b)?;
    if k != k2 {
        return Err(Error::shape("matmul_tn", &a.shape, &b.shape));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_tn_acc(&a.data, &b.data, &mut out, k, m, n);
    Tensor::new(&[m, n], out)?.ensure_finite("matmul_tn")
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims("matmul_nt", a)?;
    let (n, k2) = matrix_dims("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", &a.shape, &b.shape));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nt_acc(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(&[m, n], out)?.ensure_finite("matmul_nt")
}

/// Row-wise softmax with per-row max subtraction. Entries equal to `-inf`
/// are treated as masked out and receive weight exactly zero; every row must
/// keep at least one finite entry.
pub fn softmax_rows<T: Real>(s: &Tensor<T>) -> Result<Tensor<T>> {
    if s.data.iter().any(|v| v.is_nan() || *v == T::infinity()) {
        return Err(Error::NonFinite { op: "softmax_rows" });
    }
    let n = s.cols();
    let mut out = s.data.clone();
    for row in out.chunks_mut(n) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        if max == T::neg_infinity() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = if *v == T::neg_infinity() {
                T::zero()
            } else {
                (*v - max).exp()
            };
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::new(&s.shape, out)
}

/// Gradient of the loss with respect to softmax logits, given the softmax
/// output `a` and the upstream gradient `da`:
/// `ds_ij = a_ij (da_ij − Σ_k a_ik da_ik)`.
pub fn softmax_rows_backward<T: Real>(a: &Tensor<T>, da: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape != da.shape {
        return Err(Error::shape("softmax_rows_backward", &a.shape, &da.shape));
    }
    let n = a.cols();
    let mut out = vec![T::zero(); a.len()];
    for ((arow, grow), orow) in a
        .data
        .chunks(n)
        .zip(da.data.chunks(n))
        .zip(out.chunks_mut(n))
    {
        let dot: T = arow.iter().zip(grow).map(|(&x, &g)| x * g).sum();
        for ((o, &x), &g) in orow.iter_mut().zip(arow).zip(grow) {
            *o = x * (g - dot);
        }
    }
    Tensor::new(&a.shape, out)?.ensure_finite("softmax_rows_backward")
}

fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// d/dx [x Φ(x)] = Φ(x) + x φ(x).
fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Exact GELU, `x · Φ(x)` with the Gaussian CDF evaluated through `erf`.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "gelu" });
    }
    Ok(x.map(gelu_scalar))
}

/// Elementwise derivative of [`gelu`].
pub fn gelu_grad<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "gelu_grad" });
    }
    Ok(x.map(gelu_grad_scalar))
}

fn row_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

/// Per-row normalization to zero mean and unit variance (population
/// variance, `eps` added under the square root), then `gamma ⊙ x̂ + beta`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let n = x.cols();
    if gamma.len() != n || beta.len() != n {
        return Err(Error::shape("layer_norm", &x.shape, &gamma.shape));
    }
    if !(eps > T::zero()) {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    let mut out = vec![T::zero(); x.len()];
    for (row, orow) in x.data.chunks(n).zip(out.chunks_mut(n)) {
        let (mean, inv_std) = row_stats(row, eps);
        for (j, (o, &v)) in orow.iter_mut().zip(row).enumerate() {
            *o = gamma.data[j] * (v - mean) * inv_std + beta.data[j];
        }
    }
    Tensor::new(&x.shape, out)?.ensure_finite("layer_norm")
}

/// Reverse pass of [`layer_norm`]: returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if x.shape != dy.shape || gamma.len() != x.cols() {
        return Err(Error::shape("layer_norm_backward", &x.shape, &dy.shape));
    }
    let n = x.cols();
    let nf = T::lit(n as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); n];
    let mut dbeta = vec![T::zero(); n];
    let mut xhat = vec![T::zero(); n];
    let mut dxhat = vec![T::zero(); n];
    for ((row, grow), drow) in x.data.chunks(n).zip(dy.data.chunks(n)).zip(dx.chunks_mut(n)) {
        let (mean, inv_std) = row_stats(row, eps);
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for j in 0..n {
            xhat[j] = (row[j] - mean) * inv_std;
            dxhat[j] = grow[j] * gamma.data[j];
            dgamma[j] += grow[j] * xhat[j];
            dbeta[j] += grow[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat[j];
        }
        mean_d = mean_d / nf;
        mean_dx = mean_dx / nf;
        for j in 0..n {
            drow[j] = inv_std * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    Ok((
        Tensor::new(&x.shape, dx)?.ensure_finite("layer_norm_backward")?,
        Tensor::new(&[n], dgamma)?,
        Tensor::new(&[n], dbeta)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
        Tensor::new(&[m, n], (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let a = Tensor::<f64>::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&a, &Tensor::identity(2)).unwrap(), a);
        let r = matmul(
            &Tensor::<f64>::from_rows(&[[1.0, 2.0]]),
            &Tensor::from_rows(&[[3.0], [4.0]]),
        )
        .unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 3);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let at = a.transpose();
        assert!(matmul_tn(&at, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let bt = b.transpose();
        assert!(matmul_nt(&a, &bt).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        match err {
            Error::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_finite_is_reported() {
        let a = Tensor::<f64>::from_rows(&[[f64::MAX, f64::MAX]]);
        let b = Tensor::from_rows(&[[f64::MAX], [f64::MAX]]);
        assert!(matches!(matmul(&a, &b), Err(Error::NonFinite { .. })));
        let nan = Tensor::<f64>::from_rows(&[[f64::NAN, 0.0]]);
        assert!(softmax_rows(&nan).is_err());
        assert!(gelu(&nan).is_err());
    }

    #[test]
    fn tensor_rank_and_length_checked() {
        assert!(Tensor::<f64>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(&[1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::<f64>::new(&[], vec![]).is_err());
        assert!(Tensor::<f64>::new(&[2, 3, 4], vec![0.0; 24]).is_ok());
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::<f64>::from_rows(&[
            [0.0, 0.0],
            [0.0, 3f64.ln()],
            [1000.0, 1000.0],
        ]);
        let a = softmax_rows(&s).unwrap();
        assert_eq!(a.row(0), &[0.5, 0.5]);
        assert!((a.at(1, 0) - 0.25).abs() < 1e-15);
        assert!((a.at(1, 1) - 0.75).abs() < 1e-15);
        assert_eq!(a.row(2), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_masked_entries_get_zero() {
        let s = Tensor::<f64>::from_rows(&[[2.0, f64::NEG_INFINITY]]);
        assert_eq!(softmax_rows(&s).unwrap().data(), &[1.0, 0.0]);
        let all_masked = Tensor::<f64>::from_rows(&[[f64::NEG_INFINITY]]);
        assert!(softmax_rows(&all_masked).is_err());
    }

    #[test]
    fn gelu_examples() {
        let x = Tensor::<f64>::vector(&[0.0, 10.0, -10.0]);
        let y = gelu(&x).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        assert!(y.data()[2].abs() < 1e-6);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        let h = 1e-6;
        for i in -40..=40 {
            let x = i as f64 * 0.125;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((gelu_grad_scalar(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn gelu_monotone_on_grid() {
        // GELU dips below zero around x ≈ -0.75, so it is only nondecreasing
        // to the right of its minimum; check both branches separately.
        let grid: Vec<f64> = (0..=1000).map(|i| -5.0 + i as f64 * 0.01).collect();
        let y: Vec<f64> = grid.iter().map(|&x| gelu_scalar(x)).collect();
        let argmin = (0..y.len()).min_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
        for w in y[argmin..].windows(2) {
            assert!(w[1] >= w[0]);
        }
        for w in y[..=argmin].windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::<f64>::full(&[4], 1.0);
        let zeros = Tensor::<f64>::zeros(&[4]);
        let c = Tensor::<f64>::full(&[2, 4], 3.5);
        assert!(layer_norm(&c, &ones, &zeros, 1e-6).unwrap().max_abs() == 0.0);

        let x = Tensor::<f64>::from_rows(&[[1.0, -2.0, 0.5, 4.0]]);
        let y = layer_norm(&x, &ones, &zeros, 1e-12).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);

        let b = Tensor::<f64>::vector(&[0.5, -1.0, 2.0, 7.0]);
        let y = layer_norm(&x, &zeros, &b, 1e-6).unwrap();
        assert_eq!(y.row(0), b.data());
    }

    #[test]
    fn layer_norm_backward_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, 3, 5);
        let gamma = Tensor::new(&[5], (0..5).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
        let beta = Tensor::new(&[5], (0..5).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let dy = random(&mut rng, 3, 5);
        let eps = 1e-6;
        let loss = |x: &Tensor, g: &Tensor, b: &Tensor| -> f64 {
            let y = layer_norm(x, g, b, eps).unwrap();
            y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
        };
        let (dx, dg, db) = layer_norm_backward(&x, &gamma, eps, &dy).unwrap();
        let h = 1e-6;
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let fd = (loss(&xp, &gamma, &beta) - loss(&xm, &gamma, &beta)) / (2.0 * h);
            assert!((fd - dx.data()[k]).abs() < 1e-7);
        }
        for k in 0..5 {
            let mut gp = gamma.clone();
            gp.data_mut()[k] += h;
            let mut gm = gamma.clone();
            gm.data_mut()[k] -= h;
            let fd = (loss(&x, &gp, &beta) - loss(&x, &gm, &beta)) / (2.0 * h);
            assert!((fd - dg.data()[k]).abs() < 1e-7);
            let expected_db: f64 = (0..3).map(|i| dy.at(i, k)).sum();
            assert!((db.data()[k] - expected_db).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_backward_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random(&mut rng, 3, 4);
        let g = random(&mut rng, 3, 4);
        let loss = |s: &Tensor| -> f64 {
            let a = softmax_rows(s).unwrap();
            a.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let a = softmax_rows(&s).unwrap();
        let ds = softmax_rows_backward(&a, &g).unwrap();
        let h = 1e-6;
        for k in 0..s.len() {
            let mut sp = s.clone();
            sp.data_mut()[k] += h;
            let mut sm = s.clone();
            sm.data_mut()[k] -= h;
            let fd = (loss(&sp) - loss(&sm)) / (2.0 * h);
            assert!((fd - ds.data()[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn f32_kernels_work() {
        let a = Tensor::<f32>::from_rows(&[[1.0, 2.0]]);
        let b = Tensor::<f32>::from_rows(&[[3.0], [4.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0f32]);
        assert!(gelu(&Tensor::<f32>::vector(&[10.0])).unwrap().data()[0] > 9.99);
    }

    fn matrix(m: usize, n: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-2.0f64..2.0, m * n)
            .prop_map(move |d| Tensor::new(&[m, n], d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative((a, b, c) in (1usize..6, 1usize..6, 1usize..6, 1usize..6)
            .prop_flat_map(|(m, k, l, n)| (matrix(m, k), matrix(k, l), matrix(l, n))))
        {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.max_abs().max(1.0);
            prop_assert!(left.max_abs_diff(&right) / scale < 1e-9);
        }

        #[test]
        fn softmax_rows_stochastic_and_shift_invariant(s in matrix(3, 5), shift in -50.0f64..50.0) {
            let a = softmax_rows(&s).unwrap();
            for i in 0..3 {
                let total: f64 = a.row(i).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(a.row(i).iter().all(|&v| v >= 0.0));
            }
            let shifted = softmax_rows(&s.map(|v| v + shift)).unwrap();
            prop_assert!(a.max_abs_diff(&shifted) < 1e-12);
        }
    }
}
