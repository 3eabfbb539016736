//! Dense kernels and statistics shared by every probe.
//!
//! Storage is generic over [`Real`] (`f32` for models on disk, `f64` for the
//! gradient-check shadow copies). Every reduction that feeds a reported metric
//! (softmax normalizers, norms, KL, rank correlation, layer-norm statistics)
//! accumulates in `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floor applied to `q_i` when `p_i > 0` but `q_i == 0` in [`kl_divergence`].
pub const KL_CLAMP: f64 = 1e-12;

/// Scalar type of model storage.
pub trait Real:
    Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `tanh` used by the GELU. Exact for `f64`; a rational approximation
    /// within a few ulp for `f32`, where libm `tanhf` dominates the forward pass.
    fn gelu_tanh(self) -> Self;

    /// `c = alpha * a * b + beta * c` over arbitrary strides.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must lie
    /// inside the corresponding buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_unchecked(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn gelu_tanh(self) -> f32 {
        tanh_f32(self)
    }
    unsafe fn gemm_unchecked(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn gelu_tanh(self) -> f64 {
        self.tanh()
    }
    unsafe fn gemm_unchecked(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Odd 13/6 rational approximation of `tanh` on `[-7.9053, 7.9053]`, where
/// `f32` tanh is within rounding of +-1 outside that range.
#[inline]
pub fn tanh_f32(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311;
    if x.abs() < 4e-4 {
        return x;
    }
    let x = x.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let mut p = -2.760_768_5e-16_f32;
    p = p * x2 + 2.000_188e-13;
    p = p * x2 - 8.604_672e-11;
    p = p * x2 + 5.122_297e-8;
    p = p * x2 + 1.485_722_4e-5;
    p = p * x2 + 6.372_619_3e-4;
    p = p * x2 + 4.893_524_6e-3;
    p *= x;
    let mut q = 1.198_258_4e-6_f32;
    q = q * x2 + 1.185_347_1e-4;
    q = q * x2 + 2.268_434_6e-3;
    q = q * x2 + 4.893_525e-3;
    p / q
}

/// A strided read-only view used as a GEMM operand.
#[derive(Clone, Copy)]
pub struct View<'a, R> {
    pub data: &'a [R],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, R> View<'a, R> {
    pub fn row_major(data: &'a [R], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `(_ × cols)` buffer.
    pub fn transposed(data: &'a [R], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0
            || cols == 0
            || (rows - 1) * self.row_stride + (cols - 1) * self.col_stride < self.data.len()
    }
}

/// Bounds-checked `c = alpha * a(m×k) * b(k×n) + beta * c(m×n)`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: R,
    a: View<'_, R>,
    b: View<'_, R>,
    beta: R,
    c: &mut [R],
    rsc: usize,
    csc: usize,
) {
    assert!(a.fits(m, k), "gemm: lhs view out of bounds");
    assert!(b.fits(k, n), "gemm: rhs view out of bounds");
    assert!(
        m == 0 || n == 0 || (m - 1) * rsc + (n - 1) * csc < c.len(),
        "gemm: output view out of bounds"
    );
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: all reachable offsets were checked against the slice lengths above.
    unsafe {
        R::gemm_unchecked(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<R = f32> {
    rows: usize,
    cols: usize,
    data: Vec<R>,
}

impl<R: Real> Matrix<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![R::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                left: data.len(),
                right: rows * cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> R) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[R] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<R> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[R] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [R] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> R {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: R) {
        self.data[i * self.cols + j] = v;
    }

    pub fn view(&self) -> View<'_, R> {
        View::row_major(&self.data, self.cols)
    }

    pub fn view_t(&self) -> View<'_, R> {
        View::transposed(&self.data, self.cols)
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix<R>) -> Matrix<R> {
        assert_eq!(self.cols, rhs.rows, "matmul: inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        gemm(
            self.rows,
            self.cols,
            rhs.cols,
            R::one(),
            self.view(),
            rhs.view(),
            R::zero(),
            &mut out.data,
            rhs.cols,
            1,
        );
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<S: Real>(&self) -> Matrix<S> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| S::from_f64(x.as_f64())).collect(),
        }
    }
}

/// A normalized distribution over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Wraps an already-normalized vector, checking the invariants.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::NonFinite("probability vector".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax_top1(&self.0)
    }
}

fn check_finite<R: Real>(v: &[R], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn max_of<R: Real>(v: &[R]) -> f64 {
    v.iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Max-subtracted softmax evaluated in `f64`.
pub fn softmax<R: Real>(logits: &[R]) -> Result<ProbVector> {
    check_finite(logits, "softmax input")?;
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty vector".into()));
    }
    let max = max_of(logits);
    let exps: Vec<f64> = logits.iter().map(|x| (x.as_f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / total).collect()))
}

pub fn log_softmax<R: Real>(logits: &[R]) -> Result<Vec<f64>> {
    check_finite(logits, "log_softmax input")?;
    if logits.is_empty() {
        return Err(Error::InvalidArgument("log_softmax of empty vector".into()));
    }
    let max = max_of(logits);
    let lse = logits
        .iter()
        .map(|x| (x.as_f64() - max).exp())
        .sum::<f64>()
        .ln();
    Ok(logits.iter().map(|x| x.as_f64() - max - lse).collect())
}

/// Result of a KL evaluation; `clamped` records that some `q_i` hit [`KL_CLAMP`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kl {
    pub value: f64,
    pub clamped: bool,
}

/// `D_KL(p || q)` in nats.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<Kl> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let mut value = 0.0;
    let mut clamped = false;
    for (&pi, &qi) in p.0.iter().zip(&q.0) {
        if pi == 0.0 {
            continue;
        }
        let qi = if qi <= 0.0 {
            clamped = true;
            KL_CLAMP
        } else {
            qi
        };
        value += pi * (pi.ln() - qi.ln());
    }
    Ok(Kl { value, clamped })
}

/// 1-based ranks with ties sharing their mean rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let mean = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = mean;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    // sqrt(x * x) == x exactly, so identical or mirrored ranks give exactly +-1
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation. `Ok(None)` is the explicit "no correlation"
/// marker returned when ranks of either input have zero variance.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(
            "spearman needs at least two observations".into(),
        ));
    }
    check_finite(a, "spearman input")?;
    check_finite(b, "spearman input")?;
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

/// Index of the maximum entry, lowest index on ties. Panics on empty input.
pub fn argmax_top1<T: PartialOrd + Copy>(v: &[T]) -> usize {
    assert!(!v.is_empty(), "argmax of empty vector");
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn l2_norm<R: Real>(a: &[R]) -> f64 {
    a.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

/// `sqrt(sum (a_i - b_i)^2)` with `f64` accumulation.
pub fn l2_diff<R: Real>(a: &[R], b: &[R]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt())
}
