//! Dense row-major tensors over `f32` / `f64`.
//!
//! This is deliberately small: shapes are plain `Vec<usize>`, storage is an
//! owned `Vec`, and the only broadcast supported is a trailing-suffix operand
//! repeated over the leading axes (a `[D]` bias over `[B, T, D]`, a scalar over
//! anything).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar element type of a [`Tensor`].
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    /// Raw strided GEMM: `C = alpha * A B + beta * C`.
    ///
    /// # Safety
    /// All strided accesses implied by `(m, k, n)` and the strides must be in
    /// bounds of the pointed-to allocations.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
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

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
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

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Converts an `f64` literal into the element type.
#[inline]
pub fn lit<T: Element>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

/// Placement of a strided matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct Strided {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Strided {
    pub fn rows(off: usize, row_stride: usize) -> Self {
        Strided { off, rs: row_stride, cs: 1 }
    }

    /// Views a row-major block with row stride `row_stride` as its transpose.
    pub fn transposed(off: usize, row_stride: usize) -> Self {
        Strided { off, rs: 1, cs: row_stride }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.off + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// Bounds-checked strided GEMM: `C[m×n] = alpha · A[m×k] · B[k×n] + beta · C`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    la: Strided,
    b: &[T],
    lb: Strided,
    beta: T,
    c: &mut [T],
    lc: Strided,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(lc.last_index(m, n) < c.len(), "gemm: C out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = lc.off + i * lc.rs + j * lc.cs;
                c[idx] = if beta == T::zero() { T::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    assert!(la.last_index(m, k) < a.len(), "gemm: A out of bounds");
    assert!(lb.last_index(k, n) < b.len(), "gemm: B out of bounds");
    // SAFETY: the three extents were checked above and all strides are non-negative.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(la.off),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.off),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.off),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Exp,
    Neg,
    /// `x · sigmoid(x)`.
    Silu,
    /// `max(x, c)`.
    MaxScalar(f64),
    /// `c · x`.
    Scale(f64),
    /// `mul · x + add`.
    Affine(f64, f64),
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    L2Norm,
}

#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl UnaryOp {
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Neg => -x,
            UnaryOp::Silu => x * sigmoid(x),
            UnaryOp::MaxScalar(c) => x.max(lit(c)),
            UnaryOp::Scale(c) => x * lit(c),
            UnaryOp::Affine(m, a) => x * lit(m) + lit(a),
            UnaryOp::Square => x * x,
        }
    }

    /// Derivative given the input `x` and the output `y = f(x)`.
    pub fn derivative<T: Element>(self, x: T, y: T) -> T {
        match self {
            UnaryOp::Sigmoid => y * (T::one() - y),
            UnaryOp::Tanh => T::one() - y * y,
            UnaryOp::Exp => y,
            UnaryOp::Neg => -T::one(),
            UnaryOp::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            // Subgradient 0 on the clamped side, including the tie.
            UnaryOp::MaxScalar(c) => {
                if x > lit(c) {
                    T::one()
                } else {
                    T::zero()
                }
            }
            UnaryOp::Scale(c) => lit(c),
            UnaryOp::Affine(m, _) => lit(m),
            UnaryOp::Square => x + x,
        }
    }
}

impl BinaryOp {
    #[inline]
    pub fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

/// True when `b` can be broadcast against `a` (equal shapes or `b` a trailing suffix of `a`).
pub fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    /// Shared storage; cloning a tensor is cheap and writes copy on demand.
    data: Arc<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor of shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![value; n]) }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Vec::new(), data: Arc::new(vec![value]) }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| lit(v)).collect())
    }

    /// Identity matrix of size `n×n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = T::one();
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                lit(z * std)
            })
            .collect();
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| lit(rng.random_range(lo..hi))).collect();
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim().max(1)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::invalid(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&x| f(x)).collect()) }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap()).collect()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest elementwise absolute difference (infinite on shape mismatch or NaN).
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| {
                let d = (*a - *b).abs().to_f64().unwrap_or(f64::NAN);
                if d.is_nan() {
                    f64::INFINITY
                } else {
                    d
                }
            })
            .fold(0.0, f64::max)
    }

    /// Matrix product over the last axis of `self`: `[.., K] × [K, N] → [.., N]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if other.rank() != 2 || self.rank() < 1 || self.last_dim() != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.rows(), self.last_dim(), other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            Strided::rows(0, k),
            &other.data,
            Strided::rows(0, n),
            T::zero(),
            &mut out,
            Strided::rows(0, n),
        );
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = n;
        Ok(Tensor { shape, data: Arc::new(out) })
    }

    /// `op(self, other)` with `other` broadcast as a trailing suffix.
    pub fn binary(&self, op: BinaryOp, other: &Tensor<T>) -> Result<Tensor<T>> {
        if !broadcastable(&self.shape, &other.shape) {
            return Err(Error::shape("elementwise", &self.shape, &other.shape));
        }
        let n = other.data.len();
        let data = if n == self.data.len() {
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| op.apply(a, b)).collect()
        } else {
            self.data.iter().enumerate().map(|(i, &a)| op.apply(a, other.data[i % n])).collect()
        };
        Ok(Tensor { shape: self.shape.clone(), data: Arc::new(data) })
    }

    pub fn unary(&self, op: UnaryOp) -> Tensor<T> {
        self.map(|x| op.apply(x))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Mul, other)
    }

    /// `a + (b − a) ⊙ x`; `x` may broadcast as a trailing suffix of `a`.
    pub fn lerp(a: &Tensor<T>, b: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape != b.shape {
            return Err(Error::shape("lerp", &a.shape, &b.shape));
        }
        if !broadcastable(&a.shape, &x.shape) {
            return Err(Error::shape("lerp", &a.shape, &x.shape));
        }
        let n = x.data.len();
        let data = (0..a.data.len())
            .map(|i| a.data[i] + (b.data[i] - a.data[i]) * x.data[i % n])
            .collect();
        Ok(Tensor { shape: a.shape.clone(), data: Arc::new(data) })
    }

    /// Splits the shape around `axis` into `(outer, len, inner)`.
    pub(crate) fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(Error::invalid(format!("axis {axis} out of range for shape {:?}", self.shape)));
        }
        let len = self.shape[axis];
        if len == 0 {
            return Err(Error::invalid(format!("reduction over empty axis {axis} of {:?}", self.shape)));
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, len, inner))
    }

    pub fn reduce(&self, op: ReduceOp, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = self.axis_split(axis)?;
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    let x = self.data[base + i];
                    out[o * inner + i] += match op {
                        ReduceOp::L2Norm => x * x,
                        _ => x,
                    };
                }
            }
        }
        match op {
            ReduceOp::Sum => {}
            ReduceOp::Mean => {
                let inv = T::one() / lit::<T>(len as f64);
                out.iter_mut().for_each(|x| *x *= inv);
            }
            ReduceOp::L2Norm => out.iter_mut().for_each(|x| *x = x.sqrt()),
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data: Arc::new(out) })
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Accumulates `other` into `self` elementwise (shapes must match exactly).
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("accumulate", &self.shape, &other.shape));
        }
        for (a, &b) in Arc::make_mut(&mut self.data).iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(Error::invalid(format!("transpose2 on shape {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: Arc::new(out) })
    }
}
