//! Dense row-major tensors.
//!
//! A [`Tensor`] is an immutable value: a shape plus a shared, contiguous,
//! row-major buffer. Cloning is cheap (the buffer is reference counted) and
//! every operation returns a new tensor. The model keeps activations
//! channels-last, so the last axis is always the contiguous one.

pub mod conv;
mod ntsr;

use std::fmt::Debug;
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};

pub use ntsr::{read_ntsr, read_ntsr_as, read_ntsr_file, write_ntsr, write_ntsr_file, NTSR_MAGIC, NTSR_VERSION};

/// Storage precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Type code used by the NTSR container.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar types a [`Tensor`] can hold.
pub trait Element:
    Float + FromPrimitive + NumAssign + Sum + Debug + Default + Send + Sync + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a @ b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// Strides and extents must describe memory inside the buffers behind
    /// the pointers.
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

    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Row-major matrix view used by [`gemm`]: `(rows, cols, row_stride, col_stride)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatLayout {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatLayout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        MatLayout { rows, cols, rs: cols, cs: 1 }
    }

    pub fn transposed(self) -> Self {
        MatLayout { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// Safe front for [`Element::gemm_raw`]: `c = a @ b + beta * c`, with `c`
/// row-major `(a.rows, b.cols)`.
pub(crate) fn gemm<E: Element>(a: &[E], la: MatLayout, b: &[E], lb: MatLayout, c: &mut [E], beta: E) {
    assert_eq!(la.cols, lb.rows, "gemm inner extents");
    assert!(a.len() >= la.span() && b.len() >= lb.span(), "gemm operand bounds");
    assert!(c.len() >= la.rows * lb.cols, "gemm output bounds");
    if la.rows == 0 || lb.cols == 0 {
        return;
    }
    if la.cols == 0 {
        for v in c[..la.rows * lb.cols].iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: spans were checked against the slice lengths above.
    unsafe {
        E::gemm_raw(
            la.rows,
            la.cols,
            lb.cols,
            E::one(),
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lb.cols as isize,
            1,
        )
    }
}

/// Immutable N-dimensional array with shared row-major storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Element> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{:?}>{:?}", E::DTYPE, self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data.as_slice())?;
        }
        Ok(())
    }
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!("shape {:?} needs {} values, got {}", shape, n, data.len()));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::new(data) })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: E) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Standard normal samples.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let v: f64 = StandardNormal.sample(rng);
            E::lit(v)
        })
    }

    /// Uniform samples on `[-bound, bound)`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| E::lit(rng.gen_range(-bound..bound)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Extent of the last axis (1 for a 0-d tensor).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        if self.last_dim() == 0 {
            0
        } else {
            self.numel() / self.last_dim()
        }
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [E] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<E> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Address of the backing buffer; identifies shared storage.
    pub fn storage_ptr(&self) -> *const E {
        self.data.as_ptr()
    }

    pub fn item(&self) -> E {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        let data = self
            .data
            .iter()
            .map(|v| F::lit(v.to_f64().expect("float converts")))
            .collect();
        Tensor::from_parts(self.shape.clone(), data)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: E) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> E {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> E {
        self.sum() / E::from_usize(self.numel().max(1)).expect("count converts")
    }

    pub fn sq_norm(&self) -> E {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> E {
        self.data.iter().fold(E::zero(), |m, &v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<E> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(E::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!("{}: shape {:?} vs {:?}", what, self.shape, other.shape));
        }
        Ok(())
    }

    /// Generic axis permutation: `out.shape[i] = self.shape[axes[i]]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(dim_err!("invalid permutation {:?} for rank {}", axes, nd));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.numel();
        let mut out = Vec::with_capacity(n);
        let mut idx = vec![0usize; nd];
        let mut offset = 0usize;
        for _ in 0..n {
            out.push(self.data[offset]);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                offset += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self::from_parts(out_shape, out))
    }

    /// Rows `[start, start + len)` of the leading axis.
    pub fn slice_axis0(&self, start: usize, len: usize) -> Result<Self> {
        let lead = *self.shape.first().ok_or_else(|| dim_err!("slice of a 0-d tensor"))?;
        if start + len > lead {
            return Err(dim_err!("slice {}..{} exceeds leading extent {}", start, start + len, lead));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        let data = self.data[start * inner..(start + len) * inner].to_vec();
        Ok(Self::from_parts(shape, data))
    }

    /// Concatenation along the leading axis.
    pub fn concat_axis0(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.ndim() != first.ndim() || &p.shape[1..] != tail {
                return Err(dim_err!("concat_axis0: {:?} vs {:?}", p.shape, first.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Self::from_parts(shape, data))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Self> {
        let c = self.last_dim();
        if start + len > c {
            return Err(dim_err!("slice {}..{} exceeds last extent {}", start, start + len, c));
        }
        let mut data = Vec::with_capacity(self.rows() * len);
        for row in self.data.chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("rank >= 1") = len;
        Ok(Self::from_parts(shape, data))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let lead = &first.shape[..first.ndim() - 1];
        for p in parts {
            if p.ndim() != first.ndim() || &p.shape[..p.ndim() - 1] != lead {
                return Err(dim_err!("concat_last: {:?} vs {:?}", p.shape, first.shape));
            }
        }
        let total: usize = parts.iter().map(|p| p.last_dim()).sum();
        let rows = first.rows();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let c = p.last_dim();
                data.extend_from_slice(&p.data[r * c..(r + 1) * c]);
            }
        }
        let mut shape = first.shape.clone();
        *shape.last_mut().expect("rank >= 1") = total;
        Ok(Self::from_parts(shape, data))
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose2(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(dim_err!("transpose2 needs rank 2, got {:?}", self.shape));
        }
        self.permute(&[1, 0])
    }

    /// `out[..., b] = sum_a x[..., a] * w[a, b]`.
    pub fn matmul_lastdim(&self, w: &Self) -> Result<Self> {
        if w.ndim() != 2 || self.ndim() == 0 || self.last_dim() != w.shape[0] {
            return Err(dim_err!("matmul_lastdim: x {:?} with w {:?}", self.shape, w.shape));
        }
        let (m, k, n) = (self.rows(), w.shape[0], w.shape[1]);
        let mut out = vec![E::zero(); m * n];
        gemm(
            &self.data,
            MatLayout::row_major(m, k),
            &w.data,
            MatLayout::row_major(k, n),
            &mut out,
            E::zero(),
        );
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("rank >= 1") = n;
        Ok(Self::from_parts(shape, out))
    }

    /// `out[..., b] = sum_a x[..., a] * w[b, a]`, i.e. `x @ w^T`.
    pub fn matmul_lastdim_t(&self, w: &Self) -> Result<Self> {
        if w.ndim() != 2 || self.ndim() == 0 || self.last_dim() != w.shape[1] {
            return Err(dim_err!("matmul_lastdim_t: x {:?} with w {:?}", self.shape, w.shape));
        }
        let (m, k, n) = (self.rows(), w.shape[1], w.shape[0]);
        let mut out = vec![E::zero(); m * n];
        gemm(
            &self.data,
            MatLayout::row_major(m, k),
            &w.data,
            MatLayout::row_major(n, k).transposed(),
            &mut out,
            E::zero(),
        );
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("rank >= 1") = n;
        Ok(Self::from_parts(shape, out))
    }

    /// Adds `b[C]` to every row of a `[..., C]` tensor.
    pub fn add_bias(&self, b: &Self) -> Result<Self> {
        if b.ndim() != 1 || b.numel() != self.last_dim() {
            return Err(dim_err!("add_bias: x {:?} with bias {:?}", self.shape, b.shape));
        }
        let mut out = self.data.to_vec();
        for row in out.chunks_exact_mut(b.numel()) {
            for (v, &bb) in row.iter_mut().zip(b.data.iter()) {
                *v += bb;
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<E: Element> TryFrom<(&[usize], Vec<E>)> for Tensor<E> {
    type Error = Error;

    fn try_from((shape, data): (&[usize], Vec<E>)) -> Result<Self> {
        Tensor::new(shape, data)
    }
}
