//! Dense NCDHW tensors and the primitive kernels the layers are built from.
//!
//! Storage is row-major with W fastest. Shapes never broadcast: every binary
//! op requires identical shapes and reports both on mismatch.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::InvalidArgument(format!(
                "unknown dtype {other:?} (expected f32 or f64)"
            ))),
        }
    }
}

/// Scalar type a tensor can hold. Implemented for `f32` and `f64` only.
pub trait Element:
    Float
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Decodes one value from exactly `DTYPE.size_of()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Five-axis shape (batch, channel, depth, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Shape { n, c, d, h, w }
    }

    /// A length-`len` vector stored along N.
    pub const fn vector(len: usize) -> Self {
        Shape::new(len, 1, 1, 1, 1)
    }

    /// A `rows x cols` matrix stored along (N, C).
    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape::new(rows, cols, 1, 1, 1)
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.d * self.h * self.w
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub fn spatial_len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.n, self.c, self.d, self.h, self.w]
    }

    pub fn from_dims(dims: [usize; 5]) -> Self {
        Shape::new(dims[0], dims[1], dims[2], dims[3], dims[4])
    }

    pub fn with_batch(self, n: usize) -> Self {
        Shape { n, ..self }
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn with_spatial(self, [d, h, w]: [usize; 3]) -> Self {
        Shape { d, h, w, ..self }
    }

    /// Flat offset of element (n, c, d, h, w).
    #[inline]
    pub fn offset(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        (((n * self.c + c) * self.d + d) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {}, {})", self.n, self.c, self.d, self.h, self.w)
    }
}

/// Fill rule for [`Tensor::create`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Uniform { seed: u64, lo: f64, hi: f64 },
    Normal { seed: u64, mean: f64, std: f64 },
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &std::any::type_name::<T>())
            .field("head", &preview)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn create(shape: Shape, init: Init) -> Result<Self> {
        let len = shape.numel();
        let data = match init {
            Init::Zeros => vec![T::zero(); len],
            Init::Ones => vec![T::one(); len],
            Init::Constant(v) => vec![T::from_f64(v); len],
            Init::Uniform { seed, lo, hi } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "uniform init needs finite lo < hi, got [{lo}, {hi})"
                    )));
                }
                let dist = Uniform::new(lo, hi)
                    .map_err(|e| Error::InvalidArgument(format!("uniform init: {e}")))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
            }
            Init::Normal { seed, mean, std } => {
                let dist = Normal::new(mean, std)
                    .map_err(|e| Error::InvalidArgument(format!("normal init: {e}")))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
            }
        };
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::DimensionMismatch {
                op: "from_vec",
                detail: format!("shape {shape} needs {} values, got {}", shape.numel(), data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64_slice(shape: Shape, data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(n, c, d, h, w)]
    }

    /// Every (n, c) volume mirrored along the selected (D, H, W) axes.
    pub fn flip(&self, axes: [bool; 3]) -> Tensor<T> {
        let s = self.shape;
        let mut out = Vec::with_capacity(self.data.len());
        let pick = |flip: bool, i: usize, len: usize| if flip { len - 1 - i } else { i };
        for n in 0..s.n {
            for c in 0..s.c {
                for d in 0..s.d {
                    for h in 0..s.h {
                        let row = s.offset(n, c, pick(axes[0], d, s.d), pick(axes[1], h, s.h), 0);
                        let src = &self.data[row..row + s.w];
                        if axes[2] {
                            out.extend(src.iter().rev());
                        } else {
                            out.extend_from_slice(src);
                        }
                    }
                }
            }
        }
        Tensor { shape: s, data: out }
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Contiguous slice of one (n, c) volume.
    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let len = self.shape.spatial_len();
        let start = (n * self.shape.c + c) * len;
        &self.data[start..start + len]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let len = self.shape.spatial_len();
        let start = (n * self.shape.c + c) * len;
        &mut self.data[start..start + len]
    }

    /// Copy of sample `n` as a batch of one.
    pub fn sample(&self, n: usize) -> Tensor<T> {
        let per = self.shape.numel() / self.shape.n.max(1);
        Tensor {
            shape: self.shape.with_batch(1),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks batch-of-one tensors along N.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            if t.shape.with_batch(1) != first.shape.with_batch(1) {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first.shape,
                    right: t.shape,
                });
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: first.shape.with_batch(n),
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn debug_check_finite(&self, op: &str) {
        debug_assert!(self.is_finite(), "{op} produced a non-finite value");
    }

    fn zip_with(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape,
                right: other.shape,
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                left: self.shape,
                right: other.shape,
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "axpy",
                left: self.shape,
                right: other.shape,
            });
        }
        axpy(&mut self.data, alpha, &other.data);
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "dot",
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp<T> {
    Add,
    Sub,
    Mul,
    Scale(T),
    Relu,
}

/// Dispatches one of the elementwise ops; binary ops require `b`.
pub fn elementwise<T: Element>(
    op: ElementwiseOp<T>,
    a: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let need_b = || {
        b.ok_or_else(|| Error::InvalidArgument("binary elementwise op needs a second operand".into()))
    };
    match op {
        ElementwiseOp::Add => a.add(need_b()?),
        ElementwiseOp::Sub => a.sub(need_b()?),
        ElementwiseOp::Mul => a.mul(need_b()?),
        ElementwiseOp::Scale(alpha) => Ok(a.scale(alpha)),
        ElementwiseOp::Relu => Ok(a.relu()),
    }
}

/// `y += alpha * x`; fixed left-to-right order per element.
#[inline]
pub fn axpy<T: Element>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Inner product with eight interleaved accumulators.
///
/// The summation order depends only on the slice length, so results are
/// reproducible bit-exactly regardless of threading or SIMD width.
#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `Σ f(x)` in f64 with eight interleaved partial sums (fixed order).
#[inline]
pub fn sum_f64_by<T: Element>(xs: &[T], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for k in 0..8 {
            acc[k] += f(c[k].as_f64());
        }
    }
    let mut tail = 0.0;
    for &v in chunks.remainder() {
        tail += f(v.as_f64());
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `(Σ a, Σ a·b)` in f64 with eight interleaved partial sums.
#[inline]
pub fn sum_and_dot_f64<T: Element>(a: &[T], b: &[T]) -> (f64, f64) {
    debug_assert_eq!(a.len(), b.len());
    let mut sa = [0.0f64; 8];
    let mut sab = [0.0f64; 8];
    let (mut ca, mut cb) = (a.chunks_exact(8), b.chunks_exact(8));
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            let xv = x[k].as_f64();
            sa[k] += xv;
            sab[k] += xv * y[k].as_f64();
        }
    }
    let (mut ta, mut tab) = (0.0, 0.0);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        ta += x.as_f64();
        tab += x.as_f64() * y.as_f64();
    }
    let fold = |s: [f64; 8]| ((s[0] + s[4]) + (s[1] + s[5])) + ((s[2] + s[6]) + (s[3] + s[7]));
    (fold(sa) + ta, fold(sab) + tab)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Element> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "matrix",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// `a (m x k) * b (k x n)`, accumulating over k in ascending order per element.
pub fn matmul<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            detail: format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for p in 0..a.cols {
            axpy(out_row, a.data[i * a.cols + p], b.row(p));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    N,
    C,
    D,
    H,
    W,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::N => 0,
            Axis::C => 1,
            Axis::D => 2,
            Axis::H => 3,
            Axis::W => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Reduces over `axes`, keeping them as size-1 dims. An empty axis list is
/// the identity. Reducing a zero-length axis with `Mean`/`Max` is an error.
pub fn reduce<T: Element>(op: ReduceOp, t: &Tensor<T>, axes: &[Axis]) -> Result<Tensor<T>> {
    let mut reduced = [false; 5];
    for a in axes {
        let i = a.index();
        if reduced[i] {
            return Err(Error::InvalidArgument(format!("axis {a:?} listed twice")));
        }
        reduced[i] = true;
    }
    let in_dims = t.shape().dims();
    let mut out_dims = in_dims;
    let mut count = 1usize;
    for i in 0..5 {
        if reduced[i] {
            out_dims[i] = 1;
            count *= in_dims[i];
        }
    }
    if axes.is_empty() {
        return Ok(t.clone());
    }
    if t.is_empty() {
        // zero-size in, zero-size out: an emptied axis stays empty
        for i in 0..5 {
            if reduced[i] && in_dims[i] == 0 {
                out_dims[i] = 0;
            }
        }
        return Ok(Tensor::zeros(Shape::from_dims(out_dims)));
    }
    let out_shape = Shape::from_dims(out_dims);
    let init = match op {
        ReduceOp::Max => T::neg_infinity(),
        _ => T::zero(),
    };
    let mut out = Tensor::full(out_shape, init);
    let s = t.shape();
    let mut idx = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for d in 0..s.d {
                for h in 0..s.h {
                    for w in 0..s.w {
                        let full = [n, c, d, h, w];
                        let mut o = [0usize; 5];
                        for i in 0..5 {
                            o[i] = if reduced[i] { 0 } else { full[i] };
                        }
                        let oi = out_shape.offset(o[0], o[1], o[2], o[3], o[4]);
                        let v = t.data[idx];
                        match op {
                            ReduceOp::Max => {
                                if v > out.data[oi] {
                                    out.data[oi] = v;
                                }
                            }
                            _ => out.data[oi] += v,
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    if op == ReduceOp::Mean {
        let inv = T::from_f64(count as f64);
        for v in &mut out.data {
            *v = *v / inv;
        }
    }
    Ok(out)
}

/// Source coordinate and blend weight for one output index under the
/// align-corners-false convention.
#[inline]
fn source_index(out_idx: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((out_idx as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = if i0 == in_len - 1 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

/// Trilinear resize of every (n, c) volume to `target` spatial dims.
pub fn trilinear_upsample<T: Element>(src: &Tensor<T>, target: [usize; 3]) -> Result<Tensor<T>> {
    let s = src.shape();
    if target.iter().any(|&t| t == 0) {
        return Err(Error::InvalidArgument(format!(
            "trilinear_upsample target dims must be >= 1, got {target:?}"
        )));
    }
    if s.n * s.c > 0 && s.spatial().iter().any(|&v| v == 0) {
        return Err(Error::InvalidArgument(format!(
            "trilinear_upsample source spatial dims must be >= 1, got {s}"
        )));
    }
    let out_shape = s.with_spatial(target);
    let mut out = Tensor::zeros(out_shape);
    let [td, th, tw] = target;
    let zs: Vec<_> = (0..td).map(|i| source_index(i, s.d, td)).collect();
    let ys: Vec<_> = (0..th).map(|i| source_index(i, s.h, th)).collect();
    let xs: Vec<_> = (0..tw).map(|i| source_index(i, s.w, tw)).collect();
    for n in 0..s.n {
        for c in 0..s.c {
            let vol = src.channel(n, c);
            let dst = out.channel_mut(n, c);
            let at = |d: usize, h: usize, w: usize| vol[(d * s.h + h) * s.w + w].as_f64();
            let mut o = 0;
            for &(z0, z1, fz) in &zs {
                for &(y0, y1, fy) in &ys {
                    for &(x0, x1, fx) in &xs {
                        let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x1) * fx;
                        let c01 = at(z0, y1, x0) * (1.0 - fx) + at(z0, y1, x1) * fx;
                        let c10 = at(z1, y0, x0) * (1.0 - fx) + at(z1, y0, x1) * fx;
                        let c11 = at(z1, y1, x0) * (1.0 - fx) + at(z1, y1, x1) * fx;
                        let c0 = c00 * (1.0 - fy) + c01 * fy;
                        let c1 = c10 * (1.0 - fy) + c11 * fy;
                        dst[o] = T::from_f64(c0 * (1.0 - fz) + c1 * fz);
                        o += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}
