//! Dense labeled tensors, the two contraction patterns the FNO needs, and the
//! `DTNS` binary format.
//!
//! Layout is row-major with the last dimension fastest. Every tensor carries
//! an ordered list of `(DimLabel, extent)` pairs; labels are unique within a
//! tensor and spectral labels (`kx`..`kt`) only appear on complex tensors.

use std::fmt;
use std::io::{Read, Write};
use std::ops::{Add, AddAssign, Mul, Sub};

use num_complex::Complex;
use num_traits::{Float, FromPrimitive, NumAssign};
use rustfft::{FftNum, FftPlanner};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("duplicate dimension label `{0}`")]
    DuplicateLabel(DimLabel),
    #[error("spectral label `{0}` on a real tensor")]
    SpectralLabelOnReal(DimLabel),
    #[error("extent of `{0}` must be positive")]
    ZeroExtent(DimLabel),
    #[error("data length {got} does not match shape volume {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch { expected: DType, found: DType },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, read {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Dimension label. `Co` marks the output-channel axis of channel-mixing
/// weights so that weight tensors keep unique labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DimLabel {
    B,
    C,
    X,
    Y,
    Z,
    T,
    Kx,
    Ky,
    Kz,
    Kt,
    Co,
}

impl DimLabel {
    pub const SPATIAL: [DimLabel; 4] = [DimLabel::X, DimLabel::Y, DimLabel::Z, DimLabel::T];
    pub const SPECTRAL: [DimLabel; 4] = [DimLabel::Kx, DimLabel::Ky, DimLabel::Kz, DimLabel::Kt];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        use DimLabel::*;
        Some(match code {
            0 => B,
            1 => C,
            2 => X,
            3 => Y,
            4 => Z,
            5 => T,
            6 => Kx,
            7 => Ky,
            8 => Kz,
            9 => Kt,
            10 => Co,
            _ => return None,
        })
    }

    pub fn is_spectral(self) -> bool {
        matches!(self, DimLabel::Kx | DimLabel::Ky | DimLabel::Kz | DimLabel::Kt)
    }

    /// `x -> kx` etc. Returns `None` for labels without a Fourier dual.
    pub fn to_spectral(self) -> Option<Self> {
        match self {
            DimLabel::X => Some(DimLabel::Kx),
            DimLabel::Y => Some(DimLabel::Ky),
            DimLabel::Z => Some(DimLabel::Kz),
            DimLabel::T => Some(DimLabel::Kt),
            _ => None,
        }
    }

    pub fn to_spatial(self) -> Option<Self> {
        match self {
            DimLabel::Kx => Some(DimLabel::X),
            DimLabel::Ky => Some(DimLabel::Y),
            DimLabel::Kz => Some(DimLabel::Z),
            DimLabel::Kt => Some(DimLabel::T),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DimLabel::B => "b",
            DimLabel::C => "c",
            DimLabel::X => "x",
            DimLabel::Y => "y",
            DimLabel::Z => "z",
            DimLabel::T => "t",
            DimLabel::Kx => "kx",
            DimLabel::Ky => "ky",
            DimLabel::Kz => "kz",
            DimLabel::Kt => "kt",
            DimLabel::Co => "co",
        }
    }
}

impl fmt::Display for DimLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    Real32,
    Real64,
    Complex64,
    Complex128,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::Real32 => 0,
            DType::Real64 => 1,
            DType::Complex64 => 2,
            DType::Complex128 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::Real32),
            1 => Ok(DType::Real64),
            2 => Ok(DType::Complex64),
            3 => Ok(DType::Complex128),
            other => Err(TensorError::UnknownDtype(other)),
        }
    }

    pub fn is_complex(self) -> bool {
        matches!(self, DType::Complex64 | DType::Complex128)
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::Real32 => 4,
            DType::Real64 | DType::Complex64 => 8,
            DType::Complex128 => 16,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::Real32 => "real32",
            DType::Real64 => "real64",
            DType::Complex64 => "complex64",
            DType::Complex128 => "complex128",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar types a [`Tensor`] can hold.
pub trait Element:
    Copy
    + Default
    + PartialEq
    + fmt::Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + AddAssign
{
    const DTYPE: DType;

    fn zeroed() -> Self {
        Self::default()
    }
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes` holds exactly `DTYPE.size_bytes()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
    /// Complex conjugate; identity for reals.
    fn conj(self) -> Self;
    /// Real part of `conj(self) * other`, the real inner-product kernel.
    fn dot_re(self, other: Self) -> f64;
    fn wrap_dense(t: Tensor<Self>) -> DenseTensor;
    fn unwrap_dense(t: DenseTensor) -> Result<Tensor<Self>>;
}

/// Real floating-point scalars the FNO can be instantiated with.
pub trait Real: Element + Float + FromPrimitive + FftNum + NumAssign + std::iter::Sum {
    const COMPLEX_DTYPE: DType;

    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }
    fn as_f64(self) -> f64;
    fn wrap_complex(t: Tensor<Complex<Self>>) -> DenseTensor;
    fn unwrap_complex(t: DenseTensor) -> Result<Tensor<Complex<Self>>>;
    /// Runs `f` with this thread's cached FFT planner.
    fn with_planner<R>(f: impl FnOnce(&mut FftPlanner<Self>) -> R) -> R;
}

thread_local! {
    static PLANNER_F32: std::cell::RefCell<FftPlanner<f32>> = std::cell::RefCell::new(FftPlanner::new());
    static PLANNER_F64: std::cell::RefCell<FftPlanner<f64>> = std::cell::RefCell::new(FftPlanner::new());
}

impl Element for f32 {
    const DTYPE: DType = DType::Real32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    fn conj(self) -> Self {
        self
    }
    fn dot_re(self, other: Self) -> f64 {
        self as f64 * other as f64
    }
    fn wrap_dense(t: Tensor<Self>) -> DenseTensor {
        DenseTensor::Real32(t)
    }
    fn unwrap_dense(t: DenseTensor) -> Result<Tensor<Self>> {
        match t {
            DenseTensor::Real32(t) => Ok(t),
            other => Err(TensorError::DtypeMismatch { expected: Self::DTYPE, found: other.dtype() }),
        }
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::Real64;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    fn conj(self) -> Self {
        self
    }
    fn dot_re(self, other: Self) -> f64 {
        self * other
    }
    fn wrap_dense(t: Tensor<Self>) -> DenseTensor {
        DenseTensor::Real64(t)
    }
    fn unwrap_dense(t: DenseTensor) -> Result<Tensor<Self>> {
        match t {
            DenseTensor::Real64(t) => Ok(t),
            other => Err(TensorError::DtypeMismatch { expected: Self::DTYPE, found: other.dtype() }),
        }
    }
}

impl Real for f32 {
    const COMPLEX_DTYPE: DType = DType::Complex64;
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn wrap_complex(t: Tensor<Complex<Self>>) -> DenseTensor {
        DenseTensor::Complex64(t)
    }
    fn unwrap_complex(t: DenseTensor) -> Result<Tensor<Complex<Self>>> {
        match t {
            DenseTensor::Complex64(t) => Ok(t),
            other => Err(TensorError::DtypeMismatch { expected: Self::COMPLEX_DTYPE, found: other.dtype() }),
        }
    }
    fn with_planner<R>(f: impl FnOnce(&mut FftPlanner<Self>) -> R) -> R {
        PLANNER_F32.with(|p| f(&mut p.borrow_mut()))
    }
}

impl Real for f64 {
    const COMPLEX_DTYPE: DType = DType::Complex128;
    fn as_f64(self) -> f64 {
        self
    }
    fn wrap_complex(t: Tensor<Complex<Self>>) -> DenseTensor {
        DenseTensor::Complex128(t)
    }
    fn unwrap_complex(t: DenseTensor) -> Result<Tensor<Complex<Self>>> {
        match t {
            DenseTensor::Complex128(t) => Ok(t),
            other => Err(TensorError::DtypeMismatch { expected: Self::COMPLEX_DTYPE, found: other.dtype() }),
        }
    }
    fn with_planner<R>(f: impl FnOnce(&mut FftPlanner<Self>) -> R) -> R {
        PLANNER_F64.with(|p| f(&mut p.borrow_mut()))
    }
}

impl<T: Real> Element for Complex<T> {
    const DTYPE: DType = T::COMPLEX_DTYPE;
    fn write_le(self, out: &mut Vec<u8>) {
        self.re.write_le(out);
        self.im.write_le(out);
    }
    fn read_le(bytes: &[u8]) -> Self {
        let half = bytes.len() / 2;
        Complex::new(T::read_le(&bytes[..half]), T::read_le(&bytes[half..]))
    }
    fn conj(self) -> Self {
        Complex::conj(&self)
    }
    fn dot_re(self, other: Self) -> f64 {
        self.re.as_f64() * other.re.as_f64() + self.im.as_f64() * other.im.as_f64()
    }
    fn wrap_dense(t: Tensor<Self>) -> DenseTensor {
        T::wrap_complex(t)
    }
    fn unwrap_dense(t: DenseTensor) -> Result<Tensor<Self>> {
        T::unwrap_complex(t)
    }
}

/// Ordered `(label, extent)` list.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<(DimLabel, usize)>);

impl Shape {
    pub fn new(dims: impl IntoIterator<Item = (DimLabel, usize)>) -> Result<Self> {
        let dims: Vec<_> = dims.into_iter().collect();
        for (i, &(label, extent)) in dims.iter().enumerate() {
            if extent == 0 {
                return Err(TensorError::ZeroExtent(label));
            }
            if dims[..i].iter().any(|&(l, _)| l == label) {
                return Err(TensorError::DuplicateLabel(label));
            }
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[(DimLabel, usize)] {
        &self.0
    }

    pub fn ndim(&self) -> usize {
        self.0.len()
    }

    pub fn volume(&self) -> usize {
        self.0.iter().map(|&(_, n)| n).product()
    }

    pub fn extents(&self) -> Vec<usize> {
        self.0.iter().map(|&(_, n)| n).collect()
    }

    pub fn labels(&self) -> Vec<DimLabel> {
        self.0.iter().map(|&(l, _)| l).collect()
    }

    pub fn axis(&self, label: DimLabel) -> Option<usize> {
        self.0.iter().position(|&(l, _)| l == label)
    }

    pub fn extent(&self, label: DimLabel) -> Option<usize> {
        self.axis(label).map(|a| self.0[a].1)
    }

    pub fn require_axis(&self, label: DimLabel) -> Result<usize> {
        self.axis(label)
            .ok_or_else(|| TensorError::DimensionMismatch(format!("no `{label}` dimension in {self}")))
    }

    /// Row-major strides (last axis has stride 1).
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for a in (0..self.0.len().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * self.0[a + 1].1;
        }
        strides
    }

    pub fn with_extent(&self, axis: usize, extent: usize) -> Shape {
        let mut dims = self.0.clone();
        dims[axis].1 = extent;
        Shape(dims)
    }

    pub fn with_label(&self, axis: usize, label: DimLabel) -> Result<Shape> {
        let mut dims = self.0.clone();
        dims[axis].0 = label;
        Shape::new(dims)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, (l, n)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{l}:{n}")?;
        }
        f.write_str("]")
    }
}

/// Immutable dense tensor with a statically known element type.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Shape, data: Vec<E>) -> Result<Self> {
        if data.len() != shape.volume() {
            return Err(TensorError::LengthMismatch { expected: shape.volume(), got: data.len() });
        }
        if !E::DTYPE.is_complex() {
            if let Some(&(l, _)) = shape.dims().iter().find(|(l, _)| l.is_spectral()) {
                return Err(TensorError::SpectralLabelOnReal(l));
            }
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_dims(dims: &[(DimLabel, usize)], data: Vec<E>) -> Result<Self> {
        Tensor::new(Shape::new(dims.iter().copied())?, data)
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        let n = shape.volume();
        Tensor::new(shape, vec![E::zeroed(); n])
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> E) -> Result<Self> {
        let data = (0..shape.volume()).map(&mut f).collect();
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map<F: Element>(&self, f: impl Fn(E) -> F) -> Result<Tensor<F>> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor<E>, f: impl Fn(E, E) -> E) -> Result<Tensor<E>> {
        if self.shape != other.shape {
            return Err(TensorError::DimensionMismatch(format!("{} vs {}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn relabel(&self, axis: usize, label: DimLabel) -> Result<Tensor<E>> {
        Tensor::new(self.shape.with_label(axis, label)?, self.data.clone())
    }

    /// Real inner product `Re Σ conj(a)·b`.
    pub fn dot(&self, other: &Tensor<E>) -> Result<f64> {
        if self.shape.extents() != other.shape.extents() {
            return Err(TensorError::DimensionMismatch(format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(compensated_sum(self.data.iter().zip(&other.data).map(|(&a, &b)| a.dot_re(b))))
    }

    pub fn norm_sq(&self) -> f64 {
        compensated_sum(self.data.iter().map(|&v| v.dot_re(v)))
    }

    /// Copies the tensor with axes reordered; `perm[i]` is the source axis of
    /// output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<E>> {
        let nd = self.shape.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::DimensionMismatch(format!("bad permutation {perm:?}")));
        }
        let src_strides = self.shape.strides();
        let out_shape = Shape::new(perm.iter().map(|&p| self.shape.dims()[p]))?;
        let out_ext = out_shape.extents();
        let mut idx = vec![0usize; nd];
        let mut data = Vec::with_capacity(self.data.len());
        for _ in 0..self.data.len() {
            let off: usize = idx.iter().zip(perm).map(|(&i, &p)| i * src_strides[p]).sum();
            data.push(self.data[off]);
            for a in (0..nd).rev() {
                idx[a] += 1;
                if idx[a] < out_ext[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Tensor::new(out_shape, data)
    }

    pub(crate) fn from_parts_unchecked(shape: Shape, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.volume(), data.len());
        Tensor { shape, data }
    }
}

impl<T: Real> Tensor<T> {
    pub fn to_complex(&self) -> Tensor<Complex<T>> {
        Tensor::from_parts_unchecked(
            self.shape.clone(),
            self.data.iter().map(|&v| Complex::new(v, T::zero())).collect(),
        )
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        Tensor::from_parts_unchecked(self.shape.clone(), self.data.iter().map(|&v| v * s).collect())
    }
}

impl<T: Real> Tensor<Complex<T>> {
    /// Real part. Fails if any spectral label is present.
    pub fn re(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|v| v.re).collect())
    }

    pub fn scale(&self, s: T) -> Tensor<Complex<T>> {
        Tensor::from_parts_unchecked(self.shape.clone(), self.data.iter().map(|&v| v * s).collect())
    }
}

fn check_channel(x: &Shape, ci: usize) -> Result<usize> {
    let axis = x.require_axis(DimLabel::C)?;
    let n = x.dims()[axis].1;
    if n != ci {
        return Err(TensorError::DimensionMismatch(format!(
            "input channel extent {n} does not match weight input channels {ci}"
        )));
    }
    Ok(axis)
}

fn weight_channels(w: &Shape) -> Result<(usize, usize)> {
    match w.dims() {
        [(DimLabel::C, ci), (DimLabel::Co, co), ..] => Ok((*ci, *co)),
        _ => Err(TensorError::DimensionMismatch(format!("weights must lead with [c, co], got {w}"))),
    }
}

/// `Y[.., co, ..] = Σ_ci X[.., ci, ..] · W[ci, co]`; every non-channel axis is
/// carried element-wise. `W` is labeled `[c, co]`.
pub fn einsum_channel_mix<E: Element>(x: &Tensor<E>, w: &Tensor<E>) -> Result<Tensor<E>> {
    let (ci, co) = weight_channels(w.shape())?;
    if w.shape().ndim() != 2 {
        return Err(TensorError::DimensionMismatch(format!("channel-mix weights must be 2-D, got {}", w.shape())));
    }
    let axis = check_channel(x.shape(), ci)?;
    let ext = x.shape().extents();
    let outer: usize = ext[..axis].iter().product();
    let inner: usize = ext[axis + 1..].iter().product();
    let wd = w.data();
    let xd = x.data();
    let mut out = vec![E::zeroed(); outer * co * inner];
    for o in 0..outer {
        let xo = &xd[o * ci * inner..(o + 1) * ci * inner];
        let yo = &mut out[o * co * inner..(o + 1) * co * inner];
        for i in 0..ci {
            let xrow = &xo[i * inner..(i + 1) * inner];
            for j in 0..co {
                let wij = wd[i * co + j];
                let yrow = &mut yo[j * inner..(j + 1) * inner];
                for (y, &xv) in yrow.iter_mut().zip(xrow) {
                    *y += xv * wij;
                }
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(x.shape().with_extent(axis, co), out))
}

/// `Y[b, co, k] = Σ_ci X[b, ci, k] · W[ci, co, k]`, element-wise over the
/// trailing axes `k`. `X` is `[b, c, k..]` and `W` is `[c, co, k..]` with the
/// same trailing labels and extents.
pub fn einsum_spectral<E: Element>(x: &Tensor<E>, w: &Tensor<E>) -> Result<Tensor<E>> {
    let (ci, co) = weight_channels(w.shape())?;
    let (b, xc) = match x.shape().dims() {
        [(DimLabel::B, b), (DimLabel::C, c), ..] => (*b, *c),
        _ => {
            return Err(TensorError::DimensionMismatch(format!(
                "spectral input must lead with [b, c], got {}",
                x.shape()
            )))
        }
    };
    if xc != ci {
        return Err(TensorError::DimensionMismatch(format!(
            "input channel extent {xc} does not match weight input channels {ci}"
        )));
    }
    if x.shape().dims()[2..] != w.shape().dims()[2..] {
        return Err(TensorError::DimensionMismatch(format!(
            "spectral extents differ: {} vs {}",
            x.shape(),
            w.shape()
        )));
    }
    let k: usize = x.shape().dims()[2..].iter().map(|&(_, n)| n).product();
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![E::zeroed(); b * co * k];
    for bi in 0..b {
        for i in 0..ci {
            let xrow = &xd[(bi * ci + i) * k..(bi * ci + i + 1) * k];
            for j in 0..co {
                let wrow = &wd[(i * co + j) * k..(i * co + j + 1) * k];
                let yrow = &mut out[(bi * co + j) * k..(bi * co + j + 1) * k];
                for ((y, &xv), &wv) in yrow.iter_mut().zip(xrow).zip(wrow) {
                    *y += xv * wv;
                }
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(x.shape().with_extent(1, co), out))
}

/// Copies the elements of `region` (one range per axis) out of a row-major
/// buffer with extents `ext`, in row-major region order.
pub(crate) fn extract_region<E: Copy>(data: &[E], ext: &[usize], region: &[crate::partition::BlockRange]) -> Vec<E> {
    let mut out = Vec::with_capacity(crate::partition::region_volume(region));
    for_each_region_row(ext, region, |off, len| out.extend_from_slice(&data[off..off + len]));
    out
}

/// Inverse of [`extract_region`]: scatters `values` into `region` of `data`.
pub(crate) fn insert_region<E: Copy>(data: &mut [E], ext: &[usize], region: &[crate::partition::BlockRange], values: &[E]) {
    let mut pos = 0;
    for_each_region_row(ext, region, |off, len| {
        data[off..off + len].copy_from_slice(&values[pos..pos + len]);
        pos += len;
    });
    debug_assert_eq!(pos, values.len());
}

/// Calls `f(offset, len)` for each contiguous innermost row of `region`.
fn for_each_region_row(ext: &[usize], region: &[crate::partition::BlockRange], mut f: impl FnMut(usize, usize)) {
    let nd = ext.len();
    if nd == 0 {
        f(0, 1);
        return;
    }
    if region.iter().any(|r| r.is_empty()) {
        return;
    }
    let mut strides = vec![1usize; nd];
    for a in (0..nd - 1).rev() {
        strides[a] = strides[a + 1] * ext[a + 1];
    }
    let row = region[nd - 1];
    let mut idx: Vec<usize> = region[..nd - 1].iter().map(|r| r.start).collect();
    loop {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum::<usize>() + row.start;
        f(off, row.len());
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < region[ax].stop {
                break;
            }
            idx[ax] = region[ax].start;
        }
    }
}

/// A tensor whose dtype is only known at runtime, as read from a `DTNS` stream.
#[derive(Debug, Clone, PartialEq)]
pub enum DenseTensor {
    Real32(Tensor<f32>),
    Real64(Tensor<f64>),
    Complex64(Tensor<Complex<f32>>),
    Complex128(Tensor<Complex<f64>>),
}

impl DenseTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DenseTensor::Real32(_) => DType::Real32,
            DenseTensor::Real64(_) => DType::Real64,
            DenseTensor::Complex64(_) => DType::Complex64,
            DenseTensor::Complex128(_) => DType::Complex128,
        }
    }

    pub fn shape(&self) -> &Shape {
        match self {
            DenseTensor::Real32(t) => t.shape(),
            DenseTensor::Real64(t) => t.shape(),
            DenseTensor::Complex64(t) => t.shape(),
            DenseTensor::Complex128(t) => t.shape(),
        }
    }

    /// Channel mix on runtime-typed operands; mixed dtypes are rejected.
    pub fn channel_mix(&self, w: &DenseTensor) -> Result<DenseTensor> {
        use DenseTensor::*;
        Ok(match (self, w) {
            (Real32(x), Real32(w)) => Real32(einsum_channel_mix(x, w)?),
            (Real64(x), Real64(w)) => Real64(einsum_channel_mix(x, w)?),
            (Complex64(x), Complex64(w)) => Complex64(einsum_channel_mix(x, w)?),
            (Complex128(x), Complex128(w)) => Complex128(einsum_channel_mix(x, w)?),
            _ => return Err(TensorError::DtypeMismatch { expected: self.dtype(), found: w.dtype() }),
        })
    }

    pub fn spectral_mix(&self, w: &DenseTensor) -> Result<DenseTensor> {
        use DenseTensor::*;
        Ok(match (self, w) {
            (Real32(x), Real32(w)) => Real32(einsum_spectral(x, w)?),
            (Real64(x), Real64(w)) => Real64(einsum_spectral(x, w)?),
            (Complex64(x), Complex64(w)) => Complex64(einsum_spectral(x, w)?),
            (Complex128(x), Complex128(w)) => Complex128(einsum_spectral(x, w)?),
            _ => return Err(TensorError::DtypeMismatch { expected: self.dtype(), found: w.dtype() }),
        })
    }
}

/// Conversion between a typed tensor and the runtime-typed [`DenseTensor`].
pub trait Dense: Sized {
    fn into_dense(self) -> DenseTensor;
    fn from_dense(t: DenseTensor) -> Result<Self>;
}

impl<E: Element> Dense for Tensor<E> {
    fn into_dense(self) -> DenseTensor {
        E::wrap_dense(self)
    }
    fn from_dense(t: DenseTensor) -> Result<Self> {
        E::unwrap_dense(t)
    }
}

pub const MAGIC: &[u8; 4] = b"DTNS";
pub const FORMAT_VERSION: u8 = 1;

/// Number of bytes `tensor_write` emits for a tensor of this shape and dtype.
pub fn encoded_len(shape: &Shape, dtype: DType) -> usize {
    4 + 3 + 9 * shape.ndim() + shape.volume() * dtype.size_bytes()
}

pub(crate) fn encode_elements<E: Element>(data: &[E], out: &mut Vec<u8>) {
    out.reserve(data.len() * E::DTYPE.size_bytes());
    for &v in data {
        v.write_le(out);
    }
}

pub(crate) fn decode_elements<E: Element>(bytes: &[u8]) -> Vec<E> {
    bytes.chunks_exact(E::DTYPE.size_bytes()).map(E::read_le).collect()
}

fn encode_typed<E: Element>(t: &Tensor<E>) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(t.shape(), E::DTYPE));
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.push(E::DTYPE.code());
    out.push(t.shape().ndim() as u8);
    for &(label, extent) in t.shape().dims() {
        out.push(label.code());
        out.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    encode_elements(t.data(), &mut out);
    out
}

pub fn encode_tensor<E: Element>(t: &Tensor<E>) -> Vec<u8>
where
    Tensor<E>: Dense,
{
    encode_typed(t)
}

/// Writes `t` in `DTNS` layout and returns the number of bytes written.
pub fn tensor_write<W: Write>(t: &DenseTensor, sink: &mut W) -> Result<usize> {
    let bytes = match t {
        DenseTensor::Real32(t) => encode_typed(t),
        DenseTensor::Real64(t) => encode_typed(t),
        DenseTensor::Complex64(t) => encode_typed(t),
        DenseTensor::Complex128(t) => encode_typed(t),
    };
    sink.write_all(&bytes)?;
    Ok(bytes.len())
}

fn read_header_bytes<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::MalformedHeader(format!("stream ended inside {what}")),
        _ => TensorError::Io(e),
    })
}

pub fn tensor_read<R: Read>(source: &mut R) -> Result<DenseTensor> {
    let mut fixed = [0u8; 7];
    read_header_bytes(source, &mut fixed, "fixed header")?;
    if &fixed[..4] != MAGIC {
        return Err(TensorError::MalformedHeader(format!("bad magic {:?}", &fixed[..4])));
    }
    if fixed[4] != FORMAT_VERSION {
        return Err(TensorError::MalformedHeader(format!("unsupported version {}", fixed[4])));
    }
    let dtype = DType::from_code(fixed[5])?;
    let ndims = fixed[6] as usize;
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        let mut d = [0u8; 9];
        read_header_bytes(source, &mut d, "dimension header")?;
        let label = DimLabel::from_code(d[0])
            .ok_or_else(|| TensorError::MalformedHeader(format!("unknown label code {}", d[0])))?;
        let extent = u64::from_le_bytes(d[1..].try_into().expect("8 bytes"));
        let extent = usize::try_from(extent)
            .map_err(|_| TensorError::MalformedHeader(format!("extent {extent} too large")))?;
        dims.push((label, extent));
    }
    let shape = Shape::new(dims).map_err(|e| TensorError::MalformedHeader(e.to_string()))?;
    let expected = shape
        .volume()
        .checked_mul(dtype.size_bytes())
        .ok_or_else(|| TensorError::MalformedHeader("payload size overflows".into()))?;
    let mut payload = Vec::new();
    source.take(expected as u64).read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(TensorError::TruncatedPayload { expected, got: payload.len() });
    }
    Ok(match dtype {
        DType::Real32 => DenseTensor::Real32(Tensor::new(shape, decode_elements(&payload))?),
        DType::Real64 => DenseTensor::Real64(Tensor::new(shape, decode_elements(&payload))?),
        DType::Complex64 => DenseTensor::Complex64(Tensor::new(shape, decode_elements(&payload))?),
        DType::Complex128 => DenseTensor::Complex128(Tensor::new(shape, decode_elements(&payload))?),
    })
}

pub fn decode_tensor<E: Element>(bytes: &[u8]) -> Result<Tensor<E>>
where
    Tensor<E>: Dense,
{
    let mut cursor = bytes;
    Tensor::<E>::from_dense(tensor_read(&mut cursor)?)
}

/// Neumaier summation; long reductions otherwise lose digits to cancellation.
fn compensated_sum(terms: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for t in terms {
        let s = sum + t;
        c += if sum.abs() >= t.abs() { (sum - s) + t } else { (t - s) + sum };
        sum = s;
    }
    sum + c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn compensated_sum_keeps_small_terms() {
        let terms = [1.0, 1e100, 1.0, -1e100];
        assert_eq!(compensated_sum(terms.into_iter()), 2.0);
    }

    fn random_real(dims: &[(DimLabel, usize)], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let shape = Shape::new(dims.iter().copied()).unwrap();
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn random_complex(dims: &[(DimLabel, usize)], rng: &mut ChaCha8Rng) -> Tensor<Complex<f64>> {
        let shape = Shape::new(dims.iter().copied()).unwrap();
        Tensor::from_fn(shape, |_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).unwrap()
    }

    use DimLabel::*;

    #[test]
    fn identity_mix_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_real(&[(B, 2), (C, 2), (X, 3)], &mut rng);
        let w = Tensor::from_dims(&[(C, 2), (Co, 2)], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(einsum_channel_mix(&x, &w).unwrap(), x);
    }

    #[test]
    fn scalar_mix_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_real(&[(B, 2), (C, 1), (X, 4)], &mut rng);
        let w = Tensor::from_dims(&[(C, 1), (Co, 1)], vec![2.0]).unwrap();
        let y = einsum_channel_mix(&x, &w).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn channel_mix_matches_loop_nest() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_real(&[(B, 2), (C, 3), (X, 4), (Y, 4)], &mut rng);
        let w = random_real(&[(C, 3), (Co, 5)], &mut rng);
        let y = einsum_channel_mix(&x, &w).unwrap();
        assert_eq!(y.shape().extents(), vec![2, 5, 4, 4]);
        let (xd, wd) = (x.data(), w.data());
        for b in 0..2 {
            for o in 0..5 {
                for p in 0..16 {
                    let mut acc = 0.0;
                    for i in 0..3 {
                        acc += xd[(b * 3 + i) * 16 + p] * wd[i * 5 + o];
                    }
                    assert!((y.data()[(b * 5 + o) * 16 + p] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f64>::zeros(Shape::new([(B, 1), (C, 3)]).unwrap()).unwrap();
        let w = Tensor::<f64>::zeros(Shape::new([(C, 2), (Co, 2)]).unwrap()).unwrap();
        assert!(matches!(einsum_channel_mix(&x, &w), Err(TensorError::DimensionMismatch(_))));
        let xs = Tensor::<f64>::zeros(Shape::new([(B, 1), (C, 3), (X, 2)]).unwrap()).unwrap();
        let ws = Tensor::<f64>::zeros(Shape::new([(C, 3), (Co, 2), (X, 3)]).unwrap()).unwrap();
        assert!(matches!(einsum_spectral(&xs, &ws), Err(TensorError::DimensionMismatch(_))));
    }

    #[test]
    fn mixed_dtypes_are_rejected() {
        let x = DenseTensor::Real64(Tensor::zeros(Shape::new([(B, 1), (C, 1)]).unwrap()).unwrap());
        let w = DenseTensor::Real32(Tensor::zeros(Shape::new([(C, 1), (Co, 1)]).unwrap()).unwrap());
        assert!(matches!(x.channel_mix(&w), Err(TensorError::DtypeMismatch { .. })));
    }

    const SPEC: [(DimLabel, usize); 4] = [(Kx, 4), (Ky, 4), (Kz, 4), (Kt, 3)];

    fn spectral_dims(lead: [(DimLabel, usize); 2]) -> Vec<(DimLabel, usize)> {
        lead.into_iter().chain(SPEC).collect()
    }

    #[test]
    fn spectral_unit_weights_relabel_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_complex(&spectral_dims([(B, 1), (C, 1)]), &mut rng);
        let w = Tensor::from_fn(Shape::new(spectral_dims([(C, 1), (Co, 1)])).unwrap(), |_| Complex::new(1.0, 0.0))
            .unwrap();
        assert_eq!(einsum_spectral(&x, &w).unwrap(), x);
        let zero = Tensor::zeros(Shape::new(spectral_dims([(C, 1), (Co, 3)])).unwrap()).unwrap();
        let y = einsum_spectral(&x, &zero).unwrap();
        assert!(y.data().iter().all(|v| *v == Complex::new(0.0, 0.0)));
    }

    #[test]
    fn spectral_matches_loop_nest() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_complex(&spectral_dims([(B, 1), (C, 2)]), &mut rng);
        let w = random_complex(&spectral_dims([(C, 2), (Co, 2)]), &mut rng);
        let y = einsum_spectral(&x, &w).unwrap();
        let k = 4 * 4 * 4 * 3;
        for o in 0..2 {
            for p in 0..k {
                let mut acc = Complex::new(0.0, 0.0);
                for i in 0..2 {
                    acc += x.data()[i * k + p] * w.data()[(i * 2 + o) * k + p];
                }
                let got = y.data()[o * k + p];
                assert!((got - acc).norm() <= 1e-12 * acc.norm().max(1.0));
            }
        }
    }

    #[test]
    fn spectral_with_unit_extents_reduces_to_channel_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ones = [(Kx, 1), (Ky, 1), (Kz, 1), (Kt, 1)];
        let x = random_complex(&[(B, 3), (C, 2), ones[0], ones[1], ones[2], ones[3]], &mut rng);
        let w = random_complex(&[(C, 2), (Co, 4), ones[0], ones[1], ones[2], ones[3]], &mut rng);
        let spec = einsum_spectral(&x, &w).unwrap();
        let x2 = Tensor::from_dims(&[(B, 3), (C, 2)], x.data().to_vec()).unwrap();
        let w2 = Tensor::from_dims(&[(C, 2), (Co, 4)], w.data().to_vec()).unwrap();
        let mix = einsum_channel_mix(&x2, &w2).unwrap();
        assert_eq!(spec.data(), mix.data());
    }

    #[test]
    fn both_contractions_are_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = 0.37;
        let dims = spectral_dims([(B, 1), (C, 2)]);
        let (x1, x2) = (random_complex(&dims, &mut rng), random_complex(&dims, &mut rng));
        let w = random_complex(&spectral_dims([(C, 2), (Co, 3)]), &mut rng);
        let combo = x1.zip_map(&x2, |p, q| p * a + q).unwrap();
        let lhs = einsum_spectral(&combo, &w).unwrap();
        let (y1, y2) = (einsum_spectral(&x1, &w).unwrap(), einsum_spectral(&x2, &w).unwrap());
        for ((l, p), q) in lhs.data().iter().zip(y1.data()).zip(y2.data()) {
            assert!((l - (p * a + q)).norm() < 1e-12);
        }
        let w1 = random_real(&[(C, 2), (Co, 3)], &mut rng);
        let w2 = random_real(&[(C, 2), (Co, 3)], &mut rng);
        let x = random_real(&[(B, 2), (C, 2), (X, 5)], &mut rng);
        let wc = w1.zip_map(&w2, |p, q| p * a + q).unwrap();
        let lhs = einsum_channel_mix(&x, &wc).unwrap();
        let (y1, y2) = (einsum_channel_mix(&x, &w1).unwrap(), einsum_channel_mix(&x, &w2).unwrap());
        for ((l, p), q) in lhs.data().iter().zip(y1.data()).zip(y2.data()) {
            assert!((l - (p * a + q)).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_real64() {
        let t = Tensor::from_dims(&[(X, 2), (Y, 3)], vec![1.0, -2.0, 3.5, 0.0, f64::MAX, -0.0]).unwrap();
        let mut buf = Vec::new();
        let n = tensor_write(&t.clone().into_dense(), &mut buf).unwrap();
        assert_eq!(n, buf.len());
        let back = Tensor::<f64>::from_dense(tensor_read(&mut buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn complex128_encoded_size_follows_layout() {
        let t = Tensor::<Complex<f64>>::zeros(Shape::new([(Kx, 4), (Ky, 4)]).unwrap()).unwrap();
        let mut buf = Vec::new();
        let n = tensor_write(&t.into_dense(), &mut buf).unwrap();
        // magic 4 + version 1 + dtype 1 + ndims 1, 9 bytes per dim, 16 bytes per element
        assert_eq!(n, 7 + 2 * 9 + 16 * 16);
        assert_eq!(&buf[..7], &[b'D', b'T', b'N', b'S', 1, 3, 2]);
        assert_eq!(&buf[7..16], &[6, 4, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn empty_stream_is_malformed() {
        let empty: &[u8] = &[];
        assert!(matches!(tensor_read(&mut &*empty), Err(TensorError::MalformedHeader(_))));
    }

    #[test]
    fn header_errors() {
        let t = Tensor::<f32>::zeros(Shape::new([(X, 3)]).unwrap()).unwrap();
        let good = encode_tensor(&t);
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(tensor_read(&mut bad_magic.as_slice()), Err(TensorError::MalformedHeader(_))));
        let mut bad_dtype = good.clone();
        bad_dtype[5] = 9;
        assert!(matches!(tensor_read(&mut bad_dtype.as_slice()), Err(TensorError::UnknownDtype(9))));
        let short = &good[..good.len() - 1];
        assert!(matches!(
            tensor_read(&mut &*short),
            Err(TensorError::TruncatedPayload { expected: 12, got: 11 })
        ));
        let mut bad_label = good.clone();
        bad_label[7] = 200;
        assert!(matches!(tensor_read(&mut bad_label.as_slice()), Err(TensorError::MalformedHeader(_))));
    }

    #[test]
    fn construction_invariants() {
        assert!(matches!(Shape::new([(X, 2), (X, 3)]), Err(TensorError::DuplicateLabel(X))));
        assert!(matches!(
            Tensor::<f64>::from_dims(&[(Kx, 2)], vec![0.0; 2]),
            Err(TensorError::SpectralLabelOnReal(Kx))
        ));
        assert!(matches!(
            Tensor::<f64>::from_dims(&[(X, 2)], vec![0.0; 3]),
            Err(TensorError::LengthMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn permute_transposes() {
        let t = Tensor::from_dims(&[(X, 2), (Y, 3)], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape().labels(), vec![Y, X]);
        assert_eq!(p.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn arb_shape() -> impl Strategy<Value = Vec<(DimLabel, usize)>> {
            prop::collection::vec(1usize..4, 0..4)
                .prop_map(|ext| [X, Y, Z, T].into_iter().zip(ext).collect::<Vec<_>>())
        }

        proptest! {
            #[test]
            fn round_trip_every_dtype(dims in arb_shape(), seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let shape = Shape::new(dims.iter().copied()).unwrap();
                let spec_shape = Shape::new(dims.iter().map(|&(l, n)| (l.to_spectral().unwrap(), n))).unwrap();
                let tensors = vec![
                    Tensor::<f32>::from_fn(shape.clone(), |_| rng.gen()).unwrap().into_dense(),
                    Tensor::<f64>::from_fn(shape.clone(), |_| rng.gen()).unwrap().into_dense(),
                    Tensor::<Complex<f32>>::from_fn(spec_shape.clone(), |_| Complex::new(rng.gen(), rng.gen())).unwrap().into_dense(),
                    Tensor::<Complex<f64>>::from_fn(spec_shape, |_| Complex::new(rng.gen(), rng.gen())).unwrap().into_dense(),
                ];
                for t in tensors {
                    let mut buf = Vec::new();
                    let n = tensor_write(&t, &mut buf).unwrap();
                    prop_assert_eq!(n, encoded_len(t.shape(), t.dtype()));
                    prop_assert_eq!(tensor_read(&mut buf.as_slice()).unwrap(), t);
                }
            }
        }
    }
}

