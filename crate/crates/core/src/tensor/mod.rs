//! Dense tensors and the numeric kernels used by every layer kind.
//!
//! Activations use the canonical `N,C,H,W` layout for 2D networks and
//! `N,C,D,H,W` for 3D networks. Data is contiguous row-major with the last
//! axis fastest.

mod conv;
mod gemm;
pub mod gradcheck;
mod norm;
mod ops;
mod pool;

use std::borrow::Cow;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use conv::{
    conv_backward, conv_forward, conv_output_dims, AxisGeometry, ConvGrads, ConvParams, ConvPath,
    Kernel, Padding,
};
pub use gradcheck::grad_check;
pub use norm::{
    batchnorm_backward, batchnorm_forward, BatchNormParams, BatchStats, BnGrads, BnMode, BnOutput,
};
pub use ops::{
    concat_backward, concat_channels, cross_entropy, cross_entropy_backward, dense_backward,
    dense_forward, global_avg_pool, global_avg_pool_backward, relu, relu_backward, softmax,
    softmax_backward, DenseGrads,
};
pub use pool::{pool_backward, pool_forward, PoolKind, PoolParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match dims {dims:?}")]
    DataLength { dims: Vec<usize>, len: usize },
    #[error("invalid dims {0:?}: dims must be non-empty and every extent >= 1")]
    InvalidDims(Vec<usize>),
    #[error("{op}: channel mismatch (expected {expected}, found {found})")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: rank mismatch: {detail}")]
    RankMismatch { op: &'static str, detail: String },
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: output extent on spatial axis {axis} would be < 1")]
    EmptyOutput { op: &'static str, axis: usize },
    #[error("{op}: invalid parameter: {detail}")]
    InvalidParam { op: &'static str, detail: String },
    #[error("{op}: window at output position {position:?} covers only padding")]
    EmptyWindow {
        op: &'static str,
        position: Vec<usize>,
    },
    #[error("{op}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        op: &'static str,
        label: usize,
        classes: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Storage dtype tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

/// How a kernel may schedule its work.
///
/// `Deterministic` runs everything on the calling thread in a fixed order.
/// `Parallel` splits independent work (batch items, output channels) across
/// the rayon pool; reductions are still combined in index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Deterministic,
    Parallel,
}

impl Exec {
    /// Reads `INN_THREADS`: `0` (or unset) selects the deterministic mode.
    pub fn from_env() -> Exec {
        match std::env::var("INN_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
        {
            Some(n) if n > 0 => Exec::Parallel,
            _ => Exec::Deterministic,
        }
    }

    /// Like [`Exec::from_env`], also sizing the global rayon pool to
    /// `INN_THREADS` workers. Only the first call can size the pool.
    pub fn install_from_env() -> Exec {
        let n = std::env::var("INN_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(0);
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Exec::from_env()
    }
}

/// Scalar types a [`Tensor`] can hold.
pub trait Element:
    Float + Default + Debug + Display + Send + Sync + Sum + 'static + private::Sealed
{
    const DTYPE: DType;
    const BYTES: usize;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn wrap(t: Tensor<Self>) -> DynTensor;
    fn peek(t: &DynTensor) -> Option<&Tensor<Self>>;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

mod private {
    pub trait Sealed {}
    impl Sealed for f32 {}
    impl Sealed for f64 {}
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    const BYTES: usize = 4;

    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_strides: (isize, isize),
        b: &[f32],
        b_strides: (isize, isize),
        beta: f32,
        c: &mut [f32],
        c_strides: (isize, isize),
    ) {
        gemm::sgemm(m, k, n, a, a_strides, b, b_strides, beta, c, c_strides)
    }
    fn wrap(t: Tensor<f32>) -> DynTensor {
        DynTensor::F32(t)
    }
    fn peek(t: &DynTensor) -> Option<&Tensor<f32>> {
        match t {
            DynTensor::F32(t) => Some(t),
            DynTensor::F64(_) => None,
        }
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    const BYTES: usize = 8;

    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_strides: (isize, isize),
        b: &[f64],
        b_strides: (isize, isize),
        beta: f64,
        c: &mut [f64],
        c_strides: (isize, isize),
    ) {
        gemm::dgemm(m, k, n, a, a_strides, b, b_strides, beta, c, c_strides)
    }
    fn wrap(t: Tensor<f64>) -> DynTensor {
        DynTensor::F64(t)
    }
    fn peek(t: &DynTensor) -> Option<&Tensor<f64>> {
        match t {
            DynTensor::F64(t) => Some(t),
            DynTensor::F32(_) => None,
        }
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

/// Dense n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("dtype", &T::DTYPE)
            .field("dims", &self.dims)
            .field("data", &preview)
            .finish()
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(TensorError::InvalidDims(dims.to_vec()));
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_dims(&dims)?;
        if dims.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                dims,
                len: data.len(),
            });
        }
        Ok(Tensor { dims, data })
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        check_dims(dims)?;
        Ok(Tensor {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> T) -> Result<Self> {
        check_dims(dims)?;
        let n = dims.iter().product();
        Ok(Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(f).collect(),
        })
    }

    /// Uniform samples in `[lo, hi)` from a seeded ChaCha8 stream.
    pub fn random_uniform(dims: &[usize], lo: f64, hi: f64, seed: u64) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Self::from_fn(dims, |_| T::of_f64(rng.gen_range(lo..hi)))
    }

    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Channel extent of an activation (`dims[1]`), or 1 for rank-1 tensors.
    pub fn channels(&self) -> usize {
        self.dims.get(1).copied().unwrap_or(1)
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Tensor::new(dims.to_vec(), self.data)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite(context.to_string()))
        }
    }

    /// Extracts depth slice `d` of an `N,C,D,H,W` tensor as `N,C,H,W`.
    pub fn depth_slice(&self, d: usize) -> Result<Self> {
        if self.dims.len() != 5 || d >= self.dims[2] {
            return Err(TensorError::ShapeMismatch {
                op: "depth_slice",
                detail: format!("slice {d} of dims {:?}", self.dims),
            });
        }
        let (n, c, depth, h, w) = (
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.dims[3],
            self.dims[4],
        );
        let plane = h * w;
        let mut out = Vec::with_capacity(n * c * plane);
        for nc in 0..n * c {
            let base = (nc * depth + d) * plane;
            out.extend_from_slice(&self.data[base..base + plane]);
        }
        Ok(Tensor::from_parts(vec![n, c, h, w], out))
    }

    /// Stacks `N,C,H,W` slices along a new depth axis into `N,C,D,H,W`.
    pub fn stack_depth(slices: &[Tensor<T>]) -> Result<Self> {
        let first = slices.first().ok_or(TensorError::InvalidParam {
            op: "stack_depth",
            detail: "no slices".into(),
        })?;
        if first.dims.len() != 4 || slices.iter().any(|s| s.dims != first.dims) {
            return Err(TensorError::ShapeMismatch {
                op: "stack_depth",
                detail: "slices must share N,C,H,W dims".into(),
            });
        }
        let (n, c, h, w) = (first.dims[0], first.dims[1], first.dims[2], first.dims[3]);
        let depth = slices.len();
        let plane = h * w;
        let mut out = vec![T::zero(); n * c * depth * plane];
        for (d, s) in slices.iter().enumerate() {
            for nc in 0..n * c {
                let dst = (nc * depth + d) * plane;
                out[dst..dst + plane].copy_from_slice(&s.data[nc * plane..(nc + 1) * plane]);
            }
        }
        Ok(Tensor::from_parts(vec![n, c, depth, h, w], out))
    }

    /// Replicates an `N,C,H,W` tensor `depth` times along a new depth axis.
    pub fn replicate_depth(&self, depth: usize) -> Result<Self> {
        Tensor::stack_depth(&vec![self.clone(); depth])
    }
}

/// Largest absolute difference divided by the reference's largest magnitude.
///
/// Tensors must have identical dims; returns `f64::INFINITY` otherwise.
pub fn relative_error<T: Element, U: Element>(actual: &Tensor<T>, reference: &Tensor<U>) -> f64 {
    if actual.dims() != reference.dims() {
        return f64::INFINITY;
    }
    let mut max_diff = 0.0f64;
    let mut scale = 0.0f64;
    for (a, r) in actual.data().iter().zip(reference.data()) {
        let (a, r) = (a.as_f64(), r.as_f64());
        max_diff = max_diff.max((a - r).abs());
        scale = scale.max(r.abs());
    }
    if max_diff.is_nan() {
        return f64::INFINITY;
    }
    max_diff / scale.max(1e-12)
}

/// Tensor of either dtype, as stored in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DynTensor::F32(_) => DType::F32,
            DynTensor::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.dims(),
            DynTensor::F64(t) => t.dims(),
        }
    }

    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        match self {
            DynTensor::F32(t) => t.all_finite(),
            DynTensor::F64(t) => t.all_finite(),
        }
    }

    /// Borrows the tensor when the dtype matches, otherwise converts.
    pub fn to_dtype<T: Element>(&self) -> Cow<'_, Tensor<T>> {
        if let Some(t) = T::peek(self) {
            return Cow::Borrowed(t);
        }
        Cow::Owned(match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.cast(),
        })
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            DynTensor::F32(t) => t.data().iter().map(|v| *v as f64).collect(),
            DynTensor::F64(t) => t.data().to_vec(),
        }
    }
}

impl<T: Element> From<Tensor<T>> for DynTensor {
    fn from(t: Tensor<T>) -> Self {
        T::wrap(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dims() {
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::DataLength { .. })
        ));
    }

    #[test]
    fn depth_slice_round_trip() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 4, 2, 2], |i| i as f32).unwrap();
        let slices: Vec<_> = (0..4).map(|d| t.depth_slice(d).unwrap()).collect();
        assert_eq!(Tensor::stack_depth(&slices).unwrap(), t);
    }

    #[test]
    fn dyn_tensor_borrows_matching_dtype() {
        let d = DynTensor::from(Tensor::<f64>::zeros(&[3]).unwrap());
        assert!(matches!(d.to_dtype::<f64>(), Cow::Borrowed(_)));
        assert!(matches!(d.to_dtype::<f32>(), Cow::Owned(_)));
    }
}
