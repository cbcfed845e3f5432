//! 2D/3D convolution: a direct loop kernel and an im2col + GEMM kernel.
//!
//! Both kernels canonicalize to three spatial axes: a 2D convolution is a 3D
//! one with a unit depth axis and a unit depth kernel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Element, Exec, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; the odd padding element goes on the
    /// high side.
    Same,
    /// No padding; output extent `floor((in - k) / stride) + 1`.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvPath {
    Direct,
    #[default]
    Im2col,
}

/// Per-spatial-axis stride and padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: Vec<usize>,
    pub padding: Vec<Padding>,
}

impl ConvParams {
    pub fn new(stride: Vec<usize>, padding: Vec<Padding>) -> Self {
        ConvParams { stride, padding }
    }

    pub fn uniform(spatial_rank: usize, stride: usize, padding: Padding) -> Self {
        ConvParams {
            stride: vec![stride; spatial_rank],
            padding: vec![padding; spatial_rank],
        }
    }
}

/// Convolution weights `out,in,(k_d),k_h,k_w` with an optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Element> Kernel<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Vec<T>>) -> Result<Self> {
        if !(4..=5).contains(&weight.ndim()) {
            return Err(TensorError::RankMismatch {
                op: "kernel",
                detail: format!("kernel must be 4D or 5D, got dims {:?}", weight.dims()),
            });
        }
        if let Some(b) = &bias {
            if b.len() != weight.dims()[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "kernel",
                    detail: format!(
                        "bias length {} != out channels {}",
                        b.len(),
                        weight.dims()[0]
                    ),
                });
            }
        }
        Ok(Kernel { weight, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    /// Spatial kernel extents (`[k_h, k_w]` or `[k_d, k_h, k_w]`).
    pub fn extents(&self) -> &[usize] {
        &self.weight.dims()[2..]
    }

    pub fn spatial_rank(&self) -> usize {
        self.weight.ndim() - 2
    }
}

/// Resolved arithmetic for one spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisGeometry {
    pub input: usize,
    pub kernel: usize,
    pub stride: usize,
    pub output: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

impl AxisGeometry {
    /// Returns `None` when the output extent would be < 1.
    pub fn new(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<Self> {
        match padding {
            Padding::Same => {
                let output = input.div_ceil(stride);
                let total = ((output - 1) * stride + kernel).saturating_sub(input);
                let pad_lo = total / 2;
                Some(AxisGeometry {
                    input,
                    kernel,
                    stride,
                    output,
                    pad_lo,
                    pad_hi: total - pad_lo,
                })
            }
            Padding::Valid => {
                if input < kernel {
                    return None;
                }
                Some(AxisGeometry {
                    input,
                    kernel,
                    stride,
                    output: (input - kernel) / stride + 1,
                    pad_lo: 0,
                    pad_hi: 0,
                })
            }
        }
    }

    /// Input coordinate read by output `o` at kernel tap `k`, if in bounds.
    #[inline]
    pub fn source(&self, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad_lo as isize;
        (pos >= 0 && (pos as usize) < self.input).then_some(pos as usize)
    }
}

/// Validates a windowed op and returns the canonical 3-axis geometry.
pub(super) fn window_geometry(
    op: &'static str,
    x_dims: &[usize],
    window: &[usize],
    params: &ConvParams,
) -> Result<[AxisGeometry; 3]> {
    let spatial = x_dims.len().saturating_sub(2);
    if !(2..=3).contains(&spatial) {
        return Err(TensorError::RankMismatch {
            op,
            detail: format!("input must be 4D or 5D, got dims {x_dims:?}"),
        });
    }
    if window.len() != spatial || params.stride.len() != spatial || params.padding.len() != spatial
    {
        return Err(TensorError::RankMismatch {
            op,
            detail: format!(
                "input has {spatial} spatial axes but window/stride/padding have {}/{}/{}",
                window.len(),
                params.stride.len(),
                params.padding.len()
            ),
        });
    }
    if let Some(&s) = params.stride.iter().find(|&&s| s == 0) {
        return Err(TensorError::InvalidParam {
            op,
            detail: format!("stride components must be >= 1, got {s}"),
        });
    }
    if window.contains(&0) {
        return Err(TensorError::InvalidParam {
            op,
            detail: format!("window extents must be >= 1, got {window:?}"),
        });
    }
    let unit = AxisGeometry {
        input: 1,
        kernel: 1,
        stride: 1,
        output: 1,
        pad_lo: 0,
        pad_hi: 0,
    };
    let mut geo = [unit; 3];
    let offset = 3 - spatial;
    for axis in 0..spatial {
        geo[offset + axis] = AxisGeometry::new(
            x_dims[2 + axis],
            window[axis],
            params.stride[axis],
            params.padding[axis],
        )
        .ok_or(TensorError::EmptyOutput { op, axis })?;
    }
    Ok(geo)
}

fn out_dims(x_dims: &[usize], channels: usize, geo: &[AxisGeometry; 3]) -> Vec<usize> {
    let mut dims = vec![x_dims[0], channels];
    let spatial = x_dims.len() - 2;
    for g in &geo[3 - spatial..] {
        dims.push(g.output);
    }
    dims
}

fn check_conv<T: Element>(
    x_dims: &[usize],
    k: &Kernel<T>,
    params: &ConvParams,
) -> Result<[AxisGeometry; 3]> {
    if x_dims.len() != k.weight.ndim() {
        return Err(TensorError::RankMismatch {
            op: "conv",
            detail: format!(
                "input dims {x_dims:?} vs kernel dims {:?}",
                k.weight.dims()
            ),
        });
    }
    if x_dims[1] != k.in_channels() {
        return Err(TensorError::ChannelMismatch {
            op: "conv",
            expected: k.in_channels(),
            found: x_dims[1],
        });
    }
    window_geometry("conv", x_dims, k.extents(), params)
}

/// Output dims of a convolution, without computing it.
pub fn conv_output_dims<T: Element>(
    x_dims: &[usize],
    k: &Kernel<T>,
    params: &ConvParams,
) -> Result<Vec<usize>> {
    let geo = check_conv(x_dims, k, params)?;
    Ok(out_dims(x_dims, k.out_channels(), &geo))
}

pub fn conv_forward<T: Element>(
    x: &Tensor<T>,
    k: &Kernel<T>,
    params: &ConvParams,
    path: ConvPath,
    exec: Exec,
) -> Result<Tensor<T>> {
    let geo = check_conv(x.dims(), k, params)?;
    let dims = out_dims(x.dims(), k.out_channels(), &geo);
    let in_sample: usize = x.dims()[1..].iter().product();
    let out_sample: usize = dims[1..].iter().product();
    let mut out = vec![T::zero(); dims.iter().product()];
    let c_in = k.in_channels();
    let run = |(n, y): (usize, &mut [T])| {
        let xs = &x.data()[n * in_sample..(n + 1) * in_sample];
        match path {
            ConvPath::Direct => direct_sample(xs, c_in, k, &geo, y),
            ConvPath::Im2col => im2col_sample(xs, c_in, k, &geo, y),
        }
    };
    match exec {
        Exec::Deterministic => out.chunks_mut(out_sample).enumerate().for_each(run),
        Exec::Parallel => out.par_chunks_mut(out_sample).enumerate().for_each(run),
    }
    Ok(Tensor::from_parts(dims, out))
}

fn direct_sample<T: Element>(
    x: &[T],
    c_in: usize,
    k: &Kernel<T>,
    geo: &[AxisGeometry; 3],
    y: &mut [T],
) {
    let [gd, gh, gw] = geo;
    let (kd, kh, kw) = (gd.kernel, gh.kernel, gw.kernel);
    let (id, ih, iw) = (gd.input, gh.input, gw.input);
    let w = k.weight.data();
    let mut yi = 0;
    for o in 0..k.out_channels() {
        for od in 0..gd.output {
            for oh in 0..gh.output {
                for ow in 0..gw.output {
                    let mut acc = T::zero();
                    for ci in 0..c_in {
                        for a in 0..kd {
                            let Some(sd) = gd.source(od, a) else { continue };
                            for b in 0..kh {
                                let Some(sh) = gh.source(oh, b) else { continue };
                                for c in 0..kw {
                                    let Some(sw) = gw.source(ow, c) else { continue };
                                    let xv = x[((ci * id + sd) * ih + sh) * iw + sw];
                                    let wv = w[(((o * c_in + ci) * kd + a) * kh + b) * kw + c];
                                    acc = acc + xv * wv;
                                }
                            }
                        }
                    }
                    if let Some(bias) = &k.bias {
                        acc = acc + bias[o];
                    }
                    y[yi] = acc;
                    yi += 1;
                }
            }
        }
    }
}

/// Unfolds one sample into a `(C*kd*kh*kw) x (od*oh*ow)` column matrix.
fn im2col<T: Element>(x: &[T], c_in: usize, geo: &[AxisGeometry; 3], cols: &mut [T]) {
    let [gd, gh, gw] = geo;
    let p = gd.output * gh.output * gw.output;
    let mut row = 0;
    for ci in 0..c_in {
        for a in 0..gd.kernel {
            for b in 0..gh.kernel {
                for c in 0..gw.kernel {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut j = 0;
                    for od in 0..gd.output {
                        let sd = gd.source(od, a);
                        for oh in 0..gh.output {
                            let sh = gh.source(oh, b);
                            for ow in 0..gw.output {
                                dst[j] = match (sd, sh, gw.source(ow, c)) {
                                    (Some(sd), Some(sh), Some(sw)) => {
                                        x[((ci * gd.input + sd) * gh.input + sh) * gw.input + sw]
                                    }
                                    _ => T::zero(),
                                };
                                j += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back into sample layout.
fn col2im<T: Element>(cols: &[T], c_in: usize, geo: &[AxisGeometry; 3], dx: &mut [T]) {
    let [gd, gh, gw] = geo;
    let p = gd.output * gh.output * gw.output;
    let mut row = 0;
    for ci in 0..c_in {
        for a in 0..gd.kernel {
            for b in 0..gh.kernel {
                for c in 0..gw.kernel {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut j = 0;
                    for od in 0..gd.output {
                        let sd = gd.source(od, a);
                        for oh in 0..gh.output {
                            let sh = gh.source(oh, b);
                            for ow in 0..gw.output {
                                if let (Some(sd), Some(sh), Some(sw)) = (sd, sh, gw.source(ow, c)) {
                                    let i = ((ci * gd.input + sd) * gh.input + sh) * gw.input + sw;
                                    dx[i] = dx[i] + src[j];
                                }
                                j += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col_sample<T: Element>(
    x: &[T],
    c_in: usize,
    k: &Kernel<T>,
    geo: &[AxisGeometry; 3],
    y: &mut [T],
) {
    let p = geo.iter().map(|g| g.output).product::<usize>();
    let kk = c_in * geo.iter().map(|g| g.kernel).product::<usize>();
    let o = k.out_channels();
    let mut cols = vec![T::zero(); kk * p];
    im2col(x, c_in, geo, &mut cols);
    T::gemm(
        o,
        kk,
        p,
        k.weight.data(),
        (kk as isize, 1),
        &cols,
        (p as isize, 1),
        T::zero(),
        y,
        (p as isize, 1),
    );
    if let Some(bias) = &k.bias {
        for (oc, row) in y.chunks_mut(p).enumerate() {
            for v in row {
                *v = *v + bias[oc];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T: Element = f32> {
    pub dx: Tensor<T>,
    /// Same dims as the kernel weight.
    pub dk: Tensor<T>,
    /// One entry per output channel (zeros when the kernel has no bias).
    pub dbias: Vec<T>,
}

pub fn conv_backward<T: Element>(
    x: &Tensor<T>,
    k: &Kernel<T>,
    params: &ConvParams,
    dy: &Tensor<T>,
    exec: Exec,
) -> Result<ConvGrads<T>> {
    let geo = check_conv(x.dims(), k, params)?;
    let ydims = out_dims(x.dims(), k.out_channels(), &geo);
    if dy.dims() != ydims.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "conv_backward",
            detail: format!("dy dims {:?} != output dims {ydims:?}", dy.dims()),
        });
    }
    let n = x.dims()[0];
    let c_in = k.in_channels();
    let o = k.out_channels();
    let p = geo.iter().map(|g| g.output).product::<usize>();
    let kk = c_in * geo.iter().map(|g| g.kernel).product::<usize>();
    let in_sample: usize = x.dims()[1..].iter().product();

    let per_sample = |s: usize| -> (Vec<T>, Vec<T>) {
        let xs = &x.data()[s * in_sample..(s + 1) * in_sample];
        let dys = &dy.data()[s * o * p..(s + 1) * o * p];
        let mut cols = vec![T::zero(); kk * p];
        im2col(xs, c_in, &geo, &mut cols);
        let mut dk = vec![T::zero(); o * kk];
        // dk = dy (o x p) * cols^T (p x kk)
        T::gemm(
            o,
            p,
            kk,
            dys,
            (p as isize, 1),
            &cols,
            (1, p as isize),
            T::zero(),
            &mut dk,
            (kk as isize, 1),
        );
        // dcols = w^T (kk x o) * dy (o x p)
        T::gemm(
            kk,
            o,
            p,
            k.weight.data(),
            (1, kk as isize),
            dys,
            (p as isize, 1),
            T::zero(),
            &mut cols,
            (p as isize, 1),
        );
        let mut dx = vec![T::zero(); in_sample];
        col2im(&cols, c_in, &geo, &mut dx);
        (dx, dk)
    };
    let parts: Vec<(Vec<T>, Vec<T>)> = match exec {
        Exec::Deterministic => (0..n).map(per_sample).collect(),
        Exec::Parallel => (0..n).into_par_iter().map(per_sample).collect(),
    };

    let mut dx = Vec::with_capacity(n * in_sample);
    let mut dk = vec![T::zero(); o * kk];
    for (dxs, dks) in parts {
        dx.extend_from_slice(&dxs);
        for (acc, v) in dk.iter_mut().zip(dks) {
            *acc = *acc + v;
        }
    }
    let mut dbias = vec![T::zero(); o];
    for s in 0..n {
        for (oc, db) in dbias.iter_mut().enumerate() {
            let base = (s * o + oc) * p;
            *db = *db + dy.data()[base..base + p].iter().copied().sum::<T>();
        }
    }
    Ok(ConvGrads {
        dx: Tensor::from_parts(x.dims().to_vec(), dx),
        dk: Tensor::from_parts(k.weight.dims().to_vec(), dk),
        dbias,
    })
}
