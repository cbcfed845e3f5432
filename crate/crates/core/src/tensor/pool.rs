//! Max and average pooling over 2 or 3 spatial axes.
//!
//! Padded positions never take part: max ignores them and the average
//! divides by the number of in-bounds elements only.

use serde::{Deserialize, Serialize};

use super::conv::{window_geometry, AxisGeometry};
use super::{ConvParams, Element, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolParams {
    pub kind: PoolKind,
    pub window: Vec<usize>,
    pub conv: ConvParams,
}

fn geometry(x: &[usize], p: &PoolParams) -> Result<([AxisGeometry; 3], Vec<usize>)> {
    let geo = window_geometry("pool", x, &p.window, &p.conv)?;
    let spatial = x.len() - 2;
    let mut dims = vec![x[0], x[1]];
    dims.extend(geo[3 - spatial..].iter().map(|g| g.output));
    Ok((geo, dims))
}

/// Visits every output position with the flat input indices of its window.
fn for_each_window(
    geo: &[AxisGeometry; 3],
    planes: usize,
    mut f: impl FnMut(usize, &[usize]) -> Result<()>,
) -> Result<()> {
    let [gd, gh, gw] = geo;
    let in_plane = gd.input * gh.input * gw.input;
    let mut idx = Vec::with_capacity(gd.kernel * gh.kernel * gw.kernel);
    let mut out = 0;
    for plane in 0..planes {
        for od in 0..gd.output {
            for oh in 0..gh.output {
                for ow in 0..gw.output {
                    idx.clear();
                    for a in 0..gd.kernel {
                        let Some(sd) = gd.source(od, a) else { continue };
                        for b in 0..gh.kernel {
                            let Some(sh) = gh.source(oh, b) else { continue };
                            for c in 0..gw.kernel {
                                let Some(sw) = gw.source(ow, c) else { continue };
                                idx.push(plane * in_plane + (sd * gh.input + sh) * gw.input + sw);
                            }
                        }
                    }
                    if idx.is_empty() {
                        return Err(TensorError::EmptyWindow {
                            op: "pool",
                            position: vec![plane, od, oh, ow],
                        });
                    }
                    f(out, &idx)?;
                    out += 1;
                }
            }
        }
    }
    Ok(())
}

pub fn pool_forward<T: Element>(x: &Tensor<T>, p: &PoolParams) -> Result<Tensor<T>> {
    let (geo, dims) = geometry(x.dims(), p)?;
    let mut y = vec![T::zero(); dims.iter().product()];
    let xd = x.data();
    for_each_window(&geo, x.dims()[0] * x.dims()[1], |o, idx| {
        y[o] = match p.kind {
            PoolKind::Max => idx.iter().fold(T::neg_infinity(), |m, &i| m.max(xd[i])),
            PoolKind::Avg => {
                idx.iter().map(|&i| xd[i]).sum::<T>() / T::of_f64(idx.len() as f64)
            }
        };
        Ok(())
    })?;
    Ok(Tensor::from_parts(dims, y))
}

/// Max routes each gradient to the first maximal element of its window.
pub fn pool_backward<T: Element>(
    x: &Tensor<T>,
    p: &PoolParams,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (geo, dims) = geometry(x.dims(), p)?;
    if dy.dims() != dims.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "pool_backward",
            detail: format!("dy dims {:?} != output dims {dims:?}", dy.dims()),
        });
    }
    let mut dx = vec![T::zero(); x.len()];
    let xd = x.data();
    let g = dy.data();
    for_each_window(&geo, x.dims()[0] * x.dims()[1], |o, idx| {
        match p.kind {
            PoolKind::Max => {
                let mut best = idx[0];
                for &i in &idx[1..] {
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                dx[best] = dx[best] + g[o];
            }
            PoolKind::Avg => {
                let share = g[o] / T::of_f64(idx.len() as f64);
                for &i in idx {
                    dx[i] = dx[i] + share;
                }
            }
        }
        Ok(())
    })?;
    Ok(Tensor::from_parts(x.dims().to_vec(), dx))
}
