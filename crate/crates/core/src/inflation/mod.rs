//! 2D to 3D network inflation, multi-modality kernel expansion and the
//! fusion rewrites built on channel provenance.
//!
//! All transforms are pure: they take a graph and a weight store and return
//! new ones.

mod fusion;
mod provenance;
mod verify;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ensure_valid, ConvSpec, GraphError, LayerSpec, NetworkGraph, PoolSpec, Rank};
use crate::tensor::{DynTensor, Element, Padding, Tensor, TensorError};
use crate::weights::{WeightStore, WeightsError};

pub use fusion::{
    build_early_fusion, build_fusion, build_intermediate_fusion, expand_consumers, reinit_classifier,
    stem_unit, FusionSpec, FusionStrategy, MODALITY_SEPARATOR,
};
pub use provenance::{channel_counts, channel_provenance, Provenance, Segment};
pub use verify::{
    depth_margins, verify_inflation, CheckStatus, LayerCheck, VerifyMode, VerifyReport,
    CONSERVATION_TOL, DEPTH1_TOL, MODALITY_TOL, REPLICATE_TOL,
};

#[derive(Debug, Error)]
pub enum InflationError {
    #[error("expected a 2D graph, got {0}")]
    NotTwoD(&'static str),
    #[error("node {node:?}: cannot inflate a {op} layer")]
    Unsupported { node: String, op: &'static str },
    #[error("missing weight slot {0:?}")]
    MissingWeight(String),
    #[error("weight slot {slot:?}: {detail}")]
    BadWeight { slot: String, detail: String },
    #[error("graph has no conv stem: {0}")]
    NoConvStem(String),
    #[error("classifier head not found: {0}")]
    HeadNotFound(String),
    #[error("provenance inconsistency at {node:?}: {detail}")]
    Provenance { node: String, detail: String },
    #[error("invalid fusion spec: {0}")]
    InvalidFusion(String),
    #[error("structural mismatch: {0}")]
    Structure(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
}

pub type Result<T, E = InflationError> = std::result::Result<T, E>;

/// Depth rule for square `k x k` kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SquareRule {
    /// `k x k` becomes `k x k x k`.
    Cube,
    /// Depth 1 for every kernel.
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolDepthRule {
    MatchSpatial,
    Depth1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InflationPolicy {
    pub square: SquareRule,
    /// Depth for `h x w` kernels with `h != w` and neither side 1.
    pub rect_default_depth: usize,
    pub pool_depth: PoolDepthRule,
}

impl Default for InflationPolicy {
    fn default() -> Self {
        InflationPolicy {
            square: SquareRule::Cube,
            rect_default_depth: 1,
            pool_depth: PoolDepthRule::MatchSpatial,
        }
    }
}

impl InflationPolicy {
    /// Every kernel and pooling window gets depth 1.
    pub fn depth1() -> Self {
        InflationPolicy {
            square: SquareRule::Flat,
            rect_default_depth: 1,
            pool_depth: PoolDepthRule::Depth1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rect_default_depth == 0 {
            return Err(InflationError::InvalidArgument(
                "rect_default_depth must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Depth extent for an inflated `k_h x k_w` kernel.
pub fn depth_for_kernel(kh: usize, kw: usize, policy: &InflationPolicy) -> usize {
    if kh == kw {
        match policy.square {
            SquareRule::Cube => kh,
            SquareRule::Flat => 1,
        }
    } else if kh == 1 || kw == 1 {
        1
    } else {
        policy.rect_default_depth
    }
}

/// Tiles a `[O, I, kh, kw]` kernel `kd` times along a new depth axis,
/// dividing every value by `kd` (in f64).
pub fn inflate_kernel<T: Element>(w2: &Tensor<T>, kd: usize) -> Result<Tensor<T>> {
    let &[o, i, kh, kw] = w2.dims() else {
        return Err(InflationError::InvalidArgument(format!(
            "inflate_kernel expects a 4D kernel, got dims {:?}",
            w2.dims()
        )));
    };
    if kd == 0 {
        return Err(InflationError::InvalidArgument("depth must be >= 1".into()));
    }
    let plane = kh * kw;
    let mut out = Vec::with_capacity(w2.len() * kd);
    for block in w2.data().chunks(plane) {
        for _ in 0..kd {
            out.extend(block.iter().map(|v| T::of_f64(v.as_f64() / kd as f64)));
        }
    }
    Ok(Tensor::new(vec![o, i, kd, kh, kw], out)?)
}

/// Replicates a single-channel tensor into three identical channels.
pub fn tile_to_three_channels<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() < 2 || x.dims()[1] != 1 {
        return Err(TensorError::ChannelMismatch {
            op: "tile_to_three_channels",
            expected: 1,
            found: x.channels(),
        }
        .into());
    }
    let inner: usize = x.dims()[2..].iter().product();
    let mut out = Vec::with_capacity(x.len() * 3);
    for sample in x.data().chunks(inner) {
        for _ in 0..3 {
            out.extend_from_slice(sample);
        }
    }
    let mut dims = x.dims().to_vec();
    dims[1] = 3;
    Ok(Tensor::new(dims, out)?)
}

/// Tiles the input-channel axis of a conv kernel `m` times (block-major),
/// dividing every value by `m`.
pub fn expand_kernel_for_modalities<T: Element>(w: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    if w.ndim() < 3 || m == 0 {
        return Err(InflationError::InvalidArgument(format!(
            "expand_kernel_for_modalities: kernel dims {:?}, m = {m}",
            w.dims()
        )));
    }
    let (o, i) = (w.dims()[0], w.dims()[1]);
    let spatial: usize = w.dims()[2..].iter().product();
    let mut out = Vec::with_capacity(w.len() * m);
    for oc in 0..o {
        let row = &w.data()[oc * i * spatial..(oc + 1) * i * spatial];
        for _ in 0..m {
            out.extend(row.iter().map(|v| T::of_f64(v.as_f64() / m as f64)));
        }
    }
    let mut dims = w.dims().to_vec();
    dims[1] = i * m;
    Ok(Tensor::new(dims, out)?)
}

fn pool_depth(window: &[usize], policy: &InflationPolicy) -> usize {
    match policy.pool_depth {
        PoolDepthRule::Depth1 => 1,
        PoolDepthRule::MatchSpatial => {
            let (ph, pw) = (window[0], window[1]);
            if ph == pw {
                ph
            } else if ph == 1 || pw == 1 {
                1
            } else {
                policy.rect_default_depth
            }
        }
    }
}

/// 3D counterpart of a 2D layer.
///
/// Depth stride is always 1 and depth padding always `same`, so the depth
/// extent is preserved through the network.
pub fn inflate_layer(spec: &LayerSpec, policy: &InflationPolicy) -> Result<LayerSpec> {
    let lift = |kd: usize, k: &[usize], s: &[usize], p: &[Padding]| -> Result<_> {
        if k.len() != 2 || s.len() != 2 || p.len() != 2 {
            return Err(InflationError::NotTwoD(spec.op_name()));
        }
        Ok((
            vec![kd, k[0], k[1]],
            vec![1, s[0], s[1]],
            vec![Padding::Same, p[0], p[1]],
        ))
    };
    Ok(match spec {
        LayerSpec::Conv(c) => {
            let kd = depth_for_kernel(*c.kernel.first().unwrap_or(&0), *c.kernel.last().unwrap_or(&0), policy);
            let (kernel, stride, padding) = lift(kd, &c.kernel, &c.stride, &c.padding)?;
            LayerSpec::Conv(ConvSpec {
                kernel,
                stride,
                padding,
                ..c.clone()
            })
        }
        LayerSpec::Pool(p) => {
            if p.window.len() != 2 {
                return Err(InflationError::NotTwoD("pool"));
            }
            let (window, stride, padding) =
                lift(pool_depth(&p.window, policy), &p.window, &p.stride, &p.padding)?;
            LayerSpec::Pool(PoolSpec {
                kind: p.kind,
                window,
                stride,
                padding,
            })
        }
        other => other.clone(),
    })
}

fn inflate_slot<T: Element>(t: &Tensor<T>, kd: usize) -> Result<DynTensor> {
    Ok(T::wrap(inflate_kernel(t, kd)?))
}

/// Inflates every layer of a 2D graph and bootstraps its weights.
///
/// Conv kernels are tiled along depth and divided by `k_d`; batch-norm and
/// dense weights are copied unchanged.
pub fn inflate_graph(
    g2: &NetworkGraph,
    w2: &WeightStore,
    policy: &InflationPolicy,
) -> Result<(NetworkGraph, WeightStore)> {
    policy.validate()?;
    if g2.rank != Rank::Two {
        return Err(InflationError::NotTwoD(g2.rank.as_str()));
    }
    ensure_valid(g2)?;
    g2.check_weights(w2)?;
    let mut g3 = g2.clone();
    g3.rank = Rank::Three;
    let mut w3 = WeightStore::new();
    for (n2, n3) in g2.nodes.iter().zip(g3.nodes.iter_mut()) {
        n3.layer = inflate_layer(&n2.layer, policy)?;
        for (i, slot) in n2.weights.iter().enumerate() {
            let t = w2
                .get(slot)
                .ok_or_else(|| InflationError::MissingWeight(slot.clone()))?;
            let out = match (&n3.layer, i) {
                (LayerSpec::Conv(c), 0) => {
                    let kd = c.kernel[0];
                    match t {
                        DynTensor::F32(t) => inflate_slot(t, kd)?,
                        DynTensor::F64(t) => inflate_slot(t, kd)?,
                    }
                }
                _ => t.clone(),
            };
            w3.insert(slot.clone(), out)?;
        }
    }
    Ok((g3, w3))
}
