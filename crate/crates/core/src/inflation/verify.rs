//! Numerical checks that an inflated (or fused) network is faithful to its
//! source network. Executions run in f64.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{InflationError, Result};
use crate::graph::{execute, Capture, ExecOptions, LayerSpec, NetworkGraph};
use crate::tensor::{concat_channels, relative_error, AxisGeometry, Padding, Tensor};
use crate::weights::WeightStore;

/// Elementwise absolute tolerance on kernel depth sums.
pub const CONSERVATION_TOL: f64 = 1e-6;
pub const DEPTH1_TOL: f64 = 1e-5;
pub const REPLICATE_TOL: f64 = 1e-4;
pub const MODALITY_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerifyMode {
    /// Depth sums of every inflated kernel equal the 2D kernel.
    Conservation,
    /// Under the all-depth-1 policy the 3D network acts slice-wise.
    Depth1,
    /// Depth-replicated input: clean center slices equal 2D activations.
    Replicate,
    /// A fused network on identical modalities equals the unfused one.
    ModalityCollapse,
}

impl VerifyMode {
    pub fn tolerance(self) -> f64 {
        match self {
            VerifyMode::Conservation => CONSERVATION_TOL,
            VerifyMode::Depth1 => DEPTH1_TOL,
            VerifyMode::Replicate => REPLICATE_TOL,
            VerifyMode::ModalityCollapse => MODALITY_TOL,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VerifyMode::Conservation => "conservation",
            VerifyMode::Depth1 => "depth1",
            VerifyMode::Replicate => "replicate",
            VerifyMode::ModalityCollapse => "modality-collapse",
        }
    }
}

impl fmt::Display for VerifyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VerifyMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "conservation" => VerifyMode::Conservation,
            "depth1" => VerifyMode::Depth1,
            "replicate" => VerifyMode::Replicate,
            "modality-collapse" => VerifyMode::ModalityCollapse,
            other => return Err(format!("unknown verify mode {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Reported but not judged: depth-boundary contamination.
    Flagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub name: String,
    pub error: f64,
    pub status: CheckStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub mode: VerifyMode,
    pub tolerance: f64,
    pub passed: bool,
    /// Probe depth used by the replicate mode.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub depth: Option<usize>,
    pub max_error: f64,
    pub checks: Vec<LayerCheck>,
}

impl VerifyReport {
    fn new(mode: VerifyMode, depth: Option<usize>, checks: Vec<LayerCheck>) -> Self {
        let judged = checks.iter().filter(|c| c.status != CheckStatus::Flagged);
        VerifyReport {
            mode,
            tolerance: mode.tolerance(),
            passed: checks.iter().all(|c| c.status != CheckStatus::Fail),
            depth,
            max_error: judged.map(|c| c.error).fold(0.0, f64::max),
            checks,
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &LayerCheck> {
        self.checks.iter().filter(|c| c.status == CheckStatus::Fail)
    }
}

fn judge(name: impl Into<String>, error: f64, tol: f64) -> LayerCheck {
    LayerCheck {
        name: name.into(),
        error,
        status: if error <= tol { CheckStatus::Pass } else { CheckStatus::Fail },
        note: None,
    }
}

fn same_structure(a: &NetworkGraph, b: &NetworkGraph) -> Result<()> {
    if a.nodes.len() != b.nodes.len() {
        return Err(InflationError::Structure(format!(
            "{} nodes vs {} nodes",
            a.nodes.len(),
            b.nodes.len()
        )));
    }
    for (x, y) in a.nodes.iter().zip(&b.nodes) {
        if x.id != y.id || x.layer.op_name() != y.layer.op_name() || x.inputs != y.inputs {
            return Err(InflationError::Structure(format!(
                "node {:?} ({}) does not correspond to {:?} ({})",
                x.id,
                x.layer.op_name(),
                y.id,
                y.layer.op_name()
            )));
        }
    }
    Ok(())
}

/// Cumulative depth contamination `(lo, hi)` of every node of a 3D graph;
/// `None` once the depth axis has been pooled away.
///
/// A conv adds its depth padding. A pool adds it only when its input is
/// already contaminated, since max and in-bounds averages preserve
/// depth-constant input.
pub fn depth_margins(g: &NetworkGraph) -> Result<IndexMap<String, Option<(usize, usize)>>> {
    let mut out: IndexMap<String, Option<(usize, usize)>> = IndexMap::new();
    for i in g.topo_order()? {
        let n = &g.nodes[i];
        let first = n.inputs.first().map(|s| out[s]);
        let pads = |k: &[usize], s: &[usize], p: &[Padding]| -> Result<(usize, usize)> {
            if s[0] != 1 || (p[0] == Padding::Valid && k[0] > 1) {
                return Err(InflationError::InvalidArgument(format!(
                    "node {:?}: margin tracking needs depth stride 1 and same depth padding",
                    n.id
                )));
            }
            let g = AxisGeometry::new(k[0].max(1), k[0], 1, p[0]).expect("k <= extent");
            Ok((g.pad_lo, g.pad_hi))
        };
        let m = match &n.layer {
            LayerSpec::Input { .. } => Some((0, 0)),
            LayerSpec::Conv(c) => {
                let (lo, hi) = pads(&c.kernel, &c.stride, &c.padding)?;
                first.flatten().map(|(a, b)| (a + lo, b + hi))
            }
            LayerSpec::Pool(p) => {
                let (lo, hi) = pads(&p.window, &p.stride, &p.padding)?;
                first.flatten().map(|(a, b)| {
                    if (a, b) == (0, 0) {
                        (0, 0)
                    } else {
                        (a + lo, b + hi)
                    }
                })
            }
            LayerSpec::Concat => n.inputs.iter().try_fold((0, 0), |(a, b), s| {
                out[s].map(|(x, y)| (a.max(x), b.max(y)))
            }),
            LayerSpec::GlobalAvgPool | LayerSpec::Dense(_) | LayerSpec::Softmax => None,
            LayerSpec::BatchNorm(_) | LayerSpec::Relu => first.flatten(),
        };
        out.insert(n.id.clone(), m);
    }
    Ok(out)
}

fn run(
    g: &NetworkGraph,
    w: &WeightStore,
    inputs: HashMap<String, Tensor<f64>>,
) -> Result<(Tensor<f64>, IndexMap<String, Tensor<f64>>)> {
    let opts = ExecOptions {
        capture: Capture::All,
        ..Default::default()
    };
    let e = execute(g, w, &inputs, &opts)?;
    Ok((e.output, e.captured))
}

fn single(x: &Tensor<f64>) -> HashMap<String, Tensor<f64>> {
    HashMap::from([(String::new(), x.clone())])
}

fn need_probe(probe: Option<&Tensor<f64>>, mode: VerifyMode, ndim: usize) -> Result<&Tensor<f64>> {
    let p = probe.ok_or_else(|| {
        InflationError::InvalidArgument(format!("{mode} mode needs a probe input"))
    })?;
    if p.ndim() != ndim {
        return Err(InflationError::InvalidArgument(format!(
            "{mode} mode needs a {ndim}D probe, got dims {:?}",
            p.dims()
        )));
    }
    Ok(p)
}

fn argmax_rows(t: &Tensor<f64>) -> Vec<usize> {
    let k = t.dims()[1];
    t.data()
        .chunks(k)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0
        })
        .collect()
}

/// Compares `candidate` against `reference`.
///
/// For `conservation`, `depth1` and `replicate` the reference is the 2D
/// network and the candidate its inflation. For `modality-collapse` the
/// reference is the single-modality 3D network and the candidate a fused
/// one. `probe` is an `N,C,H,W` image for `replicate` and an `N,C,D,H,W`
/// volume for `depth1` and `modality-collapse`. `depth` overrides the
/// replicate depth, which otherwise is `2 * max margin + 1`.
pub fn verify_inflation(
    reference: (&NetworkGraph, &WeightStore),
    candidate: (&NetworkGraph, &WeightStore),
    probe: Option<&Tensor<f64>>,
    mode: VerifyMode,
    depth: Option<usize>,
) -> Result<VerifyReport> {
    let (g2, w2) = reference;
    let (g3, w3) = candidate;
    g2.check_weights(w2)?;
    g3.check_weights(w3)?;
    let tol = mode.tolerance();
    match mode {
        VerifyMode::Conservation => {
            same_structure(g2, g3)?;
            let mut checks = Vec::new();
            for (n2, n3) in g2.nodes.iter().zip(&g3.nodes) {
                let (LayerSpec::Conv(_), LayerSpec::Conv(c3)) = (&n2.layer, &n3.layer) else {
                    continue;
                };
                let k2 = w2.get_as::<f64>(&n2.weights[0]).expect("checked");
                let k3 = w3.get_as::<f64>(&n3.weights[0]).expect("checked");
                let kd = c3.kernel[0];
                let plane = c3.kernel[1] * c3.kernel[2];
                let mut err = 0.0f64;
                for (oi, block) in k3.data().chunks(kd * plane).enumerate() {
                    for p in 0..plane {
                        let s: f64 = (0..kd).map(|j| block[j * plane + p]).sum();
                        err = err.max((s - k2.data()[oi * plane + p]).abs());
                    }
                }
                checks.push(judge(n2.weights[0].clone(), err, tol));
            }
            Ok(VerifyReport::new(mode, None, checks))
        }
        VerifyMode::Depth1 => {
            same_structure(g2, g3)?;
            let vol = need_probe(probe, mode, 5)?;
            let (w2, w3) = (w2.to_dtype::<f64>(), w3.to_dtype::<f64>());
            let (_, full) = run(g3, &w3, single(vol))?;
            let mut errs: IndexMap<String, f64> = IndexMap::new();
            let mut argmax_ok = true;
            for s in 0..vol.dims()[2] {
                let slice = vol.depth_slice(s)?;
                let (out2, acts2) = run(g2, &w2, single(&slice))?;
                let (out3, acts3) = run(g3, &w3, single(&Tensor::stack_depth(&[slice])?))?;
                for (id, a2) in &acts2 {
                    let a3 = &full[id];
                    let mut e = if a3.ndim() == 5 {
                        relative_error(&a3.depth_slice(s)?, a2)
                    } else {
                        0.0
                    };
                    let b3 = &acts3[id];
                    e = e.max(if b3.ndim() == 5 {
                        relative_error(&b3.depth_slice(0)?, a2)
                    } else {
                        relative_error(b3, a2)
                    });
                    let slot = errs.entry(id.clone()).or_insert(0.0);
                    *slot = slot.max(e);
                }
                argmax_ok &= argmax_rows(&out2) == argmax_rows(&out3);
            }
            let mut checks: Vec<_> = errs.into_iter().map(|(id, e)| judge(id, e, tol)).collect();
            checks.push(LayerCheck {
                name: "argmax".into(),
                error: if argmax_ok { 0.0 } else { 1.0 },
                status: if argmax_ok { CheckStatus::Pass } else { CheckStatus::Fail },
                note: Some("predicted class per slice".into()),
            });
            Ok(VerifyReport::new(mode, Some(vol.dims()[2]), checks))
        }
        VerifyMode::Replicate => {
            same_structure(g2, g3)?;
            let img = need_probe(probe, mode, 4)?;
            let margins = depth_margins(g3)?;
            let needed = margins
                .values()
                .flatten()
                .map(|&(lo, hi)| 2 * lo.max(hi) + 1)
                .max()
                .unwrap_or(1);
            let d = depth.unwrap_or(needed);
            let (w2, w3) = (w2.to_dtype::<f64>(), w3.to_dtype::<f64>());
            let (_, acts2) = run(g2, &w2, single(img))?;
            let (_, acts3) = run(g3, &w3, single(&img.replicate_depth(d)?))?;
            let center = d / 2;
            let checks = acts2
                .iter()
                .map(|(id, a2)| {
                    let a3 = &acts3[id];
                    Ok(match margins[id] {
                        Some((lo, hi)) if a3.ndim() == 5 => {
                            let e = relative_error(&a3.depth_slice(center)?, a2);
                            if lo <= center && hi < d - center {
                                judge(id.clone(), e, tol)
                            } else {
                                LayerCheck {
                                    name: id.clone(),
                                    error: e,
                                    status: CheckStatus::Flagged,
                                    note: Some(format!("center slice within margin ({lo}, {hi})")),
                                }
                            }
                        }
                        _ => LayerCheck {
                            name: id.clone(),
                            error: relative_error(a3, a2),
                            status: CheckStatus::Flagged,
                            note: Some("depth pooled over boundary slices".into()),
                        },
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(VerifyReport::new(mode, Some(d), checks))
        }
        VerifyMode::ModalityCollapse => {
            let vol = need_probe(probe, mode, 5)?;
            let (w2, w3) = (w2.to_dtype::<f64>(), w3.to_dtype::<f64>());
            let (out_ref, acts_ref) = run(g2, &w2, single(vol))?;
            let inputs = if g3.inputs.len() > 1 {
                g3.input_modalities()
                    .into_iter()
                    .map(|(id, tag)| (tag.unwrap_or(id).to_string(), vol.clone()))
                    .collect()
            } else {
                let want = match g3.node(&g3.inputs[0]).map(|n| &n.layer) {
                    Some(LayerSpec::Input { channels, .. }) => *channels,
                    _ => vol.channels(),
                };
                if want % vol.channels() != 0 {
                    return Err(InflationError::Structure(format!(
                        "fused input takes {want} channels, probe has {}",
                        vol.channels()
                    )));
                }
                let copies = vec![vol; want / vol.channels()];
                single(&concat_channels(&copies)?)
            };
            let (out_fused, acts_fused) = run(g3, &w3, inputs)?;
            let mut checks = vec![judge("output", relative_error(&out_fused, &out_ref), tol)];
            for (id, a) in &acts_ref {
                if let Some(b) = acts_fused.get(id).filter(|b| b.dims() == a.dims()) {
                    checks.push(judge(id.clone(), relative_error(b, a), tol));
                }
            }
            Ok(VerifyReport::new(mode, None, checks))
        }
    }
}
