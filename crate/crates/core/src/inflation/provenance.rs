//! Channel provenance: which producer and channel range every channel of
//! every tensor comes from, and how many times it is repeated.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::Serialize;

use super::{InflationError, Result};
use crate::graph::{LayerSpec, NetworkGraph};

/// `multiplicity` consecutive copies of origin channels `start..start + len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub origin: String,
    pub start: usize,
    pub len: usize,
    pub multiplicity: usize,
}

impl Segment {
    pub fn channels(&self) -> usize {
        self.len * self.multiplicity
    }
}

pub type Provenance = Vec<Segment>;

/// Output channel count of every node, from layer specs alone.
pub fn channel_counts(g: &NetworkGraph) -> Result<HashMap<String, usize>> {
    let mut out: HashMap<String, usize> = HashMap::new();
    for i in g.topo_order()? {
        let n = &g.nodes[i];
        let first = || {
            n.inputs
                .first()
                .and_then(|s| out.get(s))
                .copied()
                .ok_or_else(|| InflationError::Provenance {
                    node: n.id.clone(),
                    detail: "input has no channel count".into(),
                })
        };
        let c = match &n.layer {
            LayerSpec::Input { channels, .. } => *channels,
            LayerSpec::Conv(c) => c.out_channels,
            LayerSpec::Dense(d) => d.units,
            LayerSpec::Concat => n.inputs.iter().map(|s| out.get(s).copied().unwrap_or(0)).sum(),
            _ => first()?,
        };
        out.insert(n.id.clone(), c);
    }
    Ok(out)
}

/// Provenance of every node's output, in topological order.
///
/// Input, Conv and Dense nodes are origins. When `expanded` is
/// `Some((id, m))`, node `id` is also an origin whose channels are `m`
/// block-major copies of `channels / m` distinct ones.
pub fn channel_provenance(
    g: &NetworkGraph,
    expanded: Option<(&str, usize)>,
) -> Result<IndexMap<String, Provenance>> {
    let counts = channel_counts(g)?;
    let mut out: IndexMap<String, Provenance> = IndexMap::new();
    for i in g.topo_order()? {
        let n = &g.nodes[i];
        let channels = counts[&n.id];
        let origin = |len: usize, multiplicity: usize| {
            vec![Segment {
                origin: n.id.clone(),
                start: 0,
                len,
                multiplicity,
            }]
        };
        let prov = match (&n.layer, expanded) {
            (_, Some((id, m))) if id == n.id => {
                if m == 0 || channels % m != 0 {
                    return Err(InflationError::Provenance {
                        node: n.id.clone(),
                        detail: format!("{channels} channels are not {m} equal copies"),
                    });
                }
                origin(channels / m, m)
            }
            (LayerSpec::Input { .. } | LayerSpec::Conv(_) | LayerSpec::Dense(_), _) => {
                origin(channels, 1)
            }
            (LayerSpec::Concat, _) => n.inputs.iter().flat_map(|s| out[s].clone()).collect(),
            _ => out[&n.inputs[0]].clone(),
        };
        let total: usize = prov.iter().map(Segment::channels).sum();
        if total != channels {
            return Err(InflationError::Provenance {
                node: n.id.clone(),
                detail: format!("segments cover {total} channels, tensor has {channels}"),
            });
        }
        out.insert(n.id.clone(), prov);
    }
    Ok(out)
}

/// For each channel of the expanded layout: its channel in the unexpanded
/// layout and the multiplicity of its segment.
pub(super) fn gather_map(prov: &[Segment]) -> Vec<(usize, usize)> {
    let mut map = Vec::with_capacity(prov.iter().map(Segment::channels).sum());
    let mut old = 0;
    for s in prov {
        for _ in 0..s.multiplicity {
            map.extend((0..s.len).map(|c| (old + c, s.multiplicity)));
        }
        old += s.len;
    }
    map
}
