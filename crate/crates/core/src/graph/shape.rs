use std::collections::HashMap;

use indexmap::IndexMap;

use super::{ensure_valid, GraphError, LayerSpec, NetworkGraph, Result};
use crate::tensor::{AxisGeometry, Padding};

/// Activation dims per node id, in topological order.
pub type ShapeTable = IndexMap<String, Vec<usize>>;

/// Matches supplied tensors to Input nodes.
///
/// Keys may be modality tags or Input node ids; a single-input graph accepts
/// any single entry.
pub(super) fn resolve_inputs<'a, V>(
    g: &NetworkGraph,
    supplied: &'a HashMap<String, V>,
) -> Result<HashMap<String, &'a V>> {
    let mut out = HashMap::new();
    let modalities = g.input_modalities();
    if modalities.len() == 1 && supplied.len() == 1 {
        let v = supplied.values().next().expect("one entry");
        out.insert(modalities[0].0.to_string(), v);
        return Ok(out);
    }
    for (id, tag) in modalities {
        let v = tag
            .and_then(|t| supplied.get(t))
            .or_else(|| supplied.get(id))
            .ok_or_else(|| GraphError::MissingInput(tag.unwrap_or(id).to_string()))?;
        out.insert(id.to_string(), v);
    }
    Ok(out)
}

fn spatial_out(
    node: &str,
    x: &[usize],
    window: &[usize],
    stride: &[usize],
    padding: &[Padding],
) -> Result<Vec<usize>> {
    let err = |detail: String| GraphError::Shape {
        node: node.to_string(),
        detail,
    };
    if x.len() != window.len() + 2 {
        return Err(err(format!(
            "input dims {x:?} do not have {} spatial axes",
            window.len()
        )));
    }
    x[2..]
        .iter()
        .enumerate()
        .map(|(a, &n)| {
            AxisGeometry::new(n, window[a], stride[a], padding[a])
                .map(|g| g.output)
                .ok_or_else(|| err(format!("axis {a}: extent {n} smaller than window {}", window[a])))
        })
        .collect()
}

/// Output dims of one node given its input dims.
pub(super) fn node_output_dims(
    node: &super::Node,
    rank_axes: usize,
    ins: &[&[usize]],
) -> Result<Vec<usize>> {
    let id = node.id.as_str();
    let err = |detail: String| GraphError::Shape {
        node: id.to_string(),
        detail,
    };
    let chan = |x: &[usize], want: usize, what: &str| -> Result<()> {
        if x.len() < 2 || x[1] != want {
            return Err(err(format!("{what}: expected {want} channels, input dims {x:?}")));
        }
        Ok(())
    };
    Ok(match &node.layer {
        LayerSpec::Input { channels, .. } => {
            let x = ins[0];
            if x.len() != rank_axes + 2 {
                return Err(err(format!(
                    "input needs {} dims, got {x:?}",
                    rank_axes + 2
                )));
            }
            chan(x, *channels, "input")?;
            if x.contains(&0) {
                return Err(err(format!("zero extent in {x:?}")));
            }
            x.to_vec()
        }
        LayerSpec::Conv(c) => {
            chan(ins[0], c.in_channels, "conv")?;
            let mut d = vec![ins[0][0], c.out_channels];
            d.extend(spatial_out(id, ins[0], &c.kernel, &c.stride, &c.padding)?);
            d
        }
        LayerSpec::Pool(p) => {
            let mut d = ins[0][..2.min(ins[0].len())].to_vec();
            d.extend(spatial_out(id, ins[0], &p.window, &p.stride, &p.padding)?);
            d
        }
        LayerSpec::BatchNorm(b) => {
            chan(ins[0], b.channels, "batchnorm")?;
            ins[0].to_vec()
        }
        LayerSpec::Relu => ins[0].to_vec(),
        LayerSpec::Concat => {
            let first = ins[0];
            let mut d = first.to_vec();
            d[1] = 0;
            for x in ins {
                if x.len() != first.len()
                    || x[0] != first[0]
                    || x[2..] != first[2..]
                {
                    return Err(err(format!(
                        "concat operands disagree off the channel axis: {first:?} vs {x:?}"
                    )));
                }
                d[1] += x[1];
            }
            d
        }
        LayerSpec::Dense(dn) => {
            let x = ins[0];
            if x.len() != 2 || x[1] != dn.in_features {
                return Err(err(format!(
                    "dense expects [N, {}], got {x:?}",
                    dn.in_features
                )));
            }
            vec![x[0], dn.units]
        }
        LayerSpec::GlobalAvgPool => {
            let x = ins[0];
            if x.len() < 3 {
                return Err(err(format!("global pooling needs spatial axes, got {x:?}")));
            }
            vec![x[0], x[1]]
        }
        LayerSpec::Softmax => {
            let x = ins[0];
            if x.len() != 2 {
                return Err(err(format!("softmax expects [N, K], got {x:?}")));
            }
            x.to_vec()
        }
    })
}

/// Propagates input dims through the graph without touching weights.
///
/// `inputs` is keyed like [`execute`](super::execute).
pub fn infer_shapes(g: &NetworkGraph, inputs: &HashMap<String, Vec<usize>>) -> Result<ShapeTable> {
    ensure_valid(g)?;
    let supplied = resolve_inputs(g, inputs)?;
    let mut table = ShapeTable::new();
    for i in g.topo_order()? {
        let n = &g.nodes[i];
        let dims = if let LayerSpec::Input { .. } = n.layer {
            node_output_dims(n, g.rank.spatial_axes(), &[supplied[&n.id].as_slice()])?
        } else {
            let ins: Vec<&[usize]> = n.inputs.iter().map(|s| table[s].as_slice()).collect();
            node_output_dims(n, g.rank.spatial_axes(), &ins)?
        };
        table.insert(n.id.clone(), dims);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ConvSpec, DenseSpec, Rank};

    #[test]
    fn conv_gap_dense_shapes() {
        let mut g = NetworkGraph::new("t", Rank::Three, 4);
        g.add("x", LayerSpec::Input { channels: 2, modality: None }, &[]);
        g.add(
            "c",
            LayerSpec::Conv(ConvSpec {
                in_channels: 2,
                out_channels: 5,
                kernel: vec![3, 3, 3],
                stride: vec![1, 2, 2],
                padding: vec![Padding::Same; 3],
                bias: true,
            }),
            &["x"],
        );
        g.add("gap", LayerSpec::GlobalAvgPool, &["c"]);
        g.output = g.add("fc", LayerSpec::Dense(DenseSpec { in_features: 5, units: 4 }), &["gap"]);
        let t = infer_shapes(&g, &HashMap::from([("any".into(), vec![2, 2, 5, 9, 8])])).unwrap();
        assert_eq!(t["c"], vec![2, 5, 5, 5, 4]);
        assert_eq!(t["fc"], vec![2, 4]);
    }

    #[test]
    fn channel_mismatch_names_node() {
        let mut g = NetworkGraph::new("t", Rank::Two, 2);
        g.add("x", LayerSpec::Input { channels: 3, modality: None }, &[]);
        g.output = g.add("gap", LayerSpec::GlobalAvgPool, &["x"]);
        let e = infer_shapes(&g, &HashMap::from([("x".into(), vec![1, 2, 4, 4])])).unwrap_err();
        assert!(e.to_string().contains("\"x\""), "{e}");
    }
}
