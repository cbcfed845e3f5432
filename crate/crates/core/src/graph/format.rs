//! JSON graph documents.
//!
//! ```json
//! {"name": "...", "rank": "2d", "num_classes": 3, "inputs": ["input"], "output": "softmax",
//!  "nodes": [{"id": "input", "op": "input", "params": {"channels": 3},
//!             "inputs": [], "weights": []}, ...]}
//! ```

use std::collections::HashMap;

use serde_json::value::RawValue;
use serde_json::{json, Map, Value};

use super::{
    ensure_valid, BatchNormSpec, ConvSpec, DenseSpec, GraphError, LayerSpec, NetworkGraph, Node,
    PoolSpec, Rank, Result,
};
use crate::tensor::{Padding, PoolKind};

pub const DEFAULT_BN_EPS: f64 = 1e-3;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

const TOP_FIELDS: [&str; 6] = ["name", "rank", "num_classes", "inputs", "output", "nodes"];
const NODE_FIELDS: [&str; 5] = ["id", "op", "params", "inputs", "weights"];

fn padding_str(p: Padding) -> &'static str {
    match p {
        Padding::Same => "same",
        Padding::Valid => "valid",
    }
}

fn params_json(layer: &LayerSpec) -> Value {
    let pads = |p: &[Padding]| p.iter().map(|&p| padding_str(p)).collect::<Vec<_>>();
    match layer {
        LayerSpec::Input { channels, modality } => match modality {
            Some(m) => json!({"channels": channels, "modality": m}),
            None => json!({"channels": channels}),
        },
        LayerSpec::Conv(c) => json!({
            "in_channels": c.in_channels,
            "out_channels": c.out_channels,
            "kernel": c.kernel,
            "stride": c.stride,
            "padding": pads(&c.padding),
            "bias": c.bias,
        }),
        LayerSpec::Pool(p) => json!({
            "kind": match p.kind { PoolKind::Max => "max", PoolKind::Avg => "avg" },
            "window": p.window,
            "stride": p.stride,
            "padding": pads(&p.padding),
        }),
        LayerSpec::BatchNorm(b) => json!({
            "channels": b.channels,
            "eps": b.eps,
            "momentum": b.momentum,
        }),
        LayerSpec::Dense(d) => json!({"in_features": d.in_features, "units": d.units}),
        LayerSpec::Relu | LayerSpec::Concat | LayerSpec::GlobalAvgPool | LayerSpec::Softmax => {
            json!({})
        }
    }
}

/// Pretty-printed JSON document for `g`.
pub fn emit_graph(g: &NetworkGraph) -> String {
    let nodes: Vec<Value> = g
        .nodes
        .iter()
        .map(|n| {
            json!({
                "id": n.id,
                "op": n.layer.op_name(),
                "params": params_json(&n.layer),
                "inputs": n.inputs,
                "weights": n.weights,
            })
        })
        .collect();
    let doc = json!({
        "name": g.name,
        "rank": g.rank.as_str(),
        "num_classes": g.num_classes,
        "inputs": g.inputs,
        "output": g.output,
        "nodes": nodes,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("JSON values always serialize");
    s.push('\n');
    s
}

/// 1-based line and column of byte `offset` in `text`.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

struct Ctx<'a> {
    text: &'a str,
}

impl Ctx<'_> {
    fn at(&self, raw: &RawValue) -> String {
        let offset = raw.get().as_ptr() as usize - self.text.as_ptr() as usize;
        let (l, c) = line_col(self.text, offset);
        format!("line {l}, column {c}")
    }
}

fn parse_err(location: impl Into<String>, message: impl Into<String>) -> GraphError {
    GraphError::Parse {
        location: location.into(),
        message: message.into(),
    }
}

/// Field accessors for one JSON object, reporting against a fixed location.
struct Obj<'a> {
    map: &'a Map<String, Value>,
    loc: &'a str,
}

impl<'a> Obj<'a> {
    fn err(&self, m: String) -> GraphError {
        parse_err(self.loc, m)
    }

    fn only(&self, allowed: &[&str]) -> Result<()> {
        match self.map.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(self.err(format!("unknown field {k:?}"))),
            None => Ok(()),
        }
    }

    fn req(&self, key: &str) -> Result<&'a Value> {
        self.map
            .get(key)
            .ok_or_else(|| self.err(format!("missing field {key:?}")))
    }

    fn str(&self, key: &str) -> Result<&'a str> {
        self.req(key)?
            .as_str()
            .ok_or_else(|| self.err(format!("field {key:?} must be a string")))
    }

    fn usize_of(&self, key: &str, v: &Value) -> Result<usize> {
        v.as_u64()
            .map(|u| u as usize)
            .ok_or_else(|| self.err(format!("field {key:?} must be a non-negative integer")))
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.usize_of(key, self.req(key)?)
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| self.err(format!("field {key:?} must be a number"))),
        }
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_bool()
                .ok_or_else(|| self.err(format!("field {key:?} must be a boolean"))),
        }
    }

    fn strings(&self, key: &str) -> Result<Vec<String>> {
        let arr = self
            .req(key)?
            .as_array()
            .ok_or_else(|| self.err(format!("field {key:?} must be an array")))?;
        arr.iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| self.err(format!("field {key:?} must hold strings")))
            })
            .collect()
    }

    fn extents(&self, key: &str) -> Result<Vec<usize>> {
        let arr = self
            .req(key)?
            .as_array()
            .ok_or_else(|| self.err(format!("field {key:?} must be an array")))?;
        arr.iter().map(|v| self.usize_of(key, v)).collect()
    }

    /// A single string applies to every axis.
    fn padding(&self, key: &str, axes: usize) -> Result<Vec<Padding>> {
        let one = |v: &Value| -> Result<Padding> {
            match v.as_str() {
                Some("same") => Ok(Padding::Same),
                Some("valid") => Ok(Padding::Valid),
                _ => Err(self.err(format!("field {key:?}: padding must be \"same\" or \"valid\""))),
            }
        };
        match self.req(key)? {
            Value::Array(a) => a.iter().map(one).collect(),
            v => Ok(vec![one(v)?; axes]),
        }
    }
}

fn parse_layer(op: &str, p: &Obj<'_>, axes: usize) -> Result<LayerSpec> {
    let layer = match op {
        "input" => {
            p.only(&["channels", "modality"])?;
            LayerSpec::Input {
                channels: p.usize("channels")?,
                modality: match p.map.get("modality") {
                    None | Some(Value::Null) => None,
                    Some(_) => Some(p.str("modality")?.to_string()),
                },
            }
        }
        "conv" => {
            p.only(&["in_channels", "out_channels", "kernel", "stride", "padding", "bias"])?;
            LayerSpec::Conv(ConvSpec {
                in_channels: p.usize("in_channels")?,
                out_channels: p.usize("out_channels")?,
                kernel: p.extents("kernel")?,
                stride: p.extents("stride")?,
                padding: p.padding("padding", axes)?,
                bias: p.bool_or("bias", false)?,
            })
        }
        "pool" => {
            p.only(&["kind", "window", "stride", "padding"])?;
            LayerSpec::Pool(PoolSpec {
                kind: match p.str("kind")? {
                    "max" => PoolKind::Max,
                    "avg" => PoolKind::Avg,
                    other => return Err(p.err(format!("unknown pool kind {other:?}"))),
                },
                window: p.extents("window")?,
                stride: p.extents("stride")?,
                padding: p.padding("padding", axes)?,
            })
        }
        "batchnorm" => {
            p.only(&["channels", "eps", "momentum"])?;
            LayerSpec::BatchNorm(BatchNormSpec {
                channels: p.usize("channels")?,
                eps: p.f64_or("eps", DEFAULT_BN_EPS)?,
                momentum: p.f64_or("momentum", DEFAULT_BN_MOMENTUM)?,
            })
        }
        "dense" => {
            p.only(&["in_features", "units"])?;
            LayerSpec::Dense(DenseSpec {
                in_features: p.usize("in_features")?,
                units: p.usize("units")?,
            })
        }
        "relu" | "concat" | "global_avg_pool" | "softmax" => {
            p.only(&[])?;
            match op {
                "relu" => LayerSpec::Relu,
                "concat" => LayerSpec::Concat,
                "global_avg_pool" => LayerSpec::GlobalAvgPool,
                _ => LayerSpec::Softmax,
            }
        }
        other => return Err(p.err(format!("unknown op {other:?}"))),
    };
    Ok(layer)
}

fn parse_node(ctx: &Ctx<'_>, i: usize, raw: &RawValue, axes: usize) -> Result<Node> {
    let at = ctx.at(raw);
    let map: Map<String, Value> = serde_json::from_str(raw.get())
        .map_err(|_| parse_err(format!("node {i} at {at}"), "node must be an object"))?;
    let id_hint = map
        .get("id")
        .and_then(Value::as_str)
        .map(|s| format!(" ({s:?})"))
        .unwrap_or_default();
    let loc = format!("node {i}{id_hint} at {at}");
    let o = Obj { map: &map, loc: &loc };
    o.only(&NODE_FIELDS)?;
    let id = o.str("id")?.to_string();
    let op = o.str("op")?;
    let empty = Map::new();
    let params = match map.get("params") {
        None => &empty,
        Some(Value::Object(m)) => m,
        Some(_) => return Err(o.err("field \"params\" must be an object".into())),
    };
    let layer = parse_layer(op, &Obj { map: params, loc: &format!("{loc}, params") }, axes)?;
    Ok(Node {
        id,
        layer,
        inputs: o.strings("inputs")?,
        weights: if map.contains_key("weights") {
            o.strings("weights")?
        } else {
            vec![]
        },
    })
}

/// Parses and validates a graph document.
///
/// Errors carry the node index (and id when present) plus the line and
/// column of the offending node.
pub fn parse_graph(text: &str) -> Result<NetworkGraph> {
    let ctx = Ctx { text };
    let top: HashMap<String, &RawValue> = serde_json::from_str(text).map_err(|e| {
        parse_err(format!("line {}, column {}", e.line(), e.column()), e.to_string())
    })?;
    if let Some(k) = top.keys().find(|k| !TOP_FIELDS.contains(&k.as_str())) {
        return Err(parse_err(ctx.at(top[k]), format!("unknown top-level field {k:?}")));
    }
    let field = |k: &str| {
        top.get(k)
            .copied()
            .ok_or_else(|| parse_err("document", format!("missing top-level field {k:?}")))
    };
    let typed = |k: &str| -> Result<Value> {
        let raw = field(k)?;
        serde_json::from_str(raw.get()).map_err(|e| parse_err(ctx.at(raw), e.to_string()))
    };
    let map: Map<String, Value> = TOP_FIELDS
        .iter()
        .filter(|&&k| k != "nodes")
        .map(|&k| Ok((k.to_string(), typed(k)?)))
        .collect::<Result<_>>()?;
    let doc = Obj { map: &map, loc: "document" };
    let rank = match doc.str("rank")? {
        "2d" => Rank::Two,
        "3d" => Rank::Three,
        other => {
            return Err(parse_err(
                ctx.at(field("rank")?),
                format!("rank must be \"2d\" or \"3d\", got {other:?}"),
            ))
        }
    };
    let nodes_raw = field("nodes")?;
    let raws: Vec<&RawValue> = serde_json::from_str(nodes_raw.get())
        .map_err(|_| parse_err(ctx.at(nodes_raw), "\"nodes\" must be an array"))?;
    let nodes = raws
        .iter()
        .enumerate()
        .map(|(i, r)| parse_node(&ctx, i, r, rank.spatial_axes()))
        .collect::<Result<Vec<_>>>()?;
    let g = NetworkGraph {
        name: doc.str("name")?.to_string(),
        rank,
        num_classes: doc.usize("num_classes")?,
        inputs: doc.strings("inputs")?,
        output: doc.str("output")?.to_string(),
        nodes,
    };
    ensure_valid(&g)?;
    Ok(g)
}
