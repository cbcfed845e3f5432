use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::provenance::{channel_provenance, gather_map};
use super::{InflationError, Result};
use crate::graph::{ensure_valid, DenseSpec, LayerSpec, NetworkGraph, Node};
use crate::tensor::{DType, DynTensor, Element, Tensor};
use crate::weights::WeightStore;

/// Joins an original id and a modality name in per-modality copies.
pub const MODALITY_SEPARATOR: char = '@';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    Early,
    Intermediate,
}

impl FusionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::Early => "early",
            FusionStrategy::Intermediate => "intermediate",
        }
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "early" => Ok(FusionStrategy::Early),
            "intermediate" => Ok(FusionStrategy::Intermediate),
            other => Err(format!("unknown fusion strategy {other:?}, expected early or intermediate")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub strategy: FusionStrategy,
    pub modalities: Vec<String>,
}

impl FusionSpec {
    pub fn new(strategy: FusionStrategy, modalities: &[&str]) -> Self {
        FusionSpec {
            strategy,
            modalities: modalities.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.modalities.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(InflationError::InvalidFusion("no modalities".into()));
        }
        let mut seen = HashSet::new();
        for m in &self.modalities {
            if m.is_empty() || m.contains(MODALITY_SEPARATOR) || m.contains('+') {
                return Err(InflationError::InvalidFusion(format!(
                    "bad modality name {m:?}"
                )));
            }
            if !seen.insert(m) {
                return Err(InflationError::InvalidFusion(format!("duplicate modality {m:?}")));
            }
        }
        Ok(())
    }
}

/// Gathers slices along `axis`; `map[j] = (source index, multiplicity)`.
fn gather<T: Element>(
    t: &Tensor<T>,
    axis: usize,
    map: &[(usize, usize)],
    divide: bool,
) -> Result<Tensor<T>> {
    let dims = t.dims();
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let len = dims[axis];
    let mut out = Vec::with_capacity(outer * map.len() * inner);
    for o in 0..outer {
        for &(src, mult) in map {
            let base = (o * len + src) * inner;
            let block = &t.data()[base..base + inner];
            if divide && mult > 1 {
                out.extend(block.iter().map(|v| T::of_f64(v.as_f64() / mult as f64)));
            } else {
                out.extend_from_slice(block);
            }
        }
    }
    let mut nd = dims.to_vec();
    nd[axis] = map.len();
    Ok(Tensor::new(nd, out)?)
}

fn gather_dyn(t: &DynTensor, axis: usize, map: &[(usize, usize)], divide: bool) -> Result<DynTensor> {
    Ok(match t {
        DynTensor::F32(t) => gather(t, axis, map, divide)?.into(),
        DynTensor::F64(t) => gather(t, axis, map, divide)?.into(),
    })
}

fn slot<'a>(w: &'a WeightStore, name: &str) -> Result<&'a DynTensor> {
    w.get(name)
        .ok_or_else(|| InflationError::MissingWeight(name.to_string()))
}

/// Rebuilds every consumer of `tensor_id` after its channels were
/// multiplied by `m` upstream.
///
/// Provenance is traced through pass-through nodes and concatenations. Conv
/// and Dense consumers gather their original input-channel slices, tiling
/// duplicated segments and dividing them by their multiplicity; batch-norm
/// nodes on duplicated channels replicate their parameters undivided.
pub fn expand_consumers(
    g: &NetworkGraph,
    w: &WeightStore,
    tensor_id: &str,
    m: usize,
) -> Result<(NetworkGraph, WeightStore)> {
    if g.node(tensor_id).is_none() {
        return Err(InflationError::InvalidArgument(format!("unknown tensor {tensor_id:?}")));
    }
    if m <= 1 {
        return Ok((g.clone(), w.clone()));
    }
    let prov = channel_provenance(g, Some((tensor_id, m)))?;
    let mut g2 = g.clone();
    let mut w2 = w.clone();
    for n in g2.nodes.iter_mut() {
        let Some(input) = n.inputs.first() else { continue };
        let p = &prov[input];
        if p.iter().all(|s| s.multiplicity == 1) {
            continue;
        }
        let map = gather_map(p);
        let old: usize = p.iter().map(|s| s.len).sum();
        let mismatch = |have: usize| InflationError::Provenance {
            node: n.id.clone(),
            detail: format!("layer expects {have} input channels, provenance traces {old}"),
        };
        match &mut n.layer {
            LayerSpec::Conv(c) => {
                if c.in_channels != old {
                    return Err(mismatch(c.in_channels));
                }
                let k = slot(&w2, &n.weights[0])?;
                let nk = gather_dyn(k, 1, &map, true)?;
                w2.set(n.weights[0].clone(), nk)?;
                c.in_channels = map.len();
            }
            LayerSpec::Dense(d) => {
                if d.in_features != old {
                    return Err(mismatch(d.in_features));
                }
                let k = slot(&w2, &n.weights[0])?;
                let nk = gather_dyn(k, 0, &map, true)?;
                w2.set(n.weights[0].clone(), nk)?;
                d.in_features = map.len();
            }
            LayerSpec::BatchNorm(b) => {
                if b.channels != old {
                    return Err(mismatch(b.channels));
                }
                for s in &n.weights {
                    let v = gather_dyn(slot(&w2, s)?, 0, &map, false)?;
                    w2.set(s.clone(), v)?;
                }
                b.channels = map.len();
            }
            _ => {}
        }
    }
    ensure_valid(&g2)?;
    g2.check_weights(&w2)?;
    Ok((g2, w2))
}

/// Node indices of the stem unit: the first conv (fed directly by an Input)
/// plus its sole batch-norm consumer and that node's sole ReLU consumer.
pub fn stem_unit(g: &NetworkGraph) -> Result<Vec<usize>> {
    let order = g.topo_order()?;
    let &first = order
        .iter()
        .find(|&&i| matches!(g.nodes[i].layer, LayerSpec::Conv(_)))
        .ok_or_else(|| InflationError::NoConvStem("graph has no conv layer".into()))?;
    let conv = &g.nodes[first];
    let fed_by_input = g
        .node(&conv.inputs[0])
        .is_some_and(|n| matches!(n.layer, LayerSpec::Input { .. }));
    if !fed_by_input {
        return Err(InflationError::NoConvStem(format!(
            "first conv {:?} is not fed by an input",
            conv.id
        )));
    }
    let mut unit = vec![first];
    let sole = |i: usize| {
        let c = g.consumers(&g.nodes[i].id);
        (c.len() == 1).then(|| c[0])
    };
    if let Some(bn) = sole(first).filter(|&j| matches!(g.nodes[j].layer, LayerSpec::BatchNorm(_))) {
        unit.push(bn);
    }
    let last = *unit.last().expect("non-empty");
    if let Some(r) = sole(last).filter(|&j| matches!(g.nodes[j].layer, LayerSpec::Relu)) {
        unit.push(r);
    }
    Ok(unit)
}

fn single_input(g: &NetworkGraph) -> Result<&Node> {
    if g.inputs.len() != 1 {
        return Err(InflationError::InvalidFusion(format!(
            "fusion needs a single-input graph, found {} inputs",
            g.inputs.len()
        )));
    }
    g.node(&g.inputs[0])
        .ok_or_else(|| InflationError::Structure("declared input missing".into()))
}

/// All modalities concatenated on the channel axis before the first conv,
/// whose kernel is tiled across modalities and divided by their count.
pub fn build_early_fusion(
    g3: &NetworkGraph,
    w3: &WeightStore,
    fusion: &FusionSpec,
) -> Result<(NetworkGraph, WeightStore)> {
    fusion.validate()?;
    if fusion.strategy != FusionStrategy::Early {
        return Err(InflationError::InvalidFusion("expected the early strategy".into()));
    }
    ensure_valid(g3)?;
    let input = single_input(g3)?.id.clone();
    let m = fusion.count();
    if m == 1 {
        return Ok((g3.clone(), w3.clone()));
    }
    for c in g3.consumers(&input) {
        if !matches!(g3.nodes[c].layer, LayerSpec::Conv(_)) {
            return Err(InflationError::NoConvStem(format!(
                "input feeds {:?}, a {} layer, instead of a conv",
                g3.nodes[c].id,
                g3.nodes[c].layer.op_name()
            )));
        }
    }
    let mut g = g3.clone();
    g.name = format!("{}-early", g3.name);
    if let Some(LayerSpec::Input { channels, modality }) = g.node_mut(&input).map(|n| &mut n.layer) {
        *channels *= m;
        *modality = Some(fusion.modalities.join("+"));
    }
    expand_consumers(&g, w3, &input, m)
}

/// Per-modality copies of the stem unit whose outputs are concatenated;
/// downstream consumers are expanded with multiplicity `|M|`.
///
/// Copies are named `{id}@{modality}` and keep the (depth-inflated) stem
/// weights unchanged. The concatenation takes over the id of the unit's last
/// node, so the rest of the graph is untouched structurally.
pub fn build_intermediate_fusion(
    g3: &NetworkGraph,
    w3: &WeightStore,
    fusion: &FusionSpec,
) -> Result<(NetworkGraph, WeightStore)> {
    fusion.validate()?;
    if fusion.strategy != FusionStrategy::Intermediate || fusion.count() < 2 {
        return Err(InflationError::InvalidFusion(
            "intermediate fusion needs at least two modalities".into(),
        ));
    }
    ensure_valid(g3)?;
    g3.check_weights(w3)?;
    let input = single_input(g3)?.clone();
    let unit = stem_unit(g3)?;
    if g3.nodes[unit[0]].inputs[0] != input.id {
        return Err(InflationError::NoConvStem("stem conv is not fed by the input".into()));
    }
    let last_id = g3.nodes[*unit.last().expect("non-empty")].id.clone();
    let removed: HashSet<&str> = unit
        .iter()
        .map(|&i| g3.nodes[i].id.as_str())
        .chain([input.id.as_str()])
        .collect();
    if g3
        .consumers(&input.id)
        .iter()
        .any(|&c| !removed.contains(g3.nodes[c].id.as_str()))
    {
        return Err(InflationError::NoConvStem(
            "input has consumers besides the stem conv".into(),
        ));
    }
    let tagged = |id: &str, m: &str| format!("{id}{MODALITY_SEPARATOR}{m}");

    let mut g = NetworkGraph::new(format!("{}-intermediate", g3.name), g3.rank, g3.num_classes);
    g.output = g3.output.clone();
    let mut w = WeightStore::new();
    let mut branch_outputs = Vec::new();
    for m in &fusion.modalities {
        let mut layer = input.layer.clone();
        if let LayerSpec::Input { modality, .. } = &mut layer {
            *modality = Some(m.clone());
        }
        let mut prev = tagged(&input.id, m);
        g.inputs.push(prev.clone());
        g.nodes.push(Node {
            id: prev.clone(),
            layer,
            inputs: vec![],
            weights: vec![],
        });
        for &i in &unit {
            let n = &g3.nodes[i];
            let id = tagged(&n.id, m);
            let weights: Vec<String> = n.weights.iter().map(|s| tagged(s, m)).collect();
            for (src, dst) in n.weights.iter().zip(&weights) {
                w.insert(dst.clone(), slot(w3, src)?.clone())?;
            }
            g.nodes.push(Node {
                id: id.clone(),
                layer: n.layer.clone(),
                inputs: vec![prev],
                weights,
            });
            prev = id;
        }
        branch_outputs.push(prev);
    }
    g.nodes.push(Node {
        id: last_id.clone(),
        layer: LayerSpec::Concat,
        inputs: branch_outputs,
        weights: vec![],
    });
    for n in &g3.nodes {
        if removed.contains(n.id.as_str()) {
            continue;
        }
        for s in &n.weights {
            w.insert(s.clone(), slot(w3, s)?.clone())?;
        }
        g.nodes.push(n.clone());
    }
    ensure_valid(&g)?;
    expand_consumers(&g, &w, &last_id, fusion.count())
}

fn uniform<T: Element>(dims: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<DynTensor> {
    Ok(T::wrap(Tensor::<T>::from_fn(dims, |_| {
        T::of_f64(rng.gen_range(-bound..=bound))
    })?))
}

/// Early or intermediate fusion, whichever `fusion` names.
pub fn build_fusion(
    g3: &NetworkGraph,
    w3: &WeightStore,
    fusion: &FusionSpec,
) -> Result<(NetworkGraph, WeightStore)> {
    match fusion.strategy {
        FusionStrategy::Early => build_early_fusion(g3, w3, fusion),
        FusionStrategy::Intermediate => build_intermediate_fusion(g3, w3, fusion),
    }
}

/// Replaces the final dense layer of a `GlobalAvgPool -> Dense -> Softmax`
/// head with fresh `F x num_classes` weights, uniform in
/// `±sqrt(6 / (F + num_classes))`, and a zero bias.
pub fn reinit_classifier(
    g: &NetworkGraph,
    w: &WeightStore,
    num_classes: usize,
    seed: u64,
) -> Result<(NetworkGraph, WeightStore)> {
    if num_classes == 0 {
        return Err(InflationError::InvalidArgument("num_classes must be >= 1".into()));
    }
    let head = |msg: &str| InflationError::HeadNotFound(msg.to_string());
    let out = g.node(&g.output).ok_or_else(|| head("output node missing"))?;
    if !matches!(out.layer, LayerSpec::Softmax) {
        return Err(head("output is not a softmax"));
    }
    let dense = g.node(&out.inputs[0]).ok_or_else(|| head("softmax input missing"))?;
    let LayerSpec::Dense(spec) = &dense.layer else {
        return Err(head("softmax is not fed by a dense layer"));
    };
    let gap_ok = g
        .node(&dense.inputs[0])
        .is_some_and(|n| matches!(n.layer, LayerSpec::GlobalAvgPool));
    if !gap_ok {
        return Err(head("dense layer is not fed by global average pooling"));
    }
    let f = spec.in_features;
    let dtype = w.get(&dense.weights[0]).map_or(DType::F32, DynTensor::dtype);
    let bound = (6.0 / (f + num_classes) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (kernel, bias) = match dtype {
        DType::F32 => (
            uniform::<f32>(&[f, num_classes], bound, &mut rng)?,
            DynTensor::from(Tensor::<f32>::zeros(&[num_classes])?),
        ),
        DType::F64 => (
            uniform::<f64>(&[f, num_classes], bound, &mut rng)?,
            DynTensor::from(Tensor::<f64>::zeros(&[num_classes])?),
        ),
    };
    let mut g2 = g.clone();
    g2.num_classes = num_classes;
    let id = dense.id.clone();
    let slots = dense.weights.clone();
    g2.node_mut(&id).expect("exists").layer = LayerSpec::Dense(DenseSpec {
        in_features: f,
        units: num_classes,
    });
    let mut w2 = w.clone();
    w2.set(slots[0].clone(), kernel)?;
    w2.set(slots[1].clone(), bias)?;
    Ok((g2, w2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BatchNormSpec, ConvSpec, Rank};
    use crate::tensor::Padding;

    fn conv(i: usize, o: usize) -> LayerSpec {
        LayerSpec::Conv(ConvSpec {
            in_channels: i,
            out_channels: o,
            kernel: vec![1, 1, 1],
            stride: vec![1, 1, 1],
            padding: vec![Padding::Same; 3],
            bias: false,
        })
    }

    fn chain() -> (NetworkGraph, WeightStore) {
        let mut g = NetworkGraph::new("c", Rank::Three, 2);
        g.add("x", LayerSpec::Input { channels: 3, modality: None }, &[]);
        g.add("c1", conv(3, 2), &["x"]);
        g.add(
            "bn",
            LayerSpec::BatchNorm(BatchNormSpec { channels: 2, eps: 1e-3, momentum: 0.01 }),
            &["c1"],
        );
        g.add("r", LayerSpec::Relu, &["bn"]);
        g.output = g.add("c2", conv(2, 1), &["r"]);
        let mut w = WeightStore::new();
        for n in &g.nodes {
            for (s, d) in n.weights.iter().zip(n.layer.slot_dims()) {
                let mut k = 0.0;
                w.insert(s.clone(), Tensor::<f64>::from_fn(&d, |_| { k += 1.0; k }).unwrap()).unwrap();
            }
        }
        (g, w)
    }

    #[test]
    fn intermediate_chain_halves_second_conv() {
        let (g, w) = chain();
        let spec = FusionSpec::new(FusionStrategy::Intermediate, &["T1", "T2"]);
        let (f, fw) = build_intermediate_fusion(&g, &w, &spec).unwrap();
        assert_eq!(f.inputs, vec!["x@T1", "x@T2"]);
        assert_eq!(f.node("r").unwrap().layer, LayerSpec::Concat);
        let k = fw.get_as::<f64>("c2.kernel").unwrap();
        assert_eq!(k.dims(), &[1, 4, 1, 1, 1]);
        assert_eq!(k.data(), &[0.5, 1.0, 0.5, 1.0]);
        assert_eq!(fw.get("c1.kernel@T2"), w.get("c1.kernel"));
        assert!(fw.get("c1.kernel").is_none());
    }

    #[test]
    fn early_single_modality_is_identity() {
        let (g, w) = chain();
        let (f, fw) = build_early_fusion(&g, &w, &FusionSpec::new(FusionStrategy::Early, &["T1"])).unwrap();
        assert_eq!((f, fw), (g, w));
    }

    #[test]
    fn expand_with_multiplicity_one_is_noop() {
        let (g, w) = chain();
        assert_eq!(expand_consumers(&g, &w, "r", 1).unwrap(), (g, w));
    }

    #[test]
    fn fusion_spec_validation() {
        assert!(FusionSpec::new(FusionStrategy::Early, &["T1", "T1"]).validate().is_err());
        assert!(FusionSpec::new(FusionStrategy::Early, &[]).validate().is_err());
        assert!(FusionSpec::new(FusionStrategy::Early, &["a@b"]).validate().is_err());
    }

    #[test]
    fn missing_head_is_reported() {
        let (g, w) = chain();
        assert!(matches!(
            reinit_classifier(&g, &w, 3, 0),
            Err(InflationError::HeadNotFound(_))
        ));
    }
}
