use std::borrow::Cow;
use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;

use super::shape::{node_output_dims, resolve_inputs};
use super::{ensure_valid, GraphError, LayerSpec, NetworkGraph, Node, Result};
use crate::tensor::{
    batchnorm_backward, batchnorm_forward, concat_backward, concat_channels, conv_backward,
    conv_forward, dense_backward, dense_forward, global_avg_pool, global_avg_pool_backward,
    pool_backward, pool_forward, relu, relu_backward, softmax, softmax_backward, BatchNormParams,
    BatchStats, BnMode, ConvParams, ConvPath, Element, Exec, Kernel, PoolParams, Tensor,
    TensorError,
};
use crate::weights::WeightStore;

/// Which intermediate activations [`execute`] returns.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum Capture {
    #[default]
    None,
    All,
    Nodes(HashSet<String>),
}

impl Capture {
    fn wants(&self, id: &str) -> bool {
        match self {
            Capture::None => false,
            Capture::All => true,
            Capture::Nodes(s) => s.contains(id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecOptions {
    pub capture: Capture,
    pub exec: Exec,
    pub conv_path: ConvPath,
    pub bn_mode: BnMode,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            capture: Capture::None,
            exec: Exec::Deterministic,
            conv_path: ConvPath::Im2col,
            bn_mode: BnMode::Infer,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Execution<T: Element = f32> {
    pub output: Tensor<T>,
    /// Captured activations in topological order.
    pub captured: IndexMap<String, Tensor<T>>,
}

fn tensor_err(node: &Node) -> impl Fn(TensorError) -> GraphError + '_ {
    move |source| GraphError::Tensor {
        node: node.id.clone(),
        source,
    }
}

fn slot<'a, T: Element>(
    store: &'a WeightStore,
    node: &Node,
    i: usize,
    expected: &[usize],
) -> Result<Cow<'a, Tensor<T>>> {
    let name = &node.weights[i];
    let t = store.get_as::<T>(name).ok_or_else(|| GraphError::MissingWeight {
        node: node.id.clone(),
        slot: name.clone(),
    })?;
    if t.dims() != expected {
        return Err(GraphError::WeightShape {
            node: node.id.clone(),
            slot: name.clone(),
            expected: expected.to_vec(),
            found: t.dims().to_vec(),
        });
    }
    Ok(t)
}

fn conv_kernel<T: Element>(store: &WeightStore, node: &Node) -> Result<(Kernel<T>, ConvParams)> {
    let LayerSpec::Conv(c) = &node.layer else {
        unreachable!("conv_kernel on {}", node.layer.op_name())
    };
    let w = slot::<T>(store, node, 0, &c.kernel_dims())?.into_owned();
    let b = if c.bias {
        Some(slot::<T>(store, node, 1, &[c.out_channels])?.data().to_vec())
    } else {
        None
    };
    let k = Kernel::new(w, b).map_err(tensor_err(node))?;
    Ok((k, ConvParams::new(c.stride.clone(), c.padding.clone())))
}

fn bn_params<T: Element>(store: &WeightStore, node: &Node) -> Result<BatchNormParams<T>> {
    let LayerSpec::BatchNorm(b) = &node.layer else {
        unreachable!("bn_params on {}", node.layer.op_name())
    };
    let get = |i| slot::<T>(store, node, i, &[b.channels]).map(|t| t.data().to_vec());
    Ok(BatchNormParams {
        gamma: get(0)?,
        beta: get(1)?,
        running_mean: get(2)?,
        running_var: get(3)?,
        eps: b.eps,
        momentum: b.momentum,
    })
}

fn pool_params(node: &Node) -> PoolParams {
    let LayerSpec::Pool(p) = &node.layer else {
        unreachable!("pool_params on {}", node.layer.op_name())
    };
    PoolParams {
        kind: p.kind,
        window: p.window.clone(),
        conv: ConvParams::new(p.stride.clone(), p.padding.clone()),
    }
}

fn dense_params<'a, T: Element>(
    store: &'a WeightStore,
    node: &Node,
) -> Result<(Cow<'a, Tensor<T>>, Cow<'a, Tensor<T>>)> {
    let LayerSpec::Dense(d) = &node.layer else {
        unreachable!("dense_params on {}", node.layer.op_name())
    };
    Ok((
        slot(store, node, 0, &[d.in_features, d.units])?,
        slot(store, node, 1, &[d.units])?,
    ))
}

fn eval_node<T: Element>(
    node: &Node,
    rank_axes: usize,
    store: &WeightStore,
    ins: &[&Tensor<T>],
    opts: &ExecOptions,
) -> Result<(Tensor<T>, Option<BatchStats>)> {
    let te = tensor_err(node);
    let x = ins[0];
    let y = match &node.layer {
        LayerSpec::Input { .. } => {
            node_output_dims(node, rank_axes, &[x.dims()])?;
            x.clone()
        }
        LayerSpec::Conv(_) => {
            let (k, p) = conv_kernel(store, node)?;
            conv_forward(x, &k, &p, opts.conv_path, opts.exec).map_err(te)?
        }
        LayerSpec::Pool(_) => pool_forward(x, &pool_params(node)).map_err(te)?,
        LayerSpec::BatchNorm(_) => {
            let out = batchnorm_forward(x, &bn_params(store, node)?, opts.bn_mode).map_err(te)?;
            return finite(node, out.y).map(|y| (y, out.stats));
        }
        LayerSpec::Relu => relu(x),
        LayerSpec::Concat => {
            node_output_dims(node, rank_axes, &ins.iter().map(|t| t.dims()).collect::<Vec<_>>())?;
            concat_channels(ins).map_err(te)?
        }
        LayerSpec::Dense(_) => {
            let (w, b) = dense_params::<T>(store, node)?;
            dense_forward(x, &w, b.data()).map_err(te)?
        }
        LayerSpec::GlobalAvgPool => global_avg_pool(x).map_err(te)?,
        LayerSpec::Softmax => softmax(x).map_err(te)?,
    };
    finite(node, y).map(|y| (y, None))
}

fn finite<T: Element>(node: &Node, y: Tensor<T>) -> Result<Tensor<T>> {
    if y.all_finite() {
        Ok(y)
    } else {
        Err(GraphError::NonFinite {
            node: node.id.clone(),
        })
    }
}

/// Runs the graph forward.
///
/// `inputs` maps modality tags (or Input node ids) to tensors; a single-input
/// graph accepts any single entry. Intermediate activations are dropped once
/// their last consumer has run unless captured.
pub fn execute<T: Element>(
    g: &NetworkGraph,
    store: &WeightStore,
    inputs: &HashMap<String, Tensor<T>>,
    opts: &ExecOptions,
) -> Result<Execution<T>> {
    ensure_valid(g)?;
    let supplied = resolve_inputs(g, inputs)?;
    let order = g.topo_order()?;
    let index = g.index();
    let out_idx = index[g.output.as_str()];
    let mut uses = vec![0usize; g.nodes.len()];
    for n in &g.nodes {
        for i in &n.inputs {
            uses[index[i.as_str()]] += 1;
        }
    }
    let keep: Vec<bool> = g
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| i == out_idx || opts.capture.wants(&n.id))
        .collect();
    let mut values: Vec<Option<Tensor<T>>> = vec![None; g.nodes.len()];
    for &i in &order {
        let n = &g.nodes[i];
        let (y, _) = if let LayerSpec::Input { .. } = n.layer {
            eval_node(n, g.rank.spatial_axes(), store, &[supplied[&n.id]], opts)?
        } else {
            let ins: Vec<&Tensor<T>> = n
                .inputs
                .iter()
                .map(|s| values[index[s.as_str()]].as_ref().expect("producer ran"))
                .collect();
            eval_node(n, g.rank.spatial_axes(), store, &ins, opts)?
        };
        for s in &n.inputs {
            let j = index[s.as_str()];
            uses[j] -= 1;
            if uses[j] == 0 && !keep[j] {
                values[j] = None;
            }
        }
        values[i] = Some(y);
    }
    let mut captured = IndexMap::new();
    for &i in &order {
        if opts.capture.wants(&g.nodes[i].id) {
            let t = if i == out_idx {
                values[i].clone()
            } else {
                values[i].take()
            };
            captured.insert(g.nodes[i].id.clone(), t.expect("kept"));
        }
    }
    Ok(Execution {
        output: values[out_idx].take().expect("output computed"),
        captured,
    })
}

/// Every activation of a forward pass, kept for [`backward`].
#[derive(Debug, Clone)]
pub struct Tape<T: Element = f32> {
    values: Vec<Tensor<T>>,
    stats: Vec<Option<BatchStats>>,
    opts: ExecOptions,
    out_idx: usize,
}

impl<T: Element> Tape<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.values[self.out_idx]
    }

    pub fn value(&self, g: &NetworkGraph, id: &str) -> Option<&Tensor<T>> {
        g.nodes.iter().position(|n| n.id == id).map(|i| &self.values[i])
    }

    /// Running-statistic updates from a train-mode pass, as (slot, tensor).
    pub fn running_updates(
        &self,
        g: &NetworkGraph,
        store: &WeightStore,
    ) -> Result<Vec<(String, Tensor<T>)>> {
        let mut out = Vec::new();
        for (i, n) in g.nodes.iter().enumerate() {
            if let Some(stats) = &self.stats[i] {
                let p = bn_params::<T>(store, n)?;
                let (m, v) = p.updated_running(stats);
                let c = m.len();
                let mk = |d: Vec<T>| Tensor::new(vec![c], d).map_err(tensor_err(n));
                out.push((n.weights[2].clone(), mk(m)?));
                out.push((n.weights[3].clone(), mk(v)?));
            }
        }
        Ok(out)
    }
}

/// Forward pass retaining all activations (and batch statistics in train mode).
pub fn forward_train<T: Element>(
    g: &NetworkGraph,
    store: &WeightStore,
    inputs: &HashMap<String, Tensor<T>>,
    opts: &ExecOptions,
) -> Result<Tape<T>> {
    ensure_valid(g)?;
    let supplied = resolve_inputs(g, inputs)?;
    let index = g.index();
    let mut values: Vec<Option<Tensor<T>>> = vec![None; g.nodes.len()];
    let mut stats = vec![None; g.nodes.len()];
    for i in g.topo_order()? {
        let n = &g.nodes[i];
        let (y, s) = if let LayerSpec::Input { .. } = n.layer {
            eval_node(n, g.rank.spatial_axes(), store, &[supplied[&n.id]], opts)?
        } else {
            let ins: Vec<&Tensor<T>> = n
                .inputs
                .iter()
                .map(|s| values[index[s.as_str()]].as_ref().expect("producer ran"))
                .collect();
            eval_node(n, g.rank.spatial_axes(), store, &ins, opts)?
        };
        values[i] = Some(y);
        stats[i] = s;
    }
    Ok(Tape {
        values: values.into_iter().map(|v| v.expect("all nodes ran")).collect(),
        stats,
        opts: opts.clone(),
        out_idx: index[g.output.as_str()],
    })
}

/// Where backpropagation starts.
#[derive(Debug, Clone, Copy)]
pub enum Seed<'a, T: Element> {
    /// Cotangent of the graph output.
    Output(&'a Tensor<T>),
    /// Mean cross-entropy of a softmax output against labels; the fused
    /// gradient `(p - onehot) / N` is injected below the softmax.
    SoftmaxCrossEntropy(&'a [usize]),
}

#[derive(Debug, Clone)]
pub struct Gradients<T: Element = f32> {
    /// One entry per trainable slot, zero where no gradient flowed.
    pub params: IndexMap<String, Tensor<T>>,
    /// Gradients w.r.t. each Input node's tensor, keyed by node id.
    pub inputs: IndexMap<String, Tensor<T>>,
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Reverse-mode pass over a [`Tape`].
pub fn backward<T: Element>(
    g: &NetworkGraph,
    store: &WeightStore,
    tape: &Tape<T>,
    seed: Seed<'_, T>,
) -> Result<Gradients<T>> {
    let index = g.index();
    let order = g.topo_order()?;
    let out_idx = tape.out_idx;
    let mut dvals: Vec<Option<Tensor<T>>> = vec![None; g.nodes.len()];
    let mut skip_output = false;
    match seed {
        Seed::Output(dy) => {
            if dy.dims() != tape.values[out_idx].dims() {
                return Err(GraphError::Shape {
                    node: g.output.clone(),
                    detail: format!(
                        "seed dims {:?} != output dims {:?}",
                        dy.dims(),
                        tape.values[out_idx].dims()
                    ),
                });
            }
            dvals[out_idx] = Some(dy.clone());
        }
        Seed::SoftmaxCrossEntropy(labels) => {
            let out = &g.nodes[out_idx];
            if !matches!(out.layer, LayerSpec::Softmax) {
                return Err(GraphError::Shape {
                    node: out.id.clone(),
                    detail: "cross-entropy seed needs a softmax output".into(),
                });
            }
            let probs = &tape.values[out_idx];
            let mut d = crate::tensor::cross_entropy_backward(probs, labels)
                .map_err(tensor_err(out))?;
            let n = labels.len();
            let k = probs.dims()[1];
            for (i, &l) in labels.iter().enumerate() {
                for c in 0..k {
                    let p = probs.data()[i * k + c].as_f64();
                    let onehot = if c == l { 1.0 } else { 0.0 };
                    d.data_mut()[i * k + c] = T::of_f64((p - onehot) / n as f64);
                }
            }
            dvals[index[out.inputs[0].as_str()]] = Some(d);
            skip_output = true;
        }
    }

    let mut params: IndexMap<String, Tensor<T>> = IndexMap::new();
    for n in &g.nodes {
        for (i, (s, dims)) in n.weights.iter().zip(n.layer.slot_dims()).enumerate() {
            if n.layer.slot_trainable(i) {
                params.insert(s.clone(), Tensor::zeros(&dims).map_err(tensor_err(n))?);
            }
        }
    }
    let mut add_param = |name: &str, grad: Tensor<T>| {
        let acc = params.get_mut(name).expect("trainable slot");
        for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
            *a = *a + *b;
        }
    };
    let mut inputs = IndexMap::new();
    let exec = tape.opts.exec;

    for &i in order.iter().rev() {
        if skip_output && i == out_idx {
            continue;
        }
        let Some(dy) = dvals[i].take() else { continue };
        let n = &g.nodes[i];
        let te = tensor_err(n);
        let x_of = |k: usize| &tape.values[index[n.inputs[k].as_str()]];
        let mut dxs: Vec<Tensor<T>> = Vec::with_capacity(n.inputs.len());
        match &n.layer {
            LayerSpec::Input { .. } => {
                inputs.insert(n.id.clone(), dy);
                continue;
            }
            LayerSpec::Conv(c) => {
                let (k, p) = conv_kernel(store, n)?;
                let gr = conv_backward(x_of(0), &k, &p, &dy, exec).map_err(te)?;
                add_param(&n.weights[0], gr.dk);
                if c.bias {
                    let b = Tensor::new(vec![c.out_channels], gr.dbias).map_err(tensor_err(n))?;
                    add_param(&n.weights[1], b);
                }
                dxs.push(gr.dx);
            }
            LayerSpec::Pool(_) => {
                dxs.push(pool_backward(x_of(0), &pool_params(n), &dy).map_err(te)?);
            }
            LayerSpec::BatchNorm(b) => {
                let p = bn_params::<T>(store, n)?;
                let gr = batchnorm_backward(x_of(0), &p, tape.opts.bn_mode, &dy).map_err(te)?;
                let mk = |v: Vec<T>| Tensor::new(vec![b.channels], v).map_err(tensor_err(n));
                add_param(&n.weights[0], mk(gr.dgamma)?);
                add_param(&n.weights[1], mk(gr.dbeta)?);
                dxs.push(gr.dx);
            }
            LayerSpec::Relu => dxs.push(relu_backward(x_of(0), &dy).map_err(te)?),
            LayerSpec::Concat => {
                let chans: Vec<usize> = (0..n.inputs.len()).map(|k| x_of(k).dims()[1]).collect();
                dxs = concat_backward(&dy, &chans).map_err(te)?;
            }
            LayerSpec::Dense(_) => {
                let (w, b) = dense_params::<T>(store, n)?;
                let gr = dense_backward(x_of(0), &w, b.data(), &dy).map_err(te)?;
                add_param(&n.weights[0], gr.dw);
                let db = Tensor::new(vec![gr.db.len()], gr.db).map_err(tensor_err(n))?;
                add_param(&n.weights[1], db);
                dxs.push(gr.dx);
            }
            LayerSpec::GlobalAvgPool => {
                dxs.push(global_avg_pool_backward(x_of(0).dims(), &dy).map_err(te)?)
            }
            LayerSpec::Softmax => {
                dxs.push(softmax_backward(&tape.values[i], &dy).map_err(te)?)
            }
        }
        for (s, dx) in n.inputs.iter().zip(dxs) {
            accumulate(&mut dvals[index[s.as_str()]], dx);
        }
    }
    Ok(Gradients { params, inputs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BatchNormSpec, ConvSpec, DenseSpec, Rank};
    use crate::tensor::{cross_entropy, grad_check, Padding};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_net() -> (NetworkGraph, WeightStore) {
        let mut g = NetworkGraph::new("tiny", Rank::Two, 3);
        g.add("x", LayerSpec::Input { channels: 2, modality: None }, &[]);
        g.add(
            "c",
            LayerSpec::Conv(ConvSpec {
                in_channels: 2,
                out_channels: 3,
                kernel: vec![3, 3],
                stride: vec![2, 1],
                padding: vec![Padding::Same; 2],
                bias: true,
            }),
            &["x"],
        );
        g.add(
            "bn",
            LayerSpec::BatchNorm(BatchNormSpec { channels: 3, eps: 1e-3, momentum: 0.1 }),
            &["c"],
        );
        g.add("r", LayerSpec::Relu, &["bn"]);
        g.add("cat", LayerSpec::Concat, &["r", "c"]);
        g.add("gap", LayerSpec::GlobalAvgPool, &["cat"]);
        g.add("fc", LayerSpec::Dense(DenseSpec { in_features: 6, units: 3 }), &["gap"]);
        g.output = g.add("sm", LayerSpec::Softmax, &["fc"]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = WeightStore::new();
        for n in &g.nodes {
            for (i, (s, d)) in n.weights.iter().zip(n.layer.slot_dims()).enumerate() {
                let t = if matches!(n.layer, LayerSpec::BatchNorm(_)) && i == 3 {
                    Tensor::<f64>::full(&d, 1.0).unwrap()
                } else {
                    Tensor::<f64>::from_fn(&d, |_| rng.gen_range(-0.8..0.8)).unwrap()
                };
                store.insert(s.clone(), t).unwrap();
            }
        }
        (g, store)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (g, store) = tiny_net();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::from_fn(&[3, 2, 5, 4], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let labels = [0usize, 2, 1];
        let inputs = HashMap::from([("x".to_string(), x)]);
        let opts = ExecOptions { bn_mode: BnMode::Train, ..Default::default() };
        let names: Vec<String> = {
            let tape = forward_train(&g, &store, &inputs, &opts).unwrap();
            backward(&g, &store, &tape, Seed::SoftmaxCrossEntropy(&labels))
                .unwrap()
                .params
                .keys()
                .cloned()
                .collect()
        };
        let flat: Vec<f64> = names
            .iter()
            .flat_map(|s| store.get(s).unwrap().to_f64_vec())
            .collect();
        let eval = |p: &[f64]| -> crate::tensor::Result<(f64, Vec<f64>)> {
            let mut s = store.clone();
            let mut off = 0;
            for name in &names {
                let d = s.get(name).unwrap().dims().to_vec();
                let len: usize = d.iter().product();
                s.set(name.clone(), Tensor::new(d, p[off..off + len].to_vec())?).unwrap();
                off += len;
            }
            let tape = forward_train(&g, &s, &inputs, &opts).unwrap();
            let loss = cross_entropy(tape.output(), &labels)?;
            let gr = backward(&g, &s, &tape, Seed::SoftmaxCrossEntropy(&labels)).unwrap();
            Ok((loss, gr.params.values().flat_map(|t| t.data().to_vec()).collect()))
        };
        let err = grad_check(eval, &flat, 1e-6).unwrap();
        assert!(err < 1e-5, "max relative gradient error {err}");
    }

    #[test]
    fn capture_and_release() {
        let (g, store) = tiny_net();
        let x = Tensor::<f64>::full(&[1, 2, 4, 4], 0.5).unwrap();
        let inputs = HashMap::from([("whatever".to_string(), x)]);
        let opts = ExecOptions {
            capture: Capture::Nodes(HashSet::from(["c".to_string(), "sm".to_string()])),
            ..Default::default()
        };
        let out = execute(&g, &store, &inputs, &opts).unwrap();
        assert_eq!(out.captured.keys().collect::<Vec<_>>(), vec!["c", "sm"]);
        assert_eq!(out.captured["sm"], out.output);
        let s: f64 = out.output.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_weight_is_reported() {
        let (g, mut store) = tiny_net();
        store.remove("fc.bias");
        let x = Tensor::<f64>::full(&[1, 2, 4, 4], 0.5).unwrap();
        let e = execute(&g, &store, &HashMap::from([("x".to_string(), x)]), &Default::default())
            .unwrap_err();
        assert!(matches!(e, GraphError::MissingWeight { ref slot, .. } if slot == "fc.bias"));
    }

    #[test]
    fn non_finite_names_node() {
        let (g, mut store) = tiny_net();
        store
            .set("c.bias", Tensor::<f64>::full(&[3], 1e308).unwrap())
            .unwrap();
        let x = Tensor::<f64>::full(&[1, 2, 4, 4], 1e308).unwrap();
        let e = execute(&g, &store, &HashMap::from([("x".to_string(), x)]), &Default::default())
            .unwrap_err();
        assert!(matches!(e, GraphError::NonFinite { .. }), "{e}");
    }
}
