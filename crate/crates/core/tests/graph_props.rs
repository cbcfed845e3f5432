//! Randomized properties of the graph IR: shape inference, topology and the
//! JSON form.

use std::collections::HashMap;

use inn_core::graph::{
    emit_graph, ensure_valid, execute, infer_shapes, parse_graph, BatchNormSpec, Capture, ConvSpec,
    DenseSpec, ExecOptions, LayerSpec, NetworkGraph, PoolSpec, Rank,
};
use inn_core::inflation::{build_fusion, inflate_graph, FusionSpec, FusionStrategy, InflationPolicy};
use inn_core::tensor::{Padding, PoolKind, Tensor};
use inn_core::zoo::{random_init, BackboneConfig, Family};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
enum Step {
    Conv { out: usize, k: usize, stride: usize, bias: bool },
    Pool { max: bool, window: usize, stride: usize },
    BatchNorm,
    Relu,
    /// Concatenates a 1x1 conv branch with the current tensor.
    Branch { out: usize },
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        (1usize..=4, 1usize..=3, 1usize..=2, any::<bool>())
            .prop_map(|(out, k, stride, bias)| Step::Conv { out, k, stride, bias }),
        (any::<bool>(), 2usize..=3, 1usize..=2)
            .prop_map(|(max, window, stride)| Step::Pool { max, window, stride }),
        Just(Step::BatchNorm),
        Just(Step::Relu),
        (1usize..=3).prop_map(|out| Step::Branch { out }),
    ]
}

#[derive(Debug, Clone)]
struct GraphCase {
    rank: Rank,
    channels: usize,
    steps: Vec<Step>,
    size: usize,
    depth: usize,
    seed: u64,
}

fn graph_case() -> impl Strategy<Value = GraphCase> {
    (
        prop_oneof![Just(Rank::Two), Just(Rank::Three)],
        1usize..=3,
        prop::collection::vec(step(), 1..6),
        5usize..=9,
        2usize..=4,
        any::<u64>(),
    )
        .prop_map(|(rank, channels, steps, size, depth, seed)| GraphCase {
            rank,
            channels,
            steps,
            size,
            depth,
            seed,
        })
}

fn build(c: &GraphCase) -> NetworkGraph {
    let axes = c.rank.spatial_axes();
    let mut g = NetworkGraph::new("random", c.rank, 3);
    let mut cur = g.add("x", LayerSpec::Input { channels: c.channels, modality: None }, &[]);
    let mut ch = c.channels;
    let conv = |cin, cout, k, stride, bias| {
        LayerSpec::Conv(ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: vec![k; axes],
            stride: vec![stride; axes],
            padding: vec![Padding::Same; axes],
            bias,
        })
    };
    for (i, s) in c.steps.iter().enumerate() {
        cur = match *s {
            Step::Conv { out, k, stride, bias } => {
                let id = g.add(format!("conv{i}"), conv(ch, out, k, stride, bias), &[&cur]);
                ch = out;
                id
            }
            Step::Pool { max, window, stride } => g.add(
                format!("pool{i}"),
                LayerSpec::Pool(PoolSpec {
                    kind: if max { PoolKind::Max } else { PoolKind::Avg },
                    window: vec![window; axes],
                    stride: vec![stride; axes],
                    padding: vec![Padding::Same; axes],
                }),
                &[&cur],
            ),
            Step::BatchNorm => g.add(
                format!("bn{i}"),
                LayerSpec::BatchNorm(BatchNormSpec { channels: ch, eps: 1e-3, momentum: 0.1 }),
                &[&cur],
            ),
            Step::Relu => g.add(format!("relu{i}"), LayerSpec::Relu, &[&cur]),
            Step::Branch { out } => {
                let b = g.add(format!("branch{i}"), conv(ch, out, 1, 1, false), &[&cur]);
                let id = g.add(format!("cat{i}"), LayerSpec::Concat, &[&b, &cur]);
                ch += out;
                id
            }
        };
    }
    let gap = g.add("gap", LayerSpec::GlobalAvgPool, &[&cur]);
    let fc = g.add("fc", LayerSpec::Dense(DenseSpec { in_features: ch, units: 3 }), &[&gap]);
    g.output = g.add("softmax", LayerSpec::Softmax, &[&fc]);
    g
}

fn input_dims(c: &GraphCase) -> Vec<usize> {
    match c.rank {
        Rank::Two => vec![2, c.channels, c.size, c.size],
        Rank::Three => vec![2, c.channels, c.depth, c.size, c.size],
    }
}

fn permuted(g: &NetworkGraph, seed: u64) -> NetworkGraph {
    let mut p = g.clone();
    p.nodes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inferred_shapes_match_execution(c in graph_case()) {
        let g = build(&c);
        ensure_valid(&g).unwrap();
        let dims = input_dims(&c);
        let table = infer_shapes(&g, &HashMap::from([("x".to_string(), dims.clone())])).unwrap();
        let store = random_init(&g, c.seed).unwrap();
        let x = Tensor::<f32>::random_uniform(&dims, -1.0, 1.0, c.seed).unwrap();
        let opts = ExecOptions { capture: Capture::All, ..Default::default() };
        let out = execute(&g, &store, &HashMap::from([("x".to_string(), x)]), &opts).unwrap();
        prop_assert_eq!(out.captured.len(), g.nodes.len());
        for (id, t) in &out.captured {
            prop_assert_eq!(t.dims(), table[id.as_str()].as_slice(), "node {}", id);
        }
    }

    #[test]
    fn node_order_never_changes_output(c in graph_case(), perm_seed in any::<u64>()) {
        let g = build(&c);
        let p = permuted(&g, perm_seed);
        let store = random_init(&g, c.seed).unwrap();
        let x = Tensor::<f32>::random_uniform(&input_dims(&c), -1.0, 1.0, c.seed).unwrap();
        let inputs = HashMap::from([("x".to_string(), x)]);
        let a = execute(&g, &store, &inputs, &ExecOptions::default()).unwrap();
        let b = execute(&p, &store, &inputs, &ExecOptions::default()).unwrap();
        prop_assert_eq!(a.output, b.output);
    }

    #[test]
    fn json_round_trip_is_identity(c in graph_case(), perm_seed in any::<u64>()) {
        let g = build(&c);
        prop_assert_eq!(&parse_graph(&emit_graph(&g)).unwrap(), &g);
        let p = permuted(&g, perm_seed);
        prop_assert_eq!(&parse_graph(&emit_graph(&p)).unwrap(), &p);
    }
}

fn builders() -> Vec<BackboneConfig> {
    let mut v = Vec::new();
    for family in [Family::InceptionV3, Family::Densenet121] {
        v.push(BackboneConfig::tiny(family, 3));
        v.push(BackboneConfig::full(family, 3));
    }
    v
}

#[test]
fn builder_graphs_round_trip_through_json() {
    for cfg in builders() {
        let g = cfg.build().unwrap();
        let text = emit_graph(&g);
        assert_eq!(parse_graph(&text).unwrap(), g, "{:?}", cfg.family);
        assert_eq!(emit_graph(&parse_graph(&text).unwrap()), text);
    }
}

#[test]
fn builder_pipeline_runs_at_tiny_scale() {
    for family in [Family::InceptionV3, Family::Densenet121] {
        let g2 = BackboneConfig::tiny(family, 3).build().unwrap();
        ensure_valid(&g2).unwrap();
        let w2 = random_init(&g2, 1).unwrap();
        let (g3, w3) = inflate_graph(&g2, &w2, &InflationPolicy::default()).unwrap();
        ensure_valid(&g3).unwrap();
        for strategy in [FusionStrategy::Early, FusionStrategy::Intermediate] {
            let spec = FusionSpec::new(strategy, &["T1", "T2"]);
            let (gf, wf) = build_fusion(&g3, &w3, &spec).unwrap();
            ensure_valid(&gf).unwrap();
            gf.check_weights(&wf).unwrap();
            let inputs: HashMap<String, Vec<usize>> = gf
                .input_modalities()
                .into_iter()
                .map(|(id, _)| {
                    let Some(LayerSpec::Input { channels, .. }) = gf.node(id).map(|n| &n.layer) else {
                        unreachable!()
                    };
                    (id.to_string(), vec![1, *channels, 5, 32, 32])
                })
                .collect();
            let table = infer_shapes(&gf, &inputs).unwrap();
            assert_eq!(table[gf.output.as_str()], vec![1, 3]);
        }
    }
}
