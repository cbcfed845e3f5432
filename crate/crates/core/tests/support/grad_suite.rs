//! Finite-difference gradient checks of every differentiable kernel and of
//! composed networks, all in f64. Shared by the core test suite and the
//! acceptance runner.

use std::cell::RefCell;
use std::collections::HashMap;

use inn_core::graph::{
    backward, ensure_valid, forward_train, BatchNormSpec, ConvSpec, DenseSpec, ExecOptions, LayerSpec,
    NetworkGraph, PoolSpec, Rank, Seed,
};
use inn_core::tensor::{
    batchnorm_backward, batchnorm_forward, concat_backward, concat_channels, conv_backward,
    conv_forward, cross_entropy, cross_entropy_backward, dense_backward, dense_forward,
    global_avg_pool, global_avg_pool_backward, grad_check, pool_backward, pool_forward, relu,
    relu_backward, softmax, softmax_backward, BatchNormParams, BnMode, ConvParams, ConvPath, Exec,
    Kernel, Padding, PoolKind, PoolParams, Tensor,
};
use inn_core::zoo::{random_init, BackboneConfig, Family};
use inn_core::WeightStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

/// `(case, max relative error)` for every check a group ran.
pub type Report = Vec<(String, f64)>;

thread_local! {
    static RESULTS: RefCell<Report> = const { RefCell::new(Vec::new()) };
}

/// Every check group, by name.
pub const GROUPS: &[(&str, fn())] = &[
    ("conv2d", conv2d_same_and_valid_with_strides),
    ("conv3d", conv3d_cubes_and_factorized),
    ("batchnorm", batchnorm_train_and_infer),
    ("dense", dense),
    ("relu", relu_away_from_the_kink),
    ("pool", max_and_avg_pool_2d_and_3d),
    ("concat+gap", concat_and_global_average),
    ("softmax+ce", softmax_and_cross_entropy),
    ("composed 3d network", composed_3d_network),
    ("tiny densenet", tiny_densenet_weight_sample),
];

/// Runs one group and returns its results.
pub fn run(group: fn()) -> Report {
    group();
    RESULTS.with(|r| r.borrow_mut().drain(..).collect())
}

fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn tensor(dims: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
}

fn dot(a: &Tensor<f64>, r: &[f64]) -> f64 {
    a.data().iter().zip(r).map(|(x, y)| x * y).sum()
}

/// Splits a flat parameter vector at the given lengths.
fn split<'a>(p: &'a [f64], lens: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::new();
    let mut off = 0;
    for &l in lens {
        out.push(&p[off..off + l]);
        off += l;
    }
    out
}

fn assert_close(op: &str, err: f64) {
    RESULTS.with(|r| r.borrow_mut().push((op.to_string(), err)));
}

fn conv_case(x_dims: &[usize], k_dims: &[usize], params: ConvParams, bias: bool, seed: u64) {
    let nx: usize = x_dims.iter().product();
    let nk: usize = k_dims.iter().product();
    let nb = if bias { k_dims[0] } else { 0 };
    let probe = |p: &[f64]| {
        let s = split(p, &[nx, nk, nb]);
        let x = tensor(x_dims, s[0]);
        let k = Kernel::new(tensor(k_dims, s[1]), bias.then(|| s[2].to_vec())).unwrap();
        let y = conv_forward(&x, &k, &params, ConvPath::Im2col, Exec::Deterministic).unwrap();
        let r = rand_vec(y.len(), seed + 1);
        let g = conv_backward(&x, &k, &params, &tensor(y.dims(), &r), Exec::Deterministic).unwrap();
        let mut grad = g.dx.into_data();
        grad.extend(g.dk.into_data());
        if bias {
            grad.extend(g.dbias);
        }
        Ok((dot(&y, &r), grad))
    };
    let err = grad_check(probe, &rand_vec(nx + nk + nb, seed), EPS).unwrap();
    assert_close(&format!("conv {x_dims:?} * {k_dims:?} {params:?}"), err);
}

pub fn conv2d_same_and_valid_with_strides() {
    conv_case(&[2, 2, 5, 6], &[3, 2, 3, 3], ConvParams::uniform(2, 1, Padding::Same), true, 1);
    conv_case(&[1, 3, 7, 6], &[2, 3, 3, 2], ConvParams::uniform(2, 2, Padding::Same), false, 2);
    conv_case(&[2, 2, 6, 7], &[2, 2, 3, 3], ConvParams::uniform(2, 2, Padding::Valid), true, 3);
    conv_case(
        &[1, 2, 6, 6],
        &[3, 2, 1, 3],
        ConvParams::new(vec![1, 2], vec![Padding::Valid, Padding::Same]),
        true,
        4,
    );
}

pub fn conv3d_cubes_and_factorized() {
    conv_case(&[1, 2, 4, 5, 5], &[2, 2, 3, 3, 3], ConvParams::uniform(3, 1, Padding::Same), true, 5);
    conv_case(
        &[2, 2, 3, 6, 5],
        &[2, 2, 1, 3, 1],
        ConvParams::new(vec![1, 2, 2], vec![Padding::Same; 3]),
        false,
        6,
    );
    conv_case(&[1, 1, 5, 5, 5], &[2, 1, 3, 3, 3], ConvParams::uniform(3, 2, Padding::Valid), true, 7);
}

fn bn_case(dims: &[usize], mode: BnMode, seed: u64) {
    let c = dims[1];
    let nx: usize = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
    let running_mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let running_var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
    let probe = |p: &[f64]| {
        let s = split(p, &[nx, c, c]);
        let x = tensor(dims, s[0]);
        let bn = BatchNormParams {
            gamma: s[1].to_vec(),
            beta: s[2].to_vec(),
            running_mean: running_mean.clone(),
            running_var: running_var.clone(),
            eps: 1e-3,
            momentum: 0.1,
        };
        let y = batchnorm_forward(&x, &bn, mode).unwrap().y;
        let r = rand_vec(y.len(), seed + 1);
        let g = batchnorm_backward(&x, &bn, mode, &tensor(dims, &r)).unwrap();
        let mut grad = g.dx.into_data();
        grad.extend(g.dgamma);
        grad.extend(g.dbeta);
        Ok((dot(&y, &r), grad))
    };
    let err = grad_check(probe, &rand_vec(nx + 2 * c, seed), EPS).unwrap();
    assert_close(&format!("batchnorm {mode:?} {dims:?}"), err);
}

pub fn batchnorm_train_and_infer() {
    bn_case(&[3, 2, 3, 4], BnMode::Train, 20);
    bn_case(&[2, 3, 2, 3, 3], BnMode::Train, 21);
    bn_case(&[2, 2, 3, 3], BnMode::Infer, 22);
}

pub fn dense() {
    let (n, f, g) = (3, 4, 5);
    let probe = |p: &[f64]| {
        let s = split(p, &[n * f, f * g, g]);
        let (x, w) = (tensor(&[n, f], s[0]), tensor(&[f, g], s[1]));
        let y = dense_forward(&x, &w, s[2]).unwrap();
        let r = rand_vec(y.len(), 31);
        let d = dense_backward(&x, &w, s[2], &tensor(&[n, g], &r)).unwrap();
        let mut grad = d.dx.into_data();
        grad.extend(d.dw.into_data());
        grad.extend(d.db);
        Ok((dot(&y, &r), grad))
    };
    assert_close("dense", grad_check(probe, &rand_vec(n * f + f * g + g, 30), EPS).unwrap());
}

pub fn relu_away_from_the_kink() {
    let dims = [2, 3, 4];
    let x0: Vec<f64> = rand_vec(24, 40)
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
        .collect();
    let r = rand_vec(24, 41);
    let probe = |p: &[f64]| {
        let x = tensor(&dims, p);
        let y = relu(&x);
        Ok((dot(&y, &r), relu_backward(&x, &tensor(&dims, &r)).unwrap().into_data()))
    };
    assert_close("relu", grad_check(probe, &x0, EPS).unwrap());
}

fn pool_case(dims: &[usize], p: PoolParams, seed: u64) {
    let n: usize = dims.iter().product();
    // Distinct, well-separated values keep max windows away from ties.
    let mut x0: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        x0.swap(i, rng.gen_range(0..=i));
    }
    let probe = |v: &[f64]| {
        let x = tensor(dims, v);
        let y = pool_forward(&x, &p).unwrap();
        let r = rand_vec(y.len(), seed + 1);
        let dx = pool_backward(&x, &p, &tensor(y.dims(), &r)).unwrap();
        Ok((dot(&y, &r), dx.into_data()))
    };
    assert_close(&format!("{:?} pool {dims:?}", p.kind), grad_check(probe, &x0, EPS).unwrap());
}

pub fn max_and_avg_pool_2d_and_3d() {
    for kind in [PoolKind::Max, PoolKind::Avg] {
        pool_case(
            &[1, 2, 5, 6],
            PoolParams {
                kind,
                window: vec![3, 3],
                conv: ConvParams::uniform(2, 2, Padding::Valid),
            },
            50,
        );
        pool_case(
            &[2, 1, 4, 5, 5],
            PoolParams {
                kind,
                window: vec![3, 3, 3],
                conv: ConvParams::new(vec![1, 2, 2], vec![Padding::Same; 3]),
            },
            51,
        );
    }
}

pub fn concat_and_global_average() {
    let (a, b) = ([2, 2, 3, 3], [2, 3, 3, 3]);
    let (na, nb) = (36, 54);
    let probe = |p: &[f64]| {
        let s = split(p, &[na, nb]);
        let (xa, xb) = (tensor(&a, s[0]), tensor(&b, s[1]));
        let cat = concat_channels(&[&xa, &xb]).unwrap();
        let y = global_avg_pool(&cat).unwrap();
        let r = rand_vec(y.len(), 61);
        let dcat = global_avg_pool_backward(cat.dims(), &tensor(y.dims(), &r)).unwrap();
        let parts = concat_backward(&dcat, &[2, 3]).unwrap();
        let grad = parts.into_iter().flat_map(Tensor::into_data).collect();
        Ok((dot(&y, &r), grad))
    };
    assert_close("concat+gap", grad_check(probe, &rand_vec(na + nb, 60), EPS).unwrap());
}

pub fn softmax_and_cross_entropy() {
    let dims = [3, 4];
    let r = rand_vec(12, 71);
    let probe = |p: &[f64]| {
        let y = softmax(&tensor(&dims, p)).unwrap();
        let dx = softmax_backward(&y, &tensor(&dims, &r)).unwrap();
        Ok((dot(&y, &r), dx.into_data()))
    };
    assert_close("softmax", grad_check(probe, &rand_vec(12, 70), EPS).unwrap());

    let labels = [2usize, 0, 3];
    let probe = |p: &[f64]| {
        let y = softmax(&tensor(&dims, p)).unwrap();
        let dp = cross_entropy_backward(&y, &labels).unwrap();
        let dx = softmax_backward(&y, &dp).unwrap();
        Ok((cross_entropy(&y, &labels).unwrap(), dx.into_data()))
    };
    assert_close("cross entropy", grad_check(probe, &rand_vec(12, 72), EPS).unwrap());
}

/// Loss and flattened trainable-weight gradient of a graph on one batch.
fn graph_probe(
    g: &NetworkGraph,
    store: &WeightStore,
    inputs: &HashMap<String, Tensor<f64>>,
    labels: &[usize],
    names: &[String],
    p: &[f64],
) -> (f64, Vec<f64>) {
    let mut s = store.clone();
    let mut off = 0;
    for name in names {
        let d = s.get(name).unwrap().dims().to_vec();
        let len: usize = d.iter().product();
        s.set(name.clone(), tensor(&d, &p[off..off + len])).unwrap();
        off += len;
    }
    let opts = ExecOptions {
        bn_mode: BnMode::Train,
        ..Default::default()
    };
    let tape = forward_train(g, &s, inputs, &opts).unwrap();
    let loss = cross_entropy(tape.output(), labels).unwrap();
    let gr = backward(g, &s, &tape, Seed::SoftmaxCrossEntropy(labels)).unwrap();
    let grad = names.iter().flat_map(|n| gr.params[n].data().to_vec()).collect();
    (loss, grad)
}

fn trainable_names(g: &NetworkGraph) -> Vec<String> {
    g.nodes
        .iter()
        .flat_map(|n| {
            n.weights
                .iter()
                .enumerate()
                .filter(|(i, _)| n.layer.slot_trainable(*i))
                .map(|(_, w)| w.clone())
        })
        .collect()
}

fn as_f64(store: &WeightStore) -> WeightStore {
    let mut out = WeightStore::new();
    for (name, t) in store.iter() {
        out.insert(name, tensor(t.dims(), &t.to_f64_vec())).unwrap();
    }
    out
}

pub fn composed_3d_network() {
    let mut g = NetworkGraph::new("composed", Rank::Three, 3);
    g.add("x", LayerSpec::Input { channels: 2, modality: None }, &[]);
    let conv = |cin, cout, k: Vec<usize>, s: Vec<usize>| {
        LayerSpec::Conv(ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride: s,
            padding: vec![Padding::Same; 3],
            bias: false,
        })
    };
    g.add("c1", conv(2, 3, vec![3, 3, 3], vec![1, 2, 2]), &["x"]);
    g.add(
        "bn1",
        LayerSpec::BatchNorm(BatchNormSpec { channels: 3, eps: 1e-3, momentum: 0.1 }),
        &["c1"],
    );
    g.add("r1", LayerSpec::Relu, &["bn1"]);
    g.add("c2", conv(3, 2, vec![1, 3, 1], vec![1, 1, 1]), &["r1"]);
    g.add(
        "mp",
        LayerSpec::Pool(PoolSpec {
            kind: PoolKind::Max,
            window: vec![3, 3, 3],
            stride: vec![1, 1, 1],
            padding: vec![Padding::Same; 3],
        }),
        &["r1"],
    );
    g.add(
        "ap",
        LayerSpec::Pool(PoolSpec {
            kind: PoolKind::Avg,
            window: vec![1, 3, 3],
            stride: vec![1, 1, 1],
            padding: vec![Padding::Same; 3],
        }),
        &["c2"],
    );
    g.add("cat", LayerSpec::Concat, &["mp", "ap"]);
    g.add("gap", LayerSpec::GlobalAvgPool, &["cat"]);
    g.add("fc", LayerSpec::Dense(DenseSpec { in_features: 5, units: 3 }), &["gap"]);
    g.output = g.add("sm", LayerSpec::Softmax, &["fc"]);
    ensure_valid(&g).unwrap();

    let store = as_f64(&random_init(&g, 9).unwrap());
    let x = tensor(&[3, 2, 3, 6, 5], &rand_vec(3 * 2 * 3 * 6 * 5, 90));
    let inputs = HashMap::from([("x".to_string(), x)]);
    let labels = [1usize, 0, 2];
    let names = trainable_names(&g);
    let flat: Vec<f64> = names.iter().flat_map(|n| store.get(n).unwrap().to_f64_vec()).collect();
    let err = grad_check(
        |p| Ok(graph_probe(&g, &store, &inputs, &labels, &names, p)),
        &flat,
        EPS,
    )
    .unwrap();
    assert_close("composed 3d network", err);
}

/// A random subset of the weights of the tiny DenseNet backbone.
pub fn tiny_densenet_weight_sample() {
    let g = BackboneConfig::tiny(Family::Densenet121, 3).build().unwrap();
    let store = as_f64(&random_init(&g, 3).unwrap());
    let x = tensor(&[2, 3, 32, 32], &rand_vec(2 * 3 * 32 * 32, 100));
    let inputs = HashMap::from([("input".to_string(), x)]);
    let labels = [2usize, 1];
    let names = trainable_names(&g);
    let flat: Vec<f64> = names.iter().flat_map(|n| store.get(n).unwrap().to_f64_vec()).collect();
    let (_, full_grad) = graph_probe(&g, &store, &inputs, &labels, &names, &flat);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let picks: Vec<usize> = (0..48).map(|_| rng.gen_range(0..flat.len())).collect();
    let sampled: Vec<f64> = picks.iter().map(|&i| flat[i]).collect();
    let err = grad_check(
        |q| {
            let mut p = flat.clone();
            for (&i, &v) in picks.iter().zip(q) {
                p[i] = v;
            }
            let (loss, _) = graph_probe(&g, &store, &inputs, &labels, &names, &p);
            Ok((loss, picks.iter().map(|&i| full_grad[i]).collect()))
        },
        &sampled,
        EPS,
    )
    .unwrap();
    assert_close("tiny densenet sample", err);
}
