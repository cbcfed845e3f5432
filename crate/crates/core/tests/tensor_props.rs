//! Randomized properties of the tensor kernels.

use inn_core::tensor::{
    conv_forward, conv_output_dims, pool_forward, relative_error, softmax, ConvParams, ConvPath,
    Exec, Kernel, Padding, PoolKind, PoolParams, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
struct ConvCase {
    x_dims: Vec<usize>,
    k_dims: Vec<usize>,
    params: ConvParams,
    bias: bool,
    seed: u64,
}

fn padding() -> impl Strategy<Value = Padding> {
    prop_oneof![Just(Padding::Same), Just(Padding::Valid)]
}

/// Spatial axes as (kernel, stride, padding, input), with input ≥ kernel.
fn axis() -> impl Strategy<Value = (usize, usize, Padding, usize)> {
    (1usize..=4, 1usize..=3, padding())
        .prop_flat_map(|(k, s, p)| (Just(k), Just(s), Just(p), k..k + 7))
}

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (2usize..=3)
        .prop_flat_map(|rank| {
            (
                1usize..=2,
                1usize..=4,
                1usize..=4,
                prop::collection::vec(axis(), rank),
                any::<bool>(),
                any::<u64>(),
            )
        })
        .prop_map(|(n, cin, cout, axes, bias, seed)| {
            let mut x_dims = vec![n, cin];
            let mut k_dims = vec![cout, cin];
            let (mut stride, mut pad) = (vec![], vec![]);
            for (k, s, p, i) in axes {
                x_dims.push(i);
                k_dims.push(k);
                stride.push(s);
                pad.push(p);
            }
            ConvCase {
                x_dims,
                k_dims,
                params: ConvParams::new(stride, pad),
                bias,
                seed,
            }
        })
}

fn random_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0f32..1.0)).unwrap()
}

fn build(c: &ConvCase) -> (Tensor<f32>, Kernel<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let x = random_tensor(&c.x_dims, &mut rng);
    let w = random_tensor(&c.k_dims, &mut rng);
    let bias = c
        .bias
        .then(|| (0..c.k_dims[0]).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
    (x, Kernel::new(w, bias).unwrap())
}

fn expected_extent(input: usize, kernel: usize, stride: usize, p: Padding) -> usize {
    match p {
        Padding::Same => input.div_ceil(stride),
        Padding::Valid => (input - kernel) / stride + 1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn im2col_matches_direct(c in conv_case()) {
        let (x, k) = build(&c);
        let direct = conv_forward(&x, &k, &c.params, ConvPath::Direct, Exec::Deterministic).unwrap();
        let im2col = conv_forward(&x, &k, &c.params, ConvPath::Im2col, Exec::Deterministic).unwrap();
        let err = relative_error(&im2col, &direct);
        prop_assert!(err < 1e-5, "relative error {err:e} for {c:?}");
    }

    #[test]
    fn parallel_matches_deterministic(c in conv_case()) {
        let (x, k) = build(&c);
        let a = conv_forward(&x, &k, &c.params, ConvPath::Im2col, Exec::Deterministic).unwrap();
        let b = conv_forward(&x, &k, &c.params, ConvPath::Im2col, Exec::Parallel).unwrap();
        prop_assert!(relative_error(&b, &a) < 1e-5);
    }

    #[test]
    fn conv_output_extent_formula(c in conv_case()) {
        let (x, k) = build(&c);
        let dims = conv_output_dims(x.dims(), &k, &c.params).unwrap();
        let mut expected = vec![c.x_dims[0], c.k_dims[0]];
        for a in 0..c.params.stride.len() {
            expected.push(expected_extent(
                c.x_dims[2 + a], c.k_dims[2 + a], c.params.stride[a], c.params.padding[a],
            ));
        }
        prop_assert_eq!(&dims, &expected);
        let y = conv_forward(&x, &k, &c.params, ConvPath::Direct, Exec::Deterministic).unwrap();
        prop_assert_eq!(y.dims(), expected.as_slice());
    }

    #[test]
    fn pool_output_extent_formula(c in conv_case(), max in any::<bool>()) {
        let (x, _) = build(&c);
        let p = PoolParams {
            kind: if max { PoolKind::Max } else { PoolKind::Avg },
            window: c.k_dims[2..].to_vec(),
            conv: c.params.clone(),
        };
        let y = pool_forward(&x, &p).unwrap();
        let mut expected = c.x_dims[..2].to_vec();
        for a in 0..p.window.len() {
            expected.push(expected_extent(
                c.x_dims[2 + a], p.window[a], p.conv.stride[a], p.conv.padding[a],
            ));
        }
        prop_assert_eq!(y.dims(), expected.as_slice());
    }

    #[test]
    fn conv_is_linear(c in conv_case(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let c = ConvCase { bias: false, ..c };
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let to64 = |t: Tensor<f32>| t.cast::<f64>();
        let x = to64(random_tensor(&c.x_dims, &mut rng));
        let y = to64(random_tensor(&c.x_dims, &mut rng));
        let k = Kernel::new(to64(random_tensor(&c.k_dims, &mut rng)), None).unwrap();
        let run = |t: &Tensor<f64>| {
            conv_forward(t, &k, &c.params, ConvPath::Im2col, Exec::Deterministic).unwrap()
        };
        let mix = Tensor::new(
            c.x_dims.clone(),
            x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect(),
        )
        .unwrap();
        let (cx, cy) = (run(&x), run(&y));
        let combined = Tensor::new(
            cx.dims().to_vec(),
            cx.data().iter().zip(cy.data()).map(|(a, b)| alpha * a + beta * b).collect(),
        )
        .unwrap();
        let lhs = run(&mix);
        let diff = lhs
            .data()
            .iter()
            .zip(combined.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let scale = combined.max_abs().max(1.0);
        prop_assert!(diff / scale < 1e-5, "linearity violated by {diff:e}");
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        // Gaps beyond ~37 make e^-gap vanish next to 1 in f64, so the open
        // interval is only representable for moderate spreads.
        data in prop::collection::vec(-15.0f64..15.0, 1..40),
        shift in -100.0f64..100.0,
    ) {
        let cols = data.len().div_ceil(rows).max(1);
        let values: Vec<f64> = (0..rows * cols).map(|i| data[i % data.len()]).collect();
        let x = Tensor::new(vec![rows, cols], values.clone()).unwrap();
        let y = softmax(&x).unwrap();
        for row in y.data().chunks(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0 || cols == 1 && p == 1.0));
        }
        let shifted = Tensor::new(vec![rows, cols], values.iter().map(|v| v + shift).collect()).unwrap();
        let ys = softmax(&shifted).unwrap();
        prop_assert!(relative_error(&ys, &y) < 1e-9);
    }
}
