//! Elementwise, dense, concatenation, pooling-to-vector and loss kernels.

use super::{Element, Result, Tensor, TensorError};

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward<T: Element>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    same_dims("relu_backward", x, dy)?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts(x.dims().to_vec(), data))
}

fn same_dims<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.dims(), b.dims()),
        });
    }
    Ok(())
}

fn dense_dims<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &[T]) -> Result<(usize, usize, usize)> {
    if x.ndim() != 2 || w.ndim() != 2 {
        return Err(TensorError::RankMismatch {
            op: "dense",
            detail: format!("expected N x F input and F x G weight, got {:?} and {:?}", x.dims(), w.dims()),
        });
    }
    let (n, f, g) = (x.dims()[0], x.dims()[1], w.dims()[1]);
    if w.dims()[0] != f {
        return Err(TensorError::ChannelMismatch {
            op: "dense",
            expected: w.dims()[0],
            found: f,
        });
    }
    if b.len() != g {
        return Err(TensorError::ShapeMismatch {
            op: "dense",
            detail: format!("bias length {} != units {g}", b.len()),
        });
    }
    Ok((n, f, g))
}

/// `x (N x F) * w (F x G) + b`.
pub fn dense_forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &[T]) -> Result<Tensor<T>> {
    let (n, f, g) = dense_dims(x, w, b)?;
    let mut y: Vec<T> = (0..n).flat_map(|_| b.iter().copied()).collect();
    T::gemm(
        n,
        f,
        g,
        x.data(),
        (f as isize, 1),
        w.data(),
        (g as isize, 1),
        T::one(),
        &mut y,
        (g as isize, 1),
    );
    Ok(Tensor::from_parts(vec![n, g], y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads<T: Element = f32> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Vec<T>,
}

pub fn dense_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &[T],
    dy: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (n, f, g) = dense_dims(x, w, b)?;
    if dy.dims() != [n, g] {
        return Err(TensorError::ShapeMismatch {
            op: "dense_backward",
            detail: format!("dy dims {:?} != [{n}, {g}]", dy.dims()),
        });
    }
    let mut dx = vec![T::zero(); n * f];
    // dx = dy (n x g) * w^T (g x f)
    T::gemm(
        n,
        g,
        f,
        dy.data(),
        (g as isize, 1),
        w.data(),
        (1, g as isize),
        T::zero(),
        &mut dx,
        (f as isize, 1),
    );
    let mut dw = vec![T::zero(); f * g];
    // dw = x^T (f x n) * dy (n x g)
    T::gemm(
        f,
        n,
        g,
        x.data(),
        (1, f as isize),
        dy.data(),
        (g as isize, 1),
        T::zero(),
        &mut dw,
        (g as isize, 1),
    );
    let mut db = vec![T::zero(); g];
    for row in dy.data().chunks(g) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc = *acc + *v;
        }
    }
    Ok(DenseGrads {
        dx: Tensor::from_parts(vec![n, f], dx),
        dw: Tensor::from_parts(vec![f, g], dw),
        db,
    })
}

/// Concatenates along the channel axis (axis 1).
pub fn concat_channels<T: Element>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or(TensorError::InvalidParam {
        op: "concat",
        detail: "no inputs".into(),
    })?;
    if first.ndim() < 2 {
        return Err(TensorError::RankMismatch {
            op: "concat",
            detail: format!("inputs need a channel axis, got {:?}", first.dims()),
        });
    }
    for x in xs {
        if x.ndim() != first.ndim()
            || x.dims()[0] != first.dims()[0]
            || x.dims()[2..] != first.dims()[2..]
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                detail: format!("{:?} vs {:?} differ outside the channel axis", first.dims(), x.dims()),
            });
        }
    }
    let n = first.dims()[0];
    let inner: usize = first.dims()[2..].iter().product();
    let channels: usize = xs.iter().map(|x| x.dims()[1]).sum();
    let mut data = Vec::with_capacity(n * channels * inner);
    for b in 0..n {
        for x in xs {
            let chunk = x.dims()[1] * inner;
            data.extend_from_slice(&x.data()[b * chunk..(b + 1) * chunk]);
        }
    }
    let mut dims = first.dims().to_vec();
    dims[1] = channels;
    Ok(Tensor::from_parts(dims, data))
}

/// Splits a channel-axis gradient back into per-input pieces.
pub fn concat_backward<T: Element>(dy: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    if dy.ndim() < 2 || channels.iter().sum::<usize>() != dy.dims()[1] {
        return Err(TensorError::ShapeMismatch {
            op: "concat_backward",
            detail: format!("channels {channels:?} do not sum to dy dims {:?}", dy.dims()),
        });
    }
    let n = dy.dims()[0];
    let inner: usize = dy.dims()[2..].iter().product();
    let total = dy.dims()[1];
    let mut out = Vec::with_capacity(channels.len());
    let mut offset = 0;
    for &c in channels {
        let mut data = Vec::with_capacity(n * c * inner);
        for b in 0..n {
            let start = (b * total + offset) * inner;
            data.extend_from_slice(&dy.data()[start..start + c * inner]);
        }
        let mut dims = dy.dims().to_vec();
        dims[1] = c;
        out.push(Tensor::from_parts(dims, data));
        offset += c;
    }
    Ok(out)
}

/// Mean over every axis after the channel axis, giving `N x C`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() < 3 {
        return Err(TensorError::RankMismatch {
            op: "global_avg_pool",
            detail: format!("expected spatial axes, got {:?}", x.dims()),
        });
    }
    let (n, c) = (x.dims()[0], x.dims()[1]);
    let inner: usize = x.dims()[2..].iter().product();
    let denom = T::of_f64(inner as f64);
    let data = x
        .data()
        .chunks(inner)
        .map(|plane| plane.iter().copied().sum::<T>() / denom)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], data))
}

pub fn global_avg_pool_backward<T: Element>(x_dims: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    if x_dims.len() < 3 || dy.dims() != &x_dims[..2] {
        return Err(TensorError::ShapeMismatch {
            op: "global_avg_pool_backward",
            detail: format!("dy dims {:?} vs input dims {x_dims:?}", dy.dims()),
        });
    }
    let inner: usize = x_dims[2..].iter().product();
    let denom = T::of_f64(inner as f64);
    let data = dy
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / denom, inner))
        .collect();
    Ok(Tensor::from_parts(x_dims.to_vec(), data))
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() != 2 {
        return Err(TensorError::RankMismatch {
            op: "softmax",
            detail: format!("expected N x C, got {:?}", x.dims()),
        });
    }
    x.check_finite("softmax input")?;
    let c = x.dims()[1];
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| T::of_f64(v / s)));
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), out))
}

/// Gradient through softmax given its output `y`.
pub fn softmax_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    same_dims("softmax_backward", y, dy)?;
    let c = y.dims()[1];
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks(c).zip(dy.data().chunks(c)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        out.extend(
            yr.iter()
                .zip(gr)
                .map(|(a, b)| T::of_f64(a.as_f64() * (b.as_f64() - dot))),
        );
    }
    Ok(Tensor::from_parts(y.dims().to_vec(), out))
}

fn check_labels<T: Element>(probs: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    if probs.ndim() != 2 || probs.dims()[0] != labels.len() {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("probs {:?} vs {} labels", probs.dims(), labels.len()),
        });
    }
    let c = probs.dims()[1];
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(TensorError::LabelOutOfRange {
            op: "cross_entropy",
            label,
            classes: c,
        });
    }
    Ok(c)
}

const MIN_PROB: f64 = 1e-300;

/// `-mean(log p[label])`.
pub fn cross_entropy<T: Element>(probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let c = check_labels(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs.data()[i * c + l].as_f64().max(MIN_PROB).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

pub fn cross_entropy_backward<T: Element>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let c = check_labels(probs, labels)?;
    let n = labels.len() as f64;
    let mut d = vec![T::zero(); probs.len()];
    for (i, &l) in labels.iter().enumerate() {
        let p = probs.data()[i * c + l].as_f64().max(MIN_PROB);
        d[i * c + l] = T::of_f64(-1.0 / (n * p));
    }
    Ok(Tensor::from_parts(probs.dims().to_vec(), d))
}
