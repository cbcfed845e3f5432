use super::{Element, Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T: Element = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    /// Weight given to the batch statistic when updating running stats.
    pub momentum: f64,
}

impl<T: Element> BatchNormParams<T> {
    /// gamma = 1, beta = 0, running mean 0 and variance 1.
    pub fn identity(channels: usize, eps: f64, momentum: f64) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps,
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm",
                detail: "gamma/beta/running_mean/running_var lengths differ".into(),
            });
        }
        if self.running_var.iter().any(|v| *v < T::zero()) {
            return Err(TensorError::InvalidParam {
                op: "batchnorm",
                detail: "running_var must be >= 0".into(),
            });
        }
        if !(self.eps > 0.0) || !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(TensorError::InvalidParam {
                op: "batchnorm",
                detail: format!("eps {} / momentum {} out of range", self.eps, self.momentum),
            });
        }
        Ok(())
    }

    /// Running statistics after folding in one batch.
    pub fn updated_running(&self, stats: &BatchStats) -> (Vec<T>, Vec<T>) {
        let m = self.momentum;
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        let mean = self
            .running_mean
            .iter()
            .zip(&stats.mean)
            .map(|(r, b)| T::of_f64((1.0 - m) * r.as_f64() + m * b))
            .collect();
        let var = self
            .running_var
            .iter()
            .zip(&stats.var)
            .map(|(r, b)| T::of_f64((1.0 - m) * r.as_f64() + m * b * unbias))
            .collect();
        (mean, var)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Per-channel batch mean and biased variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnOutput<T: Element = f32> {
    pub y: Tensor<T>,
    /// Present in train mode.
    pub stats: Option<BatchStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads<T: Element = f32> {
    pub dx: Tensor<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

fn layout<T: Element>(x: &Tensor<T>, p: &BatchNormParams<T>) -> Result<(usize, usize, usize)> {
    p.validate()?;
    if x.ndim() < 2 || x.dims()[1] != p.channels() {
        return Err(TensorError::ChannelMismatch {
            op: "batchnorm",
            expected: p.channels(),
            found: x.channels(),
        });
    }
    let inner: usize = x.dims()[2..].iter().product();
    Ok((x.dims()[0], x.dims()[1], inner))
}

fn batch_stats<T: Element>(x: &Tensor<T>, n: usize, c: usize, inner: usize) -> BatchStats {
    let count = n * inner;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * inner;
            s += x.data()[base..base + inner].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / count as f64;
        let mut q = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * inner;
            q += x.data()[base..base + inner]
                .iter()
                .map(|v| (v.as_f64() - m).powi(2))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count as f64;
    }
    BatchStats { mean, var, count }
}

fn channel_moments<T: Element>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
    mode: BnMode,
    n: usize,
    c: usize,
    inner: usize,
) -> (Vec<f64>, Vec<f64>, Option<BatchStats>) {
    match mode {
        BnMode::Train => {
            let stats = batch_stats(x, n, c, inner);
            let inv = stats.var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
            (stats.mean.clone(), inv, Some(stats))
        }
        BnMode::Infer => (
            p.running_mean.iter().map(|v| v.as_f64()).collect(),
            p.running_var
                .iter()
                .map(|v| 1.0 / (v.as_f64() + p.eps).sqrt())
                .collect(),
            None,
        ),
    }
}

pub fn batchnorm_forward<T: Element>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
    mode: BnMode,
) -> Result<BnOutput<T>> {
    let (n, c, inner) = layout(x, p)?;
    let (mean, inv, stats) = channel_moments(x, p, mode, n, c, inner);
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let g = p.gamma[ch].as_f64() * inv[ch];
            let be = p.beta[ch].as_f64();
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                y[i] = T::of_f64(g * (x.data()[i].as_f64() - mean[ch]) + be);
            }
        }
    }
    Ok(BnOutput {
        y: Tensor::from_parts(x.dims().to_vec(), y),
        stats,
    })
}

/// Gradient of `batchnorm_forward` in the given mode.
///
/// In train mode the batch statistics are recomputed from `x`, and the
/// gradient flows through them.
pub fn batchnorm_backward<T: Element>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
    mode: BnMode,
    dy: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let (n, c, inner) = layout(x, p)?;
    if dy.dims() != x.dims() {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm_backward",
            detail: format!("dy dims {:?} != x dims {:?}", dy.dims(), x.dims()),
        });
    }
    let (mean, inv, _) = channel_moments(x, p, mode, n, c, inner);
    let count = (n * inner) as f64;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let g = p.gamma[ch].as_f64();
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                let xhat = (x.data()[i].as_f64() - mean[ch]) * inv[ch];
                let d = dy.data()[i].as_f64();
                sum_dy += d;
                sum_dy_xhat += d * xhat;
            }
        }
        dgamma[ch] = T::of_f64(sum_dy_xhat);
        dbeta[ch] = T::of_f64(sum_dy);
        for b in 0..n {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                let d = dy.data()[i].as_f64();
                dx[i] = T::of_f64(match mode {
                    BnMode::Infer => d * g * inv[ch],
                    BnMode::Train => {
                        let xhat = (x.data()[i].as_f64() - mean[ch]) * inv[ch];
                        g * inv[ch] * (d - sum_dy / count - xhat * sum_dy_xhat / count)
                    }
                });
            }
        }
    }
    Ok(BnGrads {
        dx: Tensor::from_parts(x.dims().to_vec(), dx),
        dgamma,
        dbeta,
    })
}
