//! Instance and batch normalization with per-channel affine parameters.

use crate::scalar::Scalar;
use crate::tensor::Batch;

pub const NORM_EPS: f64 = 1e-5;

/// Normalized activations and inverse standard deviations from a forward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Batch<T>,
    /// One entry per (sample, channel) for instance norm, per channel for batch norm.
    pub inv_std: Vec<T>,
    /// Eval-mode batch norm: statistics were constants.
    pub frozen: bool,
}

/// Per-sample, per-channel normalization over the spatial plane.
pub fn instance_norm_forward<T: Scalar>(
    x: &Batch<T>,
    gamma: &[T],
    beta: &[T],
) -> (Batch<T>, NormCache<T>) {
    let p = x.plane();
    let n = T::from_usize(p).unwrap();
    let eps = T::lit(NORM_EPS);
    let mut xhat = Batch::zeros_like(x);
    let mut y = Batch::zeros_like(x);
    let mut inv_std = Vec::with_capacity(x.batch * x.channels);
    for s in 0..x.batch {
        for c in 0..x.channels {
            let src = x.channel(s, c);
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let xh = xhat.channel_mut(s, c);
            for (d, &v) in xh.iter_mut().zip(src) {
                *d = (v - mean) * is;
            }
            let (g, b) = (gamma[c], beta[c]);
            let xh = xhat.channel(s, c).to_vec();
            for (d, v) in y.channel_mut(s, c).iter_mut().zip(xh) {
                *d = g * v + b;
            }
        }
    }
    (
        y,
        NormCache {
            xhat,
            inv_std,
            frozen: false,
        },
    )
}

/// `dx = γ·σ⁻¹/M · (M·dy − Σdy − x̂·Σ(dy·x̂))` over each normalized group.
fn normalized_group_backward<T: Scalar>(dy: &[T], xhat: &[T], scale: T, dx: &mut [T]) -> (T, T) {
    let m = T::from_usize(dy.len()).unwrap();
    let sum_dy: T = dy.iter().copied().sum();
    let sum_dy_xh: T = dy.iter().zip(xhat).map(|(&a, &b)| a * b).sum();
    let k = scale / m;
    for ((d, &g), &xh) in dx.iter_mut().zip(dy).zip(xhat) {
        *d = k * (m * g - sum_dy - xh * sum_dy_xh);
    }
    (sum_dy, sum_dy_xh)
}

pub fn instance_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    dy: &Batch<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Batch<T> {
    let mut dx = Batch::zeros_like(dy);
    for s in 0..dy.batch {
        for c in 0..dy.channels {
            let scale = gamma[c] * cache.inv_std[s * dy.channels + c];
            let (sdy, sdyx) = normalized_group_backward(
                dy.channel(s, c),
                cache.xhat.channel(s, c),
                scale,
                dx.channel_mut(s, c),
            );
            dbeta[c] += sdy;
            dgamma[c] += sdyx;
        }
    }
    dx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; no state is mutated.
    Eval,
}

/// Batch-norm state for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Weight of the old running statistic in the exponential update.
pub const BN_MOMENTUM: f64 = 0.9;

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    /// Returns the output and a cache. In train mode running statistics are
    /// updated only when `update_running` is set.
    pub fn forward(&mut self, x: &Batch<T>, mode: BnMode, update_running: bool) -> (Batch<T>, NormCache<T>) {
        let eps = T::lit(NORM_EPS);
        let mut xhat = Batch::zeros_like(x);
        let mut y = Batch::zeros_like(x);
        let mut inv_std = Vec::with_capacity(x.channels);
        let count = x.batch * x.plane();
        let n = T::from_usize(count).unwrap();
        let mom = T::lit(BN_MOMENTUM);
        for c in 0..x.channels {
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mean = (0..x.batch).map(|s| x.channel(s, c).iter().copied().sum::<T>()).sum::<T>() / n;
                    let var = (0..x.batch)
                        .map(|s| x.channel(s, c).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>())
                        .sum::<T>()
                        / n;
                    if update_running {
                        let unbiased = if count > 1 {
                            var * n / T::from_usize(count - 1).unwrap()
                        } else {
                            var
                        };
                        self.running_mean[c] = mom * self.running_mean[c] + (T::one() - mom) * mean;
                        self.running_var[c] = mom * self.running_var[c] + (T::one() - mom) * unbiased;
                    }
                    (mean, var)
                }
                BnMode::Eval => (self.running_mean[c], self.running_var[c]),
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for s in 0..x.batch {
                let src = x.channel(s, c);
                for (d, &v) in xhat.channel_mut(s, c).iter_mut().zip(src) {
                    *d = (v - mean) * is;
                }
                let xh = xhat.channel(s, c).to_vec();
                for (d, v) in y.channel_mut(s, c).iter_mut().zip(xh) {
                    *d = self.gamma[c] * v + self.beta[c];
                }
            }
        }
        (
            y,
            NormCache {
                xhat,
                inv_std,
                frozen: mode == BnMode::Eval,
            },
        )
    }

    pub fn backward(&self, cache: &NormCache<T>, dy: &Batch<T>, dgamma: &mut [T], dbeta: &mut [T]) -> Batch<T> {
        let mut dx = Batch::zeros_like(dy);
        let p = dy.plane();
        for c in 0..dy.channels {
            let scale = self.gamma[c] * cache.inv_std[c];
            let mut g = Vec::with_capacity(dy.batch * p);
            let mut xh = Vec::with_capacity(dy.batch * p);
            for s in 0..dy.batch {
                g.extend_from_slice(dy.channel(s, c));
                xh.extend_from_slice(cache.xhat.channel(s, c));
            }
            let sum_dy: T = g.iter().copied().sum();
            let sum_dyx: T = g.iter().zip(&xh).map(|(&a, &b)| a * b).sum();
            dbeta[c] += sum_dy;
            dgamma[c] += sum_dyx;
            if cache.frozen {
                for s in 0..dy.batch {
                    for (d, &v) in dx.channel_mut(s, c).iter_mut().zip(dy.channel(s, c)) {
                        *d = v * scale;
                    }
                }
            } else {
                let mut out = vec![T::zero(); g.len()];
                normalized_group_backward(&g, &xh, scale, &mut out);
                for s in 0..dy.batch {
                    dx.channel_mut(s, c).copy_from_slice(&out[s * p..(s + 1) * p]);
                }
            }
        }
        dx
    }
}
