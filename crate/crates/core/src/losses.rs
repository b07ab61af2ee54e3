//! Reconstruction and motion losses (mean-reduced) with their gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Frame;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the motion term.
    pub mu_motion: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { mu_motion: 10.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_motion >= 0.0) || !self.mu_motion.is_finite() {
            return Err(Error::arg(format!("mu_motion must be finite and >= 0, got {}", self.mu_motion)));
        }
        Ok(())
    }
}

/// `sign(x)` with `sign(0) = 0`.
#[inline]
fn sgn<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn count<T: Scalar>(f: &Frame<T>) -> T {
    T::from_usize(f.data.len()).unwrap()
}

/// Mean absolute error.
pub fn l1_loss<T: Scalar>(pred: &Frame<T>, gt: &Frame<T>) -> Result<T> {
    pred.check_same_shape(gt, "l1_loss")?;
    let s: T = pred.data.iter().zip(&gt.data).map(|(&p, &g)| (p - g).abs()).sum();
    Ok(s / count(pred))
}

/// Accumulates `scale · ∂l1/∂pred` into `grad`.
pub fn l1_grad<T: Scalar>(pred: &Frame<T>, gt: &Frame<T>, scale: T, grad: &mut [T]) {
    let k = scale / count(pred);
    for ((g, &p), &t) in grad.iter_mut().zip(&pred.data).zip(&gt.data) {
        *g += k * sgn(p - t);
    }
}

/// Mean of `||p_t − p_{t−1}| − |g_t − g_{t−1}||`.
pub fn motion_loss<T: Scalar>(pred_t: &Frame<T>, pred_prev: &Frame<T>, gt_t: &Frame<T>, gt_prev: &Frame<T>) -> Result<T> {
    pred_t.check_same_shape(pred_prev, "motion_loss")?;
    pred_t.check_same_shape(gt_t, "motion_loss")?;
    pred_t.check_same_shape(gt_prev, "motion_loss")?;
    let s: T = (0..pred_t.data.len())
        .map(|i| {
            let dp = (pred_t.data[i] - pred_prev.data[i]).abs();
            let dg = (gt_t.data[i] - gt_prev.data[i]).abs();
            (dp - dg).abs()
        })
        .sum();
    Ok(s / count(pred_t))
}

/// Accumulates `scale · ∂motion/∂pred_t` and `∂/∂pred_prev`.
pub fn motion_grad<T: Scalar>(
    pred_t: &Frame<T>,
    pred_prev: &Frame<T>,
    gt_t: &Frame<T>,
    gt_prev: &Frame<T>,
    scale: T,
    grad_t: &mut [T],
    grad_prev: &mut [T],
) {
    let k = scale / count(pred_t);
    for i in 0..pred_t.data.len() {
        let inc = pred_t.data[i] - pred_prev.data[i];
        let dg = (gt_t.data[i] - gt_prev.data[i]).abs();
        let g = k * sgn(inc.abs() - dg) * sgn(inc);
        grad_t[i] += g;
        grad_prev[i] -= g;
    }
}

/// Loss value split into its two terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l1: f64,
    pub motion: f64,
    pub total: f64,
}

impl std::ops::AddAssign for LossParts {
    fn add_assign(&mut self, o: Self) {
        self.l1 += o.l1;
        self.motion += o.motion;
        self.total += o.total;
    }
}

impl LossParts {
    pub fn scaled(self, k: f64) -> Self {
        LossParts {
            l1: self.l1 * k,
            motion: self.motion * k,
            total: self.total * k,
        }
    }
}

/// `Σ_t l1(p_t, g_t) + μ Σ_{t>first} motion(p_t, p_{t−1}, g_t, g_{t−1})`.
///
/// The first predicted frame carries no motion term.
pub fn sequence_loss<T: Scalar>(preds: &[Frame<T>], gts: &[Frame<T>], cfg: &LossConfig) -> Result<LossParts> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::arg(format!(
            "sequence_loss needs equal non-empty lengths, got {} predictions and {} targets",
            preds.len(),
            gts.len()
        )));
    }
    let mut parts = LossParts::default();
    for t in 0..preds.len() {
        parts.l1 += l1_loss(&preds[t], &gts[t])?.as_f64();
        if t > 0 {
            parts.motion += motion_loss(&preds[t], &preds[t - 1], &gts[t], &gts[t - 1])?.as_f64();
        }
    }
    parts.total = parts.l1 + cfg.mu_motion * parts.motion;
    Ok(parts)
}

/// Gradient of `scale · sequence_loss` w.r.t. every prediction.
pub fn sequence_loss_grad<T: Scalar>(preds: &[Frame<T>], gts: &[Frame<T>], cfg: &LossConfig, scale: T) -> Vec<Vec<T>> {
    let mut grads: Vec<Vec<T>> = preds.iter().map(|p| vec![T::zero(); p.data.len()]).collect();
    let mu = scale * T::lit(cfg.mu_motion);
    for t in 0..preds.len() {
        l1_grad(&preds[t], &gts[t], scale, &mut grads[t]);
        if t > 0 && cfg.mu_motion != 0.0 {
            let (head, tail) = grads.split_at_mut(t);
            motion_grad(&preds[t], &preds[t - 1], &gts[t], &gts[t - 1], mu, &mut tail[0], &mut head[t - 1]);
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(v: &[f64]) -> Frame<f64> {
        Frame::from_vec(1, 1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn l1_examples() {
        let gt = f(&[0.25, 0.25, 0.25]);
        assert_eq!(l1_loss(&gt, &gt).unwrap(), 0.0);
        assert_eq!(l1_loss(&gt.map(|v| v + 0.5), &gt).unwrap(), 0.5);
        assert_eq!(l1_loss(&gt.map(|v| -v), &gt).unwrap(), 0.5);
        assert!(l1_loss(&gt, &f(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn motion_examples() {
        let a = f(&[0.1, -0.3]);
        let b = f(&[0.4, 0.2]);
        assert_eq!(motion_loss(&b, &a, &b, &a).unwrap(), 0.0);
        // static prediction, gt increment 0.3 everywhere
        let g1 = a.map(|v| v + 0.3);
        assert!((motion_loss(&a, &a, &g1, &a).unwrap() - 0.3).abs() < 1e-15);
        // sign-flipped increments of equal magnitude
        let p1 = a.map(|v| v - 0.3);
        assert!(motion_loss(&p1, &a, &g1, &a).unwrap().abs() < 1e-15);
    }

    #[test]
    fn single_frame_sequence_is_pure_l1_and_mu_zero_sums_l1() {
        let p = vec![f(&[0.1, 0.2])];
        let g = vec![f(&[0.0, 0.0])];
        let l = sequence_loss(&p, &g, &LossConfig::default()).unwrap();
        assert_eq!(l.motion, 0.0);
        assert!((l.total - 0.15).abs() < 1e-15);
        let p = vec![f(&[0.1]), f(&[0.5]), f(&[-0.2])];
        let g = vec![f(&[0.0]), f(&[0.0]), f(&[0.3])];
        let l = sequence_loss(&p, &g, &LossConfig { mu_motion: 0.0 }).unwrap();
        assert!((l.total - (0.1 + 0.5 + 0.5)).abs() < 1e-15);
        assert!(sequence_loss(&p, &g[..2], &LossConfig::default()).is_err());
    }

    #[test]
    fn three_frame_toy_matches_scalar_evaluation() {
        // Hand-evaluated, one pixel per frame:
        // l1 = |0.5-0.1| + |-0.2-0.4| + |0.9-0.3| = 0.4 + 0.6 + 0.6 = 1.6
        // motion t=1: ||-0.2-0.5| - |0.4-0.1|| = |0.7-0.3| = 0.4
        // motion t=2: ||0.9+0.2| - |0.3-0.4|| = |1.1-0.1| = 1.0
        // total with mu=10: 1.6 + 10·1.4 = 15.6
        let p = vec![f(&[0.5]), f(&[-0.2]), f(&[0.9])];
        let g = vec![f(&[0.1]), f(&[0.4]), f(&[0.3])];
        let l = sequence_loss(&p, &g, &LossConfig::default()).unwrap();
        assert!((l.l1 - 1.6).abs() < 1e-12);
        assert!((l.motion - 1.4).abs() < 1e-12);
        assert!((l.total - 15.6).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = vec![f(&[0.5, 0.11, -0.7]), f(&[-0.2, 0.33, 0.05]), f(&[0.9, -0.41, 0.6])];
        let g = vec![f(&[0.1, 0.2, -0.1]), f(&[0.4, 0.0, 0.3]), f(&[0.3, -0.5, 0.2])];
        let cfg = LossConfig { mu_motion: 3.0 };
        let grads = sequence_loss_grad(&p, &g, &cfg, 1.0);
        for t in 0..3 {
            for i in 0..3 {
                let mut pp = p.clone();
                pp[t].data[i] += 1e-6;
                let mut pm = p.clone();
                pm[t].data[i] -= 1e-6;
                let num = (sequence_loss(&pp, &g, &cfg).unwrap().total - sequence_loss(&pm, &g, &cfg).unwrap().total) / 2e-6;
                assert!((num - grads[t][i]).abs() < 1e-6, "t={t} i={i}: {num} vs {}", grads[t][i]);
            }
        }
    }

    #[test]
    fn zero_residual_has_zero_subgradient() {
        let a = f(&[0.3]);
        let mut g = vec![0.0];
        l1_grad(&a, &a, 1.0, &mut g);
        assert_eq!(g[0], 0.0);
    }
}
