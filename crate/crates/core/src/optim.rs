//! Adam with bias correction and the step-halving learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

/// Iterations between learning-rate halvings.
pub const LR_HALVING_PERIOD: u64 = 2000;

/// `lr0 · 2^{−⌊i / 2000⌋}`.
pub fn learning_rate(lr0: f64, iteration: u64) -> f64 {
    lr0 * 0.5f64.powi((iteration / LR_HALVING_PERIOD).min(i32::MAX as u64) as i32)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.beta1) || !ok(self.beta2) {
            return Err(Error::arg(format!(
                "adam betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::arg(format!("adam eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair of buffers per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub names: Vec<String>,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Number of updates applied so far.
    pub steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new<P: ParamSet<T> + ?Sized>(params: &P, config: AdamConfig) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        params.visit(&mut |name, v| {
            names.push(name.to_string());
            m.push(vec![T::zero(); v.len()]);
        });
        Adam {
            config,
            names,
            v: m.clone(),
            m,
            steps: 0,
        }
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite.
    pub fn step<P, G>(&mut self, params: &mut P, grads: &G, lr: f64) -> Result<()>
    where
        P: ParamSet<T> + ?Sized,
        G: ParamSet<T> + ?Sized,
    {
        let mut bad = None;
        let mut collected = Vec::new();
        grads.visit(&mut |name, g| {
            if bad.is_none() && g.iter().any(|x| !x.is_finite()) {
                bad = Some(name.to_string());
            }
            collected.push(g.to_vec());
        });
        if let Some(name) = bad {
            return Err(Error::NonFiniteGradient(name));
        }
        if collected.len() != self.m.len() || collected.iter().zip(&self.m).any(|(g, m)| g.len() != m.len()) {
            return Err(Error::arg("gradient layout does not match optimizer state"));
        }

        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (ob1, ob2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let step = T::lit(lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(eps);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |_, p| {
            let (m, v, g) = (&mut ms[i], &mut vs[i], &collected[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + ob1 * g[j];
                v[j] = b2 * v[j] + ob2 * g[j] * g[j];
                p[j] -= step * m[j] / ((v[j] * inv_c2).sqrt() + eps);
            }
            i += 1;
        });
        Ok(())
    }
}
