//! Selection network: temporal difference images → strided conv encoder →
//! dense layer → row-wise softmax, producing the decoder modulation weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alpha::{softmax_backward, AlphaMatrix};
use crate::error::{Error, Result};
use crate::layers::conv::{self, ConvCache, ConvShape, Geometry};
use crate::layers::norm::{BatchNorm, BnMode, NormCache};
use crate::params::{gaussian, LayerParams, ParamSet};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{relu_backward, Batch, Frame};
use crate::transformer::{TransformerConfig, TransformerParams};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorConfig {
    /// Channels of the first block; doubled at each further strided block.
    #[serde(default = "default_ndf")]
    pub ndf: usize,
    #[serde(default = "default_filter")]
    pub filter_size: usize,
    /// Cap on the doubling, as a multiple of `ndf`.
    #[serde(default = "default_mult")]
    pub max_channel_mult: usize,
    /// Stride-1 channel-halving blocks before the dense layer; `None` picks
    /// the smallest count meeting the capacity rule.
    #[serde(default)]
    pub reduce_blocks: Option<usize>,
    /// When false the transformer runs with uniform weights.
    #[serde(default = "default_enabled")]
    pub enabled: bool,
}

fn default_ndf() -> usize {
    16
}
fn default_filter() -> usize {
    5
}
fn default_mult() -> usize {
    8
}
fn default_enabled() -> bool {
    true
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            ndf: default_ndf(),
            filter_size: default_filter(),
            max_channel_mult: default_mult(),
            reduce_blocks: None,
            enabled: true,
        }
    }
}

/// Dense weights may be at most this multiple of the transformer's parameter count.
pub const DENSE_CAPACITY_FACTOR: usize = 4;

/// Fully resolved selector layout for a transformer configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectorArch {
    pub rows: usize,
    pub columns: usize,
    pub input_planes: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels and geometry of every conv block (strided then reduce).
    pub blocks: Vec<(usize, Geometry)>,
    pub strided_blocks: usize,
    pub dense_in: usize,
}

impl SelectorArch {
    pub fn dense_out(&self) -> usize {
        self.rows * self.columns
    }

    pub fn block_shape(&self, i: usize) -> ConvShape {
        ConvShape {
            in_channels: if i == 0 { self.input_planes } else { self.blocks[i - 1].0 },
            out_channels: self.blocks[i].0,
            kernel: self.blocks[i].1.kernel,
        }
    }

    pub fn conv_param_count(&self) -> usize {
        (0..self.blocks.len())
            .map(|i| {
                let s = self.block_shape(i);
                s.weight_len() + s.out_channels * if i == 0 { 1 } else { 3 }
            })
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.conv_param_count() + self.dense_in * self.dense_out() + self.dense_out()
    }
}

impl SelectorConfig {
    pub fn validate(&self, t: &TransformerConfig) -> Result<()> {
        if self.ndf == 0 {
            return Err(Error::arg("ndf must be >= 1"));
        }
        if self.filter_size % 2 == 0 || self.filter_size == 0 {
            return Err(Error::arg("selector filter size must be odd"));
        }
        if self.max_channel_mult == 0 {
            return Err(Error::arg("max_channel_mult must be >= 1"));
        }
        if self.enabled && t.context < 2 {
            return Err(Error::arg("the selector needs at least two context frames"));
        }
        Ok(())
    }

    fn arch_with(&self, t: &TransformerConfig, reduce: usize) -> SelectorArch {
        let depth = t.depth();
        let mut blocks = Vec::new();
        let (mut h, mut w) = (t.height, t.width);
        let cap = self.ndf * self.max_channel_mult;
        let mut ch = self.ndf;
        for i in 0..depth {
            if i > 0 {
                ch = (ch * 2).min(cap);
            }
            let g = Geometry::halving(h, w, self.filter_size);
            h = g.small_h;
            w = g.small_w;
            blocks.push((ch, g));
        }
        for _ in 0..reduce {
            ch = (ch / 2).max(1);
            blocks.push((ch, Geometry::same(h, w, self.filter_size)));
        }
        SelectorArch {
            rows: depth,
            columns: t.channels,
            input_planes: t.context.saturating_sub(1) * t.color_channels,
            height: t.height,
            width: t.width,
            blocks,
            strided_blocks: depth,
            dense_in: ch * h * w,
        }
    }

    /// Resolves the layout. Without an explicit `reduce_blocks`, adds
    /// channel-halving blocks until the dense weight count is at most
    /// [`DENSE_CAPACITY_FACTOR`] × the transformer parameter count.
    pub fn arch(&self, t: &TransformerConfig) -> SelectorArch {
        if let Some(r) = self.reduce_blocks {
            return self.arch_with(t, r);
        }
        let budget = DENSE_CAPACITY_FACTOR * transformer_param_count(t);
        let mut r = 0;
        loop {
            let a = self.arch_with(t, r);
            let last_ch = a.blocks.last().map(|b| b.0).unwrap_or(1);
            if a.dense_in * a.dense_out() <= budget || last_ch == 1 {
                return a;
            }
            r += 1;
        }
    }
}

/// Analytic parameter count of a transformer configuration.
pub fn transformer_param_count(t: &TransformerConfig) -> usize {
    let k2 = t.filter_size * t.filter_size;
    let n = t.channels;
    let depth = t.depth();
    let mut total = t.context * t.color_channels * n * k2 + n;
    total += (depth - 1) * (n * n * k2 + 3 * n);
    total += (depth - 1) * (2 * n * n * k2 + 3 * n);
    total += 2 * n * t.color_channels * k2 + t.color_channels;
    total
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectorParams<T> {
    /// Conv weights/biases; `gamma`/`beta` of the block's batch norm live in `norms`.
    pub convs: Vec<LayerParams<T>>,
    /// Batch norm per block; `None` for the first block.
    pub norms: Vec<Option<BatchNorm<T>>>,
    pub dense: LayerParams<T>,
}

impl<T: Scalar> SelectorParams<T> {
    pub fn init<R: Rng + ?Sized>(arch: &SelectorArch, rng: &mut R) -> Self {
        let convs = (0..arch.blocks.len())
            .map(|i| {
                let s = arch.block_shape(i);
                LayerParams::init(s.weight_len(), s.out_channels, 0, rng)
            })
            .collect();
        let norms = (0..arch.blocks.len())
            .map(|i| (i > 0).then(|| BatchNorm::new(arch.blocks[i].0)))
            .collect();
        let dense = LayerParams {
            weight: gaussian(arch.dense_in * arch.dense_out(), rng),
            bias: vec![T::zero(); arch.dense_out()],
            gamma: Vec::new(),
            beta: Vec::new(),
        };
        SelectorParams { convs, norms, dense }
    }

    pub fn zeros_like(&self) -> Self {
        SelectorParams {
            convs: self.convs.iter().map(LayerParams::zeros_like).collect(),
            norms: self
                .norms
                .iter()
                .map(|n| {
                    n.as_ref().map(|b| BatchNorm {
                        gamma: vec![T::zero(); b.gamma.len()],
                        beta: vec![T::zero(); b.beta.len()],
                        running_mean: vec![T::zero(); b.gamma.len()],
                        running_var: vec![T::zero(); b.gamma.len()],
                    })
                })
                .collect(),
            dense: self.dense.zeros_like(),
        }
    }

    /// Non-trainable running statistics, by name.
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[T])) {
        for (i, n) in self.norms.iter().enumerate() {
            if let Some(bn) = n {
                f(&format!("selector.block{i}.running_mean"), &bn.running_mean);
                f(&format!("selector.block{i}.running_var"), &bn.running_var);
            }
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        for (i, n) in self.norms.iter_mut().enumerate() {
            if let Some(bn) = n {
                f(&format!("selector.block{i}.running_mean"), &mut bn.running_mean);
                f(&format!("selector.block{i}.running_var"), &mut bn.running_var);
            }
        }
    }
}

impl<T: Scalar> ParamSet<T> for SelectorParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[T])) {
        for (i, (c, n)) in self.convs.iter().zip(&self.norms).enumerate() {
            c.visit(&format!("selector.block{i}"), f);
            if let Some(bn) = n {
                f(&format!("selector.block{i}.gamma"), &bn.gamma);
                f(&format!("selector.block{i}.beta"), &bn.beta);
            }
        }
        self.dense.visit("selector.dense", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        for (i, (c, n)) in self.convs.iter_mut().zip(self.norms.iter_mut()).enumerate() {
            c.visit_mut(&format!("selector.block{i}"), f);
            if let Some(bn) = n {
                f(&format!("selector.block{i}.gamma"), &mut bn.gamma);
                f(&format!("selector.block{i}.beta"), &mut bn.beta);
            }
        }
        self.dense.visit_mut("selector.dense", f);
    }
}

/// `|x_{i+1} − x_i|` for consecutive context frames, channel-stacked.
///
/// `x` holds `context · color_channels` planes per sample.
pub fn diff_frontend<T: Scalar>(x: &Batch<T>, color_channels: usize) -> Result<Batch<T>> {
    let context = x.channels / color_channels;
    if context < 2 {
        return Err(Error::arg("difference frontend needs at least two frames"));
    }
    let fl = color_channels * x.plane();
    let mut out = Batch::zeros(x.batch, (context - 1) * color_channels, x.height, x.width);
    for s in 0..x.batch {
        let src = x.sample(s);
        let dst = out.sample_mut(s);
        for i in 0..context - 1 {
            let (a, b) = (&src[i * fl..(i + 1) * fl], &src[(i + 1) * fl..(i + 2) * fl]);
            for ((d, &u), &v) in dst[i * fl..(i + 1) * fl].iter_mut().zip(a).zip(b) {
                *d = (v - u).abs();
            }
        }
    }
    Ok(out)
}

/// Frame-level difference planes for one window.
pub fn diff_frames<T: Scalar>(frames: &[Frame<T>]) -> Result<Batch<T>> {
    let c = frames.first().map(|f| f.channels).unwrap_or(1);
    diff_frontend(&Batch::stack_channels(&[frames.iter().collect()])?, c)
}

fn diff_backward<T: Scalar>(x: &Batch<T>, d_diff: &Batch<T>, color_channels: usize) -> Batch<T> {
    let context = x.channels / color_channels;
    let fl = color_channels * x.plane();
    let mut dx = Batch::zeros_like(x);
    for s in 0..x.batch {
        let src = x.sample(s);
        let g = d_diff.sample(s);
        let dst = dx.sample_mut(s);
        for i in 0..context - 1 {
            for j in 0..fl {
                let delta = src[(i + 1) * fl + j] - src[i * fl + j];
                let gj = g[i * fl + j];
                let sg = if delta > T::zero() {
                    gj
                } else if delta < T::zero() {
                    -gj
                } else {
                    T::zero()
                };
                dst[(i + 1) * fl + j] += sg;
                dst[i * fl + j] -= sg;
            }
        }
    }
    dx
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    /// Block input before the leading ReLU (absent for the first block).
    pre_input: Option<Batch<T>>,
    conv: ConvCache<T>,
    norm: Option<NormCache<T>>,
}

#[derive(Clone, Debug)]
pub struct SelectorCache<T> {
    input: Batch<T>,
    blocks: Vec<BlockCache<T>>,
    /// Last block output (pre-ReLU), flattened per sample.
    features: Batch<T>,
    alphas: Vec<AlphaMatrix<T>>,
}

impl<T: Scalar> SelectorCache<T> {
    pub fn alphas(&self) -> &[AlphaMatrix<T>] {
        &self.alphas
    }
}

fn check_window<T: Scalar>(x: &Batch<T>, t: &TransformerConfig) -> Result<()> {
    if (x.channels, x.height, x.width) != (t.context * t.color_channels, t.height, t.width) {
        return Err(Error::arg(format!(
            "selector expects {} planes of {}x{}, got {} of {}x{}",
            t.context * t.color_channels,
            t.height,
            t.width,
            x.channels,
            x.height,
            x.width
        )));
    }
    Ok(())
}

/// Forward pass over a batch of context windows. In [`BnMode::Train`] batch
/// statistics are used and running statistics updated.
pub fn forward_cached<T: Scalar>(
    x: &Batch<T>,
    params: &mut SelectorParams<T>,
    arch: &SelectorArch,
    t: &TransformerConfig,
    mode: BnMode,
) -> Result<SelectorCache<T>> {
    check_window(x, t)?;
    let diff = diff_frontend(x, t.color_channels)?;
    let mut h = diff;
    let mut blocks = Vec::with_capacity(arch.blocks.len());
    for i in 0..arch.blocks.len() {
        let (input, pre_input) = if i == 0 { (h.clone(), None) } else { (h.relu(), Some(h.clone())) };
        let layer = &params.convs[i];
        let (z, conv_cache) = conv::conv2d_forward(&input, arch.block_shape(i), &layer.weight, &layer.bias, arch.blocks[i].1);
        let (y, norm) = match params.norms[i].as_mut() {
            Some(bn) => {
                let (y, c) = bn.forward(&z, mode, true);
                (y, Some(c))
            }
            None => (z, None),
        };
        blocks.push(BlockCache {
            pre_input,
            conv: conv_cache,
            norm,
        });
        h = y;
    }
    let features = h;
    let flat = features.relu();
    let out = arch.dense_out();
    let mut alphas = Vec::with_capacity(x.batch);
    let mut logits = vec![T::zero(); out];
    for s in 0..x.batch {
        logits.copy_from_slice(&params.dense.bias);
        gemm(
            MatRef::new(&params.dense.weight, out, arch.dense_in),
            MatRef::new(flat.sample(s), arch.dense_in, 1),
            T::one(),
            &mut logits,
        );
        alphas.push(AlphaMatrix::from_logits(arch.rows, arch.columns, &logits));
    }
    Ok(SelectorCache {
        input: x.clone(),
        blocks,
        features,
        alphas,
    })
}

pub fn forward<T: Scalar>(
    x: &Batch<T>,
    params: &mut SelectorParams<T>,
    arch: &SelectorArch,
    t: &TransformerConfig,
    mode: BnMode,
) -> Result<Vec<AlphaMatrix<T>>> {
    Ok(forward_cached(x, params, arch, t, mode)?.alphas)
}

/// Eval-mode forward that leaves `params` untouched.
pub fn forward_eval<T: Scalar>(
    x: &Batch<T>,
    params: &SelectorParams<T>,
    arch: &SelectorArch,
    t: &TransformerConfig,
) -> Result<Vec<AlphaMatrix<T>>> {
    let mut p = params.clone();
    forward(x, &mut p, arch, t, BnMode::Eval)
}

/// Backward from gradients w.r.t. the unscaled weights, `[sample][row·N + n]`.
/// Returns the gradient w.r.t. the context planes.
pub fn backward<T: Scalar>(
    cache: &SelectorCache<T>,
    d_unscaled: &[Vec<T>],
    params: &SelectorParams<T>,
    arch: &SelectorArch,
    t: &TransformerConfig,
    grads: &mut SelectorParams<T>,
) -> Batch<T> {
    let out = arch.dense_out();
    let flat = cache.features.relu();
    let mut d_feat = Batch::zeros_like(&cache.features);
    for (s, (alpha, g)) in cache.alphas.iter().zip(d_unscaled).enumerate() {
        let dlogits = softmax_backward(alpha, g);
        for (b, &v) in grads.dense.bias.iter_mut().zip(&dlogits) {
            *b += v;
        }
        gemm(
            MatRef::new(&dlogits, out, 1),
            MatRef::new(flat.sample(s), 1, arch.dense_in),
            T::one(),
            &mut grads.dense.weight,
        );
        gemm(
            MatRef::new(&params.dense.weight, out, arch.dense_in).t(),
            MatRef::new(&dlogits, out, 1),
            T::zero(),
            d_feat.sample_mut(s),
        );
    }
    relu_backward(&cache.features.data, &mut d_feat.data);
    let mut dy = d_feat;
    for i in (0..arch.blocks.len()).rev() {
        let block = &cache.blocks[i];
        let dz = match (&block.norm, params.norms[i].as_ref(), grads.norms[i].as_mut()) {
            (Some(nc), Some(bn), Some(gbn)) => bn.backward(nc, &dy, &mut gbn.gamma, &mut gbn.beta),
            _ => dy,
        };
        let g = &mut grads.convs[i];
        let mut dx = conv::conv2d_backward(
            &block.conv,
            &dz,
            arch.block_shape(i),
            &params.convs[i].weight,
            &mut g.weight,
            &mut g.bias,
            true,
        )
        .expect("input gradient requested");
        if let Some(pre) = &block.pre_input {
            relu_backward(&pre.data, &mut dx.data);
        }
        dy = dx;
    }
    diff_backward(&cache.input, &dy, t.color_channels)
}

/// Convenience: eval-mode alpha for one window of frames.
pub fn select_frames<T: Scalar>(
    frames: &[Frame<T>],
    params: &SelectorParams<T>,
    arch: &SelectorArch,
    t: &TransformerConfig,
) -> Result<AlphaMatrix<T>> {
    let x = Batch::stack_channels(&[frames.iter().collect()])?;
    Ok(forward_eval(&x, params, arch, t)?.remove(0))
}

/// Ratio of selector to transformer parameter counts.
pub fn capacity_ratio<T: Scalar>(sel: &SelectorParams<T>, tr: &TransformerParams<T>) -> f64 {
    sel.param_count() as f64 / tr.param_count() as f64
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn setup(seed: u64) -> (TransformerConfig, SelectorArch, SelectorParams<f64>) {
        let t = TransformerConfig::new(4, 4, 3, 1, 16, 16);
        let cfg = SelectorConfig {
            ndf: 4,
            ..Default::default()
        };
        let arch = cfg.arch(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (t, arch.clone(), SelectorParams::init(&arch, &mut rng))
    }

    fn random_window(t: &TransformerConfig, batch: usize, seed: u64) -> Batch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Batch::zeros(batch, t.context * t.color_channels, t.height, t.width);
        x.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        x
    }

    #[test]
    fn diff_of_static_window_is_zero_and_counts_planes() {
        let f = Frame::<f64>::filled(1, 4, 4, 0.3);
        let d = diff_frames(&[f.clone(), f.clone(), f]).unwrap();
        assert_eq!(d.channels, 2);
        assert!(d.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diff_requires_two_frames() {
        let f = Frame::<f64>::filled(1, 4, 4, 0.3);
        assert!(diff_frames(&[f]).is_err());
    }

    #[test]
    fn diff_range_and_intensity_invariance() {
        let t = TransformerConfig::new(4, 4, 3, 3, 8, 8);
        let x = random_window(&t, 2, 3);
        let d = diff_frontend(&x, 3).unwrap();
        assert!(d.data.iter().all(|&v| (0.0..=2.0).contains(&v)));
        let mut shifted = x.clone();
        shifted.data.iter_mut().for_each(|v| *v += 0.25);
        let d2 = diff_frontend(&shifted, 3).unwrap();
        for (a, b) in d.data.iter().zip(&d2.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_dense_gives_uniform_rows() {
        let (t, arch, mut p) = setup(1);
        p.dense.weight.fill(0.0);
        let x = random_window(&t, 2, 4);
        let alphas = forward(&x, &mut p, &arch, &t, BnMode::Train).unwrap();
        for a in alphas {
            assert!(a.unscaled().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn large_bias_logit_saturates() {
        let (t, arch, mut p) = setup(2);
        p.dense.weight.fill(0.0);
        p.dense.bias[5] = 1000.0;
        let x = random_window(&t, 1, 5);
        let a = forward_eval(&x, &p, &arch, &t).unwrap().remove(0);
        assert!((a.unscaled()[5] - 1.0).abs() < 1e-12);
        assert!((a.scaled(1, 1) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rows_sum_to_one_and_eval_is_deterministic() {
        let (t, arch, p) = setup(3);
        let x = random_window(&t, 3, 6);
        let a = forward_eval(&x, &p, &arch, &t).unwrap();
        let b = forward_eval(&x, &p, &arch, &t).unwrap();
        assert_eq!(a, b);
        for m in &a {
            for r in 0..m.rows() {
                let s: f64 = m.unscaled_row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_doubling_is_capped() {
        let t = TransformerConfig::new(50, 14, 4, 3, 340, 300);
        let arch = SelectorConfig::default().arch(&t);
        let ch: Vec<usize> = arch.blocks.iter().map(|b| b.0).collect();
        assert_eq!(&ch[..7], &[16, 32, 64, 128, 128, 128, 128]);
    }

    #[test]
    fn explicit_reduce_blocks_halve_channels() {
        let t = TransformerConfig::new(4, 4, 3, 1, 16, 16);
        let cfg = SelectorConfig {
            ndf: 8,
            reduce_blocks: Some(2),
            ..Default::default()
        };
        let arch = cfg.arch(&t);
        let ch: Vec<usize> = arch.blocks.iter().map(|b| b.0).collect();
        assert_eq!(ch, vec![8, 16, 8, 4]);
        assert_eq!(arch.dense_in, 4 * 4 * 4);
    }

    #[test]
    fn analytic_transformer_count_matches_params() {
        let t = TransformerConfig::new(5, 6, 3, 3, 32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = TransformerParams::<f32>::init(&t, &mut rng);
        assert_eq!(p.param_count(), transformer_param_count(&t));
        let arch = SelectorConfig::default().arch(&t);
        let s = SelectorParams::<f32>::init(&arch, &mut rng);
        assert_eq!(s.param_count(), arch.param_count());
    }
}
