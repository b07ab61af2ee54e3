//! Transformation network: a fully convolutional encoder-decoder with skip
//! connections whose decoder-branch feature maps are scaled per channel by
//! the selector's alpha weights.
//!
//! Layout for `L` hidden layers (`L/2` encoder blocks, `L/2` decoder blocks):
//!
//! * encoder block 0: stride-2 convolution over the channel-stacked context
//!   frames (no activation, no normalization);
//! * encoder block `i ≥ 1`: ReLU → stride-2 convolution → instance norm;
//! * decoder block `d`: ReLU on both inputs of `[skip ; α_d ⊙ prev]` →
//!   transposed convolution (×2, cropped to the skip partner's size) →
//!   instance norm, or tanh for the last block.
//!
//! Block 0 uses the bottleneck as both `skip` and `prev`; block `d` takes
//! encoder level `L/2 − 1 − d` as skip, so the output block merges with
//! level 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alpha::AlphaMatrix;
use crate::error::{Error, Result};
use crate::layers::conv::{self, ConvCache, ConvShape, Geometry};
use crate::layers::norm::{self, NormCache};
use crate::params::{LayerParams, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{relu_backward, Batch, Frame};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    /// Channels per hidden layer (N).
    pub channels: usize,
    /// Hidden-layer count (L, even).
    pub layers: usize,
    /// Conditioning length (δ).
    pub context: usize,
    pub color_channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_filter")]
    pub filter_size: usize,
}

fn default_filter() -> usize {
    4
}

impl TransformerConfig {
    pub fn new(channels: usize, layers: usize, context: usize, color_channels: usize, height: usize, width: usize) -> Self {
        TransformerConfig {
            channels,
            layers,
            context,
            color_channels,
            height,
            width,
            filter_size: default_filter(),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers / 2
    }

    /// Spatial size of every encoder level, finest first.
    pub fn level_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth());
        let (mut h, mut w) = (self.height, self.width);
        for _ in 0..self.depth() {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            dims.push((h, w));
        }
        dims
    }

    pub fn bottleneck_dims(&self) -> (usize, usize) {
        *self.level_dims().last().expect("depth >= 2")
    }

    /// Checks hard constraints; returns soft warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.layers < 4 || self.layers % 2 != 0 {
            return Err(Error::arg(format!("layer count must be even and >= 4, got {}", self.layers)));
        }
        if self.channels == 0 {
            return Err(Error::arg("channel count must be >= 1"));
        }
        if self.context == 0 {
            return Err(Error::arg("context length must be >= 1"));
        }
        if !matches!(self.color_channels, 1 | 3) {
            return Err(Error::arg(format!("color channels must be 1 or 3, got {}", self.color_channels)));
        }
        if self.filter_size != 4 {
            return Err(Error::arg("transformer filter size is fixed to 4"));
        }
        let min = 1usize << self.depth();
        if self.height < min || self.width < min {
            return Err(Error::arg(format!(
                "{}x{} frames are too small for {} layers (bottleneck below one pixel)",
                self.height, self.width, self.layers
            )));
        }
        let mut warnings = Vec::new();
        let (bh, bw) = self.bottleneck_dims();
        if !(3..=7).contains(&bh) || !(3..=7).contains(&bw) {
            warnings.push(format!("bottleneck is {bh}x{bw}; 3 to 7 pixels per side is recommended"));
        }
        Ok(warnings)
    }

    fn input_planes(&self) -> usize {
        self.context * self.color_channels
    }

    fn encoder_shape(&self, i: usize) -> ConvShape {
        ConvShape {
            in_channels: if i == 0 { self.input_planes() } else { self.channels },
            out_channels: self.channels,
            kernel: self.filter_size,
        }
    }

    fn decoder_shape(&self, d: usize) -> ConvShape {
        ConvShape {
            in_channels: 2 * self.channels,
            out_channels: if d + 1 == self.depth() { self.color_channels } else { self.channels },
            kernel: self.filter_size,
        }
    }

    fn decoder_target(&self, d: usize) -> (usize, usize) {
        let depth = self.depth();
        if d + 1 == depth {
            (self.height, self.width)
        } else {
            self.level_dims()[depth - 2 - d]
        }
    }

    fn decoder_geometry(&self, d: usize) -> Geometry {
        let dims = self.level_dims();
        let (h, w) = if d == 0 { dims[self.depth() - 1] } else { self.decoder_target(d - 1) };
        let (th, tw) = self.decoder_target(d);
        Geometry::doubling(h, w, th, tw, self.filter_size)
    }

    fn encoder_geometry(&self, i: usize) -> Geometry {
        let (h, w) = if i == 0 { (self.height, self.width) } else { self.level_dims()[i - 1] };
        Geometry::halving(h, w, self.filter_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams<T> {
    pub encoder: Vec<LayerParams<T>>,
    pub decoder: Vec<LayerParams<T>>,
}

impl<T: Scalar> TransformerParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &TransformerConfig, rng: &mut R) -> Self {
        let depth = cfg.depth();
        let encoder = (0..depth)
            .map(|i| {
                let s = cfg.encoder_shape(i);
                LayerParams::init(s.weight_len(), s.out_channels, if i == 0 { 0 } else { s.out_channels }, rng)
            })
            .collect();
        let decoder = (0..depth)
            .map(|d| {
                let s = cfg.decoder_shape(d);
                LayerParams::init(s.weight_len(), s.out_channels, if d + 1 == depth { 0 } else { s.out_channels }, rng)
            })
            .collect();
        TransformerParams { encoder, decoder }
    }

    pub fn zeros_like(&self) -> Self {
        TransformerParams {
            encoder: self.encoder.iter().map(LayerParams::zeros_like).collect(),
            decoder: self.decoder.iter().map(LayerParams::zeros_like).collect(),
        }
    }
}

impl<T: Scalar> ParamSet<T> for TransformerParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[T])) {
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&format!("transformer.enc{i}"), f);
        }
        for (d, l) in self.decoder.iter().enumerate() {
            l.visit(&format!("transformer.dec{d}"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&format!("transformer.enc{i}"), f);
        }
        for (d, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&format!("transformer.dec{d}"), f);
        }
    }
}

/// Pre-activation encoder outputs, finest level first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Batch<T>>,
}

#[derive(Clone, Debug)]
struct EncoderBlockCache<T> {
    conv: ConvCache<T>,
    norm: Option<NormCache<T>>,
}

#[derive(Clone, Debug)]
struct DecoderBlockCache<T> {
    /// `[relu(skip) ; α ⊙ relu(prev)]`, the transposed-convolution input.
    merged: Batch<T>,
    /// `relu(prev)` before modulation.
    prev_act: Batch<T>,
    norm: Option<NormCache<T>>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct TransformerCache<T> {
    pyramid: FeaturePyramid<T>,
    encoder: Vec<EncoderBlockCache<T>>,
    decoder: Vec<DecoderBlockCache<T>>,
    /// Decoder block outputs (pre-activation), excluding the final tanh output.
    decoder_out: Vec<Batch<T>>,
    /// Scaled modulation weights per sample, `[sample][row][channel]`; `None` when unmodulated.
    scaled_alpha: Option<Vec<Vec<Vec<T>>>>,
    output: Batch<T>,
}

impl<T: Scalar> TransformerCache<T> {
    pub fn output(&self) -> &Batch<T> {
        &self.output
    }

    pub fn pyramid(&self) -> &FeaturePyramid<T> {
        &self.pyramid
    }
}

/// Gradients produced by [`backward`] besides the parameter gradients.
pub struct TransformerInputGrads<T> {
    /// Gradient w.r.t. the stacked context planes.
    pub input: Batch<T>,
    /// Gradient w.r.t. the scaled alpha weights, `[sample][row·N + n]`.
    pub scaled_alpha: Option<Vec<Vec<T>>>,
}

/// Which pre-activation contributions of the output block are kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecomposeMode {
    Full,
    /// Modulated decoder branch only (skip contributions zeroed).
    Foreground,
    /// Skip branch only (modulated contributions zeroed).
    Background,
}

/// Output-block pre-activation split into its skip and modulated parts.
#[derive(Clone, Debug)]
pub struct OutputSplit<T> {
    /// Pre-activation as computed by the forward pass (bias included).
    pub full: Batch<T>,
    /// Contribution of the skip channels, without bias.
    pub background: Batch<T>,
    /// Contribution of the modulated decoder channels, without bias.
    pub foreground: Batch<T>,
    pub bias: Vec<T>,
}

fn check_input<T: Scalar>(x: &Batch<T>, cfg: &TransformerConfig) -> Result<()> {
    let want = (cfg.input_planes(), cfg.height, cfg.width);
    if (x.channels, x.height, x.width) != want {
        return Err(Error::arg(format!(
            "transformer expects {} context planes of {}x{}, got {} of {}x{}",
            want.0, want.1, want.2, x.channels, x.height, x.width
        )));
    }
    Ok(())
}

fn check_alpha<T: Scalar>(alpha: &[AlphaMatrix<T>], batch: usize, cfg: &TransformerConfig) -> Result<()> {
    if alpha.len() != batch {
        return Err(Error::arg(format!("{} alpha matrices for a batch of {batch}", alpha.len())));
    }
    for a in alpha {
        if a.rows() != cfg.depth() || a.channels() != cfg.channels {
            return Err(Error::arg(format!(
                "alpha is {}x{}, transformer needs {}x{}",
                a.rows(),
                a.channels(),
                cfg.depth(),
                cfg.channels
            )));
        }
    }
    Ok(())
}

fn encode_cached<T: Scalar>(
    x: &Batch<T>,
    params: &TransformerParams<T>,
    cfg: &TransformerConfig,
) -> (FeaturePyramid<T>, Vec<EncoderBlockCache<T>>) {
    let mut levels: Vec<Batch<T>> = Vec::with_capacity(cfg.depth());
    let mut caches = Vec::with_capacity(cfg.depth());
    for (i, layer) in params.encoder.iter().enumerate() {
        let input = if i == 0 { x.clone() } else { levels[i - 1].relu() };
        let (z, conv_cache) =
            conv::conv2d_forward(&input, cfg.encoder_shape(i), &layer.weight, &layer.bias, cfg.encoder_geometry(i));
        let (y, norm_cache) = if layer.is_normalized() {
            let (y, c) = norm::instance_norm_forward(&z, &layer.gamma, &layer.beta);
            (y, Some(c))
        } else {
            (z, None)
        };
        levels.push(y);
        caches.push(EncoderBlockCache {
            conv: conv_cache,
            norm: norm_cache,
        });
    }
    (FeaturePyramid { levels }, caches)
}

/// Encoder pass over a batch of channel-stacked context windows.
pub fn encode<T: Scalar>(x: &Batch<T>, params: &TransformerParams<T>, cfg: &TransformerConfig) -> Result<FeaturePyramid<T>> {
    check_input(x, cfg)?;
    Ok(encode_cached(x, params, cfg).0)
}

fn scale_channels<T: Scalar>(x: &mut Batch<T>, scales: &[Vec<Vec<T>>], row: usize) {
    for s in 0..x.batch {
        for c in 0..x.channels {
            let a = scales[s][row][c];
            x.channel_mut(s, c).iter_mut().for_each(|v| *v *= a);
        }
    }
}

fn scaled_alphas<T: Scalar>(alpha: &[AlphaMatrix<T>]) -> Vec<Vec<Vec<T>>> {
    alpha
        .iter()
        .map(|a| (0..a.rows()).map(|r| a.scaled_row(r)).collect())
        .collect()
}

fn decode_cached<T: Scalar>(
    pyramid: FeaturePyramid<T>,
    encoder: Vec<EncoderBlockCache<T>>,
    scaled_alpha: Option<Vec<Vec<Vec<T>>>>,
    params: &TransformerParams<T>,
    cfg: &TransformerConfig,
) -> TransformerCache<T> {
    let depth = cfg.depth();
    let mut decoder = Vec::with_capacity(depth);
    let mut decoder_out: Vec<Batch<T>> = Vec::with_capacity(depth);
    let mut output = None;
    for (d, layer) in params.decoder.iter().enumerate() {
        let skip = &pyramid.levels[depth - 1 - d];
        let prev = if d == 0 { &pyramid.levels[depth - 1] } else { &decoder_out[d - 1] };
        let prev_act = prev.relu();
        let mut modulated = prev_act.clone();
        if let Some(scales) = scaled_alpha.as_ref() {
            scale_channels(&mut modulated, scales, d);
        }
        let merged = Batch::concat_channels(&skip.relu(), &modulated);
        let z = conv::deconv2d_forward(
            &merged,
            cfg.decoder_shape(d),
            &layer.weight,
            Some(&layer.bias),
            cfg.decoder_geometry(d),
        );
        if d + 1 == depth {
            let mut out = z;
            out.data.iter_mut().for_each(|v| *v = v.tanh());
            output = Some(out);
            decoder.push(DecoderBlockCache {
                merged,
                prev_act,
                norm: None,
            });
        } else {
            let (y, c) = norm::instance_norm_forward(&z, &layer.gamma, &layer.beta);
            decoder_out.push(y);
            decoder.push(DecoderBlockCache {
                merged,
                prev_act,
                norm: Some(c),
            });
        }
    }
    TransformerCache {
        pyramid,
        encoder,
        decoder,
        decoder_out,
        scaled_alpha,
        output: output.expect("depth >= 1"),
    }
}

/// Decoder pass. `alpha` holds one matrix per batch sample.
pub fn decode<T: Scalar>(
    pyramid: &FeaturePyramid<T>,
    alpha: &[AlphaMatrix<T>],
    params: &TransformerParams<T>,
    cfg: &TransformerConfig,
) -> Result<Batch<T>> {
    if pyramid.levels.len() != cfg.depth() {
        return Err(Error::arg("feature pyramid depth does not match the config"));
    }
    check_alpha(alpha, pyramid.levels[0].batch, cfg)?;
    Ok(decode_cached(pyramid.clone(), Vec::new(), Some(scaled_alphas(alpha)), params, cfg).output)
}

/// Full forward pass with a cache for [`backward`].
pub fn forward_cached<T: Scalar>(
    x: &Batch<T>,
    alpha: Option<&[AlphaMatrix<T>]>,
    params: &TransformerParams<T>,
    cfg: &TransformerConfig,
) -> Result<TransformerCache<T>> {
    check_input(x, cfg)?;
    if let Some(a) = alpha {
        check_alpha(a, x.batch, cfg)?;
    }
    let (pyramid, enc) = encode_cached(x, params, cfg);
    Ok(decode_cached(pyramid, enc, alpha.map(scaled_alphas), params, cfg))
}

/// `decode(encode(x), alpha)`.
pub fn forward<T: Scalar>(
    x: &Batch<T>,
    alpha: &[AlphaMatrix<T>],
    params: &TransformerParams<T>,
    cfg: &TransformerConfig,
) -> Result<Batch<T>> {
    Ok(forward_cached(x, Some(alpha), params, cfg)?.output)
}

/// Plain U-net pass: no modulation at all.
pub fn forward_unmodulated<T: Scalar>(x: &Batch<T>, params: &TransformerParams<T>, cfg: &TransformerConfig) -> Result<Batch<T>> {
    Ok(forward_cached(x, None, params, cfg)?.output)
}

/// Convenience wrapper for a single context window given as frames.
pub fn forward_frames<T: Scalar>(
    frames: &[Frame<T>],
    alpha: &AlphaMatrix<T>,
    params: &TransformerParams<T>,
    cfg: &TransformerConfig,
) -> Result<Frame<T>> {
    if frames.len() != cfg.context {
        return Err(Error::arg(format!("expected {} context frames, got {}", cfg.context, frames.len())));
    }
    let x = Batch::stack_channels(&[frames.iter().collect()])?;
    Ok(forward(&x, std::slice::from_ref(alpha), params, cfg)?.frame(0))
}

/// Recomputes the output block's pre-activation split into skip and
/// modulated contributions.
pub fn output_split<T: Scalar>(cache: &TransformerCache<T>, params: &TransformerParams<T>, cfg: &TransformerConfig) -> OutputSplit<T> {
    let last = cfg.depth() - 1;
    let layer = &params.decoder[last];
    let merged = &cache.decoder[last].merged;
    let shape = cfg.decoder_shape(last);
    let g = cfg.decoder_geometry(last);
    let n = cfg.channels;
    let (skip, modulated) = merged.split_channels(n);
    let zeros = Batch::zeros_like(&skip);
    let background = conv::deconv2d_forward(&Batch::concat_channels(&skip, &zeros), shape, &layer.weight, None, g);
    let foreground = conv::deconv2d_forward(&Batch::concat_channels(&zeros, &modulated), shape, &layer.weight, None, g);
    let full = conv::deconv2d_forward(merged, shape, &layer.weight, Some(&layer.bias), g);
    OutputSplit {
        full,
        background,
        foreground,
        bias: layer.bias.clone(),
    }
}

/// Output frame with the chosen pre-activation parts. `Full` is the
/// ordinary forward output.
pub fn decompose<T: Scalar>(
    x: &Batch<T>,
    alpha: &[AlphaMatrix<T>],
    params: &TransformerParams<T>,
    cfg: &TransformerConfig,
    mode: DecomposeMode,
) -> Result<Batch<T>> {
    let cache = forward_cached(x, Some(alpha), params, cfg)?;
    if mode == DecomposeMode::Full {
        return Ok(cache.output);
    }
    let split = output_split(&cache, params, cfg);
    let mut out = match mode {
        DecomposeMode::Foreground => split.foreground,
        _ => split.background,
    };
    let plane = out.plane();
    for s in 0..out.batch {
        for (c, ch) in out.sample_mut(s).chunks_mut(plane).enumerate() {
            ch.iter_mut().for_each(|v| *v = (*v + split.bias[c]).tanh());
        }
    }
    Ok(out)
}

/// Backpropagates `d_output` (gradient w.r.t. the tanh output), accumulating
/// parameter gradients into `grads`.
pub fn backward<T: Scalar>(
    cache: &TransformerCache<T>,
    d_output: &Batch<T>,
    params: &TransformerParams<T>,
    cfg: &TransformerConfig,
    grads: &mut TransformerParams<T>,
) -> TransformerInputGrads<T> {
    let depth = cfg.depth();
    let n = cfg.channels;
    let batch = d_output.batch;
    let mut d_levels: Vec<Batch<T>> = cache.pyramid.levels.iter().map(Batch::zeros_like).collect();
    let mut d_alpha = cache
        .scaled_alpha
        .as_ref()
        .map(|_| vec![vec![T::zero(); depth * n]; batch]);

    // Gradient w.r.t. the current decoder block's output.
    let mut d_out = d_output.clone();
    for d in (0..depth).rev() {
        let block = &cache.decoder[d];
        let layer = &params.decoder[d];
        let g = &mut grads.decoder[d];
        let dz = match &block.norm {
            None => {
                let mut dz = d_out.clone();
                for (v, &y) in dz.data.iter_mut().zip(&cache.output.data) {
                    *v *= T::one() - y * y;
                }
                dz
            }
            Some(nc) => norm::instance_norm_backward(nc, &d_out, &layer.gamma, &mut g.gamma, &mut g.beta),
        };
        let d_merged = conv::deconv2d_backward(
            &block.merged,
            &dz,
            cfg.decoder_shape(d),
            cfg.decoder_geometry(d),
            &layer.weight,
            &mut g.weight,
            &mut g.bias,
        );
        let (mut d_skip, mut d_prev) = d_merged.split_channels(n);
        if let (Some(scales), Some(da)) = (cache.scaled_alpha.as_ref(), d_alpha.as_mut()) {
            for s in 0..batch {
                for c in 0..n {
                    let gsum: T = d_prev
                        .channel(s, c)
                        .iter()
                        .zip(block.prev_act.channel(s, c))
                        .map(|(&a, &b)| a * b)
                        .sum();
                    da[s][d * n + c] += gsum;
                    let a = scales[s][d][c];
                    d_prev.channel_mut(s, c).iter_mut().for_each(|v| *v *= a);
                }
            }
        }
        let skip_idx = depth - 1 - d;
        relu_backward(&cache.pyramid.levels[skip_idx].data, &mut d_skip.data);
        d_levels[skip_idx].add_assign(&d_skip);
        if d == 0 {
            relu_backward(&cache.pyramid.levels[depth - 1].data, &mut d_prev.data);
            d_levels[depth - 1].add_assign(&d_prev);
        } else {
            relu_backward(&cache.decoder_out[d - 1].data, &mut d_prev.data);
            d_out = d_prev;
        }
    }

    let mut d_input = None;
    for i in (0..depth).rev() {
        let block = &cache.encoder[i];
        let layer = &params.encoder[i];
        let g = &mut grads.encoder[i];
        let dy = std::mem::replace(&mut d_levels[i], Batch::zeros(0, 0, 0, 0));
        let dz = match &block.norm {
            Some(nc) => norm::instance_norm_backward(nc, &dy, &layer.gamma, &mut g.gamma, &mut g.beta),
            None => dy,
        };
        let dx = conv::conv2d_backward(
            &block.conv,
            &dz,
            cfg.encoder_shape(i),
            &layer.weight,
            &mut g.weight,
            &mut g.bias,
            true,
        )
        .expect("input gradient requested");
        if i == 0 {
            d_input = Some(dx);
        } else {
            let mut dx = dx;
            relu_backward(&cache.pyramid.levels[i - 1].data, &mut dx.data);
            d_levels[i - 1].add_assign(&dx);
        }
    }
    TransformerInputGrads {
        input: d_input.expect("depth >= 1"),
        scaled_alpha: d_alpha,
    }
}
