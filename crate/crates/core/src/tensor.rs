use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A single image: `channels × height × width`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Frame<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Frame {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Frame {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::arg(format!(
                "frame buffer has {} values, expected {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Frame {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &Frame<T>) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_same_shape(&self, other: &Frame<T>, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::arg(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// Horizontal mirror of every channel.
    pub fn flipped_lr(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Frame {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn cast<U: Scalar>(&self) -> Frame<U> {
        Frame {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// A batch of multi-channel planes: `batch × channels × height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Batch {
            batch,
            channels,
            height,
            width,
            data: vec![T::zero(); batch * channels * height * width],
        }
    }

    pub fn zeros_like(other: &Batch<T>) -> Self {
        Self::zeros(other.batch, other.channels, other.height, other.width)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.channels, self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.sample_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn channel(&self, b: usize, c: usize) -> &[T] {
        let p = self.plane();
        let off = (b * self.channels + c) * p;
        &self.data[off..off + p]
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let p = self.plane();
        let off = (b * self.channels + c) * p;
        &mut self.data[off..off + p]
    }

    /// Stacks per-sample lists of frames along the channel axis.
    ///
    /// `samples[b]` holds the frames of sample `b`; all frames share one shape.
    pub fn stack_channels(samples: &[Vec<&Frame<T>>]) -> Result<Self> {
        let first = samples
            .first()
            .and_then(|s| s.first())
            .ok_or_else(|| Error::arg("cannot stack an empty batch"))?;
        let (c, h, w) = first.shape();
        let per = samples[0].len();
        let mut out = Batch::zeros(samples.len(), per * c, h, w);
        let fl = c * h * w;
        for (b, frames) in samples.iter().enumerate() {
            if frames.len() != per {
                return Err(Error::arg("ragged batch: samples carry different frame counts"));
            }
            let dst = out.sample_mut(b);
            for (i, f) in frames.iter().enumerate() {
                f.check_same_shape(first, "stack_channels")?;
                dst[i * fl..(i + 1) * fl].copy_from_slice(&f.data);
            }
        }
        Ok(out)
    }

    pub fn from_frames(frames: &[Frame<T>]) -> Result<Self> {
        let refs: Vec<Vec<&Frame<T>>> = frames.iter().map(|f| vec![f]).collect();
        Self::stack_channels(&refs)
    }

    /// Sample `b` as a frame (all channels).
    pub fn frame(&self, b: usize) -> Frame<T> {
        Frame {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.sample(b).to_vec(),
        }
    }

    /// Splits sample `b` into `parts` frames of `channels / parts` channels each.
    pub fn unstack(&self, b: usize, parts: usize) -> Vec<Frame<T>> {
        let c = self.channels / parts;
        let fl = c * self.plane();
        self.sample(b)
            .chunks(fl)
            .map(|d| Frame {
                channels: c,
                height: self.height,
                width: self.width,
                data: d.to_vec(),
            })
            .collect()
    }

    /// Channel concatenation `[a ; b]` per sample.
    pub fn concat_channels(a: &Batch<T>, b: &Batch<T>) -> Self {
        assert_eq!(a.batch, b.batch);
        assert_eq!((a.height, a.width), (b.height, b.width));
        let mut out = Batch::zeros(a.batch, a.channels + b.channels, a.height, a.width);
        let (la, lb) = (a.sample_len(), b.sample_len());
        for s in 0..a.batch {
            let dst = out.sample_mut(s);
            dst[..la].copy_from_slice(a.sample(s));
            dst[la..la + lb].copy_from_slice(b.sample(s));
        }
        out
    }

    /// Inverse of [`Batch::concat_channels`]: returns the first `first` channels and the rest.
    pub fn split_channels(&self, first: usize) -> (Batch<T>, Batch<T>) {
        let mut a = Batch::zeros(self.batch, first, self.height, self.width);
        let mut b = Batch::zeros(self.batch, self.channels - first, self.height, self.width);
        let la = a.sample_len();
        for s in 0..self.batch {
            let src = self.sample(s);
            a.sample_mut(s).copy_from_slice(&src[..la]);
            b.sample_mut(s).copy_from_slice(&src[la..]);
        }
        (a, b)
    }

    pub fn relu(&self) -> Self {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Batch<T>) {
        assert_eq!(self.dims(), other.dims());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Gradient of `relu` given the pre-activation input.
pub fn relu_backward<T: Scalar>(input: &[T], grad: &mut [T]) {
    for (g, &x) in grad.iter_mut().zip(input) {
        if x <= T::zero() {
            *g = T::zero();
        }
    }
}
