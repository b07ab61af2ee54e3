use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Selector output: `rows × channels` nonnegative weights, each row summing to one.
///
/// Row `d` modulates the decoder-branch input of decoder block `d`; the
/// transformer multiplies channel `n` by the scaled weight `channels · α̂ₙ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMatrix<T> {
    rows: usize,
    channels: usize,
    unscaled: Vec<T>,
}

impl<T: Scalar> AlphaMatrix<T> {
    pub fn uniform(rows: usize, channels: usize) -> Self {
        let v = T::one() / T::from_usize(channels).unwrap();
        AlphaMatrix {
            rows,
            channels,
            unscaled: vec![v; rows * channels],
        }
    }

    /// Row-wise softmax of `logits` (max-subtracted).
    pub fn from_logits(rows: usize, channels: usize, logits: &[T]) -> Self {
        assert_eq!(logits.len(), rows * channels);
        let mut unscaled = Vec::with_capacity(logits.len());
        for row in logits.chunks(channels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
            let s: T = e.iter().copied().sum();
            unscaled.extend(e.into_iter().map(|v| v / s));
        }
        AlphaMatrix {
            rows,
            channels,
            unscaled,
        }
    }

    /// Builds a matrix from unscaled weights, validating row-stochasticity to 1e-5.
    pub fn from_unscaled(rows: usize, channels: usize, unscaled: Vec<T>) -> Result<Self> {
        if unscaled.len() != rows * channels {
            return Err(Error::arg(format!(
                "alpha buffer has {} values, expected {rows}x{channels}",
                unscaled.len()
            )));
        }
        for (r, row) in unscaled.chunks(channels).enumerate() {
            let s: f64 = row.iter().map(|v| v.as_f64()).sum();
            if row.iter().any(|v| *v < T::zero()) || (s - 1.0).abs() > 1e-5 {
                return Err(Error::arg(format!("alpha row {r} is not a probability vector (sum {s})")));
            }
        }
        Ok(AlphaMatrix {
            rows,
            channels,
            unscaled,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn unscaled(&self) -> &[T] {
        &self.unscaled
    }

    pub fn unscaled_row(&self, row: usize) -> &[T] {
        &self.unscaled[row * self.channels..(row + 1) * self.channels]
    }

    /// `channels · α̂` for one row.
    pub fn scaled_row(&self, row: usize) -> Vec<T> {
        let n = T::from_usize(self.channels).unwrap();
        self.unscaled_row(row).iter().map(|&v| v * n).collect()
    }

    pub fn scaled(&self, row: usize, channel: usize) -> T {
        self.unscaled[row * self.channels + channel] * T::from_usize(self.channels).unwrap()
    }

    /// Per-row count of channels whose scaled weight exceeds `threshold`.
    pub fn active_channels(&self, threshold: T) -> Vec<usize> {
        (0..self.rows)
            .map(|r| self.scaled_row(r).into_iter().filter(|&v| v > threshold).count())
            .collect()
    }
}

/// Backward of the row softmax: `dz = α̂ ⊙ (dα̂ − ⟨α̂, dα̂⟩)` per row.
pub fn softmax_backward<T: Scalar>(alpha: &AlphaMatrix<T>, d_unscaled: &[T]) -> Vec<T> {
    let n = alpha.channels;
    let mut out = Vec::with_capacity(d_unscaled.len());
    for (a, g) in alpha.unscaled.chunks(n).zip(d_unscaled.chunks(n)) {
        let dot: T = a.iter().zip(g).map(|(&x, &y)| x * y).sum();
        out.extend(a.iter().zip(g).map(|(&x, &y)| x * (y - dot)));
    }
    out
}
