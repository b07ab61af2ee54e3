//! Deterministic synthetic clips: a seeded textured background with a
//! foreground object on an integer-pixel periodic trajectory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::video_io::{normalize, Clip, RawFrame};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Square looping around a diamond: triangle waves in x and y, a quarter period apart.
    OscillatingSquare,
    /// Full-height bar sweeping left and right at `amplitude` px/frame.
    TranslatingBar,
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub period: usize,
    /// Square: peak excursion in pixels. Bar: pixels per frame.
    pub amplitude: usize,
    /// Square side or bar width.
    pub object_size: usize,
    pub seed: u64,
    pub length: usize,
}

impl SynthSpec {
    pub fn oscillating_square(height: usize, width: usize, period: usize, length: usize, seed: u64) -> Self {
        SynthSpec {
            kind: SynthKind::OscillatingSquare,
            height,
            width,
            channels: 1,
            period,
            amplitude: period / 2,
            object_size: (height.min(width) / 5).max(2),
            seed,
            length,
        }
    }

    pub fn translating_bar(height: usize, width: usize, period: usize, amplitude: usize, length: usize, seed: u64) -> Self {
        SynthSpec {
            kind: SynthKind::TranslatingBar,
            height,
            width,
            channels: 1,
            period,
            amplitude,
            object_size: amplitude * period / 2,
            seed,
            length,
        }
    }

    pub fn still(height: usize, width: usize, length: usize, seed: u64) -> Self {
        SynthSpec {
            kind: SynthKind::Static,
            height,
            width,
            channels: 1,
            period: 2,
            amplitude: 0,
            object_size: 0,
            seed,
            length,
        }
    }

    fn origin(&self) -> (usize, usize) {
        match self.kind {
            SynthKind::OscillatingSquare => {
                let span = self.object_size + self.amplitude;
                (self.height.saturating_sub(span) / 2, self.width.saturating_sub(span) / 2)
            }
            _ => (0, 0),
        }
    }

    /// Top-left corner of the object at time `t`.
    pub fn position(&self, t: usize) -> (usize, usize) {
        let (y0, x0) = self.origin();
        match self.kind {
            SynthKind::OscillatingSquare => {
                let p = self.period;
                (y0 + triangle(t + p / 4, p, self.amplitude), x0 + triangle(t, p, self.amplitude))
            }
            SynthKind::TranslatingBar => (0, triangle(t, self.period, self.amplitude * self.period / 2)),
            SynthKind::Static => (0, 0),
        }
    }

    /// Object bounding box `(y0, x0, y1, x1)` (exclusive) at time `t`.
    pub fn object_box(&self, t: usize) -> Option<(usize, usize, usize, usize)> {
        let (y, x) = self.position(t);
        match self.kind {
            SynthKind::OscillatingSquare => Some((y, x, y + self.object_size, x + self.object_size)),
            SynthKind::TranslatingBar => Some((0, x, self.height, x + self.object_size)),
            SynthKind::Static => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.period < 2 {
            return Err(Error::arg("period must be >= 2"));
        }
        if self.length == 0 || self.height < 8 || self.width < 8 {
            return Err(Error::arg("synthetic clips need >= 1 frame of at least 8x8"));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::arg("channels must be 1 or 3"));
        }
        if self.kind == SynthKind::Static {
            return Ok(());
        }
        if self.object_size == 0 {
            return Err(Error::arg("object size must be >= 1"));
        }
        for t in 0..self.period {
            let (_, _, y1, x1) = self.object_box(t).expect("moving kinds have a box");
            if y1 > self.height || x1 > self.width {
                return Err(Error::arg(format!(
                    "object leaves the {}x{} frame at t={t} (reaches {y1}x{x1})",
                    self.height, self.width
                )));
            }
        }
        Ok(())
    }
}

/// Integer triangle wave of period `p`, rising from 0 to `peak` and back.
fn triangle(t: usize, p: usize, peak: usize) -> usize {
    let u = t % p;
    let twice = 2 * u * peak;
    let rising = if 2 * u <= p { twice } else { 2 * (p - u) * peak };
    // rounded rising / p
    (rising + p / 2) / p
}

/// Smooth value-noise texture in `[lo, hi]`, one plane per channel.
fn background(spec: &SynthSpec) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let cell = 4usize;
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let (lo, hi) = (30.0, 120.0);
    let mut out = vec![0u8; h * w * c];
    for ch in 0..c {
        let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(lo..hi)).collect();
        for y in 0..h {
            let fy = y as f64 / cell as f64;
            let (iy, ty) = (fy.floor() as usize, fy.fract());
            for x in 0..w {
                let fx = x as f64 / cell as f64;
                let (ix, tx) = (fx.floor() as usize, fx.fract());
                let g = |a: usize, b: usize| grid[a * gw + b];
                let v = g(iy, ix) * (1.0 - ty) * (1.0 - tx)
                    + g(iy, ix + 1) * (1.0 - ty) * tx
                    + g(iy + 1, ix) * ty * (1.0 - tx)
                    + g(iy + 1, ix + 1) * ty * tx;
                out[(y * w + x) * c + ch] = v.round() as u8;
            }
        }
    }
    out
}

/// Renders the clip as 8-bit frames.
pub fn generate_raw(spec: &SynthSpec) -> Result<Vec<RawFrame>> {
    spec.validate()?;
    let bg = background(spec);
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    (0..spec.length)
        .map(|t| {
            let mut px = bg.clone();
            if let Some((y0, x0, y1, x1)) = spec.object_box(t) {
                for y in y0..y1 {
                    for x in x0..x1 {
                        let edge = y < y0 + 2 || y + 2 >= y1 || x < x0 + 2 || x + 2 >= x1;
                        let v = if edge { 180 } else { 235 };
                        for ch in 0..c {
                            px[(y * w + x) * c + ch] = v - (ch as u8) * 20;
                        }
                    }
                }
            }
            RawFrame::new(h, w, c, px)
        })
        .collect()
}

pub fn generate<T: Scalar>(spec: &SynthSpec) -> Result<Clip<T>> {
    Clip::new(generate_raw(spec)?.iter().map(normalize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_wave_steps_by_one() {
        let xs: Vec<usize> = (0..16).map(|t| triangle(t, 16, 8)).collect();
        assert_eq!(xs, vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 7, 6, 5, 4, 3, 2, 1]);
    }

    #[test]
    fn static_frames_identical() {
        let c: Clip<f32> = generate(&SynthSpec::still(16, 16, 5, 1)).unwrap();
        assert!(c.frames.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn square_is_exactly_periodic() {
        let c: Clip<f32> = generate(&SynthSpec::oscillating_square(64, 64, 16, 48, 7)).unwrap();
        assert_eq!(c.frames[0], c.frames[16]);
        assert_eq!(c.frames[16], c.frames[32]);
        assert_ne!(c.frames[0], c.frames[1]);
    }

    #[test]
    fn deterministic() {
        let s = SynthSpec::oscillating_square(32, 32, 8, 10, 3);
        assert_eq!(generate_raw(&s).unwrap(), generate_raw(&s).unwrap());
        let mut other = s.clone();
        other.seed = 4;
        assert_ne!(generate_raw(&s).unwrap(), generate_raw(&other).unwrap());
    }

    #[test]
    fn background_reappears_identically() {
        let s = SynthSpec::oscillating_square(32, 32, 8, 8, 3);
        let frames = generate_raw(&s).unwrap();
        let bg = background(&s);
        for (t, f) in frames.iter().enumerate() {
            let (y0, x0, y1, x1) = s.object_box(t).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    if !(y0..y1).contains(&y) || !(x0..x1).contains(&x) {
                        assert_eq!(f.pixels[y * 32 + x], bg[y * 32 + x]);
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_object_is_rejected() {
        let mut s = SynthSpec::translating_bar(16, 16, 8, 1, 10, 0);
        assert!(s.validate().is_ok());
        s.amplitude = 4;
        s.object_size = 4;
        assert!(generate_raw(&s).is_err());
        let mut q = SynthSpec::oscillating_square(16, 16, 16, 4, 0);
        q.object_size = 12;
        assert!(q.validate().is_err());
    }
}
