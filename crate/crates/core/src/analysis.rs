//! Interpretability outputs: alpha curves, foreground/background renders and
//! temporal averages.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::alpha::AlphaMatrix;
use crate::error::{Error, Result};
use crate::model::DualNet;
use crate::predictor::predict;
use crate::scalar::Scalar;
use crate::tensor::Frame;
use crate::trainer::context_at;
use crate::transformer::{self, DecomposeMode};
use crate::video_io::{write_frame, Clip};

/// Modulation weights over time; entry `i` belongs to frame `offset + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaTrace<T> {
    pub offset: usize,
    pub steps: Vec<AlphaMatrix<T>>,
}

impl<T: Scalar> AlphaTrace<T> {
    pub fn new(offset: usize, steps: Vec<AlphaMatrix<T>>) -> Result<Self> {
        if let Some(first) = steps.first() {
            if steps.iter().any(|a| a.rows() != first.rows() || a.channels() != first.channels()) {
                return Err(Error::arg("alpha trace mixes matrix shapes"));
            }
        }
        Ok(AlphaTrace { offset, steps })
    }

    /// Scaled weight of one (row, channel) over time.
    pub fn curve(&self, row: usize, channel: usize) -> Vec<T> {
        self.steps.iter().map(|a| a.scaled(row, channel)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,row,channel,alpha_scaled\n");
        for (i, a) in self.steps.iter().enumerate() {
            for r in 0..a.rows() {
                for n in 0..a.channels() {
                    let _ = writeln!(s, "{},{r},{n},{}", self.offset + i, a.scaled(r, n).as_f64());
                }
            }
        }
        s
    }
}

pub fn export_alpha_curves<T: Scalar>(trace: &AlphaTrace<T>, path: &Path) -> Result<()> {
    if trace.steps.is_empty() {
        return Err(Error::arg("cannot export an empty alpha trace"));
    }
    std::fs::write(path, trace.to_csv()).map_err(|e| Error::io(path, e))
}

/// Parses the CSV written by [`export_alpha_curves`].
pub fn parse_alpha_curves<T: Scalar>(text: &str) -> Result<AlphaTrace<T>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("frame,row,channel,alpha_scaled") {
        return Err(Error::Format("alpha CSV header missing".into()));
    }
    let mut entries: Vec<(usize, usize, usize, f64)> = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Format(format!("alpha CSV line {}: `{line}`", i + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        entries.push((
            f[0].trim().parse().map_err(|_| bad())?,
            f[1].trim().parse().map_err(|_| bad())?,
            f[2].trim().parse().map_err(|_| bad())?,
            f[3].trim().parse().map_err(|_| bad())?,
        ));
    }
    if entries.is_empty() {
        return Err(Error::Format("alpha CSV has no data".into()));
    }
    let offset = entries.iter().map(|e| e.0).min().unwrap();
    let frames = entries.iter().map(|e| e.0).max().unwrap() - offset + 1;
    let rows = entries.iter().map(|e| e.1).max().unwrap() + 1;
    let channels = entries.iter().map(|e| e.2).max().unwrap() + 1;
    if entries.len() != frames * rows * channels {
        return Err(Error::Format("alpha CSV is not a complete frame × row × channel grid".into()));
    }
    let mut grid = vec![vec![0.0; rows * channels]; frames];
    for (f, r, n, v) in entries {
        grid[f - offset][r * channels + n] = v / channels as f64;
    }
    let steps = grid
        .into_iter()
        .map(|v| AlphaMatrix::from_unscaled(rows, channels, v.into_iter().map(T::lit).collect()))
        .collect::<Result<Vec<_>>>()?;
    AlphaTrace::new(offset, steps)
}

pub fn import_alpha_curves<T: Scalar>(path: &Path) -> Result<AlphaTrace<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_alpha_curves(&text)
}

/// One predicted step rendered three ways.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition<T> {
    pub full: Frame<T>,
    pub foreground: Frame<T>,
    pub background: Frame<T>,
    /// `max |bg + fg + bias − z| / max |z|` over the output pre-activation `z`.
    pub additivity_error: f64,
}

/// Rolls the model out for `horizon` steps and decomposes every step's
/// output block into full, foreground-only and background-only renders.
pub fn decompose_rollout<T: Scalar>(
    model: &DualNet<T>,
    conditioning: &[Frame<T>],
    horizon: usize,
) -> Result<Vec<Decomposition<T>>> {
    let preds = predict(model, conditioning, horizon)?;
    let mut out = Vec::with_capacity(horizon);
    for j in 0..horizon {
        let ctx: Vec<Frame<T>> = context_at(conditioning, &preds.frames, j).into_iter().cloned().collect();
        let x = model.stack_window(&ctx)?;
        let alphas = model.select_eval(&x)?;
        let cache = transformer::forward_cached(&x, Some(&alphas), &model.transformer, &model.transformer_config)?;
        let split = transformer::output_split(&cache, &model.transformer, &model.transformer_config);
        let plane = split.full.plane();
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for (i, &z) in split.full.data.iter().enumerate() {
            let b = split.bias[(i / plane) % split.full.channels];
            let sum = split.background.data[i] + split.foreground.data[i] + b;
            diff = diff.max((sum - z).abs().as_f64());
            norm = norm.max(z.abs().as_f64());
        }
        let err = diff / norm.max(f64::MIN_POSITIVE);
        log::debug!("step {j}: decomposition additivity error {err:.3e}");
        out.push(Decomposition {
            full: model.decompose(&ctx, DecomposeMode::Full)?,
            foreground: model.decompose(&ctx, DecomposeMode::Foreground)?,
            background: model.decompose(&ctx, DecomposeMode::Background)?,
            additivity_error: err,
        });
    }
    Ok(out)
}

/// Writes `step_XXX_{full,foreground,background}.png` into `dir`.
pub fn render_decomposition<T: Scalar>(
    model: &DualNet<T>,
    conditioning: &[Frame<T>],
    horizon: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(3 * horizon);
    for (j, d) in decompose_rollout(model, conditioning, horizon)?.iter().enumerate() {
        for (name, f) in [("full", &d.full), ("foreground", &d.foreground), ("background", &d.background)] {
            let p = dir.join(format!("step_{j:03}_{name}.png"));
            write_frame(f, &p)?;
            paths.push(p);
        }
    }
    Ok(paths)
}

/// Per-pixel mean over time.
pub fn temporal_average<T: Scalar>(clip: &Clip<T>) -> Result<Frame<T>> {
    let first = clip.frames.first().ok_or_else(|| Error::arg("temporal average of an empty clip"))?;
    let (c, h, w) = first.shape();
    let mut acc = vec![0.0f64; c * h * w];
    for f in &clip.frames {
        acc.iter_mut().zip(&f.data).for_each(|(a, &v)| *a += v.as_f64());
    }
    let n = clip.len() as f64;
    Frame::from_vec(c, h, w, acc.into_iter().map(|a| T::lit(a / n)).collect())
}
