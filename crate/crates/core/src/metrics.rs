//! Image-quality metrics on the 8-bit scale and per-horizon prediction reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Frame;
use crate::video_io::{denormalize, Clip};

/// Peak signal value.
pub const MAX_VALUE: f64 = 255.0;
/// PSNR reported for identical frames.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Quantizes a normalized frame to 8 bits and returns it as reals in `0..=255`.
pub fn to_8bit<T: Scalar>(frame: &Frame<T>) -> Frame<f64> {
    let raw = denormalize(frame);
    let (c, h, w) = frame.shape();
    let mut out = Frame::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                *out.at_mut(ch, y, x) = raw.pixels[(y * w + x) * c + ch] as f64;
            }
        }
    }
    out
}

pub fn mse(a: &Frame<f64>, b: &Frame<f64>) -> Result<f64> {
    a.check_same_shape(b, "mse")?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data.len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        10.0 * (MAX_VALUE * MAX_VALUE / mse).log10()
    }
}

pub fn psnr(a: &Frame<f64>, b: &Frame<f64>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| plane[y * w + x + i] * g[i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| rows[(y + i) * ow + x] * g[i]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let c1 = (SSIM_K1 * MAX_VALUE).powi(2);
    let c2 = (SSIM_K2 * MAX_VALUE).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let e_aa = filter_valid(&aa, h, w, &g);
    let e_bb = filter_valid(&bb, h, w, &g);
    let e_ab = filter_valid(&ab, h, w, &g);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| ssim_local(mu_a[i], mu_b[i], e_aa[i], e_bb[i], e_ab[i], c1, c2))
        .sum();
    total / n as f64
}

/// Local SSIM from first and second moments. Symmetric in (a, b) by construction.
#[inline]
pub(crate) fn ssim_local(mu_a: f64, mu_b: f64, e_aa: f64, e_bb: f64, e_ab: f64, c1: f64, c2: f64) -> f64 {
    let var_a = e_aa - mu_a * mu_a;
    let var_b = e_bb - mu_b * mu_b;
    let cov = e_ab - mu_a * mu_b;
    ((2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5, valid region), averaged over channels.
pub fn ssim(a: &Frame<f64>, b: &Frame<f64>) -> Result<f64> {
    a.check_same_shape(b, "ssim")?;
    let (c, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::arg(format!("ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let p = h * w;
    let s: f64 = (0..c)
        .map(|ch| ssim_plane(&a.data[ch * p..(ch + 1) * p], &b.data[ch * p..(ch + 1) * p], h, w))
        .sum();
    Ok(s / c as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Copy the last context frame.
    B0,
    /// Transformer alone (uniform modulation), no motion loss.
    B1,
    /// Dual network, no motion loss.
    M1,
    /// Dual network with motion loss.
    M2,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::B0, Variant::B1, Variant::M1, Variant::M2];
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "B0" => Ok(Variant::B0),
            "B1" => Ok(Variant::B1),
            "M1" => Ok(Variant::M1),
            "M2" => Ok(Variant::M2),
            _ => Err(Error::arg(format!("unknown variant `{s}` (expected B0, B1, M1 or M2)"))),
        }
    }
}

/// Per-frame metrics of a predicted sequence and their averages.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionReport {
    pub label: Variant,
    pub mse: Vec<f64>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl PredictionReport {
    pub fn horizon(&self) -> usize {
        self.mse.len()
    }

    pub fn avg_mse(&self) -> f64 {
        mean(&self.mse)
    }

    pub fn avg_psnr(&self) -> f64 {
        mean(&self.psnr)
    }

    pub fn avg_ssim(&self) -> f64 {
        mean(&self.ssim)
    }

    /// `horizon,mse,psnr,ssim` per frame, then a `mean` summary row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon,mse,psnr,ssim\n");
        for i in 0..self.horizon() {
            let _ = writeln!(s, "{},{},{},{}", i + 1, self.mse[i], self.psnr[i], self.ssim[i]);
        }
        let _ = writeln!(s, "mean,{},{},{}", self.avg_mse(), self.avg_psnr(), self.avg_ssim());
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{}: frames={} mse={:.3} psnr={:.3} dB ssim={:.4}",
            self.label,
            self.horizon(),
            self.avg_mse(),
            self.avg_psnr(),
            self.avg_ssim()
        )
    }
}

/// Scores a predicted sequence against ground truth frame by frame.
pub fn evaluate<T: Scalar>(pred: &Clip<T>, gt: &Clip<T>, label: Variant) -> Result<PredictionReport> {
    if pred.len() != gt.len() {
        return Err(Error::arg(format!(
            "{} predicted frames vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    let mut report = PredictionReport {
        label,
        mse: Vec::with_capacity(pred.len()),
        psnr: Vec::with_capacity(pred.len()),
        ssim: Vec::with_capacity(pred.len()),
    };
    for (p, g) in pred.frames.iter().zip(&gt.frames) {
        let (p, g) = (to_8bit(p), to_8bit(g));
        let m = mse(&p, &g)?;
        report.mse.push(m);
        report.psnr.push(psnr_from_mse(m));
        report.ssim.push(ssim(&p, &g)?);
    }
    Ok(report)
}

/// Copy-last baseline: every future frame is predicted as `last`.
pub fn baseline_b0<T: Scalar>(last: &Frame<T>, gt_future: &Clip<T>) -> Result<PredictionReport> {
    if gt_future.is_empty() {
        return Err(Error::arg("B0 needs at least one future frame"));
    }
    for g in &gt_future.frames {
        last.check_same_shape(g, "baseline_b0")?;
    }
    let pred = Clip {
        frames: vec![last.clone(); gt_future.len()],
    };
    evaluate(&pred, gt_future, Variant::B0)
}

/// Average PSNR / SSIM of one clip under one variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub psnr: f64,
    pub ssim: Option<f64>,
}

impl From<&PredictionReport> for Summary {
    fn from(r: &PredictionReport) -> Self {
        Summary {
            psnr: r.avg_psnr(),
            ssim: (r.label != Variant::B0).then(|| r.avg_ssim()),
        }
    }
}

fn trim(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

impl Summary {
    pub fn cell(&self) -> String {
        match self.ssim {
            Some(s) => format!("{}/{}", trim(self.psnr, 2), trim(s, 3)),
            None => trim(self.psnr, 2),
        }
    }
}

/// Clip × variant table of averaged scores (B0 shows PSNR only).
#[derive(Clone, Debug, Default)]
pub struct ResultsTable {
    pub rows: Vec<(String, Vec<(Variant, Summary)>)>,
}

impl ResultsTable {
    pub fn add(&mut self, clip: &str, variant: Variant, summary: Summary) {
        match self.rows.iter_mut().find(|(c, _)| c == clip) {
            Some((_, cells)) => cells.push((variant, summary)),
            None => self.rows.push((clip.to_string(), vec![(variant, summary)])),
        }
    }

    /// Aligned plain-text rendering with one column per variant.
    pub fn render(&self) -> String {
        let header: Vec<String> = std::iter::once(String::new())
            .chain(Variant::ALL.iter().map(|v| v.to_string()))
            .collect();
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(clip, cells)| {
                std::iter::once(clip.clone())
                    .chain(Variant::ALL.iter().map(|v| {
                        cells
                            .iter()
                            .find(|(cv, _)| cv == v)
                            .map(|(_, s)| s.cell())
                            .unwrap_or_else(|| "-".into())
                    }))
                    .collect()
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| std::iter::once(&header).chain(&body).map(|r| r[i].len()).max().unwrap_or(0))
            .collect();
        let line = |r: &Vec<String>| {
            r.iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&header);
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
        out.push('\n');
        for r in &body {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}
