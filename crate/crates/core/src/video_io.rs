//! Frame sequences on disk: indexed PNG patterns, normalization to
//! `[-1, 1]`, training-window sampling and augmentation.

use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, RgbImage};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Frame;

/// An 8-bit image as decoded from disk, `height × width × channels` interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawFrame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawFrame {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(Error::Format(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Format("pixel buffer size does not match dimensions".into()));
        }
        Ok(RawFrame {
            height,
            width,
            channels,
            pixels,
        })
    }
}

/// Ordered frames sharing one shape, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip<T> {
    pub frames: Vec<Frame<T>>,
}

impl<T: Scalar> Clip<T> {
    pub fn new(frames: Vec<Frame<T>>) -> Result<Self> {
        if let Some(first) = frames.first() {
            for f in &frames {
                if !f.same_shape(first) {
                    return Err(Error::Format(format!(
                        "clip frames disagree in shape: {:?} vs {:?}",
                        f.shape(),
                        first.shape()
                    )));
                }
            }
        }
        Ok(Clip { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.frames.first().map(Frame::shape)
    }

    /// Frames `[start, end)` as a new clip.
    pub fn span(&self, start: usize, end: usize) -> Result<Clip<T>> {
        if start > end || end > self.len() {
            return Err(Error::arg(format!("span {start}..{end} outside clip of {}", self.len())));
        }
        Ok(Clip {
            frames: self.frames[start..end].to_vec(),
        })
    }
}

/// A contiguous training window: `context` frames then `K + 1` targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Window<T> {
    pub conditioning: Vec<Frame<T>>,
    pub targets: Vec<Frame<T>>,
    pub start_index: usize,
}

/// `2·(v / 255) − 1`.
pub fn normalize<T: Scalar>(raw: &RawFrame) -> Frame<T> {
    let (h, w, c) = (raw.height, raw.width, raw.channels);
    let mut out = Frame::zeros(c, h, w);
    let scale = T::lit(2.0 / 255.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = T::from_u8(raw.pixels[(y * w + x) * c + ch]).unwrap();
                *out.at_mut(ch, y, x) = v * scale - T::one();
            }
        }
    }
    out
}

/// Maps one real value to 8 bits: clamp then round half up.
pub fn quantize<T: Scalar>(v: T) -> u8 {
    let x = (v.as_f64() + 1.0) * 127.5;
    let x = if x.is_nan() { 0.0 } else { x };
    (x + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Inverse of [`normalize`] with clamping and round-half-up quantization.
pub fn denormalize<T: Scalar>(frame: &Frame<T>) -> RawFrame {
    let (c, h, w) = frame.shape();
    let mut pixels = vec![0u8; h * w * c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                pixels[(y * w + x) * c + ch] = quantize(frame.at(ch, y, x));
            }
        }
    }
    RawFrame {
        height: h,
        width: w,
        channels: c,
        pixels,
    }
}

/// A `printf`-style index pattern such as `frames/f_%03d.png`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FramePattern {
    dir: PathBuf,
    prefix: String,
    suffix: String,
    width: usize,
}

impl FramePattern {
    pub fn parse(pattern: &str) -> Result<Self> {
        let path = Path::new(pattern);
        let file = path
            .file_name()
            .and_then(|f| f.to_str())
            .ok_or_else(|| Error::arg(format!("pattern `{pattern}` has no file name")))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let start = file
            .find('%')
            .ok_or_else(|| Error::arg(format!("pattern `{pattern}` has no %d field")))?;
        let rest = &file[start + 1..];
        let end = rest
            .find('d')
            .ok_or_else(|| Error::arg(format!("pattern `{pattern}` has no %d field")))?;
        let spec = &rest[..end];
        let width = if spec.is_empty() {
            0
        } else {
            spec.trim_start_matches('0')
                .parse::<usize>()
                .map_err(|_| Error::arg(format!("bad field width in `{pattern}`")))?
        };
        Ok(FramePattern {
            dir,
            prefix: file[..start].to_string(),
            suffix: rest[end + 1..].to_string(),
            width,
        })
    }

    pub fn path(&self, index: usize) -> PathBuf {
        self.dir
            .join(format!("{}{:0width$}{}", self.prefix, index, self.suffix, width = self.width))
    }

    /// Indices of all existing files matching the pattern, ascending.
    pub fn scan(&self) -> Result<Vec<usize>> {
        let dir = if self.dir.as_os_str().is_empty() {
            Path::new(".")
        } else {
            self.dir.as_path()
        };
        let entries = std::fs::read_dir(dir).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(dir.display().to_string())
            } else {
                Error::io(dir, e)
            }
        })?;
        let mut found = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            let Some(mid) = name
                .strip_prefix(self.prefix.as_str())
                .and_then(|r| r.strip_suffix(self.suffix.as_str()))
            else {
                continue;
            };
            if !mid.is_empty() && mid.bytes().all(|b| b.is_ascii_digit()) && mid.len() >= self.width {
                if let Ok(i) = mid.parse() {
                    found.push(i);
                }
            }
        }
        found.sort_unstable();
        Ok(found)
    }
}

pub fn read_raw(path: &Path) -> Result<RawFrame> {
    if !path.exists() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = match img {
        DynamicImage::ImageLuma8(g) => RawFrame::new(h, w, 1, g.into_raw())?,
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            RawFrame::new(h, w, 1, img.to_luma8().into_raw())?
        }
        other => RawFrame::new(h, w, 3, other.to_rgb8().into_raw())?,
    };
    Ok(raw)
}

pub fn write_raw(raw: &RawFrame, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (w, h) = (raw.width as u32, raw.height as u32);
    let res = match raw.channels {
        1 => GrayImage::from_raw(w, h, raw.pixels.clone()).map(|i| i.save(path)),
        _ => RgbImage::from_raw(w, h, raw.pixels.clone()).map(|i| i.save(path)),
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(source)) => Err(Error::Image {
            path: path.to_path_buf(),
            source,
        }),
        None => Err(Error::Format("pixel buffer size does not match dimensions".into())),
    }
}

pub fn write_frame<T: Scalar>(frame: &Frame<T>, path: &Path) -> Result<()> {
    write_raw(&denormalize(frame), path)
}

pub fn read_frame<T: Scalar>(path: &Path) -> Result<Frame<T>> {
    Ok(normalize(&read_raw(path)?))
}

/// Loads frames matching `pattern`, either the inclusive index range or
/// every match found on disk, in index order.
pub fn load_clip<T: Scalar>(pattern: &str, frame_range: Option<(usize, usize)>) -> Result<Clip<T>> {
    let pat = FramePattern::parse(pattern)?;
    let indices: Vec<usize> = match frame_range {
        Some((a, b)) if a <= b => (a..=b).collect(),
        Some((a, b)) => return Err(Error::arg(format!("empty frame range {a}..={b}"))),
        None => pat.scan()?,
    };
    if indices.is_empty() {
        return Err(Error::NotFound(format!("no files match `{pattern}`")));
    }
    let mut frames = Vec::with_capacity(indices.len());
    let mut first: Option<(usize, usize, usize)> = None;
    for i in indices {
        let path = pat.path(i);
        let raw = read_raw(&path)?;
        let shape = (raw.height, raw.width, raw.channels);
        match first {
            None => first = Some(shape),
            Some(s) if s != shape => {
                return Err(Error::Format(format!(
                    "{} is {}x{}x{}, earlier frames are {}x{}x{}",
                    path.display(),
                    shape.0,
                    shape.1,
                    shape.2,
                    s.0,
                    s.1,
                    s.2
                )))
            }
            _ => {}
        }
        frames.push(normalize(&raw));
    }
    Clip::new(frames)
}

/// Writes frames as `pattern` with indices `first_index..`.
pub fn save_clip<T: Scalar>(clip: &Clip<T>, pattern: &str, first_index: usize) -> Result<Vec<PathBuf>> {
    let pat = FramePattern::parse(pattern)?;
    clip.frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = pat.path(first_index + i);
            write_frame(f, &p).map(|_| p)
        })
        .collect()
}

/// Picks a uniformly random contiguous window of `context + k + 1` frames.
pub fn sample_window<T: Scalar, R: Rng + ?Sized>(clip: &Clip<T>, context: usize, k: usize, rng: &mut R) -> Result<Window<T>> {
    let need = context + k + 1;
    if context == 0 || clip.len() < need {
        return Err(Error::arg(format!(
            "clip of {} frames cannot hold a window of {context} + {} frames",
            clip.len(),
            k + 1
        )));
    }
    let start = rng.random_range(0..=clip.len() - need);
    window_at(clip, context, k, start)
}

pub fn window_at<T: Scalar>(clip: &Clip<T>, context: usize, k: usize, start: usize) -> Result<Window<T>> {
    let need = context + k + 1;
    if start + need > clip.len() {
        return Err(Error::arg(format!("window at {start} runs past the clip end")));
    }
    Ok(Window {
        conditioning: clip.frames[start..start + context].to_vec(),
        targets: clip.frames[start + context..start + need].to_vec(),
        start_index: start,
    })
}

/// Mirrors every frame of the window when `apply` is set.
pub fn flip_lr<T: Scalar>(window: &Window<T>, apply: bool) -> Window<T> {
    if !apply {
        return window.clone();
    }
    Window {
        conditioning: window.conditioning.iter().map(Frame::flipped_lr).collect(),
        targets: window.targets.iter().map(Frame::flipped_lr).collect(),
        start_index: window.start_index,
    }
}

/// Per-pixel squared error summed over channels, rescaled so the largest
/// error is 255, as an 8-bit grayscale image.
pub fn error_map<T: Scalar>(pred: &Frame<T>, gt: &Frame<T>) -> Result<RawFrame> {
    pred.check_same_shape(gt, "error map")?;
    let (c, h, w) = pred.shape();
    let mut err = vec![0.0f64; h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let d = pred.at(ch, y, x).as_f64() - gt.at(ch, y, x).as_f64();
                err[y * w + x] += d * d;
            }
        }
    }
    let max = err.iter().copied().fold(0.0, f64::max);
    let pixels = err
        .iter()
        .map(|&e| if max > 0.0 { (e / max * 255.0 + 0.5).floor().min(255.0) as u8 } else { 0 })
        .collect();
    RawFrame::new(h, w, 1, pixels)
}

pub fn write_error_map<T: Scalar>(pred: &Frame<T>, gt: &Frame<T>, path: &Path) -> Result<()> {
    write_raw(&error_map(pred, gt)?, path)
}

/// Image buffer helper used by tests and tools.
pub fn gray_image(raw: &RawFrame) -> Option<GrayImage> {
    (raw.channels == 1).then(|| {
        ImageBuffer::from_raw(raw.width as u32, raw.height as u32, raw.pixels.clone()).expect("size checked")
    })
}
