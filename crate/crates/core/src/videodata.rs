//! Paired low/normal-light clips, decomposition outputs, and the on-disk
//! clip layout (`<clip_id>/low/%05d.png`, `<clip_id>/normal/%05d.png`).

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const LOW_DIR: &str = "low";
pub const NORMAL_DIR: &str = "normal";

/// One RGB frame with values in `[0, 1]`, spatial dims multiples of 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pixels: Tensor<f32>,
    index: usize,
}

impl Frame {
    pub fn new(pixels: Tensor<f32>, index: usize) -> Result<Self> {
        if pixels.channels() != 3 {
            return Err(Error::InvalidFrame(format!(
                "expected 3 channels, got {}",
                pixels.channels()
            )));
        }
        check_dims(pixels.height(), pixels.width())?;
        if let Some(bad) = pixels.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidFrame(format!("non-finite pixel ({bad})")));
        }
        if pixels.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidFrame("pixel outside [0, 1]".into()));
        }
        Ok(Self { pixels, index })
    }

    /// Clamps an unbounded network output into a valid frame.
    pub fn from_clamped(pixels: &Tensor<f32>, index: usize) -> Result<Self> {
        if !pixels.all_finite() {
            return Err(Error::InvalidFrame("non-finite pixel".into()));
        }
        Self::new(pixels.map(|v| v.clamp(0.0, 1.0)), index)
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.pixels
    }
    pub fn index(&self) -> usize {
        self.index
    }
    pub fn height(&self) -> usize {
        self.pixels.height()
    }
    pub fn width(&self) -> usize {
        self.pixels.width()
    }
    pub fn with_index(mut self, index: usize) -> Self {
        self.index = index;
        self
    }
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::InvalidFrame(format!(
            "dimensions {w}x{h} must be positive multiples of 4"
        )));
    }
    Ok(())
}

/// A clip of low-light frames with optional pixel-aligned normal-light targets.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    low: Vec<Frame>,
    normal: Option<Vec<Frame>>,
}

impl VideoClip {
    pub fn new(
        clip_id: impl Into<String>,
        low: Vec<Frame>,
        normal: Option<Vec<Frame>>,
    ) -> Result<Self> {
        let clip_id = clip_id.into();
        let dims = low.first().map(|f| (f.height(), f.width()));
        for (t, f) in low.iter().enumerate() {
            if f.index != t {
                return Err(Error::InvalidClip(format!(
                    "{clip_id}: low frame {t} carries index {}",
                    f.index
                )));
            }
            if Some((f.height(), f.width())) != dims {
                return Err(Error::InvalidClip(format!(
                    "{clip_id}: low frame {t} has mismatched dimensions"
                )));
            }
        }
        if let Some(normal) = &normal {
            if normal.len() != low.len() {
                return Err(Error::InvalidClip(format!(
                    "{clip_id}: unequal frame counts (low {}, normal {})",
                    low.len(),
                    normal.len()
                )));
            }
            for (t, (n, l)) in normal.iter().zip(&low).enumerate() {
                if n.index != t || (n.height(), n.width()) != (l.height(), l.width()) {
                    return Err(Error::InvalidClip(format!(
                        "{clip_id}: normal frame {t} not aligned with low frame"
                    )));
                }
            }
        }
        Ok(Self {
            clip_id,
            low,
            normal,
        })
    }

    /// Clip holding only normal-light frames (the low slot mirrors them until degraded).
    pub fn from_normal(clip_id: impl Into<String>, normal: Vec<Frame>) -> Result<Self> {
        Self::new(clip_id, normal.clone(), Some(normal))
    }

    pub fn frame_count(&self) -> usize {
        self.low.len()
    }
    pub fn low(&self) -> &[Frame] {
        &self.low
    }
    pub fn normal(&self) -> Option<&[Frame]> {
        self.normal.as_deref()
    }
    pub fn is_paired(&self) -> bool {
        self.normal.is_some()
    }
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.low.first().map(|f| (f.height(), f.width()))
    }
    pub fn require_normal(&self) -> Result<&[Frame]> {
        self.normal().ok_or_else(|| {
            Error::InvalidClip(format!("{}: clip has no normal-light frames", self.clip_id))
        })
    }
}

/// Per-frame decomposition `recomposed = L ⊗ R + B`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionTriple<T: Real = f32> {
    pub l: Tensor<T>,
    pub r: Tensor<T>,
    pub b: Tensor<T>,
    pub recomposed: Tensor<T>,
}

impl<T: Real> DecompositionTriple<T> {
    pub fn new(l: Tensor<T>, r: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        let recomposed = recompose(&l, &r, &b)?;
        Ok(Self {
            l,
            r,
            b,
            recomposed,
        })
    }
}

/// `L ⊗ R + B`, unclamped.
pub fn recompose<T: Real>(l: &Tensor<T>, r: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    l.ensure_same_shape(r, "recompose L/R")?;
    l.ensure_same_shape(b, "recompose L/B")?;
    let data = l
        .data()
        .iter()
        .zip(r.data())
        .zip(b.data())
        .map(|((&l, &r), &b)| l * r + b)
        .collect();
    Tensor::from_vec(l.channels(), l.height(), l.width(), data)
}

fn numbered_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let number = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| Error::io(&path, "frame file name is not a frame number"))?;
        files.push((number, path));
    }
    files.sort();
    Ok(files.into_iter().map(|(_, p)| p).collect())
}

pub fn read_frame(path: &Path, index: usize) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::io(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    check_dims(h, w).map_err(|e| Error::io(path, e))?;
    let pixels = Tensor::from_fn(3, h, w, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    });
    Frame::new(pixels, index).map_err(|e| Error::io(path, e))
}

/// Writes an unbounded array as an 8-bit PNG, clamping to `[0, 1]`.
pub fn write_image(path: &Path, pixels: &Tensor<f32>) -> Result<()> {
    if pixels.channels() != 3 {
        return Err(Error::InvalidFrame(format!(
            "cannot write {}-channel image",
            pixels.channels()
        )));
    }
    if !pixels.all_finite() {
        return Err(Error::InvalidFrame(format!(
            "{}: non-finite pixel",
            path.display()
        )));
    }
    let (h, w) = (pixels.height(), pixels.width());
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let q = |c| (pixels.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, Rgb([q(0), q(1), q(2)]));
        }
    }
    img.save(path).map_err(|e| Error::io(path, e))
}

/// Reads every numbered PNG in `dir`, in frame order.
pub fn read_frames(dir: &Path) -> Result<Vec<Frame>> {
    numbered_files(dir)?
        .iter()
        .enumerate()
        .map(|(t, p)| read_frame(p, t))
        .collect()
}

/// Loads `<path>/low` (and `<path>/normal` when `paired`).
pub fn load_clip(path: &Path, paired: bool) -> Result<VideoClip> {
    if !path.is_dir() {
        return Err(Error::io(path, "clip directory does not exist"));
    }
    let clip_id = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("clip")
        .to_string();
    let low_dir = path.join(LOW_DIR);
    if !low_dir.is_dir() {
        return Err(Error::io(&low_dir, "missing low/ directory"));
    }
    let low = read_frames(&low_dir)?;
    if low.is_empty() {
        return Err(Error::io(&low_dir, "no frames"));
    }
    let normal = if paired {
        let normal_dir = path.join(NORMAL_DIR);
        if !normal_dir.is_dir() {
            return Err(Error::io(&normal_dir, "missing normal/ directory"));
        }
        let normal = read_frames(&normal_dir)?;
        if normal.len() != low.len() {
            return Err(Error::io(
                &normal_dir,
                format!(
                    "unequal frame counts (low {}, normal {})",
                    low.len(),
                    normal.len()
                ),
            ));
        }
        for (t, (n, l)) in normal.iter().zip(&low).enumerate() {
            if (n.height(), n.width()) != (l.height(), l.width()) {
                let file = numbered_files(&normal_dir)?.swap_remove(t);
                return Err(Error::io(
                    file,
                    "dimensions do not match the low-light frame",
                ));
            }
        }
        Some(normal)
    } else {
        None
    };
    VideoClip::new(clip_id, low, normal)
}

pub fn frame_file_name(t: usize) -> String {
    format!("{t:05}.png")
}

pub fn save_frames(dir: &Path, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, f) in frames.iter().enumerate() {
        write_image(&dir.join(frame_file_name(t)), f.pixels())?;
    }
    Ok(())
}

/// Writes the clip in the layout [`load_clip`] reads.
pub fn save_clip(clip: &VideoClip, path: &Path) -> Result<()> {
    if clip.frame_count() == 0 {
        return Err(Error::InvalidClip("no frames".into()));
    }
    let all = clip.low().iter().chain(clip.normal().into_iter().flatten());
    if all.flat_map(|f| f.pixels().data()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidClip("non-finite pixel".into()));
    }
    save_frames(&path.join(LOW_DIR), clip.low())?;
    if let Some(normal) = clip.normal() {
        save_frames(&path.join(NORMAL_DIR), normal)?;
    }
    Ok(())
}

/// Loads every clip directory under `root`, sorted by name.
pub fn load_dataset(root: &Path, paired: bool) -> Result<Vec<VideoClip>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(LOW_DIR).is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::io(root, "dataset contains no clip directories"));
    }
    dirs.iter().map(|d| load_clip(d, paired)).collect()
}
