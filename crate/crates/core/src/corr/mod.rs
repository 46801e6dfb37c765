//! Sparse correspondence sets, dense bidirectional correspondence maps, and
//! differentiable bilinear sampling.
//!
//! Dense maps hold *normalized* coordinates in `[-1, 1]` (`-1` is pixel 0,
//! `+1` is pixel `W-1`); sparse sets hold pixel coordinates.

mod npy;
mod provider;

pub use npy::{read_npy_f32, write_npy_f32};
pub(crate) use provider::stable_hash;
pub use provider::{
    perturb_maps, BlockMatchingProvider, CorrespondenceProvider, ImportedProvider, OracleProvider,
    PerturbedProvider,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    /// Confidence weight in `[0, 1]`.
    pub u: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub t1: usize,
    pub t2: usize,
    pub width: usize,
    pub height: usize,
    pub entries: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn new(
        t1: usize,
        t2: usize,
        width: usize,
        height: usize,
        entries: Vec<Correspondence>,
    ) -> Result<Self> {
        let set = Self {
            t1,
            t2,
            width,
            height,
            entries,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(t1: usize, t2: usize, width: usize, height: usize) -> Self {
        Self {
            t1,
            t2,
            width,
            height,
            entries: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let (wmax, hmax) = ((self.width - 1) as f64, (self.height - 1) as f64);
        for e in &self.entries {
            for (x, y) in [(e.x1, e.y1), (e.x2, e.y2)] {
                if !(0.0..=wmax).contains(&x) || !(0.0..=hmax).contains(&y) {
                    return Err(Error::OutOfBounds {
                        x,
                        y,
                        width: self.width,
                        height: self.height,
                    });
                }
            }
            if !(0.0..=1.0).contains(&e.u) {
                return Err(Error::Provider(format!(
                    "uncertainty weight {} outside [0, 1]",
                    e.u
                )));
            }
        }
        Ok(())
    }
}

/// Map direction: `Fwd` maps pixels of `t1` into `t2`, `Bwd` the reverse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Fwd,
    Bwd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceMaps {
    /// `2×H×W`: normalized `(x, y)` in `t2` for each pixel of `t1`.
    pub fwd: Tensor<f32>,
    /// `2×H×W`: normalized `(x, y)` in `t1` for each pixel of `t2`.
    pub bwd: Tensor<f32>,
    pub valid_fwd: Vec<bool>,
    pub valid_bwd: Vec<bool>,
    pub conf_fwd: Option<Vec<f32>>,
    pub conf_bwd: Option<Vec<f32>>,
}

impl CorrespondenceMaps {
    pub fn identity(height: usize, width: usize) -> Self {
        let map = Tensor::from_fn(2, height, width, |c, y, x| {
            if c == 0 {
                pixel_to_norm(x as f64, width) as f32
            } else {
                pixel_to_norm(y as f64, height) as f32
            }
        });
        let n = height * width;
        Self {
            fwd: map.clone(),
            bwd: map,
            valid_fwd: vec![true; n],
            valid_bwd: vec![true; n],
            conf_fwd: None,
            conf_bwd: None,
        }
    }

    pub fn height(&self) -> usize {
        self.fwd.height()
    }
    pub fn width(&self) -> usize {
        self.fwd.width()
    }

    pub fn map(&self, dir: Direction) -> &Tensor<f32> {
        match dir {
            Direction::Fwd => &self.fwd,
            Direction::Bwd => &self.bwd,
        }
    }
    pub fn valid(&self, dir: Direction) -> &[bool] {
        match dir {
            Direction::Fwd => &self.valid_fwd,
            Direction::Bwd => &self.valid_bwd,
        }
    }
    pub fn confidence(&self, dir: Direction) -> Option<&[f32]> {
        match dir {
            Direction::Fwd => self.conf_fwd.as_deref(),
            Direction::Bwd => self.conf_bwd.as_deref(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for dir in [Direction::Fwd, Direction::Bwd] {
            let map = self.map(dir);
            if map.shape() != (2, h, w) || self.valid(dir).len() != h * w {
                return Err(Error::Shape(format!(
                    "{dir:?} correspondence map is not 2x{h}x{w}"
                )));
            }
            if let Some(conf) = self.confidence(dir) {
                if conf.len() != h * w || conf.iter().any(|c| !(0.0..=1.0).contains(c)) {
                    return Err(Error::Provider(format!(
                        "{dir:?} confidence channel malformed"
                    )));
                }
            }
            for (i, _) in self.valid(dir).iter().enumerate().filter(|(_, &v)| v) {
                let (nx, ny) = (map.data()[i], map.data()[h * w + i]);
                if !(-1.0..=1.0).contains(&nx) || !(-1.0..=1.0).contains(&ny) {
                    return Err(Error::Provider(format!(
                        "{dir:?} map entry {i} outside [-1, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Target pixel coordinate of pixel `(x, y)` in direction `dir`.
    pub fn target_pixel(&self, dir: Direction, x: usize, y: usize) -> (f64, f64) {
        let map = self.map(dir);
        (
            norm_to_pixel(map.at(0, y, x) as f64, self.width()),
            norm_to_pixel(map.at(1, y, x) as f64, self.height()),
        )
    }
}

#[inline]
pub fn norm_to_pixel(n: f64, extent: usize) -> f64 {
    (n + 1.0) * 0.5 * (extent - 1) as f64
}

#[inline]
pub fn pixel_to_norm(p: f64, extent: usize) -> f64 {
    2.0 * p / (extent - 1) as f64 - 1.0
}

/// A pixel picked from one direction of a dense map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSample {
    pub dir: Direction,
    pub x: usize,
    pub y: usize,
    pub u: f64,
}

fn quantile_threshold(mut values: Vec<f64>, q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("confidences are finite"));
    let idx = ((q.clamp(0.0, 1.0) * (values.len() - 1) as f64).floor()) as usize;
    values[idx]
}

/// Samples up to `count` valid pixels of `dir`, then keeps entries whose
/// confidence is at or above the `keep_quantile` quantile. Zero-confidence
/// entries carry no weight and are always dropped.
pub fn sample_map_pixels<R: Rng>(
    maps: &CorrespondenceMaps,
    dirs: &[Direction],
    count: usize,
    keep_quantile: f64,
    rng: &mut R,
) -> Vec<MapSample> {
    let n = maps.height() * maps.width();
    let per_dir = count.div_ceil(dirs.len().max(1));
    let mut out = Vec::new();
    for &dir in dirs {
        let valid: Vec<usize> = (0..n).filter(|&i| maps.valid(dir)[i]).collect();
        let take = per_dir
            .min(valid.len())
            .min(count.saturating_sub(out.len()));
        if take == 0 {
            continue;
        }
        let picked = rand::seq::index::sample(rng, valid.len(), take);
        let mut idx: Vec<usize> = picked.into_iter().map(|j| valid[j]).collect();
        idx.sort_unstable();
        let conf = maps.confidence(dir);
        out.extend(idx.into_iter().map(|i| MapSample {
            dir,
            x: i % maps.width(),
            y: i / maps.width(),
            u: conf.map_or(1.0, |c| c[i] as f64),
        }));
    }
    if out.is_empty() {
        return out;
    }
    let threshold = quantile_threshold(out.iter().map(|s| s.u).collect(), keep_quantile);
    out.retain(|s| s.u >= threshold && s.u > 0.0);
    out
}

/// Reads the correspondence for each sample out of `maps`.
pub fn set_from_samples(
    maps: &CorrespondenceMaps,
    samples: &[MapSample],
    t1: usize,
    t2: usize,
) -> Result<CorrespondenceSet> {
    let entries = samples
        .iter()
        .map(|s| {
            let (tx, ty) = maps.target_pixel(s.dir, s.x, s.y);
            let (px, py) = (s.x as f64, s.y as f64);
            match s.dir {
                Direction::Fwd => Correspondence {
                    x1: px,
                    y1: py,
                    x2: tx,
                    y2: ty,
                    u: s.u,
                },
                Direction::Bwd => Correspondence {
                    x1: tx,
                    y1: ty,
                    x2: px,
                    y2: py,
                    u: s.u,
                },
            }
        })
        .collect();
    CorrespondenceSet::new(t1, t2, maps.width(), maps.height(), entries)
}

/// Sparse set from the forward map, filtered by confidence quantile.
pub fn maps_to_set<R: Rng>(
    maps: &CorrespondenceMaps,
    count: usize,
    keep_quantile: f64,
    t1: usize,
    t2: usize,
    rng: &mut R,
) -> Result<CorrespondenceSet> {
    maps.validate()?;
    let samples = sample_map_pixels(maps, &[Direction::Fwd], count, keep_quantile, rng);
    set_from_samples(maps, &samples, t1, t2)
}

/// Bilinear stencil at a continuous in-bounds coordinate.
#[derive(Clone, Copy, Debug)]
pub struct Bilinear<T> {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: T,
    fy: T,
}

impl<T: Real> Bilinear<T> {
    pub fn locate(width: usize, height: usize, x: T, y: T) -> Result<Self> {
        let (xf, yf) = (x.to_f64(), y.to_f64());
        if !(xf >= 0.0 && yf >= 0.0 && xf <= (width - 1) as f64 && yf <= (height - 1) as f64) {
            return Err(Error::OutOfBounds {
                x: xf,
                y: yf,
                width,
                height,
            });
        }
        let x0 = (xf.floor() as usize).min(width.saturating_sub(2));
        let y0 = (yf.floor() as usize).min(height.saturating_sub(2));
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        Ok(Self {
            x0,
            y0,
            x1,
            y1,
            fx: x - T::from_f64(x0 as f64),
            fy: y - T::from_f64(y0 as f64),
        })
    }

    #[inline]
    pub fn sample(&self, img: &Tensor<T>, c: usize) -> T {
        let (fx, fy) = (self.fx, self.fy);
        let top = img.at(c, self.y0, self.x0) * (T::ONE - fx) + img.at(c, self.y0, self.x1) * fx;
        let bot = img.at(c, self.y1, self.x0) * (T::ONE - fx) + img.at(c, self.y1, self.x1) * fx;
        top * (T::ONE - fy) + bot * fy
    }

    /// Derivatives of [`Self::sample`] with respect to `x` and `y`.
    #[inline]
    pub fn grad_xy(&self, img: &Tensor<T>, c: usize) -> (T, T) {
        let (fx, fy) = (self.fx, self.fy);
        let (i00, i01) = (img.at(c, self.y0, self.x0), img.at(c, self.y0, self.x1));
        let (i10, i11) = (img.at(c, self.y1, self.x0), img.at(c, self.y1, self.x1));
        let dx = (i01 - i00) * (T::ONE - fy) + (i11 - i10) * fy;
        let dy = (i10 - i00) * (T::ONE - fx) + (i11 - i01) * fx;
        (dx, dy)
    }

    /// Adds `g · ∂sample/∂img` into `grad`.
    #[inline]
    pub fn scatter(&self, grad: &mut Tensor<T>, c: usize, g: T) {
        let (fx, fy) = (self.fx, self.fy);
        *grad.at_mut(c, self.y0, self.x0) += g * (T::ONE - fx) * (T::ONE - fy);
        *grad.at_mut(c, self.y0, self.x1) += g * fx * (T::ONE - fy);
        *grad.at_mut(c, self.y1, self.x0) += g * (T::ONE - fx) * fy;
        *grad.at_mut(c, self.y1, self.x1) += g * fx * fy;
    }
}

/// Bilinear values of every channel at each `(x, y)`.
pub fn sample_at<T: Real>(image: &Tensor<T>, coords: &[(T, T)]) -> Result<Vec<Vec<T>>> {
    coords
        .iter()
        .map(|&(x, y)| {
            let b = Bilinear::locate(image.width(), image.height(), x, y)?;
            Ok((0..image.channels()).map(|c| b.sample(image, c)).collect())
        })
        .collect()
}
