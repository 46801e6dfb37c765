//! Image-quality, temporal-consistency and correspondence metrics.

use serde::{Deserialize, Serialize};

use crate::corr::{Bilinear, CorrespondenceMaps, CorrespondenceProvider, Direction};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::videodata::{Frame, VideoClip};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Forward-backward disagreement (pixels) above which a pixel counts as occluded.
pub const OCCLUSION_THRESHOLD_PX: f64 = 1.0;

fn check_pair<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    a.ensure_same_shape(b, "metric inputs")?;
    if a.is_empty() {
        return Err(Error::Metric("metric inputs are empty".into()));
    }
    Ok(())
}

/// `10·log10(1/MSE)`; identical inputs give `+∞`.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a, b)?;
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum();
    let mse = se / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5), averaged
/// over channels and every position where the window fits.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a, b)?;
    let (c, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Metric(format!(
            "frames of {h}x{w} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa: Vec<f64> = a.plane(ch).iter().map(|v| v.to_f64()).collect();
        let pb: Vec<f64> = b.plane(ch).iter().map(|v| v.to_f64()).collect();
        let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let aa = filter_valid(&prod(&|i| pa[i] * pa[i]), h, w, &taps);
        let bb = filter_valid(&prod(&|i| pb[i] * pb[i]), h, w, &taps);
        let ab = filter_valid(&prod(&|i| pa[i] * pb[i]), h, w, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        count += mu_a.len();
    }
    Ok(total / count as f64)
}

/// Temporal stride of [`temporal_loss`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Horizon {
    Short,
    Long,
}

impl Horizon {
    pub fn stride(self) -> usize {
        match self {
            Horizon::Short => 1,
            Horizon::Long => 10,
        }
    }
}

/// Bilinearly samples the 2-channel map of `dir` at a continuous pixel
/// position, returning the target in pixel units. `None` when the position is
/// out of bounds or any stencil neighbour is invalid.
pub fn sample_map(maps: &CorrespondenceMaps, dir: Direction, x: f64, y: f64) -> Option<(f64, f64)> {
    let (h, w) = (maps.height(), maps.width());
    let b = Bilinear::locate(w, h, x, y).ok()?;
    let valid = maps.valid(dir);
    let (x0, y0) = (x.floor().max(0.0) as usize, y.floor().max(0.0) as usize);
    let (x0, y0) = (x0.min(w.saturating_sub(2)), y0.min(h.saturating_sub(2)));
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    if ![(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
        .iter()
        .all(|&(xx, yy)| valid[yy * w + xx])
    {
        return None;
    }
    let map: Tensor<f64> = maps.map(dir).cast();
    let nx = b.sample(&map, 0);
    let ny = b.sample(&map, 1);
    Some((
        crate::corr::norm_to_pixel(nx, w),
        crate::corr::norm_to_pixel(ny, h),
    ))
}

/// Warped mean squared error between `enhanced[t]` and `enhanced[t+k]`,
/// with maps from `provider` (computed on the clip's normal-light frames).
/// Pixels of `t+k` are pulled back into `t` through the backward map; pixels
/// whose forward-backward round trip misses by more than one pixel are
/// excluded. Returns the mean over frame pairs.
pub fn temporal_loss(
    enhanced: &[Frame],
    clip: &VideoClip,
    provider: &dyn CorrespondenceProvider,
    horizon: Horizon,
) -> Result<f64> {
    let k = horizon.stride();
    if enhanced.len() < k + 1 {
        return Err(Error::Metric(format!(
            "{horizon:?} temporal loss needs at least {} frames, got {}",
            k + 1,
            enhanced.len()
        )));
    }
    if enhanced.len() != clip.frame_count() {
        return Err(Error::Metric(format!(
            "enhanced sequence has {} frames, clip has {}",
            enhanced.len(),
            clip.frame_count()
        )));
    }
    let mut per_pair = Vec::new();
    for t in 0..enhanced.len() - k {
        let maps = provider.maps(clip, t, t + k)?;
        if let Some(v) = warped_mse(enhanced[t].pixels(), enhanced[t + k].pixels(), &maps)? {
            per_pair.push(v);
        }
    }
    if per_pair.is_empty() {
        return Err(Error::Metric("no visible pixels in any frame pair".into()));
    }
    Ok(per_pair.iter().sum::<f64>() / per_pair.len() as f64)
}

/// MSE between `next` and `prev` warped onto it; `None` if nothing is visible.
pub fn warped_mse(
    prev: &Tensor<f32>,
    next: &Tensor<f32>,
    maps: &CorrespondenceMaps,
) -> Result<Option<f64>> {
    prev.ensure_same_shape(next, "temporal frames")?;
    let (c, h, w) = prev.shape();
    if maps.height() != h || maps.width() != w {
        return Err(Error::Shape(
            "correspondence maps do not match the frame size".into(),
        ));
    }
    let prev64: Tensor<f64> = prev.cast();
    let mut se = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !maps.valid_bwd[y * w + x] {
                continue;
            }
            let (qx, qy) = maps.target_pixel(Direction::Bwd, x, y);
            let Some((rx, ry)) = sample_map(maps, Direction::Fwd, qx, qy) else {
                continue;
            };
            if (rx - x as f64).hypot(ry - y as f64) > OCCLUSION_THRESHOLD_PX {
                continue;
            }
            let b = Bilinear::locate(w, h, qx, qy)?;
            for ch in 0..c {
                let d = b.sample(&prev64, ch) - next.at(ch, y, x) as f64;
                se += d * d;
            }
            n += 1;
        }
    }
    Ok((n > 0).then(|| se / (n * c) as f64))
}

/// Mean per-step value drift along trajectories started at every pixel of
/// the first frame and chained through consecutive forward maps. A
/// trajectory ends when it leaves the frame or hits an invalid match. Each
/// step contributes the L2 norm of the difference between the bilinear
/// colours at its two ends.
pub fn alignment_error(frames: &[Frame], maps: &[CorrespondenceMaps]) -> Result<f64> {
    if frames.len() < 2 || maps.len() != frames.len() - 1 {
        return Err(Error::Metric(format!(
            "alignment error needs n >= 2 frames and n - 1 maps, got {} and {}",
            frames.len(),
            maps.len()
        )));
    }
    let (h, w) = (frames[0].height(), frames[0].width());
    if maps.iter().any(|m| m.height() != h || m.width() != w) {
        return Err(Error::Shape(
            "correspondence maps do not match the frame size".into(),
        ));
    }
    let images: Vec<Tensor<f64>> = frames.iter().map(|f| f.pixels().cast()).collect();
    let c = images[0].channels();
    let mut total = 0.0;
    let mut steps = 0usize;
    for y0 in 0..h {
        for x0 in 0..w {
            let (mut x, mut y) = (x0 as f64, y0 as f64);
            for (t, m) in maps.iter().enumerate() {
                let Some((nx, ny)) = sample_map(m, Direction::Fwd, x, y) else {
                    break;
                };
                let (Ok(a), Ok(b)) = (Bilinear::locate(w, h, x, y), Bilinear::locate(w, h, nx, ny))
                else {
                    break;
                };
                let d2: f64 = (0..c)
                    .map(|ch| (b.sample(&images[t + 1], ch) - a.sample(&images[t], ch)).powi(2))
                    .sum();
                total += d2.sqrt();
                steps += 1;
                (x, y) = (nx, ny);
            }
        }
    }
    if steps == 0 {
        return Err(Error::Metric("no valid trajectories".into()));
    }
    Ok(total / steps as f64)
}

/// Mean Euclidean distance in pixels between predicted and true targets,
/// over both directions and every entry valid in both.
pub fn endpoint_error(pred: &CorrespondenceMaps, truth: &CorrespondenceMaps) -> Result<f64> {
    let (h, w) = (truth.height(), truth.width());
    if pred.height() != h || pred.width() != w {
        return Err(Error::Shape("endpoint error inputs differ in size".into()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for dir in [Direction::Fwd, Direction::Bwd] {
        let (vp, vt) = (pred.valid(dir), truth.valid(dir));
        for y in 0..h {
            for x in 0..w {
                if vp[y * w + x] && vt[y * w + x] {
                    let (px, py) = pred.target_pixel(dir, x, y);
                    let (tx, ty) = truth.target_pixel(dir, x, y);
                    total += (px - tx).hypot(py - ty);
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::Metric("no entries valid in both maps".into()));
    }
    Ok(total / n as f64)
}

/// A PSNR value whose `+∞` case serializes as `{"db": null, "identical": true}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: Option<f64>,
    pub identical: bool,
}

impl Psnr {
    pub fn from_db(db: f64) -> Self {
        if db.is_infinite() {
            Self {
                db: None,
                identical: true,
            }
        } else {
            Self {
                db: Some(db),
                identical: false,
            }
        }
    }

    pub fn value(&self) -> f64 {
        self.db.unwrap_or(f64::INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    /// Mean per-frame PSNR of the enhanced frames against ground truth.
    pub psnr: Psnr,
    /// Same for the low-light input, as a reference point.
    pub psnr_input: Psnr,
    pub ssim: f64,
    pub temporal_short: Option<f64>,
    /// `None` for clips shorter than 11 frames.
    pub temporal_long: Option<f64>,
    /// Computed on the ground-truth frames with the provider's maps.
    pub alignment_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub clips: usize,
    pub psnr: Psnr,
    pub psnr_input: Psnr,
    pub ssim: f64,
    pub temporal_short: Option<f64>,
    pub temporal_long: Option<f64>,
    pub alignment_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_clip: Vec<ClipMetrics>,
    pub mean: MetricSummary,
}

fn mean_psnr(values: impl Iterator<Item = f64>) -> Psnr {
    let v: Vec<f64> = values.collect();
    Psnr::from_db(v.iter().sum::<f64>() / v.len() as f64)
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// All metrics for one clip. Temporal and alignment metrics are `None` when
/// the clip is too short or has no usable correspondences.
pub fn evaluate_clip(
    clip: &VideoClip,
    enhanced: &[Frame],
    provider: &dyn CorrespondenceProvider,
) -> Result<ClipMetrics> {
    let normal = clip.require_normal()?;
    if enhanced.len() != normal.len() {
        return Err(Error::Metric(format!(
            "clip {}: {} enhanced frames for {} ground-truth frames",
            clip.clip_id,
            enhanced.len(),
            normal.len()
        )));
    }
    let mut psnrs = Vec::new();
    let mut inputs = Vec::new();
    let mut ssims = Vec::new();
    for ((e, g), l) in enhanced.iter().zip(normal).zip(clip.low()) {
        psnrs.push(psnr(e.pixels(), g.pixels())?);
        inputs.push(psnr(l.pixels(), g.pixels())?);
        ssims.push(ssim(e.pixels(), g.pixels())?);
    }
    let optional = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Metric(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let temporal_short = optional(temporal_loss(enhanced, clip, provider, Horizon::Short))?;
    let temporal_long = optional(temporal_loss(enhanced, clip, provider, Horizon::Long))?;
    let chain = (0..normal.len().saturating_sub(1))
        .map(|t| provider.maps(clip, t, t + 1))
        .collect::<Result<Vec<_>>>()?;
    let alignment = optional(alignment_error(normal, &chain))?;
    Ok(ClipMetrics {
        clip_id: clip.clip_id.clone(),
        psnr: mean_psnr(psnrs.into_iter()),
        psnr_input: mean_psnr(inputs.into_iter()),
        ssim: ssims.iter().sum::<f64>() / ssims.len() as f64,
        temporal_short,
        temporal_long,
        alignment_error: alignment,
    })
}

impl MetricReport {
    pub fn new(per_clip: Vec<ClipMetrics>) -> Result<Self> {
        if per_clip.is_empty() {
            return Err(Error::Metric("no clips to summarize".into()));
        }
        let n = per_clip.len();
        let mean = MetricSummary {
            clips: n,
            psnr: mean_psnr(per_clip.iter().map(|c| c.psnr.value())),
            psnr_input: mean_psnr(per_clip.iter().map(|c| c.psnr_input.value())),
            ssim: per_clip.iter().map(|c| c.ssim).sum::<f64>() / n as f64,
            temporal_short: mean_opt(per_clip.iter().map(|c| c.temporal_short)),
            temporal_long: mean_opt(per_clip.iter().map(|c| c.temporal_long)),
            alignment_error: mean_opt(per_clip.iter().map(|c| c.alignment_error)),
        };
        Ok(Self { per_clip, mean })
    }
}
