use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use super::{
    norm_to_pixel, pixel_to_norm, read_npy_f32, write_npy_f32, CorrespondenceMaps, Direction,
};
use crate::error::{Error, Result};
use crate::synth::{rng_for, WarpSpec};
use crate::tensor::Tensor;
use crate::videodata::VideoClip;

/// Anything that produces dense bidirectional maps for a frame pair.
///
/// Providers are frozen: the same `(clip, t1, t2)` always yields the same
/// maps, and [`CorrespondenceProvider::id`] changes whenever a parameter does.
pub trait CorrespondenceProvider: Send + Sync {
    fn id(&self) -> String;
    fn maps(&self, clip: &VideoClip, t1: usize, t2: usize) -> Result<CorrespondenceMaps>;
}

pub(crate) fn stable_hash(s: &str) -> u64 {
    // FNV-1a
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Exact maps from the synthetic warps.
#[derive(Clone, Debug, Default)]
pub struct OracleProvider {
    warps: BTreeMap<String, WarpSpec>,
}

impl OracleProvider {
    pub fn new(warps: BTreeMap<String, WarpSpec>) -> Self {
        Self { warps }
    }

    pub fn warp(&self, clip_id: &str) -> Result<&WarpSpec> {
        self.warps
            .get(clip_id)
            .ok_or_else(|| Error::Provider(format!("no warp recorded for clip {clip_id}")))
    }

    pub fn maps_for(warp: &WarpSpec, t1: usize, t2: usize) -> CorrespondenceMaps {
        let (h, w) = (warp.height, warp.width);
        let one_way = |from: usize, to: usize| {
            let mut map = Tensor::<f32>::zeros(2, h, w);
            let mut valid = vec![false; h * w];
            for y in 0..h {
                for x in 0..w {
                    if let Some((tx, ty)) = warp.map_point(from, to, x as f64, y as f64) {
                        if warp.in_bounds(tx, ty) {
                            *map.at_mut(0, y, x) = pixel_to_norm(tx, w) as f32;
                            *map.at_mut(1, y, x) = pixel_to_norm(ty, h) as f32;
                            valid[y * w + x] = true;
                        }
                    }
                }
            }
            (map, valid)
        };
        let (fwd, valid_fwd) = one_way(t1, t2);
        let (bwd, valid_bwd) = one_way(t2, t1);
        CorrespondenceMaps {
            fwd,
            bwd,
            valid_fwd,
            valid_bwd,
            conf_fwd: None,
            conf_bwd: None,
        }
    }
}

impl CorrespondenceProvider for OracleProvider {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn maps(&self, clip: &VideoClip, t1: usize, t2: usize) -> Result<CorrespondenceMaps> {
        let warp = self.warp(&clip.clip_id)?;
        if t1 >= warp.frames() || t2 >= warp.frames() {
            return Err(Error::Provider(format!(
                "frames ({t1}, {t2}) outside clip {}",
                clip.clip_id
            )));
        }
        Ok(Self::maps_for(warp, t1, t2))
    }
}

/// Exhaustive SSD block matching on the normal-light frames.
#[derive(Clone, Debug)]
pub struct BlockMatchingProvider {
    pub patch: usize,
    pub search_radius: usize,
    pub stride: usize,
}

impl Default for BlockMatchingProvider {
    fn default() -> Self {
        Self {
            patch: 7,
            search_radius: 4,
            stride: 4,
        }
    }
}

impl BlockMatchingProvider {
    pub fn new(patch: usize, search_radius: usize, stride: usize) -> Result<Self> {
        if patch % 2 == 0 || search_radius == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "block matching needs an odd patch, radius >= 1 and stride >= 1 (got {patch}, {search_radius}, {stride})"
            )));
        }
        Ok(Self {
            patch,
            search_radius,
            stride,
        })
    }

    /// Returns `(map, confidence)` from `a` into `b`.
    fn match_one_way(
        &self,
        a: &Tensor<f32>,
        b: &Tensor<f32>,
    ) -> (Tensor<f32>, Vec<bool>, Vec<f32>) {
        let (h, w) = (a.height(), a.width());
        let half = (self.patch / 2) as isize;
        let r = self.search_radius as isize;
        let px = |img: &Tensor<f32>, c: usize, y: isize, x: isize| {
            img.at(
                c,
                y.clamp(0, h as isize - 1) as usize,
                x.clamp(0, w as isize - 1) as usize,
            )
        };
        // ε keeps flat regions at zero confidence; scaled to the patch size
        let eps = 1e-4 * (3 * self.patch * self.patch) as f32;
        let mut offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .collect();
        offsets.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));

        let gh = h.div_ceil(self.stride);
        let gw = w.div_ceil(self.stride);
        let mut grid = vec![((0isize, 0isize), 0f32); gh * gw];
        for gy in 0..gh {
            for gx in 0..gw {
                let (cy, cx) = ((gy * self.stride) as isize, (gx * self.stride) as isize);
                let mut best = (f32::INFINITY, (0, 0));
                let (mut total, mut n) = (0f32, 0usize);
                for &(dx, dy) in &offsets {
                    let (ty, tx) = (cy + dy, cx + dx);
                    if ty < 0 || tx < 0 || ty >= h as isize || tx >= w as isize {
                        continue;
                    }
                    let mut ssd = 0f32;
                    for c in 0..3 {
                        for oy in -half..=half {
                            for ox in -half..=half {
                                let d = px(a, c, cy + oy, cx + ox) - px(b, c, ty + oy, tx + ox);
                                ssd += d * d;
                            }
                        }
                    }
                    total += ssd;
                    n += 1;
                    if ssd < best.0 {
                        best = (ssd, (dx, dy));
                    }
                }
                let mean = total / n.max(1) as f32;
                let conf = ((mean - best.0) / (mean + eps)).clamp(0.0, 1.0);
                grid[gy * gw + gx] = (best.1, conf);
            }
        }

        let mut map = Tensor::<f32>::zeros(2, h, w);
        let mut valid = vec![false; h * w];
        let mut conf = vec![0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let gy = ((y + self.stride / 2) / self.stride).min(gh - 1);
                let gx = ((x + self.stride / 2) / self.stride).min(gw - 1);
                let ((dx, dy), c) = grid[gy * gw + gx];
                let (tx, ty) = (x as isize + dx, y as isize + dy);
                let i = y * w + x;
                if tx >= 0 && ty >= 0 && tx < w as isize && ty < h as isize {
                    *map.at_mut(0, y, x) = pixel_to_norm(tx as f64, w) as f32;
                    *map.at_mut(1, y, x) = pixel_to_norm(ty as f64, h) as f32;
                    valid[i] = true;
                    conf[i] = c;
                }
            }
        }
        (map, valid, conf)
    }

    pub fn match_frames(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> CorrespondenceMaps {
        let (fwd, valid_fwd, conf_fwd) = self.match_one_way(a, b);
        let (bwd, valid_bwd, conf_bwd) = self.match_one_way(b, a);
        CorrespondenceMaps {
            fwd,
            bwd,
            valid_fwd,
            valid_bwd,
            conf_fwd: Some(conf_fwd),
            conf_bwd: Some(conf_bwd),
        }
    }
}

impl CorrespondenceProvider for BlockMatchingProvider {
    fn id(&self) -> String {
        format!(
            "block_matching(patch={},radius={},stride={})",
            self.patch, self.search_radius, self.stride
        )
    }

    fn maps(&self, clip: &VideoClip, t1: usize, t2: usize) -> Result<CorrespondenceMaps> {
        let normal = clip.require_normal()?;
        let (a, b) = (
            normal
                .get(t1)
                .ok_or_else(|| Error::Provider(format!("frame {t1} missing")))?,
            normal
                .get(t2)
                .ok_or_else(|| Error::Provider(format!("frame {t2} missing")))?,
        );
        Ok(self.match_frames(a.pixels(), b.pixels()))
    }
}

/// Adds i.i.d. Gaussian noise of `sigma_px` pixels to every valid map entry.
pub fn perturb_maps(maps: &CorrespondenceMaps, sigma_px: f64, seed: u64) -> CorrespondenceMaps {
    let mut out = maps.clone();
    if sigma_px <= 0.0 {
        return out;
    }
    let mut rng = rng_for(seed, &[0x4d41_5053]);
    let noise = Normal::new(0.0, sigma_px).expect("sigma is finite");
    let (h, w) = (maps.height(), maps.width());
    let n = h * w;
    for dir in [Direction::Fwd, Direction::Bwd] {
        let valid = maps.valid(dir).to_vec();
        let map = match dir {
            Direction::Fwd => &mut out.fwd,
            Direction::Bwd => &mut out.bwd,
        };
        let data = map.data_mut();
        for i in (0..n).filter(|&i| valid[i]) {
            let px = norm_to_pixel(data[i] as f64, w) + noise.sample(&mut rng);
            let py = norm_to_pixel(data[n + i] as f64, h) + noise.sample(&mut rng);
            data[i] = pixel_to_norm(px.clamp(0.0, (w - 1) as f64), w) as f32;
            data[n + i] = pixel_to_norm(py.clamp(0.0, (h - 1) as f64), h) as f32;
        }
    }
    out
}

/// Wraps a provider with a frozen, per-pair Gaussian corruption.
#[derive(Clone)]
pub struct PerturbedProvider {
    inner: Arc<dyn CorrespondenceProvider>,
    sigma_px: f64,
    seed: u64,
}

impl PerturbedProvider {
    pub fn new(inner: Arc<dyn CorrespondenceProvider>, sigma_px: f64, seed: u64) -> Self {
        Self {
            inner,
            sigma_px,
            seed,
        }
    }
}

impl CorrespondenceProvider for PerturbedProvider {
    fn id(&self) -> String {
        format!(
            "perturbed(sigma={},seed={})<{}>",
            self.sigma_px,
            self.seed,
            self.inner.id()
        )
    }

    fn maps(&self, clip: &VideoClip, t1: usize, t2: usize) -> Result<CorrespondenceMaps> {
        let maps = self.inner.maps(clip, t1, t2)?;
        let seed = crate::synth::mix_seed(
            self.seed,
            &[stable_hash(&clip.clip_id), t1 as u64, t2 as u64],
        );
        Ok(perturb_maps(&maps, self.sigma_px, seed))
    }
}

/// Maps computed elsewhere, stored as `<root>/<clip_id>/<t1>_<t2>_{fwd,bwd}.npy`
/// (`H×W×2` float32, normalized, NaN marks invalid) with optional
/// `<t1>_<t2>_{fwd,bwd}_conf.npy` (`H×W`).
#[derive(Clone, Debug)]
pub struct ImportedProvider {
    root: PathBuf,
}

impl ImportedProvider {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn stem(root: &Path, clip_id: &str, t1: usize, t2: usize, dir: Direction) -> PathBuf {
        let tag = match dir {
            Direction::Fwd => "fwd",
            Direction::Bwd => "bwd",
        };
        root.join(clip_id).join(format!("{t1:05}_{t2:05}_{tag}"))
    }

    pub fn export(
        root: &Path,
        clip_id: &str,
        t1: usize,
        t2: usize,
        maps: &CorrespondenceMaps,
    ) -> Result<()> {
        std::fs::create_dir_all(root.join(clip_id)).map_err(|e| Error::io(root, e))?;
        let (h, w) = (maps.height(), maps.width());
        for dir in [Direction::Fwd, Direction::Bwd] {
            let stem = Self::stem(root, clip_id, t1, t2, dir);
            let map = maps.map(dir);
            let mut hwc = Vec::with_capacity(h * w * 2);
            for i in 0..h * w {
                let ok = maps.valid(dir)[i];
                hwc.push(if ok { map.data()[i] } else { f32::NAN });
                hwc.push(if ok { map.data()[h * w + i] } else { f32::NAN });
            }
            write_npy_f32(&stem.with_extension("npy"), &[h, w, 2], &hwc)?;
            if let Some(conf) = maps.confidence(dir) {
                let path = PathBuf::from(format!("{}_conf.npy", stem.display()));
                write_npy_f32(&path, &[h, w], conf)?;
            }
        }
        Ok(())
    }
}

impl CorrespondenceProvider for ImportedProvider {
    fn id(&self) -> String {
        format!("imported({})", self.root.display())
    }

    fn maps(&self, clip: &VideoClip, t1: usize, t2: usize) -> Result<CorrespondenceMaps> {
        let (h, w) = clip
            .dims()
            .ok_or_else(|| Error::Provider("empty clip".into()))?;
        let load = |dir: Direction| -> Result<(Tensor<f32>, Vec<bool>, Option<Vec<f32>>)> {
            let stem = Self::stem(&self.root, &clip.clip_id, t1, t2, dir);
            let path = stem.with_extension("npy");
            let (shape, data) = read_npy_f32(&path)?;
            if shape != [h, w, 2] {
                return Err(Error::io(
                    &path,
                    format!("expected shape ({h}, {w}, 2), found {shape:?}"),
                ));
            }
            let mut map = Tensor::<f32>::zeros(2, h, w);
            let mut valid = vec![false; h * w];
            for i in 0..h * w {
                let (nx, ny) = (data[2 * i], data[2 * i + 1]);
                if nx.is_finite() && ny.is_finite() {
                    map.data_mut()[i] = nx.clamp(-1.0, 1.0);
                    map.data_mut()[h * w + i] = ny.clamp(-1.0, 1.0);
                    valid[i] = true;
                }
            }
            let conf_path = PathBuf::from(format!("{}_conf.npy", stem.display()));
            let conf = if conf_path.exists() {
                let (shape, c) = read_npy_f32(&conf_path)?;
                if shape != [h, w] {
                    return Err(Error::io(&conf_path, "confidence must be H x W"));
                }
                Some(
                    c.into_iter()
                        .map(|v| {
                            if v.is_finite() {
                                v.clamp(0.0, 1.0)
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )
            } else {
                None
            };
            Ok((map, valid, conf))
        };
        let (fwd, valid_fwd, conf_fwd) = load(Direction::Fwd)?;
        let (bwd, valid_bwd, conf_bwd) = load(Direction::Bwd)?;
        Ok(CorrespondenceMaps {
            fwd,
            bwd,
            valid_fwd,
            valid_bwd,
            conf_fwd,
            conf_bwd,
        })
    }
}
