//! Synthetic paired clips with known inter-frame warps.
//!
//! A [`WarpSpec`] stores, for every frame `t`, the *source map* `S_t` taking a
//! pixel of frame `t` to the base-texture coordinate it displays:
//! `S_t(q) = A_t·q + s_t·d(q)` with `A_t` affine and `d` a smooth sinusoidal
//! displacement field. Frame `t` is `base(S_t(q))`, so a point `q1` in frame
//! `t1` corresponds to `S_t2⁻¹(S_t1(q1))` in frame `t2`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corr::{Correspondence, CorrespondenceSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::videodata::{save_clip, Frame, VideoClip};

/// Name of the sidecar written next to a synthetic dataset.
pub const SIDECAR_FILE: &str = "warps.json";

/// Derives an independent stream seed from a base seed and a tag tuple.
pub fn mix_seed(seed: u64, tags: &[u64]) -> u64 {
    // splitmix64 finalizer over the running state
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        z = z
            .wrapping_add(t.wrapping_mul(0xBF58_476D_1CE4_E5B9))
            .wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub fn rng_for(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, tags))
}

/// One sinusoidal mode of the displacement field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementMode {
    pub amp_x: f64,
    pub amp_y: f64,
    /// Cycles across the frame width / height.
    pub freq_x: f64,
    pub freq_y: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    pub height: usize,
    pub width: usize,
    /// Row-major 2×3 source affine per frame: `[a, b, tx, c, d, ty]`.
    pub affines: Vec<[f64; 6]>,
    pub modes: Vec<DisplacementMode>,
    /// Per-frame scale of the displacement field.
    pub displacement_scale: Vec<f64>,
    pub seed: u64,
}

impl WarpSpec {
    pub fn identity(frames: usize, height: usize, width: usize) -> Self {
        Self::translation(0.0, 0.0, frames, height, width)
    }

    /// Content moves by `(dx, dy)` pixels per frame.
    pub fn translation(dx: f64, dy: f64, frames: usize, height: usize, width: usize) -> Self {
        let affines = (0..frames)
            .map(|t| [1.0, 0.0, -dx * t as f64, 0.0, 1.0, -dy * t as f64])
            .collect();
        Self {
            height,
            width,
            affines,
            modes: vec![],
            displacement_scale: vec![0.0; frames],
            seed: 0,
        }
    }

    /// Small random camera motion (rotation, zoom, drift) plus a gently
    /// animated low-frequency deformation.
    pub fn random(frames: usize, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0x5741_5250]);
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let vx = rng.random_range(-1.5..1.5);
        let vy = rng.random_range(-1.5..1.5);
        let omega = rng.random_range(-0.01..0.01);
        let zoom = rng.random_range(-0.006..0.006);
        let mut affines = Vec::with_capacity(frames);
        // Cumulative motion M_t (base → frame t); the source map is its inverse.
        for t in 0..frames {
            let tf = t as f64;
            let jitter_x = rng.random_range(-0.3..0.3);
            let jitter_y = rng.random_range(-0.3..0.3);
            let (theta, s) = (omega * tf, 1.0 + zoom * tf);
            let (ca, sa) = (theta.cos() * s, theta.sin() * s);
            // forward: p' = R(p - c) + c + v t
            let tx = vx * tf + if t > 0 { jitter_x } else { 0.0 };
            let ty = vy * tf + if t > 0 { jitter_y } else { 0.0 };
            let fwd = [
                ca,
                -sa,
                cx - ca * cx + sa * cy + tx,
                sa,
                ca,
                cy - sa * cx - ca * cy + ty,
            ];
            affines.push(invert_affine(&fwd).expect("rotation-zoom is invertible"));
        }
        // Amplitudes are tuned for 64 px frames and scale with the frame.
        let amp = 1.2 * height.min(width) as f64 / 64.0;
        let modes = (0..2)
            .map(|_| DisplacementMode {
                amp_x: rng.random_range(-amp..amp),
                amp_y: rng.random_range(-amp..amp),
                freq_x: rng.random_range(0.3..1.2),
                freq_y: rng.random_range(0.3..1.2),
                phase: rng.random_range(0.0..2.0 * PI),
            })
            .collect();
        let denom = (frames.max(2) - 1) as f64;
        let displacement_scale = (0..frames).map(|t| t as f64 / denom).collect();
        Self {
            height,
            width,
            affines,
            modes,
            displacement_scale,
            seed,
        }
    }

    pub fn frames(&self) -> usize {
        self.affines.len()
    }

    fn displacement(&self, x: f64, y: f64) -> (f64, f64, [f64; 4]) {
        let (mut dx, mut dy) = (0.0, 0.0);
        let mut jac = [0.0; 4];
        for m in &self.modes {
            let kx = 2.0 * PI * m.freq_x / self.width as f64;
            let ky = 2.0 * PI * m.freq_y / self.height as f64;
            let arg = kx * x + ky * y + m.phase;
            let (s, c) = arg.sin_cos();
            dx += m.amp_x * s;
            dy += m.amp_y * c;
            jac[0] += m.amp_x * c * kx;
            jac[1] += m.amp_x * c * ky;
            jac[2] -= m.amp_y * s * kx;
            jac[3] -= m.amp_y * s * ky;
        }
        (dx, dy, jac)
    }

    /// Frame-`t` pixel → base-texture coordinate, with its Jacobian.
    fn source_with_jacobian(&self, t: usize, x: f64, y: f64) -> ((f64, f64), [f64; 4]) {
        let a = &self.affines[t];
        let s = self.displacement_scale[t];
        let (dx, dy, dj) = self.displacement(x, y);
        let p = (
            a[0] * x + a[1] * y + a[2] + s * dx,
            a[3] * x + a[4] * y + a[5] + s * dy,
        );
        let j = [
            a[0] + s * dj[0],
            a[1] + s * dj[1],
            a[3] + s * dj[2],
            a[4] + s * dj[3],
        ];
        (p, j)
    }

    pub fn source(&self, t: usize, x: f64, y: f64) -> (f64, f64) {
        self.source_with_jacobian(t, x, y).0
    }

    /// Solves `S_t(q) = (bx, by)` by Newton iteration.
    pub fn source_inverse(&self, t: usize, bx: f64, by: f64) -> Option<(f64, f64)> {
        let a = &self.affines[t];
        let inv = invert_affine(a)?;
        let (mut x, mut y) = (
            inv[0] * bx + inv[1] * by + inv[2],
            inv[3] * bx + inv[4] * by + inv[5],
        );
        for _ in 0..50 {
            let ((px, py), j) = self.source_with_jacobian(t, x, y);
            let (rx, ry) = (px - bx, py - by);
            if rx.abs() < 1e-11 && ry.abs() < 1e-11 {
                return Some((x, y));
            }
            let det = j[0] * j[3] - j[1] * j[2];
            if det.abs() < 1e-12 {
                return None;
            }
            x -= (j[3] * rx - j[1] * ry) / det;
            y -= (-j[2] * rx + j[0] * ry) / det;
        }
        let (px, py) = self.source(t, x, y);
        ((px - bx).abs() < 1e-7 && (py - by).abs() < 1e-7).then_some((x, y))
    }

    /// Exact position in frame `t2` of the content at `(x, y)` in frame `t1`.
    pub fn map_point(&self, t1: usize, t2: usize, x: f64, y: f64) -> Option<(f64, f64)> {
        let (bx, by) = self.source(t1, x, y);
        self.source_inverse(t2, bx, by)
    }

    pub fn in_bounds(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.affines.len();
        if n == 0 || self.displacement_scale.len() != n {
            return Err(Error::InvalidWarp(
                "per-frame parameter lengths disagree".into(),
            ));
        }
        let min_dim = self.height.min(self.width) as f64;
        let amp: f64 = self
            .modes
            .iter()
            .map(|m| m.amp_x.abs().max(m.amp_y.abs()))
            .sum();
        let lip: f64 = self
            .modes
            .iter()
            .map(|m| {
                let k = 2.0
                    * PI
                    * ((m.freq_x / self.width as f64).powi(2)
                        + (m.freq_y / self.height as f64).powi(2))
                    .sqrt();
                m.amp_x.abs().max(m.amp_y.abs()) * k * std::f64::consts::SQRT_2
            })
            .sum();
        for (t, a) in self.affines.iter().enumerate() {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidWarp(format!("frame {t}: non-finite affine")));
            }
            let det = a[0] * a[4] - a[1] * a[3];
            if det.abs() < 0.1 {
                return Err(Error::InvalidWarp(format!(
                    "frame {t}: affine determinant {det:.3} too close to 0"
                )));
            }
            let s = self.displacement_scale[t].abs();
            if s * amp >= 0.1 * min_dim {
                return Err(Error::InvalidWarp(format!(
                    "frame {t}: displacement exceeds 10% of frame size"
                )));
            }
            // ‖A⁻¹‖ · Lip(s·d) < 1 keeps q ↦ A q + s d(q) injective.
            let inv = invert_affine(a).expect("determinant checked");
            let inv_norm =
                (inv[0].powi(2) + inv[1].powi(2) + inv[3].powi(2) + inv[4].powi(2)).sqrt();
            if inv_norm * s * lip >= 1.0 {
                return Err(Error::InvalidWarp(format!(
                    "frame {t}: displacement field folds the frame"
                )));
            }
        }
        Ok(())
    }
}

pub fn invert_affine(a: &[f64; 6]) -> Option<[f64; 6]> {
    let det = a[0] * a[4] - a[1] * a[3];
    if det.abs() < 1e-12 {
        return None;
    }
    let (i0, i1, i3, i4) = (a[4] / det, -a[1] / det, -a[3] / det, a[0] / det);
    Some([
        i0,
        i1,
        -(i0 * a[2] + i1 * a[5]),
        i3,
        i4,
        -(i3 * a[2] + i4 * a[5]),
    ])
}

/// Bilinear lookup with edge extension outside the frame.
pub fn sample_clamped(img: &Tensor<f32>, c: usize, x: f64, y: f64) -> f32 {
    let (w, h) = (img.width(), img.height());
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let v = |yy, xx| img.at(c, yy, xx) as f64;
    let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
    let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationSpec {
    pub gamma: f64,
    pub gain: f64,
    pub noise_sigma_read: f64,
    pub noise_poisson_scale: f64,
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            gamma: 2.2,
            gain: 0.25,
            noise_sigma_read: 0.005,
            noise_poisson_scale: 0.002,
            seed: 0,
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.gamma,
            self.gain,
            self.noise_sigma_read,
            self.noise_poisson_scale,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.gamma < 1.0 || !(self.gain > 0.0 && self.gain <= 1.0) {
            return Err(Error::Config(format!(
                "degradation parameters out of range: {self:?}"
            )));
        }
        if self.noise_sigma_read < 0.0 || self.noise_poisson_scale < 0.0 {
            return Err(Error::Config(
                "noise parameters must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Multi-octave smooth colour noise, optionally overlaid with soft-edged shapes.
pub fn procedural_texture(height: usize, width: usize, seed: u64, shapes: usize) -> Frame {
    let mut rng = rng_for(seed, &[0x5445_5854]);
    let mut img = Tensor::<f32>::zeros(3, height, width);
    let octaves = [(16.0, 0.5), (8.0, 0.3), (4.0, 0.2)];
    for &(cell, weight) in &octaves {
        let gw = (width as f64 / cell).ceil() as usize + 2;
        let gh = (height as f64 / cell).ceil() as usize + 2;
        for c in 0..3 {
            let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
            for y in 0..height {
                for x in 0..width {
                    let gx = x as f64 / cell;
                    let gy = y as f64 / cell;
                    let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
                    let sx = smoothstep(gx - x0 as f64);
                    let sy = smoothstep(gy - y0 as f64);
                    let g = |yy: usize, xx: usize| grid[yy * gw + xx];
                    let v = (g(y0, x0) * (1.0 - sx) + g(y0, x0 + 1) * sx) * (1.0 - sy)
                        + (g(y0 + 1, x0) * (1.0 - sx) + g(y0 + 1, x0 + 1) * sx) * sy;
                    *img.at_mut(c, y, x) += (weight * v) as f32;
                }
            }
        }
    }
    let min_dim = height.min(width) as f64;
    for _ in 0..shapes {
        let colour: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let size = rng.random_range(0.08..0.25) * min_dim;
        let is_disc = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                // signed distance to the boundary, positive inside
                let sd = if is_disc {
                    size - (dx * dx + dy * dy).sqrt()
                } else {
                    size - dx.abs().max(dy.abs())
                };
                let alpha = smoothstep((sd / 1.5 + 0.5).clamp(0.0, 1.0)) as f32;
                for (c, &col) in colour.iter().enumerate() {
                    let p = img.at_mut(c, y, x);
                    *p = *p * (1.0 - alpha) + col * alpha;
                }
            }
        }
    }
    let pixels = img.map(|v| (0.05 + 0.9 * v).clamp(0.0, 1.0));
    Frame::new(pixels, 0).expect("procedural texture stays in range")
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Renders `frame_count` frames of `base_texture` under `warp`.
pub fn generate_clip(
    clip_id: &str,
    base_texture: &Frame,
    warp: &WarpSpec,
    frame_count: usize,
) -> Result<VideoClip> {
    if frame_count < 2 {
        return Err(Error::InvalidClip("frame_count must be at least 2".into()));
    }
    if warp.frames() < frame_count {
        return Err(Error::InvalidWarp(format!(
            "warp covers {} frames, {frame_count} requested",
            warp.frames()
        )));
    }
    if (warp.height, warp.width) != (base_texture.height(), base_texture.width()) {
        return Err(Error::InvalidWarp(
            "warp and texture dimensions differ".into(),
        ));
    }
    warp.validate()?;
    let base = base_texture.pixels();
    let (h, w) = (base.height(), base.width());
    let frames = (0..frame_count)
        .map(|t| {
            let mut px = Tensor::<f32>::zeros(3, h, w);
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = warp.source(t, x as f64, y as f64);
                    for c in 0..3 {
                        *px.at_mut(c, y, x) = sample_clamped(base, c, sx, sy);
                    }
                }
            }
            Frame::new(px, t)
        })
        .collect::<Result<Vec<_>>>()?;
    VideoClip::from_normal(clip_id, frames)
}

/// `low = clamp(gain·normal^gamma + shot + read)`, deterministic in `(seed, t)`.
pub fn degrade(clip: &VideoClip, spec: &DegradationSpec) -> Result<VideoClip> {
    spec.validate()?;
    let normal = clip.require_normal()?;
    let low = normal
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let mut rng = rng_for(spec.seed, &[t as u64]);
            let read = Normal::new(0.0, spec.noise_sigma_read).expect("sigma validated");
            let px = f.pixels().map(|v| {
                let signal = spec.gain * (v as f64).powf(spec.gamma);
                let mut out = signal;
                if spec.noise_poisson_scale > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    out += (spec.noise_poisson_scale * signal).sqrt() * z;
                }
                if spec.noise_sigma_read > 0.0 {
                    out += read.sample(&mut rng);
                }
                out.clamp(0.0, 1.0) as f32
            });
            Frame::new(px, t)
        })
        .collect::<Result<Vec<_>>>()?;
    VideoClip::new(clip.clip_id.clone(), low, Some(normal.to_vec()))
}

/// Samples `count` interior points of frame `t1` and maps them exactly into `t2`.
pub fn oracle_correspondences(
    warp: &WarpSpec,
    t1: usize,
    t2: usize,
    count: usize,
) -> Result<CorrespondenceSet> {
    if t1 >= warp.frames() || t2 >= warp.frames() {
        return Err(Error::InvalidWarp(format!(
            "frames ({t1}, {t2}) outside the {}-frame warp",
            warp.frames()
        )));
    }
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    let mut rng = rng_for(warp.seed, &[0x4f52_4143, t1 as u64, t2 as u64]);
    let (w, h) = (warp.width as f64, warp.height as f64);
    let mut entries = Vec::with_capacity(count);
    let max_tries = 100 * count;
    let mut tries = 0;
    while entries.len() < count && tries < max_tries {
        tries += 1;
        let x1 = rng.random_range(1.0..w - 2.0);
        let y1 = rng.random_range(1.0..h - 2.0);
        if let Some((x2, y2)) = warp.map_point(t1, t2, x1, y1) {
            if warp.in_bounds(x2, y2) {
                entries.push(Correspondence {
                    x1,
                    y1,
                    x2,
                    y2,
                    u: 1.0,
                });
            }
        }
    }
    CorrespondenceSet::new(t1, t2, warp.width, warp.height, entries)
}

/// Gaussian jitter of the `t2` endpoints followed by a uniform random drop.
pub fn perturb_correspondences(
    set: &CorrespondenceSet,
    sigma: f64,
    drop_fraction: f64,
    seed: u64,
) -> Result<CorrespondenceSet> {
    if !(0.0..=1.0).contains(&drop_fraction) || !(sigma >= 0.0) {
        return Err(Error::Config(format!(
            "invalid perturbation sigma={sigma} drop={drop_fraction}"
        )));
    }
    let mut rng = rng_for(seed, &[0x5045_5254]);
    let (wmax, hmax) = ((set.width - 1) as f64, (set.height - 1) as f64);
    let mut entries: Vec<Correspondence> = set.entries.clone();
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("sigma is finite");
        for e in &mut entries {
            e.x2 = (e.x2 + noise.sample(&mut rng)).clamp(0.0, wmax);
            e.y2 = (e.y2 + noise.sample(&mut rng)).clamp(0.0, hmax);
        }
    }
    let n = entries.len();
    let drop = (drop_fraction * n as f64).round() as usize;
    if drop > 0 {
        let mut keep = rand::seq::index::sample(&mut rng, n, n - drop).into_vec();
        keep.sort_unstable();
        entries = keep.into_iter().map(|i| entries[i]).collect();
    }
    CorrespondenceSet::new(set.t1, set.t2, set.width, set.height, entries)
}

/// Per-dataset record of the warps and degradation used to build it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub degradation: DegradationSpec,
    pub warps: BTreeMap<String, WarpSpec>,
}

impl DatasetSidecar {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(SIDECAR_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::io(&path, e))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(SIDECAR_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::io(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub clips: usize,
    pub frames: usize,
    pub size: usize,
    pub seed: u64,
    pub shapes: usize,
    pub degradation: DegradationSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clips: 20,
            frames: 8,
            size: 64,
            seed: 7,
            shapes: 4,
            degradation: DegradationSpec::default(),
        }
    }
}

/// Builds a dataset in memory: clips `clip_000..` with their warps.
pub fn synthesize(config: &SynthConfig) -> Result<(Vec<VideoClip>, DatasetSidecar)> {
    config.degradation.validate()?;
    if config.size % 4 != 0 || config.size == 0 {
        return Err(Error::Config(format!(
            "size {} must be a positive multiple of 4",
            config.size
        )));
    }
    let mut clips = Vec::with_capacity(config.clips);
    let mut warps = BTreeMap::new();
    for i in 0..config.clips {
        let clip_id = format!("clip_{i:03}");
        let clip_seed = mix_seed(config.seed, &[i as u64]);
        let texture = procedural_texture(config.size, config.size, clip_seed, config.shapes);
        let warp = WarpSpec::random(config.frames, config.size, config.size, clip_seed);
        let normal = generate_clip(&clip_id, &texture, &warp, config.frames)?;
        let spec = DegradationSpec {
            seed: mix_seed(config.degradation.seed ^ config.seed, &[i as u64, 1]),
            ..config.degradation
        };
        clips.push(degrade(&normal, &spec)?);
        warps.insert(clip_id, warp);
    }
    Ok((
        clips,
        DatasetSidecar {
            degradation: config.degradation,
            warps,
        },
    ))
}

/// Writes a synthetic dataset in the clip-directory layout plus its sidecar.
pub fn write_dataset(config: &SynthConfig, out: &Path) -> Result<(Vec<VideoClip>, DatasetSidecar)> {
    let (clips, sidecar) = synthesize(config)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for clip in &clips {
        save_clip(clip, &out.join(&clip.clip_id))?;
    }
    sidecar.save(out)?;
    Ok((clips, sidecar))
}
