//! Scalar-loop oracles and shared fixtures for the integration tests and the
//! acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vllve::corr::{Correspondence, CorrespondenceSet};
use vllve::loss::{
    corr_grad, loss_corr_crn, objective_vllve, objective_vllvepp, FrameTerms, Lambdas, Terms,
};
use vllve::net::TripleGrad;
use vllve::videodata::DecompositionTriple;
use vllve::{Real, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Real>(
    c: usize,
    h: usize,
    w: usize,
    lo: f64,
    hi: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    Tensor::from_fn(c, h, w, |_, _, _| T::from_f64(rng.random_range(lo..hi)))
}

// ---------------------------------------------------------------- oracles

pub fn rec_oracle(
    target: &Tensor<f64>,
    l: &Tensor<f64>,
    r: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
) -> f64 {
    let (c, h, w) = target.shape();
    let mut s = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let bb = b.map_or(0.0, |b| b.at(ch, y, x));
                s += (target.at(ch, y, x) - (l.at(ch, y, x) * r.at(ch, y, x) + bb)).abs();
            }
        }
    }
    s / (c * h * w) as f64
}

/// `(v, u)` row-major.
pub fn smooth_weights_oracle(frame: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = frame.shape();
    let lg = |ch, y, x| (frame.at(ch, y, x) + 1e-4).ln();
    let mut v = Vec::new();
    let mut u = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut gx2 = 0.0;
            let mut gy2 = 0.0;
            for ch in 0..c {
                if x + 1 < w {
                    gx2 += (lg(ch, y, x + 1) - lg(ch, y, x)).powi(2);
                }
                if y + 1 < h {
                    gy2 += (lg(ch, y + 1, x) - lg(ch, y, x)).powi(2);
                }
            }
            v.push(1.0 / (gx2.sqrt().powf(1.2) + 1e-4));
            u.push(1.0 / (gy2.sqrt().powf(1.2) + 1e-4));
        }
    }
    (v, u)
}

pub fn smooth_oracle(x: &Tensor<f64>, frame: &Tensor<f64>) -> f64 {
    let (v, u) = smooth_weights_oracle(frame);
    let (c, h, w) = x.shape();
    let mut s = 0.0;
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let dx = if xx + 1 < w {
                    x.at(ch, y, xx + 1) - x.at(ch, y, xx)
                } else {
                    0.0
                };
                let dy = if y + 1 < h {
                    x.at(ch, y + 1, xx) - x.at(ch, y, xx)
                } else {
                    0.0
                };
                s += v[y * w + xx] * dx * dx + u[y * w + xx] * dy * dy;
            }
        }
    }
    s / (h * w) as f64
}

pub fn bilinear_oracle(img: &Tensor<f64>, ch: usize, x: f64, y: f64) -> f64 {
    let (_, h, w) = img.shape();
    let x0 = (x.floor() as usize).min(w - 2);
    let y0 = (y.floor() as usize).min(h - 2);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    img.at(ch, y0, x0) * (1.0 - fx) * (1.0 - fy)
        + img.at(ch, y0, x0 + 1) * fx * (1.0 - fy)
        + img.at(ch, y0 + 1, x0) * (1.0 - fx) * fy
        + img.at(ch, y0 + 1, x0 + 1) * fx * fy
}

pub fn corr_oracle(r1: &Tensor<f64>, r2: &Tensor<f64>, set: &CorrespondenceSet) -> f64 {
    if set.entries.is_empty() {
        return 0.0;
    }
    let c = r1.channels();
    let mut s = 0.0;
    for e in &set.entries {
        let mut l1 = 0.0;
        for ch in 0..c {
            l1 += (bilinear_oracle(r1, ch, e.x1, e.y1) - bilinear_oracle(r2, ch, e.x2, e.y2)).abs();
        }
        s += e.u * l1;
    }
    s / set.entries.len() as f64
}

pub fn psnr_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        se += (a.data()[i] - b.data()[i]).powi(2);
    }
    10.0 * (1.0 / (se / a.len() as f64)).log10()
}

/// Direct 11×11 windowed sums, no separability.
pub fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let g: Vec<f64> = (0..11)
        .map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp())
        .collect();
    let gs: f64 = g.iter().sum();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (ch, h, w) = a.shape();
    let mut total = 0.0;
    let mut n = 0;
    for k in 0..ch {
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i] * g[j] / (gs * gs);
                        let (va, vb) = (a.at(k, y + i, x + j), b.at(k, y + i, x + j));
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
    }
    total / n as f64
}

// ---------------------------------------------------------- gradient suite

/// One term of the loss module and the worst relative deviation between its
/// analytic gradient and central finite differences.
#[derive(Debug)]
pub struct GradCheck {
    pub term: &'static str,
    pub worst_rel: f64,
    pub checked: usize,
}

/// An 8×8 instance with every L1 argument kept at least 0.05 away from zero
/// and every sampled coordinate away from integer grid lines, so that
/// steps of `h` never cross a kink.
pub struct GradInstance<T: Real> {
    pub low: [Tensor<T>; 2],
    pub normal: [Tensor<T>; 2],
    pub outs: [DecompositionTriple<T>; 2],
    pub set: CorrespondenceSet,
}

fn frac_coord(rng: &mut ChaCha8Rng, extent: usize) -> f64 {
    rng.random_range(0..extent - 1) as f64 + rng.random_range(0.2..0.8)
}

pub fn grad_instance<T: Real>(seed: u64) -> GradInstance<T> {
    let (c, h, w) = (3, 8, 8);
    for attempt in 0.. {
        let mut rng = rng(seed.wrapping_mul(1000).wrapping_add(attempt));
        let mut triple = || {
            let l = uniform::<f64>(c, h, w, 0.2, 0.9, &mut rng);
            let r = uniform::<f64>(c, h, w, 0.2, 0.9, &mut rng);
            let b = Tensor::from_fn(c, h, w, |_, _, _| {
                let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                s * rng.random_range(0.1..0.2)
            });
            (l, r, b)
        };
        let t1 = triple();
        let t2 = triple();
        let mut normal_of = |(l, r, _): &(Tensor<f64>, Tensor<f64>, Tensor<f64>)| {
            let mut n = l.clone();
            for i in 0..n.len() {
                let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                n.data_mut()[i] = l.data()[i] * r.data()[i] + s * rng.random_range(0.3..0.4);
            }
            n
        };
        let n1 = normal_of(&t1);
        let n2 = normal_of(&t2);
        let low1 = uniform::<f64>(c, h, w, 0.05, 0.95, &mut rng);
        let low2 = uniform::<f64>(c, h, w, 0.05, 0.95, &mut rng);
        let entries: Vec<Correspondence> = (0..6)
            .map(|_| Correspondence {
                x1: frac_coord(&mut rng, w),
                y1: frac_coord(&mut rng, h),
                x2: frac_coord(&mut rng, w),
                y2: frac_coord(&mut rng, h),
                u: rng.random_range(0.3..1.0),
            })
            .collect();
        let ok = entries.iter().all(|e| {
            (0..c).all(|ch| {
                (bilinear_oracle(&t1.1, ch, e.x1, e.y1) - bilinear_oracle(&t2.1, ch, e.x2, e.y2))
                    .abs()
                    > 0.05
            })
        });
        if !ok {
            continue;
        }
        let cast = |t: &Tensor<f64>| -> Tensor<T> { t.cast() };
        let mk = |t: &(Tensor<f64>, Tensor<f64>, Tensor<f64>)| {
            DecompositionTriple::new(cast(&t.0), cast(&t.1), cast(&t.2)).unwrap()
        };
        return GradInstance {
            low: [cast(&low1), cast(&low2)],
            normal: [cast(&n1), cast(&n2)],
            outs: [mk(&t1), mk(&t2)],
            set: CorrespondenceSet::new(0, 1, w, h, entries).unwrap(),
        };
    }
    unreachable!()
}

fn only(term: &str) -> Terms {
    let mut t = Terms::none();
    match term {
        "rec" => t.rec = true,
        "rec_prime" => t.rec_prime = true,
        "smooth_l" => t.smooth_l = true,
        "smooth_b" => t.smooth_b = true,
        "corr_r" => t.corr_r = true,
        "corr_feedback" => t.corr_feedback = true,
        "corr_crn" => t.corr_crn = true,
        _ => unreachable!(),
    }
    t
}

/// Value and per-frame gradients of one objective term.
fn term_eval<T: Real>(
    inst: &GradInstance<T>,
    outs: &[DecompositionTriple<T>; 2],
    term: &str,
) -> (f64, [TripleGrad<T>; 2]) {
    let lam = Lambdas::default();
    let frames = [0, 1].map(|i| FrameTerms {
        low: &inst.low[i],
        normal: &inst.normal[i],
        out: &outs[i],
    });
    match term {
        "rec" | "smooth_l" | "corr_r" => {
            let (r, g) = objective_vllve(frames, &inst.set, &lam, &only(term)).unwrap();
            (r.total, g)
        }
        _ => {
            let (r, g) =
                objective_vllvepp(frames, &inst.set, &inst.set, &lam, &only(term)).unwrap();
            (r.total, g.frames)
        }
    }
}

fn rel_err(fd: f64, an: f64, floor: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(floor)
}

/// Central differences on every array element and every refined coordinate.
/// Relative errors are taken against `max(|fd|, |analytic|, 1e-3·max|analytic|)`
/// per array so that elements whose gradient nearly cancels do not divide by
/// zero.
pub fn gradient_suite<T: Real>(h: f64, seed: u64) -> Vec<GradCheck> {
    let inst = grad_instance::<T>(seed);
    let mut out = Vec::new();
    for term in [
        "rec",
        "rec_prime",
        "smooth_l",
        "smooth_b",
        "corr_r",
        "corr_feedback",
    ] {
        let (_, grads) = term_eval(&inst, &inst.outs, term);
        let mut worst = 0.0f64;
        let mut checked = 0;
        for frame in 0..2 {
            for comp in 0..3 {
                let an: Option<&Tensor<T>> = match comp {
                    0 => Some(&grads[frame].l),
                    1 => Some(&grads[frame].r),
                    _ => grads[frame].b.as_ref(),
                };
                let scale = an.map_or(0.0, |g| {
                    g.data().iter().fold(0.0f64, |m, v| m.max(v.to_f64().abs()))
                });
                let n = inst.outs[frame].l.len();
                for i in 0..n {
                    let eval = |delta: f64| {
                        let mut outs = inst.outs.clone();
                        let t = &mut outs[frame];
                        let arr = match comp {
                            0 => &mut t.l,
                            1 => &mut t.r,
                            _ => &mut t.b,
                        };
                        let old = arr.data()[i];
                        let new = old + T::from_f64(delta);
                        arr.data_mut()[i] = new;
                        let actual = (new - old).to_f64();
                        (term_eval(&inst, &outs, term).0, actual)
                    };
                    let ((fp, hp), (fm, hm)) = (eval(h), eval(-h));
                    let fd = (fp - fm) / (hp - hm);
                    let a = an.map_or(0.0, |g| g.data()[i].to_f64());
                    worst = worst.max(rel_err(fd, a, (1e-3 * scale).max(1e-12)));
                    checked += 1;
                }
            }
        }
        out.push(GradCheck {
            term,
            worst_rel: worst,
            checked,
        });
    }

    // refinement term: gradients reach only the coordinates
    let (r1, r2) = (&inst.outs[0].r, &inst.outs[1].r);
    let (_, dcoords) = loss_corr_crn(r1, r2, &inst.set).unwrap();
    let scale = dcoords
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.to_f64().abs()));
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, d) in dcoords.iter().enumerate() {
        for (j, an) in d.iter().enumerate() {
            let eval = |delta: f64| {
                let mut set = inst.set.clone();
                let e = &mut set.entries[k];
                let coord = match j {
                    0 => &mut e.x1,
                    1 => &mut e.y1,
                    2 => &mut e.x2,
                    _ => &mut e.y2,
                };
                let old = *coord;
                let new = T::from_f64(old + delta).to_f64();
                *coord = new;
                (
                    corr_grad(r1, r2, &set).unwrap().value,
                    new - T::from_f64(old).to_f64(),
                )
            };
            let ((fp, hp), (fm, hm)) = (eval(h), eval(-h));
            let fd = (fp - fm) / (hp - hm);
            worst = worst.max(rel_err(fd, an.to_f64(), (1e-3 * scale).max(1e-12)));
            checked += 1;
        }
    }
    out.push(GradCheck {
        term: "corr_crn",
        worst_rel: worst,
        checked,
    });
    out
}
