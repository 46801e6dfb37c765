//! Loss terms and the two training objectives, each with analytic gradients.
//!
//! Every function is generic over [`Real`] so the same code runs in `f32`
//! for training and in `f64` for finite-difference checks.
//! Sums are accumulated in `f64` whatever the element type.

use serde::{Deserialize, Serialize};

use crate::corr::{Bilinear, CorrespondenceSet};
use crate::error::{Error, Result};
use crate::net::{TripleGrad, Variant};
use crate::tensor::{Real, Tensor};
use crate::videodata::DecompositionTriple;

/// Offset inside the logarithm of the smoothness weights.
pub const LOG_EPS: f64 = 1e-4;
/// Additive floor of the smoothness weight denominator.
pub const SMOOTH_DELTA: f64 = 1e-4;
/// Exponent applied to the log-gradient magnitude.
pub const SMOOTH_EXPONENT: f64 = 1.2;

fn mean_abs_residual<T: Real>(
    target: &Tensor<T>,
    l: &Tensor<T>,
    r: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<f64> {
    target.ensure_same_shape(l, "reconstruction target/L")?;
    target.ensure_same_shape(r, "reconstruction target/R")?;
    if let Some(b) = b {
        target.ensure_same_shape(b, "reconstruction target/B")?;
    }
    let mut acc = 0.0;
    for i in 0..target.len() {
        let mut pred = l.data()[i] * r.data()[i];
        if let Some(b) = b {
            pred += b.data()[i];
        }
        acc += (target.data()[i] - pred).abs().to_f64();
    }
    Ok(acc / target.len() as f64)
}

/// Mean absolute error between `target` and `L ⊗ R`.
pub fn loss_rec<T: Real>(target: &Tensor<T>, l: &Tensor<T>, r: &Tensor<T>) -> Result<T> {
    mean_abs_residual(target, l, r, None).map(T::from_f64)
}

/// Mean absolute error between `target` and `L ⊗ R + B`.
pub fn loss_rec_prime<T: Real>(
    target: &Tensor<T>,
    l: &Tensor<T>,
    r: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<T> {
    mean_abs_residual(target, l, r, Some(b)).map(T::from_f64)
}

/// Adds `scale · ∂rec/∂(L, R, B)` into `g`; `b = None` is the two-term form.
fn rec_backward<T: Real>(
    target: &Tensor<T>,
    l: &Tensor<T>,
    r: &Tensor<T>,
    b: Option<&Tensor<T>>,
    scale: T,
    g: &mut TripleGrad<T>,
) {
    let k = scale / T::from_f64(target.len() as f64);
    for i in 0..target.len() {
        let mut pred = l.data()[i] * r.data()[i];
        if let Some(b) = b {
            pred += b.data()[i];
        }
        // d|t − p|/dp = −sign(t − p)
        let s = -(target.data()[i] - pred).signum0() * k;
        g.l.data_mut()[i] += s * r.data()[i];
        g.r.data_mut()[i] += s * l.data()[i];
        if b.is_some() {
            if let Some(gb) = g.b.as_mut() {
                gb.data_mut()[i] += s;
            }
        }
    }
}

/// Edge-aware weights for horizontal (`v`) and vertical (`u`) differences,
/// each `H×W`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothWeights<T> {
    pub height: usize,
    pub width: usize,
    pub v: Vec<T>,
    pub u: Vec<T>,
}

/// Weights from the low-light frame: `U = ln(I + ε)`, forward differences
/// (zero on the last column/row), channel-L2 magnitude `g`, weight
/// `1 / (g^1.2 + Δ)`.
pub fn smooth_weights<T: Real>(frame: &Tensor<T>) -> SmoothWeights<T> {
    let (c, h, w) = frame.shape();
    let eps = T::from_f64(LOG_EPS);
    let log = frame.map(|v| (v + eps).ln());
    let (p, delta) = (T::from_f64(SMOOTH_EXPONENT), T::from_f64(SMOOTH_DELTA));
    let mut v = vec![T::ZERO; h * w];
    let mut u = vec![T::ZERO; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (T::ZERO, T::ZERO);
            for ch in 0..c {
                if x + 1 < w {
                    let d = log.at(ch, y, x + 1) - log.at(ch, y, x);
                    gx += d * d;
                }
                if y + 1 < h {
                    let d = log.at(ch, y + 1, x) - log.at(ch, y, x);
                    gy += d * d;
                }
            }
            let weight = |g2: T| {
                T::ONE
                    / (if g2 > T::ZERO {
                        g2.sqrt().powf(p)
                    } else {
                        T::ZERO
                    } + delta)
            };
            v[y * w + x] = weight(gx);
            u[y * w + x] = weight(gy);
        }
    }
    SmoothWeights {
        height: h,
        width: w,
        v,
        u,
    }
}

fn check_weights<T: Real>(x: &Tensor<T>, wts: &SmoothWeights<T>) -> Result<()> {
    if x.height() != wts.height || x.width() != wts.width {
        return Err(Error::Shape(format!(
            "smoothness weights are {}x{}, array is {}x{}",
            wts.height,
            wts.width,
            x.height(),
            x.width()
        )));
    }
    Ok(())
}

/// Mean over pixels of `Σ_c v·(∂x X)² + u·(∂y X)²`.
pub fn loss_smooth<T: Real>(x: &Tensor<T>, wts: &SmoothWeights<T>) -> Result<T> {
    smooth_value(x, wts).map(T::from_f64)
}

fn smooth_value<T: Real>(x: &Tensor<T>, wts: &SmoothWeights<T>) -> Result<f64> {
    check_weights(x, wts)?;
    let (c, h, w) = x.shape();
    let mut acc = 0.0;
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                let i = yy * w + xx;
                if xx + 1 < w {
                    let d = x.at(ch, yy, xx + 1) - x.at(ch, yy, xx);
                    acc += (wts.v[i] * d * d).to_f64();
                }
                if yy + 1 < h {
                    let d = x.at(ch, yy + 1, xx) - x.at(ch, yy, xx);
                    acc += (wts.u[i] * d * d).to_f64();
                }
            }
        }
    }
    Ok(acc / (h * w) as f64)
}

fn smooth_backward<T: Real>(x: &Tensor<T>, wts: &SmoothWeights<T>, scale: T, grad: &mut Tensor<T>) {
    let (c, h, w) = x.shape();
    let k = T::from_f64(2.0) * scale / T::from_f64((h * w) as f64);
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                let i = yy * w + xx;
                if xx + 1 < w {
                    let g = k * wts.v[i] * (x.at(ch, yy, xx + 1) - x.at(ch, yy, xx));
                    *grad.at_mut(ch, yy, xx + 1) += g;
                    *grad.at_mut(ch, yy, xx) -= g;
                }
                if yy + 1 < h {
                    let g = k * wts.u[i] * (x.at(ch, yy + 1, xx) - x.at(ch, yy, xx));
                    *grad.at_mut(ch, yy + 1, xx) += g;
                    *grad.at_mut(ch, yy, xx) -= g;
                }
            }
        }
    }
}

/// Value and gradients of the weighted correspondence L1 term.
#[derive(Clone, Debug)]
pub struct CorrGrad<T> {
    pub value: f64,
    pub dr1: Tensor<T>,
    pub dr2: Tensor<T>,
    /// `[∂x1, ∂y1, ∂x2, ∂y2]` per entry.
    pub dcoords: Vec<[T; 4]>,
}

/// `(1/M) Σ_m u_m ‖R1(x1, y1) − R2(x2, y2)‖₁` with gradients for both arrays
/// and all four coordinates; an empty set gives zero.
pub fn corr_grad<T: Real>(
    r1: &Tensor<T>,
    r2: &Tensor<T>,
    set: &CorrespondenceSet,
) -> Result<CorrGrad<T>> {
    r1.ensure_same_shape(r2, "correspondence arrays")?;
    let (c, h, w) = r1.shape();
    let mut out = CorrGrad {
        value: 0.0,
        dr1: Tensor::zeros(c, h, w),
        dr2: Tensor::zeros(c, h, w),
        dcoords: vec![[T::ZERO; 4]; set.len()],
    };
    if set.is_empty() {
        return Ok(out);
    }
    let m = T::from_f64(set.len() as f64);
    let mut acc = 0.0;
    for (k, e) in set.entries.iter().enumerate() {
        let b1 = Bilinear::locate(w, h, T::from_f64(e.x1), T::from_f64(e.y1))?;
        let b2 = Bilinear::locate(w, h, T::from_f64(e.x2), T::from_f64(e.y2))?;
        let u = T::from_f64(e.u);
        for ch in 0..c {
            let diff = b1.sample(r1, ch) - b2.sample(r2, ch);
            acc += (u * diff.abs()).to_f64();
            let s = u * diff.signum0() / m;
            b1.scatter(&mut out.dr1, ch, s);
            b2.scatter(&mut out.dr2, ch, -s);
            let (gx1, gy1) = b1.grad_xy(r1, ch);
            let (gx2, gy2) = b2.grad_xy(r2, ch);
            let d = &mut out.dcoords[k];
            d[0] += s * gx1;
            d[1] += s * gy1;
            d[2] -= s * gx2;
            d[3] -= s * gy2;
        }
    }
    out.value = acc / set.len() as f64;
    Ok(out)
}

/// Correspondence consistency of the view-independent arrays.
pub fn loss_corr_r<T: Real>(r1: &Tensor<T>, r2: &Tensor<T>, set: &CorrespondenceSet) -> Result<T> {
    Ok(T::from_f64(corr_grad(r1, r2, set)?.value))
}

/// Refinement-network loss: arrays are constants, gradients reach only the
/// coordinates. Returns the value and `[∂x1, ∂y1, ∂x2, ∂y2]` per entry.
pub fn loss_corr_crn<T: Real>(
    r1: &Tensor<T>,
    r2: &Tensor<T>,
    refined: &CorrespondenceSet,
) -> Result<(T, Vec<[T; 4]>)> {
    let g = corr_grad(r1, r2, refined)?;
    Ok((T::from_f64(g.value), g.dcoords))
}

/// Feedback loss: coordinates are constants, gradients reach only the
/// arrays. Returns the value and `(∂R1, ∂R2)`.
pub fn loss_corr_feedback<T: Real>(
    r1: &Tensor<T>,
    r2: &Tensor<T>,
    refined: &CorrespondenceSet,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    let g = corr_grad(r1, r2, refined)?;
    Ok((T::from_f64(g.value), g.dr1, g.dr2))
}

/// Term weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

/// Which terms participate; a disabled term reports 0 and sends no gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Terms {
    pub rec: bool,
    pub rec_prime: bool,
    pub smooth_l: bool,
    pub smooth_b: bool,
    pub corr_r: bool,
    /// Refinement-network term (coordinates only).
    pub corr_crn: bool,
    /// Feedback term (arrays only).
    pub corr_feedback: bool,
}

impl Default for Terms {
    fn default() -> Self {
        Self::all()
    }
}

impl Terms {
    pub fn all() -> Self {
        Self {
            rec: true,
            rec_prime: true,
            smooth_l: true,
            smooth_b: true,
            corr_r: true,
            corr_crn: true,
            corr_feedback: true,
        }
    }

    pub fn none() -> Self {
        Self {
            rec: false,
            rec_prime: false,
            smooth_l: false,
            smooth_b: false,
            corr_r: false,
            corr_crn: false,
            corr_feedback: false,
        }
    }

    /// Whether any enabled term sends gradient into the decomposition network.
    pub fn drives_decomposer(&self) -> bool {
        self.rec
            || self.rec_prime
            || self.smooth_l
            || self.smooth_b
            || self.corr_r
            || self.corr_feedback
    }
}

/// Per-term values of one objective evaluation, each summed over both frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec: f64,
    pub rec_prime: f64,
    pub smooth_l: f64,
    pub smooth_b: f64,
    pub corr_r: f64,
    /// Refinement-network term.
    pub corr_r_prime: f64,
    /// Feedback term.
    pub corr_r_dblprime: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub total: f64,
}

impl LossReport {
    /// The objective's weighted sum recomputed from the reported terms.
    pub fn weighted_total(&self, variant: Variant) -> f64 {
        match variant {
            Variant::Vllve => self.rec + self.lambda1 * self.smooth_l + self.lambda2 * self.corr_r,
            Variant::Vllvepp => {
                self.rec
                    + self.rec_prime
                    + self.lambda1 * self.smooth_l
                    + self.lambda2 * (self.corr_r + self.corr_r_prime + self.corr_r_dblprime)
                    + self.lambda3 * self.smooth_b
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.rec,
            self.rec_prime,
            self.smooth_l,
            self.smooth_b,
            self.corr_r,
            self.corr_r_prime,
            self.corr_r_dblprime,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Elementwise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.rec += r.rec / n;
            m.rec_prime += r.rec_prime / n;
            m.smooth_l += r.smooth_l / n;
            m.smooth_b += r.smooth_b / n;
            m.corr_r += r.corr_r / n;
            m.corr_r_prime += r.corr_r_prime / n;
            m.corr_r_dblprime += r.corr_r_dblprime / n;
            m.total += r.total / n;
        }
        if let Some(r) = reports.first() {
            (m.lambda1, m.lambda2, m.lambda3) = (r.lambda1, r.lambda2, r.lambda3);
        }
        m
    }
}

/// Everything an objective needs about one frame of the pair.
#[derive(Clone, Copy, Debug)]
pub struct FrameTerms<'a, T: Real> {
    /// Low-light input (source of the smoothness weights).
    pub low: &'a Tensor<T>,
    /// Normal-light reconstruction target.
    pub normal: &'a Tensor<T>,
    pub out: &'a DecompositionTriple<T>,
}

fn frame_terms<T: Real>(
    f: &FrameTerms<'_, T>,
    variant: Variant,
    lam: &Lambdas,
    terms: &Terms,
    g: &mut TripleGrad<T>,
    report: &mut LossReport,
) -> Result<()> {
    let (l, r, b) = (&f.out.l, &f.out.r, &f.out.b);
    if terms.rec {
        report.rec += mean_abs_residual(f.normal, l, r, None)?;
        rec_backward(f.normal, l, r, None, T::ONE, g);
    }
    let wts = smooth_weights(f.low);
    if terms.smooth_l {
        report.smooth_l += smooth_value(l, &wts)?;
        smooth_backward(l, &wts, T::from_f64(lam.lambda1), &mut g.l);
    }
    if variant == Variant::Vllvepp {
        if terms.rec_prime {
            report.rec_prime += mean_abs_residual(f.normal, l, r, Some(b))?;
            rec_backward(f.normal, l, r, Some(b), T::ONE, g);
        }
        if terms.smooth_b {
            report.smooth_b += smooth_value(b, &wts)?;
            if let Some(gb) = g.b.as_mut() {
                smooth_backward(b, &wts, T::from_f64(lam.lambda3), gb);
            }
        }
    }
    Ok(())
}

fn add_corr<T: Real>(c: &CorrGrad<T>, scale: T, g1: &mut TripleGrad<T>, g2: &mut TripleGrad<T>) {
    for (dst, src) in [(&mut g1.r, &c.dr1), (&mut g2.r, &c.dr2)] {
        dst.data_mut()
            .iter_mut()
            .zip(src.data())
            .for_each(|(a, &b)| *a += scale * b);
    }
}

fn grads_for<T: Real>(frames: &[FrameTerms<'_, T>; 2], with_b: bool) -> [TripleGrad<T>; 2] {
    frames.map(|f| {
        let (c, h, w) = f.out.l.shape();
        TripleGrad::zeros(c, h, w, with_b)
    })
}

/// Two-frame objective: `rec + λ1·smooth_L + λ2·corr_R`, terms summed over
/// the pair. Returns the report and gradients for each frame's outputs.
pub fn objective_vllve<T: Real>(
    frames: [FrameTerms<'_, T>; 2],
    set: &CorrespondenceSet,
    lam: &Lambdas,
    terms: &Terms,
) -> Result<(LossReport, [TripleGrad<T>; 2])> {
    let mut report = LossReport {
        lambda1: lam.lambda1,
        lambda2: lam.lambda2,
        lambda3: lam.lambda3,
        ..Default::default()
    };
    let mut grads = grads_for(&frames, false);
    for (f, g) in frames.iter().zip(grads.iter_mut()) {
        frame_terms(f, Variant::Vllve, lam, terms, g, &mut report)?;
    }
    if terms.corr_r {
        let c = corr_grad(&frames[0].out.r, &frames[1].out.r, set)?;
        report.corr_r = c.value;
        let [g1, g2] = &mut grads;
        add_corr(&c, T::from_f64(lam.lambda2), g1, g2);
    }
    report.total = report.weighted_total(Variant::Vllve);
    Ok((report, grads))
}

/// Output of [`objective_vllvepp`].
#[derive(Clone, Debug)]
pub struct VllveppGrads<T> {
    /// Gradients for the decomposition network's outputs (every term but
    /// the refinement-network term).
    pub frames: [TripleGrad<T>; 2],
    /// Gradients of the refinement-network term only, per refined entry.
    pub refined_coords: Vec<[T; 4]>,
}

/// Full objective: `rec + rec′ + λ1·smooth_L + λ2·(corr_R + corr_R′ +
/// corr_R″) + λ3·smooth_B`. `corr_R′` (refinement) only produces coordinate
/// gradients and `corr_R″` (feedback) only array gradients.
pub fn objective_vllvepp<T: Real>(
    frames: [FrameTerms<'_, T>; 2],
    unrefined: &CorrespondenceSet,
    refined: &CorrespondenceSet,
    lam: &Lambdas,
    terms: &Terms,
) -> Result<(LossReport, VllveppGrads<T>)> {
    let mut report = LossReport {
        lambda1: lam.lambda1,
        lambda2: lam.lambda2,
        lambda3: lam.lambda3,
        ..Default::default()
    };
    let mut grads = grads_for(&frames, true);
    for (f, g) in frames.iter().zip(grads.iter_mut()) {
        frame_terms(f, Variant::Vllvepp, lam, terms, g, &mut report)?;
    }
    let (r1, r2) = (&frames[0].out.r, &frames[1].out.r);
    let lam2 = T::from_f64(lam.lambda2);
    if terms.corr_r {
        let c = corr_grad(r1, r2, unrefined)?;
        report.corr_r = c.value;
        let [g1, g2] = &mut grads;
        add_corr(&c, lam2, g1, g2);
    }
    let mut refined_coords = vec![[T::ZERO; 4]; refined.len()];
    if terms.corr_crn || terms.corr_feedback {
        let c = corr_grad(r1, r2, refined)?;
        if terms.corr_crn {
            report.corr_r_prime = c.value;
            for (dst, src) in refined_coords.iter_mut().zip(&c.dcoords) {
                for k in 0..4 {
                    dst[k] = lam2 * src[k];
                }
            }
        }
        if terms.corr_feedback {
            report.corr_r_dblprime = c.value;
            let [g1, g2] = &mut grads;
            add_corr(&c, lam2, g1, g2);
        }
    }
    report.total = report.weighted_total(Variant::Vllvepp);
    Ok((
        report,
        VllveppGrads {
            frames: grads,
            refined_coords,
        },
    ))
}
