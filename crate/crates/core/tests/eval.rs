mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use vllve::corr::{perturb_maps, CorrespondenceMaps, CorrespondenceProvider, OracleProvider};
use vllve::eval::{
    alignment_error, endpoint_error, evaluate_clip, psnr, ssim, temporal_loss, ClipMetrics,
    Horizon, MetricReport, Psnr,
};
use vllve::synth::{generate_clip, procedural_texture, WarpSpec};
use vllve::videodata::{Frame, VideoClip};
use vllve::{Error, Tensor};

fn frame(px: Tensor<f32>, t: usize) -> Frame {
    Frame::new(px, t).unwrap()
}

/// Static scene: every frame is the same texture, warps are identity.
fn static_clip(n: usize) -> (VideoClip, OracleProvider) {
    let tex = procedural_texture(16, 16, 4, 2);
    let warp = WarpSpec::identity(n, 16, 16);
    let clip = generate_clip("s", &tex, &warp, n).unwrap();
    (
        clip,
        OracleProvider::new(BTreeMap::from([("s".into(), warp)])),
    )
}

fn moving_clip(id: &str, tex: &Frame, warp: &WarpSpec, n: usize) -> (VideoClip, OracleProvider) {
    let clip = generate_clip(id, tex, warp, n).unwrap();
    (
        clip,
        OracleProvider::new(BTreeMap::from([(id.into(), warp.clone())])),
    )
}

fn permute(t: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(3, t.height(), t.width(), |c, y, x| t.at((c + 1) % 3, y, x))
}

#[test]
fn psnr_of_a_uniform_offset() {
    let a = Tensor::<f64>::full(3, 8, 8, 0.4);
    let b = a.map(|v| v + 0.1);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn psnr_of_identical_images_is_the_sentinel() {
    let a: Tensor<f32> = common::uniform(3, 8, 8, 0.0, 1.0, &mut common::rng(1));
    let v = psnr(&a, &a).unwrap();
    assert!(v.is_infinite() && v > 0.0);
    let p = Psnr::from_db(v);
    assert_eq!(
        serde_json::to_string(&p).unwrap(),
        r#"{"db":null,"identical":true}"#
    );
    let back: Psnr = serde_json::from_str(r#"{"db":null,"identical":true}"#).unwrap();
    assert!(back.value().is_infinite());
    let finite = Psnr::from_db(31.5);
    assert_eq!(finite.db, Some(31.5));
    assert!(!finite.identical);
}

#[test]
fn psnr_rejects_shape_mismatch() {
    let a = Tensor::<f64>::zeros(3, 8, 8);
    assert!(psnr(&a, &Tensor::zeros(3, 8, 4)).is_err());
}

#[test]
fn ssim_of_identical_images_is_one() {
    let a: Tensor<f64> = common::uniform(3, 16, 16, 0.0, 1.0, &mut common::rng(2));
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_of_the_negative_matches_the_oracle() {
    let a: Tensor<f64> = common::uniform(3, 16, 16, 0.0, 1.0, &mut common::rng(3));
    let b = a.map(|v| 1.0 - v);
    let s = ssim(&a, &b).unwrap();
    assert!(s < 1.0);
    assert!((s - common::ssim_oracle(&a, &b)).abs() < 1e-5);
}

#[test]
fn ssim_of_constant_frames_is_the_luminance_term() {
    let a = Tensor::<f64>::full(3, 12, 12, 0.3);
    let b = Tensor::<f64>::full(3, 12, 12, 0.4);
    let c1 = 0.01f64.powi(2);
    let expect = (2.0 * 0.3 * 0.4 + c1) / (0.3f64.powi(2) + 0.4f64.powi(2) + c1);
    assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-6);
    assert!((common::ssim_oracle(&a, &b) - expect).abs() < 1e-6);
}

#[test]
fn ssim_needs_the_full_window() {
    let a = Tensor::<f64>::zeros(3, 8, 16);
    assert!(matches!(ssim(&a, &a), Err(Error::Metric(_))));
}

#[test]
fn temporal_loss_is_zero_on_a_static_clip() {
    let (clip, provider) = static_clip(4);
    let gt = clip.normal().unwrap();
    assert!(temporal_loss(gt, &clip, &provider, Horizon::Short).unwrap() < 1e-12);
}

#[test]
fn temporal_loss_of_exact_integer_motion() {
    let tex = procedural_texture(32, 32, 6, 3);
    let (clip, provider) = moving_clip("m", &tex, &WarpSpec::translation(2.0, 1.0, 4, 32, 32), 4);
    let v = temporal_loss(clip.normal().unwrap(), &clip, &provider, Horizon::Short).unwrap();
    assert!(v <= 1e-6, "{v}");
}

#[test]
fn temporal_loss_of_subpixel_motion_on_a_ramp() {
    // Bilinear resampling reproduces a linear ramp exactly.
    let ramp = Tensor::from_fn(3, 16, 32, |c, _, x| 0.1 + 0.02 * x as f32 + 0.05 * c as f32);
    let tex = frame(ramp, 0);
    let (clip, provider) = moving_clip("r", &tex, &WarpSpec::translation(0.5, 0.0, 3, 16, 32), 3);
    let v = temporal_loss(clip.normal().unwrap(), &clip, &provider, Horizon::Short).unwrap();
    assert!(v <= 1e-6, "{v}");
}

#[test]
fn temporal_loss_of_alternating_brightness() {
    let (clip, provider) = static_clip(6);
    let flicker: Vec<Frame> = (0..6)
        .map(|t| {
            let s = if t % 2 == 0 { 0.1 } else { -0.1 };
            frame(Tensor::full(3, 16, 16, 0.5 + s), t)
        })
        .collect();
    let v = temporal_loss(&flicker, &clip, &provider, Horizon::Short).unwrap();
    assert!((v - 0.04).abs() <= 1e-6, "{v}");
}

#[test]
fn temporal_loss_horizons_need_enough_frames() {
    let (clip, provider) = static_clip(8);
    let gt = clip.normal().unwrap();
    assert!(matches!(
        temporal_loss(gt, &clip, &provider, Horizon::Long),
        Err(Error::Metric(_))
    ));
    let (long, provider) = static_clip(12);
    assert!(
        temporal_loss(long.normal().unwrap(), &long, &provider, Horizon::Long).unwrap() < 1e-12
    );
    let (one, provider) = static_clip(2);
    assert!(temporal_loss(&one.normal().unwrap()[..1], &one, &provider, Horizon::Short).is_err());
}

#[test]
fn temporal_loss_skips_occluded_pixels() {
    // Backward map points at the wrong place for half the frame; the
    // round-trip check removes those pixels.
    struct Broken;
    impl CorrespondenceProvider for Broken {
        fn id(&self) -> String {
            "broken".into()
        }
        fn maps(&self, _: &VideoClip, _: usize, _: usize) -> vllve::Result<CorrespondenceMaps> {
            let mut m = CorrespondenceMaps::identity(16, 16);
            for y in 0..16 {
                for x in 0..8 {
                    *m.bwd.at_mut(0, y, x) = 1.0;
                }
            }
            Ok(m)
        }
    }
    let frames: Vec<Frame> = (0..2)
        .map(|t| {
            frame(
                Tensor::from_fn(3, 16, 16, |_, _, x| if x == 15 { 1.0 } else { 0.2 }),
                t,
            )
        })
        .collect();
    let clip = VideoClip::from_normal("b", frames.clone()).unwrap();
    assert!(temporal_loss(&frames, &clip, &Broken, Horizon::Short).unwrap() < 1e-12);
}

#[test]
fn alignment_error_of_identity_is_zero() {
    let (clip, _) = static_clip(4);
    let maps = vec![CorrespondenceMaps::identity(16, 16); 3];
    assert!(alignment_error(clip.normal().unwrap(), &maps).unwrap() < 1e-6);
}

#[test]
fn alignment_error_grows_under_perturbation() {
    let warp = WarpSpec::random(6, 32, 32, 8);
    let (clip, oracle) = moving_clip("a", &procedural_texture(32, 32, 8, 3), &warp, 6);
    let gt = clip.normal().unwrap();
    let exact: Vec<_> = (0..5)
        .map(|t| oracle.maps(&clip, t, t + 1).unwrap())
        .collect();
    let floor = alignment_error(gt, &exact).unwrap();
    let mut noisy_sum = 0.0;
    for seed in 0..10 {
        let noisy: Vec<_> = exact.iter().map(|m| perturb_maps(m, 2.0, seed)).collect();
        noisy_sum += alignment_error(gt, &noisy).unwrap();
    }
    assert!(floor < noisy_sum / 10.0, "{floor} vs {}", noisy_sum / 10.0);
    assert!(floor < 0.05, "{floor}");
}

#[test]
fn alignment_error_without_trajectories_fails() {
    let (clip, _) = static_clip(3);
    let mut m = CorrespondenceMaps::identity(16, 16);
    m.valid_fwd.fill(false);
    let err = alignment_error(clip.normal().unwrap(), &[m.clone(), m]).unwrap_err();
    assert!(err.to_string().contains("no valid trajectories"), "{err}");
    assert!(alignment_error(clip.normal().unwrap(), &[]).is_err());
}

#[test]
fn endpoint_error_in_pixels() {
    let truth = CorrespondenceMaps::identity(8, 8);
    assert_eq!(endpoint_error(&truth, &truth).unwrap(), 0.0);
    let mut shifted = truth.clone();
    // One pixel in x is 2/7 in normalized units on an 8-wide map.
    for v in shifted.fwd.data_mut()[..64].iter_mut() {
        *v = (*v - 2.0 / 7.0).max(-1.0);
    }
    let e = endpoint_error(&shifted, &truth).unwrap();
    // Forward entries move one pixel, except column 0 which clamps.
    assert!((e - 0.5 * 56.0 / 64.0).abs() < 1e-5, "{e}");
}

#[test]
fn clip_evaluation_and_report() {
    let (clip, provider) = static_clip(4);
    let gt = clip.normal().unwrap().to_vec();
    let m = evaluate_clip(&clip, &gt, &provider).unwrap();
    assert!(m.psnr.identical && m.psnr.db.is_none());
    assert!((m.ssim - 1.0).abs() < 1e-9);
    assert!(m.temporal_short.unwrap() < 1e-12);
    assert_eq!(m.temporal_long, None);
    assert!(m.alignment_error.unwrap() < 1e-6);

    let dim: Vec<Frame> = gt
        .iter()
        .map(|f| frame(f.pixels().map(|v| v * 0.5), f.index()))
        .collect();
    let m2 = evaluate_clip(&clip, &dim, &provider).unwrap();
    assert!(m2.psnr.db.unwrap().is_finite());
    let report = MetricReport::new(vec![m.clone(), m2.clone()]).unwrap();
    assert_eq!(report.mean.clips, 2);
    assert!(report.mean.psnr.identical);
    let json = serde_json::to_string(&report).unwrap();
    let back: MetricReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
    assert!(MetricReport::new(Vec::<ClipMetrics>::new()).is_err());
    assert!(evaluate_clip(&clip, &gt[..2], &provider).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn psnr_matches_oracle(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let a: Tensor<f64> = common::uniform(3, 8, 8, 0.0, 1.0, &mut rng);
        let b: Tensor<f64> = common::uniform(3, 8, 8, 0.0, 1.0, &mut rng);
        prop_assert!((psnr(&a, &b).unwrap() - common::psnr_oracle(&a, &b)).abs() < 1e-6);
    }

    #[test]
    fn metrics_are_symmetric_and_channel_blind(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let a: Tensor<f64> = common::uniform(3, 12, 12, 0.0, 1.0, &mut rng);
        let b: Tensor<f64> = common::uniform(3, 12, 12, 0.0, 1.0, &mut rng);
        let p = psnr(&a, &b).unwrap();
        let s = ssim(&a, &b).unwrap();
        prop_assert_eq!(p, psnr(&b, &a).unwrap());
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((p - psnr(&permute(&a), &permute(&b)).unwrap()).abs() < 1e-9);
        prop_assert!((s - ssim(&permute(&a), &permute(&b)).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn ssim_matches_oracle(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let a: Tensor<f64> = common::uniform(3, 12, 13, 0.0, 1.0, &mut rng);
        let b: Tensor<f64> = common::uniform(3, 12, 13, 0.0, 1.0, &mut rng);
        prop_assert!((ssim(&a, &b).unwrap() - common::ssim_oracle(&a, &b)).abs() < 1e-6);
    }
}
