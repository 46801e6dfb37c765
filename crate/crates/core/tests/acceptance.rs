//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. The training criteria run full-length toy trainings and take
//! the better part of an hour on one core.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use vllve::corr::{
    perturb_maps, Correspondence, CorrespondenceProvider, CorrespondenceSet, OracleProvider,
};
use vllve::eval::{
    endpoint_error, evaluate_clip, psnr, ssim, temporal_loss, Horizon, MetricReport,
};
use vllve::loss::{loss_corr_r, loss_rec, loss_rec_prime, loss_smooth, smooth_weights, Terms};
use vllve::net::{Checkpoint, ModelState, Variant};
use vllve::synth::{generate_clip, procedural_texture, synthesize, SynthConfig, WarpSpec};
use vllve::train::{
    build_provider, infer, pair_seed, refine_maps, train_vllve, train_vllvepp, MapCache,
    RunOptions, TrainConfig, Trainer,
};
use vllve::videodata::{Frame, VideoClip};
use vllve::Tensor;

const GRAD_TOL_F64: f64 = 1e-4;
const GRAD_TOL_F32: f64 = 1e-2;
const GRAD_BUDGET_S: f64 = 60.0;
const HYGIENE_BUDGET_S: f64 = 30.0;
const REC_TOL: f64 = 1e-7;
const WEIGHT_REL_TOL: f64 = 1e-6;
const SMOOTH_REL_TOL: f64 = 1e-6;
const CORR_TOL: f64 = 1e-7;
const PSNR_TOL_DB: f64 = 1e-6;
const SSIM_TOL: f64 = 1e-5;
const TEMPORAL_TOL: f64 = 1e-6;
const TOY_STEPS: u64 = 2000;
const TOY_MARGIN_DB: f64 = 3.0;
const ROBUST_MARGIN_DB: f64 = 2.0;
const TOY_BUDGET_S: f64 = 30.0 * 60.0;
const PERTURB_SIGMA: f64 = 2.0;
const KEEP_FRACTION: f64 = 0.1;
const EPE_SEEDS: u64 = 3;
const GRAD_CLIP: f64 = 10.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ------------------------------------------------------------ fixtures

struct Small {
    clips: Vec<VideoClip>,
    warps: BTreeMap<String, WarpSpec>,
}

fn small() -> Small {
    let (clips, sidecar) = synthesize(&SynthConfig {
        clips: 2,
        frames: 4,
        size: 16,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    Small {
        clips,
        warps: sidecar.warps,
    }
}

fn small_config(variant: Variant, t_max: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        variant,
        t_max,
        batch_size: 2,
        t_neighbor: 2,
        grad_clip: Some(GRAD_CLIP),
        ..TrainConfig::default()
    };
    cfg.provider.count = 64;
    cfg
}

fn small_pretrained(fx: &Small) -> ModelState<f32> {
    let cfg = small_config(Variant::Vllve, 2);
    let provider = build_provider(&cfg.provider, Some(&fx.warps)).unwrap();
    train_vllve(&cfg, &fx.clips, provider, RunOptions::default())
        .unwrap()
        .model
}

fn small_vllvepp_trainer<'a>(fx: &'a Small, base: &ModelState<f32>, terms: Terms) -> Trainer<'a> {
    let mut cfg = small_config(Variant::Vllvepp, 1);
    cfg.provider.perturb_sigma = PERTURB_SIGMA;
    let cache = std::sync::Arc::new(MapCache::new(
        build_provider(&cfg.provider, Some(&fx.warps)).unwrap(),
    ));
    let model = ModelState::vllvepp_from(base, cfg.init_seed).unwrap();
    Trainer::new(cfg, &fx.clips, cache, model)
        .unwrap()
        .with_terms(terms)
}

/// The 20-clip training set, and a disjoint held-out set from another seed.
struct Toy {
    train: Vec<VideoClip>,
    train_warps: BTreeMap<String, WarpSpec>,
    held: Vec<VideoClip>,
    held_oracle: OracleProvider,
}

fn toy() -> Toy {
    let (train, side) = synthesize(&SynthConfig::default()).unwrap();
    let (held, held_side) = synthesize(&SynthConfig {
        clips: 4,
        seed: 1007,
        ..SynthConfig::default()
    })
    .unwrap();
    Toy {
        train,
        train_warps: side.warps,
        held,
        held_oracle: OracleProvider::new(held_side.warps),
    }
}

fn toy_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        t_max: TOY_STEPS,
        batch_size: 1,
        grad_clip: Some(GRAD_CLIP),
        ..TrainConfig::default()
    }
}

fn held_out(toy: &Toy, model: &ModelState<f32>) -> MetricReport {
    let per_clip = toy
        .held
        .iter()
        .map(|clip| {
            let enhanced = infer(model, clip).unwrap();
            evaluate_clip(clip, &enhanced.frames, &toy.held_oracle).unwrap()
        })
        .collect();
    MetricReport::new(per_clip).unwrap()
}

fn train_toy_vllve(toy: &Toy, cfg: &TrainConfig) -> (ModelState<f32>, f64) {
    let start = Instant::now();
    let provider = build_provider(&cfg.provider, Some(&toy.train_warps)).unwrap();
    let out = train_vllve(cfg, &toy.train, provider, RunOptions::default()).unwrap();
    (out.model, start.elapsed().as_secs_f64())
}

// ------------------------------------------------------------ criteria

fn c1_scope_statement() -> Outcome {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md");
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let ok = text.contains("## Scope") && text.contains("not reproduced");
    outcome(
        ok,
        "README states that full-benchmark figures are not reproduced at desk scale",
    )
}

fn c2_gradient_suite() -> Outcome {
    let start = Instant::now();
    let wide = gradient_suite::<f64>(1e-6, 1);
    let narrow = gradient_suite::<f32>(1e-3, 2);
    let secs = start.elapsed().as_secs_f64();
    let worst = |s: &[GradCheck]| s.iter().map(|c| c.worst_rel).fold(0.0, f64::max);
    let (w64, w32) = (worst(&wide), worst(&narrow));
    let covered = wide.iter().all(|c| c.checked > 0) && narrow.iter().all(|c| c.checked > 0);
    outcome(
        covered && w64 < GRAD_TOL_F64 && w32 < GRAD_TOL_F32 && secs < GRAD_BUDGET_S,
        format!(
            "{} terms; worst rel 64-bit {w64:.2e} (< {GRAD_TOL_F64:e}), 32-bit {w32:.2e} (< {GRAD_TOL_F32:e}); {secs:.1} s",
            wide.len()
        ),
    )
}

fn c3_stop_gradient() -> Outcome {
    let start = Instant::now();
    let fx = small();
    let base = small_pretrained(&fx);
    let mut crn_only = small_vllvepp_trainer(
        &fx,
        &base,
        Terms {
            corr_crn: true,
            ..Terms::none()
        },
    );
    let (g0, h0) = (
        crn_only.model().g_hash(),
        crn_only.model().crn_hash().unwrap(),
    );
    crn_only.step().unwrap();
    let g_kept = crn_only.model().g_hash() == g0;
    let h_moved = crn_only.model().crn_hash().unwrap() != h0;

    let mut feedback_only = small_vllvepp_trainer(
        &fx,
        &base,
        Terms {
            corr_feedback: true,
            ..Terms::none()
        },
    );
    let (g0, h0) = (
        feedback_only.model().g_hash(),
        feedback_only.model().crn_hash().unwrap(),
    );
    feedback_only.step().unwrap();
    let h_kept = feedback_only.model().crn_hash().unwrap() == h0;
    let g_moved = feedback_only.model().g_hash() != g0;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        g_kept && h_kept && h_moved && g_moved && secs < HYGIENE_BUDGET_S,
        format!(
            "refinement step: decomposer hash unchanged {g_kept}, refinement hash changed {h_moved}; \
             feedback step: refinement hash unchanged {h_kept}, decomposer hash changed {g_moved}; {secs:.1} s"
        ),
    )
}

fn c4_initialization() -> Outcome {
    let start = Instant::now();
    let fx = small();
    let base = small_pretrained(&fx);
    let ck = Checkpoint::from_model(&base, 2, serde_json::Value::Null);
    let vllve = ck.to_model::<f32>().unwrap();
    let pp = ModelState::vllvepp_from(&ck.to_model_of::<f32>(Variant::Vllve).unwrap(), 0).unwrap();
    let oracle = OracleProvider::new(fx.warps.clone());
    let (mut b_zero, mut delta_zero, mut frames_equal) = (true, true, true);
    for clip in &fx.clips {
        let a = infer(&vllve, clip).unwrap();
        let b = infer(&pp, clip).unwrap();
        frames_equal &= a.frames == b.frames;
        b_zero &= b
            .triples
            .iter()
            .all(|t| t.b.data().iter().all(|&v| v == 0.0));
        let normal = clip.normal().unwrap();
        for t in 0..clip.frame_count() - 1 {
            let maps = oracle.maps(clip, t, t + 1).unwrap();
            let (df, db) = pp
                .crn_forward(normal[t].pixels(), normal[t + 1].pixels(), &maps)
                .unwrap();
            delta_zero &= df.data().iter().chain(db.data()).all(|&v| v == 0.0);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        b_zero && delta_zero && frames_equal && secs < HYGIENE_BUDGET_S,
        format!(
            "B exactly 0 {b_zero}, refinement residuals exactly 0 {delta_zero}, \
             enhanced frames bit-equal {frames_equal}; {secs:.1} s"
        ),
    )
}

fn c5_oracles() -> Outcome {
    let mut g = rng(2024);
    let mut worst = BTreeMap::<&str, f64>::new();
    let mut note = |name, err: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(err);
    };
    for _ in 0..100 {
        let h = rand::Rng::random_range(&mut g, 4..=8);
        let w = rand::Rng::random_range(&mut g, 4..=8);
        let l = uniform::<f64>(3, h, w, 0.0, 1.0, &mut g);
        let r = uniform::<f64>(3, h, w, 0.0, 1.0, &mut g);
        let b = uniform::<f64>(3, h, w, -0.2, 0.2, &mut g);
        let t = uniform::<f64>(3, h, w, 0.0, 1.0, &mut g);
        note(
            "loss_rec",
            (loss_rec(&t, &l, &r).unwrap() - rec_oracle(&t, &l, &r, None)).abs() / REC_TOL,
        );
        note(
            "loss_rec_prime",
            (loss_rec_prime(&t, &l, &r, &b).unwrap() - rec_oracle(&t, &l, &r, Some(&b))).abs()
                / REC_TOL,
        );
        let weights = smooth_weights(&t);
        let (v, u) = smooth_weights_oracle(&t);
        for i in 0..v.len() {
            note(
                "smooth_weights",
                (weights.v[i] - v[i]).abs() / (v[i].abs().max(1.0) * WEIGHT_REL_TOL),
            );
            note(
                "smooth_weights",
                (weights.u[i] - u[i]).abs() / (u[i].abs().max(1.0) * WEIGHT_REL_TOL),
            );
        }
        let o = smooth_oracle(&l, &t);
        note(
            "loss_smooth",
            (loss_smooth(&l, &weights).unwrap() - o).abs() / (o.max(1.0) * SMOOTH_REL_TOL),
        );
        let entries = (0..6)
            .map(|_| {
                let mut c = || rand::Rng::random_range(&mut g, 0.0..1.0);
                Correspondence {
                    x1: c() * (w - 1) as f64,
                    y1: c() * (h - 1) as f64,
                    x2: c() * (w - 1) as f64,
                    y2: c() * (h - 1) as f64,
                    u: c(),
                }
            })
            .collect();
        let set = CorrespondenceSet::new(0, 1, w, h, entries).unwrap();
        note(
            "loss_corr_r",
            (loss_corr_r(&l, &r, &set).unwrap() - corr_oracle(&l, &r, &set)).abs() / CORR_TOL,
        );
        note(
            "psnr",
            (psnr(&l, &r).unwrap() - psnr_oracle(&l, &r)).abs() / PSNR_TOL_DB,
        );
        // The 11×11 window needs frames of at least 11 px.
        let (sh, sw) = (h + 7, w + 7);
        let a = uniform::<f64>(3, sh, sw, 0.0, 1.0, &mut g);
        let bb = uniform::<f64>(3, sh, sw, 0.0, 1.0, &mut g);
        note(
            "ssim",
            (ssim(&a, &bb).unwrap() - ssim_oracle(&a, &bb)).abs() / SSIM_TOL,
        );
    }
    let ok = worst.values().all(|&w| w <= 1.0);
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.2}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        ok,
        format!("worst error as a fraction of tolerance over 100 instances: {detail}"),
    )
}

fn c8_temporal() -> Outcome {
    let tex = procedural_texture(32, 32, 6, 3);
    let mut worst_exact = 0.0f64;
    for warp in [
        WarpSpec::identity(4, 32, 32),
        WarpSpec::translation(2.0, 1.0, 4, 32, 32),
    ] {
        let clip = generate_clip("c", &tex, &warp, 4).unwrap();
        let oracle = OracleProvider::new(BTreeMap::from([("c".to_string(), warp)]));
        let v = temporal_loss(clip.normal().unwrap(), &clip, &oracle, Horizon::Short).unwrap();
        worst_exact = worst_exact.max(v);
    }
    let warp = WarpSpec::identity(6, 16, 16);
    let clip = generate_clip("s", &procedural_texture(16, 16, 4, 2), &warp, 6).unwrap();
    let oracle = OracleProvider::new(BTreeMap::from([("s".to_string(), warp)]));
    let flicker: Vec<Frame> = (0..6)
        .map(|t| {
            let s = if t % 2 == 0 { 0.1 } else { -0.1 };
            Frame::new(Tensor::full(3, 16, 16, 0.5 + s), t).unwrap()
        })
        .collect();
    let alt = temporal_loss(&flicker, &clip, &oracle, Horizon::Short).unwrap();
    outcome(
        worst_exact <= TEMPORAL_TOL && (alt - 0.04).abs() <= TEMPORAL_TOL,
        format!(
            "exact flow on ground truth {worst_exact:.2e} (<= {TEMPORAL_TOL:e}); \
             alternating brightness {alt:.9} (0.04 within {TEMPORAL_TOL:e})"
        ),
    )
}

/// Criteria 6 and 7 share the two toy trainings.
fn c6_c7_toy(toy: &Toy) -> (Outcome, Outcome) {
    let (vllve, s1) = train_toy_vllve(toy, &toy_config(Variant::Vllve));
    let base = held_out(toy, &vllve);
    let (enh, low) = (base.mean.psnr.value(), base.mean.psnr_input.value());

    let start = Instant::now();
    let mut cfg = toy_config(Variant::Vllvepp);
    cfg.provider.perturb_sigma = PERTURB_SIGMA;
    let provider = build_provider(&cfg.provider, Some(&toy.train_warps)).unwrap();
    let ck = Checkpoint::from_model(&vllve, TOY_STEPS, serde_json::Value::Null);
    let pp = train_vllvepp(&cfg, &toy.train, provider, &ck, RunOptions::default())
        .unwrap()
        .model;
    let s2 = start.elapsed().as_secs_f64();
    let pp_psnr = held_out(toy, &pp).mean.psnr.value();
    let secs = s1 + s2;
    let c6 = outcome(
        enh >= low + TOY_MARGIN_DB && pp_psnr >= enh,
        format!(
            "held-out PSNR low {low:.2} dB, VLLVE {enh:.2} dB (needs >= {:.2}), \
             VLLVE++ {pp_psnr:.2} dB (needs >= {enh:.2}); {:.1} min (target {:.0} min)",
            low + TOY_MARGIN_DB,
            secs / 60.0,
            TOY_BUDGET_S / 60.0
        ),
    );

    let mut per_seed = Vec::new();
    for seed in 0..EPE_SEEDS {
        let (mut before, mut after, mut n) = (0.0, 0.0, 0.0);
        for clip in &toy.held {
            let normal = clip.normal().unwrap();
            for t in 0..clip.frame_count() - 1 {
                let truth = toy.held_oracle.maps(clip, t, t + 1).unwrap();
                let noisy = perturb_maps(
                    &truth,
                    PERTURB_SIGMA,
                    pair_seed(seed, &clip.clip_id, t, t + 1),
                );
                let refined = refine_maps(&pp, &normal[t], &normal[t + 1], &noisy).unwrap();
                before += endpoint_error(&noisy, &truth).unwrap();
                after += endpoint_error(&refined, &truth).unwrap();
                n += 1.0;
            }
        }
        per_seed.push((before / n, after / n));
    }
    let k = per_seed.len() as f64;
    let before = per_seed.iter().map(|p| p.0).sum::<f64>() / k;
    let after = per_seed.iter().map(|p| p.1).sum::<f64>() / k;
    let seeds = per_seed
        .iter()
        .map(|(b, a)| format!("{b:.4}->{a:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    let c7 = outcome(
        after < before,
        format!("mean endpoint error (px) perturbed {before:.4} -> refined {after:.4}; per seed {seeds}"),
    );
    (c6, c7)
}

fn c9_robustness(toy: &Toy) -> Outcome {
    let mut perturbed = toy_config(Variant::Vllve);
    perturbed.provider.perturb_sigma = PERTURB_SIGMA;
    let mut reduced = toy_config(Variant::Vllve);
    reduced.provider.drop_fraction = 1.0 - KEEP_FRACTION;
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, cfg) in [("sigma=2", perturbed), ("10% kept", reduced)] {
        let (model, secs) = train_toy_vllve(toy, &cfg);
        let m = held_out(toy, &model).mean;
        let (enh, low) = (m.psnr.value(), m.psnr_input.value());
        pass &= enh >= low + ROBUST_MARGIN_DB;
        parts.push(format!(
            "{name}: {enh:.2} dB vs low {low:.2} dB (needs >= {:.2}), {:.1} min",
            low + ROBUST_MARGIN_DB,
            secs / 60.0
        ));
    }
    outcome(pass, parts.join("; "))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {id} {name}: {}", o.detail);
        failed += usize::from(!o.pass);
    };
    report(1, "scope statement", c1_scope_statement());
    report(2, "gradient suite", c2_gradient_suite());
    report(3, "stop-gradient contracts", c3_stop_gradient());
    report(4, "initialization identities", c4_initialization());
    report(5, "oracle equivalence", c5_oracles());
    report(8, "temporal-loss sanity", c8_temporal());
    let toy = toy();
    let (c6, c7) = c6_c7_toy(&toy);
    report(6, "toy training efficacy", c6);
    report(7, "refinement directionality", c7);
    report(
        9,
        "robustness to degraded correspondences",
        c9_robustness(&toy),
    );
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
