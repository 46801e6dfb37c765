use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use log::info;
use vllve::corr::CorrespondenceProvider;
use vllve::eval::{evaluate_clip, MetricReport};
use vllve::net::{Checkpoint, ModelState, Variant};
use vllve::synth::{write_dataset, DatasetSidecar, WarpSpec, SIDECAR_FILE};
use vllve::train::{build_provider, infer, MapCache, RunOptions, Trainer, FINAL_CHECKPOINT};
use vllve::videodata::{frame_file_name, load_dataset, read_frames, save_frames, write_image};

use crate::config::{usage, Command, Manifest, RunConfig};
use crate::report;

pub const ENHANCED_DIR: &str = "enhanced";
pub const METRICS_FILE: &str = "metrics.json";

pub fn run(cfg: &RunConfig) -> Result<()> {
    match cfg.command.unwrap_or_default() {
        Command::Synth => synth(cfg),
        Command::Train => train(cfg),
        Command::Infer => enhance(cfg),
        Command::Eval => eval(cfg),
        Command::Report => render(cfg),
    }
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let out = cfg.output_dir()?;
    let (clips, _) = write_dataset(&cfg.synth, out)?;
    Manifest::new(cfg).write(out)?;
    info!("wrote {} clips to {}", clips.len(), out.display());
    Ok(())
}

fn warps(dataset: &Path) -> Result<Option<BTreeMap<String, WarpSpec>>> {
    if !dataset.join(SIDECAR_FILE).exists() {
        return Ok(None);
    }
    Ok(Some(DatasetSidecar::load(dataset)?.warps))
}

fn provider(cfg: &RunConfig, dataset: &Path) -> Result<Arc<dyn CorrespondenceProvider>> {
    let warps = warps(dataset)?;
    Ok(build_provider(&cfg.train.provider, warps.as_ref())?)
}

fn train(cfg: &RunConfig) -> Result<()> {
    let tc = &cfg.train;
    tc.validate()?;
    let dataset = cfg.require(&cfg.dataset, "--dataset")?;
    let out = cfg.output_dir()?;
    if tc.variant == Variant::Vllvepp && cfg.pretrained.is_none() && cfg.resume.is_none() {
        return usage(
            "--variant vllvepp needs --pretrained: residual and refinement training \
             starts from a trained vllve checkpoint",
        );
    }
    let clips = load_dataset(dataset, true)?;
    let cache = Arc::new(MapCache::new(provider(cfg, dataset)?));
    let trainer = match (&cfg.resume, &cfg.pretrained) {
        (Some(path), _) => {
            let ck = Checkpoint::load(path)?;
            Trainer::resume(tc.clone(), &clips, cache, &ck)?
        }
        (None, pretrained) => {
            let model = match pretrained {
                Some(path) if tc.variant == Variant::Vllvepp => {
                    let base = Checkpoint::load(path)?.to_model_of::<f32>(Variant::Vllve)?;
                    ModelState::vllvepp_from(&base, tc.init_seed)?
                }
                _ => ModelState::new(tc.variant, tc.init_seed),
            };
            Trainer::new(tc.clone(), &clips, cache, model)?
        }
    };
    let mut trainer = trainer.with_output(RunOptions {
        out_dir: Some(out.to_path_buf()),
    })?;
    Manifest::new(cfg).write(out)?;
    let every = (tc.t_max / 20).max(1);
    while trainer.step_count() < tc.t_max {
        let entry = trainer.step()?;
        if trainer.step_count() % every == 0 {
            info!(
                "step {}/{} loss {:.5} lr {:.2e}",
                trainer.step_count(),
                tc.t_max,
                entry.report.total,
                entry.lr
            );
        }
    }
    let path = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&path)?;
    info!("saved {}", path.display());
    Ok(())
}

fn enhance(cfg: &RunConfig) -> Result<()> {
    let ckpt = cfg.require(&cfg.checkpoint, "--checkpoint")?;
    let dataset = cfg.require(&cfg.dataset, "--dataset")?;
    let out = cfg.output_dir()?;
    let model = Checkpoint::load(ckpt)?.to_model::<f32>()?;
    for clip in load_dataset(dataset, false)? {
        let result = infer(&model, &clip)?;
        let dir = out.join(&clip.clip_id);
        save_frames(&dir.join(ENHANCED_DIR), &result.frames)?;
        if cfg.save_decomposition {
            for part in ["l", "r", "b"] {
                let d = dir.join(part);
                fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
            }
            for (t, triple) in result.triples.iter().enumerate() {
                let name = frame_file_name(t);
                write_image(&dir.join("l").join(&name), &triple.l)?;
                write_image(&dir.join("r").join(&name), &triple.r)?;
                // B is signed; mid-grey is zero.
                write_image(&dir.join("b").join(&name), &triple.b.map(|v| v + 0.5))?;
            }
        }
        info!("enhanced {} ({} frames)", clip.clip_id, clip.frame_count());
    }
    Manifest::new(cfg).write(out)
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let dataset = cfg.require(&cfg.dataset, "--dataset")?;
    let enhanced = cfg.require(&cfg.enhanced, "--enhanced")?;
    let out = cfg.output_dir()?;
    let provider = provider(cfg, dataset)?;
    let mut per_clip = Vec::new();
    for clip in load_dataset(dataset, true)? {
        let dir = enhanced.join(&clip.clip_id).join(ENHANCED_DIR);
        let frames = read_frames(&dir)?;
        per_clip.push(evaluate_clip(&clip, &frames, provider.as_ref())?);
    }
    let report = MetricReport::new(per_clip)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(METRICS_FILE);
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Manifest::new(cfg).write(out)?;
    println!(
        "{} clips: psnr {:.2} dB (input {:.2} dB), ssim {:.4}",
        report.mean.clips,
        report.mean.psnr.value(),
        report.mean.psnr_input.value(),
        report.mean.ssim
    );
    Ok(())
}

fn render(cfg: &RunConfig) -> Result<()> {
    if cfg.logs.is_empty() && cfg.metrics.is_empty() {
        return usage("report needs at least one --log or --metrics input");
    }
    let out = cfg.output_dir()?;
    report::render(&cfg.logs, &cfg.metrics, out)?;
    Manifest::new(cfg).write(out)
}
