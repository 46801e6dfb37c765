//! Training loops for both variants, pair sampling, checkpoint/resume and
//! inference.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corr::{
    sample_map_pixels, set_from_samples, BlockMatchingProvider, CorrespondenceMaps,
    CorrespondenceProvider, Direction, ImportedProvider, MapSample, OracleProvider,
    PerturbedProvider,
};
use crate::error::{Error, Result};
use crate::loss::{objective_vllve, objective_vllvepp, FrameTerms, Lambdas, LossReport, Terms};
use crate::net::{apply_residual, Checkpoint, Crn, ModelState, Module, Variant};
use crate::optim::{clip_grad_norm, cosine_lr, Adam, AdamConfig};
use crate::synth::{mix_seed, rng_for, WarpSpec};
use crate::tensor::Tensor;
use crate::videodata::{DecompositionTriple, Frame, VideoClip};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Oracle,
    BlockMatching,
    Imported,
}

/// Correspondence source and its sampling parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Entries sampled per frame pair.
    pub count: usize,
    pub keep_quantile: f64,
    /// Frozen Gaussian corruption of the dense maps, in pixels.
    pub perturb_sigma: f64,
    /// Fraction of sampled entries discarded each step.
    pub drop_fraction: f64,
    pub perturb_seed: u64,
    pub patch: usize,
    pub search_radius: usize,
    pub stride: usize,
    pub import_dir: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Oracle,
            count: 1024,
            keep_quantile: 0.5,
            perturb_sigma: 0.0,
            drop_fraction: 0.0,
            perturb_seed: 0,
            patch: 7,
            search_radius: 4,
            stride: 4,
            import_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub t_neighbor: usize,
    pub lr0: f64,
    /// Length of the cosine schedule and number of steps run.
    pub t_max: u64,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Write a checkpoint every this many steps (0: only the final one).
    pub checkpoint_every: u64,
    /// Drives batch composition and correspondence sampling.
    pub seed: u64,
    /// Drives parameter initialization.
    pub init_seed: u64,
    pub provider: ProviderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Vllve,
            t_neighbor: 5,
            lr0: 4e-4,
            t_max: 2000,
            batch_size: 4,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            checkpoint_every: 0,
            seed: 0,
            init_seed: 0,
            provider: ProviderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: &str| Err(Error::Config(format!("{field}: {msg}")));
        if self.t_neighbor < 1 {
            return fail("t_neighbor", "must be at least 1");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail("lr0", "must be positive");
        }
        if self.batch_size < 1 {
            return fail("batch_size", "must be at least 1");
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(name, "must be finite and non-negative");
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return fail("beta1/beta2/eps", "need betas in [0, 1) and eps > 0");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail("grad_clip", "must be positive");
            }
        }
        let p = &self.provider;
        if p.count == 0 {
            return fail("provider.count", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&p.keep_quantile) {
            return fail("provider.keep_quantile", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&p.drop_fraction) {
            return fail("provider.drop_fraction", "must lie in [0, 1]");
        }
        if !(p.perturb_sigma >= 0.0 && p.perturb_sigma.is_finite()) {
            return fail("provider.perturb_sigma", "must be finite and non-negative");
        }
        if p.kind == ProviderKind::Imported && p.import_dir.is_none() {
            return fail("provider.import_dir", "required for the imported provider");
        }
        Ok(())
    }

    pub fn lambdas(&self) -> Lambdas {
        Lambdas {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Builds the configured provider. `warps` is needed for the oracle.
pub fn build_provider(
    config: &ProviderConfig,
    warps: Option<&std::collections::BTreeMap<String, WarpSpec>>,
) -> Result<Arc<dyn CorrespondenceProvider>> {
    let base: Arc<dyn CorrespondenceProvider> = match config.kind {
        ProviderKind::Oracle => {
            let warps = warps.ok_or_else(|| {
                Error::Config("provider.kind: oracle needs the dataset's warps sidecar".into())
            })?;
            Arc::new(OracleProvider::new(warps.clone()))
        }
        ProviderKind::BlockMatching => Arc::new(BlockMatchingProvider::new(
            config.patch,
            config.search_radius,
            config.stride,
        )?),
        ProviderKind::Imported => {
            let dir = config
                .import_dir
                .as_ref()
                .ok_or_else(|| Error::Config("provider.import_dir: missing".into()))?;
            Arc::new(ImportedProvider::new(dir.clone()))
        }
    };
    Ok(if config.perturb_sigma > 0.0 {
        Arc::new(PerturbedProvider::new(
            base,
            config.perturb_sigma,
            config.perturb_seed,
        ))
    } else {
        base
    })
}

/// Uniform `t1`, then `t2` uniform among neighbours with `0 < |t2 − t1| ≤ T`.
pub fn sample_pair<R: Rng>(
    frame_count: usize,
    t_neighbor: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    if frame_count < 2 {
        return Err(Error::InvalidClip(format!(
            "pair sampling needs at least 2 frames, clip has {frame_count}"
        )));
    }
    let t1 = rng.random_range(0..frame_count);
    let lo = t1.saturating_sub(t_neighbor);
    let hi = (t1 + t_neighbor).min(frame_count - 1);
    // candidates lo..=hi without t1
    let k = rng.random_range(0..hi - lo);
    let t2 = if lo + k >= t1 { lo + k + 1 } else { lo + k };
    Ok((t1, t2))
}

/// Inference partner: the next frame, else the previous, else itself.
pub fn nearest_neighbor(t: usize, frame_count: usize) -> usize {
    if t + 1 < frame_count {
        t + 1
    } else {
        t.saturating_sub(1)
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub report: LossReport,
    /// Seconds since the trainer was created.
    pub wall_time: f64,
}

pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::io(path, e)))
        .collect()
}

type MapKey = (String, usize, usize);

/// Frozen provider outputs, computed once per `(clip, t1, t2)`.
pub struct MapCache {
    provider: Arc<dyn CorrespondenceProvider>,
    id: String,
    maps: Mutex<HashMap<MapKey, Arc<CorrespondenceMaps>>>,
}

impl MapCache {
    pub fn new(provider: Arc<dyn CorrespondenceProvider>) -> Self {
        let id = provider.id();
        Self {
            provider,
            id,
            maps: Mutex::new(HashMap::new()),
        }
    }

    pub fn provider_id(&self) -> &str {
        &self.id
    }

    pub fn get(&self, clip: &VideoClip, t1: usize, t2: usize) -> Result<Arc<CorrespondenceMaps>> {
        let key = (clip.clip_id.clone(), t1, t2);
        if let Some(m) = self.maps.lock().expect("cache lock").get(&key) {
            return Ok(m.clone());
        }
        let maps = self.provider.maps(clip, t1, t2)?;
        maps.validate()?;
        let maps = Arc::new(maps);
        self.maps
            .lock()
            .expect("cache lock")
            .insert(key, maps.clone());
        Ok(maps)
    }
}

/// Where the trainer writes logs, checkpoints and diagnostic dumps.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
}

struct PairPlan {
    clip: usize,
    t1: usize,
    t2: usize,
    samples: Vec<MapSample>,
}

/// Owns a model and its optimizers; advances one batch per [`Trainer::step`].
pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a [VideoClip],
    cache: Arc<MapCache>,
    model: ModelState<f32>,
    opt_g: Adam<f32>,
    opt_h: Option<Adam<f32>>,
    step: u64,
    terms: Terms,
    started: Instant,
    options: RunOptions,
    log: Vec<StepLog>,
    writer: Option<BufWriter<File>>,
}

fn check_dataset(dataset: &[VideoClip]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidClip("training dataset is empty".into()));
    }
    for clip in dataset {
        clip.require_normal()?;
        if clip.frame_count() < 2 {
            return Err(Error::InvalidClip(format!(
                "clip {} has fewer than 2 frames",
                clip.clip_id
            )));
        }
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    /// Starts from `model`, which must match `config.variant`.
    pub fn new(
        config: TrainConfig,
        dataset: &'a [VideoClip],
        cache: Arc<MapCache>,
        model: ModelState<f32>,
    ) -> Result<Self> {
        config.validate()?;
        check_dataset(dataset)?;
        if model.variant() != config.variant {
            return Err(Error::Variant(format!(
                "config asks for {}, model is {}",
                config.variant,
                model.variant()
            )));
        }
        let opt_g = Adam::new(config.adam(), &model.g);
        let opt_h = model.crn.as_ref().map(|c| Adam::new(config.adam(), c));
        Ok(Self {
            config,
            dataset,
            cache,
            model,
            opt_g,
            opt_h,
            step: 0,
            terms: Terms::all(),
            started: Instant::now(),
            options: RunOptions::default(),
            log: Vec::new(),
            writer: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        config: TrainConfig,
        dataset: &'a [VideoClip],
        cache: Arc<MapCache>,
        ck: &Checkpoint,
    ) -> Result<Self> {
        let model = ck.to_model_of::<f32>(config.variant)?;
        let mut t = Self::new(config, dataset, cache, model)?;
        let steps = |key: &str| {
            ck.header
                .meta
                .get(key)
                .and_then(|v| v.as_u64())
                .unwrap_or(0)
        };
        t.opt_g = Adam::load_from(
            t.config.adam(),
            &t.model.g,
            "adam_g",
            ck,
            steps("adam_g_steps"),
        )?;
        if let Some(crn) = &t.model.crn {
            t.opt_h = Some(Adam::load_from(
                t.config.adam(),
                crn,
                "adam_h",
                ck,
                steps("adam_h_steps"),
            )?);
        }
        t.step = ck.header.step;
        Ok(t)
    }

    pub fn with_terms(mut self, terms: Terms) -> Self {
        self.terms = terms;
        self
    }

    /// Enables the JSON-lines log, periodic checkpoints and failure dumps.
    pub fn with_output(mut self, options: RunOptions) -> Result<Self> {
        if let Some(dir) = &options.out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let file = fs::OpenOptions::new()
                .create(true)
                .append(self.step > 0)
                .write(true)
                .truncate(self.step == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            self.writer = Some(BufWriter::new(file));
        }
        self.options = options;
        Ok(self)
    }

    pub fn model(&self) -> &ModelState<f32> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut ModelState<f32> {
        &mut self.model
    }

    pub fn into_model(self) -> ModelState<f32> {
        self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn log(&self) -> &[StepLog] {
        &self.log
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "provider_id": self.cache.provider_id(),
            "adam_g_steps": self.opt_g.steps(),
            "adam_h_steps": self.opt_h.as_ref().map_or(0, |o| o.steps()),
        });
        let mut ck = Checkpoint::from_model(&self.model, self.step, meta);
        self.opt_g.save_into(&self.model.g, "adam_g", &mut ck);
        if let (Some(opt), Some(crn)) = (&self.opt_h, &self.model.crn) {
            opt.save_into(crn, "adam_h", &mut ck);
        }
        ck
    }

    /// Batch composition for `step`, a pure function of `(seed, step)`.
    fn plan(&self, step: u64) -> Result<Vec<PairPlan>> {
        let p = &self.config.provider;
        let dirs: &[Direction] = match self.config.variant {
            Variant::Vllve => &[Direction::Fwd],
            Variant::Vllvepp => &[Direction::Fwd, Direction::Bwd],
        };
        (0..self.config.batch_size)
            .map(|j| {
                let mut rng = rng_for(self.config.seed, &[step, j as u64]);
                let clip = rng.random_range(0..self.dataset.len());
                let (t1, t2) = sample_pair(
                    self.dataset[clip].frame_count(),
                    self.config.t_neighbor,
                    &mut rng,
                )?;
                let maps = self.cache.get(&self.dataset[clip], t1, t2)?;
                let mut samples =
                    sample_map_pixels(&maps, dirs, p.count, p.keep_quantile, &mut rng);
                if p.drop_fraction > 0.0 {
                    let remove = (p.drop_fraction * samples.len() as f64).round() as usize;
                    let drop = rand::seq::index::sample(&mut rng, samples.len(), remove);
                    let mut keep = vec![true; samples.len()];
                    drop.into_iter().for_each(|i| keep[i] = false);
                    let mut k = keep.into_iter();
                    samples.retain(|_| k.next().expect("same length"));
                }
                Ok(PairPlan {
                    clip,
                    t1,
                    t2,
                    samples,
                })
            })
            .collect()
    }

    fn dump_nonfinite(&self, plans: &[PairPlan], reports: &[LossReport], what: &str) -> Error {
        let pairs: Vec<_> = plans
            .iter()
            .map(|p| serde_json::json!({"clip": self.dataset[p.clip].clip_id, "t1": p.t1, "t2": p.t2, "entries": p.samples.len()}))
            .collect();
        let dump = serde_json::json!({ "step": self.step, "cause": what, "pairs": pairs, "reports": reports });
        let mut detail = format!("{what}; batch {dump}");
        if let Some(dir) = &self.options.out_dir {
            let path = dir.join(format!("nonfinite_step_{}.json", self.step));
            if fs::write(
                &path,
                serde_json::to_string_pretty(&dump).unwrap_or_default(),
            )
            .is_ok()
            {
                detail = format!("{what}; batch dumped to {}", path.display());
            }
        }
        Error::NonFinite {
            step: self.step as usize,
            detail,
        }
    }

    /// One optimization step over a batch of pairs.
    pub fn step(&mut self) -> Result<StepLog> {
        let plans = self.plan(self.step)?;
        self.model.g.zero_grad();
        if let Some(crn) = self.model.crn.as_mut() {
            crn.zero_grad();
        }
        let mut reports = Vec::with_capacity(plans.len());
        for plan in &plans {
            let r = match self.config.variant {
                Variant::Vllve => self.accumulate_vllve(plan)?,
                Variant::Vllvepp => self.accumulate_vllvepp(plan)?,
            };
            reports.push(r);
        }
        let report = LossReport::mean(&reports);
        if !report.is_finite() {
            return Err(self.dump_nonfinite(&plans, &reports, "non-finite loss"));
        }

        let inv_b = 1.0 / plans.len() as f32;
        let mut finite = true;
        self.model.g.visit_mut(&mut |p| {
            p.grad.iter_mut().for_each(|g| *g *= inv_b);
            finite &= p.grad.iter().all(|g| g.is_finite());
        });
        if let Some(crn) = self.model.crn.as_mut() {
            crn.visit_mut(&mut |p| {
                p.grad.iter_mut().for_each(|g| *g *= inv_b);
                finite &= p.grad.iter().all(|g| g.is_finite());
            });
        }
        if !finite {
            return Err(self.dump_nonfinite(&plans, &reports, "non-finite gradient"));
        }
        if let Some(c) = self.config.grad_clip {
            clip_grad_norm(&mut self.model.g, c);
            if let Some(crn) = self.model.crn.as_mut() {
                clip_grad_norm(crn, c);
            }
        }

        let lr = cosine_lr(self.config.lr0, self.step, self.config.t_max);
        if self.terms.drives_decomposer() {
            self.opt_g.step(&mut self.model.g, lr);
        }
        if self.terms.corr_crn {
            if let (Some(opt), Some(crn)) = (self.opt_h.as_mut(), self.model.crn.as_mut()) {
                opt.step(crn, lr);
            }
        }

        let entry = StepLog {
            step: self.step,
            lr,
            report,
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        self.step += 1;
        if let Some(w) = self.writer.as_mut() {
            let line = serde_json::to_string(&entry).map_err(|e| Error::Config(e.to_string()))?;
            let path = self
                .options
                .out_dir
                .clone()
                .unwrap_or_default()
                .join(LOG_FILE);
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))?;
        }
        if let Some(dir) = &self.options.out_dir {
            let every = self.config.checkpoint_every;
            if every > 0 && self.step % every == 0 {
                self.checkpoint()
                    .save(&dir.join(format!("step_{:06}.ckpt", self.step)))?;
            }
        }
        self.log.push(entry.clone());
        Ok(entry)
    }

    fn pair_frames(&self, plan: &PairPlan) -> Result<[(&'a Frame, &'a Frame); 2]> {
        let clip = &self.dataset[plan.clip];
        let normal = clip.require_normal()?;
        Ok([
            (&clip.low()[plan.t1], &normal[plan.t1]),
            (&clip.low()[plan.t2], &normal[plan.t2]),
        ])
    }

    fn accumulate_vllve(&mut self, plan: &PairPlan) -> Result<LossReport> {
        let [(l1, n1), (l2, n2)] = self.pair_frames(plan)?;
        let maps = self.cache.get(&self.dataset[plan.clip], plan.t1, plan.t2)?;
        let set = set_from_samples(&maps, &plan.samples, plan.t1, plan.t2)?;
        let (o1, o2, cache) = self.model.g.forward_pair(l1.pixels(), l2.pixels())?;
        let frames = [
            FrameTerms {
                low: l1.pixels(),
                normal: n1.pixels(),
                out: &o1,
            },
            FrameTerms {
                low: l2.pixels(),
                normal: n2.pixels(),
                out: &o2,
            },
        ];
        let (report, [g1, g2]) =
            objective_vllve(frames, &set, &self.config.lambdas(), &self.terms)?;
        if self.terms.drives_decomposer() {
            self.model.g.backward_pair(&cache, &g1, &g2);
        }
        Ok(report)
    }

    fn accumulate_vllvepp(&mut self, plan: &PairPlan) -> Result<LossReport> {
        let [(l1, n1), (l2, n2)] = self.pair_frames(plan)?;
        let maps = self.cache.get(&self.dataset[plan.clip], plan.t1, plan.t2)?;
        let crn = self.model.crn()?;
        let x = Crn::input(n1.pixels(), n2.pixels(), &maps)?;
        let (delta, crn_cache) = crn.forward(&x)?;
        let refined_maps = apply_residual(&maps, &delta);
        let unrefined = set_from_samples(&maps, &plan.samples, plan.t1, plan.t2)?;
        let refined = set_from_samples(&refined_maps, &plan.samples, plan.t1, plan.t2)?;

        let (o1, o2, cache) = self.model.g.forward_pair(l1.pixels(), l2.pixels())?;
        let frames = [
            FrameTerms {
                low: l1.pixels(),
                normal: n1.pixels(),
                out: &o1,
            },
            FrameTerms {
                low: l2.pixels(),
                normal: n2.pixels(),
                out: &o2,
            },
        ];
        let (report, grads) = objective_vllvepp(
            frames,
            &unrefined,
            &refined,
            &self.config.lambdas(),
            &self.terms,
        )?;
        if self.terms.drives_decomposer() {
            let [g1, g2] = &grads.frames;
            self.model.g.backward_pair(&cache, g1, g2);
        }
        if self.terms.corr_crn {
            let ddelta = delta_grad(&maps, &delta, &plan.samples, &grads.refined_coords);
            self.model.crn_mut()?.backward(&crn_cache, &ddelta);
        }
        Ok(report)
    }
}

/// Chains coordinate gradients of the refined entries back to the residual
/// maps through the pixel/normalized conversion and the `[−1, 1]` clamp.
pub fn delta_grad(
    maps: &CorrespondenceMaps,
    delta: &Tensor<f32>,
    samples: &[MapSample],
    dcoords: &[[f32; 4]],
) -> Tensor<f32> {
    let (h, w) = (maps.height(), maps.width());
    let (sx, sy) = (0.5 * (w - 1) as f32, 0.5 * (h - 1) as f32);
    let mut g = Tensor::zeros(4, h, w);
    for (s, d) in samples.iter().zip(dcoords) {
        let (base, map, dx, dy) = match s.dir {
            Direction::Fwd => (0, &maps.fwd, d[2], d[3]),
            Direction::Bwd => (2, &maps.bwd, d[0], d[1]),
        };
        for (c, dv, scale) in [(0, dx, sx), (1, dy, sy)] {
            let pre = map.at(c, s.y, s.x) + delta.at(base + c, s.y, s.x);
            if pre > -1.0 && pre < 1.0 {
                *g.at_mut(base + c, s.y, s.x) += dv * scale;
            }
        }
    }
    g
}

/// Result of a full training run.
pub struct TrainOutcome {
    pub model: ModelState<f32>,
    pub log: Vec<StepLog>,
}

fn run_to_end(mut trainer: Trainer<'_>) -> Result<TrainOutcome> {
    while trainer.step < trainer.config.t_max {
        trainer.step()?;
    }
    if let Some(dir) = trainer.options.out_dir.clone() {
        trainer.checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
    }
    let log = std::mem::take(&mut trainer.log);
    Ok(TrainOutcome {
        model: trainer.into_model(),
        log,
    })
}

/// Two-frame training from scratch for `config.t_max` steps.
pub fn train_vllve(
    config: &TrainConfig,
    dataset: &[VideoClip],
    provider: Arc<dyn CorrespondenceProvider>,
    options: RunOptions,
) -> Result<TrainOutcome> {
    if config.variant != Variant::Vllve {
        return Err(Error::Variant("train_vllve needs variant = vllve".into()));
    }
    let model = ModelState::new(Variant::Vllve, config.init_seed);
    let trainer = Trainer::new(
        config.clone(),
        dataset,
        Arc::new(MapCache::new(provider)),
        model,
    )?
    .with_output(options)?;
    run_to_end(trainer)
}

/// Residual + refinement training starting from a trained two-frame model.
pub fn train_vllvepp(
    config: &TrainConfig,
    dataset: &[VideoClip],
    provider: Arc<dyn CorrespondenceProvider>,
    pretrained: &Checkpoint,
    options: RunOptions,
) -> Result<TrainOutcome> {
    if config.variant != Variant::Vllvepp {
        return Err(Error::Variant(
            "train_vllvepp needs variant = vllvepp".into(),
        ));
    }
    let base = pretrained.to_model_of::<f32>(Variant::Vllve)?;
    let model = ModelState::vllvepp_from(&base, config.init_seed)?;
    let trainer = Trainer::new(
        config.clone(),
        dataset,
        Arc::new(MapCache::new(provider)),
        model,
    )?
    .with_output(options)?;
    run_to_end(trainer)
}

/// Enhanced frames and the decomposition behind each.
pub struct Enhanced {
    pub frames: Vec<Frame>,
    pub triples: Vec<DecompositionTriple<f32>>,
}

/// Enhances every low-light frame, pairing each with its nearest neighbour.
pub fn infer(model: &ModelState<f32>, clip: &VideoClip) -> Result<Enhanced> {
    let n = clip.frame_count();
    if n == 0 {
        return Err(Error::InvalidClip(format!(
            "clip {} has no frames",
            clip.clip_id
        )));
    }
    let mut frames = Vec::with_capacity(n);
    let mut triples = Vec::with_capacity(n);
    for t in 0..n {
        let r = nearest_neighbor(t, n);
        let triple = model.forward_single(clip.low()[t].pixels(), clip.low()[r].pixels())?;
        frames.push(Frame::from_clamped(&triple.recomposed, t)?);
        triples.push(triple);
    }
    Ok(Enhanced { frames, triples })
}

/// Deterministic per-pair seed, exposed for evaluation harnesses.
pub fn pair_seed(seed: u64, clip_id: &str, t1: usize, t2: usize) -> u64 {
    mix_seed(
        seed,
        &[crate::corr::stable_hash(clip_id), t1 as u64, t2 as u64],
    )
}

/// Pixel-space refined map for evaluation: `clamp(maps + Δ)`.
pub fn refine_maps(
    model: &ModelState<f32>,
    frame_a: &Frame,
    frame_b: &Frame,
    maps: &CorrespondenceMaps,
) -> Result<CorrespondenceMaps> {
    let (dfwd, dbwd) = model.crn_forward(frame_a.pixels(), frame_b.pixels(), maps)?;
    Ok(apply_residual(
        maps,
        &Tensor::concat_channels(&[&dfwd, &dbwd]),
    ))
}
