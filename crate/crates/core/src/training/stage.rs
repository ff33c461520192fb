//! The three training stages and their checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::{make_sample, DataConfig, SyntheticSample};
use super::optim::{AdamW, AdamWConfig};
use crate::adapters::{ControlNet, GlobalEmbedder, CONTROL_PREFIX, GLOBAL_PREFIX, INJECT_PREFIX, LORA_PREFIX};
use crate::backbone::{Backbone, ModelConfig, BASE_PREFIX};
use crate::codec::{area_downsample, PatchCodec};
use crate::diffusion::{batch_loss, full_item, masked_item, piecewise_stage, LossStage, Modules, NoiseSchedule, NoisyItem, BETA_END, BETA_START};
use crate::error::{Error, Result};
use crate::io::{load_etw, save_etw, write_atomic};
use crate::mask::build_control_context;
use crate::numeric::{Graph, ParamId, ParamSet, RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    ControlFull,
    AdaptersSparse,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::ControlFull => "control_full",
            Stage::AdaptersSparse => "adapters_sparse",
        }
    }

    /// Parameter groups this stage may change.
    pub fn trainable_prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::Base => &[BASE_PREFIX],
            Stage::ControlFull => &[CONTROL_PREFIX, INJECT_PREFIX],
            Stage::AdaptersSparse => &[LORA_PREFIX, GLOBAL_PREFIX, INJECT_PREFIX],
        }
    }

    /// Checkpoint file holding the stage's groups.
    pub fn file_name(self) -> &'static str {
        match self {
            Stage::Base => "base.etw",
            Stage::ControlFull => "control.etw",
            Stage::AdaptersSparse => "adapters.etw",
        }
    }

    pub fn owns(self, name: &str) -> bool {
        self.trainable_prefixes().iter().any(|p| name.starts_with(p))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Iteration at which the loss switches to the global branch.
    #[serde(default = "default_switch")]
    pub n: usize,
    #[serde(default = "default_rank")]
    pub lora_rank: usize,
    pub seed: u64,
    #[serde(default = "default_one")]
    pub grad_accum: usize,
    #[serde(default = "default_one")]
    pub dilation_radius: usize,
    #[serde(default = "default_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub data: DataConfig,
}

fn default_switch() -> usize {
    800
}
fn default_rank() -> usize {
    8
}
fn default_one() -> usize {
    1
}
fn default_decay() -> f64 {
    0.01
}

impl TrainConfig {
    pub fn new(stage: Stage, seed: u64) -> Self {
        let iterations = match stage {
            Stage::Base => 3000,
            _ => 2000,
        };
        TrainConfig {
            stage,
            iterations,
            batch_size: 4,
            lr: 1e-3,
            warmup: 100,
            n: default_switch(),
            lora_rank: default_rank(),
            seed,
            grad_accum: 1,
            dilation_radius: 1,
            weight_decay: default_decay(),
            data: DataConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum == 0 || self.lora_rank == 0 {
            return Err(Error::Config("batch_size, grad_accum and lora_rank must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.data.frames == 0 || self.data.height == 0 || self.data.width == 0 {
            return Err(Error::Config("data dimensions must be positive".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, warmup: self.warmup, weight_decay: self.weight_decay, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub stage: LossStage,
    pub loss: f64,
}

pub struct StageOutput {
    pub model: ModelConfig,
    pub params: ParamSet<f32>,
    pub losses: Vec<LossRecord>,
}

fn check_prerequisites(stage: Stage, ps: &ParamSet<f32>) -> Result<()> {
    let need_base = stage != Stage::Base;
    if need_base && !ps.contains(&format!("{BASE_PREFIX}patch.w")) {
        return Err(Error::MissingWeights(format!("{} needs the base checkpoint ({})", stage.name(), Stage::Base.file_name())));
    }
    if stage == Stage::AdaptersSparse && !ps.contains(&format!("{CONTROL_PREFIX}patch.w")) {
        return Err(Error::MissingWeights(format!(
            "{} needs the control checkpoint ({})",
            stage.name(),
            Stage::ControlFull.file_name()
        )));
    }
    Ok(())
}

/// Adds the stage's fresh modules when they are missing.
fn initialize(model: &mut ModelConfig, cfg: &TrainConfig, ps: &mut ParamSet<f32>) -> Result<()> {
    let mut rng = RngState::new(cfg.seed).fork(0xC0FFEE + cfg.stage as u64);
    match cfg.stage {
        Stage::Base => {
            if !ps.contains(&format!("{BASE_PREFIX}patch.w")) {
                Backbone::new(model.clone(), ps, &mut rng)?;
            }
        }
        Stage::ControlFull => {
            if !ps.contains(&format!("{CONTROL_PREFIX}patch.w")) {
                let bb = Backbone::bind(model.clone(), ps)?;
                ControlNet::new(&bb, ps, &mut rng);
            }
        }
        Stage::AdaptersSparse => {
            let bb = Backbone::bind(model.clone(), ps)?;
            if !ps.contains(&format!("{LORA_PREFIX}block0.attn.q.down")) {
                model.lora_rank = cfg.lora_rank;
                let mut control = ControlNet::bind(model, ps)?;
                control.attach_lora(model, ps, &mut rng);
            }
            if !ps.contains(&format!("{GLOBAL_PREFIX}patch.w")) {
                GlobalEmbedder::new(&bb, ps, &mut rng);
            }
        }
    }
    Ok(())
}

/// Training example `index` for the stage.
pub fn stage_item(
    stage: Stage,
    codec: &PatchCodec,
    schedule: &NoiseSchedule,
    model: &ModelConfig,
    sample: &SyntheticSample,
    radius: usize,
    rng: &mut RngState,
) -> Result<NoisyItem<f32>> {
    let t = 1 + rng.below(schedule.train_steps());
    let z0 = codec.encode(&sample.target)?;
    match stage {
        Stage::Base => full_item(schedule, &z0, None, &sample.prompt_ids, t, rng),
        Stage::ControlFull => {
            let ctx = build_control_context(codec, &sample.video, &sample.mask, radius)?;
            full_item(schedule, &z0, Some(&ctx.control), &sample.prompt_ids, t, rng)
        }
        Stage::AdaptersSparse => {
            let ctx = build_control_context(codec, &sample.video, &sample.mask, radius)?;
            let down = area_downsample(&ctx.background, model.global_size)?;
            let z = codec.encode(&down)?;
            let coords = z.dims().all_coords();
            masked_item(schedule, &z0, &ctx, &sample.prompt_ids, Some((z.into_tokens(), coords)), t, rng)
        }
    }
}

fn loss_stage(stage: Stage, k: usize, n: usize) -> LossStage {
    match stage {
        Stage::Base => LossStage::Dm,
        Stage::ControlFull => LossStage::Cdm,
        Stage::AdaptersSparse => piecewise_stage(k, n),
    }
}

/// Per-iteration observer; receives the gradients applied at that step.
pub trait StageObserver {
    fn on_step(&mut self, _iteration: usize, _ps: &ParamSet<f32>, _grads: &[(ParamId, Tensor<f32>)]) {}
}

impl StageObserver for () {}

pub fn run_stage(model: &ModelConfig, cfg: &TrainConfig, params: ParamSet<f32>) -> Result<StageOutput> {
    run_stage_observed(model, cfg, params, &mut ())
}

/// Runs one stage; every tensor outside the stage's groups is left untouched.
pub fn run_stage_observed(
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut ps: ParamSet<f32>,
    observer: &mut dyn StageObserver,
) -> Result<StageOutput> {
    cfg.validate()?;
    model.validate()?;
    check_prerequisites(cfg.stage, &ps)?;
    let mut model = model.clone();
    if cfg.iterations == 0 {
        return Ok(StageOutput { model, params: ps, losses: Vec::new() });
    }
    initialize(&mut model, cfg, &mut ps)?;
    let frozen: Vec<bool> = ps.ids().map(|id| ps.is_frozen(id)).collect();
    for id in ps.ids().collect::<Vec<_>>() {
        let own = cfg.stage.owns(ps.name(id));
        ps.set_frozen(id, !own);
    }
    let codec = PatchCodec::default();
    let schedule = NoiseSchedule::linear(model.train_steps, BETA_START, BETA_END)?;
    let mut opt = AdamW::new(cfg.optimizer());
    let mut losses = Vec::with_capacity(cfg.iterations);
    let per_step = cfg.batch_size * cfg.grad_accum;
    for k in 0..cfg.iterations {
        let modules = Modules::bind(&model, &ps)?;
        let stage = loss_stage(cfg.stage, k, cfg.n);
        let mut acc: BTreeMap<ParamId, Tensor<f32>> = BTreeMap::new();
        let mut value = 0.0;
        for a in 0..cfg.grad_accum {
            let mut items = Vec::with_capacity(cfg.batch_size);
            for b in 0..cfg.batch_size {
                let index = (k * per_step + a * cfg.batch_size + b) as u64;
                let sample = make_sample(cfg.seed, index, &cfg.data, None)?;
                let mut rng = RngState::stream(cfg.seed, index).fork(0x5eed);
                items.push(stage_item(cfg.stage, &codec, &schedule, &model, &sample, cfg.dilation_radius, &mut rng)?);
            }
            let mut g = Graph::new();
            let (loss, breakdown) = batch_loss(&mut g, &modules, &ps, &items, stage)?;
            if !breakdown.value.is_finite() {
                return Err(Error::NonFiniteLoss { stage: cfg.stage.name().into(), iteration: k });
            }
            value += breakdown.value / cfg.grad_accum as f64;
            let grads = g.backward(loss)?;
            for id in grads.param_ids() {
                let gt = grads.param(id).expect("listed gradient");
                match acc.get_mut(&id) {
                    Some(t) => t.data_mut().iter_mut().zip(gt.data()).for_each(|(x, y)| *x += y),
                    None => {
                        acc.insert(id, gt.clone());
                    }
                }
            }
        }
        let mut list: Vec<(ParamId, Tensor<f32>)> = acc.into_iter().collect();
        if cfg.grad_accum > 1 {
            let s = 1.0 / cfg.grad_accum as f32;
            for (_, t) in &mut list {
                t.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
        if list.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFiniteLoss { stage: cfg.stage.name().into(), iteration: k });
        }
        observer.on_step(k, &ps, &list);
        opt.step_with(&mut ps, &list);
        losses.push(LossRecord { iteration: k, stage, loss: value });
    }
    for (id, f) in ps.ids().collect::<Vec<_>>().into_iter().zip(frozen) {
        ps.set_frozen(id, f);
    }
    Ok(StageOutput { model, params: ps, losses })
}

pub fn loss_csv(losses: &[LossRecord]) -> String {
    let mut s = String::from("iteration,stage,loss\n");
    for r in losses {
        s.push_str(&format!("{},{},{:e}\n", r.iteration, r.stage.tag(), r.loss));
    }
    s
}

/// Mean loss over the first and last `window` iterations.
pub fn head_tail_means(losses: &[LossRecord], window: usize) -> Option<(f64, f64)> {
    if losses.len() < window || window == 0 {
        return None;
    }
    let mean = |r: &[LossRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    Some((mean(&losses[..window]), mean(&losses[losses.len() - window..])))
}

pub const MODEL_FILE: &str = "model.json";

/// Writes the groups owned by `stage` and the model configuration into `dir`.
pub fn save_stage_checkpoint(dir: &Path, stage: Stage, model: &ModelConfig, ps: &ParamSet<f32>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = ParamSet::new();
    for e in ps.entries() {
        if stage.owns(&e.name) {
            out.insert(e.name.clone(), e.value.clone(), false);
        }
    }
    save_etw(&dir.join(stage.file_name()), &out)?;
    let json = serde_json::to_string_pretty(model).expect("model config serializes");
    write_atomic(&dir.join(MODEL_FILE), json.as_bytes())
}

pub fn load_model_config(dir: &Path) -> Result<ModelConfig> {
    let path = dir.join(MODEL_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Merges stage files found in `dirs`, in order; later files override earlier ones.
pub fn load_stage_files(dirs: &[(&Path, Stage)]) -> Result<ParamSet<f32>> {
    let mut ps = ParamSet::new();
    for (dir, stage) in dirs {
        let path = dir.join(stage.file_name());
        if !path.exists() {
            return Err(Error::MissingWeights(path.display().to_string()));
        }
        let part: ParamSet<f32> = load_etw(&path)?;
        ps.merge(&part);
    }
    Ok(ps)
}
