//! Noise schedule, training losses and the masked-token DDPM sampler.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::adapters::{ControlNet, GlobalEmbedder, GlobalKv, GLOBAL_PREFIX, LORA_PREFIX};
use crate::backbone::{Backbone, ContextKv, ForwardExtras, ModelConfig};
use crate::codec::{area_downsample, LatentGrid, PatchCodec, TokenCoord, Video};
use crate::error::{Error, Result};
use crate::mask::{build_control_context, scatter_into, EditContext, PixelMask};
use crate::numeric::{FlopCounter, Graph, ParamSet, RngState, Scalar, Tensor, Var};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_INFERENCE_STEPS: usize = 25;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Linear-beta DDPM schedule with `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if train_steps < 2 {
            return Err(Error::Config("train_steps must be at least 2".into()));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!("bad beta range [{beta_start}, {beta_end}]")));
        }
        let betas: Vec<f64> = (0..train_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (train_steps - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(train_steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule { betas, alpha_bar })
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t ∈ [1, T]`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `t ∈ [0, T]`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Evenly spaced `t_i = (i+1)·T/steps`, increasing.
    pub fn inference_steps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.train_steps();
        if steps == 0 || steps > t {
            return Err(Error::Config(format!("inference steps must be in 1..={t}, got {steps}")));
        }
        Ok((0..steps).map(|i| (i + 1) * t / steps).collect())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.train_steps() {
            return Err(Error::Timestep { t, max: self.train_steps() });
        }
        Ok(())
    }

    /// `√ᾱ_t·z + √(1−ᾱ_t)·ε` for a given `ε`.
    pub fn noise_with(&self, z: &Tensor<f32>, eps: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        z.zip_map(eps, |z, e| (a * z as f64 + b * e as f64) as f32)
    }

    /// Returns `(z^t, ε)` with `ε ~ N(0, I)`.
    pub fn add_noise(&self, z: &Tensor<f32>, t: usize, rng: &mut RngState) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.check_t(t)?;
        let eps = Tensor::randn(z.shape(), 1.0, rng);
        Ok((self.noise_with(z, &eps, t)?, eps))
    }

    /// One ancestral step from `t` to `t_prev < t` (`t_prev = 0` ends the chain).
    ///
    /// `noise` is only read when the posterior variance is nonzero.
    pub fn posterior_step(&self, x: &Tensor<f32>, eps_hat: &Tensor<f32>, t: usize, t_prev: usize, noise: &Tensor<f32>) -> Result<Tensor<f32>> {
        let x0 = self.predict_x0(x, eps_hat, t)?;
        self.posterior_from_x0(x, &x0, t, t_prev, noise)
    }

    /// Clean-sample estimate `(x − √(1−ᾱ_t) ε̂) / √ᾱ_t`.
    pub fn predict_x0(&self, x: &Tensor<f32>, eps_hat: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = x.clone();
        for (o, &e) in out.data_mut().iter_mut().zip(eps_hat.data()) {
            *o = ((*o as f64 - sb * e as f64) / sa) as f32;
        }
        Ok(out)
    }

    /// Ancestral step given an explicit clean-sample estimate `x0`.
    pub fn posterior_from_x0(&self, x: &Tensor<f32>, x0: &Tensor<f32>, t: usize, t_prev: usize, noise: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_t(t)?;
        if t_prev >= t {
            return Err(Error::Config(format!("t_prev {t_prev} must precede t {t}")));
        }
        let (ab, ab_prev) = (self.alpha_bar(t), self.alpha_bar(t_prev));
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        let mut out = x.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let mut v = c0 * x0.data()[i] as f64 + ct * x.data()[i] as f64;
            if sigma > 0.0 {
                v += sigma * noise.data()[i] as f64;
            }
            *o = v as f32;
        }
        Ok(out)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(DEFAULT_TRAIN_STEPS, BETA_START, BETA_END).expect("default schedule")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Guidance {
    #[default]
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub seed: u64,
    pub dilation_radius: usize,
    pub guidance: Guidance,
    /// Clamp clean-sample estimates to `[0, 1]` pixels at every step.
    pub clip_x0: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { steps: DEFAULT_INFERENCE_STEPS, seed: 0, dilation_radius: crate::mask::DEFAULT_DILATION, guidance: Guidance::None, clip_x0: true }
    }
}

/// Module layouts bound to one parameter set.
#[derive(Clone, Debug)]
pub struct Modules {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub control: Option<ControlNet>,
    pub global: Option<GlobalEmbedder>,
}

impl Modules {
    /// Binds whatever adapters the set contains.
    pub fn bind<T: Scalar>(cfg: &ModelConfig, ps: &ParamSet<T>) -> Result<Self> {
        let backbone = Backbone::bind(cfg.clone(), ps)?;
        let control = if ps.contains("control.patch.w") { Some(ControlNet::bind(cfg, ps)?) } else { None };
        let global = if ps.contains(&format!("{GLOBAL_PREFIX}patch.w")) { Some(GlobalEmbedder::bind(cfg, ps)?) } else { None };
        Ok(Modules { cfg: cfg.clone(), backbone, control, global })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossStage {
    Dm,
    Cdm,
    Phi,
    Psi,
}

impl LossStage {
    pub fn tag(self) -> &'static str {
        match self {
            LossStage::Dm => "dm",
            LossStage::Cdm => "cdm",
            LossStage::Phi => "phi",
            LossStage::Psi => "psi",
        }
    }
}

/// One noised training example, already tokenized.
#[derive(Clone, Debug)]
pub struct NoisyItem<T: Scalar = f32> {
    pub zt: Tensor<T>,
    pub eps: Tensor<T>,
    pub t: usize,
    pub coords: Vec<TokenCoord>,
    pub prompt: Vec<usize>,
    /// Control rows (`c + 1` channels) aligned with `zt`.
    pub control: Option<Tensor<T>>,
    /// Per-row loss weights; `None` weights every row equally.
    pub weights: Option<Vec<f64>>,
    /// Encoded downsampled background and its small-grid coordinates.
    pub global: Option<(Tensor<T>, Vec<TokenCoord>)>,
}

impl<T: Scalar> NoisyItem<T> {
    pub fn cast<U: Scalar>(&self) -> NoisyItem<U> {
        NoisyItem {
            zt: self.zt.cast(),
            eps: self.eps.cast(),
            t: self.t,
            coords: self.coords.clone(),
            prompt: self.prompt.clone(),
            control: self.control.as_ref().map(Tensor::cast),
            weights: self.weights.clone(),
            global: self.global.as_ref().map(|(r, c)| (r.cast(), c.clone())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub value: f64,
    /// Squared residual norm of each row, per item.
    pub per_token: Vec<Vec<f64>>,
    pub stage: LossStage,
}

/// `Σ_i w_i‖pred_i − ε_i‖² / (c·Σ_i w_i)` as a graph node.
pub fn masked_mse<T: Scalar>(g: &mut Graph<T>, pred: Var, eps: &Tensor<T>, weights: Option<&[f64]>) -> Result<(Var, Vec<f64>)> {
    let (n, c) = (eps.rows(), eps.cols());
    if g.shape(pred) != eps.shape() {
        return Err(Error::shape("loss", format!("prediction {:?} vs target {:?}", g.shape(pred), eps.shape())));
    }
    let w: Vec<f64> = match weights {
        Some(w) if w.len() != n => return Err(Error::shape("loss", format!("{} weights for {n} rows", w.len()))),
        Some(w) => w.to_vec(),
        None => vec![1.0; n],
    };
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeight);
    }
    let target = g.constant(eps.clone());
    let r = g.sub(pred, target)?;
    let r2 = g.mul(r, r)?;
    let per_token = (0..n).map(|i| g.value(r2).row(i).iter().map(|v| v.as_f64()).sum()).collect();
    let mut k = Vec::with_capacity(n * c);
    for &wi in &w {
        k.extend(std::iter::repeat_n(T::from_f64(wi / (total * c as f64)), c));
    }
    let weighted = g.mul_const(r2, Tensor::new(vec![n, c], k)?)?;
    Ok((g.sum(weighted), per_token))
}

/// Noise prediction for one item; which adapters run is fixed by `stage`.
pub fn predict_item<T: Scalar>(g: &mut Graph<T>, m: &Modules, ps: &ParamSet<T>, item: &NoisyItem<T>, stage: LossStage) -> Result<Var> {
    let bb = &m.backbone;
    let cond = bb.condition(g, ps, item.t, &item.prompt)?;
    let injections = match stage {
        LossStage::Dm => None,
        _ => {
            let control = m.control.as_ref().ok_or_else(|| Error::MissingWeights("control module".into()))?;
            let rows = item.control.as_ref().ok_or_else(|| Error::Config("item has no control rows".into()))?;
            let c = g.constant(rows.clone());
            Some(control.forward(g, ps, bb, c, &item.coords, cond)?)
        }
    };
    let hook = match stage {
        LossStage::Psi => {
            let global = m.global.as_ref().ok_or_else(|| Error::MissingWeights("global embedder".into()))?;
            let (rows, coords) = item.global.as_ref().ok_or_else(|| Error::Config("item has no global context".into()))?;
            let tokens = global.embed_rows(g, ps, bb, rows, coords)?;
            Some(global.hook(g, ps, tokens, bb.cfg.heads)?)
        }
        _ => None,
    };
    let zt = g.constant(item.zt.clone());
    let ex = ForwardExtras {
        injections: injections.as_deref(),
        hook: hook.as_ref().map(|h| h as &dyn crate::backbone::CrossHook<T>),
        ..Default::default()
    };
    bb.predict_noise(g, ps, zt, &item.coords, cond, ex)
}

/// Mean of per-item losses over a batch.
pub fn batch_loss<T: Scalar>(g: &mut Graph<T>, m: &Modules, ps: &ParamSet<T>, items: &[NoisyItem<T>], stage: LossStage) -> Result<(Var, LossBreakdown)> {
    if items.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut total: Option<Var> = None;
    let mut per_token = Vec::with_capacity(items.len());
    for item in items {
        let weights = match stage {
            LossStage::Phi | LossStage::Psi => {
                Some(item.weights.as_deref().ok_or_else(|| Error::Config("masked loss needs row weights".into()))?)
            }
            _ => None,
        };
        let pred = predict_item(g, m, ps, item, stage)?;
        let (l, pt) = masked_mse(g, pred, &item.eps, weights)?;
        per_token.push(pt);
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    let loss = g.scale(total.expect("nonempty"), 1.0 / items.len() as f64);
    let value = g.value(loss).item().as_f64();
    Ok((loss, LossBreakdown { value, per_token, stage }))
}

pub fn loss_dm<T: Scalar>(g: &mut Graph<T>, m: &Modules, ps: &ParamSet<T>, items: &[NoisyItem<T>]) -> Result<(Var, LossBreakdown)> {
    batch_loss(g, m, ps, items, LossStage::Dm)
}

pub fn loss_cdm<T: Scalar>(g: &mut Graph<T>, m: &Modules, ps: &ParamSet<T>, items: &[NoisyItem<T>]) -> Result<(Var, LossBreakdown)> {
    batch_loss(g, m, ps, items, LossStage::Cdm)
}

pub fn loss_phi<T: Scalar>(g: &mut Graph<T>, m: &Modules, ps: &ParamSet<T>, items: &[NoisyItem<T>]) -> Result<(Var, LossBreakdown)> {
    batch_loss(g, m, ps, items, LossStage::Phi)
}

pub fn loss_psi<T: Scalar>(g: &mut Graph<T>, m: &Modules, ps: &ParamSet<T>, items: &[NoisyItem<T>]) -> Result<(Var, LossBreakdown)> {
    batch_loss(g, m, ps, items, LossStage::Psi)
}

/// Local-only loss before iteration `n`, local plus global from `n` on.
pub fn piecewise_stage(k: usize, n: usize) -> LossStage {
    if k < n {
        LossStage::Phi
    } else {
        LossStage::Psi
    }
}

pub fn piecewise_loss<T: Scalar>(
    g: &mut Graph<T>,
    k: usize,
    n: usize,
    m: &Modules,
    ps: &ParamSet<T>,
    items: &[NoisyItem<T>],
) -> Result<(Var, LossBreakdown)> {
    batch_loss(g, m, ps, items, piecewise_stage(k, n))
}

/// FLOPs split by module.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub backbone: u64,
    pub control: u64,
    /// Global keys/values (once per run) plus per-step modulation.
    pub global: u64,
    pub counter: FlopCounter,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.backbone + self.control + self.global
    }

    fn merge(&mut self, other: &FlopBreakdown) {
        self.backbone += other.backbone;
        self.control += other.control;
        self.global += other.global;
        self.counter.merge(&other.counter);
    }
}

/// Modulation hook wrapper that attributes its FLOPs separately.
struct CountingHook<'a, H> {
    inner: &'a H,
    flops: std::cell::Cell<u64>,
}

impl<T: Scalar, H: crate::backbone::CrossHook<T>> crate::backbone::CrossHook<T> for CountingHook<'_, H> {
    fn modulate(&self, g: &mut Graph<T>, ps: &ParamSet<T>, block: usize, x: Var, q: Var) -> Result<Var> {
        let before = g.flops().total();
        let out = self.inner.modulate(g, ps, block, x, q)?;
        self.flops.set(self.flops.get() + g.flops().total() - before);
        Ok(out)
    }
}

/// A denoising job over a fixed row set.
pub struct DenoiseJob<'a> {
    pub coords: &'a [TokenCoord],
    pub control_rows: Option<&'a Tensor<f32>>,
    pub control: Option<&'a ControlNet>,
    pub prompt: &'a [usize],
    pub global: Option<(&'a GlobalEmbedder, &'a GlobalKv<f32>)>,
    pub context: Option<&'a ContextKv<f32>>,
    pub seed: u64,
    pub steps: usize,
    /// Clamp every clean-sample estimate to the codec's pixel range.
    pub clip: Option<&'a PatchCodec>,
}

#[derive(Clone, Debug)]
pub struct DenoiseOutput {
    pub rows: Tensor<f32>,
    pub flops: FlopBreakdown,
    pub per_step: Vec<FlopBreakdown>,
    pub wall: Duration,
}

/// Runs the ancestral chain for `job` with parameters `ps`.
pub fn denoise(bb: &Backbone, ps: &ParamSet<f32>, schedule: &NoiseSchedule, job: &DenoiseJob<'_>) -> Result<DenoiseOutput> {
    let start = Instant::now();
    let ts = schedule.inference_steps(job.steps)?;
    let n = job.coords.len();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let c = bb.cfg.latent_channels;
    let mut rng = RngState::new(job.seed);
    let mut x = Tensor::randn(&[n, c], 1.0, &mut rng);
    let mut per_step = Vec::with_capacity(ts.len());
    let mut total = FlopBreakdown::default();
    for i in (0..ts.len()).rev() {
        let (t, t_prev) = (ts[i], if i == 0 { 0 } else { ts[i - 1] });
        let mut g = Graph::new();
        let cond = bb.condition(&mut g, ps, t, job.prompt)?;
        let after_cond = g.flops().total();
        let injections = match (job.control, job.control_rows) {
            (Some(net), Some(rows)) => {
                let r = g.constant(rows.clone());
                Some(net.forward(&mut g, ps, bb, r, job.coords, cond)?)
            }
            (None, None) => None,
            _ => return Err(Error::Config("control module and control rows must come together".into())),
        };
        let control_flops = g.flops().total() - after_cond;
        let hook = match job.global {
            Some((emb, kv)) => Some(emb.hook_from_kv(&mut g, kv, bb.cfg.heads)?),
            None => None,
        };
        let counting = hook.as_ref().map(|h| CountingHook { inner: h, flops: std::cell::Cell::new(0) });
        let xv = g.constant(x.clone());
        let ex = ForwardExtras {
            injections: injections.as_deref(),
            hook: counting.as_ref().map(|h| h as &dyn crate::backbone::CrossHook<f32>),
            context: job.context,
            mask: None,
        };
        let eps = bb.predict_noise(&mut g, ps, xv, job.coords, cond, ex)?;
        let global_flops = counting.as_ref().map_or(0, |h| h.flops.get());
        let step = FlopBreakdown {
            backbone: g.flops().total() - control_flops - global_flops,
            control: control_flops,
            global: global_flops,
            counter: g.flops().clone(),
        };
        total.merge(&step);
        per_step.push(step);
        let noise = if t_prev > 0 { Tensor::randn(&[n, c], 1.0, &mut rng) } else { Tensor::zeros(&[n, c]) };
        let mut x0 = schedule.predict_x0(&x, g.value(eps), t)?;
        if let Some(codec) = job.clip {
            codec.clamp_rows(&mut x0, 0.0, 1.0)?;
        }
        x = schedule.posterior_from_x0(&x, &x0, t, t_prev, &noise)?;
    }
    Ok(DenoiseOutput { rows: x, flops: total, per_step, wall: start.elapsed() })
}

/// Everything needed to sample: modules, parameters, codec and schedule.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub modules: Modules,
    /// Parameters as trained (low-rank deltas separate).
    pub ps: ParamSet<f32>,
    /// Deltas folded into the control weights, for sparse sampling.
    pub merged: Option<(Modules, ParamSet<f32>)>,
    pub codec: PatchCodec,
    pub schedule: NoiseSchedule,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub video: Video,
    pub latent: LatentGrid,
    pub context: EditContext,
    pub flops: FlopBreakdown,
    /// Denoising wall-clock, excluding encode/decode.
    pub wall: Duration,
}

impl Pipeline {
    pub fn new(cfg: &ModelConfig, ps: ParamSet<f32>) -> Result<Self> {
        let modules = Modules::bind(cfg, &ps)?;
        let merged = match &modules.control {
            Some(c) if c.lora.is_some() => {
                let (_, mps) = c.merge_lora(cfg, &ps)?;
                Some((Modules::bind(cfg, &mps)?, mps))
            }
            _ => None,
        };
        let codec = PatchCodec::new(crate::codec::DEFAULT_PATCH, crate::codec::CHANNELS);
        if codec.latent_channels() != cfg.latent_channels {
            return Err(Error::Config(format!("codec yields {} channels, model expects {}", codec.latent_channels(), cfg.latent_channels)));
        }
        let schedule = NoiseSchedule::linear(cfg.train_steps, BETA_START, BETA_END)?;
        Ok(Pipeline { modules, ps, merged, codec, schedule })
    }

    /// The same backbone with all adapters removed.
    pub fn base_only(&self) -> Result<Self> {
        let mut ps = self.ps.clone();
        for p in crate::adapters::ADAPTER_PREFIXES {
            ps.remove_prefix(p);
        }
        Pipeline::new(&self.modules.cfg, ps)
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.modules.cfg
    }

    /// Modules and parameters used by the sparse sampler.
    pub fn sparse_modules(&self) -> (&Modules, &ParamSet<f32>) {
        match &self.merged {
            Some((m, ps)) => (m, ps),
            None => (&self.modules, &self.ps),
        }
    }

    /// Control module without low-rank deltas, as pretrained with full attention.
    pub fn full_control(&self) -> Option<ControlNet> {
        self.modules.control.clone().map(|mut c| {
            c.lora = None;
            c
        })
    }

    pub fn global_input(&self, background: &Video) -> Result<Video> {
        area_downsample(background, self.cfg().global_size)
    }

    /// Global keys/values of a background, when the embedder is present.
    pub fn global_kv(&self, background: &Video) -> Result<Option<(GlobalKv<f32>, FlopCounter)>> {
        let (m, ps) = self.sparse_modules();
        match &m.global {
            Some(emb) => {
                let down = self.global_input(background)?;
                Ok(Some(emb.precompute(ps, &m.backbone, &self.codec, &down)?))
            }
            None => Ok(None),
        }
    }

    /// Sparse denoising of the selected rows of `ctx`; returns the final rows.
    pub fn denoise_edit(
        &self,
        ctx: &EditContext,
        prompt: &[usize],
        global: Option<&GlobalKv<f32>>,
        seed: u64,
        steps: usize,
        clip: bool,
    ) -> Result<DenoiseOutput> {
        let dims = ctx.latent_mask.dims();
        let coords = dims.coords(ctx.selection.indices());
        let (m, ps) = self.sparse_modules();
        let job = DenoiseJob {
            coords: &coords,
            control_rows: m.control.as_ref().map(|_| &ctx.control_local),
            control: m.control.as_ref(),
            prompt,
            global: match (&m.global, global) {
                (Some(e), Some(kv)) => Some((e, kv)),
                _ => None,
            },
            context: None,
            seed,
            steps,
            clip: clip.then_some(&self.codec),
        };
        denoise(&m.backbone, ps, &self.schedule, &job)
    }

    /// Masked sparse edit: only tokens of the dilated mask are denoised.
    pub fn sample_edit(&self, v: &Video, m: &PixelMask, prompt: &[usize], cfg: &SampleConfig) -> Result<SampleOutput> {
        let ctx = build_control_context(&self.codec, v, m, cfg.dilation_radius)?;
        let global = self.global_kv(&ctx.background)?;
        let mut out = self.denoise_edit(&ctx, prompt, global.as_ref().map(|(kv, _)| kv), cfg.seed, cfg.steps, cfg.clip_x0)?;
        if let Some((_, gflops)) = &global {
            out.flops.global += gflops.total();
            out.flops.counter.merge(gflops);
        }
        let mut latent = self.codec.encode(v)?;
        scatter_into(&out.rows, &ctx.selection, &mut latent)?;
        let video = self.codec.decode(&latent)?;
        Ok(SampleOutput { video, latent, context: ctx, flops: out.flops, wall: out.wall })
    }

    /// Full-attention baseline: every token denoised with full-context control;
    /// rows outside the dilated mask are restored from the input.
    pub fn sample_full(&self, v: &Video, m: &PixelMask, prompt: &[usize], cfg: &SampleConfig) -> Result<SampleOutput> {
        let ctx = build_control_context(&self.codec, v, m, cfg.dilation_radius)?;
        let dims = ctx.latent_mask.dims();
        let coords = dims.all_coords();
        let control = self.full_control();
        let job = DenoiseJob {
            coords: &coords,
            control_rows: control.as_ref().map(|_| &ctx.control),
            control: control.as_ref(),
            prompt,
            global: None,
            context: None,
            seed: cfg.seed,
            steps: cfg.steps,
            clip: cfg.clip_x0.then_some(&self.codec),
        };
        let out = denoise(&self.modules.backbone, &self.ps, &self.schedule, &job)?;
        let mut latent = self.codec.encode(v)?;
        let rows = out.rows.gather_rows(ctx.selection.indices())?;
        scatter_into(&rows, &ctx.selection, &mut latent)?;
        let video = self.codec.decode(&latent)?;
        Ok(SampleOutput { video, latent, context: ctx, flops: out.flops, wall: out.wall })
    }
}

/// Builds one masked training item from clean latent rows of a selection.
#[allow(clippy::too_many_arguments)]
pub fn masked_item(
    schedule: &NoiseSchedule,
    z0: &LatentGrid,
    ctx: &EditContext,
    prompt: &[usize],
    global: Option<(Tensor<f32>, Vec<TokenCoord>)>,
    t: usize,
    rng: &mut RngState,
) -> Result<NoisyItem<f32>> {
    let rows = z0.tokens().gather_rows(ctx.selection.indices())?;
    let (zt, eps) = schedule.add_noise(&rows, t, rng)?;
    Ok(NoisyItem {
        zt,
        eps,
        t,
        coords: ctx.latent_mask.dims().coords(ctx.selection.indices()),
        prompt: prompt.to_vec(),
        control: Some(ctx.control_local.clone()),
        weights: Some(ctx.selected_weights().into_iter().map(f64::from).collect()),
        global,
    })
}

/// Builds one full-grid training item; `control` carries all control rows.
pub fn full_item(
    schedule: &NoiseSchedule,
    z0: &LatentGrid,
    control: Option<&Tensor<f32>>,
    prompt: &[usize],
    t: usize,
    rng: &mut RngState,
) -> Result<NoisyItem<f32>> {
    let (zt, eps) = schedule.add_noise(z0.tokens(), t, rng)?;
    Ok(NoisyItem {
        zt,
        eps,
        t,
        coords: z0.dims().all_coords(),
        prompt: prompt.to_vec(),
        control: control.cloned(),
        weights: None,
        global: None,
    })
}

/// Whether a parameter belongs to the low-rank or global adapter groups.
pub fn is_fine_tune_param(name: &str) -> bool {
    name.starts_with(LORA_PREFIX) || name.starts_with(GLOBAL_PREFIX) || name.starts_with(crate::adapters::INJECT_PREFIX)
}
