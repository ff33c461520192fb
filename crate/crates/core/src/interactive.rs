//! Multi-region editing and causal content propagation over a frame stream.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{causal_pad_global, GlobalKv};
use crate::codec::{LatentGrid, TokenCoord, Video};
use crate::diffusion::{denoise, DenoiseJob, DenoiseOutput, FlopBreakdown, Pipeline, SampleConfig};
use crate::error::{Error, Result};
use crate::flow::{advect_flow, estimate_flow, warp_frame, warp_mask, FlowField};
use crate::mask::{build_control_context, make_background, scatter_into, EditContext, PixelMask, RegionSet};
use crate::numeric::Tensor;
use crate::prompt::parse_prompt;

pub const THREADS_ENV: &str = "EDITCTRL_THREADS";

/// Worker cap for region lanes: `EDITCTRL_THREADS` when set, else the core count.
pub fn lane_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub struct LaneOutput {
    pub context: EditContext,
    pub denoised: DenoiseOutput,
}

pub struct MultiRegionOutput {
    pub video: Video,
    pub latent: LatentGrid,
    pub lanes: Vec<LaneOutput>,
}

impl MultiRegionOutput {
    pub fn flops(&self) -> FlopBreakdown {
        let mut total = FlopBreakdown::default();
        for l in &self.lanes {
            total.backbone += l.denoised.flops.backbone;
            total.control += l.denoised.flops.control;
            total.global += l.denoised.flops.global;
            total.counter.merge(&l.denoised.flops.counter);
        }
        total
    }
}

fn run_lane(p: &Pipeline, v: &Video, mask: &PixelMask, prompt: &str, seed: u64, cfg: &SampleConfig) -> Result<LaneOutput> {
    let ids = parse_prompt(prompt)?;
    let context = build_control_context(&p.codec, v, mask, cfg.dilation_radius)?;
    let global = p.global_kv(&context.background)?;
    let mut denoised = p.denoise_edit(&context, &ids, global.as_ref().map(|(kv, _)| kv), seed, cfg.steps, cfg.clip_x0)?;
    if let Some((_, gflops)) = &global {
        denoised.flops.global += gflops.total();
        denoised.flops.counter.merge(gflops);
    }
    Ok(LaneOutput { context, denoised })
}

/// Each region is an independent sparse lane with its own prompt and seed;
/// all lanes are scattered into one encoding of `v` and decoded once.
pub fn edit_multi_region(p: &Pipeline, v: &Video, regions: &RegionSet, cfg: &SampleConfig, threads: usize) -> Result<MultiRegionOutput> {
    let regions = RegionSet::new(regions.regions().to_vec(), p.codec.patch(), cfg.dilation_radius)?;
    let list = regions.regions();
    let workers = threads.clamp(1, list.len());
    let mut slots: Vec<Option<Result<LaneOutput>>> = (0..list.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, r) in slots.iter_mut().zip(list) {
            *slot = Some(run_lane(p, v, &r.mask, &r.prompt, r.seed, cfg));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results = std::sync::Mutex::new(&mut slots);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    let Some(r) = list.get(i) else { break };
                    let out = run_lane(p, v, &r.mask, &r.prompt, r.seed, cfg);
                    results.lock().expect("lane results")[i] = Some(out);
                });
            }
        });
    }
    let lanes = slots.into_iter().map(|s| s.expect("every lane ran")).collect::<Result<Vec<_>>>()?;
    let mut latent = p.codec.encode(v)?;
    for lane in &lanes {
        scatter_into(&lane.denoised.rows, &lane.context.selection, &mut latent)?;
    }
    let video = p.codec.decode(&latent)?;
    Ok(MultiRegionOutput { video, latent, lanes })
}

/// Pull-based frame stream; each call yields the next `(index, frame)`.
pub trait FrameSource {
    fn pull(&mut self) -> Result<Option<(usize, Video)>>;
}

/// Hands out the frames of a clip one at a time, starting at `first`.
pub struct VideoSource {
    video: Video,
    next: usize,
    first: usize,
}

impl VideoSource {
    /// `video` holds future frames only; its frame 0 has stream index `first`.
    pub fn new(video: Video, first: usize) -> Self {
        VideoSource { video, next: 0, first }
    }
}

impl FrameSource for VideoSource {
    fn pull(&mut self) -> Result<Option<(usize, Video)>> {
        if self.next >= self.video.frames() {
            return Ok(None);
        }
        let f = self.video.frame(self.next);
        self.next += 1;
        Ok(Some((self.first + self.next - 1, f)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    Pulled(usize),
    Generated { start: usize, end: usize, after: usize },
    Emitted(usize),
}

pub type Trace = Rc<RefCell<Vec<TraceEvent>>>;

/// Wraps a source and records every frame index it hands out.
pub struct InstrumentedSource<S> {
    pub inner: S,
    pub trace: Trace,
}

impl<S: FrameSource> FrameSource for InstrumentedSource<S> {
    fn pull(&mut self) -> Result<Option<(usize, Video)>> {
        let out = self.inner.pull()?;
        if let Some((i, _)) = &out {
            self.trace.borrow_mut().push(TraceEvent::Pulled(*i));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagateConfig {
    /// Latent frames generated together.
    pub chunk: usize,
    /// Width in pixels of the linear paste ramp outside the mask.
    pub feather: usize,
    pub steps: usize,
    pub seed: u64,
    pub dilation_radius: usize,
    /// Length of the global context window; missing frames are padded causally.
    pub total_frames: usize,
    /// Clamp clean-sample estimates to `[0, 1]` pixels at every step.
    pub clip_x0: bool,
}

impl Default for PropagateConfig {
    fn default() -> Self {
        PropagateConfig { chunk: 2, feather: 2, steps: 25, seed: 0, dilation_radius: 1, total_frames: 0, clip_x0: true }
    }
}

/// Frames known when propagation starts.
pub struct InitialEdit {
    pub frames: Video,
    pub edited: Video,
    pub masks: PixelMask,
    pub prompt: String,
}

#[derive(Clone, Debug)]
pub struct EmittedFrame {
    pub index: usize,
    pub frame: Video,
    pub generated: Video,
    pub mask: PixelMask,
    /// Paste weight per pixel.
    pub weights: Vec<f32>,
    /// Last acquired frame index when this content was generated.
    pub generated_after: usize,
    pub gen_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyRow {
    pub frame: usize,
    pub ahead: usize,
    pub gen_ms: f64,
}

pub fn latency_csv(rows: &[LatencyRow]) -> String {
    let mut s = String::from("frame,ahead_frames,gen_ms\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.3}\n", r.frame, r.ahead, r.gen_ms));
    }
    s
}

/// Paste weights: 1 inside the mask, then a linear ramp over `feather` pixels
/// of Chebyshev distance, 0 beyond.
pub fn feather_weights(m: &PixelMask, feather: usize) -> Vec<f32> {
    let (f, h, w) = m.dims();
    let r = feather as i64;
    let mut out = vec![0f32; f * h * w];
    for fr in 0..f {
        for y in 0..h {
            for x in 0..w {
                let i = (fr * h + y) * w + x;
                if m.get(fr, y, x) {
                    out[i] = 1.0;
                    continue;
                }
                let mut d = i64::MAX;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 && m.get(fr, yy as usize, xx as usize) {
                            d = d.min(dy.abs().max(dx.abs()));
                        }
                    }
                }
                if d <= r {
                    out[i] = 1.0 - d as f32 / (feather + 1) as f32;
                }
            }
        }
    }
    out
}

/// Blends `generated` into `acquired`; weight-0 pixels are copied untouched.
pub fn paste(acquired: &Video, generated: &Video, weights: &[f32]) -> Result<Video> {
    if acquired.dims() != generated.dims() {
        return Err(Error::shape("paste", format!("{:?} vs {:?}", acquired.dims(), generated.dims())));
    }
    let c = acquired.channels();
    let mut out = acquired.clone();
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let (dst, src) = (&mut out.data_mut()[i * c..(i + 1) * c], &generated.data()[i * c..(i + 1) * c]);
        if w == 1.0 {
            dst.copy_from_slice(src);
        } else {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = w * s + (1.0 - w) * *d;
            }
        }
    }
    Ok(out)
}

/// Global keys/values from the backgrounds acquired so far, padded to `total`.
/// Streams longer than the temporal position table keep only the most recent
/// window of that length.
pub fn causal_global(p: &Pipeline, acquired_backgrounds: &Video, total: usize) -> Result<Option<GlobalKv<f32>>> {
    let n = acquired_backgrounds.frames();
    let limit = p.cfg().max_grid[0];
    let want = total.max(n);
    let padded = if want <= limit {
        causal_pad_global(acquired_backgrounds, want)?
    } else if n >= limit {
        acquired_backgrounds.frames_range(n - limit, n)
    } else {
        causal_pad_global(acquired_backgrounds, limit)?
    };
    Ok(p.global_kv(&padded)?.map(|(kv, _)| kv))
}

/// Causal dependency state of a propagation run.
pub struct PropagationState {
    /// Index of the last acquired frame.
    pub k: usize,
    pub last_frame: Video,
    pub mask: PixelMask,
    pub flow: FlowField,
    pub pending: VecDeque<(usize, Video, PixelMask)>,
    backgrounds: Vec<Video>,
    context_rows: Tensor<f32>,
    context_coords: Vec<TokenCoord>,
    context_frames: usize,
}

pub enum FlowSource<'a> {
    /// Block matching between the last two acquired frames.
    Estimate,
    /// Known per-slice flow; slice `f` maps frame `f` to `f + 1`.
    Given(&'a FlowField),
}

fn known_flow(source: &FlowSource<'_>, prev: Option<&Video>, cur: &Video, k: usize) -> Result<FlowField> {
    let (h, w) = (cur.height(), cur.width());
    match (source, prev) {
        (_, None) => Ok(FlowField::zeros(1, h, w)),
        (FlowSource::Estimate, Some(p)) => estimate_flow(p, cur),
        (FlowSource::Given(f), Some(_)) => {
            if f.height != h || f.width != w || f.frames == 0 {
                return Err(Error::shape("propagate", "flow field does not match the frames"));
            }
            Ok(f.slice((k - 1).min(f.frames - 1)))
        }
    }
}

pub struct PropagationReport {
    pub emitted: usize,
    pub chunks: usize,
    pub latency: Vec<LatencyRow>,
}

pub enum PropagationEvent<'a> {
    Generated { start: usize, end: usize, after: usize },
    Emitted(&'a EmittedFrame),
}

/// Streams edited frames: each chunk is generated from frames `..= k` only,
/// then pasted into frames as they are pulled from `source`.
pub fn propagate(
    p: &Pipeline,
    init: &InitialEdit,
    source: &mut dyn FrameSource,
    flow_source: FlowSource<'_>,
    cfg: &PropagateConfig,
    sink: &mut dyn FnMut(PropagationEvent<'_>) -> Result<()>,
) -> Result<PropagationReport> {
    if cfg.chunk == 0 || cfg.steps == 0 {
        return Err(Error::Config("chunk and steps must be positive".into()));
    }
    let n0 = init.frames.frames();
    if n0 == 0 || init.edited.dims() != init.frames.dims() {
        return Err(Error::shape("propagate", "initial and edited frames must match and be nonempty"));
    }
    init.masks.check_video(&init.frames)?;
    let prompt = parse_prompt(&init.prompt)?;
    let (m, ps) = p.sparse_modules();
    let bb = &m.backbone;

    let tail = n0.saturating_sub(cfg.chunk);
    let tail_edit = init.edited.frames_range(tail, n0);
    let tail_ctx = build_control_context(&p.codec, &tail_edit, &init.masks.frames_range(tail, n0), cfg.dilation_radius)?;
    let tail_latent = p.codec.encode(&tail_edit)?;
    let mut state = PropagationState {
        k: n0 - 1,
        last_frame: init.frames.frame(n0 - 1),
        mask: init.masks.frame(n0 - 1),
        flow: known_flow(&flow_source, (n0 >= 2).then(|| init.frames.frame(n0 - 2)).as_ref(), &init.frames.frame(n0 - 1), n0 - 1)?,
        pending: VecDeque::new(),
        backgrounds: (0..n0).map(|f| make_background(&init.frames.frame(f), &init.masks.frame(f))).collect::<Result<_>>()?,
        context_rows: tail_latent.tokens().gather_rows(tail_ctx.selection.indices())?,
        context_coords: tail_ctx.latent_mask.dims().coords(tail_ctx.selection.indices()),
        context_frames: n0 - tail,
    };
    if state.mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut report = PropagationReport { emitted: 0, chunks: 0, latency: Vec::new() };
    loop {
        let start = Instant::now();
        let after = state.k;
        let mut frames = Vec::with_capacity(cfg.chunk);
        let mut masks = Vec::with_capacity(cfg.chunk);
        let (mut frame, mut mask) = (state.last_frame.clone(), state.mask.clone());
        let mut flow = state.flow.clone();
        for i in 1..=cfg.chunk {
            flow = advect_flow(&flow)?;
            frame = warp_frame(&frame, &flow)?;
            mask = warp_mask(&mask, &flow)?;
            if mask.is_empty() {
                return Err(Error::MaskLeftFrame { frame: after + i });
            }
            frames.push(frame.clone());
            masks.push(mask.clone());
        }
        let chunk_video = Video::concat(&frames)?;
        let chunk_mask = PixelMask::concat(&masks)?;
        let global = causal_global(p, &Video::concat(&state.backgrounds)?, cfg.total_frames)?;
        let ctx = build_control_context(&p.codec, &chunk_video, &chunk_mask, cfg.dilation_radius)?;
        let coords: Vec<TokenCoord> = ctx
            .latent_mask
            .dims()
            .coords(ctx.selection.indices())
            .into_iter()
            .map(|c| TokenCoord { t: c.t + state.context_frames, ..c })
            .collect();
        let (context, _) = bb.context_kv(ps, &state.context_rows, &state.context_coords, 1, &prompt)?;
        let job = DenoiseJob {
            coords: &coords,
            control_rows: m.control.as_ref().map(|_| &ctx.control_local),
            control: m.control.as_ref(),
            prompt: &prompt,
            global: match (&m.global, &global) {
                (Some(e), Some(kv)) => Some((e, kv)),
                _ => None,
            },
            context: Some(&context),
            seed: cfg.seed,
            steps: cfg.steps,
            clip: cfg.clip_x0.then_some(&p.codec),
        };
        let out = denoise(bb, ps, &p.schedule, &job)?;
        let mut latent = p.codec.encode(&chunk_video)?;
        scatter_into(&out.rows, &ctx.selection, &mut latent)?;
        let generated = p.codec.decode(&latent)?;
        let gen_ms = start.elapsed().as_secs_f64() * 1e3;
        report.chunks += 1;
        for (i, mk) in masks.into_iter().enumerate() {
            state.pending.push_back((after + 1 + i, generated.frame(i), mk));
        }
        sink(PropagationEvent::Generated { start: after + 1, end: after + 1 + cfg.chunk, after })?;

        while let Some((index, gen, mk)) = state.pending.pop_front() {
            let Some((got, acquired)) = source.pull()? else {
                return Ok(report);
            };
            if got != index {
                return Err(Error::StreamGap { expected: index, got });
            }
            if acquired.dims() != gen.dims() {
                return Err(Error::shape("propagate", format!("frame {got} is {:?}, expected {:?}", acquired.dims(), gen.dims())));
            }
            let weights = feather_weights(&mk, cfg.feather);
            let pasted = paste(&acquired, &gen, &weights)?;
            let emitted = EmittedFrame {
                index,
                frame: pasted,
                generated: gen,
                mask: mk.clone(),
                weights,
                generated_after: after,
                gen_ms,
            };
            sink(PropagationEvent::Emitted(&emitted))?;
            report.latency.push(LatencyRow { frame: index, ahead: index - after, gen_ms });
            report.emitted += 1;
            state.backgrounds.push(make_background(&acquired, &mk)?);
            state.flow = known_flow(&flow_source, Some(&state.last_frame), &acquired, index)?;
            state.last_frame = acquired;
            state.mask = mk;
            state.k = index;
        }
        state.context_rows = out.rows;
        state.context_coords = ctx.latent_mask.dims().coords(ctx.selection.indices());
        state.context_frames = cfg.chunk;
    }
}
