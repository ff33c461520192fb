//! Closed-form FLOP model of the sampler and the sparse-vs-dense benchmark.
//!
//! Counting convention: a multiply-add is 2 FLOPs, softmax, layer norm and
//! activations cost 5 per element, other elementwise arithmetic 1 per element,
//! gathers and concatenations are free. Only forward passes are counted and
//! patch encoding/decoding is excluded.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::codec::{GridDims, Video};
use crate::diffusion::{Pipeline, SampleConfig};
use crate::error::{Error, Result};
use crate::mask::{build_control_context, dilate_mask, LatentMask, PixelMask};
use crate::numeric::RngState;

const NL: u64 = 5;

fn linear(n: u64, din: u64, dout: u64) -> u64 {
    2 * n * din * dout + n * dout
}

fn lora(n: u64, din: u64, dout: u64, r: u64) -> u64 {
    2 * n * din * r + 2 * n * r * dout + 2 * n * dout
}

fn attention(nq: u64, nk: u64, d: u64, heads: u64, masked: bool) -> u64 {
    let per_head = nq * nk * (NL + u64::from(masked));
    nq * d + 4 * nq * nk * d + heads * per_head
}

/// What runs at each sampling step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopQuery {
    /// Tokens denoised per step.
    pub tokens: usize,
    pub prompt_len: usize,
    pub steps: usize,
    /// Whether the control branch runs, and whether it carries unmerged low-rank deltas.
    pub control: Option<bool>,
    /// Global tokens, when the embedder modulates cross attention.
    pub global_tokens: Option<usize>,
    /// Read-only context keys/values appended to self-attention.
    pub context_tokens: usize,
    /// Whether an additive self-attention mask is applied.
    pub masked: bool,
}

impl FlopQuery {
    pub fn sparse(tokens: usize, global_tokens: usize, prompt_len: usize, steps: usize) -> Self {
        FlopQuery { tokens, prompt_len, steps, control: Some(false), global_tokens: Some(global_tokens), context_tokens: 0, masked: false }
    }

    pub fn dense(tokens: usize, prompt_len: usize, steps: usize) -> Self {
        FlopQuery { tokens, prompt_len, steps, control: Some(false), global_tokens: None, context_tokens: 0, masked: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub tokens: usize,
    pub steps: usize,
    pub backbone_per_step: u64,
    pub control_per_step: u64,
    /// Global modulation inside the blocks, per step.
    pub global_per_step: u64,
    /// Global keys/values, once per run.
    pub global_once: u64,
}

impl FlopReport {
    pub fn per_step(&self) -> u64 {
        self.backbone_per_step + self.control_per_step + self.global_per_step
    }

    pub fn backbone(&self) -> u64 {
        self.backbone_per_step * self.steps as u64
    }

    pub fn control(&self) -> u64 {
        self.control_per_step * self.steps as u64
    }

    pub fn global(&self) -> u64 {
        self.global_per_step * self.steps as u64 + self.global_once
    }

    pub fn total(&self) -> u64 {
        self.backbone() + self.control() + self.global()
    }
}

struct BlockShape {
    n: u64,
    ctx: u64,
    prompt: u64,
    lora: Option<u64>,
    injection: bool,
    masked: bool,
}

/// One block; returns (own FLOPs, global-modulation FLOPs).
fn block(cfg: &ModelConfig, s: &BlockShape, global: Option<u64>) -> (u64, u64) {
    let d = cfg.d_model as u64;
    let h = cfg.heads as u64;
    let n = s.n;
    let lin = |din: u64, dout: u64| linear(n, din, dout) + s.lora.map_or(0, |r| lora(n, din, dout, r));
    let mut f = linear(1, d, 4 * d) + 2 * d;
    f += (NL + 2) * n * d;
    f += 3 * lin(d, d);
    f += attention(n, n + s.ctx, d, h, s.masked);
    f += lin(d, d) + n * d;
    f += (NL + 2) * n * d;
    f += linear(n, d, d) + 2 * linear(s.prompt, d, d);
    f += attention(n, s.prompt, d, h, false);
    f += linear(n, d, d);
    let g = global.map_or(0, |ng| attention(n, ng, d, h, false) + linear(n, d, d) + n * d);
    f += n * d;
    f += (NL + 2) * n * d;
    f += lin(d, 4 * d) + NL * n * 4 * d + lin(4 * d, d);
    if s.injection {
        f += n * d;
    }
    f += n * d;
    (f, g)
}

/// FLOPs of a sampling run as the instrumented graph counts them.
pub fn analytic_flops(cfg: &ModelConfig, q: &FlopQuery) -> Result<FlopReport> {
    if q.tokens == 0 || q.steps == 0 || q.prompt_len == 0 || q.global_tokens == Some(0) {
        return Err(Error::Config("token, prompt and step counts must be positive".into()));
    }
    let (d, c) = (cfg.d_model as u64, cfg.latent_channels as u64);
    let n = q.tokens as u64;
    let p = q.prompt_len as u64;
    let mut backbone = linear(1, d, d) + NL * d + p * d;
    backbone += linear(n, c, d) + 3 * n * d;
    let mut global_step = 0;
    for i in 0..cfg.blocks {
        let injection = q.control.is_some() && cfg.injection_blocks.contains(&i);
        let s = BlockShape { n, ctx: q.context_tokens as u64, prompt: p, lora: None, injection, masked: q.masked };
        let (f, g) = block(cfg, &s, q.global_tokens.map(|x| x as u64));
        backbone += f;
        global_step += g;
    }
    backbone += (NL + 2) * n * d + linear(n, d, c);
    let control = match q.control {
        None => 0,
        Some(with_lora) => {
            let r = with_lora.then_some(cfg.lora_rank as u64);
            let mut f = linear(n, c + 1, d) + 3 * n * d;
            for i in 0..cfg.control_blocks {
                let s = BlockShape { n, ctx: 0, prompt: p, lora: r, injection: false, masked: false };
                f += block(cfg, &s, None).0;
                if i < cfg.injection_blocks.len() {
                    f += linear(n, d, d);
                }
            }
            f
        }
    };
    let global_once = q.global_tokens.map_or(0, |ng| {
        let ng = ng as u64;
        linear(ng, c, d) + 3 * ng * d + cfg.blocks as u64 * 2 * linear(ng, d, d)
    });
    Ok(FlopReport {
        tokens: q.tokens,
        steps: q.steps,
        backbone_per_step: backbone,
        control_per_step: control,
        global_per_step: global_step,
        global_once,
    })
}

/// Global token count for a clip of `frames` frames.
pub fn global_tokens(cfg: &ModelConfig, frames: usize, patch: usize) -> usize {
    let side = cfg.global_size / patch;
    frames * side * side
}

/// Pixel mask of latent cells whose dilated selection is as close as possible
/// to `ratio` of the grid: a top-left rectangle repeated on every frame.
pub fn ratio_mask(dims: GridDims, patch: usize, radius: usize, ratio: f64) -> Result<PixelMask> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1]")));
    }
    let per = dims.per_frame() as f64;
    let mut best: Option<(f64, usize, usize)> = None;
    for a in 1..=dims.height {
        for b in 1..=dims.width {
            let sel = ((a + radius).min(dims.height) * (b + radius).min(dims.width)) as f64;
            let err = (sel / per - ratio).abs();
            if best.is_none_or(|(e, _, _)| err < e - 1e-12) {
                best = Some((err, a, b));
            }
        }
    }
    let (_, a, b) = best.expect("nonempty grid");
    let mut lm = LatentMask::empty(dims);
    for t in 0..dims.frames {
        for h in 0..a {
            for w in 0..b {
                lm.set(dims.flat(crate::codec::TokenCoord { t, h, w }), true);
            }
        }
    }
    debug_assert_eq!(dilate_mask(&lm, radius).count(), (dims.frames * (a + radius).min(dims.height) * (b + radius).min(dims.width)));
    Ok(lm.to_pixels(patch))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub ratios: Vec<f64>,
    /// `[frames, height, width]` in pixels.
    pub resolutions: Vec<[usize; 3]>,
    pub steps: usize,
    pub trials: usize,
    pub seed: u64,
    pub prompt: String,
    pub dilation_radius: usize,
    /// Skip the dense run (FLOPs still come from the analytic model).
    pub analytic_dense: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            ratios: vec![0.125, 0.25, 0.5, 1.0],
            resolutions: vec![[2, 64, 64]],
            steps: 25,
            trials: 5,
            seed: 0,
            prompt: "match-scene".into(),
            dilation_radius: 1,
            analytic_dense: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub resolution: String,
    pub frames: usize,
    pub ratio: f64,
    pub n_sel: usize,
    pub n_total: usize,
    pub steps: usize,
    pub flops_sparse: u64,
    pub flops_dense: u64,
    pub flops_global: u64,
    pub analytic_sparse: u64,
    pub analytic_dense: u64,
    pub wall_ms_sparse: f64,
    pub wall_ms_dense: Option<f64>,
}

fn median(mut xs: Vec<Duration>) -> f64 {
    xs.sort();
    let n = xs.len();
    let mid = if n % 2 == 1 { xs[n / 2].as_secs_f64() } else { (xs[n / 2 - 1].as_secs_f64() + xs[n / 2].as_secs_f64()) / 2.0 };
    mid * 1e3
}

/// Sparse and dense sampling over a grid of resolutions and mask ratios.
/// Wall-clock covers transformer passes only (median of `trials`).
pub fn bench_run(p: &Pipeline, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.trials == 0 || cfg.steps == 0 {
        return Err(Error::Config("trials and steps must be positive".into()));
    }
    let prompt = crate::prompt::parse_prompt(&cfg.prompt)?;
    let sc = SampleConfig { steps: cfg.steps, seed: cfg.seed, dilation_radius: cfg.dilation_radius, ..Default::default() };
    let mut rows = Vec::new();
    for &[f, h, w] in &cfg.resolutions {
        let dims = p.codec.grid_for(f, h, w)?;
        let mut rng = RngState::new(cfg.seed);
        let v = Video::new(crate::numeric::Tensor::rand_uniform(&[f, h, w, 3], 0.0, 1.0, &mut rng))?;
        for &ratio in &cfg.ratios {
            let m = ratio_mask(dims, p.codec.patch(), cfg.dilation_radius, ratio)?;
            let ctx = build_control_context(&p.codec, &v, &m, cfg.dilation_radius)?;
            let mut walls = Vec::with_capacity(cfg.trials);
            let mut measured = None;
            for _ in 0..cfg.trials {
                let t0 = Instant::now();
                let global = p.global_kv(&ctx.background)?;
                let out = p.denoise_edit(&ctx, &prompt, global.as_ref().map(|(kv, _)| kv), sc.seed, sc.steps, sc.clip_x0)?;
                walls.push(t0.elapsed());
                let mut fl = out.flops;
                if let Some((_, gf)) = &global {
                    fl.global += gf.total();
                }
                measured = Some(fl);
            }
            let sparse = measured.expect("trials > 0");
            let n_sel = ctx.selection.len();
            let ng = p.sparse_modules().0.global.as_ref().map(|_| global_tokens(p.cfg(), f, p.codec.patch()));
            let q = FlopQuery {
                tokens: n_sel,
                prompt_len: prompt.len(),
                steps: cfg.steps,
                control: p.sparse_modules().0.control.as_ref().map(|c| c.lora.is_some()),
                global_tokens: ng,
                context_tokens: 0,
                masked: false,
            };
            let analytic_sparse = analytic_flops(p.cfg(), &q)?.total();
            let dq = FlopQuery {
                tokens: dims.tokens(),
                prompt_len: prompt.len(),
                steps: cfg.steps,
                control: p.full_control().map(|_| false),
                global_tokens: None,
                context_tokens: 0,
                masked: false,
            };
            let analytic_dense = analytic_flops(p.cfg(), &dq)?.total();
            let (flops_dense, wall_dense) = if cfg.analytic_dense {
                (analytic_dense, None)
            } else {
                let mut walls = Vec::with_capacity(cfg.trials);
                let mut fl = 0;
                for _ in 0..cfg.trials {
                    let out = p.sample_full(&v, &m, &prompt, &sc)?;
                    walls.push(out.wall);
                    fl = out.flops.total();
                }
                (fl, Some(median(walls)))
            };
            rows.push(BenchRow {
                resolution: format!("{h}x{w}"),
                frames: f,
                ratio: n_sel as f64 / dims.tokens() as f64,
                n_sel,
                n_total: dims.tokens(),
                steps: cfg.steps,
                flops_sparse: sparse.total(),
                flops_dense,
                flops_global: sparse.global,
                analytic_sparse,
                analytic_dense,
                wall_ms_sparse: median(walls),
                wall_ms_dense: wall_dense,
            });
        }
    }
    Ok(rows)
}

pub const CSV_HEADER: &str = "resolution,F,r,N_sel,steps,flops_sparse,flops_dense,flops_global,wall_ms_sparse,wall_ms_dense";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("# FLOPs: multiply-add = 2, softmax/norm/activation = 5 per element, other elementwise = 1; transformer passes only\n");
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let dense = r.wall_ms_dense.map_or_else(|| "nan".to_string(), |x| format!("{x:.3}"));
        s.push_str(&format!(
            "{},{},{:.6},{},{},{},{},{},{:.3},{}\n",
            r.resolution, r.frames, r.ratio, r.n_sel, r.steps, r.flops_sparse, r.flops_dense, r.flops_global, r.wall_ms_sparse, dense
        ));
    }
    s
}

/// Two columns, ratio and sparse FLOPs normalized by the dense run at the same resolution.
pub fn plot_data(rows: &[BenchRow]) -> String {
    let mut s = String::from("# ratio normalized_flops\n");
    for r in rows {
        s.push_str(&format!("{:.6} {:.6}\n", r.ratio, r.flops_sparse as f64 / r.flops_dense as f64));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;
    use crate::codec::TokenCoord;
    use crate::diffusion::{denoise, DenoiseJob};
    use crate::numeric::Tensor;
    use crate::testutil::*;

    #[test]
    fn linear_in_steps_and_subset_equals_whole() {
        let cfg = tiny_cfg();
        let a = analytic_flops(&cfg, &FlopQuery::sparse(40, 16, 2, 5)).unwrap();
        let b = analytic_flops(&cfg, &FlopQuery::sparse(40, 16, 2, 10)).unwrap();
        assert_eq!(2 * (a.total() - a.global_once), b.total() - b.global_once);
        assert_eq!(a.per_step(), b.per_step());
        let dense = analytic_flops(&cfg, &FlopQuery::dense(40, 2, 5)).unwrap();
        assert_eq!(a.total() - a.global(), dense.total());
        assert!(analytic_flops(&cfg, &FlopQuery::dense(0, 2, 5)).is_err());
    }

    #[test]
    fn analytic_matches_instrumented_counts() {
        let p = tiny_pipeline(1, true, true);
        let mut rng = RngState::new(3);
        let v = random_video(&mut rng, 2, 16, 16);
        for (m, prompt) in [(rect_mask(2, 16, 16, 0, 4, 0, 8), vec![1]), (rect_mask(2, 16, 16, 4, 12, 4, 16), vec![0, 3, 5])] {
            let sc = SampleConfig { steps: 3, ..Default::default() };
            let out = p.sample_edit(&v, &m, &prompt, &sc).unwrap();
            let ng = global_tokens(p.cfg(), 2, 4);
            let rep = analytic_flops(p.cfg(), &FlopQuery::sparse(out.context.selection.len(), ng, prompt.len(), 3)).unwrap();
            assert_eq!(out.flops.backbone, rep.backbone());
            assert_eq!(out.flops.control, rep.control());
            assert_eq!(out.flops.global, rep.global());
            let full = p.sample_full(&v, &m, &prompt, &sc).unwrap();
            let rep = analytic_flops(p.cfg(), &FlopQuery::dense(32, prompt.len(), 3)).unwrap();
            assert_eq!(full.flops.total(), rep.total());
            assert_eq!(full.flops.control, rep.control());
        }
    }

    #[test]
    fn unmerged_lora_context_and_mask_terms() {
        let cfg = tiny_cfg();
        let mut rng = RngState::new(4);
        let ps = tiny_params(2, true, true);
        let modules = crate::diffusion::Modules::bind(&cfg, &ps).unwrap();
        let bb: &Backbone = &modules.backbone;
        let n = 12;
        let coords: Vec<TokenCoord> = (0..n).map(|i| TokenCoord { t: i / 4, h: i % 4, w: 1 }).collect();
        let rows = Tensor::randn(&[n, cfg.latent_channels + 1], 1.0, &mut rng);
        let ctx_rows = Tensor::randn(&[5, cfg.latent_channels], 1.0, &mut rng);
        let ctx_coords: Vec<TokenCoord> = (0..5).map(|i| TokenCoord { t: 3, h: i, w: 0 }).collect();
        let (context, _) = bb.context_kv(&ps, &ctx_rows, &ctx_coords, 1, &[2]).unwrap();
        let job = DenoiseJob {
            coords: &coords,
            control_rows: Some(&rows),
            control: modules.control.as_ref(),
            prompt: &[2],
            global: None,
            context: Some(&context),
            seed: 1,
            steps: 2,
            clip: None,
        };
        let out = denoise(bb, &ps, &crate::diffusion::NoiseSchedule::default(), &job).unwrap();
        let q = FlopQuery { tokens: n, prompt_len: 1, steps: 2, control: Some(true), global_tokens: None, context_tokens: 5, masked: false };
        let rep = analytic_flops(&cfg, &q).unwrap();
        assert_eq!(out.flops.backbone, rep.backbone());
        assert_eq!(out.flops.control, rep.control());

        // Masked dense forward.
        let mut g = crate::numeric::Graph::<f32>::new();
        let cond = bb.condition(&mut g, &ps, 10, &[1, 2]).unwrap();
        let x = g.constant(Tensor::randn(&[n, cfg.latent_channels], 1.0, &mut rng));
        let mask = crate::backbone::key_mask::<f32>(n, &[0, 3, 4]);
        let before = g.flops().total();
        let ex = crate::backbone::ForwardExtras { mask: Some(&mask), ..Default::default() };
        bb.predict_noise(&mut g, &ps, x, &coords, cond, ex).unwrap();
        let measured = g.flops().total() - before;
        let q = FlopQuery { tokens: n, prompt_len: 2, steps: 1, control: None, global_tokens: None, context_tokens: 0, masked: true };
        let rep = analytic_flops(&cfg, &q).unwrap();
        let cond_cost = 2 * 16 * 16 + 16 + 5 * 16 + 2 * 16;
        assert_eq!(measured + cond_cost, rep.backbone_per_step);
    }

    #[test]
    fn sparse_cost_is_resolution_independent() {
        let cfg = ModelConfig::default();
        let ng = global_tokens(&cfg, 2, 4);
        let a = analytic_flops(&cfg, &FlopQuery::sparse(100, ng, 1, 25)).unwrap();
        let dense_small = analytic_flops(&cfg, &FlopQuery::dense(512, 1, 25)).unwrap();
        let dense_big = analytic_flops(&cfg, &FlopQuery::dense(8192, 1, 25)).unwrap();
        assert!(dense_big.total() > 16 * dense_small.total());
        assert_eq!(a, analytic_flops(&cfg, &FlopQuery::sparse(100, ng, 1, 25)).unwrap());
    }

    #[test]
    fn ratio_masks_hit_their_targets() {
        let dims = GridDims::new(2, 16, 16);
        for r in [0.125, 0.25, 0.5, 1.0] {
            let m = ratio_mask(dims, 4, 1, r).unwrap();
            let lm = crate::mask::downsample_mask(&m, 4).unwrap();
            let got = dilate_mask(&lm, 1).count() as f64 / dims.tokens() as f64;
            assert!((got - r).abs() < 0.02, "{r}: {got}");
        }
        assert!(ratio_mask(dims, 4, 1, 0.0).is_err());
    }

    #[test]
    fn bench_rows_and_csv() {
        let p = tiny_pipeline(5, true, true);
        let cfg = BenchConfig { ratios: vec![0.25, 1.0], resolutions: vec![[2, 16, 16]], steps: 2, trials: 1, ..Default::default() };
        let rows = bench_run(&p, &cfg).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert_eq!(r.flops_sparse, r.analytic_sparse);
            assert_eq!(r.flops_dense, r.analytic_dense);
        }
        let full = &rows[1];
        assert_eq!(full.n_sel, full.n_total);
        assert_eq!(full.flops_sparse - full.flops_global, full.flops_dense);
        let csv = bench_csv(&rows);
        assert!(csv.lines().nth(1).unwrap() == CSV_HEADER);
        assert_eq!(plot_data(&rows).lines().count(), 3);
    }
}
