//! End-to-end acceptance suite. Prints one `criterion N: PASS|FAIL` line each.
//!
//! Criteria 8, 9 and 11 train the default three-stage model for three seeds.
//! Set `EDITCTRL_ACCEPTANCE_CACHE` to a directory to keep those checkpoints
//! between runs; an empty or missing directory trains from scratch.
//! `EDITCTRL_ACCEPTANCE_ONLY=1,4,12` runs a subset.

use std::cell::RefCell;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::rc::Rc;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use editctrl::adapters::{ControlNet, GlobalEmbedder, GLOBAL_PREFIX, INJECT_PREFIX, LORA_PREFIX};
use editctrl::backbone::{key_mask, Backbone, ForwardExtras, ModelConfig};
use editctrl::codec::{GridDims, PatchCodec, Video};
use editctrl::diffusion::{
    is_fine_tune_param, loss_phi, loss_psi, masked_item, piecewise_loss, predict_item, LossStage, Modules, NoisyItem, Pipeline,
    SampleConfig,
};
use editctrl::flow::{iou, warp_mask, FlowField};
use editctrl::interactive::{
    edit_multi_region, propagate, EmittedFrame, FlowSource, InitialEdit, InstrumentedSource, PropagateConfig, PropagationEvent, Trace,
    TraceEvent, VideoSource,
};
use editctrl::io::{load_etw, save_etf, save_etw};
use editctrl::mask::{
    augment_mask, build_control_context, dilate_mask, downsample_mask, edit_footprint, select_tokens, PixelMask, Region, RegionSet,
};
use editctrl::numeric::{check_params, finite_difference_check, GradCheck};
use editctrl::perf::{analytic_flops, bench_run, global_tokens, BenchConfig, FlopQuery};
use editctrl::prompt::parse_prompt;
use editctrl::training::data::Scene;
use editctrl::training::stage::head_tail_means;
use editctrl::training::{
    build_ablation, edit_metrics, masked_mse, match_scene_split, run_stage, DataConfig, LossRecord, Stage, TrainConfig, Variant,
};
use editctrl::{Graph, ParamSet, RngState, Tensor, Var};

const SEEDS: [u64; 3] = [0, 1, 2];
const EVAL_SAMPLES: usize = 24;
const EVAL_SEED_OFFSET: u64 = 1_000_000;
const CACHE_ENV: &str = "EDITCTRL_ACCEPTANCE_CACHE";
const ONLY_ENV: &str = "EDITCTRL_ACCEPTANCE_ONLY";

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn selected(id: u8) -> bool {
    match std::env::var(ONLY_ENV) {
        Ok(list) if !list.trim().is_empty() => list.split(',').any(|x| x.trim().parse() == Ok(id)),
        _ => true,
    }
}

fn report(results: &mut Vec<(u8, bool)>, id: u8, f: impl FnOnce() -> Result<Verdict>) {
    if !selected(id) {
        return;
    }
    let start = Instant::now();
    let (pass, detail) = match f() {
        Ok(v) => (v.pass, v.detail),
        Err(e) => (false, format!("error: {e:#}")),
    };
    let secs = start.elapsed().as_secs_f64();
    println!("criterion {id}: {}: {detail} [{secs:.1} s]", if pass { "PASS" } else { "FAIL" });
    results.push((id, pass));
}

fn randomize(ps: &mut ParamSet<f32>, prefix: &str, std: f64, rng: &mut RngState) {
    for id in ps.ids_with_prefix(prefix).collect::<Vec<_>>() {
        let s = ps.get(id).shape().to_vec();
        *ps.get_mut(id) = Tensor::randn(&s, std, rng);
    }
}

fn randomize64(ps: &mut ParamSet<f64>, prefix: &str, std: f64, rng: &mut RngState) {
    for id in ps.ids_with_prefix(prefix).collect::<Vec<_>>() {
        let s = ps.get(id).shape().to_vec();
        *ps.get_mut(id) = Tensor::randn(&s, std, rng);
    }
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        blocks: 2,
        injection_blocks: vec![1],
        control_blocks: 1,
        lora_rank: 2,
        lora_alpha: 4.0,
        global_size: 8,
        max_grid: [4, 8, 8],
        ..ModelConfig::default()
    }
}

/// Backbone with random modulation; adapters fresh or, with `std > 0`, perturbed.
fn random_params(cfg: &ModelConfig, seed: u64, adapters: bool, std: f64) -> Result<ParamSet<f32>> {
    let mut rng = RngState::new(seed);
    let mut ps = ParamSet::new();
    let bb = Backbone::new(cfg.clone(), &mut ps, &mut rng)?;
    for id in ps.ids().collect::<Vec<_>>() {
        if ps.name(id).contains("modulation") {
            let s = ps.get(id).shape().to_vec();
            *ps.get_mut(id) = Tensor::randn(&s, 0.1, &mut rng);
        }
    }
    if adapters {
        let mut control = ControlNet::new(&bb, &mut ps, &mut rng);
        control.attach_lora(cfg, &mut ps, &mut rng);
        GlobalEmbedder::new(&bb, &mut ps, &mut rng);
        if std > 0.0 {
            for prefix in [INJECT_PREFIX, LORA_PREFIX] {
                randomize(&mut ps, prefix, std, &mut rng);
            }
            for id in ps.ids_with_prefix(GLOBAL_PREFIX).filter(|&id| ps.name(id).contains(".o.")).collect::<Vec<_>>() {
                let s = ps.get(id).shape().to_vec();
                *ps.get_mut(id) = Tensor::randn(&s, std, &mut rng);
            }
        }
    }
    Ok(ps)
}

fn random_video(rng: &mut RngState, f: usize, h: usize, w: usize) -> Result<Video> {
    Ok(Video::new(Tensor::rand_uniform(&[f, h, w, 3], 0.0, 1.0, rng))?)
}

fn rect_mask(f: usize, h: usize, w: usize, ys: std::ops::Range<usize>, xs: std::ops::Range<usize>) -> PixelMask {
    let mut m = PixelMask::empty(f, h, w);
    for fr in 0..f {
        for y in ys.clone() {
            for x in xs.clone() {
                m.set(fr, y, x, true);
            }
        }
    }
    m
}

fn masked_items(p: &Pipeline, seed: u64, count: usize) -> Result<Vec<NoisyItem<f32>>> {
    let mut rng = RngState::new(seed);
    let global = p.modules.global.as_ref().context("pipeline has no global embedder")?;
    (0..count)
        .map(|i| {
            let v = random_video(&mut rng, 2, 16, 16)?;
            let m = augment_mask(&mut rng, 2, 16, 16);
            let ctx = build_control_context(&p.codec, &v, &m, 1)?;
            let z0 = p.codec.encode(&v)?;
            let g = global.encode_input(&p.codec, &p.global_input(&ctx.background)?)?;
            let t = 1 + rng.below(p.cfg().train_steps);
            let prompt = parse_prompt(if i % 2 == 0 { "match-scene" } else { "fill:blue" })?;
            Ok(masked_item(&p.schedule, &z0, &ctx, &prompt, Some(g), t, &mut rng)?)
        })
        .collect()
}

fn c1_codec() -> Result<Verdict> {
    let start = Instant::now();
    let codec = PatchCodec::default();
    let mut rng = RngState::new(1);
    let mut worst = 0f64;
    for _ in 0..100 {
        let (f, h, w) = (1 + rng.below(4), 4 * (1 + rng.below(8)), 4 * (1 + rng.below(8)));
        let v = random_video(&mut rng, f, h, w)?;
        let back = codec.decode(&codec.encode(&v)?)?;
        worst = worst.max(back.tensor().max_abs_diff(v.tensor()));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(worst <= 1e-5 && secs < 5.0, format!("max error {worst:.2e} over 100 videos in {secs:.2} s")))
}

fn c2_sparse_dense() -> Result<Verdict> {
    let start = Instant::now();
    let cfg = ModelConfig::default();
    let ps = random_params(&cfg, 2, false, 0.0)?;
    let bb = Backbone::bind(cfg.clone(), &ps)?;
    let grids = [GridDims::new(2, 16, 16), GridDims::new(8, 8, 8), GridDims::new(4, 8, 16), GridDims::new(2, 8, 32)];
    let mut rng = RngState::new(3);
    let mut worst = 0f64;
    for i in 0..50 {
        let dims = grids[i % grids.len()];
        let m = augment_mask(&mut rng, dims.frames, dims.height * 4, dims.width * 4);
        let sel = select_tokens(&dilate_mask(&downsample_mask(&m, 4)?, 1))?;
        let rows = Tensor::<f32>::randn(&[dims.tokens(), cfg.latent_channels], 1.0, &mut rng);
        let t = 1 + rng.below(cfg.train_steps);
        let prompt = [1 + rng.below(cfg.vocab - 1)];

        let mut g = Graph::new();
        let cond = bb.condition(&mut g, &ps, t, &prompt)?;
        let r = g.constant(rows.clone());
        let mask = key_mask::<f32>(dims.tokens(), sel.indices());
        let ex = ForwardExtras { mask: Some(&mask), ..Default::default() };
        let dense = bb.predict_noise(&mut g, &ps, r, &dims.all_coords(), cond, ex)?;
        let dense = g.value(dense).gather_rows(sel.indices())?;

        let mut g = Graph::new();
        let cond = bb.condition(&mut g, &ps, t, &prompt)?;
        let r = g.constant(rows.gather_rows(sel.indices())?);
        let sparse = bb.predict_noise(&mut g, &ps, r, &dims.coords(sel.indices()), cond, ForwardExtras::default())?;
        worst = worst.max(g.value(sparse).max_abs_diff(&dense));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(worst <= 1e-5 && secs < 30.0, format!("max row difference {worst:.2e} over 50 pairs of 512 tokens in {secs:.1} s")))
}

fn c3_zero_init() -> Result<Verdict> {
    let cfg = ModelConfig::default();
    let full = Pipeline::new(&cfg, random_params(&cfg, 4, true, 0.0)?)?;
    let base = full.base_only()?;
    let mut worst = 0f64;
    for item in masked_items(&full, 5, 5)? {
        let mut g = Graph::new();
        let a = predict_item(&mut g, &full.modules, &full.ps, &item, LossStage::Psi)?;
        let a = g.value(a).clone();
        let (sm, sps) = full.sparse_modules();
        let mut g = Graph::new();
        let merged = predict_item(&mut g, sm, sps, &item, LossStage::Psi)?;
        let merged = g.value(merged).clone();
        let mut g = Graph::new();
        let b = predict_item(&mut g, &base.modules, &base.ps, &item, LossStage::Dm)?;
        let b = g.value(b);
        worst = worst.max(a.max_abs_diff(b)).max(merged.max_abs_diff(b));
    }
    let mut rng = RngState::new(6);
    let mut identical = 0;
    for seed in 0..5 {
        let v = random_video(&mut rng, 2, 32, 32)?;
        let m = augment_mask(&mut rng, 2, 32, 32);
        let prompt = parse_prompt(if seed % 2 == 0 { "fill:red" } else { "match-scene" })?;
        let sc = SampleConfig { seed, ..Default::default() };
        let a = full.sample_edit(&v, &m, &prompt, &sc)?;
        let b = base.sample_edit(&v, &m, &prompt, &sc)?;
        identical += usize::from(a.video == b.video && a.latent == b.latent);
    }
    Ok(verdict(
        worst == 0.0 && identical == 5,
        format!("predict_noise max difference {worst:e}; {identical}/5 seeded edits bit-identical to the base-only sampler"),
    ))
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut RngState::new(seed));
    let p = g.mul_const(y, w)?;
    Ok(g.sum(p))
}

type Primitive = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> editctrl::Result<Var>>);

fn primitives() -> Vec<Primitive> {
    let mask = {
        let mut m = Tensor::<f64>::zeros(&[3, 5]);
        m.data_mut()[1] = f64::NEG_INFINITY;
        m.data_mut()[7] = f64::NEG_INFINITY;
        m
    };
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], Box::new(|g, x| g.matmul(x[0], x[1]))),
        ("matmul_ta", vec![vec![4, 3], vec![4, 5]], Box::new(|g, x| g.matmul_t(x[0], x[1], true, false))),
        ("matmul_tb", vec![vec![3, 4], vec![5, 4]], Box::new(|g, x| g.matmul_t(x[0], x[1], false, true))),
        ("matmul_tab", vec![vec![4, 3], vec![5, 4]], Box::new(|g, x| g.matmul_t(x[0], x[1], true, true))),
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|g, x| g.add(x[0], x[1]))),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|g, x| g.sub(x[0], x[1]))),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|g, x| g.mul(x[0], x[1]))),
        ("add_row", vec![vec![3, 4], vec![4]], Box::new(|g, x| g.add_row(x[0], x[1]))),
        ("mul_row", vec![vec![3, 4], vec![4]], Box::new(|g, x| g.mul_row(x[0], x[1]))),
        ("scale", vec![vec![3, 4]], Box::new(|g, x| Ok(g.scale(x[0], -1.7)))),
        ("add_scalar", vec![vec![3, 4]], Box::new(|g, x| Ok(g.add_scalar(x[0], 0.3)))),
        ("mul_const", vec![vec![3, 4]], Box::new(|g, x| g.mul_const(x[0], Tensor::randn(&[3, 4], 1.0, &mut RngState::new(9))))),
        ("gelu", vec![vec![3, 4]], Box::new(|g, x| Ok(g.gelu(x[0])))),
        ("silu", vec![vec![3, 4]], Box::new(|g, x| Ok(g.silu(x[0])))),
        ("softmax_rows", vec![vec![3, 5]], Box::new(|g, x| g.softmax_rows(x[0], None))),
        ("softmax_rows_masked", vec![vec![3, 5]], Box::new(move |g, x| g.softmax_rows(x[0], Some(&mask)))),
        ("layer_norm", vec![vec![3, 6]], Box::new(|g, x| g.layer_norm(x[0]))),
        ("layer_norm_affine", vec![vec![3, 6], vec![6], vec![6]], Box::new(|g, x| g.layer_norm_affine(x[0], x[1], x[2]))),
        ("slice_cols", vec![vec![3, 6]], Box::new(|g, x| g.slice_cols(x[0], 2, 3))),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], Box::new(|g, x| g.concat_cols(&[x[0], x[1]]))),
        ("concat_rows", vec![vec![2, 4], vec![3, 4]], Box::new(|g, x| g.concat_rows(&[x[0], x[1]]))),
        ("gather_rows", vec![vec![4, 3]], Box::new(|g, x| g.gather_rows(x[0], &[2, 0, 2, 3]))),
        ("reshape", vec![vec![3, 4]], Box::new(|g, x| g.reshape(x[0], &[2, 6]))),
        ("sum", vec![vec![3, 4]], Box::new(|g, x| Ok(g.sum(x[0])))),
    ]
}

fn c4_gradients() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = RngState::new(7);
    let mut prim_worst = (0f64, "");
    for (i, (name, shapes, op)) in primitives().into_iter().enumerate() {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
        let rep = finite_difference_check(&inputs, &GradCheck::default(), |g, x| {
            let y = op(g, x)?;
            Ok(weighted_sum(g, y, 100 + i as u64).expect("weights match the output"))
        })?;
        if rep.max_rel_err >= prim_worst.0 {
            prim_worst = (rep.max_rel_err, name);
        }
    }

    let cfg = small_cfg();
    let mut ps: ParamSet<f64> = random_params(&cfg, 8, true, 0.0)?.cast();
    let mut rng = RngState::new(9);
    for prefix in [INJECT_PREFIX, LORA_PREFIX, GLOBAL_PREFIX] {
        randomize64(&mut ps, prefix, 0.2, &mut rng);
    }
    let p32 = Pipeline::new(&cfg, ps.cast())?;
    let items: Vec<NoisyItem<f64>> = masked_items(&p32, 10, 2)?.iter().map(NoisyItem::cast).collect();
    let modules = Modules::bind(&cfg, &ps)?;
    for id in ps.ids().collect::<Vec<_>>() {
        let trainable = is_fine_tune_param(ps.name(id));
        ps.set_frozen(id, !trainable);
    }
    let trainable: Vec<_> = ps.ids().filter(|&id| !ps.is_frozen(id)).collect();
    let check = GradCheck { h: 3e-5, max_entries: Some(5000), seed: 11, ..Default::default() };
    let full = check_params(&ps, &trainable, &check, |g, ps| Ok(loss_psi(g, &modules, ps, &items)?.0))?;

    let mut g = Graph::new();
    let (l, _) = loss_psi(&mut g, &modules, &ps, &items)?;
    let grads = g.backward(l)?;
    let frozen: Vec<_> = ps.ids().filter(|&id| ps.is_frozen(id)).collect();
    let frozen_zero = frozen.iter().all(|&id| grads.param_or_zero(&ps, id).data().iter().all(|&v| v == 0.0));
    let secs = start.elapsed().as_secs_f64();
    let pass = prim_worst.0 <= 1e-5 && full.max_rel_err <= 1e-4 && full.checked <= 5000 && frozen_zero && secs < 300.0;
    Ok(verdict(
        pass,
        format!(
            "primitives max rel err {:.2e} ({}); full loss max rel err {:.2e} over {} entries (worst {:?}); {} frozen tensors with zero gradient: {frozen_zero}",
            prim_worst.0,
            prim_worst.1,
            full.max_rel_err,
            full.checked,
            full.worst,
            frozen.len()
        ),
    ))
}

fn c5_loss_semantics() -> Result<Verdict> {
    let cfg = small_cfg();
    let p = Pipeline::new(&cfg, random_params(&cfg, 12, true, 0.2)?)?;
    let mut ps = p.ps.clone();
    ps.freeze_prefix("backbone.", true);
    ps.freeze_prefix("control.", true);
    let mut rng = RngState::new(13);
    let mut unchanged = 0;
    let trials = 10;
    for trial in 0..trials {
        let mut items = masked_items(&p, 20 + trial, 2)?;
        let mut g = Graph::new();
        let (_, before) = loss_phi(&mut g, &p.modules, &ps, &items)?;
        for item in &mut items {
            let ring: Vec<usize> = item.weights.as_ref().unwrap().iter().enumerate().filter(|(_, &w)| w == 0.0).map(|(i, _)| i).collect();
            for r in ring {
                for v in item.eps.row_mut(r) {
                    *v += 5.0 * (rng.uniform() as f32 - 0.5);
                }
            }
        }
        let mut g = Graph::new();
        let (_, after) = loss_phi(&mut g, &p.modules, &ps, &items)?;
        unchanged += usize::from(before.value == after.value);
    }

    let n = 10;
    let items = masked_items(&p, 40, 2)?;
    let global: Vec<_> = ps.ids_with_prefix(GLOBAL_PREFIX).collect();
    let mut wrong = Vec::new();
    for k in [0usize, 5, 9, 10, 11, 500] {
        let mut g = Graph::new();
        let (l, _) = piecewise_loss(&mut g, k, n, &p.modules, &ps, &items)?;
        let grads = g.backward(l)?;
        let nonzero = global.iter().any(|&id| grads.param_or_zero(&ps, id).data().iter().any(|&v| v != 0.0));
        if nonzero != (k >= n) {
            wrong.push(k);
        }
    }
    Ok(verdict(
        unchanged == trials as usize && wrong.is_empty(),
        format!("{unchanged}/{trials} ring perturbations left the local loss unchanged; iterations with wrong global gradients: {wrong:?}"),
    ))
}

fn c6_preservation() -> Result<Verdict> {
    let cfg = ModelConfig::default();
    let p = Pipeline::new(&cfg, random_params(&cfg, 14, true, 0.05)?)?;
    let mut rng = RngState::new(15);
    let (mut rows_ok, mut worst_mse, mut measured) = (0, 0f64, 0);
    for i in 0..20u64 {
        let v = random_video(&mut rng, 2, 48, 48)?;
        let m = augment_mask(&mut rng, 2, 48, 48);
        let prompt = parse_prompt(if i % 2 == 0 { "match-scene" } else { "fill:yellow" })?;
        let out = p.sample_edit(&v, &m, &prompt, &SampleConfig { seed: i, steps: 5, ..Default::default() })?;
        let z = p.codec.encode(&v)?;
        let untouched = (0..z.dims().tokens())
            .filter(|&r| !out.context.selection.contains(r))
            .all(|r| z.tokens().row(r) == out.latent.tokens().row(r));
        rows_ok += usize::from(untouched);
        let footprint = edit_footprint(&m, p.codec.patch(), 1)?;
        if let Some(u) = edit_metrics(&out.video, &v, &m, &footprint)?.unmasked {
            worst_mse = worst_mse.max(u.mse);
            measured += 1;
        }
    }
    Ok(verdict(
        rows_ok == 20 && measured == 20 && worst_mse <= 1e-10,
        format!("{rows_ok}/20 edits kept every unselected latent row; worst unmasked MSE {worst_mse:.2e} over {measured} edits"),
    ))
}

fn c7_flops() -> Result<Verdict> {
    let start = Instant::now();
    let cfg = ModelConfig::default();
    let p = Pipeline::new(&cfg, random_params(&cfg, 16, true, 0.05)?)?;
    let targets = [0.125, 0.25, 0.5];
    let bench = BenchConfig {
        ratios: targets.to_vec(),
        resolutions: vec![[2, 64, 64]],
        steps: 25,
        trials: 1,
        seed: 0,
        prompt: "fill:red".into(),
        dilation_radius: 1,
        analytic_dense: false,
    };
    let rows = bench_run(&p, &bench)?;
    let mut detail = Vec::new();
    let mut pass = true;
    for (r, target) in rows.iter().zip(targets) {
        let ratio = r.flops_sparse as f64 / r.flops_dense as f64;
        pass &= ratio <= target + 0.10 && r.flops_sparse == r.analytic_sparse && r.flops_dense == r.analytic_dense;
        detail.push(format!("r={target}: {ratio:.3}"));
    }

    // 8 frames at 32², 64² and 128² pixels: 512, 2048 and 8192 tokens, same selection.
    let prompt = parse_prompt("fill:red")?;
    let mut rng = RngState::new(17);
    let mut per_step = Vec::new();
    for side in [32usize, 64, 128] {
        let v = random_video(&mut rng, 8, side, side)?;
        let m = rect_mask(8, side, side, 0..16, 0..16);
        let ctx = build_control_context(&p.codec, &v, &m, 1)?;
        let global = p.global_kv(&ctx.background)?;
        let out = p.denoise_edit(&ctx, &prompt, global.as_ref().map(|(kv, _)| kv), 0, 25, true)?;
        let steps: std::collections::BTreeSet<u64> = out.per_step.iter().map(|s| s.total()).collect();
        let q = FlopQuery {
            tokens: ctx.selection.len(),
            prompt_len: prompt.len(),
            steps: 25,
            control: p.sparse_modules().0.control.as_ref().map(|c| c.lora.is_some()),
            global_tokens: Some(global_tokens(p.cfg(), 8, p.codec.patch())),
            context_tokens: 0,
            masked: false,
        };
        let analytic = analytic_flops(p.cfg(), &q)?;
        let measured_global = global.as_ref().map(|(_, f)| f.total()).unwrap_or(0);
        pass &= steps.len() == 1 && out.flops.total() + measured_global == analytic.total();
        per_step.push((ctx.latent_mask.dims().tokens(), ctx.selection.len(), steps.into_iter().next().unwrap_or(0)));
    }
    let constant = per_step.windows(2).all(|w| w[0].1 == w[1].1 && w[0].2 == w[1].2);
    pass &= constant;
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    let grid: Vec<String> = per_step.iter().map(|(n, s, f)| format!("{n} tokens/N_sel {s}: {f}")).collect();
    Ok(verdict(
        pass,
        format!("sparse/dense {}; per-step FLOPs {}; analytic equals instrumented", detail.join(", "), grid.join(", ")),
    ))
}

fn c10_multi_region() -> Result<Verdict> {
    let cfg = ModelConfig::default();
    let p = Pipeline::new(&cfg, random_params(&cfg, 18, true, 0.05)?)?;
    let mut rng = RngState::new(19);
    let prompts = ["fill:red", "match-scene", "fill:blue", "fill:green"];
    let mut identical = 0;
    for c in 0..5 {
        let (h, w) = (32, 48);
        let v = random_video(&mut rng, 2, h, w)?;
        let y0 = rng.below(12);
        let a = rect_mask(2, h, w, y0..y0 + 4 + rng.below(8), rng.below(6)..10 + rng.below(6));
        let b = rect_mask(2, h, w, 12 + rng.below(8)..32, 28 + rng.below(8)..48);
        let regions = vec![
            Region { mask: a, prompt: prompts[c % 4].into(), seed: 100 + c as u64 },
            Region { mask: b, prompt: prompts[(c + 1) % 4].into(), seed: 200 + c as u64 },
        ];
        let set = RegionSet::new(regions, p.codec.patch(), 1)?;
        let sc = SampleConfig { steps: 10, ..Default::default() };
        let multi = edit_multi_region(&p, &v, &set, &sc, 2)?;
        let mut latent = p.codec.encode(&v)?;
        for r in set.regions() {
            let single = p.sample_edit(&v, &r.mask, &parse_prompt(&r.prompt)?, &SampleConfig { seed: r.seed, ..sc.clone() })?;
            for &i in single.context.selection.indices() {
                latent.tokens_mut().row_mut(i).copy_from_slice(single.latent.tokens().row(i));
            }
        }
        let composed = p.codec.decode(&latent)?;
        identical += usize::from(multi.latent == latent && multi.video == composed);
    }
    Ok(verdict(identical == 5, format!("{identical}/5 two-region configurations bit-identical to composed single edits")))
}

struct SeedRun {
    base: Vec<LossRecord>,
    control: Vec<LossRecord>,
    full: Vec<LossRecord>,
    no_gpsi: Vec<LossRecord>,
    model: ModelConfig,
    control_params: ParamSet<f32>,
    full_params: ParamSet<f32>,
    no_gpsi_params: ParamSet<f32>,
}

fn cached_stage(
    cache: Option<&Path>,
    key: &str,
    train: impl FnOnce() -> Result<(ModelConfig, ParamSet<f32>, Vec<LossRecord>)>,
) -> Result<(ModelConfig, ParamSet<f32>, Vec<LossRecord>)> {
    let dir = cache.map(|c| c.join(key));
    if let Some(d) = &dir {
        if d.join("losses.json").exists() {
            let model = serde_json::from_str(&std::fs::read_to_string(d.join("model.json"))?)?;
            let ps = load_etw(&d.join("params.etw"))?;
            let losses = serde_json::from_str(&std::fs::read_to_string(d.join("losses.json"))?)?;
            return Ok((model, ps, losses));
        }
    }
    let (model, ps, losses) = train()?;
    if let Some(d) = &dir {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join("model.json"), serde_json::to_string(&model)?)?;
        save_etw(&d.join("params.etw"), &ps)?;
        std::fs::write(d.join("losses.json"), serde_json::to_string(&losses)?)?;
    }
    Ok((model, ps, losses))
}

fn train_seed(seed: u64, cache: Option<&Path>) -> Result<SeedRun> {
    let base_cfg = TrainConfig::new(Stage::Base, seed);
    let key = |name: &str, cfg: &TrainConfig| format!("seed{seed}_{name}_{}it_n{}", cfg.iterations, cfg.n.min(1 << 40));
    let (model, base_ps, base) = cached_stage(cache, &key("base", &base_cfg), || {
        let o = run_stage(&ModelConfig::default(), &base_cfg, ParamSet::new())?;
        Ok((o.model, o.params, o.losses))
    })?;
    let control_cfg = TrainConfig::new(Stage::ControlFull, seed);
    let (model, control_params, control) = cached_stage(cache, &key("control", &control_cfg), || {
        let o = run_stage(&model, &control_cfg, base_ps)?;
        Ok((o.model, o.params, o.losses))
    })?;
    let full_cfg = TrainConfig::new(Stage::AdaptersSparse, seed);
    let (_, full_params, full) = cached_stage(cache, &key("full", &full_cfg), || {
        let o = run_stage(&model, &full_cfg, control_params.clone())?;
        Ok((o.model, o.params, o.losses))
    })?;
    let nog_cfg = TrainConfig { n: usize::MAX, ..TrainConfig::new(Stage::AdaptersSparse, seed) };
    let (_, no_gpsi_params, no_gpsi) = cached_stage(cache, &key("no_gpsi", &nog_cfg), || {
        let o = run_stage(&model, &nog_cfg, control_params.clone())?;
        Ok((o.model, o.params, o.losses))
    })?;
    Ok(SeedRun { base, control, full, no_gpsi, model, control_params, full_params, no_gpsi_params })
}

struct Ablation {
    naive: f64,
    no_gpsi: f64,
    full: f64,
}

impl Ablation {
    fn ordered(&self) -> bool {
        self.full < self.no_gpsi && self.no_gpsi < self.naive && self.full <= 0.9 * self.no_gpsi
    }
}

fn evaluate(seed: u64, run: &SeedRun) -> Result<Ablation> {
    let split = match_scene_split(EVAL_SEED_OFFSET + seed, EVAL_SAMPLES, &DataConfig::default())?;
    let sc = SampleConfig::default();
    let mse = |adapters: Option<&ParamSet<f32>>, v: Variant| -> Result<f64> {
        Ok(masked_mse(&build_ablation(&run.model, &run.control_params, adapters, v)?, &split, &sc)?)
    };
    Ok(Ablation {
        naive: mse(None, Variant::Naive)?,
        no_gpsi: mse(Some(&run.no_gpsi_params), Variant::NoGpsi)?,
        full: mse(Some(&run.full_params), Variant::Full)?,
    })
}

fn c8_ablation(runs: &[(u64, SeedRun)]) -> Result<Verdict> {
    let mut passing = 0;
    let mut detail = Vec::new();
    for (seed, run) in runs {
        let a = evaluate(*seed, run)?;
        passing += usize::from(a.ordered());
        detail.push(format!("seed {seed}: naive {:.5} no_gpsi {:.5} full {:.5} ({})", a.naive, a.no_gpsi, a.full, if a.ordered() { "ordered" } else { "not ordered" }));
    }
    Ok(verdict(2 * passing > runs.len(), format!("{passing}/{} seeds ordered; {}", runs.len(), detail.join("; "))))
}

fn c9_training(runs: &[(u64, SeedRun)]) -> Result<Verdict> {
    let mut pass = true;
    let mut detail = Vec::new();
    for (seed, run) in runs {
        for (name, losses) in [("base", &run.base), ("control", &run.control), ("full", &run.full), ("no_gpsi", &run.no_gpsi)] {
            let (head, tail) = head_tail_means(losses, 100).context("fewer than 100 iterations")?;
            pass &= tail < head;
            detail.push(format!("s{seed} {name} {head:.4}->{tail:.4}"));
        }
    }
    Ok(verdict(pass, detail.join(", ")))
}

fn collect_propagation(
    p: &Pipeline,
    init: &InitialEdit,
    stream: Video,
    flow: FlowSource<'_>,
    cfg: &PropagateConfig,
) -> Result<(Vec<EmittedFrame>, Vec<TraceEvent>)> {
    let first = init.frames.frames();
    let trace: Trace = Rc::new(RefCell::new(Vec::new()));
    let mut src = InstrumentedSource { inner: VideoSource::new(stream, first), trace: trace.clone() };
    let mut emitted = Vec::new();
    let t2 = trace.clone();
    propagate(p, init, &mut src, flow, cfg, &mut |e| {
        match e {
            PropagationEvent::Generated { start, end, after } => t2.borrow_mut().push(TraceEvent::Generated { start, end, after }),
            PropagationEvent::Emitted(f) => {
                t2.borrow_mut().push(TraceEvent::Emitted(f.index));
                emitted.push(f.clone());
            }
        }
        Ok(())
    })?;
    let events = trace.borrow().clone();
    Ok((emitted, events))
}

/// Every chunk is generated from frames already pulled, and frames are emitted as pulled.
fn causal(events: &[TraceEvent], first: usize) -> bool {
    let mut last = first - 1;
    events.iter().all(|e| match *e {
        TraceEvent::Pulled(i) => {
            let ok = i == last + 1;
            last = i;
            ok
        }
        TraceEvent::Generated { start, after, .. } => after == last && start > after,
        TraceEvent::Emitted(i) => i == last,
    })
}

fn paste_exact(emitted: &[EmittedFrame], stream: &Video, first: usize) -> bool {
    emitted.iter().all(|e| {
        let acquired = stream.frame(e.index - first);
        e.weights.iter().enumerate().all(|(k, &w)| w != 0.0 || e.frame.data()[k * 3..k * 3 + 3] == acquired.data()[k * 3..k * 3 + 3])
    })
}

fn masked_mean_abs_diff(a: &Video, b: &Video, m: &PixelMask) -> f64 {
    let (mut sum, mut n) = (0f64, 0usize);
    for (k, &bit) in m.bits().iter().enumerate() {
        if bit {
            for c in 0..3 {
                sum += f64::from((a.data()[k * 3 + c] - b.data()[k * 3 + c]).abs());
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}

fn c11_propagation(p: &Pipeline) -> Result<Verdict> {
    let dcfg = DataConfig { frames: 1, ..DataConfig::default() };
    let mut scene = Scene::random(&mut RngState::new(21), &dcfg);
    scene.drift = 0.0;
    scene.blob_velocity = (0, 0);
    let frame = scene.render(&dcfg);
    let (h, w) = (frame.height(), frame.width());
    let initial = Video::concat(&[frame.clone(), frame.clone()])?;
    let masks = rect_mask(2, h, w, 10..22, 8..20);
    let prompt = "fill:red";
    let edited = p.sample_edit(&initial, &masks, &parse_prompt(prompt)?, &SampleConfig::default())?.video;
    let init = InitialEdit { frames: initial, edited, masks, prompt: prompt.into() };
    let stream = Video::concat(&vec![frame; 16])?;
    let zero = FlowField::zeros(17, h, w);
    let cfg = PropagateConfig { total_frames: 18, ..Default::default() };
    let (emitted, events) = collect_propagation(p, &init, stream.clone(), FlowSource::Given(&zero), &cfg)?;
    ensure!(emitted.len() == 16, "{} frames emitted", emitted.len());
    let causal_static = causal(&events, 2);
    let exact_static = paste_exact(&emitted, &stream, 2);
    let drift = emitted
        .windows(2)
        .map(|w| masked_mean_abs_diff(&w[0].generated, &w[1].generated, &w[1].mask))
        .fold(0f64, f64::max);

    // Moving blob with its procedural flow; block-matched flow is reported alongside.
    let dcfg = DataConfig { frames: 18, ..DataConfig::default() };
    let scene = (0..1000u64)
        .map(|s| Scene::random(&mut RngState::new(500 + s), &dcfg))
        .find(|sc| {
            let m = sc.blob_mask(&dcfg);
            sc.blob_velocity != (0, 0) && (0..dcfg.frames).all(|f| m.frame_count(f) > 0 && !touches_border(&m, f))
        })
        .context("no scene keeps its blob inside the frame")?;
    let video = scene.render(&dcfg);
    let truth = scene.blob_mask(&dcfg);
    let gt_flow = scene.flow(&dcfg);
    let init = InitialEdit {
        frames: video.frames_range(0, 2),
        edited: video.frames_range(0, 2),
        masks: truth.frames_range(0, 2),
        prompt: prompt.into(),
    };
    let stream = video.frames_range(2, dcfg.frames);
    let cfg = PropagateConfig { steps: 5, total_frames: dcfg.frames, ..Default::default() };
    let min_iou = |emitted: &[EmittedFrame]| emitted.iter().map(|e| iou(&e.mask, &truth.frame(e.index))).fold(1.0, f64::min);
    let (emitted, events) = collect_propagation(p, &init, stream.clone(), FlowSource::Given(&gt_flow), &cfg)?;
    ensure!(emitted.len() == 16, "{} frames emitted", emitted.len());
    let causal_moving = causal(&events, 2);
    let exact_moving = paste_exact(&emitted, &stream, 2);
    let min_iou_gt = min_iou(&emitted);
    let (estimated, _) = collect_propagation(p, &init, stream.clone(), FlowSource::Estimate, &cfg)?;
    let min_iou_est = if estimated.len() == 16 { min_iou(&estimated) } else { 0.0 };
    let mut step_iou = 1f64;
    for f in 0..dcfg.frames - 1 {
        step_iou = step_iou.min(iou(&warp_mask(&truth.frame(f), &gt_flow.slice(f))?, &truth.frame(f + 1)));
    }

    let pass = causal_static && causal_moving && exact_static && exact_moving && drift <= 1e-3 && min_iou_gt >= 0.9;
    Ok(verdict(
        pass,
        format!(
            "causal {}; weight-0 pixels exact {}; static drift max {drift:.2e} per frame over 16 frames; propagated mask IoU min {min_iou_gt:.3} with procedural flow ({min_iou_est:.3} block-matched, single warp min {step_iou:.3})",
            causal_static && causal_moving,
            exact_static && exact_moving
        ),
    ))
}

fn touches_border(m: &PixelMask, f: usize) -> bool {
    let (_, h, w) = m.dims();
    (0..h).any(|y| m.get(f, y, 0) || m.get(f, y, w - 1)) || (0..w).any(|x| m.get(f, 0, x) || m.get(f, h - 1, x))
}

fn cli(args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_editctrl")).args(args).output()?;
    ensure!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Compares every file of two runs; manifests are compared without their timestamp and paths.
fn same_outputs(a: &Path, b: &Path, files: &[&str]) -> Result<Vec<String>> {
    let mut differing = Vec::new();
    for f in files {
        let (x, y) = (std::fs::read(a.join(f)).with_context(|| format!("{f}"))?, std::fs::read(b.join(f))?);
        let same = if f.ends_with("manifest.json") {
            let strip = |bytes: &[u8]| -> Result<serde_json::Value> {
                let mut v: serde_json::Value = serde_json::from_slice(bytes)?;
                for k in ["timestamp_unix", "inputs", "outputs"] {
                    v.as_object_mut().context("manifest object")?.remove(k);
                }
                Ok(v)
            };
            strip(&x)? == strip(&y)?
        } else {
            x == y
        };
        if !same {
            differing.push((*f).to_string());
        }
    }
    Ok(differing)
}

fn c12_determinism() -> Result<Verdict> {
    let tmp = tempfile::tempdir()?;
    let root = tmp.path();
    let model = root.join("model_cfg.json");
    std::fs::write(&model, serde_json::to_string(&small_cfg())?)?;
    let train = root.join("train.json");
    std::fs::write(&train, r#"{"batch_size": 1, "warmup": 0, "data": {"frames": 2, "height": 16, "width": 16}}"#)?;

    let mut rng = RngState::new(31);
    let video = random_video(&mut rng, 4, 32, 32)?;
    let mask = rect_mask(2, 32, 32, 4..12, 6..14);
    let other = rect_mask(2, 32, 32, 20..30, 18..28);
    let (vp, mp, op) = (root.join("video.etf"), root.join("mask.etf"), root.join("other.etf"));
    save_etf(&vp, video.frames_range(0, 2).tensor())?;
    save_etf(&root.join("stream.etf"), video.tensor())?;
    save_etf(&mp, &mask.to_tensor())?;
    save_etf(&op, &other.to_tensor())?;
    let regions = root.join("regions.json");
    std::fs::write(&regions, r#"[{"mask": "mask.etf", "prompt": "fill:red", "seed": 3}, {"mask": "other.etf", "prompt": "match-scene", "seed": 4}]"#)?;

    let mut differing = Vec::new();
    let mut runs: Vec<PathBuf> = Vec::new();
    for run in ["a", "b"] {
        let d = root.join(run);
        let (base, control, adapters) = (d.join("base"), d.join("control"), d.join("adapters"));
        cli(&["pretrain", "--config", s(&train), "--model", s(&model), "--out", s(&base), "--iters", "3", "--seed", "2"])?;
        cli(&["pretrain", "--config", s(&train), "--stage", "control_full", "--init", s(&base), "--out", s(&control), "--iters", "3", "--seed", "2"])?;
        cli(&["train-adapters", "--config", s(&train), "--init", s(&control), "--out", s(&adapters), "--iters", "3", "--n", "1", "--seed", "2"])?;
        let w = s(&adapters);
        cli(&["edit", "--weights", w, "--input", s(&vp), "--mask", s(&mp), "--prompt", "fill:red", "--steps", "4", "--seed", "5", "--out", s(&d.join("edit.etf"))])?;
        cli(&["edit-multi", "--weights", w, "--input", s(&vp), "--regions", s(&regions), "--steps", "4", "--out", s(&d.join("multi.etf"))])?;
        cli(&[
            "propagate", "--weights", w, "--frames", s(&root.join("stream.etf")), "--masks", s(&mp), "--prompt", "fill:red", "--steps", "4",
            "--out", s(&d.join("prop.etf")),
        ])?;
        runs.push(d);
    }
    let stage_files: [(&str, &[&str]); 3] = [
        ("base", &["base.etw", "model.json", "loss_base.csv", "manifest.json"]),
        ("control", &["base.etw", "control.etw", "model.json", "loss_control_full.csv", "manifest.json"]),
        ("adapters", &["base.etw", "control.etw", "adapters.etw", "model.json", "loss_adapters_sparse.csv", "manifest.json"]),
    ];
    for (dir, files) in stage_files {
        for f in same_outputs(&runs[0].join(dir), &runs[1].join(dir), files)? {
            differing.push(format!("{dir}/{f}"));
        }
    }
    let top = ["edit.etf", "edit.etf.manifest.json", "multi.etf", "multi.etf.manifest.json", "prop.etf", "prop.etf.manifest.json"];
    differing.extend(same_outputs(&runs[0], &runs[1], &top)?);
    let count = stage_files.iter().map(|(_, f)| f.len()).sum::<usize>() + top.len();
    Ok(verdict(
        differing.is_empty(),
        if differing.is_empty() { format!("{count} files identical across two runs") } else { format!("differ: {}", differing.join(", ")) },
    ))
}

fn main() {
    let mut results = Vec::new();
    report(&mut results, 1, c1_codec);
    report(&mut results, 2, c2_sparse_dense);
    report(&mut results, 3, c3_zero_init);
    report(&mut results, 4, c4_gradients);
    report(&mut results, 5, c5_loss_semantics);
    report(&mut results, 6, c6_preservation);
    report(&mut results, 7, c7_flops);

    let runs: Result<Vec<(u64, SeedRun)>> = if [8, 9, 11].into_iter().any(selected) {
        let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
        let start = Instant::now();
        let runs = SEEDS.iter().map(|&seed| Ok((seed, train_seed(seed, cache.as_deref())?))).collect();
        println!("default training of {} seeds: {:.0} s", SEEDS.len(), start.elapsed().as_secs_f64());
        runs
    } else {
        Ok(Vec::new())
    };
    match &runs {
        Ok(runs) => {
            report(&mut results, 8, || c8_ablation(runs));
            report(&mut results, 9, || c9_training(runs));
        }
        Err(e) => {
            for id in [8, 9] {
                report(&mut results, id, || Err(anyhow::anyhow!("training failed: {e:#}")));
            }
        }
    }
    report(&mut results, 10, c10_multi_region);
    report(&mut results, 11, || {
        let runs = runs.as_ref().map_err(|e| anyhow::anyhow!("training failed: {e:#}"))?;
        let (_, run) = &runs[0];
        c11_propagation(&build_ablation(&run.model, &run.control_params, Some(&run.full_params), Variant::Full)?)
    });
    report(&mut results, 12, c12_determinism);

    let failed: Vec<u8> = results.iter().filter(|(_, p)| !p).map(|(id, _)| *id).collect();
    println!("acceptance: {}/{} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
