use crate::adapters::{ControlNet, GlobalEmbedder};
use crate::backbone::{Backbone, ModelConfig};
use crate::codec::Video;
use crate::diffusion::Pipeline;
use crate::mask::PixelMask;
use crate::numeric::{ParamSet, RngState, Tensor};

pub fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        blocks: 2,
        injection_blocks: vec![1],
        control_blocks: 1,
        lora_rank: 2,
        lora_alpha: 4.0,
        global_size: 8,
        max_grid: [8, 8, 8],
        ..ModelConfig::default()
    }
}

/// Backbone with random timestep modulation, optionally with fresh adapters.
pub fn tiny_params(seed: u64, adapters: bool, lora: bool) -> ParamSet<f32> {
    let cfg = tiny_cfg();
    let mut rng = RngState::new(seed);
    let mut ps = ParamSet::new();
    let bb = Backbone::new(cfg.clone(), &mut ps, &mut rng).unwrap();
    for id in ps.ids().collect::<Vec<_>>() {
        if ps.name(id).contains("modulation") {
            let s = ps.get(id).shape().to_vec();
            *ps.get_mut(id) = Tensor::randn(&s, 0.1, &mut rng);
        }
    }
    if adapters {
        let mut control = ControlNet::new(&bb, &mut ps, &mut rng);
        if lora {
            control.attach_lora(&cfg, &mut ps, &mut rng);
        }
        GlobalEmbedder::new(&bb, &mut ps, &mut rng);
    }
    ps
}

pub fn randomize_prefix(ps: &mut ParamSet<f32>, prefix: &str, std: f64, rng: &mut RngState) {
    for id in ps.ids_with_prefix(prefix).collect::<Vec<_>>() {
        let s = ps.get(id).shape().to_vec();
        *ps.get_mut(id) = Tensor::randn(&s, std, rng);
    }
}

pub fn tiny_pipeline(seed: u64, adapters: bool, lora: bool) -> Pipeline {
    Pipeline::new(&tiny_cfg(), tiny_params(seed, adapters, lora)).unwrap()
}

pub fn random_video(rng: &mut RngState, frames: usize, h: usize, w: usize) -> Video {
    Video::new(Tensor::rand_uniform(&[frames, h, w, 3], 0.0, 1.0, rng)).unwrap()
}

pub fn rect_mask(frames: usize, h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> PixelMask {
    let mut m = PixelMask::empty(frames, h, w);
    for f in 0..frames {
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(f, y, x, true);
            }
        }
    }
    m
}
