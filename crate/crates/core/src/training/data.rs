//! Procedural clips whose correct fill sometimes depends on global context.

use serde::{Deserialize, Serialize};

use crate::codec::Video;
use crate::error::Result;
use crate::flow::FlowField;
use crate::mask::{augment_mask, PixelMask};
use crate::numeric::{RngState, Tensor};
use crate::prompt::{color_rgb, parse_prompt, COLORS};

pub const MATCH_SCENE: &str = "match-scene";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { frames: 4, height: 32, width: 32 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    /// `fill:<color>`: the fill is named in the prompt.
    Local,
    /// `match-scene`: the fill is the scene's dominant background color.
    Directive,
}

/// A two-color gradient drifting along its axis plus a striped moving disc.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub color_a: [f32; 3],
    pub color_b: [f32; 3],
    pub blob_color: [f32; 3],
    pub angle: f64,
    pub offset: f64,
    pub softness: f64,
    /// Gradient drift in pixels per frame along its axis.
    pub drift: f64,
    pub blob_center: (f64, f64),
    pub blob_radius: f64,
    /// Integer blob motion in pixels per frame.
    pub blob_velocity: (i64, i64),
    pub stripe_period: f64,
}

impl Scene {
    pub fn random(rng: &mut RngState, cfg: &DataConfig) -> Self {
        let pick = |rng: &mut RngState| COLORS[rng.below(COLORS.len())].1;
        let color_a = pick(rng);
        let mut color_b = pick(rng);
        while dist2(&color_a, &color_b) < 0.25 {
            color_b = pick(rng);
        }
        let mut blob_color = pick(rng);
        while blob_color == color_a || blob_color == color_b {
            blob_color = pick(rng);
        }
        let (h, w) = (cfg.height as f64, cfg.width as f64);
        let span = h.max(w);
        Scene {
            color_a,
            color_b,
            blob_color,
            angle: rng.range(0.0, std::f64::consts::TAU),
            offset: rng.range(-0.35, 0.35) * span,
            softness: rng.range(1.5, 4.0),
            drift: rng.range(-1.0, 1.0),
            blob_center: (rng.range(0.25, 0.75) * h, rng.range(0.25, 0.75) * w),
            blob_radius: rng.range(0.1, 0.18) * span,
            blob_velocity: (rng.below(5) as i64 - 2, rng.below(5) as i64 - 2),
            stripe_period: rng.range(3.0, 6.0),
        }
    }

    pub fn blob_center_at(&self, f: usize) -> (f64, f64) {
        (self.blob_center.0 + (self.blob_velocity.0 * f as i64) as f64, self.blob_center.1 + (self.blob_velocity.1 * f as i64) as f64)
    }

    pub fn in_blob(&self, f: usize, y: usize, x: usize) -> bool {
        let (cy, cx) = self.blob_center_at(f);
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        dy * dy + dx * dx <= self.blob_radius * self.blob_radius
    }

    pub fn pixel(&self, f: usize, y: usize, x: usize, cfg: &DataConfig) -> [f32; 3] {
        if self.in_blob(f, y, x) {
            let (cy, _) = self.blob_center_at(f);
            let phase = (y as f64 + 0.5 - cy) / self.stripe_period;
            let k = if phase.rem_euclid(1.0) < 0.5 { 1.0 } else { 0.7 };
            return self.blob_color.map(|c| (c as f64 * k) as f32);
        }
        let (sin, cos) = self.angle.sin_cos();
        let u = (x as f64 + 0.5 - cfg.width as f64 / 2.0) * cos + (y as f64 + 0.5 - cfg.height as f64 / 2.0) * sin;
        let s = 1.0 / (1.0 + (-(u - self.offset - self.drift * f as f64) / self.softness).exp());
        let mut out = [0f32; 3];
        for c in 0..3 {
            out[c] = ((1.0 - s) * self.color_a[c] as f64 + s * self.color_b[c] as f64) as f32;
        }
        out
    }

    pub fn render(&self, cfg: &DataConfig) -> Video {
        let mut v = Video::filled(cfg.frames, cfg.height, cfg.width, 3, 0.0);
        for f in 0..cfg.frames {
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    v.pixel_mut(f, y, x).copy_from_slice(&self.pixel(f, y, x, cfg));
                }
            }
        }
        v
    }

    /// Blob pixels move with the blob; the rest with the gradient drift.
    pub fn flow(&self, cfg: &DataConfig) -> FlowField {
        let (sin, cos) = self.angle.sin_cos();
        let bg = [(self.drift * sin) as f32, (self.drift * cos) as f32];
        let blob = [self.blob_velocity.0 as f32, self.blob_velocity.1 as f32];
        let mut flow = FlowField::zeros(cfg.frames.saturating_sub(1), cfg.height, cfg.width);
        for f in 0..flow.frames {
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    flow.set(f, y, x, if self.in_blob(f, y, x) { blob } else { bg });
                }
            }
        }
        flow
    }

    pub fn blob_mask(&self, cfg: &DataConfig) -> PixelMask {
        let mut m = PixelMask::empty(cfg.frames, cfg.height, cfg.width);
        for f in 0..cfg.frames {
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    m.set(f, y, x, self.in_blob(f, y, x));
                }
            }
        }
        m
    }
}

fn dist2(a: &[f32; 3], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Whichever of `a`/`b` more unmasked pixels are nearer to (ties go to `a`).
pub fn dominant_color(v: &Video, m: &PixelMask, a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    let (mut na, mut nb) = (0usize, 0usize);
    for f in 0..v.frames() {
        for y in 0..v.height() {
            for x in 0..v.width() {
                if m.get(f, y, x) {
                    continue;
                }
                let p = v.pixel(f, y, x);
                if dist2(&a, p) <= dist2(&b, p) {
                    na += 1;
                } else {
                    nb += 1;
                }
            }
        }
    }
    if na >= nb {
        a
    } else {
        b
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub video: Video,
    pub mask: PixelMask,
    pub prompt: String,
    pub prompt_ids: Vec<usize>,
    pub target: Video,
    pub fill: [f32; 3],
    pub kind: PromptKind,
    pub scene: Scene,
    pub flow: FlowField,
}

/// Sample `index` of the stream seeded by `seed`; `force` pins the prompt kind.
pub fn make_sample(seed: u64, index: u64, cfg: &DataConfig, force: Option<PromptKind>) -> Result<SyntheticSample> {
    let mut rng = RngState::stream(seed, index);
    let scene = Scene::random(&mut rng, cfg);
    let video = scene.render(cfg);
    let mask = augment_mask(&mut rng, cfg.frames, cfg.height, cfg.width);
    let coin = rng.coin(0.5);
    let kind = force.unwrap_or(if coin { PromptKind::Directive } else { PromptKind::Local });
    let color_idx = rng.below(COLORS.len());
    let (prompt, fill) = match kind {
        PromptKind::Directive => (MATCH_SCENE.to_string(), dominant_color(&video, &mask, scene.color_a, scene.color_b)),
        PromptKind::Local => {
            let name = COLORS[color_idx].0;
            (format!("fill:{name}"), color_rgb(name).expect("palette color"))
        }
    };
    let prompt_ids = parse_prompt(&prompt)?;
    let mut target = video.clone();
    for f in 0..cfg.frames {
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                if mask.get(f, y, x) {
                    target.pixel_mut(f, y, x).copy_from_slice(&fill);
                }
            }
        }
    }
    let flow = scene.flow(cfg);
    Ok(SyntheticSample { video, mask, prompt, prompt_ids, target, fill, kind, scene, flow })
}

/// Deterministic sample stream: item `i` depends only on `(seed, i)`.
pub fn make_synthetic_dataset(seed: u64, count: usize, cfg: &DataConfig) -> impl Iterator<Item = Result<SyntheticSample>> + '_ {
    (0..count as u64).map(move |i| make_sample(seed, i, cfg, None))
}

/// The directive-only evaluation split.
pub fn match_scene_split(seed: u64, count: usize, cfg: &DataConfig) -> Result<Vec<SyntheticSample>> {
    (0..count as u64).map(|i| make_sample(seed, i, cfg, Some(PromptKind::Directive))).collect()
}

pub fn solid_video(frames: usize, height: usize, width: usize, rgb: [f32; 3]) -> Video {
    let data = (0..frames * height * width).flat_map(|_| rgb).collect();
    Video::new(Tensor::new(vec![frames, height, width, 3], data).expect("shape")).expect("video")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_is_reproducible() {
        let cfg = DataConfig::default();
        let a = make_sample(5, 17, &cfg, None).unwrap();
        let b = make_sample(5, 17, &cfg, None).unwrap();
        assert_eq!(a.video, b.video);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.prompt, b.prompt);
        assert_eq!(a.target, b.target);
        assert_ne!(make_sample(5, 18, &cfg, None).unwrap().video, a.video);
    }

    #[test]
    fn targets_follow_the_prompt_rule() {
        let cfg = DataConfig::default();
        for i in 0..40 {
            let s = make_sample(3, i, &cfg, None).unwrap();
            let want = match s.kind {
                PromptKind::Local => color_rgb(s.prompt.strip_prefix("fill:").unwrap()).unwrap(),
                PromptKind::Directive => {
                    // Independent recount over unmasked pixels.
                    let (mut ca, mut cb) = (0, 0);
                    for (k, px) in s.video.data().chunks(3).enumerate() {
                        if s.mask.bits()[k] {
                            continue;
                        }
                        let da: f32 = px.iter().zip(s.scene.color_a).map(|(p, c)| (p - c).powi(2)).sum();
                        let db: f32 = px.iter().zip(s.scene.color_b).map(|(p, c)| (p - c).powi(2)).sum();
                        if da <= db { ca += 1 } else { cb += 1 }
                    }
                    if ca >= cb { s.scene.color_a } else { s.scene.color_b }
                }
            };
            assert_eq!(s.fill, want);
            for (k, (t, v)) in s.target.data().chunks(3).zip(s.video.data().chunks(3)).enumerate() {
                if s.mask.bits()[k] {
                    assert_eq!(t, &want[..]);
                } else {
                    assert_eq!(t, v);
                }
            }
        }
    }

    #[test]
    fn fill_red_is_pure_red() {
        let cfg = DataConfig::default();
        let s = (0..100).map(|i| make_sample(9, i, &cfg, None).unwrap()).find(|s| s.prompt == "fill:red").unwrap();
        let red = color_rgb("red").unwrap();
        for (k, px) in s.target.data().chunks(3).enumerate() {
            if s.mask.bits()[k] {
                assert_eq!(px, &red[..]);
            }
        }
    }

    #[test]
    fn prompt_kinds_are_balanced() {
        let cfg = DataConfig { frames: 1, height: 8, width: 8 };
        let n = 10_000;
        let directive = make_synthetic_dataset(11, n, &cfg).filter(|s| s.as_ref().unwrap().kind == PromptKind::Directive).count();
        assert!((directive as f64 / n as f64 - 0.5).abs() < 0.02, "{directive}");
    }

    #[test]
    fn blob_flow_matches_rendered_motion() {
        let cfg = DataConfig::default();
        let s = make_sample(1, 2, &cfg, None).unwrap();
        let blobs = s.scene.blob_mask(&cfg);
        let (vy, vx) = s.scene.blob_velocity;
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                if blobs.get(0, y, x) {
                    assert_eq!(s.flow.get(0, y, x), [vy as f32, vx as f32]);
                    let (ty, tx) = (y as i64 + vy, x as i64 + vx);
                    if ty >= 0 && tx >= 0 && (ty as usize) < cfg.height && (tx as usize) < cfg.width {
                        assert!(blobs.get(1, ty as usize, tx as usize));
                    }
                }
            }
        }
    }
}
