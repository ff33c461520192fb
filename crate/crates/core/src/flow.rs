//! Block-matching optical flow and flow-based mask warping.

use crate::codec::Video;
use crate::error::{Error, Result};
use crate::mask::PixelMask;

pub const FLOW_BLOCK: usize = 8;
pub const FLOW_SEARCH: i64 = 8;
pub const MAX_FLOW: f32 = 8.0;

/// Per-pixel `(dy, dx)` displacements for `frames` consecutive frame pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        FlowField { frames, height, width, data: vec![[0.0; 2]; frames * height * width] }
    }

    pub fn uniform(frames: usize, height: usize, width: usize, d: [f32; 2]) -> Self {
        FlowField { frames, height, width, data: vec![d; frames * height * width] }
    }

    pub fn from_data(frames: usize, height: usize, width: usize, data: Vec<[f32; 2]>) -> Result<Self> {
        if data.len() != frames * height * width {
            return Err(Error::shape("flow", format!("{} vectors for {frames}×{height}×{width}", data.len())));
        }
        let f = FlowField { frames, height, width, data };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        for d in &self.data {
            if !d[0].is_finite() || !d[1].is_finite() || d[0].abs() > MAX_FLOW || d[1].abs() > MAX_FLOW {
                return Err(Error::Config(format!("flow vector {d:?} is not finite or exceeds {MAX_FLOW}")));
            }
        }
        Ok(())
    }

    pub fn get(&self, f: usize, y: usize, x: usize) -> [f32; 2] {
        self.data[(f * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, f: usize, y: usize, x: usize, d: [f32; 2]) {
        self.data[(f * self.height + y) * self.width + x] = d;
    }

    /// Flow between frames `f` and `f + 1` as a one-slice field.
    pub fn slice(&self, f: usize) -> FlowField {
        let n = self.height * self.width;
        FlowField { frames: 1, height: self.height, width: self.width, data: self.data[f * n..(f + 1) * n].to_vec() }
    }
}

fn sad(a: &Video, b: &Video, y0: usize, x0: usize, bh: usize, bw: usize, dy: i64, dx: i64) -> f64 {
    let mut s = 0.0;
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            let pa = a.pixel(0, y, x);
            let pb = b.pixel(0, (y as i64 + dy) as usize, (x as i64 + dx) as usize);
            s += pa.iter().zip(pb).map(|(u, v)| (u - v).abs() as f64).sum::<f64>();
        }
    }
    s
}

/// Flow from single-frame `a` to single-frame `b` by exhaustive block matching.
///
/// Candidates must keep the block inside the frame; ties prefer the
/// smallest displacement.
pub fn estimate_flow(a: &Video, b: &Video) -> Result<FlowField> {
    if a.dims() != b.dims() || a.frames() != 1 {
        return Err(Error::shape("estimate_flow", format!("{:?} vs {:?} (single frames expected)", a.dims(), b.dims())));
    }
    let (h, w) = (a.height(), a.width());
    let mut flow = FlowField::zeros(1, h, w);
    for y0 in (0..h).step_by(FLOW_BLOCK) {
        for x0 in (0..w).step_by(FLOW_BLOCK) {
            let (bh, bw) = (FLOW_BLOCK.min(h - y0), FLOW_BLOCK.min(w - x0));
            let mut best = (f64::INFINITY, i64::MAX, 0i64, 0i64);
            for dy in -FLOW_SEARCH..=FLOW_SEARCH {
                for dx in -FLOW_SEARCH..=FLOW_SEARCH {
                    let (ty, tx) = (y0 as i64 + dy, x0 as i64 + dx);
                    if ty < 0 || tx < 0 || ty + bh as i64 > h as i64 || tx + bw as i64 > w as i64 {
                        continue;
                    }
                    let cost = sad(a, b, y0, x0, bh, bw, dy, dx);
                    let r = dy * dy + dx * dx;
                    if cost < best.0 || (cost == best.0 && r < best.1) {
                        best = (cost, r, dy, dx);
                    }
                }
            }
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    flow.set(0, y, x, [best.2 as f32, best.3 as f32]);
                }
            }
        }
    }
    Ok(flow)
}

fn morph(m: &PixelMask, dilate: bool) -> PixelMask {
    let (f, h, w) = m.dims();
    let mut out = PixelMask::empty(f, h, w);
    for fr in 0..f {
        for y in 0..h {
            for x in 0..w {
                let mut acc = !dilate;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        let inside = yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64;
                        // Outside the frame counts as the operation's identity.
                        let v = if inside { m.get(fr, yy as usize, xx as usize) } else { !dilate };
                        acc = if dilate { acc || v } else { acc && v };
                    }
                }
                out.set(fr, y, x, acc);
            }
        }
    }
    out
}

/// Forward nearest-neighbour splat of a single-frame mask along one flow slice,
/// then a 1-pixel closing that only adds pixels whose backward source is set.
pub fn warp_mask(m: &PixelMask, flow: &FlowField) -> Result<PixelMask> {
    let (f, h, w) = m.dims();
    if f != 1 || flow.frames < 1 || flow.height != h || flow.width != w {
        return Err(Error::shape("warp_mask", format!("mask {:?} vs flow {}×{}", m.dims(), flow.height, flow.width)));
    }
    flow.validate()?;
    let mut splat = PixelMask::empty(1, h, w);
    for y in 0..h {
        for x in 0..w {
            if !m.get(0, y, x) {
                continue;
            }
            let [dy, dx] = flow.get(0, y, x);
            let (ty, tx) = ((y as f32 + dy).round() as i64, (x as f32 + dx).round() as i64);
            if ty >= 0 && tx >= 0 && ty < h as i64 && tx < w as i64 {
                splat.set(0, ty as usize, tx as usize, true);
            }
        }
    }
    let closed = morph(&morph(&splat, true), false);
    let mut out = splat.clone();
    for y in 0..h {
        for x in 0..w {
            if splat.get(0, y, x) || !closed.get(0, y, x) {
                continue;
            }
            let [dy, dx] = flow.get(0, y, x);
            let (sy, sx) = ((y as f32 - dy).round() as i64, (x as f32 - dx).round() as i64);
            if sy >= 0 && sx >= 0 && sy < h as i64 && sx < w as i64 && m.get(0, sy as usize, sx as usize) {
                out.set(0, y, x, true);
            }
        }
    }
    Ok(out)
}

/// Predicts the next frame by nearest-neighbour backward sampling along `flow`.
/// Carries a one-slice flow to the coordinates of the frame it points at:
/// each vector is splatted to its own target pixel (constant velocity).
/// Where several land, the largest displacement wins; unreached pixels keep
/// their previous vector.
pub fn advect_flow(flow: &FlowField) -> Result<FlowField> {
    if flow.frames != 1 {
        return Err(Error::shape("advect_flow", format!("{} slices, expected 1", flow.frames)));
    }
    flow.validate()?;
    let (h, w) = (flow.height, flow.width);
    let mut out = flow.clone();
    let mut best = vec![-1f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = flow.get(0, y, x);
            let (ty, tx) = ((y as f32 + d[0]).round() as i64, (x as f32 + d[1]).round() as i64);
            if ty < 0 || tx < 0 || ty >= h as i64 || tx >= w as i64 {
                continue;
            }
            let i = ty as usize * w + tx as usize;
            let mag = d[0] * d[0] + d[1] * d[1];
            if mag > best[i] {
                best[i] = mag;
                out.data[i] = d;
            }
        }
    }
    Ok(out)
}

pub fn warp_frame(v: &Video, flow: &FlowField) -> Result<Video> {
    let (h, w) = (v.height(), v.width());
    if v.frames() != 1 || flow.height != h || flow.width != w {
        return Err(Error::shape("warp_frame", format!("frame {:?} vs flow {}×{}", v.dims(), flow.height, flow.width)));
    }
    let mut out = v.clone();
    for y in 0..h {
        for x in 0..w {
            let [dy, dx] = flow.get(0, y, x);
            let sy = ((y as f32 - dy).round() as i64).clamp(0, h as i64 - 1) as usize;
            let sx = ((x as f32 - dx).round() as i64).clamp(0, w as i64 - 1) as usize;
            out.pixel_mut(0, y, x).copy_from_slice(v.pixel(0, sy, sx));
        }
    }
    Ok(out)
}

pub fn iou(a: &PixelMask, b: &PixelMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
