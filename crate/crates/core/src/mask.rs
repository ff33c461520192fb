//! Edit masks: background construction, latent downsampling, dilation,
//! token selection, gather/scatter and control-context assembly.

use crate::codec::{GridDims, LatentGrid, PatchCodec, Video};
use crate::error::{Error, Result};
use crate::numeric::{RngState, Tensor};

/// Fill value for masked pixels of the background video.
pub const BACKGROUND_FILL: f32 = 0.5;
pub const DEFAULT_DILATION: usize = 1;

/// `frames × height × width` binary mask; `true` marks pixels to regenerate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    frames: usize,
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn empty(frames: usize, height: usize, width: usize) -> Self {
        PixelMask { frames, height, width, bits: vec![false; frames * height * width] }
    }

    pub fn full(frames: usize, height: usize, width: usize) -> Self {
        PixelMask { frames, height, width, bits: vec![true; frames * height * width] }
    }

    pub fn from_bits(frames: usize, height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != frames * height * width {
            return Err(Error::shape("pixel mask", format!("{} bits for {frames}×{height}×{width}", bits.len())));
        }
        Ok(PixelMask { frames, height, width, bits })
    }

    /// From an `F×H×W` (or `F×H×W×1`) tensor with values in {0, 1}.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        let ok = s.len() == 3 || (s.len() == 4 && s[3] == 1);
        if !ok {
            return Err(Error::shape("pixel mask", format!("expected F×H×W, got {s:?}")));
        }
        let mut bits = Vec::with_capacity(t.len());
        for &v in t.data() {
            match v {
                v if v == 0.0 => bits.push(false),
                v if v == 1.0 => bits.push(true),
                v => return Err(Error::Format { format: "mask", detail: format!("value {v} not in {{0,1}}") }),
            }
        }
        Self::from_bits(s[0], s[1], s[2], bits)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.frames, self.height, self.width], data).expect("mask tensor")
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, f: usize, y: usize, x: usize) -> bool {
        self.bits[(f * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, f: usize, y: usize, x: usize, v: bool) {
        self.bits[(f * self.height + y) * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn area_ratio(&self) -> f64 {
        self.count() as f64 / self.bits.len().max(1) as f64
    }

    pub fn frame_count(&self, f: usize) -> usize {
        let n = self.height * self.width;
        self.bits[f * n..(f + 1) * n].iter().filter(|&&b| b).count()
    }

    pub fn frame(&self, f: usize) -> PixelMask {
        let n = self.height * self.width;
        PixelMask { frames: 1, height: self.height, width: self.width, bits: self.bits[f * n..(f + 1) * n].to_vec() }
    }

    pub fn frames_range(&self, start: usize, end: usize) -> PixelMask {
        let n = self.height * self.width;
        PixelMask {
            frames: end - start,
            height: self.height,
            width: self.width,
            bits: self.bits[start * n..end * n].to_vec(),
        }
    }

    pub fn concat(parts: &[PixelMask]) -> Result<PixelMask> {
        let first = parts.first().ok_or_else(|| Error::shape("mask concat", "no masks"))?;
        if parts.iter().any(|p| p.height != first.height || p.width != first.width) {
            return Err(Error::shape("mask concat", "frame sizes differ"));
        }
        let bits = parts.iter().flat_map(|p| p.bits.iter().copied()).collect();
        let frames = parts.iter().map(|p| p.frames).sum();
        Self::from_bits(frames, first.height, first.width, bits)
    }

    pub fn union(&self, other: &PixelMask) -> Result<PixelMask> {
        if self.dims() != other.dims() {
            return Err(Error::shape("mask union", "shapes differ"));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect();
        Ok(PixelMask { bits, ..*self })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }

    pub fn check_video(&self, v: &Video) -> Result<()> {
        if (v.frames(), v.height(), v.width()) != self.dims() {
            return Err(Error::shape(
                "mask/video",
                format!("mask {:?} vs video {:?}", self.dims(), v.dims()),
            ));
        }
        Ok(())
    }
}

/// Binary mask at latent resolution, indexed like the token grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentMask {
    dims: GridDims,
    bits: Vec<bool>,
}

impl LatentMask {
    pub fn empty(dims: GridDims) -> Self {
        LatentMask { dims, bits: vec![false; dims.tokens()] }
    }

    pub fn from_bits(dims: GridDims, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.tokens() {
            return Err(Error::shape("latent mask", format!("{} bits for {} tokens", bits.len(), dims.tokens())));
        }
        Ok(LatentMask { dims, bits })
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, v: bool) {
        self.bits[i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn is_superset_of(&self, other: &LatentMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| a || !b)
    }

    pub fn intersects(&self, other: &LatentMask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b)
    }

    /// Pixel mask covering every pixel of every set token.
    pub fn to_pixels(&self, patch: usize) -> PixelMask {
        let d = self.dims;
        let mut m = PixelMask::empty(d.frames, d.height * patch, d.width * patch);
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let c = d.coord(i);
            for y in c.h * patch..(c.h + 1) * patch {
                for x in c.w * patch..(c.w + 1) * patch {
                    m.set(c.t, y, x, true);
                }
            }
        }
        m
    }
}

/// Pixels covered by the dilated latent mask of `m`: everything an edit may rewrite.
pub fn edit_footprint(m: &PixelMask, patch: usize, radius: usize) -> Result<PixelMask> {
    Ok(dilate_mask(&downsample_mask(m, patch)?, radius).to_pixels(patch))
}

/// Sorted flat indices of selected tokens plus the inverse map used by scatter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenIndexSet {
    indices: Vec<usize>,
    total: usize,
    position: Vec<Option<usize>>,
}

impl TokenIndexSet {
    /// Validates strict ordering and range.
    pub fn new(indices: Vec<usize>, total: usize) -> Result<Self> {
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config(format!("token indices not strictly increasing at {}", w[1])));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= total {
                return Err(Error::IndexOutOfRange { index: last, extent: total });
            }
        }
        let mut position = vec![None; total];
        for (k, &i) in indices.iter().enumerate() {
            position[i] = Some(k);
        }
        Ok(TokenIndexSet { indices, total, position })
    }

    pub fn all(total: usize) -> Self {
        Self::new((0..total).collect(), total).expect("full index set")
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Position of flat token `i` inside the gathered sequence.
    pub fn position(&self, i: usize) -> Option<usize> {
        self.position.get(i).copied().flatten()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.position(i).is_some()
    }

    pub fn ratio(&self) -> f64 {
        self.indices.len() as f64 / self.total.max(1) as f64
    }
}

/// Replaces masked pixels by the constant fill.
pub fn make_background(v: &Video, m: &PixelMask) -> Result<Video> {
    m.check_video(v)?;
    let mut out = v.clone();
    for f in 0..m.frames {
        for y in 0..m.height {
            for x in 0..m.width {
                if m.get(f, y, x) {
                    out.pixel_mut(f, y, x).iter_mut().for_each(|p| *p = BACKGROUND_FILL);
                }
            }
        }
    }
    Ok(out)
}

/// Any-coverage downsampling: a latent cell is set iff any covered pixel is.
pub fn downsample_mask(m: &PixelMask, patch: usize) -> Result<LatentMask> {
    if patch == 0 || m.height % patch != 0 || m.width % patch != 0 {
        return Err(Error::shape("downsample_mask", format!("{}×{} not divisible by {patch}", m.height, m.width)));
    }
    let dims = GridDims::new(m.frames, m.height / patch, m.width / patch);
    let mut out = LatentMask::empty(dims);
    for f in 0..m.frames {
        for y in 0..m.height {
            for x in 0..m.width {
                if m.get(f, y, x) {
                    let i = dims.flat(crate::codec::TokenCoord { t: f, h: y / patch, w: x / patch });
                    out.bits[i] = true;
                }
            }
        }
    }
    Ok(out)
}

/// Spatial square dilation of radius `r` inside each latent frame.
pub fn dilate_mask(m: &LatentMask, r: usize) -> LatentMask {
    if r == 0 {
        return m.clone();
    }
    let d = m.dims;
    let mut out = LatentMask::empty(d);
    for t in 0..d.frames {
        for h in 0..d.height {
            for w in 0..d.width {
                if !m.bits[(t * d.height + h) * d.width + w] {
                    continue;
                }
                let (h0, h1) = (h.saturating_sub(r), (h + r).min(d.height - 1));
                let (w0, w1) = (w.saturating_sub(r), (w + r).min(d.width - 1));
                for hh in h0..=h1 {
                    for ww in w0..=w1 {
                        out.bits[(t * d.height + hh) * d.width + ww] = true;
                    }
                }
            }
        }
    }
    out
}

pub fn select_tokens(m: &LatentMask) -> Result<TokenIndexSet> {
    let idx: Vec<usize> = (0..m.bits.len()).filter(|&i| m.bits[i]).collect();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    TokenIndexSet::new(idx, m.bits.len())
}

/// Rows of `tokens` in index order.
pub fn gather(tokens: &Tensor<f32>, s: &TokenIndexSet) -> Result<Tensor<f32>> {
    if tokens.rows() != s.total() {
        return Err(Error::shape("gather", format!("{} rows vs index set over {}", tokens.rows(), s.total())));
    }
    tokens.gather_rows(s.indices())
}

/// Overwrites exactly the rows in `s`; all other rows are left untouched.
pub fn scatter(rows: &Tensor<f32>, s: &TokenIndexSet, dest: &LatentGrid) -> Result<LatentGrid> {
    let mut out = dest.clone();
    scatter_into(rows, s, &mut out)?;
    Ok(out)
}

pub fn scatter_into(rows: &Tensor<f32>, s: &TokenIndexSet, dest: &mut LatentGrid) -> Result<()> {
    if rows.rows() != s.len() || rows.cols() != dest.channels() {
        return Err(Error::shape(
            "scatter",
            format!("{:?} rows for {} indices of width {}", rows.shape(), s.len(), dest.channels()),
        ));
    }
    if s.total() != dest.dims().tokens() {
        return Err(Error::IndexOutOfRange { index: s.total(), extent: dest.dims().tokens() });
    }
    for (k, &i) in s.indices().iter().enumerate() {
        dest.tokens_mut().row_mut(i).copy_from_slice(rows.row(k));
    }
    Ok(())
}

/// Everything derived from one (video, mask) pair for a sparse edit.
#[derive(Clone, Debug)]
pub struct EditContext {
    /// `tokens × (c + 1)`: encoded background plus the latent mask bit.
    pub control: Tensor<f32>,
    /// Rows of `control` at the selected tokens.
    pub control_local: Tensor<f32>,
    /// Undilated latent mask (loss weighting).
    pub latent_mask: LatentMask,
    /// Dilated latent mask (token selection).
    pub dilated: LatentMask,
    pub selection: TokenIndexSet,
    pub background: Video,
}

impl EditContext {
    /// Loss weight (0 or 1) of every selected token.
    pub fn selected_weights(&self) -> Vec<f32> {
        self.selection.indices().iter().map(|&i| if self.latent_mask.get(i) { 1.0 } else { 0.0 }).collect()
    }
}

pub fn build_control_context(codec: &PatchCodec, v: &Video, m: &PixelMask, radius: usize) -> Result<EditContext> {
    m.check_video(v)?;
    let background = make_background(v, m)?;
    let latent_mask = downsample_mask(m, codec.patch())?;
    let dilated = dilate_mask(&latent_mask, radius);
    let selection = select_tokens(&dilated)?;
    let zb = codec.encode(&background)?;
    let c = zb.channels();
    let n = zb.dims().tokens();
    let mut data = Vec::with_capacity(n * (c + 1));
    for i in 0..n {
        data.extend_from_slice(zb.tokens().row(i));
        data.push(if latent_mask.get(i) { 1.0 } else { 0.0 });
    }
    let control = Tensor::new(vec![n, c + 1], data)?;
    let control_local = control.gather_rows(selection.indices())?;
    Ok(EditContext { control, control_local, latent_mask, dilated, selection, background })
}

/// One edit region: mask, prompt text and sampler seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub mask: PixelMask,
    pub prompt: String,
    pub seed: u64,
}

/// Regions whose dilated latent masks are pairwise disjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet {
    regions: Vec<Region>,
}

impl RegionSet {
    pub fn new(regions: Vec<Region>, patch: usize, radius: usize) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::Config("region set is empty".into()));
        }
        let dilated: Vec<LatentMask> = regions
            .iter()
            .map(|r| downsample_mask(&r.mask, patch).map(|m| dilate_mask(&m, radius)))
            .collect::<Result<_>>()?;
        for i in 0..dilated.len() {
            if dilated[i].dims() != dilated[0].dims() {
                return Err(Error::shape("region set", "region masks differ in shape"));
            }
            for j in i + 1..dilated.len() {
                if dilated[i].intersects(&dilated[j]) {
                    return Err(Error::OverlappingRegions(i, j));
                }
            }
        }
        Ok(RegionSet { regions })
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// Primitive used by [`augment_mask`]; coordinates are frame-0 pixels.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskShape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Stroke { points: Vec<(f64, f64)>, radius: f64 },
}

impl MaskShape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            MaskShape::Rect { y0, x0, y1, x1 } => y >= *y0 && y < *y1 && x >= *x0 && x < *x1,
            MaskShape::Stroke { points, radius } => points.windows(2).any(|seg| {
                let ((ay, ax), (by, bx)) = (seg[0], seg[1]);
                let (dy, dx) = (by - ay, bx - ax);
                let len2 = dy * dy + dx * dx;
                let u = if len2 == 0.0 { 0.0 } else { (((y - ay) * dy + (x - ax) * dx) / len2).clamp(0.0, 1.0) };
                let (py, px) = (ay + u * dy, ax + u * dx);
                (y - py).powi(2) + (x - px).powi(2) <= radius * radius
            }),
        }
    }
}

/// Shapes plus a whole-mask drift in integer pixels per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub shapes: Vec<MaskShape>,
    pub velocity: (i64, i64),
}

impl MaskPlan {
    /// Frame `t` is frame 0 translated by `t·velocity`, clipped at the border.
    pub fn render(&self, frames: usize, height: usize, width: usize) -> PixelMask {
        let mut m = PixelMask::empty(frames, height, width);
        for f in 0..frames {
            let (oy, ox) = (self.velocity.0 * f as i64, self.velocity.1 * f as i64);
            for y in 0..height {
                for x in 0..width {
                    let sy = y as f64 - oy as f64 + 0.5;
                    let sx = x as f64 - ox as f64 + 0.5;
                    if self.shapes.iter().any(|s| s.contains(sy, sx)) {
                        m.set(f, y, x, true);
                    }
                }
            }
        }
        m
    }
}

pub const AUGMENT_MIN_RATIO: f64 = 0.05;
pub const AUGMENT_MAX_RATIO: f64 = 0.6;

pub fn augment_plan(rng: &mut RngState, frames: usize, height: usize, width: usize) -> MaskPlan {
    let (hf, wf) = (height as f64, width as f64);
    for _ in 0..64 {
        let count = 1 + rng.below(3);
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            if rng.coin(0.5) {
                let h = rng.range(0.2, 0.7) * hf;
                let w = rng.range(0.2, 0.7) * wf;
                let y0 = rng.range(0.0, hf - h);
                let x0 = rng.range(0.0, wf - w);
                shapes.push(MaskShape::Rect { y0, x0, y1: y0 + h, x1: x0 + w });
            } else {
                let n = 2 + rng.below(3);
                let points = (0..n).map(|_| (rng.range(0.15, 0.85) * hf, rng.range(0.15, 0.85) * wf)).collect();
                let radius = rng.range(0.05, 0.15) * hf.min(wf);
                shapes.push(MaskShape::Stroke { points, radius });
            }
        }
        let velocity = if rng.coin(0.5) {
            (0, 0)
        } else {
            (rng.below(3) as i64 - 1, rng.below(3) as i64 - 1)
        };
        let plan = MaskPlan { shapes, velocity };
        let m = plan.render(frames, height, width);
        let r = m.area_ratio();
        if (AUGMENT_MIN_RATIO..=AUGMENT_MAX_RATIO).contains(&r) && (0..frames).all(|f| m.frame_count(f) > 0) {
            return plan;
        }
    }
    let side = 0.45_f64.sqrt();
    let (h, w) = (side * hf, side * wf);
    MaskPlan {
        shapes: vec![MaskShape::Rect { y0: (hf - h) / 2.0, x0: (wf - w) / 2.0, y1: (hf + h) / 2.0, x1: (wf + w) / 2.0 }],
        velocity: (0, 0),
    }
}

/// Random training mask: union of rectangles and thick polylines, static or
/// drifting, nonempty in every frame, area ratio within `[0.05, 0.6]`.
pub fn augment_mask(rng: &mut RngState, frames: usize, height: usize, width: usize) -> PixelMask {
    augment_plan(rng, frames, height, width).render(frames, height, width)
}
