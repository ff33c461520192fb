//! Fixed orthonormal patch codec standing in for a video VAE.
//!
//! Each `p×p` pixel patch (all channels) is flattened and rotated by a fixed
//! orthonormal matrix. There is no temporal compression, so latent frame `t`
//! is pixel frame `t`.

use crate::error::{Error, Result};
use crate::numeric::{RngState, Tensor};

/// Seed of the fixed random matrix that is orthogonalized into the codec basis.
const BASIS_SEED: u64 = 0x00C0_DEC0;

pub const DEFAULT_PATCH: usize = 4;
pub const CHANNELS: usize = 3;

/// Pixel-space clip, `frames × height × width × channels`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    data: Tensor<f32>,
}

impl Video {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        if data.rank() != 4 || data.shape()[0] == 0 {
            return Err(Error::shape("video", format!("expected F×H×W×C, got {:?}", data.shape())));
        }
        Ok(Video { data })
    }

    pub fn filled(frames: usize, height: usize, width: usize, channels: usize, value: f32) -> Self {
        Video { data: Tensor::full(&[frames, height, width, channels], value) }
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    pub fn data(&self) -> &[f32] {
        self.data.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.data.data_mut()
    }

    fn offset(&self, f: usize, y: usize, x: usize) -> usize {
        ((f * self.height() + y) * self.width() + x) * self.channels()
    }

    pub fn pixel(&self, f: usize, y: usize, x: usize) -> &[f32] {
        let o = self.offset(f, y, x);
        &self.data.data()[o..o + self.channels()]
    }

    pub fn pixel_mut(&mut self, f: usize, y: usize, x: usize) -> &mut [f32] {
        let o = self.offset(f, y, x);
        let c = self.channels();
        &mut self.data.data_mut()[o..o + c]
    }

    /// One frame as a single-frame clip.
    pub fn frame(&self, f: usize) -> Video {
        let n = self.height() * self.width() * self.channels();
        let data = self.data.data()[f * n..(f + 1) * n].to_vec();
        Video {
            data: Tensor::new(vec![1, self.height(), self.width(), self.channels()], data).expect("frame"),
        }
    }

    /// Frames `range` of this clip.
    pub fn frames_range(&self, start: usize, end: usize) -> Video {
        let n = self.height() * self.width() * self.channels();
        let data = self.data.data()[start * n..end * n].to_vec();
        Video {
            data: Tensor::new(vec![end - start, self.height(), self.width(), self.channels()], data)
                .expect("range"),
        }
    }

    /// Concatenates clips along time.
    pub fn concat(parts: &[Video]) -> Result<Video> {
        let first = parts.first().ok_or_else(|| Error::shape("video concat", "no clips"))?;
        let [_, h, w, c] = first.dims();
        if parts.iter().any(|p| p.height() != h || p.width() != w || p.channels() != c) {
            return Err(Error::shape("video concat", "frame sizes differ"));
        }
        let frames: usize = parts.iter().map(Video::frames).sum();
        let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
        Video::new(Tensor::new(vec![frames, h, w, c], data)?)
    }
}

/// Latent token grid extents: latent frames, rows, columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

/// Original `(t, h, w)` position of a token in its grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenCoord {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        GridDims { frames, height, width }
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn per_frame(&self) -> usize {
        self.height * self.width
    }

    /// Frame-major, then row-major spatial.
    pub fn flat(&self, c: TokenCoord) -> usize {
        (c.t * self.height + c.h) * self.width + c.w
    }

    pub fn coord(&self, i: usize) -> TokenCoord {
        let w = i % self.width;
        let h = (i / self.width) % self.height;
        let t = i / self.per_frame();
        TokenCoord { t, h, w }
    }

    pub fn coords(&self, indices: &[usize]) -> Vec<TokenCoord> {
        indices.iter().map(|&i| self.coord(i)).collect()
    }

    pub fn all_coords(&self) -> Vec<TokenCoord> {
        (0..self.tokens()).map(|i| self.coord(i)).collect()
    }
}

/// Encoded clip: `f × h × w` tokens of `c = p·p·C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    dims: GridDims,
    patch: usize,
    pixel_channels: usize,
    /// `tokens × channels`, token order as in [`GridDims::flat`].
    tokens: Tensor<f32>,
}

impl LatentGrid {
    pub fn new(dims: GridDims, patch: usize, pixel_channels: usize, tokens: Tensor<f32>) -> Result<Self> {
        let c = patch * patch * pixel_channels;
        if tokens.shape() != [dims.tokens(), c] {
            return Err(Error::shape(
                "latent grid",
                format!("expected {}×{}, got {:?}", dims.tokens(), c, tokens.shape()),
            ));
        }
        Ok(LatentGrid { dims, patch, pixel_channels, tokens })
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn channels(&self) -> usize {
        self.patch * self.patch * self.pixel_channels
    }

    pub fn pixel_channels(&self) -> usize {
        self.pixel_channels
    }

    pub fn tokens(&self) -> &Tensor<f32> {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.tokens
    }

    pub fn into_tokens(self) -> Tensor<f32> {
        self.tokens
    }

    /// `f × h × w × c` view for serialization.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let d = self.dims;
        self.tokens.clone().reshape(&[d.frames, d.height, d.width, self.channels()]).expect("latent reshape")
    }

    pub fn from_tensor(t: Tensor<f32>, patch: usize, pixel_channels: usize) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::shape("latent grid", format!("rank {}", t.rank())));
        }
        let s = t.shape().to_vec();
        let dims = GridDims::new(s[0], s[1], s[2]);
        let tokens = t.reshape(&[dims.tokens(), s[3]])?;
        LatentGrid::new(dims, patch, pixel_channels, tokens)
    }
}

/// Orthonormal patch transform. Rows of `basis` are orthonormal; the first
/// row is the normalized constant vector.
#[derive(Clone, Debug)]
pub struct PatchCodec {
    patch: usize,
    pixel_channels: usize,
    basis: Vec<f64>,
}

impl Default for PatchCodec {
    fn default() -> Self {
        Self::new(DEFAULT_PATCH, CHANNELS)
    }
}

impl PatchCodec {
    pub fn new(patch: usize, pixel_channels: usize) -> Self {
        assert!(patch > 0 && pixel_channels > 0);
        let c = patch * patch * pixel_channels;
        let mut rng = RngState::new(BASIS_SEED);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c);
        let candidate = |i: usize, rng: &mut RngState| -> Vec<f64> {
            if i == 0 {
                vec![1.0; c]
            } else {
                (0..c).map(|_| rng.normal()).collect()
            }
        };
        let mut i = 0;
        while rows.len() < c {
            let mut v = candidate(i, &mut rng);
            i += 1;
            // modified Gram-Schmidt, two passes
            for _ in 0..2 {
                for r in &rows {
                    let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    for (x, y) in v.iter_mut().zip(r) {
                        *x -= dot * y;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
        PatchCodec { patch, pixel_channels, basis: rows.into_iter().flatten().collect() }
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn latent_channels(&self) -> usize {
        self.patch * self.patch * self.pixel_channels
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    pub fn grid_for(&self, frames: usize, height: usize, width: usize) -> Result<GridDims> {
        let p = self.patch;
        if height % p != 0 || width % p != 0 || height == 0 || width == 0 {
            return Err(Error::shape("encode", format!("{height}×{width} not divisible by patch {p}")));
        }
        Ok(GridDims::new(frames, height / p, width / p))
    }

    pub fn encode(&self, v: &Video) -> Result<LatentGrid> {
        if v.channels() != self.pixel_channels {
            return Err(Error::shape("encode", format!("{} channels, codec expects {}", v.channels(), self.pixel_channels)));
        }
        let dims = self.grid_for(v.frames(), v.height(), v.width())?;
        let (p, ch, c) = (self.patch, self.pixel_channels, self.latent_channels());
        let mut out = vec![0f32; dims.tokens() * c];
        let mut patch = vec![0f64; c];
        for tok in 0..dims.tokens() {
            let tc = dims.coord(tok);
            for dy in 0..p {
                for dx in 0..p {
                    let px = v.pixel(tc.t, tc.h * p + dy, tc.w * p + dx);
                    for k in 0..ch {
                        patch[(dy * p + dx) * ch + k] = px[k] as f64;
                    }
                }
            }
            let dst = &mut out[tok * c..(tok + 1) * c];
            for (i, d) in dst.iter_mut().enumerate() {
                let row = &self.basis[i * c..(i + 1) * c];
                *d = row.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>() as f32;
            }
        }
        LatentGrid::new(dims, p, ch, Tensor::new(vec![dims.tokens(), c], out)?)
    }

    pub fn decode(&self, z: &LatentGrid) -> Result<Video> {
        if z.patch() != self.patch || z.pixel_channels() != self.pixel_channels {
            return Err(Error::shape("decode", "latent grid was produced by a different codec"));
        }
        let dims = z.dims();
        let (p, ch, c) = (self.patch, self.pixel_channels, self.latent_channels());
        let (h, w) = (dims.height * p, dims.width * p);
        let mut video = Video::filled(dims.frames, h, w, ch, 0.0);
        let mut patch = vec![0f64; c];
        for tok in 0..dims.tokens() {
            let y = z.tokens().row(tok);
            patch.iter_mut().for_each(|v| *v = 0.0);
            for (i, &yi) in y.iter().enumerate() {
                let row = &self.basis[i * c..(i + 1) * c];
                let yi = yi as f64;
                for (pv, &b) in patch.iter_mut().zip(row) {
                    *pv += b * yi;
                }
            }
            let tc = dims.coord(tok);
            for dy in 0..p {
                for dx in 0..p {
                    let px = video.pixel_mut(tc.t, tc.h * p + dy, tc.w * p + dx);
                    for k in 0..ch {
                        px[k] = patch[(dy * p + dx) * ch + k] as f32;
                    }
                }
            }
        }
        Ok(video)
    }

    /// Decodes each latent row to its patch, clamps the pixels to
    /// `[lo, hi]` and encodes back.
    pub fn clamp_rows(&self, rows: &mut Tensor<f32>, lo: f64, hi: f64) -> Result<()> {
        let c = self.latent_channels();
        if rows.shape().len() != 2 || rows.shape()[1] != c {
            return Err(Error::shape("clamp_rows", format!("rows {:?}, codec has {c} channels", rows.shape())));
        }
        let mut patch = vec![0f64; c];
        for row in rows.data_mut().chunks_mut(c) {
            patch.iter_mut().for_each(|v| *v = 0.0);
            for (i, &yi) in row.iter().enumerate() {
                for (pv, &b) in patch.iter_mut().zip(&self.basis[i * c..(i + 1) * c]) {
                    *pv += b * yi as f64;
                }
            }
            patch.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
            for (i, d) in row.iter_mut().enumerate() {
                *d = self.basis[i * c..(i + 1) * c].iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>() as f32;
            }
        }
        Ok(())
    }
}

/// Cell boundaries partitioning `n` pixels into `g` contiguous cells.
pub(crate) fn cell_bounds(n: usize, g: usize) -> Vec<usize> {
    (0..=g).map(|i| i * n / g).collect()
}

/// Box-average every frame down to `g × g`. Cells tile the frame exactly,
/// so no pixel is dropped and non-square frames get non-square cells.
pub fn area_downsample(v: &Video, g: usize) -> Result<Video> {
    if g == 0 {
        return Err(Error::Config("downsample extent must be positive".into()));
    }
    if g > v.height().min(v.width()) {
        return Err(Error::shape("area_downsample", format!("{g} exceeds {}×{}", v.height(), v.width())));
    }
    let rows = cell_bounds(v.height(), g);
    let cols = cell_bounds(v.width(), g);
    let ch = v.channels();
    let mut out = Video::filled(v.frames(), g, g, ch, 0.0);
    let mut acc = vec![0f64; ch];
    for f in 0..v.frames() {
        for i in 0..g {
            for j in 0..g {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for y in rows[i]..rows[i + 1] {
                    for x in cols[j]..cols[j + 1] {
                        for (a, &p) in acc.iter_mut().zip(v.pixel(f, y, x)) {
                            *a += p as f64;
                        }
                    }
                }
                let n = ((rows[i + 1] - rows[i]) * (cols[j + 1] - cols[j])) as f64;
                for (o, a) in out.pixel_mut(f, i, j).iter_mut().zip(&acc) {
                    *o = (a / n) as f32;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_video(f: usize, h: usize, w: usize, seed: u64) -> Video {
        let mut rng = RngState::new(seed);
        Video::new(Tensor::rand_uniform(&[f, h, w, 3], 0.0, 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn basis_is_orthonormal() {
        let codec = PatchCodec::default();
        let c = codec.latent_channels();
        let b = codec.basis();
        for i in 0..c {
            for j in 0..c {
                let dot: f64 = (0..c).map(|k| b[i * c + k] * b[j * c + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_half_round_trips_bit_exact() {
        let codec = PatchCodec::default();
        let v = Video::filled(2, 8, 8, 3, 0.5);
        let back = codec.decode(&codec.encode(&v).unwrap()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn clamp_rows_matches_pixel_clamp() {
        let codec = PatchCodec::default();
        let mut rng = RngState::new(5);
        let v = Video::new(Tensor::rand_uniform(&[1, 8, 8, 3], -0.5, 1.5, &mut rng)).unwrap();
        let mut z = codec.encode(&v).unwrap();
        codec.clamp_rows(z.tokens_mut(), 0.0, 1.0).unwrap();
        let back = codec.decode(&z).unwrap();
        for (a, b) in back.data().iter().zip(v.data()) {
            assert!((a - b.clamp(0.0, 1.0)).abs() < 1e-5);
        }
        let inside = random_video(1, 8, 8, 6);
        let z0 = codec.encode(&inside).unwrap();
        let mut z1 = z0.clone();
        codec.clamp_rows(z1.tokens_mut(), 0.0, 1.0).unwrap();
        assert!(z1.tokens().data().iter().zip(z0.tokens().data()).all(|(a, b)| (a - b).abs() < 1e-5));
        assert!(codec.clamp_rows(&mut Tensor::zeros(&[2, 47]), 0.0, 1.0).is_err());
    }

    #[test]
    fn shape_arithmetic() {
        let codec = PatchCodec::default();
        let z = codec.encode(&random_video(1, 4, 4, 1)).unwrap();
        assert_eq!(z.dims(), GridDims::new(1, 1, 1));
        assert_eq!(z.channels(), 48);
        assert!(codec.encode(&random_video(1, 6, 4, 1)).is_err());
    }

    #[test]
    fn random_round_trip_and_linearity() {
        let codec = PatchCodec::default();
        let v = random_video(3, 8, 12, 2);
        let z = codec.encode(&v).unwrap();
        let back = codec.decode(&z).unwrap();
        assert!(back.tensor().max_abs_diff(v.tensor()) <= 1e-5);

        let scaled = Video::new(v.tensor().map(|x| 0.3 * x)).unwrap();
        let zs = codec.encode(&scaled).unwrap();
        let want = z.tokens().map(|x| 0.3 * x);
        assert!(zs.tokens().max_abs_diff(&want) <= 1e-6);
    }

    #[test]
    fn one_patch_changes_one_token() {
        let codec = PatchCodec::default();
        let v = random_video(2, 8, 8, 3);
        let mut w = v.clone();
        for dy in 0..4 {
            for dx in 0..4 {
                w.pixel_mut(1, 4 + dy, dx)[0] += 0.1;
            }
        }
        let (a, b) = (codec.encode(&v).unwrap(), codec.encode(&w).unwrap());
        let changed: Vec<usize> =
            (0..a.dims().tokens()).filter(|&i| a.tokens().row(i) != b.tokens().row(i)).collect();
        assert_eq!(changed, vec![a.dims().flat(TokenCoord { t: 1, h: 1, w: 0 })]);
    }

    #[test]
    fn area_downsample_examples() {
        let v = Video::filled(2, 8, 8, 3, 0.25);
        let d = area_downsample(&v, 4).unwrap();
        assert!(d.data().iter().all(|&x| x == 0.25));

        let mut v = Video::filled(1, 2, 2, 1, 0.0);
        v.pixel_mut(0, 1, 0)[0] = 1.0;
        v.pixel_mut(0, 1, 1)[0] = 1.0;
        assert_eq!(area_downsample(&v, 1).unwrap().data(), &[0.5]);

        assert!(area_downsample(&v, 0).is_err());
    }

    #[test]
    fn area_downsample_matches_cell_mean_oracle() {
        let v = random_video(2, 32, 32, 4);
        let d = area_downsample(&v, 16).unwrap();
        for f in 0..2 {
            for i in 0..16 {
                for j in 0..16 {
                    for k in 0..3 {
                        let mut s = 0.0f64;
                        for y in 2 * i..2 * i + 2 {
                            for x in 2 * j..2 * j + 2 {
                                s += v.pixel(f, y, x)[k] as f64;
                            }
                        }
                        assert!((d.pixel(f, i, j)[k] as f64 - s / 4.0).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn area_downsample_covers_non_square_frames() {
        let v = random_video(1, 20, 36, 5);
        let d = area_downsample(&v, 16).unwrap();
        let total: f64 = v.data().iter().map(|&x| x as f64).sum();
        // cell areas differ, so compare an area-weighted sum
        let rows = cell_bounds(20, 16);
        let cols = cell_bounds(36, 16);
        let mut weighted = 0.0;
        for i in 0..16 {
            for j in 0..16 {
                let area = ((rows[i + 1] - rows[i]) * (cols[j + 1] - cols[j])) as f64;
                weighted += area * d.pixel(0, i, j).iter().map(|&x| x as f64).sum::<f64>();
            }
        }
        assert!((weighted - total).abs() < 1e-3);
    }
}
