//! The frozen denoising transformer.
//!
//! Weight names follow `backbone.<part>` for the embedding layers and
//! `backbone.block{i}.<sublayer>.<role>` inside blocks, where sublayer is one
//! of `modulation`, `attn.{q,k,v,o}`, `norm`, `cross.{q,k,v,o}`, `ff1`, `ff2`.

use serde::{Deserialize, Serialize};

use crate::codec::TokenCoord;
use crate::error::{Error, Result};
use crate::nn::{attention, AttentionLayer, Init, Linear, Lora};
use crate::numeric::{Graph, ParamId, ParamSet, RngState, Scalar, Tensor, Var};
use crate::prompt;

pub const BASE_PREFIX: &str = "backbone.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub vocab: usize,
    pub max_prompt: usize,
    pub latent_channels: usize,
    /// Positional table extents in latent units `(t, h, w)`.
    pub max_grid: [usize; 3],
    pub injection_blocks: Vec<usize>,
    pub control_blocks: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Spatial side of the downsampled background fed to the global embedder.
    pub global_size: usize,
    pub train_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            blocks: 4,
            vocab: prompt::VOCAB.len(),
            max_prompt: prompt::MAX_PROMPT,
            latent_channels: 48,
            max_grid: [16, 32, 32],
            injection_blocks: vec![1, 3],
            control_blocks: 2,
            lora_rank: 8,
            lora_alpha: 16.0,
            global_size: 16,
            train_steps: 1000,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("heads must divide d_model");
        }
        if self.d_model % 2 != 0 {
            return bad("d_model must be even");
        }
        if self.blocks == 0 || self.latent_channels == 0 || self.vocab == 0 || self.max_prompt == 0 {
            return bad("blocks, latent_channels, vocab and max_prompt must be positive");
        }
        if self.max_grid.contains(&0) {
            return bad("max_grid extents must be positive");
        }
        if self.injection_blocks.len() != self.control_blocks {
            return bad("one injection block per control block");
        }
        if self.injection_blocks.windows(2).any(|w| w[0] >= w[1]) || self.injection_blocks.iter().any(|&b| b >= self.blocks) {
            return bad("injection_blocks must be increasing block indices");
        }
        if self.control_blocks > self.blocks {
            return bad("control_blocks exceeds blocks");
        }
        if self.lora_rank == 0 || self.lora_alpha <= 0.0 {
            return bad("lora rank and alpha must be positive");
        }
        if self.global_size == 0 || self.train_steps == 0 {
            return bad("global_size and train_steps must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Low-rank deltas on one block's self-attention and feed-forward matrices.
#[derive(Clone, Debug)]
pub struct BlockLora {
    pub attn: [Lora; 4],
    pub ff1: Lora,
    pub ff2: Lora,
}

/// Adds global modulation to cross-attended features.
pub trait CrossHook<T: Scalar> {
    /// `x` is the cross-attention output of `block`, `q` its query features.
    fn modulate(&self, g: &mut Graph<T>, ps: &ParamSet<T>, block: usize, x: Var, q: Var) -> Result<Var>;
}

/// Per-block self-attention keys and values of clean context tokens.
#[derive(Clone, Debug)]
pub struct ContextKv<T: Scalar = f32> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> ContextKv<T> {
    pub fn tokens(&self) -> usize {
        self.layers.first().map_or(0, |(k, _)| k.rows())
    }
}

/// Timestep and prompt conditioning, computed once per forward.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning {
    pub temb: Var,
    pub prompt: Var,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub modulation: Linear,
    pub attn: AttentionLayer,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub cross: AttentionLayer,
    pub ff1: Linear,
    pub ff2: Linear,
}

/// Optional extras for one block evaluation.
#[derive(Clone, Copy, Default)]
pub struct BlockExtras<'a, T: Scalar> {
    pub lora: Option<&'a BlockLora>,
    pub hook: Option<(&'a dyn CrossHook<T>, usize)>,
    pub injection: Option<Var>,
    pub context: Option<&'a (Tensor<T>, Tensor<T>)>,
    pub mask: Option<&'a Tensor<T>>,
    pub capture: bool,
}

pub struct BlockOutput {
    pub x: Var,
    /// Self-attention keys/values of the block's own tokens, when captured.
    pub kv: Option<(Var, Var)>,
}

impl Block {
    pub fn register<T: Scalar>(ps: &mut ParamSet<T>, name: &str, d: usize, rng: &mut RngState) -> Self {
        Block {
            modulation: Linear::register(ps, &format!("{name}.modulation"), d, 4 * d, Init::Zero, rng),
            attn: AttentionLayer::register(ps, &format!("{name}.attn"), d, 0.5, rng),
            norm_gain: ps.insert(format!("{name}.norm.gain"), Tensor::full(&[d], T::one()), false),
            norm_bias: ps.insert(format!("{name}.norm.bias"), Tensor::zeros(&[d]), false),
            cross: AttentionLayer::register(ps, &format!("{name}.cross"), d, 0.5, rng),
            ff1: Linear::register(ps, &format!("{name}.ff1"), d, 4 * d, Init::Scaled(1.0), rng),
            ff2: Linear::register(ps, &format!("{name}.ff2"), 4 * d, d, Init::Scaled(0.5), rng),
        }
    }

    pub fn bind<T: Scalar>(ps: &ParamSet<T>, name: &str) -> Result<Self> {
        Ok(Block {
            modulation: Linear::bind(ps, &format!("{name}.modulation"))?,
            attn: AttentionLayer::bind(ps, &format!("{name}.attn"))?,
            norm_gain: ps.id(&format!("{name}.norm.gain"))?,
            norm_bias: ps.id(&format!("{name}.norm.bias"))?,
            cross: AttentionLayer::bind(ps, &format!("{name}.cross"))?,
            ff1: Linear::bind(ps, &format!("{name}.ff1"))?,
            ff2: Linear::bind(ps, &format!("{name}.ff2"))?,
        })
    }

    pub fn copy_of<T: Scalar>(ps: &mut ParamSet<T>, src: &Block, name: &str) -> Self {
        let gain = ps.get(src.norm_gain).clone();
        let bias = ps.get(src.norm_bias).clone();
        Block {
            modulation: Linear::copy_of(ps, &src.modulation, &format!("{name}.modulation")),
            attn: AttentionLayer::copy_of(ps, &src.attn, &format!("{name}.attn")),
            norm_gain: ps.insert(format!("{name}.norm.gain"), gain, false),
            norm_bias: ps.insert(format!("{name}.norm.bias"), bias, false),
            cross: AttentionLayer::copy_of(ps, &src.cross, &format!("{name}.cross")),
            ff1: Linear::copy_of(ps, &src.ff1, &format!("{name}.ff1")),
            ff2: Linear::copy_of(ps, &src.ff2, &format!("{name}.ff2")),
        }
    }

    /// Every weight matrix that can carry a low-rank delta, with its role name.
    pub fn lora_targets(&self) -> [(&'static str, &Linear); 6] {
        [
            ("attn.q", &self.attn.q),
            ("attn.k", &self.attn.k),
            ("attn.v", &self.attn.v),
            ("attn.o", &self.attn.o),
            ("ff1", &self.ff1),
            ("ff2", &self.ff2),
        ]
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        x: Var,
        cond: Conditioning,
        heads: usize,
        ex: BlockExtras<'_, T>,
    ) -> Result<BlockOutput> {
        let d = g.shape(x)[1];
        let m = self.modulation.forward(g, ps, cond.temb, None)?;
        let s1 = g.slice_cols(m, 0, d)?;
        let b1 = g.slice_cols(m, d, d)?;
        let s2 = g.slice_cols(m, 2 * d, d)?;
        let b2 = g.slice_cols(m, 3 * d, d)?;
        let s1 = g.add_scalar(s1, 1.0);
        let s2 = g.add_scalar(s2, 1.0);
        let lora = |i: usize| ex.lora.map(|l| &l.attn[i]);

        let a = g.layer_norm(x)?;
        let a = g.mul_row(a, s1)?;
        let a = g.add_row(a, b1)?;
        let q = self.attn.q.forward(g, ps, a, lora(0))?;
        let k_own = self.attn.k.forward(g, ps, a, lora(1))?;
        let v_own = self.attn.v.forward(g, ps, a, lora(2))?;
        let (k, v) = match ex.context {
            Some((ck, cv)) => {
                let ck = g.constant(ck.clone());
                let cv = g.constant(cv.clone());
                (g.concat_rows(&[k_own, ck])?, g.concat_rows(&[v_own, cv])?)
            }
            None => (k_own, v_own),
        };
        let sa = attention(g, q, k, v, heads, ex.mask)?;
        let sa = self.attn.o.forward(g, ps, sa, lora(3))?;
        let x = g.add(x, sa)?;

        let gain = g.param(ps, self.norm_gain);
        let bias = g.param(ps, self.norm_bias);
        let c = g.layer_norm_affine(x, gain, bias)?;
        let cq = self.cross.q.forward(g, ps, c, None)?;
        let ck = self.cross.k.forward(g, ps, cond.prompt, None)?;
        let cv = self.cross.v.forward(g, ps, cond.prompt, None)?;
        let ca = attention(g, cq, ck, cv, heads, None)?;
        let mut ca = self.cross.o.forward(g, ps, ca, None)?;
        if let Some((hook, block)) = ex.hook {
            ca = hook.modulate(g, ps, block, ca, cq)?;
        }
        let x = g.add(x, ca)?;

        let f = g.layer_norm(x)?;
        let f = g.mul_row(f, s2)?;
        let f = g.add_row(f, b2)?;
        let h = self.ff1.forward(g, ps, f, ex.lora.map(|l| &l.ff1))?;
        let h = g.gelu(h);
        let mut y = self.ff2.forward(g, ps, h, ex.lora.map(|l| &l.ff2))?;
        if let Some(inj) = ex.injection {
            y = g.add(y, inj)?;
        }
        let x = g.add(x, y)?;
        Ok(BlockOutput { x, kv: ex.capture.then_some((k_own, v_own)) })
    }
}

/// Optional extras for a full backbone pass.
#[derive(Clone, Copy, Default)]
pub struct ForwardExtras<'a, T: Scalar> {
    /// One tensor per configured injection block, each `N × d`.
    pub injections: Option<&'a [Var]>,
    pub hook: Option<&'a dyn CrossHook<T>>,
    pub context: Option<&'a ContextKv<T>>,
    /// Additive `N × (N + context)` self-attention mask.
    pub mask: Option<&'a Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: ModelConfig,
    pub patch: Linear,
    pub pos: [ParamId; 3],
    pub prompt_table: ParamId,
    pub prompt_pos: ParamId,
    pub time: Linear,
    pub blocks: Vec<Block>,
    pub out_gain: ParamId,
    pub out_bias: ParamId,
    pub head: Linear,
}

pub fn block_name(prefix: &str, i: usize) -> String {
    format!("{prefix}block{i}")
}

/// `[sin(t·f_0..), cos(t·f_0..)]` with `f_i = 10000^(−i/(d/2))`.
pub fn timestep_features<T: Scalar>(t: usize, d: usize) -> Tensor<T> {
    let half = d / 2;
    let mut out = vec![T::zero(); d];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = T::from_f64((t as f64 * f).sin());
        out[half + i] = T::from_f64((t as f64 * f).cos());
    }
    Tensor::new(vec![1, d], out).expect("row")
}

impl Backbone {
    pub fn new<T: Scalar>(cfg: ModelConfig, ps: &mut ParamSet<T>, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let p = |s: &str| format!("{BASE_PREFIX}{s}");
        let patch = Linear::register(ps, &p("patch"), cfg.latent_channels, d, Init::Scaled(1.0), rng);
        let mut pos = Vec::with_capacity(3);
        for (axis, &n) in ["pos_t", "pos_h", "pos_w"].iter().zip(&cfg.max_grid) {
            pos.push(ps.insert(p(axis), Tensor::randn(&[n, d], 0.3, rng), false));
        }
        let prompt_table = ps.insert(p("prompt.table"), Tensor::randn(&[cfg.vocab, d], 1.0, rng), false);
        let prompt_pos = ps.insert(p("prompt.pos"), Tensor::randn(&[cfg.max_prompt, d], 0.3, rng), false);
        let time = Linear::register(ps, &p("time"), d, d, Init::Scaled(1.0), rng);
        let blocks = (0..cfg.blocks).map(|i| Block::register(ps, &block_name(BASE_PREFIX, i), d, rng)).collect();
        let out_gain = ps.insert(p("out_norm.gain"), Tensor::full(&[d], T::one()), false);
        let out_bias = ps.insert(p("out_norm.bias"), Tensor::zeros(&[d]), false);
        let head = Linear::register(ps, &p("head"), d, cfg.latent_channels, Init::Scaled(0.5), rng);
        Ok(Backbone { cfg, patch, pos: [pos[0], pos[1], pos[2]], prompt_table, prompt_pos, time, blocks, out_gain, out_bias, head })
    }

    pub fn bind<T: Scalar>(cfg: ModelConfig, ps: &ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        let p = |s: &str| format!("{BASE_PREFIX}{s}");
        let id = |s: &str| ps.id(&p(s));
        let bb = Backbone {
            patch: Linear::bind(ps, &p("patch"))?,
            pos: [id("pos_t")?, id("pos_h")?, id("pos_w")?],
            prompt_table: id("prompt.table")?,
            prompt_pos: id("prompt.pos")?,
            time: Linear::bind(ps, &p("time"))?,
            blocks: (0..cfg.blocks).map(|i| Block::bind(ps, &block_name(BASE_PREFIX, i))).collect::<Result<_>>()?,
            out_gain: id("out_norm.gain")?,
            out_bias: id("out_norm.bias")?,
            head: Linear::bind(ps, &p("head"))?,
            cfg,
        };
        let d = bb.cfg.d_model;
        let want = [
            (bb.patch.w, vec![bb.cfg.latent_channels, d]),
            (bb.pos[0], vec![bb.cfg.max_grid[0], d]),
            (bb.pos[1], vec![bb.cfg.max_grid[1], d]),
            (bb.pos[2], vec![bb.cfg.max_grid[2], d]),
            (bb.prompt_table, vec![bb.cfg.vocab, d]),
            (bb.prompt_pos, vec![bb.cfg.max_prompt, d]),
        ];
        for (pid, shape) in want {
            if ps.get(pid).shape() != shape.as_slice() {
                return Err(Error::shape("bind", format!("{} is {:?}, config wants {shape:?}", ps.name(pid), ps.get(pid).shape())));
            }
        }
        Ok(bb)
    }

    pub fn check_coords(&self, coords: &[TokenCoord]) -> Result<()> {
        let [ft, fh, fw] = self.cfg.max_grid;
        for c in coords {
            for (v, n) in [(c.t, ft), (c.h, fh), (c.w, fw)] {
                if v >= n {
                    return Err(Error::IndexOutOfRange { index: v, extent: n });
                }
            }
        }
        Ok(())
    }

    /// Sum of the three positional table rows at each coordinate.
    pub fn positions<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, coords: &[TokenCoord]) -> Result<Var> {
        self.check_coords(coords)?;
        let ts: Vec<usize> = coords.iter().map(|c| c.t).collect();
        let hs: Vec<usize> = coords.iter().map(|c| c.h).collect();
        let ws: Vec<usize> = coords.iter().map(|c| c.w).collect();
        let tt = g.param(ps, self.pos[0]);
        let th = g.param(ps, self.pos[1]);
        let tw = g.param(ps, self.pos[2]);
        let pt = g.gather_rows(tt, &ts)?;
        let ph = g.gather_rows(th, &hs)?;
        let pw = g.gather_rows(tw, &ws)?;
        let s = g.add(pt, ph)?;
        g.add(s, pw)
    }

    /// Patch projection plus positions at the original coordinates.
    pub fn embed_tokens<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, rows: Var, coords: &[TokenCoord]) -> Result<Var> {
        let n = g.shape(rows)[0];
        if n != coords.len() {
            return Err(Error::shape("embed_tokens", format!("{n} rows, {} coords", coords.len())));
        }
        let x = self.patch.forward(g, ps, rows, None)?;
        let pos = self.positions(g, ps, coords)?;
        g.add(x, pos)
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.cfg.train_steps {
            return Err(Error::Timestep { t, max: self.cfg.train_steps });
        }
        Ok(())
    }

    pub fn condition<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, t: usize, prompt_ids: &[usize]) -> Result<Conditioning> {
        self.check_timestep(t)?;
        prompt::check_prompt(prompt_ids)?;
        if prompt_ids.len() > self.cfg.max_prompt || prompt_ids.iter().any(|&i| i >= self.cfg.vocab) {
            return Err(Error::Config("prompt does not fit the model vocabulary".into()));
        }
        let feats = g.constant(timestep_features(t, self.cfg.d_model));
        let temb = self.time.forward(g, ps, feats, None)?;
        let temb = g.silu(temb);
        let table = g.param(ps, self.prompt_table);
        let pos_table = g.param(ps, self.prompt_pos);
        let words = g.gather_rows(table, prompt_ids)?;
        let order: Vec<usize> = (0..prompt_ids.len()).collect();
        let pos = g.gather_rows(pos_table, &order)?;
        let prompt = g.add(words, pos)?;
        Ok(Conditioning { temb, prompt })
    }

    /// Runs the blocks over embedded tokens; returns the hidden state and, if
    /// `capture`, every block's self-attention keys/values.
    pub fn run_blocks<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        x: Var,
        cond: Conditioning,
        ex: ForwardExtras<'_, T>,
        capture: bool,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let n = g.shape(x)[0];
        if let Some(inj) = ex.injections {
            if inj.len() != self.cfg.injection_blocks.len() {
                return Err(Error::shape("injections", format!("{} tensors for {} sites", inj.len(), self.cfg.injection_blocks.len())));
            }
            for &v in inj {
                if g.shape(v) != [n, self.cfg.d_model] {
                    return Err(Error::shape("injections", format!("{:?} vs {n} tokens", g.shape(v))));
                }
            }
        }
        if let Some(ctx) = ex.context {
            if ctx.layers.len() != self.blocks.len() {
                return Err(Error::shape("context", format!("{} layers for {} blocks", ctx.layers.len(), self.blocks.len())));
            }
        }
        let mut x = x;
        let mut kvs = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let injection = ex.injections.and_then(|inj| self.cfg.injection_blocks.iter().position(|&b| b == i).map(|j| inj[j]));
            let extras = BlockExtras {
                lora: None,
                hook: ex.hook.map(|h| (h, i)),
                injection,
                context: ex.context.map(|c| &c.layers[i]),
                mask: ex.mask,
                capture,
            };
            let out = block.forward(g, ps, x, cond, self.cfg.heads, extras)?;
            x = out.x;
            if let Some(kv) = out.kv {
                kvs.push(kv);
            }
        }
        Ok((x, kvs))
    }

    pub fn head<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let gain = g.param(ps, self.out_gain);
        let bias = g.param(ps, self.out_bias);
        let h = g.layer_norm_affine(x, gain, bias)?;
        self.head.forward(g, ps, h, None)
    }

    /// Noise prediction for the given latent rows at their original coordinates.
    pub fn predict_noise<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        rows: Var,
        coords: &[TokenCoord],
        cond: Conditioning,
        ex: ForwardExtras<'_, T>,
    ) -> Result<Var> {
        let x = self.embed_tokens(g, ps, rows, coords)?;
        let (x, _) = self.run_blocks(g, ps, x, cond, ex, false)?;
        self.head(g, ps, x)
    }

    /// Keys/values of clean context rows at timestep `t`, for read-only attention.
    pub fn context_kv<T: Scalar>(
        &self,
        ps: &ParamSet<T>,
        rows: &Tensor<T>,
        coords: &[TokenCoord],
        t: usize,
        prompt_ids: &[usize],
    ) -> Result<(ContextKv<T>, crate::numeric::FlopCounter)> {
        let mut g = Graph::new();
        let cond = self.condition(&mut g, ps, t, prompt_ids)?;
        let r = g.constant(rows.clone());
        let x = self.embed_tokens(&mut g, ps, r, coords)?;
        let (_, kvs) = self.run_blocks(&mut g, ps, x, cond, ForwardExtras::default(), true)?;
        let layers = kvs.into_iter().map(|(k, v)| (g.value(k).clone(), g.value(v).clone())).collect();
        Ok((ContextKv { layers }, g.flops().clone()))
    }
}

/// Additive mask that hides every key outside `selected` (`0` or `−∞`).
pub fn key_mask<T: Scalar>(n: usize, selected: &[usize]) -> Tensor<T> {
    let mut keep = vec![false; n];
    for &i in selected {
        keep[i] = true;
    }
    let mut data = Vec::with_capacity(n * n);
    for _ in 0..n {
        data.extend(keep.iter().map(|&k| if k { T::zero() } else { T::neg_infinity() }));
    }
    Tensor::new(vec![n, n], data).expect("square")
}
