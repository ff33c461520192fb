//! Local context encoder and global context embedder.
//!
//! Names: `control.patch`, `control.block{i}.*` (block copies),
//! `inject.proj{j}` (zero-init output projections), `lora.block{i}.<role>.{down,up}`,
//! `global.patch`, `global.block{i}.{k,v,o}`.

use crate::backbone::{block_name, Backbone, Block, BlockExtras, BlockLora, Conditioning, CrossHook, ModelConfig};
use crate::codec::{PatchCodec, TokenCoord, Video};
use crate::error::{Error, Result};
use crate::nn::{attention, Init, Linear, Lora};
use crate::numeric::{Graph, ParamSet, RngState, Scalar, Tensor, Var};

pub const CONTROL_PREFIX: &str = "control.";
pub const INJECT_PREFIX: &str = "inject.";
pub const LORA_PREFIX: &str = "lora.";
pub const GLOBAL_PREFIX: &str = "global.";

/// Prefixes stored in the adapter weight file.
pub const ADAPTER_PREFIXES: [&str; 4] = [CONTROL_PREFIX, INJECT_PREFIX, LORA_PREFIX, GLOBAL_PREFIX];

#[derive(Clone, Debug)]
pub struct ControlNet {
    pub patch: Linear,
    pub blocks: Vec<Block>,
    pub proj: Vec<Linear>,
    pub lora: Option<Vec<BlockLora>>,
}

impl ControlNet {
    /// Copies the first `control_blocks` backbone blocks; the patch layer
    /// starts from the backbone patch for latent channels plus a random
    /// row for the mask channel.
    pub fn new<T: Scalar>(bb: &Backbone, ps: &mut ParamSet<T>, rng: &mut RngState) -> Self {
        let cfg = &bb.cfg;
        let (c, d) = (cfg.latent_channels, cfg.d_model);
        let mut w = Tensor::randn(&[c + 1, d], 1.0 / ((c + 1) as f64).sqrt(), rng);
        let src = ps.get(bb.patch.w).clone();
        for r in 0..c {
            w.row_mut(r).copy_from_slice(src.row(r));
        }
        let patch_w = ps.insert(format!("{CONTROL_PREFIX}patch.w"), w, false);
        let patch_b = ps.insert(format!("{CONTROL_PREFIX}patch.b"), ps.get(bb.patch.b).clone(), false);
        let patch = Linear { w: patch_w, b: patch_b, d_in: c + 1, d_out: d };
        let blocks = (0..cfg.control_blocks)
            .map(|i| Block::copy_of(ps, &bb.blocks[i], &block_name(CONTROL_PREFIX, i)))
            .collect();
        let proj = (0..cfg.injection_blocks.len())
            .map(|j| Linear::register(ps, &format!("{INJECT_PREFIX}proj{j}"), d, d, Init::Zero, rng))
            .collect();
        ControlNet { patch, blocks, proj, lora: None }
    }

    /// Binds control weights; low-rank deltas are bound when present.
    pub fn bind<T: Scalar>(cfg: &ModelConfig, ps: &ParamSet<T>) -> Result<Self> {
        let patch = Linear::bind(ps, &format!("{CONTROL_PREFIX}patch"))?;
        let blocks = (0..cfg.control_blocks)
            .map(|i| Block::bind(ps, &block_name(CONTROL_PREFIX, i)))
            .collect::<Result<Vec<_>>>()?;
        let proj = (0..cfg.injection_blocks.len())
            .map(|j| Linear::bind(ps, &format!("{INJECT_PREFIX}proj{j}")))
            .collect::<Result<Vec<_>>>()?;
        let mut net = ControlNet { patch, blocks, proj, lora: None };
        if ps.contains(&format!("{LORA_PREFIX}block0.attn.q.down")) {
            net.lora = Some(
                (0..cfg.control_blocks)
                    .map(|i| bind_block_lora(ps, i, cfg.lora_alpha))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(net)
    }

    pub fn attach_lora<T: Scalar>(&mut self, cfg: &ModelConfig, ps: &mut ParamSet<T>, rng: &mut RngState) {
        let lora = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mut reg = |role: &str, lin: &Linear| {
                    Lora::register(ps, &format!("{LORA_PREFIX}block{i}.{role}"), lin, cfg.lora_rank, cfg.lora_alpha, rng)
                };
                BlockLora {
                    attn: [reg("attn.q", &b.attn.q), reg("attn.k", &b.attn.k), reg("attn.v", &b.attn.v), reg("attn.o", &b.attn.o)],
                    ff1: reg("ff1", &b.ff1),
                    ff2: reg("ff2", &b.ff2),
                }
            })
            .collect();
        self.lora = Some(lora);
    }

    /// Folds every low-rank delta into its base matrix. The returned set has
    /// no `lora.` tensors and the returned net has no deltas attached.
    pub fn merge_lora<T: Scalar>(&self, cfg: &ModelConfig, ps: &ParamSet<T>) -> Result<(ControlNet, ParamSet<T>)> {
        let mut out = ps.clone();
        if let Some(loras) = &self.lora {
            for (b, l) in self.blocks.iter().zip(loras) {
                let pairs = [(&b.attn.q, &l.attn[0]), (&b.attn.k, &l.attn[1]), (&b.attn.v, &l.attn[2]), (&b.attn.o, &l.attn[3]), (&b.ff1, &l.ff1), (&b.ff2, &l.ff2)];
                for (lin, lora) in pairs {
                    let merged = ps.get(lin.w).zip_map(&lora.delta(ps)?, |a, b| a + b)?;
                    *out.get_mut(lin.w) = merged;
                }
            }
        }
        out.remove_prefix(LORA_PREFIX);
        let net = ControlNet::bind(cfg, &out)?;
        Ok((net, out))
    }

    /// One `N × d` injection per configured backbone site.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        bb: &Backbone,
        c_rows: Var,
        coords: &[TokenCoord],
        cond: Conditioning,
    ) -> Result<Vec<Var>> {
        let n = g.shape(c_rows)[0];
        if n != coords.len() {
            return Err(Error::shape("control_forward", format!("{n} rows, {} coords", coords.len())));
        }
        let x = self.patch.forward(g, ps, c_rows, None)?;
        let pos = bb.positions(g, ps, coords)?;
        let mut x = g.add(x, pos)?;
        let mut outs = Vec::with_capacity(self.proj.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let extras = BlockExtras { lora: self.lora.as_ref().map(|l| &l[i]), ..Default::default() };
            x = block.forward(g, ps, x, cond, bb.cfg.heads, extras)?.x;
            if let Some(p) = self.proj.get(i) {
                outs.push(p.forward(g, ps, x, None)?);
            }
        }
        Ok(outs)
    }
}

fn bind_block_lora<T: Scalar>(ps: &ParamSet<T>, i: usize, alpha: f64) -> Result<BlockLora> {
    let b = |role: &str| Lora::bind(ps, &format!("{LORA_PREFIX}block{i}.{role}"), alpha);
    Ok(BlockLora { attn: [b("attn.q")?, b("attn.k")?, b("attn.v")?, b("attn.o")?], ff1: b("ff1")?, ff2: b("ff2")? })
}

#[derive(Clone, Debug)]
pub struct GlobalBlock {
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Debug)]
pub struct GlobalEmbedder {
    pub patch: Linear,
    pub blocks: Vec<GlobalBlock>,
    pub size: usize,
}

/// Per-block global keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalKv<T: Scalar = f32> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> GlobalKv<T> {
    pub fn tokens(&self) -> usize {
        self.layers.first().map_or(0, |(k, _)| k.rows())
    }
}

/// Global keys/values living on one graph, plus the output projections.
pub struct GlobalHook<'a> {
    pub embedder: &'a GlobalEmbedder,
    pub kv: Vec<(Var, Var)>,
    pub heads: usize,
}

impl GlobalEmbedder {
    pub fn new<T: Scalar>(bb: &Backbone, ps: &mut ParamSet<T>, rng: &mut RngState) -> Self {
        let d = bb.cfg.d_model;
        let patch = Linear::copy_of(ps, &bb.patch, &format!("{GLOBAL_PREFIX}patch"));
        let blocks = (0..bb.cfg.blocks)
            .map(|i| {
                let n = |r: &str| format!("{GLOBAL_PREFIX}block{i}.{r}");
                GlobalBlock {
                    k: Linear::register(ps, &n("k"), d, d, Init::Scaled(1.0), rng),
                    v: Linear::register(ps, &n("v"), d, d, Init::Scaled(1.0), rng),
                    o: Linear::register(ps, &n("o"), d, d, Init::Zero, rng),
                }
            })
            .collect();
        GlobalEmbedder { patch, blocks, size: bb.cfg.global_size }
    }

    pub fn bind<T: Scalar>(cfg: &ModelConfig, ps: &ParamSet<T>) -> Result<Self> {
        let patch = Linear::bind(ps, &format!("{GLOBAL_PREFIX}patch"))?;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let n = |r: &str| format!("{GLOBAL_PREFIX}block{i}.{r}");
                Ok(GlobalBlock { k: Linear::bind(ps, &n("k"))?, v: Linear::bind(ps, &n("v"))?, o: Linear::bind(ps, &n("o"))? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GlobalEmbedder { patch, blocks, size: cfg.global_size })
    }

    /// Latent rows and small-grid coordinates of a downsampled background.
    pub fn encode_input(&self, codec: &PatchCodec, v_down: &Video) -> Result<(Tensor<f32>, Vec<TokenCoord>)> {
        if v_down.height() != self.size || v_down.width() != self.size {
            return Err(Error::shape(
                "global_embed",
                format!("expected {0}×{0} frames, got {1}×{2}", self.size, v_down.height(), v_down.width()),
            ));
        }
        let z = codec.encode(v_down)?;
        let coords = z.dims().all_coords();
        Ok((z.into_tokens(), coords))
    }

    /// Global token sequence `F·(g/p)² × d`.
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        bb: &Backbone,
        codec: &PatchCodec,
        v_down: &Video,
    ) -> Result<Var> {
        let (rows, coords) = self.encode_input(codec, v_down)?;
        self.embed_rows(g, ps, bb, &rows.cast(), &coords)
    }

    /// Global tokens from already encoded rows.
    pub fn embed_rows<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        bb: &Backbone,
        rows: &Tensor<T>,
        coords: &[TokenCoord],
    ) -> Result<Var> {
        let r = g.constant(rows.clone());
        let x = self.patch.forward(g, ps, r, None)?;
        let pos = bb.positions(g, ps, coords)?;
        g.add(x, pos)
    }

    /// Projects global tokens to per-block keys/values on the current graph.
    pub fn hook<'a, T: Scalar>(&'a self, g: &mut Graph<T>, ps: &ParamSet<T>, tokens: Var, heads: usize) -> Result<GlobalHook<'a>> {
        if g.shape(tokens)[0] == 0 {
            return Err(Error::shape("global_modulate", "empty global token set"));
        }
        let kv = self
            .blocks
            .iter()
            .map(|b| Ok((b.k.forward(g, ps, tokens, None)?, b.v.forward(g, ps, tokens, None)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(GlobalHook { embedder: self, kv, heads })
    }

    /// Keys/values evaluated once, for reuse across sampling steps.
    pub fn precompute<T: Scalar>(
        &self,
        ps: &ParamSet<T>,
        bb: &Backbone,
        codec: &PatchCodec,
        v_down: &Video,
    ) -> Result<(GlobalKv<T>, crate::numeric::FlopCounter)> {
        let mut g = Graph::new();
        let tokens = self.embed(&mut g, ps, bb, codec, v_down)?;
        let hook = self.hook(&mut g, ps, tokens, bb.cfg.heads)?;
        let layers = hook.kv.iter().map(|&(k, v)| (g.value(k).clone(), g.value(v).clone())).collect();
        Ok((GlobalKv { layers }, g.flops().clone()))
    }

    /// Places precomputed keys/values on a graph as constants.
    pub fn hook_from_kv<'a, T: Scalar>(&'a self, g: &mut Graph<T>, kv: &GlobalKv<T>, heads: usize) -> Result<GlobalHook<'a>> {
        if kv.tokens() == 0 {
            return Err(Error::shape("global_modulate", "empty global token set"));
        }
        let kv = kv.layers.iter().map(|(k, v)| (g.constant(k.clone()), g.constant(v.clone()))).collect();
        Ok(GlobalHook { embedder: self, kv, heads })
    }
}

impl<T: Scalar> CrossHook<T> for GlobalHook<'_> {
    fn modulate(&self, g: &mut Graph<T>, ps: &ParamSet<T>, block: usize, x: Var, q: Var) -> Result<Var> {
        let (k, v) = *self
            .kv
            .get(block)
            .ok_or_else(|| Error::shape("global_modulate", format!("no keys for block {block}")))?;
        global_modulate(g, ps, &self.embedder.blocks[block].o, x, q, k, v, self.heads)
    }
}

/// `x + W₀·Attention(q, k, v)`.
#[allow(clippy::too_many_arguments)]
pub fn global_modulate<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamSet<T>,
    w0: &Linear,
    x: Var,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    if g.shape(x) != g.shape(q) {
        return Err(Error::shape("global_modulate", format!("x {:?} vs q {:?}", g.shape(x), g.shape(q))));
    }
    let a = attention(g, q, k, v, heads, None)?;
    let m = w0.forward(g, ps, a, None)?;
    g.add(x, m)
}

/// Frames past the last available one repeat it.
pub fn causal_pad_global(available: &Video, total_frames: usize) -> Result<Video> {
    let k = available.frames();
    if k == 0 {
        return Err(Error::Config("no frames available for global context".into()));
    }
    if total_frames < k {
        return Err(Error::shape("causal_pad_global", format!("{k} frames available, {total_frames} requested")));
    }
    let mut parts = vec![available.clone()];
    let last = available.frame(k - 1);
    parts.extend(std::iter::repeat_n(last, total_frames - k));
    Video::concat(&parts)
}
