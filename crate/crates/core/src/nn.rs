//! Layer building blocks shared by the backbone and the adapters.

use crate::error::Result;
use crate::numeric::{Graph, ParamId, ParamSet, RngState, Scalar, Tensor, Var};

/// `y = x·W + b` with `W` stored `d_in × d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

/// Weight initialization for a newly registered layer.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `N(0, gain²/d_in)`.
    Scaled(f64),
    Zero,
}

impl Linear {
    pub fn register<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut RngState,
    ) -> Self {
        let w = match init {
            Init::Scaled(gain) => Tensor::randn(&[d_in, d_out], gain / (d_in as f64).sqrt(), rng),
            Init::Zero => Tensor::zeros(&[d_in, d_out]),
        };
        let w = ps.insert(format!("{name}.w"), w, false);
        let b = ps.insert(format!("{name}.b"), Tensor::zeros(&[d_out]), false);
        Linear { w, b, d_in, d_out }
    }

    pub fn bind<T: Scalar>(ps: &ParamSet<T>, name: &str) -> Result<Self> {
        let w = ps.id(&format!("{name}.w"))?;
        let b = ps.id(&format!("{name}.b"))?;
        let s = ps.get(w).shape();
        Ok(Linear { w, b, d_in: s[0], d_out: s[1] })
    }

    /// Registers a copy of `src` under a new name.
    pub fn copy_of<T: Scalar>(ps: &mut ParamSet<T>, src: &Linear, name: &str) -> Self {
        let (w, b) = (ps.get(src.w).clone(), ps.get(src.b).clone());
        let w = ps.insert(format!("{name}.w"), w, false);
        let b = ps.insert(format!("{name}.b"), b, false);
        Linear { w, b, d_in: src.d_in, d_out: src.d_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var, lora: Option<&Lora>) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.matmul(x, w)?;
        let mut y = g.add_row(y, b)?;
        if let Some(l) = lora {
            let down = g.param(ps, l.down);
            let up = g.param(ps, l.up);
            let h = g.matmul(x, down)?;
            let h = g.matmul(h, up)?;
            let h = g.scale(h, l.scale);
            y = g.add(y, h)?;
        }
        Ok(y)
    }
}

/// Low-rank delta on a [`Linear`]: effective weight `W + scale·down·up`.
///
/// In `W_out×in` notation this is `W + (α/r)·A·B` with `A = upᵀ` and
/// `B = downᵀ`; `down` starts at zero so the delta is zero at creation.
#[derive(Clone, Debug)]
pub struct Lora {
    pub down: ParamId,
    pub up: ParamId,
    pub scale: f64,
}

impl Lora {
    pub fn register<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        base: &Linear,
        rank: usize,
        alpha: f64,
        rng: &mut RngState,
    ) -> Self {
        let down = ps.insert(format!("{name}.down"), Tensor::zeros(&[base.d_in, rank]), false);
        let up = ps.insert(
            format!("{name}.up"),
            Tensor::randn(&[rank, base.d_out], 1.0 / (rank as f64).sqrt(), rng),
            false,
        );
        Lora { down, up, scale: alpha / rank as f64 }
    }

    pub fn bind<T: Scalar>(ps: &ParamSet<T>, name: &str, alpha: f64) -> Result<Self> {
        let down = ps.id(&format!("{name}.down"))?;
        let up = ps.id(&format!("{name}.up"))?;
        let rank = ps.get(down).shape()[1];
        Ok(Lora { down, up, scale: alpha / rank as f64 })
    }

    /// `scale·down·up` materialized as a `d_in × d_out` matrix.
    pub fn delta<T: Scalar>(&self, ps: &ParamSet<T>) -> Result<Tensor<T>> {
        let d = ps.get(self.down).matmul(ps.get(self.up))?;
        let s = T::from_f64(self.scale);
        Ok(d.map(|v| v * s))
    }
}

/// Multi-head scaled dot-product attention over already-projected inputs.
///
/// `q` is `Nq×d`, `k`/`v` are `Nk×d`; `mask`, when given, is an additive
/// `Nq×Nk` term applied identically to every head.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let d = g.shape(q)[1];
    if heads == 0 || d % heads != 0 {
        return Err(crate::Error::shape("attention", format!("{heads} heads do not divide {d}")));
    }
    let dh = d / heads;
    let qs = g.scale(q, 1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = if heads == 1 { qs } else { g.slice_cols(qs, h * dh, dh)? };
        let kh = if heads == 1 { k } else { g.slice_cols(k, h * dh, dh)? };
        let vh = if heads == 1 { v } else { g.slice_cols(v, h * dh, dh)? };
        let scores = g.matmul_t(qh, kh, false, true)?;
        let p = g.softmax_rows(scores, mask)?;
        outs.push(g.matmul(p, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Q/K/V/O projections of one attention sublayer.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttentionLayer {
    pub fn register<T: Scalar>(ps: &mut ParamSet<T>, name: &str, d: usize, out_gain: f64, rng: &mut RngState) -> Self {
        AttentionLayer {
            q: Linear::register(ps, &format!("{name}.q"), d, d, Init::Scaled(1.0), rng),
            k: Linear::register(ps, &format!("{name}.k"), d, d, Init::Scaled(1.0), rng),
            v: Linear::register(ps, &format!("{name}.v"), d, d, Init::Scaled(1.0), rng),
            o: Linear::register(ps, &format!("{name}.o"), d, d, Init::Scaled(out_gain), rng),
        }
    }

    pub fn bind<T: Scalar>(ps: &ParamSet<T>, name: &str) -> Result<Self> {
        Ok(AttentionLayer {
            q: Linear::bind(ps, &format!("{name}.q"))?,
            k: Linear::bind(ps, &format!("{name}.k"))?,
            v: Linear::bind(ps, &format!("{name}.v"))?,
            o: Linear::bind(ps, &format!("{name}.o"))?,
        })
    }

    pub fn copy_of<T: Scalar>(ps: &mut ParamSet<T>, src: &AttentionLayer, name: &str) -> Self {
        AttentionLayer {
            q: Linear::copy_of(ps, &src.q, &format!("{name}.q")),
            k: Linear::copy_of(ps, &src.k, &format!("{name}.k")),
            v: Linear::copy_of(ps, &src.v, &format!("{name}.v")),
            o: Linear::copy_of(ps, &src.o, &format!("{name}.o")),
        }
    }

    pub fn linears(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Per-head loops over plain f64 arrays.
    fn brute_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize) -> Tensor<f64> {
        let (nq, d) = (q.rows(), q.cols());
        let nk = k.rows();
        let dh = d / heads;
        let mut out = Tensor::zeros(&[nq, d]);
        for h in 0..heads {
            for i in 0..nq {
                let mut s = vec![0.0; nk];
                for (j, sj) in s.iter_mut().enumerate() {
                    for c in 0..dh {
                        *sj += q.row(i)[h * dh + c] * k.row(j)[h * dh + c];
                    }
                    *sj /= (dh as f64).sqrt();
                }
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    let acc: f64 = (0..nk).map(|j| e[j] / z * v.row(j)[h * dh + c]).sum();
                    out.row_mut(i)[h * dh + c] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_brute_force() {
        let mut rng = RngState::new(3);
        let q = Tensor::<f64>::randn(&[5, 8], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[7, 8], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[7, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = attention(&mut g, qv, kv, vv, 4, None).unwrap();
        assert!(g.value(out).max_abs_diff(&brute_attention(&q, &k, &v, 4)) < 1e-6);
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = RngState::new(4);
        let q = Tensor::<f32>::randn(&[3, 8], 1.0, &mut rng);
        let kv = Tensor::<f32>::randn(&[1, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let (qv, k) = (g.constant(q), g.constant(kv.clone()));
        let out = attention(&mut g, qv, k, k, 2, None).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(out).row(r), kv.row(0));
        }
    }

    #[test]
    fn lora_low_rank_path_matches_materialized_weight() {
        let mut rng = RngState::new(5);
        let mut ps = ParamSet::<f64>::new();
        let lin = Linear::register(&mut ps, "l", 6, 5, Init::Scaled(1.0), &mut rng);
        let lora = Lora::register(&mut ps, "l.lora", &lin, 2, 4.0, &mut rng);
        *ps.get_mut(lora.down) = Tensor::randn(&[6, 2], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = lin.forward(&mut g, &ps, xv, Some(&lora)).unwrap();

        let w = ps.get(lin.w).zip_map(&lora.delta(&ps).unwrap(), |a, b| a + b).unwrap();
        let mut want = x.matmul(&w).unwrap();
        for r in 0..4 {
            for (o, b) in want.row_mut(r).iter_mut().zip(ps.get(lin.b).data()) {
                *o += b;
            }
        }
        assert!(g.value(y).max_abs_diff(&want) < 1e-6);
    }
}
