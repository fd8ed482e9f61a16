//! Building blocks shared by the vision encoder and the language model.

use rand::Rng;

use crate::error::{contract, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{ParamId, ParamStore};

pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) fn lookup<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| contract(format!("parameter {name} missing from store")))
}

pub(crate) fn add_normal<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
    std: f64,
    rng: &mut impl Rng,
) -> Result<ParamId> {
    store.add(name, Tensor::randn(shape, std, rng))
}

/// Low-rank additive update `scale · x Aᵀ Bᵀ` for one weight matrix.
#[derive(Clone, Debug)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

impl LoraPair {
    pub(crate) fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        // A random, B zero: a fresh adapter contributes exactly nothing.
        add_normal(store, &format!("{prefix}.a"), &[rank, d_in], 1.0 / (d_in as f64).sqrt(), rng)?;
        store.add(&format!("{prefix}.b"), Tensor::zeros(&[d_out, rank]))?;
        Ok(())
    }

    pub(crate) fn attach<T: Scalar>(store: &ParamStore<T>, prefix: &str, rank: usize, alpha: f64) -> Result<Self> {
        Ok(Self {
            a: lookup(store, &format!("{prefix}.a"))?,
            b: lookup(store, &format!("{prefix}.b"))?,
            scale: alpha / rank as f64,
        })
    }

    pub(crate) fn apply<T: Scalar>(&self, ps: &ParamStore<T>, g: &mut Graph<T>, x: Var, base: Var) -> Result<Var> {
        let a = ps.bind(g, self.a);
        let b = ps.bind(g, self.b);
        let down = g.matmul_t(x, a)?;
        let up = g.matmul_t(down, b)?;
        let up = g.scale(up, T::of(self.scale));
        g.add(base, up)
    }
}

/// Adapters on the query and value projections of one block.
#[derive(Clone, Debug)]
pub struct BlockLora {
    pub q: LoraPair,
    pub v: LoraPair,
}

/// Pre-norm transformer block with bias-free projections and a GELU MLP.
#[derive(Clone, Debug)]
pub struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    up: ParamId,
    down: ParamId,
    heads: usize,
}

impl Block {
    pub(crate) fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        store.add(&format!("{prefix}.ln1.g"), Tensor::full(&[d], T::one()))?;
        store.add(&format!("{prefix}.ln1.b"), Tensor::zeros(&[d]))?;
        for w in ["wq", "wk", "wv", "wo"] {
            add_normal(store, &format!("{prefix}.attn.{w}"), &[d, d], INIT_STD, rng)?;
        }
        store.add(&format!("{prefix}.ln2.g"), Tensor::full(&[d], T::one()))?;
        store.add(&format!("{prefix}.ln2.b"), Tensor::zeros(&[d]))?;
        add_normal(store, &format!("{prefix}.mlp.up"), &[mlp_ratio * d, d], INIT_STD, rng)?;
        add_normal(store, &format!("{prefix}.mlp.down"), &[d, mlp_ratio * d], INIT_STD, rng)?;
        Ok(())
    }

    pub(crate) fn attach<T: Scalar>(store: &ParamStore<T>, prefix: &str, heads: usize) -> Result<Self> {
        let id = |s: &str| lookup(store, &format!("{prefix}.{s}"));
        Ok(Self {
            ln1_g: id("ln1.g")?,
            ln1_b: id("ln1.b")?,
            wq: id("attn.wq")?,
            wk: id("attn.wk")?,
            wv: id("attn.wv")?,
            wo: id("attn.wo")?,
            ln2_g: id("ln2.g")?,
            ln2_b: id("ln2.b")?,
            up: id("mlp.up")?,
            down: id("mlp.down")?,
            heads,
        })
    }

    pub(crate) fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Graph<T>,
        x: Var,
        causal: bool,
        lora: Option<&BlockLora>,
    ) -> Result<Var> {
        let (g1, b1) = (ps.bind(g, self.ln1_g), ps.bind(g, self.ln1_b));
        let h = g.layernorm(x, g1, b1)?;
        let wq = ps.bind(g, self.wq);
        let wk = ps.bind(g, self.wk);
        let wv = ps.bind(g, self.wv);
        let wo = ps.bind(g, self.wo);
        let mut q = g.matmul_t(h, wq)?;
        let k = g.matmul_t(h, wk)?;
        let mut v = g.matmul_t(h, wv)?;
        if let Some(l) = lora {
            q = l.q.apply(ps, g, h, q)?;
            v = l.v.apply(ps, g, h, v)?;
        }
        let a = g.attention(q, k, v, self.heads, causal)?;
        let a = g.matmul_t(a, wo)?;
        let x = g.add(x, a)?;

        let (g2, b2) = (ps.bind(g, self.ln2_g), ps.bind(g, self.ln2_b));
        let h = g.layernorm(x, g2, b2)?;
        let up = ps.bind(g, self.up);
        let down = ps.bind(g, self.down);
        let h = g.matmul_t(h, up)?;
        let h = g.gelu(h);
        let h = g.matmul_t(h, down)?;
        g.add(x, h)
    }
}
