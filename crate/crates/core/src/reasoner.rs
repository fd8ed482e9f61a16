//! Gated MLP from LLM image-token hidden states back to the encoder's
//! patch-embedding space.
//!
//! `r(z) = σ(W_g z) ⊙ W_p · Dropout(W_2 · GELU(W_1 z))`, rowwise and
//! bias-free, followed by the unmerger `W_u` which expands each token into
//! `merge_factor` patch rows.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{contract, Result};
use crate::layers::lookup;
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{ParamId, ParamStore};

/// Whether the gated MLP runs or is bypassed (the unmerger always runs).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReasonerMode {
    GatedMlp,
    Identity,
}

/// Summary of one `reason` call, for diagnostics and ablation checks.
#[derive(Clone, Debug, PartialEq)]
pub struct ReasonerTrace {
    pub mode: ReasonerMode,
    /// Output equals input bitwise.
    pub identity: bool,
    pub gate_mean: f64,
    pub gate_min: f64,
    pub gate_max: f64,
    pub out_rms: f64,
}

#[derive(Clone, Debug)]
pub struct Reasoner {
    w_g: ParamId,
    w_1: ParamId,
    w_2: ParamId,
    w_p: ParamId,
    w_u: ParamId,
    dropout: f64,
    d_llm: usize,
    d_embed: usize,
    merge_factor: usize,
}

impl Reasoner {
    /// `W_g, W_1, W_2, W_p ~ N(0, init_std²)`, `W_u = 0`.
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
        let d = cfg.lm.d_llm;
        let std = cfg.reasoner.init_std;
        store.add("reasoner.w_g", Tensor::randn(&[d, d], std, rng))?;
        store.add("reasoner.w_1", Tensor::randn(&[2 * d, d], std, rng))?;
        store.add("reasoner.w_2", Tensor::randn(&[2 * d, 2 * d], std, rng))?;
        store.add("reasoner.w_p", Tensor::randn(&[d, 2 * d], std, rng))?;
        store.add(
            "unmerger.w_u",
            Tensor::zeros(&[cfg.encoder.merge_factor * cfg.encoder.d_embed, d]),
        )?;
        Ok(())
    }

    pub fn attach<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            w_g: lookup(store, "reasoner.w_g")?,
            w_1: lookup(store, "reasoner.w_1")?,
            w_2: lookup(store, "reasoner.w_2")?,
            w_p: lookup(store, "reasoner.w_p")?,
            w_u: lookup(store, "unmerger.w_u")?,
            dropout: cfg.reasoner.dropout,
            d_llm: cfg.lm.d_llm,
            d_embed: cfg.encoder.d_embed,
            merge_factor: cfg.encoder.merge_factor,
        })
    }

    pub fn set_dropout(&mut self, p: f64) {
        self.dropout = p;
    }

    pub fn reason<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Graph<T>,
        z: Var,
        mode: ReasonerMode,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<(Var, ReasonerTrace)> {
        let shape = g.shape(z);
        if shape.len() != 2 || shape[1] != self.d_llm {
            return Err(contract(format!(
                "reasoner input {shape:?} does not have width {}",
                self.d_llm
            )));
        }
        if mode == ReasonerMode::Identity {
            let trace = ReasonerTrace {
                mode,
                identity: true,
                gate_mean: f64::NAN,
                gate_min: f64::NAN,
                gate_max: f64::NAN,
                out_rms: rms(g.value(z)),
            };
            return Ok((z, trace));
        }
        let w_g = ps.bind(g, self.w_g);
        let w_1 = ps.bind(g, self.w_1);
        let w_2 = ps.bind(g, self.w_2);
        let w_p = ps.bind(g, self.w_p);
        let gate = g.matmul_t(z, w_g)?;
        let gate = g.sigmoid(gate);
        let h = g.matmul_t(z, w_1)?;
        let h = g.gelu(h);
        let h = g.matmul_t(h, w_2)?;
        let h = g.dropout(h, self.dropout, training, rng)?;
        let value = g.matmul_t(h, w_p)?;
        let out = g.mul(gate, value)?;

        let gv = g.value(gate);
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for &x in gv {
            let x = x.as_f64();
            lo = lo.min(x);
            hi = hi.max(x);
            sum += x;
        }
        let trace = ReasonerTrace {
            mode,
            identity: g.value(out) == g.value(z),
            gate_mean: sum / gv.len() as f64,
            gate_min: lo,
            gate_max: hi,
            out_rms: rms(g.value(out)),
        };
        Ok((out, trace))
    }

    /// `[T, d_llm] → [T·m, d_embed]`, each token expanding into `m`
    /// consecutive patch rows. `patches` is the current image's `P`.
    pub fn unmerge<T: Scalar>(&self, ps: &ParamStore<T>, g: &mut Graph<T>, r: Var, patches: usize) -> Result<Var> {
        let shape = g.shape(r).to_vec();
        if shape.len() != 2 || shape[1] != self.d_llm {
            return Err(contract(format!("unmerger input {shape:?}")));
        }
        let t = shape[0];
        if t * self.merge_factor != patches {
            return Err(contract(format!(
                "{t} tokens × merge factor {} does not cover {patches} patches",
                self.merge_factor
            )));
        }
        let w_u = ps.bind(g, self.w_u);
        let wide = g.matmul_t(r, w_u)?;
        g.reshape(wide, &[patches, self.d_embed])
    }
}

fn rms<T: Scalar>(v: &[T]) -> f64 {
    (v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Sets `W_p` and `W_u` to zero, making the delta exactly zero.
pub fn zero_output<T: Scalar>(store: &mut ParamStore<T>) -> Result<()> {
    for name in ["reasoner.w_p", "unmerger.w_u"] {
        let t = store
            .by_name_mut(name)
            .ok_or_else(|| contract(format!("parameter {name} missing")))?;
        t.data_mut().iter_mut().for_each(|x| *x = T::zero());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn setup() -> (ParamStore<f64>, Reasoner) {
        let cfg = ModelConfig::toy();
        let mut s = ParamStore::new();
        Reasoner::register(&mut s, &cfg, &mut SeedStream::new(1).rng()).unwrap();
        let r = Reasoner::attach(&s, &cfg).unwrap();
        (s, r)
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (s, r) = setup();
        let mut g = Graph::new();
        let z = g.constant(&Tensor::zeros(&[4, 64]));
        let (out, trace) = r
            .reason(&s, &mut g, z, ReasonerMode::GatedMlp, false, &mut SeedStream::new(0).rng())
            .unwrap();
        assert!(g.value(out).iter().all(|&x| x == 0.0));
        assert_eq!(trace.gate_mean, 0.5);
    }

    #[test]
    fn shape_law_and_width_check() {
        let (s, r) = setup();
        let mut rng = SeedStream::new(2).rng();
        for t in [1, 4, 16] {
            let mut g = Graph::new();
            let z = g.constant(&Tensor::randn(&[t, 64], 1.0, &mut rng));
            let (out, _) = r.reason(&s, &mut g, z, ReasonerMode::GatedMlp, true, &mut rng).unwrap();
            assert_eq!(g.shape(out), &[t, 64]);
        }
        let mut g = Graph::new();
        let z = g.constant(&Tensor::zeros(&[4, 32]));
        assert!(r.reason(&s, &mut g, z, ReasonerMode::GatedMlp, false, &mut rng).is_err());
    }

    #[test]
    fn identity_mode_passes_through() {
        let (s, r) = setup();
        let mut rng = SeedStream::new(3).rng();
        let mut g = Graph::new();
        let z = g.constant(&Tensor::randn(&[4, 64], 1.0, &mut rng));
        let (out, trace) = r.reason(&s, &mut g, z, ReasonerMode::Identity, true, &mut rng).unwrap();
        assert_eq!(out, z);
        assert!(trace.identity);
    }

    #[test]
    fn unmerge_shape_and_count_check() {
        let (mut s, r) = setup();
        assert_eq!(s.count(crate::params::ParamGroup::Unmerger), 8192);
        for v in s.by_name_mut("unmerger.w_u").unwrap().data_mut() {
            *v = 0.5;
        }
        let mut g = Graph::new();
        let x = g.constant(&Tensor::full(&[4, 64], 1.0));
        let out = r.unmerge(&s, &mut g, x, 16).unwrap();
        assert_eq!(g.shape(out), &[16, 32]);
        assert!(g.value(out).iter().all(|&v| v == 32.0));
        assert!(matches!(r.unmerge(&s, &mut g, x, 36), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn rowwise_permutation_equivariance() {
        let (s, r) = setup();
        let mut rng = SeedStream::new(4).rng();
        let z = Tensor::<f64>::randn(&[3, 64], 1.0, &mut rng);
        let mut zp = z.clone();
        let d = zp.data_mut();
        for i in 0..64 {
            d.swap(i, 2 * 64 + i);
        }
        let mut g = Graph::new();
        let a = g.constant(&z);
        let b = g.constant(&zp);
        let (oa, _) = r.reason(&s, &mut g, a, ReasonerMode::GatedMlp, false, &mut rng).unwrap();
        let (ob, _) = r.reason(&s, &mut g, b, ReasonerMode::GatedMlp, false, &mut rng).unwrap();
        let (va, vb) = (g.value(oa), g.value(ob));
        assert_eq!(va[..64], vb[128..]);
        assert_eq!(va[64..128], vb[64..128]);
    }
}
