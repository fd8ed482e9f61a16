//! Causal decoder over interleaved text and image tokens.

use std::collections::BTreeMap;

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{contract, Error, Result};
use crate::layers::{add_normal, lookup, Block, BlockLora, LoraPair, INIT_STD};
use crate::lm::layout::SequenceLayout;
use crate::lm::vocab::EOS;
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{ParamGroup, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoraMode {
    Enabled,
    Disabled,
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    tok_emb: crate::params::ParamId,
    pos: crate::params::ParamId,
    blocks: Vec<Block>,
    ln_g: crate::params::ParamId,
    ln_b: crate::params::ParamId,
    lora: Option<Vec<BlockLora>>,
    d_llm: usize,
    vocab: usize,
    max_seq: usize,
}

impl LanguageModel {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
        let l = &cfg.lm;
        add_normal(store, "lm.tok_emb", &[l.vocab, l.d_llm], INIT_STD, rng)?;
        add_normal(store, "lm.pos", &[l.max_seq, l.d_llm], INIT_STD, rng)?;
        for i in 0..l.blocks {
            Block::register(store, &format!("lm.blocks.{i}"), l.d_llm, l.mlp_ratio, rng)?;
        }
        store.add("lm.ln_f.g", Tensor::full(&[l.d_llm], T::one()))?;
        store.add("lm.ln_f.b", Tensor::zeros(&[l.d_llm]))?;
        Ok(())
    }

    /// Adds zero-initialized query/value adapters to every block.
    pub fn inject_lora<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
        let d = cfg.lm.d_llm;
        for i in 0..cfg.lm.blocks {
            for p in ["q", "v"] {
                LoraPair::register(store, &format!("lora.blocks.{i}.{p}"), d, d, cfg.lora.rank, rng)?;
            }
        }
        Ok(())
    }

    /// Binds to a store; adapters are picked up when present.
    pub fn attach<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let l = &cfg.lm;
        let lora = if store.id("lora.blocks.0.q.a").is_some() {
            let (r, a) = (cfg.lora.rank, cfg.lora.alpha);
            Some(
                (0..l.blocks)
                    .map(|i| {
                        Ok(BlockLora {
                            q: LoraPair::attach(store, &format!("lora.blocks.{i}.q"), r, a)?,
                            v: LoraPair::attach(store, &format!("lora.blocks.{i}.v"), r, a)?,
                        })
                    })
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            tok_emb: lookup(store, "lm.tok_emb")?,
            pos: lookup(store, "lm.pos")?,
            blocks: (0..l.blocks)
                .map(|i| Block::attach(store, &format!("lm.blocks.{i}"), l.heads))
                .collect::<Result<_>>()?,
            ln_g: lookup(store, "lm.ln_f.g")?,
            ln_b: lookup(store, "lm.ln_f.b")?,
            lora,
            d_llm: l.d_llm,
            vocab: l.vocab,
            max_seq: l.max_seq,
        })
    }

    pub fn has_lora(&self) -> bool {
        self.lora.is_some()
    }

    pub fn d_llm(&self) -> usize {
        self.d_llm
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Final-norm hidden states `[len, d_llm]`. `images[i]` fills `layout.spans()[i]`.
    pub fn hidden<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Graph<T>,
        layout: &SequenceLayout,
        images: &[Var],
        lora: LoraMode,
    ) -> Result<Var> {
        let spans = layout.spans();
        if images.len() != spans.len() {
            return Err(contract(format!(
                "{} image spans but {} image token blocks supplied",
                spans.len(),
                images.len()
            )));
        }
        let n = layout.len();
        if n == 0 || n > self.max_seq {
            return Err(Error::Input(format!("sequence length {n} outside 1..={}", self.max_seq)));
        }
        let tokens = layout.tokens();
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary")));
        }
        let emb = ps.bind(g, self.tok_emb);
        let mut parts = Vec::with_capacity(2 * spans.len() + 1);
        let mut cursor = 0;
        for (span, &img) in spans.iter().zip(images) {
            if g.shape(img) != [span.len, self.d_llm] {
                return Err(contract(format!(
                    "image span of {} tokens filled with {:?}",
                    span.len,
                    g.shape(img)
                )));
            }
            if span.start > cursor {
                let ids: Vec<usize> = tokens[cursor..span.start].iter().map(|&t| t as usize).collect();
                parts.push(g.gather_rows(emb, &ids)?);
            }
            parts.push(img);
            cursor = span.start + span.len;
        }
        if cursor < n {
            let ids: Vec<usize> = tokens[cursor..].iter().map(|&t| t as usize).collect();
            parts.push(g.gather_rows(emb, &ids)?);
        }
        let x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let pos = ps.bind(g, self.pos);
        let pos = g.slice_rows(pos, 0, n)?;
        let mut x = g.add(x, pos)?;
        for (i, b) in self.blocks.iter().enumerate() {
            let adapter = match (lora, &self.lora) {
                (LoraMode::Enabled, Some(l)) => Some(&l[i]),
                _ => None,
            };
            x = b.forward(ps, g, x, true, adapter)?;
        }
        let (lg, lb) = (ps.bind(g, self.ln_g), ps.bind(g, self.ln_b));
        g.layernorm(x, lg, lb)
    }

    /// Tied-head logits for `len` rows of `hidden` starting at `start`.
    pub fn logits<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Graph<T>,
        hidden: Var,
        start: usize,
        len: usize,
    ) -> Result<Var> {
        let h = g.slice_rows(hidden, start, len)?;
        let emb = ps.bind(g, self.tok_emb);
        g.matmul_t(h, emb)
    }

    /// Logits for every position plus the hidden states.
    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Graph<T>,
        layout: &SequenceLayout,
        images: &[Var],
        lora: LoraMode,
    ) -> Result<(Var, Var)> {
        let h = self.hidden(ps, g, layout, images, lora)?;
        let logits = self.logits(ps, g, h, 0, layout.len())?;
        Ok((logits, h))
    }

    /// Hidden rows at the single original-image span.
    pub fn extract_hint<T: Scalar>(g: &mut Graph<T>, hidden: Var, layout: &SequenceLayout) -> Result<Var> {
        let span = layout.original_span()?;
        g.slice_rows(hidden, span.start, span.len)
    }

    /// Greedy continuation of `prefix` with fixed image token blocks.
    pub fn greedy_decode<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        prefix: &SequenceLayout,
        images: &[Tensor<T>],
        lora: LoraMode,
        max_new: usize,
    ) -> Result<Vec<u32>> {
        let mut layout = prefix.clone();
        let budget = max_new.min(self.max_seq.saturating_sub(layout.len()) + 1);
        greedy(budget, |generated| {
            if let Some(&t) = generated.last() {
                layout.push(t);
            }
            let mut g = Graph::new();
            let imgs: Vec<Var> = images.iter().map(|t| g.constant(t)).collect();
            let h = self.hidden(ps, &mut g, &layout, &imgs, lora)?;
            let l = self.logits(ps, &mut g, h, layout.len() - 1, 1)?;
            Ok(g.value(l).to_vec())
        })
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Repeated argmax over `next_logits(generated so far)`, stopping after
/// `<eos>` (which is included) or `max_new` tokens.
pub fn greedy<T: Scalar>(max_new: usize, mut next_logits: impl FnMut(&[u32]) -> Result<Vec<T>>) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Err(contract("greedy decoding needs max_new >= 1"));
    }
    let mut out = Vec::new();
    while out.len() < max_new {
        let logits = next_logits(&out)?;
        let t = argmax(&logits) as u32;
        out.push(t);
        if t == EOS {
            break;
        }
    }
    Ok(out)
}

/// Parameter counts per group after partitioning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionReport {
    pub counts: BTreeMap<ParamGroup, usize>,
    pub trainable: Vec<ParamGroup>,
    pub trainable_count: usize,
    pub frozen_count: usize,
}

/// Freezes encoder, projector and LM; reasoner, unmerger and LoRA train.
pub fn set_trainable_partition<T: Scalar>(store: &mut ParamStore<T>) -> PartitionReport {
    store.set_trainable(|g| !g.is_backbone());
    let mut counts = BTreeMap::new();
    let mut trainable = Vec::new();
    let (mut tc, mut fc) = (0, 0);
    for g in ParamGroup::ALL {
        let c = store.count(g);
        if c == 0 {
            continue;
        }
        counts.insert(g, c);
        if g.is_backbone() {
            fc += c;
        } else {
            trainable.push(g);
            tc += c;
        }
    }
    PartitionReport {
        counts,
        trainable,
        trainable_count: tc,
        frozen_count: fc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::layout::Ordering;
    use crate::rng::SeedStream;

    fn micro_lm(lora: bool) -> (ModelConfig, ParamStore<f64>, LanguageModel) {
        let cfg = ModelConfig::micro();
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(5).rng();
        LanguageModel::register(&mut store, &cfg, &mut rng).unwrap();
        if lora {
            LanguageModel::inject_lora(&mut store, &cfg, &mut rng).unwrap();
        }
        let lm = LanguageModel::attach(&store, &cfg).unwrap();
        (cfg, store, lm)
    }

    fn image(g: &mut Graph<f64>, seed: u64) -> Var {
        g.constant(&Tensor::randn(&[4, 8], 1.0, &mut SeedStream::new(seed).rng()))
    }

    #[test]
    fn causal_prefix_is_unchanged_by_suffix() {
        let (_, store, lm) = micro_lm(false);
        let a = SequenceLayout::single(Ordering::ImageFirst, 4, &[10, 11, 12], &[20, 21]);
        let b = SequenceLayout::single(Ordering::ImageFirst, 4, &[10, 11, 12], &[30, 31]);
        let mut g = Graph::new();
        let img = image(&mut g, 1);
        let (la, _) = lm.forward(&store, &mut g, &a, &[img], LoraMode::Disabled).unwrap();
        let (lb, _) = lm.forward(&store, &mut g, &b, &[img], LoraMode::Disabled).unwrap();
        let v = store.by_name("lm.tok_emb").unwrap().rows();
        let prefix = a.answer_start().unwrap() + 1;
        assert_eq!(g.value(la)[..prefix * v], g.value(lb)[..prefix * v]);
        assert_ne!(g.value(la)[prefix * v..], g.value(lb)[prefix * v..]);
    }

    #[test]
    fn fresh_lora_is_a_no_op() {
        let (_, store, lm) = micro_lm(true);
        let l = SequenceLayout::single(Ordering::ImageFirst, 4, &[10, 11], &[20]);
        let mut g = Graph::new();
        let img = image(&mut g, 2);
        let (a, _) = lm.forward(&store, &mut g, &l, &[img], LoraMode::Enabled).unwrap();
        let (b, _) = lm.forward(&store, &mut g, &l, &[img], LoraMode::Disabled).unwrap();
        assert!(g.tensor(a).bits_eq(&g.tensor(b)));
    }

    #[test]
    fn unfilled_span_is_rejected() {
        let (_, store, lm) = micro_lm(false);
        let l = SequenceLayout::pass1(Ordering::ImageFirst, 4, &[10]);
        let mut g = Graph::new();
        assert!(matches!(
            lm.hidden(&store, &mut g, &l, &[], LoraMode::Disabled),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn hint_is_span_rows_and_context_dependent() {
        let (_, store, lm) = micro_lm(false);
        let a = SequenceLayout::pass1(Ordering::PromptFirst, 4, &[10, 11, 12, 13, 14]);
        let b = SequenceLayout::pass1(Ordering::PromptFirst, 4, &[14, 12, 11, 10, 13]);
        let mut g = Graph::new();
        let img = image(&mut g, 3);
        let ha = lm.hidden(&store, &mut g, &a, &[img], LoraMode::Disabled).unwrap();
        let za = LanguageModel::extract_hint(&mut g, ha, &a).unwrap();
        assert_eq!(g.shape(za), &[4, 8]);
        assert_eq!(g.value(za), &g.value(ha)[5 * 8..9 * 8]);
        let hb = lm.hidden(&store, &mut g, &b, &[img], LoraMode::Disabled).unwrap();
        let zb = LanguageModel::extract_hint(&mut g, hb, &b).unwrap();
        assert_ne!(g.value(za), g.value(zb));
    }

    #[test]
    fn greedy_rules() {
        let eos_first = greedy::<f32>(5, |_| {
            let mut l = vec![0.0; 8];
            l[EOS as usize] = 100.0;
            Ok(l)
        })
        .unwrap();
        assert_eq!(eos_first, vec![EOS]);
        let tie = greedy::<f32>(1, |_| Ok(vec![0.0, 0.0, 0.0, 3.0, 1.0, 3.0])).unwrap();
        assert_eq!(tie, vec![3]);
        let capped = greedy::<f32>(3, |_| Ok(vec![0.0, 0.0, 1.0])).unwrap();
        assert_eq!(capped, vec![2, 2, 2]);
        assert!(greedy::<f32>(0, |_| Ok(vec![1.0])).is_err());
    }

    #[test]
    fn greedy_decode_is_deterministic() {
        let (_, store, lm) = micro_lm(false);
        let l = SequenceLayout::single(Ordering::ImageFirst, 4, &[10, 11], &[]);
        let img = Tensor::randn(&[4, 8], 1.0, &mut SeedStream::new(4).rng());
        let a = lm.greedy_decode(&store, &l, std::slice::from_ref(&img), LoraMode::Disabled, 4).unwrap();
        let b = lm.greedy_decode(&store, &l, &[img], LoraMode::Disabled, 4).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty() && a.len() <= 4);
    }

    #[test]
    fn partition_report() {
        let (_, mut store, _) = micro_lm(true);
        let r = set_trainable_partition(&mut store);
        assert_eq!(r.trainable, vec![ParamGroup::Lora]);
        assert_eq!(r.trainable_count + r.frozen_count, store.total_count());
        let (_, mut plain, _) = micro_lm(false);
        assert!(set_trainable_partition(&mut plain).trainable.is_empty());
    }
}
