//! Named parameter store partitioned into frozen backbone and trainable
//! feedback-loop parameters.

use std::collections::HashMap;

use crate::error::{contract, Result};
use crate::numerics::{AdamW, Gradients, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    Projector,
    LanguageModel,
    Reasoner,
    Unmerger,
    Lora,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Encoder,
        ParamGroup::Projector,
        ParamGroup::LanguageModel,
        ParamGroup::Reasoner,
        ParamGroup::Unmerger,
        ParamGroup::Lora,
    ];

    pub fn is_backbone(self) -> bool {
        matches!(
            self,
            ParamGroup::Encoder | ParamGroup::Projector | ParamGroup::LanguageModel
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Projector => "projector",
            ParamGroup::LanguageModel => "lm",
            ParamGroup::Reasoner => "reasoner",
            ParamGroup::Unmerger => "unmerger",
            ParamGroup::Lora => "lora",
        }
    }

    /// Group from a parameter name's first path segment.
    pub fn from_name(name: &str) -> Option<Self> {
        let head = name.split('.').next()?;
        ParamGroup::ALL.into_iter().find(|g| g.name() == head)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor. The group is taken from the name prefix.
    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        let group = ParamGroup::from_name(name)
            .ok_or_else(|| contract(format!("parameter {name} has no known group prefix")))?;
        if self.index.contains_key(name) {
            return Err(contract(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group,
            tensor,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|id| &mut self.entries[id.0].tensor)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entries[id.0].group == group).collect()
    }

    /// Marks each tensor trainable iff `trainable(group)`.
    pub fn set_trainable(&mut self, trainable: impl Fn(ParamGroup) -> bool) {
        for e in &mut self.entries {
            e.tensor.requires_grad = trainable(e.group);
            if !e.tensor.requires_grad {
                e.tensor.grad = None;
            }
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entries[id.0].tensor.requires_grad).collect()
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Graph leaf for a parameter, created once per graph.
    pub fn bind(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        if let Some(&v) = g.bindings.get(&id.0) {
            return v;
        }
        let v = g.leaf(&self.entries[id.0].tensor);
        g.tag_param(v, id.0);
        v
    }

    pub fn bind_name(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let id = self
            .id(name)
            .ok_or_else(|| contract(format!("unknown parameter {name}")))?;
        Ok(self.bind(g, id))
    }

    pub fn grad<'a>(&self, grads: &'a Gradients<T>, id: ParamId) -> Option<&'a [T]> {
        grads.param(id.0)
    }

    /// Adds the graph's gradients into `tensor.grad` of every trainable tensor.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>) {
        for (i, e) in self.entries.iter_mut().enumerate() {
            if !e.tensor.requires_grad {
                continue;
            }
            if let Some(g) = grads.param(i) {
                match &mut e.tensor.grad {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g.to_vec()),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }

    /// AdamW update of every trainable tensor from its accumulated `grad`
    /// (zero where none was accumulated). Clears the accumulators.
    pub fn apply_adamw(&mut self, opt: &mut AdamW<T>) -> Result<()> {
        let ids = self.trainable_ids();
        let grads: Vec<Vec<T>> = ids
            .iter()
            .map(|&id| {
                let t = &self.entries[id.0].tensor;
                t.grad.clone().unwrap_or_else(|| vec![T::zero(); t.numel()])
            })
            .collect();
        let mut slices: Vec<&mut [T]> = Vec::with_capacity(ids.len());
        for (i, e) in self.entries.iter_mut().enumerate() {
            if ids.contains(&ParamId(i)) {
                slices.push(e.tensor.data_mut());
            }
        }
        let grad_refs: Vec<&[T]> = grads.iter().map(|g| g.as_slice()).collect();
        opt.step(&mut slices, &grad_refs)?;
        self.zero_grads();
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    tensor: e.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_follow_name_prefix() {
        let mut s = ParamStore::<f32>::new();
        s.add("encoder.patch.w", Tensor::zeros(&[2, 2])).unwrap();
        s.add("reasoner.w_g", Tensor::zeros(&[2, 2])).unwrap();
        assert!(s.add("mystery.w", Tensor::zeros(&[1])).is_err());
        assert!(s.add("reasoner.w_g", Tensor::zeros(&[1])).is_err());
        assert_eq!(s.count(ParamGroup::Encoder), 4);
        s.set_trainable(|g| !g.is_backbone());
        assert_eq!(s.trainable_ids(), vec![s.id("reasoner.w_g").unwrap()]);
    }

    #[test]
    fn binding_is_cached_per_graph() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("lm.w", Tensor::zeros(&[3])).unwrap();
        let mut g = Graph::new();
        let a = s.bind(&mut g, id);
        let b = s.bind(&mut g, id);
        assert_eq!(a, b);
        assert_eq!(g.len(), 1);
    }
}
