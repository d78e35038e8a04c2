//! Parameter storage shared by every stream of an assembly.
//!
//! A parameter lives in exactly one [`ParamStore`] cell. Each forward pass
//! builds a fresh graph; [`Bindings`] maps every parameter touched by the
//! pass to a single leaf, so all streams that reference the same cell feed
//! one gradient accumulator.

use cen_autograd::{Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    Gamma,
    Beta,
    ScoreLogit,
}

/// Which learning rate applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
    Scores,
}

#[derive(Clone, Debug)]
pub struct Param<T: Element> {
    pub name: String,
    pub role: ParamRole,
    pub side: Side,
    pub value: Tensor<T>,
    /// Momentum buffer, same length as `value`.
    pub velocity: Vec<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element> {
    params: Vec<Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, side: Side, value: Tensor<T>) -> ParamId {
        let velocity = vec![T::zero(); value.numel()];
        self.params.push(Param { name: name.into(), role, side, value, velocity });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        self.params[id.0].value.data()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count over parameters matching `pred`.
    pub fn count_where(&self, pred: impl Fn(&Param<T>) -> bool) -> usize {
        self.params.iter().filter(|p| pred(p)).map(|p| p.value.numel()).sum()
    }

    /// FNV-1a over the bit patterns of every parameter matching `pred`.
    pub fn checksum_where(&self, pred: impl Fn(&Param<T>) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| pred(p)) {
            for v in p.value.data() {
                let mut bytes = Vec::with_capacity(T::BYTES);
                (*v).write_le(&mut bytes);
                for b in bytes {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Leaves of one graph, created on first use.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Option<Var>>,
    frozen: bool,
}

impl Bindings {
    pub fn new<T: Element>(store: &ParamStore<T>) -> Self {
        Bindings { vars: vec![None; store.len()], frozen: false }
    }

    /// Bindings whose leaves are constants: no parameter receives gradient.
    pub fn frozen<T: Element>(store: &ParamStore<T>) -> Self {
        Bindings { vars: vec![None; store.len()], frozen: true }
    }

    pub fn bind<T: Element>(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = store.get(id).value.clone();
        let v = if self.frozen { g.constant(value) } else { g.leaf(value) };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Gradients of every bound parameter after `g.backward`; parameters
    /// that were not reached get zeros.
    pub fn gradients<T: Element>(&self, g: &Graph<T>, store: &ParamStore<T>) -> Vec<Option<Vec<T>>> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.map(|v| match g.grad(v) {
                    Some(d) => d.to_vec(),
                    None => vec![T::zero(); store.params[i].value.numel()],
                })
            })
            .collect()
    }
}
