//! Named parameter storage and the per-pass binding context.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Grads, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters never receive gradients or optimizer updates.
    pub frozen: bool,
}

/// FNV-1a, used to give every parameter its own deterministic init stream.
pub fn name_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Generator derived from a run seed and a stream label. Parameters seeded
/// this way do not depend on how many other parameters exist.
pub fn stream_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ name_hash(label).rotate_left(17))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Param>,
    #[serde(skip)]
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, value: Tensor, frozen: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            frozen,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform in `[-bound, bound]` from the parameter's own stream.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, frozen: bool) -> Result<ParamId> {
        let mut rng = stream_rng(self.seed, name);
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.add(name, t, frozen)
    }

    /// Linear-layer init: uniform ±1/√fan_in.
    pub fn linear_init(&mut self, name: &str, shape: &[usize], fan_in: usize, frozen: bool) -> Result<ParamId> {
        self.uniform(name, shape, 1.0 / (fan_in.max(1) as f64).sqrt(), frozen)
    }

    /// Kaiming (He) uniform init for GELU/ReLU-family layers: ±√(6/fan_in).
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize, frozen: bool) -> Result<ParamId> {
        self.uniform(name, shape, (6.0 / fan_in.max(1) as f64).sqrt(), frozen)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], frozen: bool) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape), frozen)
    }

    pub fn full(&mut self, name: &str, shape: &[usize], v: f64, frozen: bool) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, v), frozen)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        p.value = t;
        Ok(())
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect()
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.numel()).sum()
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), ParamId(i)))
            .collect();
    }

    /// Overwrites values of every parameter whose name also exists in
    /// `other`, requiring matching shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for p in &other.params {
            if let Some(id) = self.id(&p.name) {
                self.set_value(id, p.value.clone())?;
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Binds stored parameters onto a tape for one forward pass.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    store: &'t ParamStore,
    bound: RefCell<HashMap<ParamId, Var<'t>>>,
    train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore, train: bool, seed: u64) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(HashMap::new()),
            train,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn training(&self) -> bool {
        self.train
    }

    /// The parameter as a tape value; frozen ones enter as constants.
    pub fn p(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let p = self.store.get(id);
        let v = if p.frozen {
            self.tape.constant(p.value.clone())
        } else {
            self.tape.var(p.value.clone())
        };
        self.bound.borrow_mut().insert(id, v);
        v
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    pub fn dropout(&self, x: Var<'t>, p: f64) -> Result<Var<'t>> {
        x.dropout(p, self.train, &mut *self.rng.borrow_mut())
    }

    /// Parameters touched by this pass.
    pub fn bound_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.bound.borrow().keys().copied().collect();
        ids.sort_by_key(|id| id.0);
        ids
    }

    /// Backward from `loss`, returning gradients of every bound trainable
    /// parameter (zeros for trainable ones the loss does not reach).
    pub fn param_grads(&self, loss: Var<'t>) -> Result<Vec<(ParamId, Tensor)>> {
        let mut grads: Grads = self.tape.backward(loss)?;
        let bound = self.bound.borrow();
        let mut out: Vec<(ParamId, Tensor)> = bound
            .iter()
            .filter(|(id, _)| !self.store.get(**id).frozen)
            .map(|(id, v)| {
                let g = grads
                    .take(*v)
                    .unwrap_or_else(|| Tensor::zeros(self.store.value(*id).shape()));
                (*id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| id.0);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_streams_are_independent_of_order() {
        let mut a = ParamStore::new(7);
        a.uniform("x", &[4], 1.0, false).unwrap();
        a.uniform("y", &[4], 1.0, false).unwrap();
        let mut b = ParamStore::new(7);
        b.uniform("y", &[4], 1.0, false).unwrap();
        assert_eq!(a.value(a.id("y").unwrap()), b.value(b.id("y").unwrap()));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(0);
        s.zeros("w", &[1], false).unwrap();
        assert!(s.zeros("w", &[1], false).is_err());
    }

    #[test]
    fn frozen_params_get_no_grads() {
        let mut s = ParamStore::new(0);
        let w = s.full("w", &[2], 2.0, false).unwrap();
        let f = s.full("f", &[2], 3.0, true).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &s, true, 0);
        let y = ctx.p(w).mul(ctx.p(f)).unwrap().sum();
        let g = ctx.param_grads(y).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].0, w);
        assert_eq!(g[0].1.data(), &[3.0, 3.0]);
    }
}
