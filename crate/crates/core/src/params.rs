//! Named parameter storage shared by every model component.

use std::collections::HashMap;
use std::ops::Index;
use std::sync::Arc;

use spt_tensor::{Tape, Tensor, Var};

use crate::error::{Result, SptError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

/// Parameters keep their id for the lifetime of the store; removing one
/// leaves an empty slot.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: Vec<Option<ParamEntry>>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names are unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.slots.len());
        self.by_name.insert(name.clone(), id);
        self.slots.push(Some(ParamEntry {
            name,
            value: Arc::new(value),
            trainable,
        }));
        id
    }

    pub fn remove(&mut self, id: ParamId) {
        if let Some(e) = self.slots[id.0].take() {
            self.by_name.remove(&e.name);
        }
    }

    /// Number of live parameters.
    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Live ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_some())
            .map(|(i, _)| ParamId(i))
    }

    pub fn entries(&self) -> impl Iterator<Item = &ParamEntry> {
        self.slots.iter().flatten()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        self.slots[id.0].as_ref().expect("parameter was removed")
    }

    fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        self.slots[id.0].as_mut().expect("parameter was removed")
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entry(id).value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entry(id).name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entry(id).trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entry_mut(id).trainable = trainable;
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = self.entry_mut(id);
        if entry.value.shape() != value.shape() {
            return Err(SptError::Schema(format!(
                "parameter {} has shape {:?}, got {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = Arc::new(value);
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entry_mut(id).value)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn total_count(&self) -> usize {
        self.entries().map(|e| e.value.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Registers every parameter as a leaf. Trainable parameters require a
    /// gradient when `train` is set.
    pub fn bind(&self, tape: &mut Tape, train: bool) -> Bound {
        self.bind_values(tape, |id, e| tape_leaf(id, e, train))
    }

    /// Like [`ParamStore::bind`] but every value comes from `value_of`.
    pub fn bind_values(&self, tape: &mut Tape, mut value_of: impl FnMut(ParamId, &ParamEntry) -> Leaf) -> Bound {
        let mut hole = None;
        let vars = self
            .slots
            .iter()
            .enumerate()
            .map(|(i, slot)| match slot {
                Some(e) => {
                    let leaf = value_of(ParamId(i), e);
                    tape.leaf(leaf.value, leaf.requires_grad)
                }
                None => *hole.get_or_insert_with(|| tape.constant(Tensor::scalar(0.0))),
            })
            .collect();
        Bound { vars }
    }

    /// Binds `ids` to the given tape variables and every other parameter as
    /// a constant.
    pub fn bind_overriding(&self, tape: &mut Tape, ids: &[ParamId], vars: &[Var]) -> Bound {
        assert_eq!(ids.len(), vars.len());
        let mut bound = self.bind_values(tape, |_, e| Leaf {
            value: Arc::clone(&e.value),
            requires_grad: false,
        });
        for (id, &v) in ids.iter().zip(vars) {
            bound.vars[id.0] = v;
        }
        bound
    }

    /// Snapshot of all values, indexed by slot.
    pub fn snapshot(&self) -> Vec<Option<Arc<Tensor>>> {
        self.slots.iter().map(|s| s.as_ref().map(|e| Arc::clone(&e.value))).collect()
    }

    pub fn restore(&mut self, snapshot: &[Option<Arc<Tensor>>]) {
        assert_eq!(snapshot.len(), self.slots.len());
        for (slot, v) in self.slots.iter_mut().zip(snapshot) {
            if let (Some(e), Some(v)) = (slot, v) {
                e.value = Arc::clone(v);
            }
        }
    }

    /// Order-sensitive FNV-1a digest over names and value bit patterns of
    /// the selected parameters.
    pub fn checksum(&self, filter: impl Fn(&ParamEntry) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        for e in self.entries().filter(|e| filter(e)) {
            e.name.bytes().for_each(&mut eat);
            for v in e.value.data() {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}

pub struct Leaf {
    pub value: Arc<Tensor>,
    pub requires_grad: bool,
}

fn tape_leaf(_: ParamId, e: &ParamEntry, train: bool) -> Leaf {
    Leaf {
        value: Arc::clone(&e.value),
        requires_grad: train && e.trainable,
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
