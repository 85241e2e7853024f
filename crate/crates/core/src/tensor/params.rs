use std::collections::HashMap;
use std::hash::Hasher;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state such as running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-√(6/fan_in), √(6/fan_in))`.
    KaimingUniform {
        fan_in: usize,
    },
    /// `U(-√(6/(fan_in+fan_out)), ..)`.
    XavierUniform {
        fan_in: usize,
        fan_out: usize,
    },
    Uniform {
        bound: f64,
    },
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Real> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

/// Named parameters and buffers of one model.
///
/// Each entry draws its initial values from its own generator seeded by
/// the root seed and the entry name, so initialization does not depend on
/// construction order.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Real = f32> {
    seed: u64,
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, ParamId>,
}

pub(crate) fn name_hash(name: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(name.as_bytes());
    h.finish()
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers `name`, or returns the existing id if it is already present
    /// with the same shape and kind.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, kind: ParamKind) -> Result<ParamId> {
        if let Some(&id) = self.index.get(name) {
            let e = &self.entries[id.0];
            if e.tensor.shape() != shape || e.kind != kind {
                return Err(Error::InvalidArgument(format!(
                    "parameter {name} re-registered with shape {shape:?}, existing {:?}",
                    e.tensor.shape()
                )));
            }
            return Ok(id);
        }
        let numel: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let uniform = |bound: f64, rng: &mut ChaCha8Rng| -> Vec<T> {
            (0..numel).map(|_| T::of(rng.gen_range(-bound..=bound))).collect()
        };
        let data = match init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Ones => vec![T::one(); numel],
            Init::KaimingUniform { fan_in } => uniform((6.0 / fan_in.max(1) as f64).sqrt(), &mut rng),
            Init::XavierUniform { fan_in, fan_out } => {
                uniform((6.0 / (fan_in + fan_out).max(1) as f64).sqrt(), &mut rng)
            }
            Init::Uniform { bound } => uniform(bound, &mut rng),
        };
        let tensor = Tensor::from_vec(shape, data)?;
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            tensor,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
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

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).numel()).sum()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn num_trainable_with_prefix(&self, prefix: &str) -> usize {
        self.trainable_ids()
            .filter(|&id| self.entries[id.0].name.starts_with(prefix))
            .map(|id| self.get(id).numel())
            .sum()
    }

    /// Puts a parameter on the tape; gradients flow iff `train` and the
    /// entry is trainable.
    pub fn bind(&self, tape: &mut Tape<T>, id: ParamId, train: bool) -> Var {
        let e = &self.entries[id.0];
        let rg = train && e.kind == ParamKind::Trainable;
        tape.param_leaf(id, e.tensor.clone().with_requires_grad(false), rg)
    }

    /// Mutable access to two distinct entries at once.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut [T], &mut [T]) {
        assert_ne!(a, b, "pair_mut needs distinct ids");
        if a.0 < b.0 {
            let (lo, hi) = self.entries.split_at_mut(b.0);
            (lo[a.0].tensor.data_mut(), hi[0].tensor.data_mut())
        } else {
            let (lo, hi) = self.entries.split_at_mut(a.0);
            (hi[0].tensor.data_mut(), lo[b.0].tensor.data_mut())
        }
    }

    /// Same entries with a different element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            seed: self.seed,
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    tensor: e.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
