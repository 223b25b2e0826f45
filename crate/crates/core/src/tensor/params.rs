use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which entries of a parameter receive decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decay {
    Full,
    None,
    /// Every row of a 2-D table except one (the `[PAD]` embedding).
    ExceptRow(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub decay: Decay,
}

/// Named, ordered collection of trainable tensors.
///
/// Ids are dense indices in registration order; [`ParamStore::sorted_ids`]
/// gives the canonical (name-sorted) order used for serialization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: Decay) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(alloc::format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, decay });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
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

    pub fn sorted_ids(&self) -> Vec<ParamId> {
        self.by_name.values().copied().collect()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Replace a value keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let current = &self.entries[id.0].value;
        if current.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamStore::set",
                lhs: current.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.entries[id.0].value = value;
        Ok(())
    }
}

/// Initial value of a registered parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Independent Gaussian entries with the given standard deviation.
    Normal(f64),
    /// Gaussian like `Normal`, rejected if two rows coincide.
    DistinctRows(f64),
    Zeros,
    Ones,
}

/// Destination of parameter declarations during model construction.
pub trait ParamRegistry {
    fn register(&mut self, name: String, shape: &[usize], init: Init, decay: Decay) -> Result<ParamId>;
}

/// Registers initialized tensors into a [`ParamStore`].
pub struct Allocating<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut crate::rng::Rng,
}

impl ParamRegistry for Allocating<'_> {
    fn register(&mut self, name: String, shape: &[usize], init: Init, decay: Decay) -> Result<ParamId> {
        let value = match init {
            Init::Normal(std) => Tensor::randn(shape, std, self.rng),
            Init::DistinctRows(std) => {
                let t = Tensor::randn(shape, std, self.rng);
                ensure_distinct_rows(&t, &name)?;
                t
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
        };
        self.store.add(name, value, decay)
    }
}

/// Records names and shapes without allocating values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShapeList(pub Vec<(String, Vec<usize>)>);

impl ShapeList {
    pub fn numel(&self) -> usize {
        self.0.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

impl ParamRegistry for ShapeList {
    fn register(&mut self, name: String, shape: &[usize], _init: Init, _decay: Decay) -> Result<ParamId> {
        if self.0.iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(alloc::format!("duplicate parameter name `{name}`")));
        }
        self.0.push((name, shape.to_vec()));
        Ok(ParamId(self.0.len() - 1))
    }
}

/// Rejects a 2-D table with two identical rows.
pub fn ensure_distinct_rows(table: &Tensor, name: &str) -> Result<()> {
    let n = table.shape()[0];
    for i in 0..n {
        for j in i + 1..n {
            let dist: f64 = table
                .row(i)
                .iter()
                .zip(table.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist <= 0.0 {
                return Err(Error::Config(alloc::format!("{name}: rows {i} and {j} coincide")));
            }
        }
    }
    Ok(())
}
