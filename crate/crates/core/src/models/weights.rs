use std::collections::HashMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{AnyTensor, Element, Tensor};

/// What part of the pipeline a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    None,
    Backbone,
    SiameseHead,
    FceG,
    FceF,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::None => 0,
            Role::Backbone => 1,
            Role::SiameseHead => 2,
            Role::FceG => 3,
            Role::FceF => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Role::None,
            1 => Role::Backbone,
            2 => Role::SiameseHead,
            3 => Role::FceG,
            4 => Role::FceF,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub role: Role,
    pub tensor: AnyTensor,
}

/// Marker entry written by Siamese training; its presence means "trained".
pub const SIAMESE_TRAINED_MARKER: &str = "meta.siamese_trained";

pub const FORMAT_VERSION: u32 = 1;

/// Ordered, uniquely named collection of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    entries: Vec<WeightEntry>,
    index: HashMap<String, usize>,
    pub format_version: u32,
}

impl Default for NetworkWeights {
    fn default() -> Self {
        Self::new()
    }
}

impl NetworkWeights {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            format_version: FORMAT_VERSION,
        }
    }

    pub fn from_entries(entries: Vec<WeightEntry>) -> Result<Self> {
        let mut w = Self::new();
        for e in entries {
            w.push(e)?;
        }
        Ok(w)
    }

    /// Append a new entry. Duplicate names and non-finite tensors are rejected.
    pub fn push(&mut self, entry: WeightEntry) -> Result<()> {
        if self.index.contains_key(&entry.name) {
            return Err(Error::invalid("weights", format!("duplicate entry `{}`", entry.name)));
        }
        if !entry.tensor.is_finite() {
            return Err(Error::NonFinite(format!("weight `{}`", entry.name)));
        }
        self.index.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn insert<T: Element>(&mut self, name: impl Into<String>, role: Role, tensor: Tensor<T>) -> Result<()> {
        self.push(WeightEntry {
            name: name.into(),
            role,
            tensor: tensor.into(),
        })
    }

    /// Append every entry of `other`; names must not collide.
    pub fn extend(&mut self, other: &NetworkWeights) -> Result<()> {
        for e in other.entries() {
            self.push(e.clone())?;
        }
        Ok(())
    }

    pub fn entries(&self) -> &[WeightEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&WeightEntry> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    /// Tensor by name, converted to `T` if stored in another dtype.
    pub fn typed<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        Ok(self.entry(name)?.tensor.to_typed())
    }

    /// Mutable access; the stored dtype must be `T`.
    pub fn typed_mut<T: Element>(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))?;
        T::unwrap_mut(&mut self.entries[i].tensor)
            .ok_or_else(|| Error::invalid("weights", format!("entry `{name}` has a different dtype")))
    }

    pub fn names_with_role(&self, role: Role) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.role == role)
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.name.clone())
            .collect()
    }

    /// Keep only entries satisfying `keep`, preserving order.
    pub fn filtered(&self, keep: impl Fn(&WeightEntry) -> bool) -> NetworkWeights {
        let entries = self.entries.iter().filter(|e| keep(e)).cloned().collect();
        NetworkWeights::from_entries(entries).expect("subset of valid weights")
    }

    pub fn is_siamese_trained(&self) -> bool {
        self.contains(SIAMESE_TRAINED_MARKER)
    }

    /// Convert every tensor to element type `T`.
    pub fn cast<T: Element>(&self) -> NetworkWeights {
        let entries = self
            .entries
            .iter()
            .map(|e| WeightEntry {
                name: e.name.clone(),
                role: e.role,
                tensor: e.tensor.to_typed::<T>().into(),
            })
            .collect();
        NetworkWeights::from_entries(entries).expect("cast of valid weights")
    }

    /// Put the named tensors into `graph`, as trainable params or constants.
    pub fn bind<T: Element>(&self, graph: &mut Graph<T>, names: &[String], trainable: bool) -> Result<Bound> {
        let mut vars = HashMap::with_capacity(names.len());
        let mut order = Vec::with_capacity(names.len());
        for name in names {
            let t = self.typed::<T>(name)?;
            let v = if trainable { graph.param(t) } else { graph.constant(t) };
            vars.insert(name.clone(), v);
            order.push((name.clone(), v));
        }
        Ok(Bound { vars, order })
    }
}

/// Names bound to graph variables.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
    order: Vec<(String, Var)>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.order.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Bind names to existing variables, e.g. inputs of a gradient check.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        let mut b = Bound::default();
        for (n, v) in pairs {
            b.vars.insert(n.clone(), v);
            b.order.push((n, v));
        }
        b
    }

    pub fn merge(&mut self, other: Bound) {
        for (n, v) in other.order {
            self.vars.insert(n.clone(), v);
            self.order.push((n, v));
        }
    }
}
