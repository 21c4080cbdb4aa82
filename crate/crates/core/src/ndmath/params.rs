use std::collections::BTreeMap;

use super::{Grads, Rng, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named learnable arrays.
///
/// An alias is a second name for an existing entry; both names resolve to
/// the same storage slot, which is how weight tying is expressed.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
    aliases: Vec<(String, String)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
            aliases: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.values.push(value);
        let id = self.values.len() - 1;
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.normal() * std)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn insert_ones(&mut self, name: &str, shape: &[usize]) -> usize {
        self.insert(name, Tensor::full(shape, T::one()))
    }

    /// Registers `alias` as another name for `target`.
    pub fn tie(&mut self, alias: &str, target: &str) -> Result<()> {
        let id = self.id(target)?;
        if self.index.contains_key(alias) {
            return Err(Error::Config(format!("tie alias '{alias}' already names a parameter")));
        }
        self.index.insert(alias.to_string(), id);
        self.aliases.push((alias.to_string(), target.to_string()));
        Ok(())
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.values[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let id = self.id(name)?;
        Ok(&mut self.values[id])
    }

    pub fn by_id(&self, id: usize) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(name, value)` in insertion order; aliases excluded.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn aliases(&self) -> &[(String, String)] {
        &self.aliases
    }

    pub fn same_storage(&self, a: &str, b: &str) -> bool {
        matches!((self.index.get(a), self.index.get(b)), (Some(x), Some(y)) if x == y)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn attach(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (inference only).
    pub fn attach_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
            aliases: self.aliases.clone(),
        }
    }
}

/// Tape handles for every slot of a [`ParamStore`], by slot id.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }

    /// Per-slot gradients aligned with the store.
    pub fn gradients<T: Scalar>(&self, grads: &Grads<T>, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, &v)| grads.get_or_zeros(v, store.by_id(i).shape()))
            .collect()
    }
}
