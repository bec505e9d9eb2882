//! Named parameter arrays with per-array freezing.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub frozen: bool,
}

/// Ordered collection of named arrays. Insertion order is preserved so that
/// checkpoints and optimizer sweeps are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        let name = name.into();
        assert_eq!(data.len(), shape.iter().product::<usize>(), "{name}: data/shape mismatch");
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            data,
            frozen: false,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn data(&self, name: &str) -> &[f64] {
        &self
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .data
    }

    /// Position of `name` in insertion order.
    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn frozen_set(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.frozen)
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        p.frozen = frozen;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Replaces values of matching names, checking shapes. Returns the
    /// number of arrays loaded.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut loaded = 0;
        for src in other.iter() {
            if let Some(dst) = self.get_mut(&src.name) {
                if dst.shape != src.shape {
                    return Err(Error::ShapeMismatch(format!(
                        "{}: expected {:?}, got {:?}",
                        src.name, dst.shape, src.shape
                    )));
                }
                dst.data.clone_from(&src.data);
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}

/// Lazily binds parameters of one store to a tape, each at most once.
pub struct Binder<'a> {
    store: &'a ParamStore,
    bound: BTreeMap<&'a str, Var>,
    /// When false every leaf is bound without gradient tracking.
    track: bool,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, track: bool) -> Self {
        Binder {
            store,
            bound: BTreeMap::new(),
            track,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape<'a>, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let p = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        let v = tape.borrowed(&p.data, &p.shape, self.track && !p.frozen);
        self.bound.insert(p.name.as_str(), v);
        v
    }

    pub fn bound(&self) -> impl Iterator<Item = (&'a str, Var)> + '_ {
        self.bound.iter().map(|(k, v)| (*k, *v))
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, the usual linear-layer default.
pub fn uniform_fan_in<R: Rng>(rng: &mut R, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Adds a `[fan_in, fan_out]` weight and `[fan_out]` bias under `prefix`.
pub fn add_linear<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) {
    store.insert(
        format!("{prefix}.weight"),
        &[fan_in, fan_out],
        uniform_fan_in(rng, fan_in, fan_in * fan_out),
    );
    if bias {
        store.insert(
            format!("{prefix}.bias"),
            &[fan_out],
            uniform_fan_in(rng, fan_in, fan_out),
        );
    }
}

pub fn add_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.weight"), &[dim], vec![1.0; dim]);
    store.insert(format!("{prefix}.bias"), &[dim], vec![0.0; dim]);
}
