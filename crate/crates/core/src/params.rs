//! Named parameter storage shared by the backbone, tuning modules, and head.
//!
//! A [`ParamRegistry`] owns every tensor of a model keyed by a dotted path
//! (`backbone.block3.attn.wq`, `pet.prompt0`, `head.fc1.w`, ...) together
//! with a trainable flag. A [`Binder`] lends the registered tensors to a
//! [`Tape`] as leaves, caching one `Var` per name so that a parameter used in
//! several places accumulates a single gradient.

use crate::data::{rng_tags, seeded_rng};
use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use indexmap::IndexMap;
use rand::Rng;
use std::collections::HashMap;

/// Learning-rate group; the schedule drives the two groups separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrGroup {
    /// Head parameters and prompt banks (the fast group).
    A,
    /// Everything else that is trainable (adapters, gates, LoRA, backbone).
    B,
}

#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Uniform on `[-sqrt(6 / (fan_in + fan_out)), +sqrt(6 / (fan_in + fan_out))]`.
    XavierUniform { fan_in: usize, fan_out: usize },
}

/// Declarative description of one parameter; materialized by
/// [`ParamRegistry::from_specs`].
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
    pub group: LrGroup,
}

impl ParamSpec {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        init: Init,
        trainable: bool,
        group: LrGroup,
    ) -> Self {
        Self { name: name.into(), shape, init, trainable, group }
    }

    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<F: Scalar> {
    pub tensor: Tensor<F>,
    pub trainable: bool,
    pub group: LrGroup,
}

/// Insertion-ordered map of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry<F: Scalar> {
    entries: IndexMap<String, Parameter<F>>,
}

/// FNV-1a, used to derive a per-parameter RNG stream from its name so that
/// initialization does not depend on registration order.
fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in name.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn materialize<F: Scalar>(spec: &ParamSpec, seed: u64) -> Tensor<F> {
    let numel = spec.numel() as usize;
    let data: Vec<F> = match spec.init {
        Init::Zeros => vec![F::zero(); numel],
        Init::Ones => vec![F::one(); numel],
        Init::Constant(c) => vec![F::fl(c); numel],
        Init::XavierUniform { fan_in, fan_out } => {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = seeded_rng(seed, rng_tags::PARAM_INIT, name_hash(&spec.name));
            (0..numel).map(|_| F::fl(rng.gen_range(-limit..limit))).collect()
        }
    };
    Tensor::new(spec.shape.clone(), data).expect("spec shape matches generated data")
}

impl<F: Scalar> ParamRegistry<F> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    /// Initialize every parameter from its spec; random draws are keyed by
    /// `(seed, name)` only.
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut reg = Self::new();
        for spec in specs {
            reg.insert(&spec.name, materialize(spec, seed), spec.trainable, spec.group)?;
        }
        Ok(reg)
    }

    pub fn insert(
        &mut self,
        name: &str,
        tensor: Tensor<F>,
        trainable: bool,
        group: LrGroup,
    ) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.entries
            .insert(name.to_string(), Parameter { tensor, trainable, group });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<F>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<F>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Parameter<F>)> {
        self.iter().filter(|(_, p)| p.trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count over all parameters whose name matches `pred`.
    pub fn count_where(&self, pred: impl Fn(&str, &Parameter<F>) -> bool) -> u64 {
        self.iter()
            .filter(|(n, p)| pred(n, p))
            .map(|(_, p)| p.tensor.numel() as u64)
            .sum()
    }

    /// Overwrite tensors from `(name, tensor)` pairs; every name must exist
    /// and shapes must match.
    pub fn load_values(&mut self, values: &[(String, Tensor<F>)]) -> Result<()> {
        for (name, t) in values {
            let p = self.get_mut(name)?;
            if p.tensor.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` expects shape {:?}, file has {:?}",
                    p.tensor.shape(),
                    t.shape()
                )));
            }
            p.tensor = t.clone();
        }
        Ok(())
    }

    pub fn entries_for_io(&self) -> Vec<(&str, &Tensor<F>)> {
        self.iter().map(|(n, p)| (n, &p.tensor)).collect()
    }
}

/// Lends registry tensors to a tape, one leaf per name.
///
/// In train mode, trainable parameters become gradient-tracked leaves;
/// everything else enters as constants.
pub struct Binder<'a, F: Scalar> {
    pub tape: Tape<F>,
    registry: &'a ParamRegistry<F>,
    vars: HashMap<String, Var>,
    train: bool,
}

impl<'a, F: Scalar> Binder<'a, F> {
    pub fn new(registry: &'a ParamRegistry<F>, train: bool) -> Self {
        Self { tape: Tape::new(), registry, vars: HashMap::new(), train }
    }

    /// The tape leaf for `name`, created on first use.
    pub fn var(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let p = self.registry.get(name)?;
        let mut t = p.tensor.clone();
        t.set_tracked(self.train && p.trainable);
        let v = self.tape.leaf(t);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has(&self, name: &str) -> bool {
        self.registry.get(name).is_ok()
    }

    /// Shape of a registered parameter without binding it to the tape.
    pub fn shape_of(&self, name: &str) -> Result<Vec<usize>> {
        Ok(self.registry.get(name)?.tensor.shape().to_vec())
    }

    /// Names and vars of every parameter touched so far.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, &v)| (n.as_str(), v))
    }
}
