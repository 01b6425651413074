use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelError, Result};
use crate::tensor::{AdamState, DType, Tape, Tensor, Var};

/// Optimization group of a parameter: θ_f, θ_ada, or θ_g / θ_g′.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Backbone,
    Adapter,
    Generator,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Backbone, Group::Adapter, Group::Generator];
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Backbone => "backbone",
            Group::Adapter => "adapter",
            Group::Generator => "generator",
        })
    }
}

impl FromStr for Group {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(Group::Backbone),
            "adapter" => Ok(Group::Adapter),
            "generator" => Ok(Group::Generator),
            other => Err(ModelError::UnknownGroup(other.to_string())),
        }
    }
}

/// Structural module a parameter belongs to (used for Bi-APC sharing).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Module {
    Frontend,
    Encoder,
    Adapter,
    Generator,
}

/// Classify a parameter by its name, ignoring any direction prefix.
pub fn module_of(name: &str) -> Module {
    let bare = name
        .strip_prefix("l2r.")
        .or_else(|| name.strip_prefix("r2l."))
        .unwrap_or(name);
    if bare.starts_with("frontend.") {
        Module::Frontend
    } else if bare.starts_with("ada") {
        Module::Adapter
    } else if bare.starts_with("gen.") || bare.starts_with("ctc.") {
        Module::Generator
    } else {
        Module::Encoder
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub group: Group,
    pub trainable: bool,
}

/// Named parameter registry. Iteration order is the sorted name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Xavier-uniform tensor: U(-b, b) with `b = sqrt(6 / (fan_in + fan_out))`.
///
/// Matrices `[in, out]` use their two dims; conv kernels `[w, in, out]`
/// scale both fans by `w`; vectors use their length for both fans.
pub fn xavier_uniform(shape: &[usize], dtype: DType, rng: &mut ChaCha8Rng) -> Tensor {
    let (fan_in, fan_out) = match shape {
        [n] => (*n, *n),
        [a, b] => (*a, *b),
        [w, a, b] => (w * a, w * b),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    };
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::with_dtype(shape, data, dtype).expect("length matches shape")
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, group: Group) {
        self.params.insert(
            name.into(),
            Param {
                tensor,
                group,
                trainable: true,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    /// Remove every parameter in `group`, returning how many were removed.
    pub fn remove_group(&mut self, group: Group) -> usize {
        let before = self.params.len();
        self.params.retain(|_, p| p.group != group);
        before - self.params.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count, optionally restricted to one group.
    pub fn count(&self, group: Option<Group>) -> usize {
        self.params
            .values()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn has_group(&self, group: Group) -> bool {
        self.params.values().any(|p| p.group == group)
    }

    /// SHA-256 over names and value bits of one group.
    pub fn checksum(&self, group: Group) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(_, p)| p.group == group) {
            h.update(name.as_bytes());
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Make exactly `groups` trainable.
    pub fn set_trainable(&mut self, groups: &[Group]) -> Result<()> {
        if !self.params.values().any(|p| groups.contains(&p.group)) {
            return Err(ModelError::NoTrainable);
        }
        for p in self.params.values_mut() {
            p.trainable = groups.contains(&p.group);
        }
        Ok(())
    }

    pub fn trainable_groups(&self) -> Vec<Group> {
        Group::ALL
            .into_iter()
            .filter(|g| self.params.values().any(|p| p.group == *g && p.trainable))
            .collect()
    }

    /// Bind a parameter on `tape`; frozen parameters enter as constants.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        Ok(tape.param(name, &p.tensor, p.trainable))
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Pull gradients of every bound parameter off `tape`.
    pub fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        for (name, var) in tape.bound_params() {
            if let (Some(p), Some(g)) = (self.params.get_mut(name), tape.grad(var)?) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Global L2 norm of the gradients of trainable parameters.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter(|p| p.trainable)
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Clip the global gradient norm to `max_norm`; returns the norm before
    /// clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for p in self.params.values_mut().filter(|p| p.trainable) {
                p.tensor.scale_grad(s);
            }
        }
        norm
    }

    /// One Adam step over trainable parameters that received a gradient.
    /// Frozen parameters are not touched.
    pub fn adam_step(&mut self, state: &mut AdamState) -> Result<()> {
        state.begin_step();
        for (name, p) in self.params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            state.update(name, &mut p.tensor, &g)?;
        }
        Ok(())
    }
}
