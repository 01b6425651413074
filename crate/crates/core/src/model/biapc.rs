use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, ModelView, ModulePrefixes};
use super::params::{module_of, Module, ParamStore};
use super::{MaskMode, ModelConfig, ModelError, Result};
use crate::tensor::Tensor;

/// Which modules the two Bi-APC directions have in common.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingScheme {
    None,
    ShareGenerator,
    ShareGenEncoder,
    ShareAll,
}

impl SharingScheme {
    pub fn shares(self, module: Module) -> bool {
        use SharingScheme::*;
        match module {
            Module::Generator => self != None,
            Module::Encoder | Module::Adapter => matches!(self, ShareGenEncoder | ShareAll),
            Module::Frontend => self == ShareAll,
        }
    }
}

impl std::str::FromStr for SharingScheme {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SharingScheme::None),
            "share_generator" => Ok(SharingScheme::ShareGenerator),
            "share_gen_encoder" => Ok(SharingScheme::ShareGenEncoder),
            "share_all" => Ok(SharingScheme::ShareAll),
            other => Err(ModelError::InvalidConfig(format!(
                "unknown sharing scheme {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    LeftToRight,
    RightToLeft,
}

/// Two causal models over one parameter registry. Shared modules are stored
/// once under their bare names; unshared ones twice, under `l2r.` and
/// `r2l.`. The right-to-left view consumes time-reversed input.
#[derive(Debug, Clone, PartialEq)]
pub struct BiApcPair {
    pub config: ModelConfig,
    pub scheme: SharingScheme,
    pub params: ParamStore,
    prefixes: [ModulePrefixes; 2],
}

const DIR_PREFIX: [&str; 2] = ["l2r.", "r2l."];

/// Build a pair from two independently seeded models (`seed`, `seed + 1`);
/// shared modules take the first model's values.
pub fn build_biapc_pair(
    config: &ModelConfig,
    scheme: SharingScheme,
    seed: u64,
) -> Result<BiApcPair> {
    if config.mask_mode != MaskMode::Causal {
        return Err(ModelError::InvalidConfig(
            "Bi-APC directions must be causal".into(),
        ));
    }
    let a = Backbone::build(config, seed)?;
    let b = Backbone::build(config, seed.wrapping_add(1))?;
    BiApcPair::from_backbones(scheme, &a, &b)
}

impl BiApcPair {
    pub fn from_backbones(scheme: SharingScheme, l2r: &Backbone, r2l: &Backbone) -> Result<Self> {
        if l2r.config != r2l.config {
            return Err(ModelError::Structure("direction configs differ".into()));
        }
        let mut params = ParamStore::new();
        for (name, p) in l2r.params.iter() {
            let q = r2l.params.get(name).ok_or_else(|| {
                ModelError::Structure(format!("{name} missing in the reverse model"))
            })?;
            if q.tensor.shape() != p.tensor.shape() {
                return Err(ModelError::Structure(format!("{name} shapes differ")));
            }
            if scheme.shares(module_of(name)) {
                params.insert(name, p.tensor.clone(), p.group);
            } else {
                params.insert(
                    format!("{}{name}", DIR_PREFIX[0]),
                    p.tensor.clone(),
                    p.group,
                );
                params.insert(
                    format!("{}{name}", DIR_PREFIX[1]),
                    q.tensor.clone(),
                    q.group,
                );
            }
        }
        if r2l.params.len() != l2r.params.len() {
            return Err(ModelError::Structure("parameter sets differ".into()));
        }
        let prefixes = DIR_PREFIX.map(|dir| {
            let pick = |m: Module| {
                if scheme.shares(m) {
                    String::new()
                } else {
                    dir.to_string()
                }
            };
            ModulePrefixes {
                frontend: pick(Module::Frontend),
                encoder: pick(Module::Encoder),
                generator: pick(Module::Generator),
            }
        });
        Ok(BiApcPair {
            config: l2r.config.clone(),
            scheme,
            params,
            prefixes,
        })
    }

    pub fn view(&self, dir: Direction) -> ModelView<'_> {
        ModelView {
            config: &self.config,
            params: &self.params,
            prefixes: &self.prefixes[dir as usize],
        }
    }

    /// Registry name of bare parameter `name` as seen from `dir`.
    pub fn resolve(&self, dir: Direction, name: &str) -> String {
        self.prefixes[dir as usize].resolve(name)
    }

    /// Collapse to one model: shared tensors pass through, unshared ones
    /// become the elementwise mean of the two directions.
    pub fn average_directions(&self) -> Result<Backbone> {
        let mut out = ParamStore::new();
        for (name, p) in self.params.iter() {
            if let Some(bare) = name.strip_prefix(DIR_PREFIX[1]) {
                if !self.params.contains(&format!("{}{bare}", DIR_PREFIX[0])) {
                    return Err(ModelError::Structure(format!(
                        "{name} has no forward counterpart"
                    )));
                }
                continue;
            }
            let Some(bare) = name.strip_prefix(DIR_PREFIX[0]) else {
                out.insert(name, p.tensor.clone(), p.group);
                continue;
            };
            let other = self
                .params
                .get(&format!("{}{bare}", DIR_PREFIX[1]))
                .ok_or_else(|| {
                    ModelError::Structure(format!("{name} has no reverse counterpart"))
                })?;
            let (a, b) = (&p.tensor, &other.tensor);
            if a.shape() != b.shape() {
                return Err(ModelError::Structure(format!(
                    "{bare} shapes differ between directions"
                )));
            }
            let mean = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x + y) / 2.0)
                .collect();
            out.insert(
                bare,
                Tensor::with_dtype(a.shape(), mean, a.dtype())?,
                p.group,
            );
        }
        Ok(Backbone {
            config: self.config.clone(),
            params: out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Group, ModelInput};
    use crate::tensor::{DType, Tape};

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 32,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn share_all_has_no_prefixed_tensors() {
        let p = build_biapc_pair(&cfg(), SharingScheme::ShareAll, 0).unwrap();
        assert!(p
            .params
            .names()
            .all(|n| !n.starts_with("l2r.") && !n.starts_with("r2l.")));
        for name in [
            "frontend.conv0.kernel",
            "block0.attn.q.weight",
            "gen.apc0.weight",
        ] {
            assert_eq!(
                p.resolve(Direction::LeftToRight, name),
                p.resolve(Direction::RightToLeft, name)
            );
        }
    }

    #[test]
    fn none_shares_nothing() {
        let p = build_biapc_pair(&cfg(), SharingScheme::None, 0).unwrap();
        assert!(p
            .params
            .names()
            .all(|n| n.starts_with("l2r.") || n.starts_with("r2l.")));
    }

    #[test]
    fn share_generator_only_shares_generator() {
        let p = build_biapc_pair(&cfg(), SharingScheme::ShareGenerator, 0).unwrap();
        for (name, _) in p.params.iter() {
            let shared = !name.starts_with("l2r.") && !name.starts_with("r2l.");
            assert_eq!(shared, module_of(name) == Module::Generator, "{name}");
        }
        let p = build_biapc_pair(&cfg(), SharingScheme::ShareGenEncoder, 0).unwrap();
        assert!(p.params.contains("block0.ln1.gamma"));
        assert!(p.params.contains("l2r.frontend.conv0.kernel"));
    }

    #[test]
    fn shared_parameter_gets_gradient_from_both_directions() {
        let c = ModelConfig {
            dtype: DType::F64,
            ..cfg()
        };
        let p = build_biapc_pair(&c, SharingScheme::ShareAll, 0).unwrap();
        let x = ModelInput::Features(
            Tensor::new(&[8, 8], (0..64).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
        );
        let grad_of = |dirs: &[Direction]| {
            let mut tape = Tape::new(DType::F64);
            let mut total = None;
            for &d in dirs {
                let input = if d == Direction::RightToLeft {
                    x.reversed()
                } else {
                    x.clone()
                };
                let h = p.view(d).forward(&mut tape, &input, None).unwrap();
                let s = tape.sum(h).unwrap();
                total = Some(match total {
                    None => s,
                    Some(t) => tape.add(t, s).unwrap(),
                });
            }
            tape.backward(total.unwrap()).unwrap();
            let v = tape
                .bound_params()
                .find(|(n, _)| *n == "block0.ff1.weight")
                .unwrap()
                .1;
            tape.grad(v).unwrap().unwrap().to_vec()
        };
        let f = grad_of(&[Direction::LeftToRight]);
        let r = grad_of(&[Direction::RightToLeft]);
        let both = grad_of(&[Direction::LeftToRight, Direction::RightToLeft]);
        for i in 0..f.len() {
            assert!((both[i] - f[i] - r[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn averaging() {
        let p = build_biapc_pair(&cfg(), SharingScheme::ShareAll, 0).unwrap();
        let avg = p.average_directions().unwrap();
        assert_eq!(avg.params, p.params);

        let p = build_biapc_pair(&cfg(), SharingScheme::None, 0).unwrap();
        let avg = p.average_directions().unwrap();
        for (name, q) in avg.params.iter() {
            let a = p.params.tensor(&format!("l2r.{name}")).unwrap().data();
            let b = p.params.tensor(&format!("r2l.{name}")).unwrap().data();
            for ((m, x), y) in q.tensor.data().iter().zip(a).zip(b) {
                assert_eq!(*m, DType::F32.round((x + y) / 2.0));
            }
        }
        assert_eq!(
            avg.params.count(None),
            Backbone::build(&cfg(), 0).unwrap().params.count(None)
        );
        assert_eq!(
            avg.params.get("gen.apc0.weight").unwrap().group,
            Group::Generator
        );

        let again = BiApcPair::from_backbones(SharingScheme::None, &avg, &avg).unwrap();
        assert_eq!(again.average_directions().unwrap(), avg);
    }

    #[test]
    fn structural_mismatch() {
        let a = Backbone::build(&cfg(), 0).unwrap();
        let mut b = a.clone();
        b.params.remove("final_ln.beta");
        let mut p = BiApcPair::from_backbones(SharingScheme::None, &a, &a).unwrap();
        assert!(BiApcPair::from_backbones(SharingScheme::None, &a, &b).is_err());
        p.params.remove("r2l.final_ln.beta");
        assert!(matches!(
            p.average_directions(),
            Err(ModelError::Structure(_))
        ));
    }
}
