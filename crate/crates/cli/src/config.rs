//! Mapping from flat `key = value` settings to library configs.

use anyhow::{bail, Context, Result};
use speechssl::data::{EmitMode, KvConfig, SynthConfig};
use speechssl::features::{FeaturizerConfig, SpecAugConfig};
use speechssl::model::{Frontend, MaskMode, ModelConfig, SharingScheme};
use speechssl::ssl::{ContrastiveConfig, HubertConfig, MaskConfig, Norm, Objective, ShiftSpec};
use speechssl::tensor::DType;
use speechssl::train::{NoamSchedule, Recipe, Schedule, TriStageSchedule};
use speechssl::Vocab;

/// Every setting understood by some subcommand.
pub const KNOWN_KEYS: &[&str] = &[
    // corpus
    "vocab",
    "proto_len",
    "dim",
    "noise",
    "min_tokens",
    "max_tokens",
    "source_size",
    "target_size",
    "test_size",
    "scale_min",
    "scale_max",
    "bias_scale",
    "seed",
    "emit",
    "sample_rate",
    "pitch_shift",
    // featurizer
    "window_ms",
    "shift_ms",
    "n_mels",
    "fmin",
    "fmax",
    // model
    "frontend",
    "d_model",
    "n_heads",
    "n_blocks",
    "ffn_dim",
    "subsample",
    "conv_kernel",
    "mask",
    "dropout",
    "dtype",
    // objectives
    "objective",
    "shift_s",
    "shift_k",
    "norm",
    "scheme",
    "mask_prob",
    "mask_span",
    "negatives",
    "tau",
    "diversity_weight",
    "alpha",
    "clusters",
    "kmeans_iters",
    "codebook_size",
    "d_code",
    // training
    "steps",
    "pretrain_steps",
    "adapt_steps",
    "finetune_steps",
    "batch_size",
    "d_ada",
    "grad_clip",
    "verification",
    "schedule",
    "lr_factor",
    "warmup",
    "peak_lr",
    "ramp",
    "hold",
    "lambda",
    "spec_augment",
];

pub fn load(path: Option<&std::path::Path>, overrides: &[(String, String)]) -> Result<KvConfig> {
    let mut kv = match path {
        Some(p) => KvConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => KvConfig::parse("", "<flags>")?,
    };
    for (k, v) in overrides {
        kv.set(k, v.clone());
    }
    kv.check_known(KNOWN_KEYS)?;
    Ok(kv)
}

pub fn synth(kv: &KvConfig) -> Result<SynthConfig> {
    let d = SynthConfig::default();
    Ok(SynthConfig {
        vocab: kv.get_or("vocab", d.vocab)?,
        proto_len: kv.get_or("proto_len", d.proto_len)?,
        dim: kv.get_or("dim", d.dim)?,
        noise: kv.get_or("noise", d.noise)?,
        min_tokens: kv.get_or("min_tokens", d.min_tokens)?,
        max_tokens: kv.get_or("max_tokens", d.max_tokens)?,
        source_size: kv.get_or("source_size", d.source_size)?,
        target_size: kv.get_or("target_size", d.target_size)?,
        test_size: kv.get_or("test_size", d.test_size)?,
        scale_min: kv.get_or("scale_min", d.scale_min)?,
        scale_max: kv.get_or("scale_max", d.scale_max)?,
        bias_scale: kv.get_or("bias_scale", d.bias_scale)?,
        seed: kv.get_or("seed", d.seed)?,
        emit: kv.get_or::<EmitMode>("emit", d.emit)?,
        sample_rate: kv.get_or("sample_rate", d.sample_rate)?,
        pitch_shift: kv.get_or("pitch_shift", d.pitch_shift)?,
    })
}

pub fn featurizer(kv: &KvConfig) -> Result<FeaturizerConfig> {
    let d = FeaturizerConfig::default();
    Ok(FeaturizerConfig {
        window_ms: kv.get_or("window_ms", d.window_ms)?,
        shift_ms: kv.get_or("shift_ms", d.shift_ms)?,
        n_mels: kv.get_or("n_mels", d.n_mels)?,
        fmin: kv.get_or("fmin", d.fmin)?,
        fmax: kv.get("fmax")?.or(d.fmax),
        ..d
    })
}

fn choice<T>(kv: &KvConfig, key: &str, default: T, options: &[(&str, T)]) -> Result<T>
where
    T: Copy,
{
    match kv.raw(key) {
        None => Ok(default),
        Some(v) => match options.iter().find(|(n, _)| *n == v) {
            Some((_, t)) => Ok(*t),
            None => {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                bail!("{key} must be one of {names:?}, got {v:?}")
            }
        },
    }
}

/// Architecture with `feature_dim` taken from the data.
pub fn model(kv: &KvConfig, feature_dim: usize) -> Result<ModelConfig> {
    let d = ModelConfig::toy();
    Ok(ModelConfig {
        frontend: choice(
            kv,
            "frontend",
            d.frontend,
            &[
                ("filterbank", Frontend::Filterbank),
                ("learned_conv", Frontend::LearnedConv),
            ],
        )?,
        feature_dim,
        d_model: kv.get_or("d_model", d.d_model)?,
        n_heads: kv.get_or("n_heads", d.n_heads)?,
        n_blocks: kv.get_or("n_blocks", d.n_blocks)?,
        ffn_dim: kv.get_or("ffn_dim", d.ffn_dim)?,
        subsample_factor: kv.get_or("subsample", d.subsample_factor)?,
        conv_kernel: kv.get_or("conv_kernel", d.conv_kernel)?,
        mask_mode: choice(
            kv,
            "mask",
            d.mask_mode,
            &[("causal", MaskMode::Causal), ("full", MaskMode::Full)],
        )?,
        dropout: kv.get_or("dropout", d.dropout)?,
        dtype: choice(
            kv,
            "dtype",
            d.dtype,
            &[("f32", DType::F32), ("f64", DType::F64)],
        )?,
        ..d
    })
}

pub fn dtype(kv: &KvConfig) -> Result<DType> {
    choice(
        kv,
        "dtype",
        DType::F32,
        &[("f32", DType::F32), ("f64", DType::F64)],
    )
}

pub fn scheme(kv: &KvConfig) -> Result<SharingScheme> {
    match kv.raw("scheme") {
        None => Ok(SharingScheme::None),
        Some(s) => s.parse().map_err(|e| anyhow::anyhow!("scheme: {e}")),
    }
}

fn mask(kv: &KvConfig) -> Result<MaskConfig> {
    let d = MaskConfig::default();
    Ok(MaskConfig {
        prob: kv.get_or("mask_prob", d.prob)?,
        span: kv.get_or("mask_span", d.span)?,
        ..d
    })
}

pub fn objective(kv: &KvConfig) -> Result<Objective> {
    let shift = ShiftSpec {
        s: kv.get_or("shift_s", 1)?,
        k: kv.get_or("shift_k", 1)?,
        p: choice(kv, "norm", Norm::L1, &[("l1", Norm::L1), ("l2", Norm::L2)])?,
    };
    Ok(match kv.raw("objective").unwrap_or("eapc") {
        "apc" | "eapc" => Objective::Eapc(shift),
        "ebiapc" => Objective::Ebiapc(shift),
        "contrastive" => {
            let d = ContrastiveConfig::default();
            Objective::Contrastive(ContrastiveConfig {
                mask: mask(kv)?,
                negatives: kv.get_or("negatives", d.negatives)?,
                tau: kv.get_or("tau", d.tau)?,
                diversity_weight: kv.get_or("diversity_weight", d.diversity_weight)?,
                ..d
            })
        }
        "hubert" => {
            let d = HubertConfig::default();
            Objective::Hubert(HubertConfig {
                mask: mask(kv)?,
                alpha: kv.get_or("alpha", d.alpha)?,
                clusters: kv.get_or("clusters", d.clusters)?,
                kmeans_iters: kv.get_or("kmeans_iters", d.kmeans_iters)?,
            })
        }
        other => {
            bail!("unknown objective {other:?}; expected apc, eapc, ebiapc, contrastive or hubert")
        }
    })
}

/// Explicit schedule, or `None` for the stage default.
pub fn schedule(kv: &KvConfig, d_model: usize, steps: u64) -> Result<Option<Schedule>> {
    Ok(match kv.raw("schedule") {
        None => None,
        Some("noam") => Some(Schedule::Noam(NoamSchedule {
            factor: kv.get_or("lr_factor", 1.0)?,
            warmup: kv.get_or("warmup", (steps / 10).max(1))?,
            d_model,
        })),
        Some("tri_stage") => Some(Schedule::TriStage(TriStageSchedule::fractions(
            kv.get_or("peak_lr", 1e-3)?,
            steps,
            kv.get_or("ramp", 0.1)?,
            kv.get_or("hold", 0.4)?,
            kv.get_or("lambda", 0.05)?,
        ))),
        Some("constant") => Some(Schedule::Constant {
            lr: kv.get_or("peak_lr", 1e-3)?,
        }),
        Some(other) => bail!("unknown schedule {other:?}; expected noam, tri_stage or constant"),
    })
}

pub fn spec_augment(kv: &KvConfig) -> Result<Option<SpecAugConfig>> {
    Ok(kv.get_or("spec_augment", false)?.then_some(SpecAugConfig {
        num_time_masks: 2,
        max_time_width: 5,
        num_freq_masks: 2,
        max_freq_width: 2,
    }))
}

pub fn vocab(kv: &KvConfig) -> Result<Vocab> {
    Ok(Vocab::numbered(
        kv.get_or("vocab", SynthConfig::default().vocab)?,
    ))
}

pub fn recipe(kv: &KvConfig, feature_dim: usize) -> Result<Recipe> {
    let d = Recipe::default();
    Ok(Recipe {
        model: model(kv, feature_dim)?,
        objective: objective(kv)?,
        scheme: scheme(kv)?,
        pretrain_steps: kv.get_or("pretrain_steps", d.pretrain_steps)?,
        adapt_steps: kv.get_or("adapt_steps", d.adapt_steps)?,
        finetune_steps: kv.get_or("finetune_steps", d.finetune_steps)?,
        batch_size: kv.get_or("batch_size", d.batch_size)?,
        d_ada: kv.get_or("d_ada", d.d_ada)?,
        seed: kv.get_or("seed", d.seed)?,
        vocab: vocab(kv)?,
        verification: kv.get_or("verification", d.verification)?,
        ..d
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "# toy\nnoise = 0.25\nseed = 3\n").unwrap();
        let kv = load(Some(&p), &[("seed".into(), "9".into())]).unwrap();
        let s = synth(&kv).unwrap();
        assert_eq!((s.noise, s.seed), (0.25, 9));
    }

    #[test]
    fn unknown_keys_and_values_are_rejected() {
        assert!(load(None, &[("d_modle".into(), "8".into())]).is_err());
        let kv = load(None, &[("objective".into(), "bert".into())]).unwrap();
        assert!(objective(&kv).is_err());
        let kv = load(None, &[("mask".into(), "sideways".into())]).unwrap();
        assert!(model(&kv, 8).is_err());
    }

    #[test]
    fn objective_settings() {
        let kv = load(
            None,
            &[
                ("objective".into(), "eapc".into()),
                ("shift_s".into(), "2".into()),
                ("shift_k".into(), "2".into()),
            ],
        )
        .unwrap();
        assert_eq!(
            objective(&kv).unwrap(),
            Objective::Eapc(ShiftSpec {
                s: 2,
                k: 2,
                p: Norm::L1
            })
        );
    }
}
