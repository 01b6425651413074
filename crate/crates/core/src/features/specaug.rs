use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SpecAugConfig {
    pub num_time_masks: usize,
    /// Widths are drawn uniformly from `0..=max`.
    pub max_time_width: usize,
    pub num_freq_masks: usize,
    pub max_freq_width: usize,
}

/// A realized mask: `width` consecutive frames (or bins) from `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSpan {
    Time { start: usize, width: usize },
    Freq { start: usize, width: usize },
}

/// Zero random time spans and frequency bands. Deterministic under `seed`.
pub fn spec_augment(f: &FeatureMatrix, cfg: &SpecAugConfig, seed: u64) -> FeatureMatrix {
    spec_augment_with_spans(f, cfg, seed).0
}

/// Like [`spec_augment`], also returning the realized spans.
pub fn spec_augment_with_spans(
    f: &FeatureMatrix,
    cfg: &SpecAugConfig,
    seed: u64,
) -> (FeatureMatrix, Vec<MaskSpan>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = f.clone();
    let mut spans = Vec::new();
    for _ in 0..cfg.num_time_masks {
        let width = rng.random_range(0..=cfg.max_time_width.min(f.frames));
        let start = rng.random_range(0..=f.frames - width);
        for t in start..start + width {
            out.values[t * f.dim..(t + 1) * f.dim].fill(0.0);
        }
        spans.push(MaskSpan::Time { start, width });
    }
    for _ in 0..cfg.num_freq_masks {
        let width = rng.random_range(0..=cfg.max_freq_width.min(f.dim));
        let start = rng.random_range(0..=f.dim - width);
        for t in 0..f.frames {
            out.values[t * f.dim + start..t * f.dim + start + width].fill(0.0);
        }
        spans.push(MaskSpan::Freq { start, width });
    }
    (out, spans)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(frames: usize, dim: usize) -> FeatureMatrix {
        let v = (0..frames * dim).map(|i| 1.0 + i as f32).collect();
        FeatureMatrix::new(frames, dim, v, 10.0, 25.0)
    }

    #[test]
    fn no_masks_is_identity() {
        let f = ramp(12, 5);
        assert_eq!(spec_augment(&f, &SpecAugConfig::default(), 3), f);
    }

    #[test]
    fn time_mask_zeroes_width_times_dim() {
        let f = ramp(20, 6);
        let cfg = SpecAugConfig {
            num_time_masks: 1,
            max_time_width: 2,
            ..Default::default()
        };
        let mut saw_two = false;
        for seed in 0..32 {
            let (g, spans) = spec_augment_with_spans(&f, &cfg, seed);
            let MaskSpan::Time { width, .. } = spans[0] else {
                panic!()
            };
            let zeros = g.values.iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeros, width * f.dim);
            saw_two |= width == 2;
        }
        assert!(saw_two);
    }

    #[test]
    fn seeded_output_is_reproducible() {
        let f = ramp(30, 8);
        let cfg = SpecAugConfig {
            num_time_masks: 2,
            max_time_width: 5,
            num_freq_masks: 2,
            max_freq_width: 3,
        };
        let a = spec_augment(&f, &cfg, 11);
        let b = spec_augment(&f, &cfg, 11);
        assert_eq!(a.values, b.values);
        assert_eq!((a.frames, a.dim), (f.frames, f.dim));
    }

    #[test]
    fn oversized_widths_are_clipped() {
        let f = ramp(3, 2);
        let cfg = SpecAugConfig {
            num_time_masks: 3,
            max_time_width: 50,
            num_freq_masks: 3,
            max_freq_width: 50,
        };
        let g = spec_augment(&f, &cfg, 0);
        assert_eq!(g.values.len(), 6);
    }
}
