use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Span masking over model steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Probability that a position starts a span.
    pub prob: f64,
    pub span: usize,
    /// Mask one span when sampling masked nothing and the sequence is at
    /// least `span` long.
    pub force: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            prob: 0.065,
            span: 10,
            force: true,
        }
    }
}

/// Union of `[start, start+span)` clipped to `t`.
pub fn mask_from_starts(t: usize, starts: &[usize], span: usize) -> Vec<bool> {
    let mut m = vec![false; t];
    for &s in starts {
        for v in m.iter_mut().take((s + span).min(t)).skip(s) {
            *v = true;
        }
    }
    m
}

/// Sample a boolean mask for `t` valid steps.
pub fn sample_masks(t: usize, cfg: &MaskConfig, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts: Vec<usize> = (0..t).filter(|_| rng.random::<f64>() < cfg.prob).collect();
    if starts.is_empty() && cfg.force && cfg.span > 0 && t >= cfg.span {
        starts.push(rng.random_range(0..=t - cfg.span));
    }
    mask_from_starts(t, &starts, cfg.span)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_probability_no_mask() {
        let cfg = MaskConfig {
            prob: 0.0,
            span: 3,
            force: false,
        };
        assert!(sample_masks(50, &cfg, 1).iter().all(|m| !m));
    }

    #[test]
    fn span_positions() {
        assert_eq!(
            mask_from_starts(5, &[2], 2),
            vec![false, false, true, true, false]
        );
        assert_eq!(
            mask_from_starts(4, &[3], 10),
            vec![false, false, false, true]
        );
    }

    #[test]
    fn deterministic_and_forced() {
        let cfg = MaskConfig::default();
        assert_eq!(sample_masks(40, &cfg, 9), sample_masks(40, &cfg, 9));
        let never = MaskConfig { prob: 0.0, ..cfg };
        for seed in 0..20 {
            assert!(sample_masks(10, &never, seed).iter().any(|&m| m));
            assert_eq!(
                sample_masks(10, &never, seed)
                    .iter()
                    .filter(|&&m| m)
                    .count(),
                10
            );
            assert!(sample_masks(9, &never, seed).iter().all(|m| !m));
        }
    }

    #[test]
    fn masking_rate_is_plausible() {
        let cfg = MaskConfig {
            prob: 0.05,
            span: 1,
            force: false,
        };
        let n: usize = (0..200)
            .map(|s| sample_masks(100, &cfg, s).iter().filter(|&&m| m).count())
            .sum();
        let rate = n as f64 / 20000.0;
        assert!((rate - 0.05).abs() < 0.01, "{rate}");
    }
}
