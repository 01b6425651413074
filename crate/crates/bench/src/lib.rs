//! Deterministic inputs shared by the kernel benchmarks.

use speechssl::{DType, FeatureMatrix, Tensor, Waveform};

/// Cheap reproducible values in [-1, 1) so benches need no RNG crate.
pub fn fill(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::with_dtype(shape, fill(n, seed), DType::F32).unwrap()
}

pub fn features(frames: usize, dim: usize, seed: u64) -> FeatureMatrix {
    let values = fill(frames * dim, seed)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    FeatureMatrix::new(frames, dim, values, 10.0, 25.0)
}

/// One second of a two-tone signal at 16 kHz.
pub fn waveform() -> Waveform {
    let sr = 16_000u32;
    let samples = (0..sr as usize)
        .map(|i| {
            let t = i as f64 / sr as f64;
            (0.5 * (2.0 * std::f64::consts::PI * 440.0 * t).sin()
                + 0.25 * (2.0 * std::f64::consts::PI * 1900.0 * t).sin()) as f32
        })
        .collect();
    Waveform::new(samples, sr).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_reproducible_and_bounded() {
        assert_eq!(fill(64, 3), fill(64, 3));
        assert_ne!(fill(64, 3), fill(64, 4));
        assert!(fill(1000, 1).iter().all(|v| (-1.0..1.0).contains(v)));
        assert_eq!(waveform().len(), 16_000);
    }
}
