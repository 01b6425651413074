use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{FeatureError, FeatureMatrix, Waveform};

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizerConfig {
    pub window_ms: f64,
    pub shift_ms: f64,
    pub n_mels: usize,
    pub fmin: f64,
    /// Upper band edge; `None` means Nyquist.
    pub fmax: Option<f64>,
    pub log_floor: f64,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            window_ms: 25.0,
            shift_ms: 10.0,
            n_mels: 80,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-10,
        }
    }
}

impl FeaturizerConfig {
    /// Small filterbank used by the toy pipeline.
    pub fn toy() -> Self {
        FeaturizerConfig {
            n_mels: 8,
            ..Self::default()
        }
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.shift_ms / 1000.0).round() as usize
    }

    fn band(&self, sample_rate: u32) -> (f64, f64) {
        (self.fmin, self.fmax.unwrap_or(sample_rate as f64 / 2.0))
    }

    pub fn validate(&self, sample_rate: u32) -> Result<(), FeatureError> {
        let bad = |m: String| Err(FeatureError::InvalidConfig(m));
        if !(self.shift_ms > 0.0 && self.shift_ms <= self.window_ms) {
            return bad(format!(
                "need 0 < shift_ms <= window_ms, got {} / {}",
                self.shift_ms, self.window_ms
            ));
        }
        let (lo, hi) = self.band(sample_rate);
        if !(lo >= 0.0 && lo < hi && hi <= sample_rate as f64 / 2.0) {
            return bad(format!(
                "need 0 <= fmin < fmax <= sample_rate/2, got {lo}..{hi}"
            ));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive".into());
        }
        if self.log_floor <= 0.0 {
            return bad("log floor must be positive".into());
        }
        if self.window_samples(sample_rate) < 2 || self.hop_samples(sample_rate) == 0 {
            return bad("window shorter than two samples".into());
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Symmetric Hamming window, `0.54 - 0.46 cos(2πn/(len-1))`.
pub fn hamming_window(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

fn mel_edges(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Center frequency in Hz of mel filter `j`.
pub fn mel_center_hz(j: usize, n_mels: usize, fmin: f64, fmax: f64) -> f64 {
    mel_edges(n_mels, fmin, fmax)[j + 1]
}

/// Triangular filters over the `n_fft/2 + 1` spectrum bins, one row per
/// mel band. Each triangle spans its neighbours' centers and is scaled so
/// its largest sampled weight is exactly 1.
pub fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
) -> Result<Vec<Vec<f64>>, FeatureError> {
    let bins = n_fft / 2 + 1;
    let edges = mel_edges(n_mels, fmin, fmax);
    let bin_hz = |k: usize| k as f64 * sample_rate as f64 / n_fft as f64;
    let mut bank = Vec::with_capacity(n_mels);
    for j in 0..n_mels {
        let (l, c, r) = (edges[j], edges[j + 1], edges[j + 2]);
        let mut row: Vec<f64> = (0..bins)
            .map(|k| {
                let f = bin_hz(k);
                if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                }
            })
            .collect();
        let peak = row.iter().copied().fold(0.0, f64::max);
        if peak == 0.0 {
            return Err(FeatureError::InvalidConfig(format!(
                "mel filter {j} ({l:.1}-{r:.1} Hz) covers no FFT bin; lower n_mels or widen the band"
            )));
        }
        row.iter_mut().for_each(|w| *w /= peak);
        bank.push(row);
    }
    Ok(bank)
}

/// Log-mel filter-bank features.
///
/// Frames are `floor((N - win)/hop) + 1` for `N >= win`, otherwise none.
/// Each frame is Hamming-windowed, zero-padded to the next power of two,
/// transformed to a power spectrum, pooled by the mel filterbank and passed
/// through `ln(max(x, floor))`.
pub fn log_mel(w: &Waveform, cfg: &FeaturizerConfig) -> Result<FeatureMatrix, FeatureError> {
    cfg.validate(w.sample_rate)?;
    let win = cfg.window_samples(w.sample_rate);
    let hop = cfg.hop_samples(w.sample_rate);
    let n_fft = win.next_power_of_two();
    let (fmin, fmax) = cfg.band(w.sample_rate);
    let bank = mel_filterbank(cfg.n_mels, n_fft, w.sample_rate, fmin, fmax)?;
    let window = hamming_window(win);
    let frames = if w.len() >= win {
        (w.len() - win) / hop + 1
    } else {
        0
    };

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_fft / 2 + 1];
    let mut values = Vec::with_capacity(frames * cfg.n_mels);
    for t in 0..frames {
        let start = t * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win {
                Complex::new(w.samples[start + i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for filt in &bank {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            values.push(e.max(cfg.log_floor).ln() as f32);
        }
    }
    Ok(FeatureMatrix::new(
        frames,
        cfg.n_mels,
        values,
        cfg.shift_ms as f32,
        cfg.window_ms as f32,
    ))
}
