use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, Domain, Manifest, ManifestRow, Utterance};
use super::{DataError, Result};
use crate::features::{write_features, write_waveform, FeatureMatrix, Waveform};
use crate::model::ModelInput;
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmitMode {
    Features,
    Waveform,
}

impl std::str::FromStr for EmitMode {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "features" => Ok(EmitMode::Features),
            "waveform" => Ok(EmitMode::Waveform),
            other => Err(DataError::Invalid(format!("unknown emit mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Token types, ids `1..=vocab` (0 is the CTC blank).
    pub vocab: usize,
    /// Frames per token.
    pub proto_len: usize,
    pub dim: usize,
    /// Standard deviation of per-frame Gaussian noise.
    pub noise: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub source_size: usize,
    pub target_size: usize,
    pub test_size: usize,
    /// Singular values of the target transform are drawn from this range.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Standard deviation of the target offset entries.
    pub bias_scale: f64,
    pub seed: u64,
    pub emit: EmitMode,
    pub sample_rate: u32,
    /// Frequency factor applied to target-domain chords in waveform mode.
    pub pitch_shift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab: 8,
            proto_len: 8,
            dim: 8,
            noise: 1.0,
            min_tokens: 3,
            max_tokens: 8,
            source_size: 500,
            target_size: 200,
            test_size: 100,
            scale_min: 0.5,
            scale_max: 2.0,
            bias_scale: 2.0,
            seed: 0,
            emit: EmitMode::Features,
            sample_rate: 16000,
            pitch_shift: 1.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::Invalid(m.to_string()));
        if self.vocab == 0 || self.proto_len == 0 || self.dim == 0 {
            return bad("vocab, proto_len and dim must be positive");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("token range must satisfy 1 <= min_tokens <= max_tokens");
        }
        if self.vocab == 1 && self.max_tokens > 1 {
            return bad("a single token type cannot avoid immediate repeats");
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return bad("scale range must satisfy 0 < scale_min <= scale_max");
        }
        if self.scale_max / self.scale_min > 10.0 {
            return bad("scale range would allow a condition number above 10");
        }
        if self.noise < 0.0
            || self.bias_scale < 0.0
            || self.pitch_shift <= 0.0
            || self.sample_rate == 0
        {
            return bad("noise, bias_scale, pitch_shift and sample_rate must be non-negative (positive for the last two)");
        }
        Ok(())
    }
}

/// Framewise affine map `x ↦ A·x + b` with `A = Q·diag(s)`, `Q` orthogonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub dim: usize,
    /// Row-major `dim × dim`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub scales: Vec<f64>,
}

impl DomainShift {
    pub fn identity(dim: usize) -> Self {
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            a[i * dim + i] = 1.0;
        }
        DomainShift {
            dim,
            a,
            b: vec![0.0; dim],
            scales: vec![1.0; dim],
        }
    }

    pub fn random(
        dim: usize,
        scale_min: f64,
        scale_max: f64,
        bias_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Gram-Schmidt on a Gaussian matrix; columns of q are orthonormal.
        let mut q = vec![0.0; dim * dim];
        let mut c = 0;
        while c < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            for j in 0..c {
                let dot: f64 = (0..dim).map(|i| v[i] * q[i * dim + j]).sum();
                for i in 0..dim {
                    v[i] -= dot * q[i * dim + j];
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            for i in 0..dim {
                q[i * dim + c] = v[i] / norm;
            }
            c += 1;
        }
        let scales: Vec<f64> = (0..dim)
            .map(|_| rng.random_range(scale_min..=scale_max))
            .collect();
        let a = (0..dim * dim).map(|k| q[k] * scales[k % dim]).collect();
        let b = (0..dim)
            .map(|_| {
                bias_scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            })
            .collect();
        DomainShift { dim, a, b, scales }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| {
                self.b[i]
                    + (0..self.dim)
                        .map(|j| self.a[i * self.dim + j] * x[j])
                        .sum::<f64>()
            })
            .collect()
    }

    /// Ratio of the largest to the smallest singular value of `A`.
    pub fn condition_number(&self) -> f64 {
        let max = self.scales.iter().copied().fold(0.0, f64::max);
        let min = self.scales.iter().copied().fold(f64::INFINITY, f64::min);
        max / min
    }
}

/// Deterministic generator for one corpus configuration.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    pub config: SynthConfig,
    /// `prototypes[v - 1]` is the `proto_len × dim` template of token `v`.
    pub prototypes: Vec<Vec<f64>>,
    pub shift: DomainShift,
}

const PROTOTYPE_STREAM: u64 = 0;
const SHIFT_STREAM: u64 = 1;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Synthesizer {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, PROTOTYPE_STREAM);
        let prototypes = (0..config.vocab)
            .map(|_| {
                (0..config.proto_len * config.dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect();
        let mut rng = stream(config.seed, SHIFT_STREAM);
        let shift = DomainShift::random(
            config.dim,
            config.scale_min,
            config.scale_max,
            config.bias_scale,
            &mut rng,
        );
        Ok(Synthesizer {
            config: config.clone(),
            prototypes,
            shift,
        })
    }

    fn utt_rng(&self, domain: Domain, split: usize, index: usize) -> ChaCha8Rng {
        let tag = match domain {
            Domain::Source => 2,
            Domain::Target => 3,
        } + 2 * split as u64;
        stream(self.config.seed, (tag << 32) | index as u64)
    }

    fn transcript(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = rng.random_range(self.config.min_tokens..=self.config.max_tokens);
        let mut out: Vec<usize> = Vec::with_capacity(n);
        while out.len() < n {
            let v = rng.random_range(1..=self.config.vocab);
            if out.last() != Some(&v) {
                out.push(v);
            }
        }
        out
    }

    pub fn features(
        &self,
        tokens: &[usize],
        domain: Domain,
        rng: &mut ChaCha8Rng,
    ) -> FeatureMatrix {
        let d = self.config.dim;
        let noise = Normal::new(0.0, self.config.noise).expect("noise is non-negative");
        let mut values = Vec::with_capacity(tokens.len() * self.config.proto_len * d);
        for &v in tokens {
            for frame in self.prototypes[v - 1].chunks(d) {
                let x: Vec<f64> = frame.iter().map(|p| p + noise.sample(rng)).collect();
                let y = match domain {
                    Domain::Source => x,
                    Domain::Target => self.shift.apply(&x),
                };
                values.extend(y.iter().map(|&y| y as f32));
            }
        }
        FeatureMatrix::new(tokens.len() * self.config.proto_len, d, values, 10.0, 25.0)
    }

    /// Each token is a three-note chord; the target domain raises every
    /// frequency by `pitch_shift`.
    pub fn waveform(&self, tokens: &[usize], domain: Domain, rng: &mut ChaCha8Rng) -> Waveform {
        let sr = self.config.sample_rate as f64;
        let per_token = self.config.proto_len * (self.config.sample_rate as usize / 100);
        let fade = (per_token / 16).max(1);
        let factor = match domain {
            Domain::Source => 1.0,
            Domain::Target => self.config.pitch_shift,
        };
        let noise = Normal::new(0.0, 0.02 * self.config.noise).expect("noise is non-negative");
        let mut samples = Vec::with_capacity(tokens.len() * per_token);
        for &v in tokens {
            let base = 120.0 * (1.0 + v as f64) * factor;
            for n in 0..per_token {
                let t = n as f64 / sr;
                let env = (n.min(per_token - 1 - n) as f64 / fade as f64).min(1.0);
                let chord: f64 = [1.0, 1.25, 1.5]
                    .iter()
                    .map(|r| (2.0 * PI * base * r * t).sin())
                    .sum();
                samples.push((0.25 * env * chord + noise.sample(rng)) as f32);
            }
        }
        Waveform::new(samples, self.config.sample_rate).expect("finite samples")
    }

    /// Transcript plus features for utterance `index` of a split.
    pub fn feature_utterance(
        &self,
        domain: Domain,
        split: usize,
        index: usize,
    ) -> (Vec<usize>, FeatureMatrix) {
        let mut rng = self.utt_rng(domain, split, index);
        let tokens = self.transcript(&mut rng);
        let f = self.features(&tokens, domain, &mut rng);
        (tokens, f)
    }

    pub fn waveform_utterance(
        &self,
        domain: Domain,
        split: usize,
        index: usize,
    ) -> (Vec<usize>, Waveform) {
        let mut rng = self.utt_rng(domain, split, index);
        let tokens = self.transcript(&mut rng);
        let w = self.waveform(&tokens, domain, &mut rng);
        (tokens, w)
    }
}

/// The three splits of a corpus held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplits {
    pub source: Vec<Utterance>,
    pub target: Vec<Utterance>,
    pub target_test: Vec<Utterance>,
}

impl Synthesizer {
    /// `n` utterances of one split, identical to what [`gen_corpus`] writes.
    pub fn utterances(
        &self,
        name: &str,
        domain: Domain,
        split: usize,
        n: usize,
        dtype: DType,
    ) -> Vec<Utterance> {
        (0..n)
            .map(|i| {
                let (transcript, input) = match self.config.emit {
                    EmitMode::Features => {
                        let (t, f) = self.feature_utterance(domain, split, i);
                        (t, ModelInput::from_features(&f, dtype))
                    }
                    EmitMode::Waveform => {
                        let (t, w) = self.waveform_utterance(domain, split, i);
                        (t, ModelInput::from_waveform(&w, dtype))
                    }
                };
                Utterance {
                    id: format!("{name}_{i:05}"),
                    input,
                    transcript,
                    domain,
                }
            })
            .collect()
    }

    pub fn splits(&self, dtype: DType) -> CorpusSplits {
        let c = &self.config;
        CorpusSplits {
            source: self.utterances("source", Domain::Source, 0, c.source_size, dtype),
            target: self.utterances("target", Domain::Target, 0, c.target_size, dtype),
            target_test: self.utterances("target_test", Domain::Target, 1, c.test_size, dtype),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifests {
    pub source: Manifest,
    pub target: Manifest,
    pub target_test: Manifest,
}

/// Write the source, target and held-out target splits plus their
/// manifests (`source.tsv`, `target.tsv`, `target_test.tsv`) and the
/// domain transform (`domain.json`) under `out_dir`.
pub fn gen_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<CorpusManifests> {
    let synth = Synthesizer::new(cfg)?;
    fs::create_dir_all(out_dir)?;
    let splits = [
        ("source", Domain::Source, 0, cfg.source_size),
        ("target", Domain::Target, 0, cfg.target_size),
        ("target_test", Domain::Target, 1, cfg.test_size),
    ];
    let mut out = Vec::with_capacity(3);
    for (name, domain, split, size) in splits {
        fs::create_dir_all(out_dir.join(name))?;
        let mut rows = Vec::with_capacity(size);
        for i in 0..size {
            let id = format!("{name}_{i:05}");
            let (transcript, rel) = match cfg.emit {
                EmitMode::Features => {
                    let (tokens, f) = synth.feature_utterance(domain, split, i);
                    let rel = PathBuf::from(name).join(format!("{id}.feat"));
                    write_features(&f, &out_dir.join(&rel))?;
                    (tokens, rel)
                }
                EmitMode::Waveform => {
                    let (tokens, w) = synth.waveform_utterance(domain, split, i);
                    let rel = PathBuf::from(name).join(format!("{id}.wav"));
                    write_waveform(&w, &out_dir.join(&rel))?;
                    (tokens, rel)
                }
            };
            rows.push(ManifestRow {
                id,
                path: rel,
                transcript,
                domain,
            });
        }
        let manifest = Manifest {
            base_dir: out_dir.to_path_buf(),
            rows,
        };
        write_manifest(&manifest, &out_dir.join(format!("{name}.tsv")))?;
        out.push(manifest);
    }
    fs::write(
        out_dir.join("domain.json"),
        serde_json::to_string_pretty(&synth.shift)?,
    )?;
    let mut it = out.into_iter();
    Ok(CorpusManifests {
        source: it.next().expect("three splits"),
        target: it.next().expect("three splits"),
        target_test: it.next().expect("three splits"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            source_size: 6,
            target_size: 4,
            test_size: 2,
            ..SynthConfig::default()
        }
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((
                        p.strip_prefix(dir).unwrap().display().to_string(),
                        fs::read(&p).unwrap(),
                    ));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_same_bytes() {
        for emit in [EmitMode::Features, EmitMode::Waveform] {
            let cfg = SynthConfig { emit, ..small() };
            let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
            gen_corpus(&cfg, a.path()).unwrap();
            gen_corpus(&cfg, b.path()).unwrap();
            let (x, y) = (dir_bytes(a.path()), dir_bytes(b.path()));
            assert_eq!(x.len(), 3 + 6 + 4 + 2 + 1);
            assert_eq!(x, y);
        }
    }

    #[test]
    fn noiseless_source_tokens_repeat_exactly() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..small()
        };
        let s = Synthesizer::new(&cfg).unwrap();
        let mut seen: Vec<Option<Vec<f32>>> = vec![None; cfg.vocab + 1];
        for i in 0..20 {
            let (tokens, f) = s.feature_utterance(Domain::Source, 0, i);
            for (k, &v) in tokens.iter().enumerate() {
                let block = f.values[k * 64..(k + 1) * 64].to_vec();
                match &seen[v] {
                    Some(prev) => assert_eq!(prev, &block),
                    None => seen[v] = Some(block),
                }
            }
        }
    }

    #[test]
    fn transcripts_never_repeat_neighbours() {
        let s = Synthesizer::new(&small()).unwrap();
        for i in 0..50 {
            let (t, f) = s.feature_utterance(Domain::Target, 0, i);
            assert!((3..=8).contains(&t.len()));
            assert!(t.windows(2).all(|w| w[0] != w[1]));
            assert!(t.iter().all(|&v| (1..=8).contains(&v)));
            assert_eq!(f.frames, 8 * t.len());
        }
    }

    #[test]
    fn transform_is_well_conditioned() {
        for seed in 0..5 {
            let s = Synthesizer::new(&SynthConfig { seed, ..small() }).unwrap();
            let (a, d) = (&s.shift.a, s.shift.dim);
            // AᵀA must be diag(s²), so the singular values are exactly `scales`.
            for i in 0..d {
                for j in 0..d {
                    let v: f64 = (0..d).map(|k| a[k * d + i] * a[k * d + j]).sum();
                    let expect = if i == j {
                        s.shift.scales[i].powi(2)
                    } else {
                        0.0
                    };
                    assert!((v - expect).abs() < 1e-9);
                }
            }
            assert!(s.shift.condition_number() <= 4.0 + 1e-12);
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(Synthesizer::new(&SynthConfig {
            scale_min: 0.1,
            ..small()
        })
        .is_err());
        assert!(Synthesizer::new(&SynthConfig {
            min_tokens: 0,
            ..small()
        })
        .is_err());
        assert!(Synthesizer::new(&SynthConfig {
            vocab: 1,
            ..small()
        })
        .is_err());
    }
}
