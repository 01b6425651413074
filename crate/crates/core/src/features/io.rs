use std::fs;
use std::path::Path;

use super::{FeatureError, FeatureMatrix, Waveform};

const MAGIC: &[u8; 6] = b"FEAT1\0";
const HEADER_LEN: usize = 6 + 4 + 4 + 4 + 4;

/// Serialize to the little-endian `FEAT1` layout: magic, u32 frames,
/// u32 dim, f32 shift_ms, f32 window_ms, then row-major f32 values.
pub fn encode_features(f: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * f.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(f.frames as u32).to_le_bytes());
    out.extend_from_slice(&(f.dim as u32).to_le_bytes());
    out.extend_from_slice(&f.frame_shift_ms.to_le_bytes());
    out.extend_from_slice(&f.frame_len_ms.to_le_bytes());
    for v in &f.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix, FeatureError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FeatureError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(FeatureError::Truncated);
    }
    let word = |at: usize| <[u8; 4]>::try_from(&bytes[at..at + 4]).expect("4-byte slice");
    let frames = u32::from_le_bytes(word(6)) as u64;
    let dim = u32::from_le_bytes(word(10)) as u64;
    let shift = f32::from_le_bytes(word(14));
    let window = f32::from_le_bytes(word(18));
    let count = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .filter(|&n| n <= usize::MAX as u64)
        .ok_or(FeatureError::ShapeOverflow { frames, dim })?;
    let payload = &bytes[HEADER_LEN..];
    if (payload.len() as u64) < count {
        return Err(FeatureError::Truncated);
    }
    let values = payload[..count as usize]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Ok(FeatureMatrix::new(
        frames as usize,
        dim as usize,
        values,
        shift,
        window,
    ))
}

pub fn write_features(f: &FeatureMatrix, path: &Path) -> Result<(), FeatureError> {
    fs::write(path, encode_features(f))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix, FeatureError> {
    decode_features(&fs::read(path)?)
}

/// Write mono 32-bit float WAV.
pub fn write_waveform(w: &Waveform, path: &Path) -> Result<(), FeatureError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut out = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        out.write_sample(s)?;
    }
    out.finalize()?;
    Ok(())
}

/// Read a mono WAV (float or integer PCM) into `[-1, 1]` samples.
pub fn read_waveform(path: &Path) -> Result<Waveform, FeatureError> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(FeatureError::InvalidWaveform(format!(
            "{} channels, expected mono",
            spec.channels
        )));
    }
    let samples = match spec.sample_format {
        hound::SampleFormat::Float => r.samples::<f32>().collect::<Result<Vec<_>, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f32;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    Waveform::new(samples, spec.sample_rate)
}
