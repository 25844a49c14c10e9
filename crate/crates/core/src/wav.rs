//! Multichannel WAV import/export.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{invalid, Result};

/// Channels as `f64` in `[-1, 1]` plus the sample rate.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<Vec<f64>>, f64)> {
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let mut out = vec![Vec::with_capacity(interleaved.len() / channels.max(1)); channels];
    for (i, v) in interleaved.into_iter().enumerate() {
        out[i % channels].push(v);
    }
    Ok((out, spec.sample_rate as f64))
}

/// Writes 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, channels: &[Vec<f64>], sample_rate: f64) -> Result<()> {
    if channels.is_empty() || channels.len() > u16::MAX as usize {
        return invalid("need between 1 and 65535 channels");
    }
    let len = channels[0].len();
    if channels.iter().any(|c| c.len() != len) {
        return invalid("channels differ in length");
    }
    let spec = WavSpec {
        channels: channels.len() as u16,
        sample_rate: sample_rate.round() as u32,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for n in 0..len {
        for c in channels {
            writer.write_sample(c[n] as f32)?;
        }
    }
    writer.finalize()?;
    Ok(())
}
