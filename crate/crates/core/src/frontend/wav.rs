//! Single-channel WAV reading/writing (16-bit PCM or 32-bit float).

use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::Waveform;

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::data(format!("cannot read wav {path:?}: {e}")))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::data(format!(
            "{path:?} has {} channels; expected mono",
            spec.channels
        )));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data(format!("bad samples in {path:?}: {e}")))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data(format!("bad samples in {path:?}: {e}")))?,
        (fmt, bits) => {
            return Err(Error::data(format!(
                "{path:?}: unsupported wav format {fmt:?}/{bits} bits (want 16-bit PCM or f32)"
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav_i16(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::data(format!("cannot write wav {path:?}: {e}")))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::data(format!("cannot write wav {path:?}: {e}")))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::data(format!("cannot finalize wav {path:?}: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_i16() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f32> = (0..1000).map(|i| (i as f32 * 0.01).sin() * 0.5).collect();
        write_wav_i16(&path, &samples, 16000).unwrap();
        let w = read_wav(&path).unwrap();
        assert_eq!(w.sample_rate, 16000);
        assert_eq!(w.samples.len(), 1000);
        for (a, b) in w.samples.iter().zip(&samples) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }
}
