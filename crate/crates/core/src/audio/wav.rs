//! 16 kHz mono 16-bit PCM WAV I/O.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Reads a 16-bit mono 16 kHz WAV as samples in `[-1, 1)` (`i16 / 32768`).
pub fn load_wav(path: &Path) -> Result<Vec<f32>> {
    let reader = WavReader::open(path).map_err(|e| ingestion(path, "wav", e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(ingestion(
            path,
            "sample_rate",
            format!("expected {SAMPLE_RATE} Hz, got {}", spec.sample_rate),
        ));
    }
    if spec.channels != 1 {
        return Err(ingestion(
            path,
            "channels",
            format!("expected mono, got {} channels", spec.channels),
        ));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != SampleFormat::Int {
        return Err(ingestion(
            path,
            "bits_per_sample",
            format!(
                "expected 16-bit integer PCM, got {}-bit {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    reader
        .into_samples::<i16>()
        .map(|s| {
            s.map(|v| v as f32 / 32768.0)
                .map_err(|e| ingestion(path, "data", e.to_string()))
        })
        .collect()
}

/// Writes samples clamped to `[-1, 1]` and scaled by 32767.
pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    write_pcm(path, samples.iter().map(|&x| quantize(x)))
}

pub fn write_pcm(path: &Path, samples: impl IntoIterator<Item = i16>) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec)?;
    for s in samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}

pub fn quantize(x: f32) -> i16 {
    (x.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

fn ingestion(path: &Path, field: &str, reason: String) -> Error {
    Error::Ingestion {
        field: field.to_string(),
        reason: format!("{}: {reason}", path.display()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn silence_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        write_pcm(&p, std::iter::repeat_n(0i16, 16000)).unwrap();
        let s = load_wav(&p).unwrap();
        assert_eq!(s.len(), 16000);
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_scale_square_wave() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sq.wav");
        let wave: Vec<f32> = (0..64).map(|i| if (i / 8) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        write_wav(&p, &wave).unwrap();
        let s = load_wav(&p).unwrap();
        let top = 32767.0 / 32768.0;
        for (a, b) in s.iter().zip(&wave) {
            assert_eq!(*a, top * b);
        }
    }

    #[test]
    fn pcm_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pcm: Vec<i16> = (0..4000).map(|_| rng.random()).collect();
        write_pcm(&p, pcm.iter().copied()).unwrap();
        let back: Vec<i16> = load_wav(&p)
            .unwrap()
            .iter()
            .map(|&v| (v * 32768.0) as i16)
            .collect();
        assert_eq!(back, pcm);
        let raw = std::fs::read(&p).unwrap();
        let payload: Vec<u8> = pcm.iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(&raw[raw.len() - payload.len()..], &payload[..]);
    }

    #[test]
    fn wrong_format_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            (WavSpec { channels: 1, sample_rate: 44_100, bits_per_sample: 16, sample_format: SampleFormat::Int }, "sample_rate"),
            (WavSpec { channels: 2, sample_rate: 16_000, bits_per_sample: 16, sample_format: SampleFormat::Int }, "channels"),
            (WavSpec { channels: 1, sample_rate: 16_000, bits_per_sample: 8, sample_format: SampleFormat::Int }, "bits_per_sample"),
        ];
        for (i, (spec, field)) in cases.into_iter().enumerate() {
            let p = dir.path().join(format!("{i}.wav"));
            let mut w = WavWriter::create(&p, spec).unwrap();
            for _ in 0..(16 * spec.channels) {
                if spec.bits_per_sample == 8 {
                    w.write_sample(0i8).unwrap();
                } else {
                    w.write_sample(0i16).unwrap();
                }
            }
            w.finalize().unwrap();
            match load_wav(&p).unwrap_err() {
                Error::Ingestion { field: f, .. } => assert_eq!(f, field),
                e => panic!("unexpected {e}"),
            }
        }
    }
}
