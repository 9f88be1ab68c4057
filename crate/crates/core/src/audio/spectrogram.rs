//! Hann-windowed STFT magnitude spectrograms reduced to 128 log bands.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::wav::SAMPLE_RATE;
use crate::error::{Error, Result};

pub const WINDOW: usize = 1024;
pub const HOP: usize = 512;
pub const BANDS: usize = 128;
/// Consecutive FFT bins averaged into one band; covers bins 0..512 (0–8 kHz).
pub const BINS_PER_BAND: usize = 4;

pub const FRAME_HOP_SEC: f64 = HOP as f64 / SAMPLE_RATE as f64;

/// Log-compressed band energies `ln(1 + mean |X|)`, frame-major `[frames × 128]`,
/// before corpus normalisation. This is what the feature cache stores.
#[derive(Clone, Debug, PartialEq)]
pub struct LogSpectrogram {
    pub frames: usize,
    pub values: Vec<f32>,
}

impl LogSpectrogram {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * BANDS..(t + 1) * BANDS]
    }

    /// Per-band mean over frames.
    pub fn band_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; BANDS];
        for t in 0..self.frames {
            for (acc, &v) in m.iter_mut().zip(self.frame(t)) {
                *acc += v as f64;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.frames as f64);
        m
    }
}

/// A normalised spectrogram: `frames × 128` values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub values: Vec<f32>,
    pub frame_hop_sec: f64,
    pub utterance_id: String,
}

impl Spectrogram {
    pub fn bands(&self) -> usize {
        BANDS
    }

    #[inline]
    pub fn get(&self, frame: usize, band: usize) -> f32 {
        self.values[frame * BANDS + band]
    }
}

/// Reusable STFT plan.
pub struct Stft {
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
}

impl Default for Stft {
    fn default() -> Self {
        Self::new()
    }
}

impl Stft {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(WINDOW);
        let window = hann(WINDOW);
        Self { fft, window }
    }

    /// Magnitudes of bins `0..=512` for every frame.
    pub fn magnitudes(&self, samples: &[f32]) -> Result<Vec<Vec<f32>>> {
        if samples.len() < WINDOW {
            return Err(Error::Ingestion {
                field: "samples".into(),
                reason: format!(
                    "clip of {} samples is shorter than one {WINDOW}-sample window",
                    samples.len()
                ),
            });
        }
        let frames = 1 + (samples.len() - WINDOW) / HOP;
        let mut buf = vec![Complex::new(0.0f32, 0.0); WINDOW];
        let mut scratch = vec![Complex::new(0.0f32, 0.0); self.fft.get_inplace_scratch_len()];
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let chunk = &samples[t * HOP..t * HOP + WINDOW];
            for ((b, &x), &w) in buf.iter_mut().zip(chunk).zip(&self.window) {
                *b = Complex::new(x * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            out.push(buf[..=WINDOW / 2].iter().map(|c| c.norm()).collect());
        }
        Ok(out)
    }

    pub fn log_spectrogram(&self, samples: &[f32]) -> Result<LogSpectrogram> {
        let mags = self.magnitudes(samples)?;
        let mut values = Vec::with_capacity(mags.len() * BANDS);
        for frame in &mags {
            values.extend(bands_from_bins(frame).into_iter().map(|m| m.ln_1p()));
        }
        Ok(LogSpectrogram {
            frames: mags.len(),
            values,
        })
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32)
        .collect()
}

/// Averages bins `4b..4b+4` into band `b` for `b < 128`; the Nyquist bin is dropped.
pub fn bands_from_bins(bins: &[f32]) -> [f32; BANDS] {
    std::array::from_fn(|b| {
        bins[b * BINS_PER_BAND..(b + 1) * BINS_PER_BAND].iter().sum::<f32>() / BINS_PER_BAND as f32
    })
}

/// Global affine map of log magnitudes onto `[-1, 1]`, fit from the 1st and
/// 99th percentiles of training data and clamped outside them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub lo: f32,
    pub hi: f32,
}

impl Normalizer {
    pub const LOWER_PERCENTILE: f64 = 0.01;
    pub const UPPER_PERCENTILE: f64 = 0.99;

    pub fn fit<'a>(specs: impl IntoIterator<Item = &'a LogSpectrogram>) -> Result<Self> {
        let mut all: Vec<f32> = specs.into_iter().flat_map(|s| s.values.iter().copied()).collect();
        if all.is_empty() {
            return Err(Error::contract("cannot fit a normaliser on no data"));
        }
        let lo = percentile(&mut all, Self::LOWER_PERCENTILE);
        let hi = percentile(&mut all, Self::UPPER_PERCENTILE);
        let hi = if hi - lo > 1e-6 { hi } else { lo + 1.0 };
        Ok(Self { lo, hi })
    }

    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        (2.0 * (v - self.lo) / (self.hi - self.lo) - 1.0).clamp(-1.0, 1.0)
    }

    pub fn normalize(&self, spec: &LogSpectrogram, utterance_id: &str) -> Spectrogram {
        Spectrogram {
            frames: spec.frames,
            values: spec.values.iter().map(|&v| self.apply(v)).collect(),
            frame_hop_sec: FRAME_HOP_SEC,
            utterance_id: utterance_id.to_string(),
        }
    }
}

/// Nearest-rank percentile; reorders `values`.
fn percentile(values: &mut [f32], q: f64) -> f32 {
    let idx = ((values.len() - 1) as f64 * q).round() as usize;
    let (_, v, _) = values.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    *v
}

/// Full pipeline for one clip with a fitted normaliser.
pub fn stft_spectrogram(samples: &[f32], normalizer: &Normalizer, utterance_id: &str) -> Result<Spectrogram> {
    let log = Stft::new().log_spectrogram(samples)?;
    Ok(normalizer.normalize(&log, utterance_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Direct O(N²) DFT magnitude of one windowed frame.
    fn dft_magnitudes(frame: &[f32], window: &[f32]) -> Vec<f64> {
        let n = frame.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for (i, (&x, &w)) in frame.iter().zip(window).enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                    re += (x * w) as f64 * ang.cos();
                    im += (x * w) as f64 * ang.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    fn sine(freq: f64, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin() as f32)
            .collect()
    }

    #[test]
    fn fft_matches_direct_dft() {
        let x = sine(1000.0, 2048);
        let stft = Stft::new();
        let mags = stft.magnitudes(&x).unwrap();
        assert_eq!(mags.len(), 3);
        let oracle = dft_magnitudes(&x[512..1536], &hann(WINDOW));
        for (a, b) in mags[1].iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-2, "{a} vs {b}");
        }
        let bin = oracle.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(bin, 64);
    }

    #[test]
    fn sine_peaks_in_band_16() {
        let log = Stft::new().log_spectrogram(&sine(1000.0, 16000)).unwrap();
        for t in 0..log.frames {
            let f = log.frame(t);
            let arg = (0..BANDS).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
            assert_eq!(arg, 16);
        }
    }

    #[test]
    fn silence_maps_to_minus_one() {
        let loud = Stft::new().log_spectrogram(&sine(440.0, 8000)).unwrap();
        let norm = Normalizer::fit([&loud]).unwrap();
        let spec = stft_spectrogram(&vec![0.0; 4096], &norm, "z").unwrap();
        assert_eq!(spec.frames, 7);
        assert!(spec.values.iter().all(|&v| v == -1.0));
    }

    #[test]
    fn short_clip_rejected() {
        let err = Stft::new().log_spectrogram(&[0.0; 1023]).unwrap_err();
        assert!(matches!(err, Error::Ingestion { .. }));
    }

    #[test]
    fn white_noise_band_profile_is_flat() {
        let stft = Stft::new();
        let normal = Normal::new(0.0, 0.1).unwrap();
        for trial in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let x: Vec<f32> = (0..8192).map(|_| normal.sample(&mut rng) as f32).collect();
            let means = stft.log_spectrogram(&x).unwrap().band_means();
            let max = means.iter().copied().fold(f64::MIN, f64::max);
            let min = means.iter().copied().fold(f64::MAX, f64::min);
            assert!(max / min < 2.0, "trial {trial}: {max} / {min}");
        }
    }

    #[test]
    fn normalised_values_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = Normal::new(0.0, 0.3).unwrap();
        let x: Vec<f32> = (0..6000).map(|_| normal.sample(&mut rng) as f32).collect();
        let log = Stft::new().log_spectrogram(&x).unwrap();
        let norm = Normalizer::fit([&log]).unwrap();
        assert!(norm.hi > norm.lo);
        let spec = norm.normalize(&log, "n");
        assert!(spec.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(spec.values.len(), spec.frames * BANDS);
    }
}
