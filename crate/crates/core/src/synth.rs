//! Deterministic synthetic corpus with the same on-disk layout as a real one.
//!
//! Each clip is a stack of harmonics whose high-frequency roll-off moves up as
//! valence rises and whose loudness grows with activation, gated by word envelopes.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::manifest::{write_manifest, write_transcript, ManifestEntry, Word, RATINGS_PER_CLIP};
use crate::audio::wav::{write_wav, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const UNLABELED_SESSION: &str = "pool";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_sessions: usize,
    pub speakers_per_session: usize,
    pub labeled_per_speaker: usize,
    pub unlabeled_clips: usize,
    pub min_duration_sec: f64,
    pub max_duration_sec: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_sessions: 5,
            speakers_per_session: 2,
            labeled_per_speaker: 40,
            unlabeled_clips: 200,
            min_duration_sec: 1.0,
            max_duration_sec: 4.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_sessions == 0 || self.n_sessions > 99 {
            bad.push(format!("n_sessions {} not in 1..=99", self.n_sessions));
        }
        if self.speakers_per_session == 0 || self.speakers_per_session > 26 {
            bad.push(format!("speakers_per_session {} not in 1..=26", self.speakers_per_session));
        }
        if !(self.min_duration_sec >= 0.2 && self.max_duration_sec >= self.min_duration_sec) {
            bad.push(format!(
                "duration range [{}, {}] must satisfy 0.2 <= min <= max",
                self.min_duration_sec, self.max_duration_sec
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Hidden generating parameters of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTruth {
    pub id: String,
    pub valence: u8,
    pub activation: u8,
    pub session: String,
    pub speaker: String,
    pub labeled: bool,
}

struct ClipPlan {
    index: u64,
    truth: ClipTruth,
}

fn plan(spec: &SynthSpec) -> Vec<ClipPlan> {
    let mut out = Vec::new();
    let mut index = 0u64;
    for s in 1..=spec.n_sessions {
        let session = format!("Ses{s:02}");
        for p in 0..spec.speakers_per_session {
            let speaker = format!("{session}_{}", (b'A' + p as u8) as char);
            for c in 0..spec.labeled_per_speaker {
                out.push(ClipPlan {
                    index,
                    truth: ClipTruth {
                        id: format!("{speaker}_{c:03}"),
                        valence: (c % 5) as u8 + 1,
                        activation: ((c / 5 + p) % 5) as u8 + 1,
                        session: session.clone(),
                        speaker: speaker.clone(),
                        labeled: true,
                    },
                });
                index += 1;
            }
        }
    }
    for u in 0..spec.unlabeled_clips {
        out.push(ClipPlan {
            index,
            truth: ClipTruth {
                id: format!("{UNLABELED_SESSION}_{u:04}"),
                valence: (u % 5) as u8 + 1,
                activation: ((u / 5) % 5) as u8 + 1,
                session: UNLABELED_SESSION.into(),
                speaker: format!("{UNLABELED_SESSION}_{:02}", u % 10),
                labeled: false,
            },
        });
        index += 1;
    }
    out
}

fn clip_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// Cutoff of the exponential harmonic roll-off; doubles with each valence step.
pub fn brightness_hz(valence: u8) -> f64 {
    400.0 * 2f64.powi(valence as i32 - 1)
}

/// RMS level of the voiced parts.
pub fn activation_gain(activation: u8) -> f64 {
    0.05 * 1.1f64.powi(activation as i32 - 1)
}

/// Words tiling `[0, duration)` with short gaps.
fn tile_words<R: Rng>(duration: f64, rng: &mut R) -> Vec<Word> {
    let mut words = Vec::new();
    let mut t = rng.random_range(0.02..0.08);
    while t < duration - 0.15 {
        let end = (t + rng.random_range(0.15..0.5)).min(duration - 0.02);
        words.push(Word {
            token: format!("w{}", words.len()),
            start: round_ms(t),
            end: round_ms(end),
        });
        t = end + rng.random_range(0.02..0.1);
    }
    words
}

fn round_ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

fn envelope(words: &[Word], t: f64) -> f64 {
    const RAMP: f64 = 0.02;
    const FLOOR: f64 = 0.05;
    for w in words {
        if t >= w.start && t < w.end {
            let edge = ((t - w.start).min(w.end - t) / RAMP).min(1.0);
            return FLOOR + (1.0 - FLOOR) * 0.5 * (1.0 - (PI * edge).cos());
        }
    }
    FLOOR
}

/// Samples and word alignment of one clip.
pub fn render_clip<R: Rng>(truth: &ClipTruth, spec: &SynthSpec, rng: &mut R) -> (Vec<f32>, Vec<Word>) {
    let duration = rng.random_range(spec.min_duration_sec..=spec.max_duration_sec);
    let n = (duration * SAMPLE_RATE as f64) as usize;
    let words = tile_words(duration, rng);
    let f0 = rng.random_range(130.0..180.0);
    let cutoff = brightness_hz(truth.valence);
    let harmonics: Vec<(f64, f64, f64)> = (1..)
        .map(|k| k as f64 * f0)
        .take_while(|&f| f < 7800.0)
        .map(|f| (f, (-f / cutoff).exp(), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let norm = (harmonics.iter().map(|h| h.1 * h.1).sum::<f64>() / 2.0).sqrt();
    let gain = activation_gain(truth.activation) / norm;
    let vibrato = rng.random_range(3.0..6.0);
    let noise = Normal::new(0.0, 0.002).unwrap();
    let sr = SAMPLE_RATE as f64;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let wobble = 1.0 + 0.01 * (2.0 * PI * vibrato * t).sin();
            let voiced: f64 = harmonics
                .iter()
                .map(|&(f, a, ph)| a * (2.0 * PI * f * wobble * t + ph).sin())
                .sum();
            (gain * envelope(&words, t) * voiced + noise.sample(rng)) as f32
        })
        .collect();
    (samples, words)
}

/// Three annotator ratings: truth plus noise from {-0.5, 0, +0.5}, clipped to [1, 5].
pub fn annotate<R: Rng>(rating: u8, rng: &mut R) -> Vec<f64> {
    (0..RATINGS_PER_CLIP)
        .map(|_| (rating as f64 + [-0.5, 0.0, 0.5][rng.random_range(0..3)]).clamp(1.0, 5.0))
        .collect()
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub truths: Vec<ClipTruth>,
}

/// Writes `wav/`, `transcripts/` and `manifest.jsonl` under `dir`.
pub fn generate(spec: &SynthSpec, dir: &Path) -> Result<SynthCorpus> {
    spec.validate()?;
    for sub in ["wav", "transcripts"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let plans = plan(spec);
    let entries = plans
        .par_iter()
        .map(|p| -> Result<ManifestEntry> {
            let mut rng = clip_rng(spec.seed, p.index);
            let t = &p.truth;
            let (samples, words) = render_clip(t, spec, &mut rng);
            let wav = PathBuf::from("wav").join(format!("{}.wav", t.id));
            let transcript = PathBuf::from("transcripts").join(format!("{}.jsonl", t.id));
            write_wav(&dir.join(&wav), &samples)?;
            write_transcript(&dir.join(&transcript), &words)?;
            let (valence, activation) = if t.labeled {
                (Some(annotate(t.valence, &mut rng)), Some(annotate(t.activation, &mut rng)))
            } else {
                (None, None)
            };
            Ok(ManifestEntry {
                id: t.id.clone(),
                wav,
                transcript,
                session: t.session.clone(),
                speaker: t.speaker.clone(),
                valence,
                activation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &entries)?;
    log::info!("wrote {} clips to {}", entries.len(), dir.display());
    Ok(SynthCorpus {
        dir: dir.to_path_buf(),
        manifest,
        truths: plans.into_iter().map(|p| p.truth).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::manifest::{load_utterance, read_manifest};
    use crate::audio::spectrogram::{Stft, BANDS};

    fn small() -> SynthSpec {
        SynthSpec {
            n_sessions: 2,
            labeled_per_speaker: 5,
            unlabeled_clips: 3,
            max_duration_sec: 1.5,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn identical_seeds_give_identical_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate(&small(), a.path()).unwrap();
        generate(&small(), b.path()).unwrap();
        let m = fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m, fs::read(b.path().join(MANIFEST_FILE)).unwrap());
        for e in read_manifest(&a.path().join(MANIFEST_FILE)).unwrap() {
            assert_eq!(fs::read(a.path().join(&e.wav)).unwrap(), fs::read(b.path().join(&e.wav)).unwrap());
            assert_eq!(
                fs::read(a.path().join(&e.transcript)).unwrap(),
                fs::read(b.path().join(&e.transcript)).unwrap()
            );
        }
    }

    #[test]
    fn clips_load_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&small(), dir.path()).unwrap();
        let entries = read_manifest(&c.manifest).unwrap();
        assert_eq!(entries.len(), 2 * 2 * 5 + 3);
        for e in &entries {
            let u = load_utterance(e, dir.path()).unwrap();
            assert!(!u.words.is_empty());
            assert!(u.samples.iter().all(|s| s.abs() < 1.0));
            assert!((1.0..=1.5 + 1e-3).contains(&u.duration_sec()));
        }
        assert_eq!(entries.iter().filter(|e| e.valence.is_none()).count(), 3);
    }

    #[test]
    fn annotations_stay_near_truth() {
        let mut rng = clip_rng(1, 1);
        for r in 1..=5u8 {
            for _ in 0..50 {
                let a = annotate(r, &mut rng);
                assert_eq!(a.len(), 3);
                assert!(a.iter().all(|x| (x - r as f64).abs() <= 0.5 && (1.0..=5.0).contains(x)));
            }
        }
    }

    fn band_means(truth: &ClipTruth, seed: u64) -> Vec<f64> {
        let spec = SynthSpec::default();
        let (samples, _) = render_clip(truth, &spec, &mut clip_rng(seed, 0));
        Stft::new().log_spectrogram(&samples).unwrap().band_means()
    }

    fn truth(valence: u8, activation: u8) -> ClipTruth {
        ClipTruth {
            id: "t".into(),
            valence,
            activation,
            session: "S".into(),
            speaker: "S_A".into(),
            labeled: true,
        }
    }

    /// Mean energy above 1 kHz over mean energy below it.
    fn tilt_ratio(m: &[f64]) -> f64 {
        let low: f64 = m[..16].iter().sum::<f64>() / 16.0;
        let high: f64 = m[16..].iter().sum::<f64>() / (BANDS - 16) as f64;
        high / low
    }

    #[test]
    fn extreme_classes_separate_by_band_ratio() {
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for seed in 0..20 {
            let a = (seed % 5) as u8 + 1;
            lo.push(tilt_ratio(&band_means(&truth(1, a), seed)));
            hi.push(tilt_ratio(&band_means(&truth(5, a), 1000 + seed)));
        }
        let max_lo = lo.iter().copied().fold(f64::MIN, f64::max);
        let min_hi = hi.iter().copied().fold(f64::MAX, f64::min);
        assert!(max_lo < min_hi, "{max_lo} vs {min_hi}");
    }

    #[test]
    fn centroid_rule_solves_the_task() {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for seed in 0..100u64 {
            let v = (seed % 5) as u8 + 1;
            let a = ((seed / 5) % 5) as u8 + 1;
            let m = band_means(&truth(v, a), seed);
            if seed < 50 { train.push((v, m)) } else { test.push((v, m)) }
        }
        let centroids: Vec<Vec<f64>> = (1..=5u8)
            .map(|v| {
                let rows: Vec<&Vec<f64>> = train.iter().filter(|r| r.0 == v).map(|r| &r.1).collect();
                (0..BANDS).map(|b| rows.iter().map(|r| r[b]).sum::<f64>() / rows.len() as f64).collect()
            })
            .collect();
        let correct = test
            .iter()
            .filter(|(v, m)| {
                let d = |c: &Vec<f64>| c.iter().zip(m.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..5).min_by(|&i, &j| d(&centroids[i]).total_cmp(&d(&centroids[j]))).unwrap();
                best as u8 + 1 == *v
            })
            .count();
        assert!(correct as f64 / test.len() as f64 >= 0.95, "{correct}/{}", test.len());
    }
}
