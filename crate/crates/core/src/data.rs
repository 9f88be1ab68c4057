//! In-memory corpus: log spectrograms, transcripts and labels, plus batching
//! of word-centred crops into model inputs.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::audio::cache::{read_cache, write_cache};
use crate::audio::crop::word_centered_crop;
use crate::audio::manifest::{load_utterance, read_manifest, CorpusTag, Word};
use crate::audio::spectrogram::{LogSpectrogram, Normalizer, Spectrogram, Stft, BANDS};
use crate::error::{Error, Result};
use crate::labels::{FuzzyLabel, NUM_CLASSES};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One utterance after feature extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub session: String,
    pub speaker: String,
    pub tag: CorpusTag,
    pub log_spec: LogSpectrogram,
    pub words: Vec<Word>,
    pub valence: Option<FuzzyLabel>,
    pub activation: Option<FuzzyLabel>,
}

impl Clip {
    pub fn is_labeled(&self) -> bool {
        self.tag == CorpusTag::Labeled
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub clips: Vec<Clip>,
}

impl Corpus {
    /// Loads every manifest entry. With `cache_dir`, log spectrograms are read
    /// from `<id>.vgs` when present and written there otherwise.
    pub fn load(manifest: &Path, cache_dir: Option<&Path>) -> Result<Self> {
        let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let entries = read_manifest(manifest)?;
        if let Some(dir) = cache_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let clips = entries
            .par_iter()
            .map_init(Stft::new, |stft, entry| -> Result<Clip> {
                let utt = load_utterance(entry, &base)?;
                let cached = cache_dir.map(|d| d.join(format!("{}.vgs", entry.id)));
                let log_spec = match &cached {
                    Some(p) if p.exists() => {
                        let f = File::open(p).map_err(|e| Error::io(p, e))?;
                        read_cache(BufReader::new(f))?
                    }
                    _ => {
                        let spec = stft.log_spectrogram(&utt.samples).map_err(|e| match e {
                            Error::Ingestion { field, reason } => Error::Ingestion {
                                field,
                                reason: format!("utterance {}: {reason}", entry.id),
                            },
                            other => other,
                        })?;
                        if let Some(p) = &cached {
                            let f = File::create(p).map_err(|e| Error::io(p, e))?;
                            write_cache(&spec, BufWriter::new(f))?;
                        }
                        spec
                    }
                };
                Ok(Clip {
                    id: utt.id.clone(),
                    session: utt.session_id.clone(),
                    speaker: utt.speaker_id.clone(),
                    tag: utt.corpus_tag,
                    valence: utt.valence_label(),
                    activation: utt.activation_label(),
                    words: utt.words,
                    log_spec,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clips })
    }

    pub fn labeled(&self) -> impl Iterator<Item = &Clip> {
        self.clips.iter().filter(|c| c.is_labeled())
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &Clip> {
        self.clips.iter().filter(|c| !c.is_labeled())
    }
}

/// Cache file paths written by [`Corpus::load`].
pub fn cache_path(cache_dir: &Path, id: &str) -> PathBuf {
    cache_dir.join(format!("{id}.vgs"))
}

/// A clip normalised for one fold.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub spec: Spectrogram,
    pub words: Vec<Word>,
    pub valence: Option<FuzzyLabel>,
    pub activation: Option<FuzzyLabel>,
    pub speaker: String,
}

impl Example {
    pub fn new(clip: &Clip, norm: &Normalizer) -> Self {
        Self {
            spec: norm.normalize(&clip.log_spec, &clip.id),
            words: clip.words.clone(),
            valence: clip.valence,
            activation: clip.activation,
            speaker: clip.speaker.clone(),
        }
    }

    pub fn valence_class(&self) -> usize {
        self.valence.expect("labeled example").primary_class()
    }
}

/// Stacks one crop per example into `[n, 1, 128, w]`.
pub fn crop_batch<T: Scalar, R: Rng + ?Sized>(
    examples: &[&Example],
    width: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(examples.len() * BANDS * width);
    for ex in examples {
        let crop = word_centered_crop(&ex.spec, &ex.words, width, rng)?;
        data.extend(crop.values.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new([examples.len(), 1, BANDS, width], data)
}

/// `[n, 5]` target rows.
pub fn label_batch<T: Scalar>(labels: impl IntoIterator<Item = FuzzyLabel>) -> Result<Tensor<T>> {
    let data: Vec<T> = labels
        .into_iter()
        .flat_map(|l| l.probs().map(T::from_f64_lossy))
        .collect();
    let n = data.len() / NUM_CLASSES;
    Tensor::new([n, NUM_CLASSES], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_corpus(dir: &Path) -> PathBuf {
        let spec = SynthSpec {
            n_sessions: 1,
            labeled_per_speaker: 3,
            unlabeled_clips: 2,
            max_duration_sec: 1.2,
            ..SynthSpec::default()
        };
        generate(&spec, dir).unwrap().manifest
    }

    #[test]
    fn cached_load_matches_fresh_load() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_corpus(dir.path());
        let cache = dir.path().join("cache");
        let fresh = Corpus::load(&manifest, None).unwrap();
        let first = Corpus::load(&manifest, Some(&cache)).unwrap();
        assert!(cache_path(&cache, &fresh.clips[0].id).exists());
        let second = Corpus::load(&manifest, Some(&cache)).unwrap();
        assert_eq!(fresh, first);
        assert_eq!(first, second);
        assert_eq!(fresh.labeled().count(), 6);
        assert_eq!(fresh.unlabeled().count(), 2);
    }

    #[test]
    fn batches_have_model_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus::load(&tiny_corpus(dir.path()), None).unwrap();
        let norm = Normalizer::fit(corpus.clips.iter().map(|c| &c.log_spec)).unwrap();
        let examples: Vec<Example> = corpus.labeled().map(|c| Example::new(c, &norm)).collect();
        let refs: Vec<&Example> = examples.iter().collect();
        let x = crop_batch::<f32, _>(&refs, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(x.shape(), &[6, 1, 128, 64]);
        assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let y = label_batch::<f32>(examples.iter().map(|e| e.valence.unwrap())).unwrap();
        assert_eq!(y.shape(), &[6, 5]);
    }
}
