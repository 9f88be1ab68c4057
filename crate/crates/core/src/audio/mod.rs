//! Audio ingestion, log spectrograms and word-centred crops.

pub mod cache;
pub mod crop;
pub mod manifest;
pub mod spectrogram;
pub mod wav;

pub use crop::{crop_at, word_centered_crop, Crop, PAD_VALUE};
pub use manifest::{load_utterance, read_manifest, CorpusTag, ManifestEntry, Utterance, Word};
pub use spectrogram::{stft_spectrogram, LogSpectrogram, Normalizer, Spectrogram, Stft, BANDS};
pub use wav::{load_wav, write_wav, SAMPLE_RATE};
