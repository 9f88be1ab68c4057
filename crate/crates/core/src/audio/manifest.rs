//! JSON-lines corpus manifests, word transcripts and in-memory utterances.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::wav::{load_wav, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::labels::FuzzyLabel;

pub const RATINGS_PER_CLIP: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Word {
    #[serde(rename = "t")]
    pub token: String,
    #[serde(rename = "s")]
    pub start: f64,
    #[serde(rename = "e")]
    pub end: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusTag {
    Labeled,
    Unlabeled,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub wav: PathBuf,
    pub transcript: PathBuf,
    pub session: String,
    pub speaker: String,
    pub valence: Option<Vec<f64>>,
    pub activation: Option<Vec<f64>>,
}

impl ManifestEntry {
    pub fn tag(&self) -> CorpusTag {
        if self.valence.is_some() || self.activation.is_some() {
            CorpusTag::Labeled
        } else {
            CorpusTag::Unlabeled
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub samples: Vec<f32>,
    pub words: Vec<Word>,
    pub annotator_valence: Option<Vec<f64>>,
    pub annotator_activation: Option<Vec<f64>>,
    pub corpus_tag: CorpusTag,
    pub session_id: String,
    pub speaker_id: String,
}

impl Utterance {
    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    pub fn validate(&self) -> Result<()> {
        let dur = self.duration_sec();
        for (i, w) in self.words.iter().enumerate() {
            if !(w.start < w.end) {
                return Err(self.ingest("words", format!("word {i} has start {} >= end {}", w.start, w.end)));
            }
            if w.start < 0.0 || w.end > dur + 1e-9 {
                return Err(self.ingest(
                    "words",
                    format!("word {i} [{}, {}] outside clip of {dur:.3} s", w.start, w.end),
                ));
            }
        }
        match (&self.annotator_valence, &self.annotator_activation, self.corpus_tag) {
            (Some(v), Some(a), CorpusTag::Labeled) => {
                for (field, r) in [("valence", v), ("activation", a)] {
                    if r.len() != RATINGS_PER_CLIP {
                        return Err(self.ingest(field, format!("expected {RATINGS_PER_CLIP} ratings, got {}", r.len())));
                    }
                    if let Some(x) = r.iter().find(|x| !(1.0..=5.0).contains(*x)) {
                        return Err(self.ingest(field, format!("rating {x} outside 1..=5")));
                    }
                }
            }
            (None, None, CorpusTag::Unlabeled) => {}
            (None, _, CorpusTag::Labeled) => return Err(self.ingest("valence", "labeled clip without valence ratings".into())),
            (_, None, CorpusTag::Labeled) => {
                return Err(self.ingest("activation", "labeled clip without activation ratings".into()))
            }
            _ => return Err(self.ingest("corpus_tag", "unlabeled clip carries ratings".into())),
        }
        Ok(())
    }

    pub fn valence_label(&self) -> Option<FuzzyLabel> {
        self.annotator_valence
            .as_deref()
            .map(|r| FuzzyLabel::from_annotators(r).expect("validated ratings"))
    }

    pub fn activation_label(&self) -> Option<FuzzyLabel> {
        self.annotator_activation
            .as_deref()
            .map(|r| FuzzyLabel::from_annotators(r).expect("validated ratings"))
    }

    fn ingest(&self, field: &str, reason: String) -> Error {
        Error::Ingestion {
            field: field.into(),
            reason: format!("utterance {}: {reason}", self.id),
        }
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Ingestion {
            field: what.into(),
            reason: format!("{}:{}: {e}", path.display(), n + 1),
        })?;
        out.push(item);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    read_jsonl(path, "manifest")
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    write_jsonl(path, entries)
}

pub fn read_transcript(path: &Path) -> Result<Vec<Word>> {
    read_jsonl(path, "transcript")
}

pub fn write_transcript(path: &Path, words: &[Word]) -> Result<()> {
    write_jsonl(path, words)
}

/// Loads audio and transcript for one entry and validates the result.
pub fn load_utterance(entry: &ManifestEntry, base_dir: &Path) -> Result<Utterance> {
    let utt = Utterance {
        id: entry.id.clone(),
        samples: load_wav(&base_dir.join(&entry.wav))?,
        words: read_transcript(&base_dir.join(&entry.transcript))?,
        annotator_valence: entry.valence.clone(),
        annotator_activation: entry.activation.clone(),
        corpus_tag: entry.tag(),
        session_id: entry.session.clone(),
        speaker_id: entry.speaker.clone(),
    };
    utt.validate()?;
    Ok(utt)
}
