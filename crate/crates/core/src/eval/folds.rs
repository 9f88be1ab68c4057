//! Leave-one-session-out folds with a validation and a test speaker.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    /// 1-based.
    pub index: usize,
    pub held_out_session: String,
    pub train_sessions: Vec<String>,
    pub train_speakers: Vec<String>,
    pub validation_speaker: String,
    pub test_speaker: String,
}

impl FoldSplit {
    pub fn check_disjoint(&self) -> Result<()> {
        let train: BTreeSet<&str> = self.train_speakers.iter().map(String::as_str).collect();
        for s in [&self.validation_speaker, &self.test_speaker] {
            if train.contains(s.as_str()) {
                return Err(Error::Protocol(format!(
                    "fold {}: speaker {s} appears in training and held-out data",
                    self.index
                )));
            }
        }
        if self.validation_speaker == self.test_speaker {
            return Err(Error::Protocol(format!(
                "fold {}: validation and test share speaker {}",
                self.index, self.validation_speaker
            )));
        }
        Ok(())
    }
}

/// One fold per session, in session order. Each session must have exactly
/// two speakers; the lexicographically first validates, the other tests.
pub fn make_folds<'a>(utterances: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Vec<FoldSplit>> {
    let mut sessions: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (session, speaker) in utterances {
        sessions.entry(session).or_default().insert(speaker);
    }
    if sessions.len() < 2 {
        return Err(Error::Protocol(format!(
            "{} labeled session(s); leave-one-session-out needs at least 2",
            sessions.len()
        )));
    }
    for (session, speakers) in &sessions {
        if speakers.len() != 2 {
            return Err(Error::Protocol(format!(
                "session {session} has {} speakers; exactly 2 are required",
                speakers.len()
            )));
        }
    }
    let folds: Vec<FoldSplit> = sessions
        .iter()
        .enumerate()
        .map(|(i, (&held, speakers))| {
            let mut sp = speakers.iter();
            let validation_speaker = sp.next().unwrap().to_string();
            let test_speaker = sp.next().unwrap().to_string();
            let others = sessions.iter().filter(|(s, _)| **s != held);
            FoldSplit {
                index: i + 1,
                held_out_session: held.to_string(),
                train_sessions: others.clone().map(|(s, _)| s.to_string()).collect(),
                train_speakers: others.flat_map(|(_, sp)| sp.iter().map(|s| s.to_string())).collect(),
                validation_speaker,
                test_speaker,
            }
        })
        .collect();
    for f in &folds {
        f.check_disjoint()?;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn five_sessions() -> Vec<(String, String)> {
        (1..=5)
            .flat_map(|s| {
                ["B", "A"].into_iter().flat_map(move |p| {
                    (0..3).map(move |_| (format!("Ses{s:02}"), format!("Ses{s:02}_{p}")))
                })
            })
            .collect()
    }

    fn folds_of(pairs: &[(String, String)]) -> Result<Vec<FoldSplit>> {
        make_folds(pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())))
    }

    #[test]
    fn five_sessions_give_five_folds() {
        let folds = folds_of(&five_sessions()).unwrap();
        assert_eq!(folds.len(), 5);
        for (k, f) in folds.iter().enumerate() {
            assert_eq!(f.index, k + 1);
            assert_eq!(f.held_out_session, format!("Ses{:02}", k + 1));
            assert_eq!(f.validation_speaker, format!("Ses{:02}_A", k + 1));
            assert_eq!(f.test_speaker, format!("Ses{:02}_B", k + 1));
            assert_eq!(f.train_sessions.len(), 4);
            assert_eq!(f.train_speakers.len(), 8);
            assert!(!f.train_sessions.contains(&f.held_out_session));
        }
    }

    #[test]
    fn test_speakers_cover_each_session_once() {
        let folds = folds_of(&five_sessions()).unwrap();
        let tests: BTreeSet<_> = folds.iter().map(|f| &f.test_speaker[..5]).collect();
        assert_eq!(tests.len(), 5);
    }

    #[test]
    fn session_with_three_speakers_is_rejected() {
        let mut pairs = five_sessions();
        pairs.push(("Ses02".into(), "Ses02_C".into()));
        assert!(matches!(folds_of(&pairs), Err(Error::Protocol(_))));
    }

    #[test]
    fn speaker_shared_across_sessions_is_rejected() {
        let mut pairs = five_sessions();
        for p in pairs.iter_mut().filter(|p| p.1 == "Ses03_A") {
            p.1 = "Ses01_A".into();
        }
        assert!(matches!(folds_of(&pairs), Err(Error::Protocol(_))));
    }
}
