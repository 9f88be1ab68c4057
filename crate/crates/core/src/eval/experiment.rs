//! Per-fold training with early stopping, and the five-fold experiment.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::early_stop::{EarlyStopper, StopPoint};
use super::folds::{make_folds, FoldSplit};
use super::metrics::{confusion_matrix, expected_value_rho, unweighted_accuracy, Classes, Confusion};
use crate::audio::crop::word_centered_crop;
use crate::audio::spectrogram::{Normalizer, BANDS};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{Clip, Corpus, Example};
use crate::error::{Error, Result};
use crate::labels::{FuzzyLabel, NUM_CLASSES};
use crate::model::{Model, ModelKind};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};
use crate::train::{EpochSummary, TrainData, TrainState};

const EVAL_STREAM_BASE: u64 = 1 << 32;

/// Training seed of a fold, decorrelated from its neighbours.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add((fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Examples of one fold, normalised with statistics from its training
/// clips and the unlabeled corpus.
#[derive(Clone, Debug)]
pub struct FoldData {
    pub split: FoldSplit,
    pub normalizer: Normalizer,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    /// Unlabeled-corpus clips; training clips join them in the adversarial pool.
    pub unlabeled: Vec<Example>,
}

impl FoldData {
    pub fn new(corpus: &Corpus, split: &FoldSplit) -> Result<Self> {
        let in_train = |c: &&Clip| c.is_labeled() && split.train_sessions.contains(&c.session);
        let train_clips: Vec<&Clip> = corpus.clips.iter().filter(in_train).collect();
        let unlabeled_clips: Vec<&Clip> = corpus.unlabeled().collect();
        let normalizer = Normalizer::fit(
            train_clips
                .iter()
                .chain(&unlabeled_clips)
                .map(|c| &c.log_spec),
        )?;
        let of_speaker = |s: &str| -> Vec<Example> {
            corpus
                .labeled()
                .filter(|c| c.speaker == s)
                .map(|c| Example::new(c, &normalizer))
                .collect()
        };
        let data = Self {
            split: split.clone(),
            train: train_clips.iter().map(|c| Example::new(c, &normalizer)).collect(),
            validation: of_speaker(&split.validation_speaker),
            test: of_speaker(&split.test_speaker),
            unlabeled: unlabeled_clips.iter().map(|c| Example::new(c, &normalizer)).collect(),
            normalizer,
        };
        for (name, set) in [("training", &data.train), ("validation", &data.validation), ("test", &data.test)] {
            if set.is_empty() {
                return Err(Error::Protocol(format!("fold {}: empty {name} set", split.index)));
            }
        }
        Ok(data)
    }

    /// Labeled training examples and the pool of unlabeled crops: the
    /// unlabeled corpus followed by the training clips.
    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            labeled: self.train.iter().collect(),
            unlabeled: self.unlabeled.iter().chain(&self.train).collect(),
        }
    }
}

/// Fixed crops and targets for repeated evaluation.
#[derive(Clone, Debug)]
pub struct EvalSet<T> {
    pub crops: Tensor<T>,
    pub targets: Vec<FuzzyLabel>,
}

/// One word-centred crop per example.
pub fn eval_set<T: Scalar>(examples: &[Example], width: usize, rng: &mut ChaCha8Rng) -> Result<EvalSet<T>> {
    let mut data = Vec::with_capacity(examples.len() * BANDS * width);
    for ex in examples {
        let crop = word_centered_crop(&ex.spec, &ex.words, width, rng)?;
        data.extend(crop.values.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Ok(EvalSet {
        crops: Tensor::new([examples.len(), 1, BANDS, width], data)?,
        targets: examples.iter().map(|e| e.valence.expect("labeled example")).collect(),
    })
}

/// Test-set scores of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub acc5: f64,
    pub acc3: f64,
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_note: Option<String>,
    pub confusion5: Confusion,
}

pub fn score<T: Scalar>(model: &Model, store: &ParamStore<T>, set: &EvalSet<T>, chunk: usize) -> Result<Scores> {
    let preds = model.predict(store, &set.crops, chunk)?;
    score_predictions(&preds.valence, &set.targets)
}

pub fn score_predictions(preds: &[[f64; NUM_CLASSES]], targets: &[FuzzyLabel]) -> Result<Scores> {
    let corr = expected_value_rho(preds, targets)?;
    Ok(Scores {
        acc5: unweighted_accuracy(preds, targets, Classes::Five)?,
        acc3: unweighted_accuracy(preds, targets, Classes::Three)?,
        rho: corr.rho,
        rho_note: corr.reason,
        confusion5: confusion_matrix(preds, targets)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub held_out_session: String,
    pub validation_speaker: String,
    pub test_speaker: String,
    pub train_clips: usize,
    pub unlabeled_pool: usize,
    pub test_clips: usize,
    #[serde(flatten)]
    pub scores: Scores,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub converged: bool,
    pub validation_trace: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
    pub steps: u64,
    pub numeric_faults: u64,
}

/// A finished fold and its state restored to the best validation epoch.
pub struct FoldRun {
    pub report: FoldReport,
    pub state: TrainState<f32>,
}

/// Trains until early stopping, restores the best weights and scores the
/// test speaker. With `checkpoints`, saves every `checkpoint_every` epochs
/// and the restored weights under `best/`.
pub fn run_fold(run: &RunConfig, corpus: &Corpus, split: &FoldSplit, checkpoints: Option<&Path>) -> Result<FoldRun> {
    let data = FoldData::new(corpus, split)?;
    let kind = run.model.kind;
    if kind.is_adversarial() && data.unlabeled.is_empty() {
        return Err(Error::Config(format!("{kind} needs unlabeled clips in the corpus")));
    }
    let width = run.model.crop_width;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(run.seed);
    eval_rng.set_stream(EVAL_STREAM_BASE + split.index as u64);
    let val = eval_set::<f32>(&data.validation, width, &mut eval_rng)?;
    let test = eval_set::<f32>(&data.test, width, &mut eval_rng)?;

    let mut state = TrainState::<f32>::new(&run.model, fold_seed(run.seed, split.index))?;
    let train = data.train_data();
    let mut stopper = EarlyStopper::new(run.patience, run.max_epochs);
    let mut best = (state.model.clone(), state.store.clone());
    let (mut trace, mut epochs) = (Vec::new(), Vec::new());
    let stop: StopPoint = loop {
        let summary = state.run_epoch(&train)?;
        let preds = state.model.predict(&state.store, &val.crops, run.eval_chunk)?;
        let acc = unweighted_accuracy(&preds.valence, &val.targets, Classes::Five)?;
        log::info!(
            "{kind} fold {} epoch {}: l_val {:.4} validation acc5 {:.4}",
            split.index,
            summary.epoch,
            summary.l_val,
            acc
        );
        let epoch = summary.epoch;
        trace.push(acc);
        epochs.push(summary);
        let verdict = stopper.push(acc);
        if verdict.improved {
            best = (state.model.clone(), state.store.clone());
        }
        if let Some(dir) = checkpoints {
            if run.checkpoint_every > 0 && epoch % run.checkpoint_every == 0 {
                checkpoint::save(&dir.join(format!("epoch{epoch:04}")), &state.model, &state.store, epoch, state.step)?;
            }
        }
        if let Some(s) = verdict.stop {
            break s;
        }
    };
    (state.model, state.store) = best;
    if let Some(dir) = checkpoints {
        checkpoint::save(&dir.join("best"), &state.model, &state.store, stop.best_epoch, state.step)?;
    }
    let scores = score(&state.model, &state.store, &test, run.eval_chunk)?;
    let report = FoldReport {
        fold: split.index,
        held_out_session: split.held_out_session.clone(),
        validation_speaker: split.validation_speaker.clone(),
        test_speaker: split.test_speaker.clone(),
        train_clips: data.train.len(),
        unlabeled_pool: train.unlabeled.len(),
        test_clips: data.test.len(),
        scores,
        best_epoch: stop.best_epoch,
        stop_epoch: stop.stop_epoch,
        converged: stop.converged,
        validation_trace: trace,
        epochs,
        steps: state.step,
        numeric_faults: state.faults,
    };
    Ok(FoldRun { report, state })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub acc5: f64,
    pub acc3: f64,
    /// Mean over folds where the correlation is defined.
    pub rho: Option<f64>,
}

impl Aggregate {
    pub fn of(folds: &[FoldReport]) -> Option<Self> {
        if folds.is_empty() {
            return None;
        }
        let n = folds.len() as f64;
        let rhos: Vec<f64> = folds.iter().filter_map(|f| f.scores.rho).collect();
        Some(Self {
            acc5: folds.iter().map(|f| f.scores.acc5).sum::<f64>() / n,
            acc3: folds.iter().map(|f| f.scores.acc3).sum::<f64>() / n,
            rho: (!rhos.is_empty()).then(|| rhos.iter().sum::<f64>() / rhos.len() as f64),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub model: ModelKind,
    pub config: RunConfig,
    pub build: String,
    pub folds: Vec<FoldReport>,
    pub aggregate: Option<Aggregate>,
    /// Set when a fold failed; completed folds are kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// A failed experiment with the reports of the folds that finished.
#[derive(Debug)]
pub struct ExperimentFailure {
    pub report: ExperimentReport,
    pub error: Error,
}

impl fmt::Display for ExperimentFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "experiment failed after {} fold(s): {}", self.report.folds.len(), self.error)
    }
}

impl std::error::Error for ExperimentFailure {}

/// Runs every fold of the corpus. Folds run in parallel; results are
/// ordered by fold index.
pub fn run_experiment(
    run: &RunConfig,
    corpus: &Corpus,
    build: &str,
    checkpoints: Option<&Path>,
) -> std::result::Result<ExperimentReport, ExperimentFailure> {
    let mut report = ExperimentReport {
        model: run.model.kind,
        config: run.clone(),
        build: build.to_string(),
        folds: Vec::new(),
        aggregate: None,
        failure: None,
    };
    let folds = match make_folds(corpus.labeled().map(|c| (c.session.as_str(), c.speaker.as_str()))) {
        Ok(f) => f,
        Err(error) => {
            report.failure = Some(error.to_string());
            return Err(ExperimentFailure { report, error });
        }
    };
    let results: Vec<Result<FoldReport>> = folds
        .par_iter()
        .map(|split| {
            let dir = checkpoints.map(|d| d.join(format!("fold{}", split.index)));
            run_fold(run, corpus, split, dir.as_deref()).map(|r| r.report)
        })
        .collect();
    let mut first_error = None;
    for r in results {
        match r {
            Ok(f) => report.folds.push(f),
            Err(e) if first_error.is_none() => first_error = Some(e),
            Err(e) => log::error!("{e}"),
        }
    }
    report.aggregate = Aggregate::of(&report.folds);
    match first_error {
        None => Ok(report),
        Some(error) => {
            report.failure = Some(error.to_string());
            Err(ExperimentFailure { report, error })
        }
    }
}
