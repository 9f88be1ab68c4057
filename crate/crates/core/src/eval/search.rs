//! Random hyper-parameter search scored on the first fold's validation speaker.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::early_stop::EarlyStopper;
use super::experiment::{eval_set, fold_seed, FoldData};
use super::folds::make_folds;
use super::metrics::{unweighted_accuracy, Classes};
use crate::config::RunConfig;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind, BATCH_SIZES, CROP_WIDTHS, FILTER_STEP, LEARNING_RATES, MAX_FILTERS, MIN_FILTERS, MIN_FILTER_SIZE};
use crate::train::TrainState;

/// Draws every hyper-parameter uniformly from its range. Filter sizes are
/// drawn against the widest crop and redrawn when they exceed `w/8`.
pub fn sample_config<R: Rng + ?Sized>(base: &ModelConfig, kind: ModelKind, rng: &mut R) -> ModelConfig {
    let crop_width = *CROP_WIDTHS.choose(rng).unwrap();
    let widest = CROP_WIDTHS.iter().max().unwrap() / 8;
    let filter_size = loop {
        let k = rng.random_range(MIN_FILTER_SIZE..=widest);
        if k <= crop_width / 8 {
            break k;
        }
        log::debug!("filter size {k} exceeds {} for width {crop_width}; resampling", crop_width / 8);
    };
    let steps = (MAX_FILTERS - MIN_FILTERS) / FILTER_STEP;
    ModelConfig {
        kind,
        crop_width,
        filter_size,
        num_filters: MIN_FILTERS + FILTER_STEP * rng.random_range(0..=steps),
        batch_size: *BATCH_SIZES.choose(rng).unwrap(),
        learning_rate: *LEARNING_RATES.choose(rng).unwrap(),
        latent_dim: base.latent_dim,
        shared_dense_dim: base.shared_dense_dim,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trial {
    pub trial: usize,
    pub config: ModelConfig,
    pub validation_accuracy: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchResult {
    pub trials: Vec<Trial>,
    /// Index into `trials`; the earliest trial wins ties.
    pub best: usize,
}

impl SearchResult {
    pub fn best_config(&self) -> &ModelConfig {
        &self.trials[self.best].config
    }
}

/// Best 5-class validation accuracy reached on fold 1 under early stopping.
pub fn validation_objective(run: &RunConfig, data: &FoldData, seed: u64) -> Result<(f64, usize)> {
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
    let val = eval_set::<f32>(&data.validation, run.model.crop_width, &mut eval_rng)?;
    let mut state = TrainState::<f32>::new(&run.model, seed)?;
    let train = data.train_data();
    let mut stopper = EarlyStopper::new(run.patience, run.max_epochs);
    loop {
        state.run_epoch(&train)?;
        let preds = state.model.predict(&state.store, &val.crops, run.eval_chunk)?;
        let acc = unweighted_accuracy(&preds.valence, &val.targets, Classes::Five)?;
        if stopper.push(acc).stop.is_some() {
            let (epoch, best) = stopper.best().expect("at least one epoch");
            return Ok((best, epoch));
        }
    }
}

pub fn random_search(run: &RunConfig, corpus: &Corpus, kind: ModelKind, n_trials: usize, seed: u64) -> Result<SearchResult> {
    if n_trials == 0 {
        return Err(Error::Config("random search needs at least one trial".into()));
    }
    let folds = make_folds(corpus.labeled().map(|c| (c.session.as_str(), c.speaker.as_str())))?;
    let data = FoldData::new(corpus, &folds[0])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_trials);
    for trial in 1..=n_trials {
        let config = sample_config(&run.model, kind, &mut rng);
        let mut trial_run = run.clone();
        trial_run.model = config.clone();
        let (acc, epoch) = validation_objective(&trial_run, &data, fold_seed(seed, trial))?;
        log::info!("trial {trial}/{n_trials}: {config:?} validation acc5 {acc:.4}");
        trials.push(Trial {
            trial,
            config,
            validation_accuracy: acc,
            best_epoch: epoch,
        });
    }
    let best = (0..trials.len())
        .fold(0, |b, i| if trials[i].validation_accuracy > trials[b].validation_accuracy { i } else { b });
    Ok(SearchResult { trials, best })
}

pub fn write_trials_csv(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "trial",
        "kind",
        "crop_width",
        "filter_size",
        "num_filters",
        "batch_size",
        "learning_rate",
        "validation_accuracy",
        "best_epoch",
    ])?;
    for t in trials {
        let c = &t.config;
        w.write_record([
            t.trial.to_string(),
            c.kind.to_string(),
            c.crop_width.to_string(),
            c.filter_size.to_string(),
            c.num_filters.to_string(),
            c.batch_size.to_string(),
            c.learning_rate.to_string(),
            t.validation_accuracy.to_string(),
            t.best_epoch.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn samples_stay_in_range(seed in any::<u64>()) {
            let base = ModelConfig::desk(ModelKind::BasicCnn);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..20 {
                let c = sample_config(&base, ModelKind::MultitaskDcgan, &mut rng);
                prop_assert!(c.filter_size >= 2 && c.filter_size <= c.crop_width / 8);
                prop_assert!((c.num_filters - 32) % 4 == 0 && c.num_filters <= 88);
                prop_assert!(c.validate().is_ok());
            }
        }
    }

    #[test]
    fn every_filter_count_is_reachable() {
        let base = ModelConfig::desk(ModelKind::BasicCnn);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..2000 {
            seen.insert(sample_config(&base, ModelKind::BasicCnn, &mut rng).num_filters);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), (32..=88).step_by(4).collect::<Vec<_>>());
    }

    #[test]
    fn trials_csv_has_one_row_per_trial() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.csv");
        let t = Trial {
            trial: 1,
            config: ModelConfig::desk(ModelKind::BasicCnn),
            validation_accuracy: 0.5,
            best_epoch: 3,
        };
        write_trials_csv(&path, &[t.clone(), Trial { trial: 2, ..t }]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("1,BasicCNN,64,4,32,64,0.001,0.5,3"));
    }
}
