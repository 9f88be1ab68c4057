//! Session folds, early stopping, metrics, search and reporting.

pub mod early_stop;
pub mod experiment;
pub mod folds;
pub mod metrics;
pub mod report;
pub mod search;

pub use early_stop::{early_stop, EarlyStopper, StopPoint, Verdict};
pub use experiment::{run_experiment, run_fold, Aggregate, ExperimentFailure, ExperimentReport, FoldData, FoldReport, Scores};
pub use folds::{make_folds, FoldSplit};
pub use metrics::{confusion_matrix, expected_value_rho, sample_correct, unweighted_accuracy, Classes, Confusion, Correlation};
pub use search::{random_search, sample_config, write_trials_csv, SearchResult, Trial};
