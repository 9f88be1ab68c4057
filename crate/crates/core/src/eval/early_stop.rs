//! Patience-based early stopping over per-epoch validation accuracy.

use serde::{Deserialize, Serialize};

pub const DEFAULT_PATIENCE: usize = 5;
pub const DEFAULT_MAX_EPOCHS: usize = 200;

/// Epochs are numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopPoint {
    pub best_epoch: usize,
    pub stop_epoch: usize,
    /// False when the epoch cap ended the run.
    pub converged: bool,
}

/// Incremental form of [`early_stop`].
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    max_epochs: usize,
    epoch: usize,
    best: Option<(usize, f64)>,
    run: usize,
    stopped: Option<StopPoint>,
}

/// Outcome of reporting one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verdict {
    /// The epoch matches or beats the best; keep its weights.
    pub improved: bool,
    pub stop: Option<StopPoint>,
}

impl EarlyStopper {
    pub fn new(patience: usize, max_epochs: usize) -> Self {
        assert!(patience > 0 && max_epochs > 0);
        Self {
            patience,
            max_epochs,
            epoch: 0,
            best: None,
            run: 0,
            stopped: None,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn push(&mut self, accuracy: f64) -> Verdict {
        if let Some(s) = self.stopped {
            return Verdict { improved: false, stop: Some(s) };
        }
        self.epoch += 1;
        let mut improved = false;
        match self.best {
            Some((_, b)) if accuracy < b => self.run += 1,
            _ => {
                self.best = Some((self.epoch, accuracy));
                self.run = 0;
                improved = true;
            }
        }
        let best_epoch = self.best.map_or(self.epoch, |b| b.0);
        let converged = self.run >= self.patience;
        if converged || self.epoch >= self.max_epochs {
            if !converged {
                log::warn!("no early stop within {} epochs", self.max_epochs);
            }
            self.stopped = Some(StopPoint {
                best_epoch,
                stop_epoch: self.epoch,
                converged,
            });
        }
        Verdict { improved, stop: self.stopped }
    }

    /// Final stop point once the run has ended.
    pub fn finished(&self) -> Option<StopPoint> {
        self.stopped
    }
}

/// Stops once `patience` consecutive epochs after the best are strictly
/// lower; a value at or above the best becomes the new best and restarts
/// the search, so the latest epoch of a plateau is kept. Returns `None` if the trace ends
/// before either the rule or `max_epochs` triggers.
pub fn early_stop(trace: &[f64], patience: usize, max_epochs: usize) -> Option<StopPoint> {
    let mut s = EarlyStopper::new(patience, max_epochs);
    for &acc in trace {
        s.push(acc);
        if let Some(p) = s.finished() {
            return Some(p);
        }
    }
    None
}
