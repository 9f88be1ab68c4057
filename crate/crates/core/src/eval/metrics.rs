//! Unweighted accuracy with split-label acceptance, expected-value
//! correlation, and confusion matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{argmax, expected_value, pool_class, FuzzyLabel, NUM_CLASSES, NUM_POOLED};

/// Scoring granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classes {
    Five,
    Three,
}

impl Classes {
    pub fn count(self) -> usize {
        match self {
            Classes::Five => NUM_CLASSES,
            Classes::Three => NUM_POOLED,
        }
    }

    fn map(self, class: usize) -> usize {
        match self {
            Classes::Five => class,
            Classes::Three => pool_class(class),
        }
    }
}

/// Predicted class and accepted target classes at the requested granularity.
/// The 3-class decision pools the 5-class argmax.
fn resolve(pred: &[f64; NUM_CLASSES], target: &FuzzyLabel, classes: Classes) -> (usize, Vec<usize>) {
    let p = classes.map(argmax(pred));
    let mut accepted: Vec<usize> = target.argmax_set().into_iter().map(|c| classes.map(c)).collect();
    accepted.dedup();
    (p, accepted)
}

/// A prediction is correct when its argmax lies in the target's tied set.
pub fn sample_correct(pred: &[f64; NUM_CLASSES], target: &FuzzyLabel, classes: Classes) -> bool {
    let (p, accepted) = resolve(pred, target, classes);
    accepted.contains(&p)
}

/// Mean per-class recall over non-empty classes. A target tied between `k`
/// classes contributes weight `1/k` to each.
pub fn unweighted_accuracy(preds: &[[f64; NUM_CLASSES]], targets: &[FuzzyLabel], classes: Classes) -> Result<f64> {
    check_lengths(preds, targets)?;
    if preds.is_empty() {
        return Err(Error::Protocol("accuracy over an empty test set".into()));
    }
    let n = classes.count();
    let (mut total, mut correct) = (vec![0.0; n], vec![0.0; n]);
    for (pred, target) in preds.iter().zip(targets) {
        let (p, accepted) = resolve(pred, target, classes);
        let w = 1.0 / accepted.len() as f64;
        let hit = accepted.contains(&p);
        for &c in &accepted {
            total[c] += w;
            if hit {
                correct[c] += w;
            }
        }
    }
    let recalls: Vec<f64> = (0..n).filter(|&c| total[c] > 0.0).map(|c| correct[c] / total[c]).collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

fn check_lengths(preds: &[[f64; NUM_CLASSES]], targets: &[FuzzyLabel]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    Ok(())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation, or the reason it is undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
}

/// Correlation between expected predicted ratings and target mean ratings.
pub fn expected_value_rho(preds: &[[f64; NUM_CLASSES]], targets: &[FuzzyLabel]) -> Result<Correlation> {
    check_lengths(preds, targets)?;
    if preds.len() < 2 {
        return Ok(Correlation {
            rho: None,
            reason: Some(format!("{} samples; at least 2 needed", preds.len())),
        });
    }
    let v: Vec<f64> = preds.iter().map(|p| expected_value(p)).collect();
    let t: Vec<f64> = targets.iter().map(FuzzyLabel::mean_rating).collect();
    Ok(match pearson(&v, &t) {
        Some(rho) => Correlation { rho: Some(rho), reason: None },
        None => Correlation {
            rho: None,
            reason: Some("zero variance in predictions or targets".into()),
        },
    })
}

/// Row-normalised 5×5 matrix; rows are targets, columns predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub rows: [[f64; NUM_CLASSES]; NUM_CLASSES],
    /// 0-based target classes with no samples; their rows are zero.
    pub empty_rows: Vec<usize>,
}

pub fn confusion_matrix(preds: &[[f64; NUM_CLASSES]], targets: &[FuzzyLabel]) -> Result<Confusion> {
    check_lengths(preds, targets)?;
    let mut rows = [[0.0; NUM_CLASSES]; NUM_CLASSES];
    for (pred, target) in preds.iter().zip(targets) {
        let p = argmax(pred);
        let tied = target.argmax_set();
        let w = 1.0 / tied.len() as f64;
        for t in tied {
            rows[t][p] += w;
        }
    }
    let mut empty_rows = Vec::new();
    for (i, row) in rows.iter_mut().enumerate() {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        } else {
            empty_rows.push(i);
        }
    }
    Ok(Confusion { rows, empty_rows })
}
