//! Fuzzy Likert labels, valence class balancing, and 5→3 pooling.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 5;
pub const NUM_POOLED: usize = 3;

/// Entries within this distance of the row maximum count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// A 5-point rating spread over adjacent classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; NUM_CLASSES]", into = "[f64; NUM_CLASSES]")]
pub struct FuzzyLabel {
    probs: [f64; NUM_CLASSES],
}

impl FuzzyLabel {
    /// Linear interpolation between `floor(r)` and `ceil(r)`:
    /// 4.5 → [0,0,0,0.5,0.5].
    pub fn encode(rating: f64) -> Result<Self> {
        if !(1.0..=5.0).contains(&rating) {
            return Err(Error::Validation(format!(
                "rating {rating} outside the 1..=5 Likert range"
            )));
        }
        let lower = rating.floor();
        let frac = rating - lower;
        let lo = lower as usize - 1;
        let mut probs = [0.0; NUM_CLASSES];
        probs[lo] = 1.0 - frac;
        if frac > 0.0 {
            probs[lo + 1] = frac;
        }
        Ok(Self { probs })
    }

    /// Mean of the annotator ratings, then [`FuzzyLabel::encode`].
    pub fn from_annotators(ratings: &[f64]) -> Result<Self> {
        Self::encode(aggregate(ratings)?)
    }

    pub fn from_probs(probs: [f64; NUM_CLASSES]) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "{probs:?} is not a probability vector"
            )));
        }
        Ok(Self { probs })
    }

    /// One-hot label for a 1-based class.
    pub fn one_hot(class: usize) -> Self {
        assert!((1..=NUM_CLASSES).contains(&class));
        let mut probs = [0.0; NUM_CLASSES];
        probs[class - 1] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64; NUM_CLASSES] {
        &self.probs
    }

    /// `Σ i·p_i` with classes numbered 1..=5.
    pub fn mean_rating(&self) -> f64 {
        expected_value(&self.probs)
    }

    /// 0-based argmax, ties broken toward the lower class.
    pub fn primary_class(&self) -> usize {
        argmax(&self.probs)
    }

    /// 0-based classes sharing the maximum mass (annotator split).
    pub fn argmax_set(&self) -> Vec<usize> {
        argmax_set(&self.probs)
    }
}

impl TryFrom<[f64; NUM_CLASSES]> for FuzzyLabel {
    type Error = Error;

    fn try_from(probs: [f64; NUM_CLASSES]) -> Result<Self> {
        Self::from_probs(probs)
    }
}

impl From<FuzzyLabel> for [f64; NUM_CLASSES] {
    fn from(l: FuzzyLabel) -> Self {
        l.probs
    }
}

/// Mean of annotator ratings.
pub fn aggregate(ratings: &[f64]) -> Result<f64> {
    if ratings.is_empty() {
        return Err(Error::Validation("no annotator ratings".into()));
    }
    if let Some(r) = ratings.iter().find(|r| !(1.0..=5.0).contains(*r)) {
        return Err(Error::Validation(format!("annotator rating {r} outside 1..=5")));
    }
    Ok(ratings.iter().sum::<f64>() / ratings.len() as f64)
}

/// `Σ i·p_i` over 1-based class indices.
pub fn expected_value(probs: &[f64]) -> f64 {
    probs.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn argmax_set(values: &[f64]) -> Vec<usize> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..values.len())
        .filter(|&i| values[i] >= max - TIE_TOLERANCE)
        .collect()
}

/// `[p1+p2, p3, p4+p5]`: negative / neutral / positive.
pub fn pool_to_3(probs: &[f64; NUM_CLASSES]) -> [f64; NUM_POOLED] {
    [probs[0] + probs[1], probs[2], probs[3] + probs[4]]
}

/// Pooled class of a 0-based 5-point class.
pub fn pool_class(class: usize) -> usize {
    match class {
        0 | 1 => 0,
        2 => 1,
        3 | 4 => 2,
        _ => panic!("class {class} out of range"),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BalanceSummary {
    pub before: [usize; NUM_CLASSES],
    pub after: [usize; NUM_CLASSES],
    /// 0-based classes with no items, which cannot be balanced.
    pub empty: Vec<usize>,
}

/// Duplicates uniformly chosen members of minority classes until every
/// non-empty class matches the largest. Originals keep their order and the
/// duplicates follow, grouped by class.
pub fn oversample<I: Clone, R: Rng + ?Sized>(
    items: &[I],
    class_of: impl Fn(&I) -> usize,
    rng: &mut R,
) -> (Vec<I>, BalanceSummary) {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, item) in items.iter().enumerate() {
        members[class_of(item)].push(i);
    }
    let before: [usize; NUM_CLASSES] = std::array::from_fn(|c| members[c].len());
    let target = before.iter().copied().max().unwrap_or(0);
    let empty: Vec<usize> = (0..NUM_CLASSES).filter(|&c| before[c] == 0).collect();
    for &c in &empty {
        log::warn!("valence class {} is empty; it stays empty after oversampling", c + 1);
    }

    let mut out = items.to_vec();
    for class in &members {
        if class.is_empty() {
            continue;
        }
        for _ in class.len()..target {
            let &pick = class.choose(rng).expect("non-empty");
            out.push(items[pick].clone());
        }
    }
    let mut after = [0; NUM_CLASSES];
    for item in &out {
        after[class_of(item)] += 1;
    }
    (out, BalanceSummary { before, after, empty })
}
