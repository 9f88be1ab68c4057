//! Adversarial and classifier losses.
//!
//! Every probability is clamped to `[1e-7, 1 - 1e-7]` before its logarithm.

use crate::error::{Error, Result};
use crate::labels::NUM_CLASSES;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const PROB_CLAMP: f64 = 1e-7;

/// `-mean log p`.
fn neg_mean_log<T: Scalar>(g: &mut Graph<'_, T>, p: Var) -> Result<Var> {
    let l = g.log_clamped(p, T::from_f64_lossy(PROB_CLAMP))?;
    let m = g.mean(l)?;
    g.neg(m)
}

/// `L_r = -mean log ŷ_r`.
pub fn real_loss<T: Scalar>(g: &mut Graph<'_, T>, real_scores: Var) -> Result<Var> {
    neg_mean_log(g, real_scores)
}

/// `L_f = -mean log(1 - ŷ_g)`.
pub fn fake_loss<T: Scalar>(g: &mut Graph<'_, T>, fake_scores: Var) -> Result<Var> {
    let q = g.one_minus(fake_scores)?;
    neg_mean_log(g, q)
}

/// `L_g = -mean log ŷ_g`.
pub fn generator_loss<T: Scalar>(g: &mut Graph<'_, T>, fake_scores: Var) -> Result<Var> {
    neg_mean_log(g, fake_scores)
}

/// `(L_r, L_f, L_d = L_r + L_f)`.
pub fn discriminator_loss<T: Scalar>(g: &mut Graph<'_, T>, real_scores: Var, fake_scores: Var) -> Result<(Var, Var, Var)> {
    let l_r = real_loss(g, real_scores)?;
    let l_f = fake_loss(g, fake_scores)?;
    let l_d = g.add(l_r, l_f)?;
    Ok((l_r, l_f, l_d))
}

/// Categorical cross entropy between `[B, 5]` probabilities and fuzzy targets.
pub fn classifier_loss<T: Scalar>(g: &mut Graph<'_, T>, probs: Var, targets: &Tensor<T>) -> Result<Var> {
    g.cross_entropy(probs, targets, T::from_f64_lossy(PROB_CLAMP))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLosses {
    pub l_r: f64,
    pub l_f: f64,
    pub l_d: f64,
    pub l_g: f64,
}

fn clamped_ln(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()
}

/// Plain evaluation of the four adversarial losses from score lists.
pub fn gan_losses(real_scores: &[f64], fake_scores: &[f64]) -> Result<GanLosses> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::contract("gan_losses needs non-empty real and fake batches"));
    }
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len() as f64;
    let l_r = -mean(real_scores, &clamped_ln);
    let l_f = -mean(fake_scores, &|p| clamped_ln(1.0 - p));
    let l_g = -mean(fake_scores, &clamped_ln);
    Ok(GanLosses {
        l_r,
        l_f,
        l_d: l_r + l_f,
        l_g,
    })
}

/// Plain cross entropy `-Σ y_k ln ŷ_k` for one example.
pub fn cross_entropy(target: &[f64; NUM_CLASSES], pred: &[f64; NUM_CLASSES]) -> Result<f64> {
    let total: f64 = target.iter().sum();
    if target.iter().any(|&y| y < 0.0) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::Validation(format!("{target:?} is not a distribution")));
    }
    Ok(-target
        .iter()
        .zip(pred)
        .filter(|(&y, _)| y > 0.0)
        .map(|(&y, &p)| y * clamped_ln(p))
        .sum::<f64>())
}
