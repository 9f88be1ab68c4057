//! Central finite-difference gradient checks.
//!
//! The numeric side always runs in `f64`; the analytic side runs at the
//! precision under test, so single-precision gradients are judged against a
//! double-precision oracle.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// Flat coordinate (across all checked tensors) where the maximum occurred.
    pub worst_index: usize,
    pub coordinates: usize,
    pub tol: f64,
    pub pass: bool,
}

/// A loss built from a list of input tensors, at any precision.
pub trait LossBuilder {
    fn build<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &[Var]) -> Result<Var>;
}

/// Checks a double-precision loss `f(input)`.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let eval = |x: &Tensor<f64>| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let v = g.leaf(x.clone().with_requires_grad(true));
        let loss = f(&mut g, v)?;
        let value = g.value(loss).data()[0];
        g.backward(loss)?;
        let grad = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
        Ok((value, grad))
    };
    let (value, analytic) = eval(input)?;
    let (again, _) = eval(input)?;
    ensure_deterministic(value, again)?;
    let mut probe = input.clone();
    compare(&analytic, eps, tol, |i, delta| {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + delta;
        let mut g = Graph::new();
        let v = g.constant(probe.clone());
        let loss = f(&mut g, v);
        probe.data_mut()[i] = orig;
        Ok(g.value(loss?).data()[0])
    })
}

/// Checks `f` with analytic gradients at precision `T` over every
/// coordinate of every input.
pub fn grad_check_inputs<T: Scalar, L: LossBuilder>(
    f: &L,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let analytic_pass = || -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::<T>::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.leaf(t.cast::<T>().with_requires_grad(true)))
            .collect();
        let loss = f.build(&mut g, &vars)?;
        let value = g.value(loss).data()[0].to_f64_lossy();
        g.backward(loss)?;
        let mut grad = Vec::new();
        for (v, t) in vars.iter().zip(inputs) {
            match g.grad(*v) {
                Some(d) => grad.extend(d.iter().map(|x| x.to_f64_lossy())),
                None => grad.extend(std::iter::repeat_n(0.0, t.numel())),
            }
        }
        Ok((value, grad))
    };
    let (value, analytic) = analytic_pass()?;
    let (again, _) = analytic_pass()?;
    ensure_deterministic(value, again)?;

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.numel();
            Some(o)
        })
        .collect();
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    compare(&analytic, eps, tol, |flat, delta| {
        let which = offsets.iter().rposition(|&o| o <= flat).unwrap();
        let i = flat - offsets[which];
        let orig = probe[which].data()[i];
        probe[which].data_mut()[i] = orig + delta;
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f.build(&mut g, &vars);
        probe[which].data_mut()[i] = orig;
        Ok(g.value(loss?).data()[0])
    })
}

/// Checks a double-precision loss over parameters of a store. `ids`
/// restricts the check; `None` covers every parameter.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    ids: Option<&[ParamId]>,
    f: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let ids: Vec<ParamId> = match ids {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let eval = |s: &ParamStore<f64>| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::with_params(s);
        let loss = f(&mut g)?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        let mut flat = Vec::new();
        for &id in &ids {
            match grads.param(id) {
                Some(d) => flat.extend_from_slice(d),
                None => flat.extend(std::iter::repeat_n(0.0, s.get(id).numel())),
            }
        }
        Ok((value, flat))
    };
    let (value, analytic) = eval(store)?;
    let (again, _) = eval(store)?;
    ensure_deterministic(value, again)?;

    let mut probe = store.clone();
    let sizes: Vec<usize> = ids.iter().map(|&id| store.get(id).numel()).collect();
    compare(&analytic, eps, tol, |flat, delta| {
        let (mut which, mut i) = (0, flat);
        while i >= sizes[which] {
            i -= sizes[which];
            which += 1;
        }
        let id = ids[which];
        let orig = probe.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + delta;
        let loss = {
            let mut g = Graph::with_params(&probe);
            f(&mut g).map(|l| g.value(l).data()[0])
        };
        probe.get_mut(id).data_mut()[i] = orig;
        loss
    })
}

fn ensure_deterministic(a: f64, b: f64) -> Result<()> {
    if a.to_bits() != b.to_bits() {
        return Err(Error::GradCheckInvalid(format!(
            "two forward passes disagree: {a} vs {b}"
        )));
    }
    Ok(())
}

fn compare(
    analytic: &[f64],
    eps: f64,
    tol: f64,
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(Error::contract("grad_check eps must be positive"));
    }
    let mut worst = (0.0f64, 0usize);
    for (i, &a) in analytic.iter().enumerate() {
        let plus = eval(i, eps)?;
        let minus = eval(i, -eps)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if !(err <= worst.0) {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        coordinates: analytic.len(),
        tol,
        pass: worst.0 <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes_tightly() {
        let x = Tensor::<f64>::vector(&[0.3, -1.2, 2.5, 0.01]);
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                g.sum(sq)
            },
            &x,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.max_rel_error < 1e-6);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let x = Tensor::<f64>::vector(&[1.0, 2.0]);
        let r = grad_check(
            |g, v| {
                let z = g.scale(v, 0.0)?;
                g.sum(z)
            },
            &x,
            1e-4,
            1e-12,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_deterministic_fn_invalidates() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::<f64>::vector(&[1.0]);
        let err = grad_check(
            |g, v| {
                calls.set(calls.get() + 1.0);
                let s = g.sum(v)?;
                g.add_scalar(s, calls.get())
            },
            &x,
            1e-4,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::GradCheckInvalid(_)));
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Tensor::<f64>::vector(&[1.0]);
        assert!(grad_check(|g, v| g.sum(v), &x, 0.0, 1e-6).is_err());
    }
}
