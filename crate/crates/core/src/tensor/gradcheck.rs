//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over every checked
    /// coordinate.
    pub max_rel_error: f64,
    /// Worst error per parameter, in input order.
    pub per_param: Vec<f64>,
    /// `(parameter, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares the tape gradient of a scalar function against central
/// differences at every coordinate of every parameter.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, and must
/// return a one-element value. It has to be deterministic: anything random
/// inside it must be seeded from a fixed value.
pub fn grad_check<F>(f: F, params: &[Tensor], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(f, params, epsilon, None)
}

/// Like [`grad_check`] but probes at most `per_param` randomly chosen
/// coordinates of each parameter, for models too large to sweep.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor],
    epsilon: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(f, params, epsilon, Some((per_param, seed)))
}

fn evaluate<F>(f: &F, params: &[Tensor], requires_grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::config("gradient check objective must be scalar"));
    }
    Ok((tape, vars, out))
}

fn check<F>(f: F, params: &[Tensor], epsilon: f64, sampling: Option<(usize, u64)>) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::config(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let (tape, vars, out) = evaluate(&f, params, true)?;
    let grads = tape.backward(out)?;

    let mut rng = sampling.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut perturbed = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_param: vec![0.0; params.len()],
        worst: None,
        checked: 0,
    };
    for (p, var) in vars.iter().enumerate() {
        let n = params[p].len();
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(params[p].shape()));
        let coords: Vec<usize> = match (&mut rng, sampling) {
            (Some(rng), Some((k, _))) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let base = params[p].data()[j];
            let mut at = |value: f64| -> Result<f64> {
                perturbed[p].data_mut()[j] = value;
                let (t, _, o) = evaluate(&f, &perturbed, false)?;
                let v = t.value(o).item();
                if !v.is_finite() {
                    return Err(Error::Oracle {
                        param: format!("parameter {p}, element {j}"),
                    });
                }
                Ok(v)
            };
            let plus = at(base + epsilon)?;
            let minus = at(base - epsilon)?;
            perturbed[p].data_mut()[j] = base;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            report.per_param[p] = report.per_param[p].max(err);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((p, j));
            }
        }
    }
    Ok(report)
}
