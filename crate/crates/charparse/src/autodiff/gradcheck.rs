//! Central-difference verification of analytic gradients.
//!
//! Runs in f64 so the checks have numerical headroom; training stays in f32.

use rand::Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::{arg_error, AutodiffError, Result};

/// Compare analytic gradients of a scalar-valued model fragment against
/// central finite differences.
///
/// `f` must be deterministic across calls (no live dropout). Up to
/// `coords_per_param` coordinates of each parameter are sampled. Returns the
/// maximum relative error `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    mut f: F,
    eps: f64,
    coords_per_param: usize,
    rng: &mut impl Rng,
) -> Result<f64>
where
    F: FnMut(&Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(arg_error(
            "grad_check",
            format!("eps {eps} outside [1e-7, 1e-4]"),
        ));
    }

    store.zero_grads();
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    if !tape.value(loss).item().is_finite() {
        return Err(AutodiffError::NonFinite { op: "grad_check" });
    }
    tape.backward(loss, store)?;
    let analytic: Vec<Tensor<f64>> = store.ids().map(|id| store.grad(id).clone()).collect();

    let mut max_rel = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for (slot, id) in ids.iter().enumerate() {
        let numel = store.value(*id).numel();
        let coords: Vec<usize> = if numel <= coords_per_param {
            (0..numel).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < coords_per_param {
                picked.insert(rng.gen_range(0..numel));
            }
            picked.into_iter().collect()
        };

        let base = store.value(*id).clone();
        for &c in &coords {
            let plus = perturb(&base, c, eps);
            store.set_value(*id, plus)?;
            let lp = eval(&mut f, store)?;

            let minus = perturb(&base, c, -eps);
            store.set_value(*id, minus)?;
            let lm = eval(&mut f, store)?;

            store.set_value(*id, base.clone())?;

            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[slot].data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn eval<F>(f: &mut F, store: &ParamStore<f64>) -> Result<f64>
where
    F: FnMut(&Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(AutodiffError::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

fn perturb(t: &Tensor<f64>, coord: usize, delta: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[coord] += delta;
    Tensor::from_vec(t.shape().to_vec(), data).unwrap()
}
