//! Central-difference gradient checking for `f64` graphs.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::param::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares analytic gradients of the scalar `f` against
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` on up to `samples` trainable entries.
///
/// The per-entry error is `|analytic − numeric| / max(1e-8, |analytic|)`;
/// any NaN is reported as an infinite error.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    f: F,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    drop(tape);

    let entries: Vec<(ParamId, usize)> = store
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(pi, p)| (0..p.value.numel()).map(move |i| (ParamId(pi), i)))
        .collect();
    let chosen: Vec<(ParamId, usize)> = if entries.len() <= samples {
        entries
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample(&mut rng, entries.len(), samples).into_iter().map(|i| entries[i]).collect()
    };

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::inference();
        let out = f(&mut tape, store)?;
        tape.value(out).item()
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    for (id, i) in chosen {
        let analytic = store.get(id).grad.data()[i];
        let orig = store.get(id).value.data()[i];
        store.get_mut(id).value.data_mut()[i] = orig + eps;
        let fp = eval(store)?;
        store.get_mut(id).value.data_mut()[i] = orig - eps;
        let fm = eval(store)?;
        store.get_mut(id).value.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let mut err = (analytic - numeric).abs() / analytic.abs().max(1e-8);
        if err.is_nan() {
            err = f64::INFINITY;
        }
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((store.get(id).name.clone(), i, analytic, numeric));
        }
    }
    store.zero_grads();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{ParamGroup, ParamRole};
    use crate::tensor::Tensor;

    #[test]
    fn square_is_exact() {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::scalar(3.0), ParamGroup::Main, ParamRole::Other).unwrap();
        let r = grad_check(
            &mut s,
            |t, s| {
                let p = t.param(s, id);
                Ok(t.mul(p, p)?)
            },
            1e-5,
            10,
            0,
        )
        .unwrap();
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }
}
