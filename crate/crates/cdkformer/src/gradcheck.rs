//! Central-difference gradient verification for parameterized losses.

use crate::autodiff::{Grads, ParamStore};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Deterministically sample `count` parameter coordinates, spread across all
/// entries proportionally to their size.
pub fn sample_coords(store: &ParamStore, count: usize, rng: &mut RngStream) -> Vec<(usize, usize)> {
    let total = store.total_len();
    let mut coords = Vec::with_capacity(count);
    for _ in 0..count {
        let mut flat = rng.below(total);
        for (e, entry) in store.entries.iter().enumerate() {
            if flat < entry.data.len() {
                coords.push((e, flat));
                break;
            }
            flat -= entry.data.len();
        }
    }
    coords
}

/// Every coordinate of every entry; for small layer-level checks.
pub fn all_coords(store: &ParamStore) -> Vec<(usize, usize)> {
    let mut coords = Vec::new();
    for (e, entry) in store.entries.iter().enumerate() {
        for j in 0..entry.data.len() {
            coords.push((e, j));
        }
    }
    coords
}

/// Compare analytic gradients against central differences at the given
/// coordinates. Returns the max of |analytic - numeric| / max(1, |analytic|).
pub fn grad_check(
    store: &mut ParamStore,
    mut loss: impl FnMut(&ParamStore) -> f64,
    analytic: &Grads,
    coords: &[(usize, usize)],
    step: f64,
) -> Result<f64> {
    let mut max_rel: f64 = 0.0;
    for &(e, j) in coords {
        let orig = store.entries[e].data[j];
        store.entries[e].data[j] = orig + step;
        let fp = loss(store);
        store.entries[e].data[j] = orig - step;
        let fm = loss(store);
        store.entries[e].data[j] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::runtime(format!(
                "grad_check: non-finite loss at {}[{}]",
                store.entries[e].name, j
            )));
        }
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.buffers[e][j];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Init, Tape};

    #[test]
    fn quadratic_is_exact() {
        let mut rng = RngStream::new(1);
        let mut store = ParamStore::new();
        let x = store.register("x", 4, 4, Init::Normal(1.0), &mut rng);

        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let sq = tape.mul(xv, xv);
        let loss = tape.sum_all(sq);
        tape.backward(loss, 1.0);
        let mut grads = store.zero_grads();
        tape.export_grads(&mut grads, 1.0);

        let coords = all_coords(&store);
        let err = grad_check(
            &mut store,
            |s| {
                let mut t = Tape::new();
                let v = t.param(s, x);
                let sq = t.mul(v, v);
                let l = t.sum_all(sq);
                t.scalar(l)
            },
            &grads,
            &coords,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "quadratic grad err {err}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut rng = RngStream::new(2);
        let mut store = ParamStore::new();
        let x = store.register("x", 1, 1, Init::Ones, &mut rng);
        let grads = store.zero_grads();
        let coords = all_coords(&store);
        let r = grad_check(&mut store, |_| f64::NAN, &grads, &coords, 1e-5);
        assert!(r.is_err());
        let _ = x;
    }
}
