//! Central-difference verification of reverse-mode gradients (64-bit).

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;

use super::params::{Grads, ParamId, ParamStore};
use super::NnError;

/// Denominator floor for the relative error, so coordinates where both
/// gradients vanish compare by absolute difference.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst_param: String,
    pub worst_offset: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against `(f(θ+h) − f(θ−h)) / 2h` on up to `max_coords`
/// coordinates sampled with `seed`. Every parameter tensor contributes at
/// least one coordinate when `max_coords` allows it.
pub fn grad_check<F>(
    mut f: F,
    store: &ParamStore<f64>,
    analytic: &Grads<f64>,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, NnError>
where
    F: FnMut(&ParamStore<f64>) -> f64,
{
    let coords = sample_coords(store, max_coords, seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst_param: String::new(),
        worst_offset: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (id, off) in coords {
        let orig = probe.value(id).as_slice()[off];
        probe.get_mut(id).value.as_mut_slice()[off] = orig + h;
        let plus = f(&probe);
        probe.get_mut(id).value.as_mut_slice()[off] = orig - h;
        let minus = f(&probe);
        probe.get_mut(id).value.as_mut_slice()[off] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NnError::NonFinite("grad_check objective"));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.coord(id, off);
        let err = relative_error(a, numeric);
        report.coords_checked += 1;
        if err > report.max_rel_error || report.coords_checked == 1 {
            report.max_rel_error = err;
            report.worst_param = store.get(id).name.clone();
            report.worst_offset = off;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

fn sample_coords(store: &ParamStore<f64>, max_coords: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let all: Vec<(ParamId, usize)> = store.ids().flat_map(|id| (0..store.value(id).as_slice().len()).map(move |o| (id, o))).collect();
    if all.len() <= max_coords {
        return all;
    }
    let mut rng = crate::rng::substream(seed, "gradcheck");
    let mut picked = Vec::with_capacity(max_coords);
    let mut start = 0;
    let mut taken = alloc::collections::BTreeSet::new();
    // one coordinate from every tensor first
    for id in store.ids() {
        let len = store.value(id).as_slice().len();
        if picked.len() < max_coords && len > 0 {
            let o = index::sample(&mut rng, len, 1).index(0);
            picked.push((id, o));
            taken.insert(start + o);
        }
        start += len;
    }
    let rest = max_coords - picked.len();
    for i in index::sample(&mut rng, all.len(), (rest + taken.len()).min(all.len())) {
        if picked.len() >= max_coords {
            break;
        }
        if taken.insert(i) {
            picked.push(all[i]);
        }
    }
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use alloc::vec;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("theta", Matrix::from_vec(1, 4, vec![0.3, -1.2, 2.0, 0.0]));
        s
    }

    #[test]
    fn quadratic_matches_analytic() {
        let s = store();
        let mut g = Grads::for_store(&s);
        let theta = s.value(ParamId(0)).clone();
        g.accumulate(ParamId(0), &theta.map(|v| 2.0 * v));
        let f = |s: &ParamStore<f64>| s.value(ParamId(0)).as_slice().iter().map(|v| v * v).sum::<f64>();
        let r = grad_check(f, &s, &g, 1e-4, 100, 0).unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
        assert_eq!(r.coords_checked, 4);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let s = store();
        let g = Grads::for_store(&s);
        let r = grad_check(|_| 3.5, &s, &g, 1e-4, 100, 0).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let s = store();
        let g = Grads::for_store(&s);
        assert!(grad_check(|_| f64::NAN, &s, &g, 1e-4, 100, 0).is_err());
    }

    #[test]
    fn sampling_respects_budget_and_covers_tensors() {
        let mut s = ParamStore::new();
        s.add("a", Matrix::<f64>::zeros(10, 10));
        s.add("b", Matrix::<f64>::zeros(1, 3));
        let c = sample_coords(&s, 20, 1);
        assert_eq!(c.len(), 20);
        assert!(c.iter().any(|(id, _)| *id == ParamId(1)));
        let mut dedup = c.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 20);
    }
}
