//! Central finite-difference gradient checking.
//!
//! The oracle only ever reruns the forward closure on perturbed leaf values,
//! so it is independent of the backward pass it validates.

use super::elem::Elem;
use super::tape::{Tape, TensorId};

/// Outcome of a gradient comparison for a single leaf tensor.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare the tape gradient of `build`'s scalar output against central
/// finite differences, for each listed leaf.
///
/// `build` receives the leaf values (one `Vec<f64>` per leaf) and must
/// construct a fresh graph ending in a scalar loss, returning the tape, the
/// loss id and the leaf ids in order. `coords_per_leaf` limits how many
/// coordinates of each leaf are probed (all of them when `None`).
pub fn check_grads<F>(
    leaves: &[Vec<f64>],
    h: f64,
    coords_per_leaf: Option<usize>,
    build: F,
) -> GradReport
where
    F: Fn(&[Vec<f64>]) -> (Tape<f64>, TensorId, Vec<TensorId>),
{
    let (mut tape, loss, ids) = build(leaves);
    assert_eq!(ids.len(), leaves.len(), "leaf id count mismatch");
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.data(id).len()])
        })
        .collect();

    let eval = |vals: &[Vec<f64>]| -> f64 {
        let (t, l, _) = build(vals);
        t.scalar_value(l)
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (li, leaf) in leaves.iter().enumerate() {
        let ncoords = leaf.len();
        let probe: Vec<usize> = match coords_per_leaf {
            Some(k) if k < ncoords => {
                // Deterministic spread across the tensor.
                (0..k).map(|i| i * ncoords / k).collect()
            }
            _ => (0..ncoords).collect(),
        };
        for ci in probe {
            let mut plus = leaves.to_vec();
            plus[li][ci] += h;
            let mut minus = leaves.to_vec();
            minus[li][ci] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic[li][ci];
            let denom = an.abs().max(fd.abs()).max(1e-3);
            let rel = (an - fd).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    GradReport {
        max_rel_err: max_rel,
        checked,
    }
}

/// Finite-difference directional derivative of an arbitrary scalar function,
/// used where the full harness is overkill.
pub fn central_diff<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Convenience: uniformly random leaf values in [lo, hi] from a seeded
/// stream, for building reproducible check cases.
pub fn seeded_uniform(rng: &mut crate::rng::RandomSource, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}
