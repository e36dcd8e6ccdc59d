//! Central finite-difference verification of analytic gradients.
//!
//! `grad_check` perturbs every coordinate; `grad_check_sampled` perturbs a
//! seeded random subset per tensor, which is what the end-to-end model check
//! uses (full perturbation of every parameter would need millions of forward
//! passes). Both report the max relative error
//! `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.

use super::graph::{Graph, Value};
use super::Tensor;
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Location of the worst coordinate: (tensor index, flat coordinate).
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, points: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&Graph<f64>, &[Value]) -> Result<Value>,
{
    let g = Graph::<f64>::new();
    let leaves: Vec<Value> = points.iter().map(|p| g.leaf(p.clone())).collect();
    let y = f(&g, &leaves)?;
    let v = g.value(y).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Checks selected coordinates of each point against central differences.
/// `coords_per_tensor = usize::MAX` checks everything.
pub fn grad_check_sampled<F>(
    f: F,
    points: &[Tensor<f64>],
    coords_per_tensor: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Value]) -> Result<Value>,
{
    let g = Graph::<f64>::new();
    let leaves: Vec<Value> = points
        .iter()
        .map(|p| g.leaf(p.clone().with_grad()))
        .collect();
    let y = f(&g, &leaves)?;
    if !g.value(y).is_scalar() {
        return Err(Error::Shape("grad_check objective must be scalar".into()));
    }
    let grads = g.backward(y)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for (ti, point) in points.iter().enumerate() {
        let analytic = grads.get_or_zeros(leaves[ti]);
        let numel = point.numel();
        let coords: Vec<usize> = if coords_per_tensor >= numel {
            (0..numel).collect()
        } else {
            rand::seq::index::sample(&mut rng, numel, coords_per_tensor).into_vec()
        };
        for ci in coords {
            let base = point.data()[ci];
            let mut plus = points.to_vec();
            plus[ti].data_mut()[ci] = base + eps;
            let f_plus = eval_scalar(&f, &plus)?;
            let mut minus = points.to_vec();
            minus[ti].data_mut()[ci] = base - eps;
            let f_minus = eval_scalar(&f, &minus)?;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let err = rel_err(analytic.data()[ci], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ti, ci));
                report.worst_analytic = analytic.data()[ci];
                report.worst_numeric = numeric;
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

/// Exhaustive check of a single-input scalar function; returns the max
/// relative error over every coordinate of `point`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Graph<f64>, Value) -> Result<Value>,
{
    let report = grad_check_sampled(
        |g, leaves| f(g, leaves[0]),
        std::slice::from_ref(point),
        usize::MAX,
        eps,
        0,
    )?;
    Ok(report.max_rel_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        // f(x) = sum(x ⊙ x); grad = 2x; at ones the error is tiny.
        let point = Tensor::<f64>::full(&[2, 3], 1.0);
        let err = grad_check(
            |g, x| {
                let sq = g.hadamard(x, x)?;
                g.sum(sq)
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn linear_function_is_exact_to_machine_scale() {
        let point = Tensor::<f64>::from_fn(&[4], |i| i as f64 * 0.3 - 0.7);
        let err = grad_check(
            |g, x| {
                let w = g.constant(Tensor::from_vec(&[4], vec![2.0, -1.0, 0.5, 3.0]).unwrap());
                let p = g.hadamard(w, x)?;
                g.sum(p)
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let point = Tensor::<f64>::full(&[2], 1e160);
        let r = grad_check(
            |g, x| {
                let sq = g.hadamard(x, x)?;
                let sq2 = g.hadamard(sq, sq)?;
                g.sum(sq2)
            },
            &point,
            1e-4,
        );
        assert!(r.is_err());
    }
}
