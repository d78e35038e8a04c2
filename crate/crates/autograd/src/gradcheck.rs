//! Central-difference verification of analytic gradients.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Default finite-difference step for 64-bit checks.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-12)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the reverse-mode gradient of the scalar `f` at `x` with
/// central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
///
/// `f` receives a fresh graph and the node holding its argument; it must be
/// deterministic.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradCheck>
where
    T: Element,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Validation(format!("finite_diff_check: eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let loss = f(&mut g, xv)?;
    check_finite(g.value(loss), usize::MAX, "f(x)")?;
    let analytic: Vec<f64> = if g.requires_grad(loss) {
        g.backward(loss)?;
        match g.grad(xv) {
            Some(d) => d.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; x.numel()],
        }
    } else {
        vec![0.0; x.numel()]
    };
    if let Some(i) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { index: i, detail: "analytic gradient".into() });
    }

    let eval = |probe: Tensor<T>, index: usize| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe);
        let out = f(&mut g, v)?;
        check_finite(g.value(out), index, "perturbed f(x)")?;
        Ok(g.item(out).as_f64())
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut max_rel_error = 0.0f64;
    let mut worst_index = 0;
    for i in 0..x.numel() {
        let base = x.data()[i].as_f64();
        let mut plus = x.clone();
        plus.data_mut()[i] = T::from_f64_lossy(base + eps);
        let mut minus = x.clone();
        minus.data_mut()[i] = T::from_f64_lossy(base - eps);
        let d = (eval(plus, i)? - eval(minus, i)?) / (2.0 * eps);
        if !d.is_finite() {
            return Err(TensorError::NonFinite { index: i, detail: "numeric gradient".into() });
        }
        let a = analytic[i];
        let rel = (a - d).abs() / a.abs().max(d.abs()).max(1e-12);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
        numeric.push(d);
    }
    Ok(GradCheck { max_rel_error, worst_index, analytic, numeric })
}

fn check_finite<T: Element>(t: &Tensor<T>, index: usize, what: &str) -> Result<()> {
    if !t.is_scalar() {
        return Err(TensorError::Contract(format!("finite_diff_check: f must return a scalar, got {:?}", t.shape())));
    }
    if !t.item().is_finite() {
        return Err(TensorError::NonFinite { index, detail: what.into() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new([2], vec![1.0f64, 2.0]).unwrap();
        let report = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum_all(sq))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!((report.analytic[0] - 2.0).abs() < 1e-12 && (report.analytic[1] - 4.0).abs() < 1e-12);
        assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
    }

    #[test]
    fn constant_function_reports_zero() {
        let x = Tensor::new([3], vec![0.1f64, 0.2, 0.3]).unwrap();
        let report = finite_diff_check(
            |g, x| {
                let z = g.scale(x, 0.0);
                Ok(g.sum_all(z))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_names_coordinate() {
        // finite at x, but the downward probe of coordinate 1 hits 1/0
        let x = Tensor::new([2], vec![1.0f64, DEFAULT_EPS]).unwrap();
        let err = finite_diff_check(
            |g, x| {
                let v = g.value(x).map(|v| 1.0 / v);
                let inv = g.constant(v);
                let p = g.mul(x, inv)?;
                Ok(g.sum_all(p))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { index: 1, .. }), "{err}");
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let x = Tensor::new([1], vec![1.0f64]).unwrap();
        assert!(finite_diff_check(|g, x| Ok(g.sum_all(x)), &x, 0.0).is_err());
    }
}
