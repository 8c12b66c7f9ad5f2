//! Central finite differences, the oracle for every analytic gradient.

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Default step for 64-bit checks.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor of [`relative_error`]. Elements whose gradients are
/// below this magnitude are compared on an absolute scale of `1e-4 * tol`.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// `(f(θ + eps·e_i) - f(θ - eps·e_i)) / (2·eps)` for every element of every
/// tensor in `params`.
pub fn finite_difference_gradient<F, Fun>(mut f: Fun, params: &[Tensor<F>], eps: F) -> Result<Vec<Tensor<F>>>
where
    F: Float,
    Fun: FnMut(&[Tensor<F>]) -> Result<F>,
{
    let all: Vec<Vec<usize>> = params.iter().map(|p| (0..p.numel()).collect()).collect();
    let partial = finite_difference_at(&mut f, params, &all, eps)?;
    params
        .iter()
        .zip(partial)
        .map(|(p, vals)| Tensor::new(p.shape(), vals.into_iter().map(|(_, v)| v).collect()))
        .collect()
}

/// Finite differences restricted to the listed element indices of each tensor.
/// Returns `(index, derivative)` pairs in the order given.
pub fn finite_difference_at<F, Fun>(
    f: &mut Fun,
    params: &[Tensor<F>],
    indices: &[Vec<usize>],
    eps: F,
) -> Result<Vec<Vec<(usize, F)>>>
where
    F: Float,
    Fun: FnMut(&[Tensor<F>]) -> Result<F>,
{
    if eps <= F::zero() {
        return Err(Error::Input("finite difference step must be positive".into()));
    }
    let mut work = params.to_vec();
    let two_eps = eps + eps;
    let mut out = Vec::with_capacity(params.len());
    for (t, idx) in indices.iter().enumerate() {
        let mut vals = Vec::with_capacity(idx.len());
        for &i in idx {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = eval(f, &work)?;
            work[t].data_mut()[i] = orig - eps;
            let minus = eval(f, &work)?;
            work[t].data_mut()[i] = orig;
            vals.push((i, (plus - minus) / two_eps));
        }
        out.push(vals);
    }
    Ok(out)
}

fn eval<F: Float, Fun: FnMut(&[Tensor<F>]) -> Result<F>>(f: &mut Fun, p: &[Tensor<F>]) -> Result<F> {
    let v = f(p)?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            op: "finite_difference",
        });
    }
    Ok(v)
}

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_two() {
        let x = Tensor::<f64>::scalar(2.0);
        let g = finite_difference_gradient(|p| Ok(p[0].item() * p[0].item()), &[x], 1e-5).unwrap();
        assert!((g[0].item() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let g = finite_difference_gradient(|_| Ok(7.5), &[x], 1e-5).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let x = Tensor::<f64>::scalar(0.0);
        let r = finite_difference_gradient(|p| Ok(1.0 / p[0].item().abs().min(0.0)), &[x], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::<f64>::scalar(0.0);
        assert!(finite_difference_gradient(|_| Ok(0.0), &[x], 0.0).is_err());
    }
}
