//! Central finite-difference gradient checking.

use super::{Graph, Scalar, Tensor, Var};
use crate::error::Result;

/// Per-coordinate relative error, `|a - n| / max(|a|, |n|, floor)`.
///
/// `floor` keeps coordinates whose true gradient is ~0 from dividing noise
/// by noise.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Numeric derivative of `eval` at every coordinate of `values`.
/// `values` is restored before returning.
pub fn central_differences<T: Scalar>(
    values: &mut [T],
    eps: f64,
    mut eval: impl FnMut(&[T]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = T::of(orig.as_f64() + eps);
        let up_arg = values[i].as_f64();
        let up = eval(values)?;
        values[i] = T::of(orig.as_f64() - eps);
        let down_arg = values[i].as_f64();
        let down = eval(values)?;
        values[i] = orig;
        // Divide by the step actually taken after rounding to T.
        out.push((up - down) / (up_arg - down_arg));
    }
    Ok(out)
}

pub fn compare(analytic: Vec<f64>, numeric: Vec<f64>, floor: f64) -> GradCheckReport {
    let mut worst = (0.0, 0);
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = rel_error(a, n, floor);
        if e > worst.0 || e.is_nan() {
            worst = (e, i);
        }
    }
    GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    }
}

/// Checks the gradient of the scalar function `f` at `point`.
pub fn grad_check_with<T, F>(f: F, point: &Tensor<T>, eps: f64, floor: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(&point.clone().with_grad(true));
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic: Vec<f64> = match grads.get(x) {
        Some(gx) => gx.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; point.numel()],
    };
    let mut values = point.data().to_vec();
    let shape = point.shape().to_vec();
    let numeric = central_differences(&mut values, eps, |v| {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(shape.clone(), v.to_vec())?);
        let y = f(&mut g, x)?;
        Ok(g.item(y).as_f64())
    })?;
    Ok(compare(analytic, numeric, floor))
}

/// Worst relative error between analytic and central-difference gradients.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    Ok(grad_check_with(f, point, eps, 1e-6)?.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_f64() {
        let a = Tensor::<f64>::new(
            vec![3, 3],
            vec![2.0, 0.5, -1.0, 0.5, 3.0, 0.25, -1.0, 0.25, 1.5],
        )
        .unwrap();
        let x0 = Tensor::new(vec![3, 1], vec![0.3, -1.2, 0.8]).unwrap();
        let err = grad_check(
            |g, x| {
                let a = g.constant(&a);
                let ax = g.matmul(a, x)?;
                let xax = g.mul(x, ax)?;
                Ok(g.sum(xax))
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x0 = Tensor::<f64>::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let rep = grad_check_with(
            |g, _x| Ok(g.constant(&Tensor::scalar(7.0))),
            &x0,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(rep.analytic.iter().all(|&v| v == 0.0));
        assert!(rep.numeric.iter().all(|&v| v.abs() < 1e-12));
        assert_eq!(rep.max_rel_error, 0.0);
    }
}
