//! Finite-difference gradient oracle.

use super::{lit, Scalar, Tensor};

/// Central-difference gradient of a scalar function with respect to one
/// parameter tensor. The closure must recompute the loss from the current
/// parameter values; it is called `2 * len` times.
///
/// Meant for `f64` parameters; `f32` does not have the precision for the
/// step sizes this is used with.
pub fn finite_diff_grad<T: Scalar>(
    f: &mut dyn FnMut() -> T,
    param: &Tensor<T>,
    h: f64,
) -> Vec<T> {
    let n = param.len();
    let hh = lit::<T>(h);
    let two_h = lit::<T>(2.0 * h);
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let orig = param.to_vec();
        let mut plus = orig.clone();
        plus[i] = plus[i] + hh;
        param.set_data(plus);
        let fp = f();
        let mut minus = orig.clone();
        minus[i] = minus[i] - hh;
        param.set_data(minus);
        let fm = f();
        param.set_data(orig);
        grad.push((fp - fm) / two_h);
    }
    grad
}

/// Relative error between two gradient components.
pub fn rel_err<T: Scalar>(a: T, b: T) -> f64 {
    let a = a.to_f64().unwrap();
    let b = b.to_f64().unwrap();
    let denom = (a.abs() + b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Largest componentwise relative error between two gradients.
pub fn max_rel_err<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_x_squared_at_two() {
        let x = Tensor::<f64>::param(vec![1], vec![2.0]);
        let g = finite_diff_grad(
            &mut || {
                let v = x.to_vec()[0];
                v * v
            },
            &x,
            1e-5,
        );
        assert!((g[0] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn fd_of_constant_is_zero() {
        let x = Tensor::<f64>::param(vec![3], vec![1.0, 2.0, 3.0]);
        let g = finite_diff_grad(&mut || 42.0, &x, 1e-5);
        assert!(g.iter().all(|&v| v == 0.0));
    }
}
