//! Fixed-step Runge-Kutta helpers.

use nalgebra::{DMatrix, DVector};

/// One classical RK4 step of `x' = f(x)`.
pub fn rk4_step<F>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (0.5 * h)));
    let k3 = f(&(x + &k2 * (0.5 * h)));
    let k4 = f(&(x + &k3 * h));
    x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
}

/// RK4 step together with its exact derivative with respect to the initial state.
///
/// `f` returns `(value, jacobian)`; the returned matrix is `d x_next / d x`.
pub fn rk4_step_variational<F>(f: F, x: &DVector<f64>, h: f64) -> (DVector<f64>, DMatrix<f64>)
where
    F: Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
{
    let n = x.len();
    let eye = DMatrix::<f64>::identity(n, n);
    let (k1, j1) = f(x);
    let s1 = eye.clone();
    let (k2, j2) = f(&(x + &k1 * (0.5 * h)));
    let s2 = &eye + &j1 * (0.5 * h);
    let d2 = &j2 * &s2;
    let (k3, j3) = f(&(x + &k2 * (0.5 * h)));
    let s3 = &eye + &d2 * (0.5 * h);
    let d3 = &j3 * &s3;
    let (k4, j4) = f(&(x + &k3 * h));
    let s4 = &eye + &d3 * h;
    let d4 = &j4 * &s4;
    let d1 = &j1 * s1;
    let next = x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
    let jac = eye + (d1 + (d2 + d3) * 2.0 + d4) * (h / 6.0);
    (next, jac)
}
