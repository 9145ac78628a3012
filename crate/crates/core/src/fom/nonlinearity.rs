use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::spectral_norm;
use crate::poly::PolynomialMap;

/// Nonlinear part `f_nl` of the plant.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Nonlinearity {
    /// `f_nl = 0`.
    Zero,
    /// Dense polynomial over all state coordinates. Only practical for small `n_f`.
    Polynomial(PolynomialMap),
    /// Structured nonlinearity of a manufactured benchmark.
    Manufactured(ManufacturedNonlinearity),
}

impl Nonlinearity {
    pub fn state_dim(&self) -> Option<usize> {
        match self {
            Nonlinearity::Zero => None,
            Nonlinearity::Polynomial(p) => Some(p.input_dim()),
            Nonlinearity::Manufactured(m) => Some(m.n_f()),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Nonlinearity::Zero => true,
            Nonlinearity::Polynomial(p) => p.is_zero(),
            Nonlinearity::Manufactured(m) => m.is_zero(),
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Nonlinearity::Zero => DVector::zeros(x.len()),
            Nonlinearity::Polynomial(p) => p.eval(x),
            Nonlinearity::Manufactured(m) => m.eval(x),
        }
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            Nonlinearity::Zero => DMatrix::zeros(x.len(), x.len()),
            Nonlinearity::Polynomial(p) => p.jacobian(x),
            Nonlinearity::Manufactured(m) => m.jacobian(x),
        }
    }

    /// Spectral norm of the Jacobian at `x`.
    pub fn jacobian_norm(&self, x: &DVector<f64>) -> f64 {
        match self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::Polynomial(p) => spectral_norm(&p.jacobian(x)),
            Nonlinearity::Manufactured(m) => m.jacobian_norm(x),
        }
    }
}

/// Nonlinearity obtained by mapping the decoupled system
///
/// ```text
/// x_r' = A_r x_r + r(x_r) + E(x_r) y
/// y'   = A_n y
/// ```
///
/// through `x_n = y + W(x_r)`. The graph `x_n = W(x_r)` is then exactly invariant
/// and `r` is exactly the reduced drift on it.
#[derive(Debug, Clone)]
pub struct ManufacturedNonlinearity {
    n: usize,
    n_f: usize,
    a_r: DMatrix<f64>,
    /// `W`, normal coordinates only: `n -> n_f - n`.
    graph: PolynomialMap,
    /// `A_n W`.
    a_n_graph: PolynomialMap,
    /// `r`: `n -> n`.
    drift: PolynomialMap,
    /// `E`, flattened column-major: `n -> n * (n_f - n)`.
    coupling: PolynomialMap,
}

impl ManufacturedNonlinearity {
    pub fn new(
        a_r: DMatrix<f64>,
        a_n: &DMatrix<f64>,
        graph: PolynomialMap,
        drift: PolynomialMap,
        coupling: PolynomialMap,
    ) -> Result<Self> {
        let n = a_r.nrows();
        let n_n = a_n.nrows();
        if graph.input_dim() != n || graph.output_dim() != n_n {
            return Err(Error::DimensionMismatch { context: "manifold graph map", expected: n_n, actual: graph.output_dim() });
        }
        if drift.input_dim() != n || drift.output_dim() != n {
            return Err(Error::DimensionMismatch { context: "reduced drift map", expected: n, actual: drift.output_dim() });
        }
        if coupling.input_dim() != n || coupling.output_dim() != n * n_n {
            return Err(Error::DimensionMismatch { context: "coupling map", expected: n * n_n, actual: coupling.output_dim() });
        }
        let a_n_graph = graph.compose_left(a_n)?;
        Ok(Self { n, n_f: n + n_n, a_r, graph, a_n_graph, drift, coupling })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_f(&self) -> usize {
        self.n_f
    }

    pub fn graph(&self) -> &PolynomialMap {
        &self.graph
    }

    pub fn drift(&self) -> &PolynomialMap {
        &self.drift
    }

    pub fn coupling(&self) -> &PolynomialMap {
        &self.coupling
    }

    pub fn is_zero(&self) -> bool {
        self.graph.is_zero() && self.drift.is_zero() && self.coupling.is_zero()
    }

    fn reshape(&self, flat: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n, self.n_f - self.n, flat.as_slice())
    }

    pub fn coupling_matrix(&self, x_r: &DVector<f64>) -> DMatrix<f64> {
        self.reshape(&self.coupling.eval(x_r))
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let x_r = x.rows(0, n).into_owned();
        let x_n = x.rows(n, self.n_f - n);
        let y = x_n - self.graph.eval(&x_r);
        let e = self.coupling_matrix(&x_r);
        let top = self.drift.eval(&x_r) + &e * &y;
        let g = &self.a_r * &x_r + &top;
        let bottom = self.graph.jacobian(&x_r) * g - self.a_n_graph.eval(&x_r);
        let mut out = DVector::zeros(self.n_f);
        out.rows_mut(0, n).copy_from(&top);
        out.rows_mut(n, self.n_f - n).copy_from(&bottom);
        out
    }

    /// Pieces shared by the Jacobian and its norm: `(J_r, W', E)` where `J_r` is the
    /// `n_f x n` block of derivatives with respect to the reduced coordinates.
    fn jacobian_parts(&self, x: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n = self.n;
        let n_n = self.n_f - n;
        let x_r = x.rows(0, n).into_owned();
        let y = x.rows(n, n_n) - self.graph.eval(&x_r);
        let e = self.coupling_matrix(&x_r);
        let wp = self.graph.jacobian(&x_r);
        let rp = self.drift.jacobian(&x_r);
        let cj = self.coupling.jacobian(&x_r);
        let mut dey = DMatrix::zeros(n, n);
        for i in 0..n {
            let ei = self.reshape(&cj.column(i).into_owned());
            dey.set_column(i, &(ei * &y));
        }
        let top_r = &rp + &dey - &e * &wp;
        let g = &self.a_r * &x_r + self.drift.eval(&x_r) + &e * &y;
        let g_r = &self.a_r + &top_r;
        let bottom_r = self.graph.jacobian_directional_derivative(&x_r, &g) + &wp * g_r
            - self.a_n_graph.jacobian(&x_r);
        let mut j_r = DMatrix::zeros(self.n_f, n);
        j_r.view_mut((0, 0), (n, n)).copy_from(&top_r);
        j_r.view_mut((n, 0), (n_n, n)).copy_from(&bottom_r);
        (j_r, wp, e)
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n;
        let n_n = self.n_f - n;
        let (j_r, wp, e) = self.jacobian_parts(x);
        let mut j = DMatrix::zeros(self.n_f, self.n_f);
        j.view_mut((0, 0), (self.n_f, n)).copy_from(&j_r);
        j.view_mut((0, n), (n, n_n)).copy_from(&e);
        j.view_mut((n, n), (n_n, n_n)).copy_from(&(&wp * &e));
        j
    }

    /// `||J(x)||` through the rank-`2n` factorisation `J J^T = M M^T` with
    /// `M = [J_r, P S]`, `P = [I; W']`, `S = (E E^T)^{1/2}`.
    pub fn jacobian_norm(&self, x: &DVector<f64>) -> f64 {
        let n = self.n;
        let (j_r, wp, e) = self.jacobian_parts(x);
        let k = &e * e.transpose();
        let eig = k.symmetric_eigen();
        let sqrt_vals = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
        let s = &eig.eigenvectors * sqrt_vals * eig.eigenvectors.transpose();
        let mut p = DMatrix::zeros(self.n_f, n);
        p.view_mut((0, 0), (n, n)).fill_with_identity();
        p.view_mut((n, 0), (self.n_f - n, n)).copy_from(&wp);
        let mut m = DMatrix::zeros(self.n_f, 2 * n);
        m.view_mut((0, 0), (self.n_f, n)).copy_from(&j_r);
        m.view_mut((0, n), (self.n_f, n)).copy_from(&(p * s));
        spectral_norm(&m)
    }
}
