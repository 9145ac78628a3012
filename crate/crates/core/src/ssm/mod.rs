//! Reduced-order model on a spectral submanifold in graph form
//! `x = V_r x_r + w_nl(x_r)`.

mod estimate;
mod io;
mod regress;

pub use estimate::{estimate_constants, estimate_reduced_constants};
pub(crate) use estimate::sample_rng;
pub use io::{load_rom, save_rom, ROM_FORMAT_VERSION};
pub use regress::{decay_data, fit_graph_rom, TrainingData};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fom::FullOrderModel;
use crate::linalg::spectral_norm;
use crate::poly::PolynomialMap;

/// Origin of a constant set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstantSource {
    #[default]
    Estimated,
    Fitted,
    Manual,
}

/// Coefficients of the data-driven off-manifold bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataDrivenConstants {
    pub l_bar: f64,
    pub b_bar: f64,
    pub d_hat: f64,
}

/// Lipschitz and spectral constants used by the error tubes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RomConstants {
    pub source: ConstantSource,
    pub l_fnl: f64,
    pub l_wnl: f64,
    pub l_rnl: f64,
    pub l_cw: f64,
    /// Logarithmic norm of the normal linear part (slowest normal decay).
    pub lambda_an: f64,
    /// Logarithmic norm of the reduced linear part (largest real part).
    pub lambda_ar: f64,
    /// Disturbance bound the constants were produced with.
    #[serde(default)]
    pub d_bar: f64,
    /// `lambda_an` came from the data heuristic rather than the plant spectrum.
    #[serde(default)]
    pub lambda_an_heuristic: bool,
    /// Sampled estimates violate `L_rnl <= L_fnl (1 + L_wnl)`.
    #[serde(default)]
    pub bound_inconsistent: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_driven: Option<DataDrivenConstants>,
}

impl RomConstants {
    /// All Lipschitz constants zero; spectral bounds as given.
    pub fn linear(lambda_an: f64, lambda_ar: f64, l_cw: f64) -> Self {
        Self {
            source: ConstantSource::Manual,
            l_fnl: 0.0,
            l_wnl: 0.0,
            l_rnl: 0.0,
            l_cw,
            lambda_an,
            lambda_ar,
            d_bar: 0.0,
            lambda_an_heuristic: false,
            bound_inconsistent: false,
            data_driven: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lips = [self.l_fnl, self.l_wnl, self.l_rnl, self.l_cw, self.d_bar];
        if lips.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("Lipschitz constants must be finite and nonnegative".into()));
        }
        if !(self.lambda_an < 0.0 && self.lambda_ar < 0.0) {
            return Err(Error::InvalidArgument("spectral bounds must be negative".into()));
        }
        Ok(())
    }

    pub fn time_scale_separated(&self) -> bool {
        self.lambda_an < self.lambda_ar && self.lambda_ar < 0.0
    }
}

/// Reduced model `z' = A_r z + r_nl(z) + B_r u` with its graph parameterisation.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmRom {
    a_r: DMatrix<f64>,
    /// `n -> n_f`; rows of the reduced coordinates are identically zero.
    w_nl: PolynomialMap,
    r_nl: PolynomialMap,
    b_r: DMatrix<f64>,
    b_n: DMatrix<f64>,
    c: DMatrix<f64>,
    constants: RomConstants,
}

impl SsmRom {
    pub fn new(
        a_r: DMatrix<f64>,
        w_nl: PolynomialMap,
        r_nl: PolynomialMap,
        b_r: DMatrix<f64>,
        b_n: DMatrix<f64>,
        c: DMatrix<f64>,
        constants: RomConstants,
    ) -> Result<Self> {
        let n = a_r.nrows();
        if n == 0 || a_r.ncols() != n {
            return Err(Error::InvalidArgument("reduced linear part must be square and nonempty".into()));
        }
        let n_f = w_nl.output_dim();
        if n_f <= n {
            return Err(Error::DimensionMismatch { context: "manifold graph output", expected: n + 1, actual: n_f });
        }
        if w_nl.input_dim() != n || r_nl.input_dim() != n || r_nl.output_dim() != n {
            return Err(Error::DimensionMismatch { context: "reduced polynomial input", expected: n, actual: w_nl.input_dim() });
        }
        if b_r.nrows() != n || b_n.nrows() != n_f - n || b_r.ncols() != b_n.ncols() {
            return Err(Error::DimensionMismatch { context: "input matrix split", expected: n_f - n, actual: b_n.nrows() });
        }
        if c.ncols() != n_f {
            return Err(Error::DimensionMismatch { context: "output matrix columns", expected: n_f, actual: c.ncols() });
        }
        if w_nl.coefficients().rows(0, n).iter().any(|v| *v != 0.0) {
            return Err(Error::InvalidArgument("manifold graph must have zero reduced components".into()));
        }
        Ok(Self { a_r, w_nl, r_nl, b_r, b_n, c, constants })
    }

    /// Graph given in normal coordinates only (`n -> n_f - n`).
    pub fn from_normal_graph(
        a_r: DMatrix<f64>,
        graph: &PolynomialMap,
        r_nl: PolynomialMap,
        b: &DMatrix<f64>,
        c: DMatrix<f64>,
        constants: RomConstants,
    ) -> Result<Self> {
        let n = a_r.nrows();
        let n_n = graph.output_dim();
        let (dmin, dmax) = graph.degree_range();
        let mut coeffs = DMatrix::zeros(n + n_n, graph.monomial_count());
        coeffs.rows_mut(n, n_n).copy_from(graph.coefficients());
        let w_nl = PolynomialMap::from_coefficients(n, dmin, dmax, coeffs)?;
        if b.nrows() != n + n_n {
            return Err(Error::DimensionMismatch { context: "input matrix rows", expected: n + n_n, actual: b.nrows() });
        }
        let b_r = b.rows(0, n).into_owned();
        let b_n = b.rows(n, n_n).into_owned();
        Self::new(a_r, w_nl, r_nl, b_r, b_n, c, constants)
    }

    pub fn n(&self) -> usize {
        self.a_r.nrows()
    }

    pub fn n_f(&self) -> usize {
        self.w_nl.output_dim()
    }

    pub fn m(&self) -> usize {
        self.b_r.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn a_r(&self) -> &DMatrix<f64> {
        &self.a_r
    }

    pub fn w_nl(&self) -> &PolynomialMap {
        &self.w_nl
    }

    pub fn r_nl(&self) -> &PolynomialMap {
        &self.r_nl
    }

    pub fn b_r(&self) -> &DMatrix<f64> {
        &self.b_r
    }

    pub fn b_n(&self) -> &DMatrix<f64> {
        &self.b_n
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn c_norm(&self) -> f64 {
        spectral_norm(&self.c)
    }

    pub fn constants(&self) -> &RomConstants {
        &self.constants
    }

    pub fn with_constants(mut self, constants: RomConstants) -> Self {
        self.constants = constants;
        self
    }

    pub fn is_linear(&self) -> bool {
        self.r_nl.is_zero()
    }

    /// Leading `n` modal coordinates.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(0, self.n()).into_owned()
    }

    /// `V_r z + w_nl(z)`.
    pub fn lift(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut x = self.w_nl.eval(z);
        x.rows_mut(0, self.n()).copy_from(z);
        x
    }

    /// `w'(z) = V_r + w_nl'(z)`.
    pub fn lift_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut j = self.w_nl.jacobian(z);
        j.view_mut((0, 0), (self.n(), self.n())).fill_with_identity();
        j
    }

    pub fn reduced_rhs(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a_r * z + self.r_nl.eval(z) + &self.b_r * u
    }

    /// `A_r + r_nl'(z)`.
    pub fn reduced_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        &self.a_r + self.r_nl.jacobian(z)
    }

    /// Predicted output `C w(z)`.
    pub fn output(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.c * self.lift(z)
    }

    pub fn output_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        &self.c * self.lift_jacobian(z)
    }

    /// `x_n - V_n^T w_nl(x_r)`.
    pub fn off_manifold_vector(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let w = self.w_nl.eval(&self.project(x));
        x.rows(n, self.n_f() - n) - w.rows(n, self.n_f() - n)
    }

    pub fn off_manifold_error(&self, x: &DVector<f64>) -> f64 {
        self.off_manifold_vector(x).norm()
    }

    /// `f_nl(x) - f_nl(w(x_r))`.
    pub fn residual_e(&self, model: &FullOrderModel, x: &DVector<f64>) -> DVector<f64> {
        let f = model.nonlinearity();
        f.eval(x) - f.eval(&self.lift(&self.project(x)))
    }

    /// `(||B_n u||, ||B_r u||)`.
    pub fn input_norm_split(&self, u: &DVector<f64>) -> (f64, f64) {
        ((&self.b_n * u).norm(), (&self.b_r * u).norm())
    }
}
