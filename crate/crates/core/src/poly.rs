//! Dense multivariate polynomial maps with no constant or linear part.
//!
//! A [`PolynomialMap`] stores one coefficient per (output, monomial) pair for
//! every monomial whose total degree lies in `[degree_min, degree_max]`. With
//! `degree_min >= 2` the map and its Jacobian both vanish at the origin, which
//! is what the nonlinear parts of the full-order model, the manifold graph and
//! the reduced drift all require.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on `output_dim * monomial_count` for a single map.
pub const MAX_COEFFICIENTS: usize = 20_000_000;

/// Multi-index of a monomial `x_0^a_0 * ... * x_{n-1}^a_{n-1}`.
pub type Exponent = Vec<u8>;

/// Enumerates all exponents with total degree in `[dmin, dmax]`, graded by degree
/// and reverse-lexicographic inside each degree.
pub fn monomial_exponents(input_dim: usize, dmin: usize, dmax: usize) -> Vec<Exponent> {
    let mut out = Vec::new();
    for d in dmin..=dmax {
        let mut current = vec![0u8; input_dim];
        fill_degree(&mut out, &mut current, 0, d);
    }
    out
}

fn fill_degree(out: &mut Vec<Exponent>, current: &mut Exponent, pos: usize, remaining: usize) {
    if pos + 1 == current.len() {
        current[pos] = remaining as u8;
        out.push(current.clone());
        current[pos] = 0;
        return;
    }
    for k in (0..=remaining).rev() {
        current[pos] = k as u8;
        fill_degree(out, current, pos + 1, remaining - k);
    }
    current[pos] = 0;
}

/// Number of monomials in `input_dim` variables with total degree in `[dmin, dmax]`.
pub fn monomial_count(input_dim: usize, dmin: usize, dmax: usize) -> usize {
    (dmin..=dmax).map(|d| binomial(input_dim + d - 1, d)).sum()
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PolynomialTable", try_from = "PolynomialTable")]
pub struct PolynomialMap {
    input_dim: usize,
    output_dim: usize,
    degree_min: usize,
    degree_max: usize,
    exponents: Vec<Exponent>,
    /// `output_dim x monomial_count`, column `k` belongs to `exponents[k]`.
    coefficients: DMatrix<f64>,
}

impl PolynomialMap {
    /// All-zero map.
    pub fn zeros(input_dim: usize, output_dim: usize, degree_min: usize, degree_max: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument("polynomial input dimension must be positive".into()));
        }
        if degree_min < 2 || degree_max < degree_min {
            return Err(Error::InvalidArgument(format!(
                "degree range [{degree_min}, {degree_max}] must satisfy 2 <= d_min <= d_max"
            )));
        }
        if degree_max > u8::MAX as usize {
            return Err(Error::CoefficientOverflow { monomials: usize::MAX, outputs: output_dim });
        }
        let count = monomial_count(input_dim, degree_min, degree_max);
        if count == usize::MAX || count.saturating_mul(output_dim.max(1)) > MAX_COEFFICIENTS {
            return Err(Error::CoefficientOverflow { monomials: count, outputs: output_dim });
        }
        let exponents = monomial_exponents(input_dim, degree_min, degree_max);
        debug_assert_eq!(exponents.len(), count);
        Ok(Self {
            input_dim,
            output_dim,
            degree_min,
            degree_max,
            coefficients: DMatrix::zeros(output_dim, exponents.len()),
            exponents,
        })
    }

    pub fn from_coefficients(
        input_dim: usize,
        degree_min: usize,
        degree_max: usize,
        coefficients: DMatrix<f64>,
    ) -> Result<Self> {
        let mut map = Self::zeros(input_dim, coefficients.nrows(), degree_min, degree_max)?;
        if coefficients.ncols() != map.exponents.len() {
            return Err(Error::DimensionMismatch {
                context: "polynomial coefficient table columns",
                expected: map.exponents.len(),
                actual: coefficients.ncols(),
            });
        }
        map.coefficients = coefficients;
        Ok(map)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn degree_range(&self) -> (usize, usize) {
        (self.degree_min, self.degree_max)
    }

    pub fn exponents(&self) -> &[Exponent] {
        &self.exponents
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.coefficients
    }

    pub fn monomial_count(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_zero(&self) -> bool {
        self.coefficients.iter().all(|c| *c == 0.0)
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.coefficients.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Column indices of monomials with total degree `d`.
    pub fn degree_block(&self, d: usize) -> std::ops::Range<usize> {
        let start = monomial_count_below(self.input_dim, self.degree_min, d);
        let len = if d < self.degree_min || d > self.degree_max {
            0
        } else {
            binomial(self.input_dim + d - 1, d)
        };
        start..start + len
    }

    fn powers(&self, x: &DVector<f64>) -> Vec<Vec<f64>> {
        x.iter()
            .map(|&xi| {
                let mut p = Vec::with_capacity(self.degree_max + 1);
                let mut acc = 1.0;
                for _ in 0..=self.degree_max {
                    p.push(acc);
                    acc *= xi;
                }
                p
            })
            .collect()
    }

    /// Monomial values at `x`, ordered like [`Self::exponents`].
    pub fn monomials(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.input_dim, "polynomial input dimension");
        let pw = self.powers(x);
        DVector::from_iterator(
            self.exponents.len(),
            self.exponents.iter().map(|e| e.iter().enumerate().map(|(i, &a)| pw[i][a as usize]).product::<f64>()),
        )
    }

    /// `monomial_count x input_dim` matrix of first partial derivatives of the monomials.
    pub fn monomial_gradients(&self, x: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(x.len(), self.input_dim, "polynomial input dimension");
        let pw = self.powers(x);
        let mut g = DMatrix::zeros(self.exponents.len(), self.input_dim);
        for (k, e) in self.exponents.iter().enumerate() {
            for i in 0..self.input_dim {
                let ai = e[i] as usize;
                if ai == 0 {
                    continue;
                }
                let mut v = ai as f64 * pw[i][ai - 1];
                for (j, &aj) in e.iter().enumerate() {
                    if j != i {
                        v *= pw[j][aj as usize];
                    }
                }
                g[(k, i)] = v;
            }
        }
        g
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.coefficients * self.monomials(x)
    }

    /// `output_dim x input_dim` Jacobian.
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        &self.coefficients * self.monomial_gradients(x)
    }

    /// Second derivative contracted with `v`: entry `(o, i)` is
    /// `sum_j d^2 p_o / (dx_i dx_j) * v_j`, i.e. the directional derivative of the
    /// Jacobian along `v`.
    pub fn jacobian_directional_derivative(&self, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(x.len(), self.input_dim, "polynomial input dimension");
        assert_eq!(v.len(), self.input_dim, "polynomial direction dimension");
        let pw = self.powers(x);
        let mut h = DMatrix::zeros(self.exponents.len(), self.input_dim);
        let mut e2 = vec![0usize; self.input_dim];
        for (k, e) in self.exponents.iter().enumerate() {
            for i in 0..self.input_dim {
                for j in 0..self.input_dim {
                    if v[j] == 0.0 {
                        continue;
                    }
                    for (l, &a) in e.iter().enumerate() {
                        e2[l] = a as usize;
                    }
                    let ci = e2[i];
                    if ci == 0 {
                        continue;
                    }
                    e2[i] -= 1;
                    let cj = e2[j];
                    if cj == 0 {
                        continue;
                    }
                    e2[j] -= 1;
                    let mut val = (ci * cj) as f64;
                    for (l, &a) in e2.iter().enumerate() {
                        val *= pw[l][a];
                    }
                    h[(k, i)] += val * v[j];
                }
            }
        }
        &self.coefficients * h
    }

    /// The map `x -> M p(x)`.
    pub fn compose_left(&self, m: &DMatrix<f64>) -> Result<Self> {
        if m.ncols() != self.output_dim {
            return Err(Error::DimensionMismatch {
                context: "left composition with polynomial map",
                expected: self.output_dim,
                actual: m.ncols(),
            });
        }
        Self::from_coefficients(self.input_dim, self.degree_min, self.degree_max, m * &self.coefficients)
    }

    /// Copy of this map re-expressed on the wider degree range `[dmin, dmax]`,
    /// which must contain the current one.
    pub fn with_degree_range(&self, dmin: usize, dmax: usize) -> Result<Self> {
        if dmin > self.degree_min || dmax < self.degree_max {
            return Err(Error::InvalidArgument(format!(
                "degree range [{dmin}, {dmax}] does not contain [{}, {}]",
                self.degree_min, self.degree_max
            )));
        }
        let mut out = Self::zeros(self.input_dim, self.output_dim, dmin, dmax)?;
        let offset = monomial_count_below(self.input_dim, dmin, self.degree_min);
        out.coefficients
            .columns_mut(offset, self.exponents.len())
            .copy_from(&self.coefficients);
        Ok(out)
    }
}

/// Serialized form; exponents are implied by the fixed monomial ordering.
#[derive(Serialize, Deserialize)]
struct PolynomialTable {
    input_dim: usize,
    degree_min: usize,
    degree_max: usize,
    #[serde(with = "crate::linalg::rows")]
    coefficients: DMatrix<f64>,
}

impl From<PolynomialMap> for PolynomialTable {
    fn from(p: PolynomialMap) -> Self {
        Self { input_dim: p.input_dim, degree_min: p.degree_min, degree_max: p.degree_max, coefficients: p.coefficients }
    }
}

impl TryFrom<PolynomialTable> for PolynomialMap {
    type Error = Error;

    fn try_from(t: PolynomialTable) -> Result<Self> {
        PolynomialMap::from_coefficients(t.input_dim, t.degree_min, t.degree_max, t.coefficients)
    }
}

fn monomial_count_below(input_dim: usize, dmin: usize, d: usize) -> usize {
    if d <= dmin {
        0
    } else {
        monomial_count(input_dim, dmin, d - 1)
    }
}
