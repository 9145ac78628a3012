//! Small dense linear-algebra helpers.

use nalgebra::{DMatrix, DVector};

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    // Gram of the smaller side keeps the eigenproblem small.
    let g = if m.nrows() <= m.ncols() { m * m.transpose() } else { m.transpose() * m };
    max_eigenvalue(&g).max(0.0).sqrt()
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    if sym.is_empty() {
        return f64::NEG_INFINITY;
    }
    sym.clone().symmetric_eigenvalues().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
}

/// Logarithmic 2-norm `max eig((A + A^T)/2)`.
pub fn log_norm(a: &DMatrix<f64>) -> f64 {
    max_eigenvalue(&((a + a.transpose()) * 0.5))
}

/// Euclidean norm of each row.
pub fn row_norms(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |i, _| m.row(i).norm())
}

/// Serde adapter storing a dense matrix as a list of rows.
pub mod rows {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    /// A list of rows, or `[ncols, rows]` for matrices without rows.
    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Rows(Vec<Vec<f64>>),
        Sized(usize, Vec<Vec<f64>>),
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        if m.nrows() > 0 { Repr::Rows(rows) } else { Repr::Sized(m.ncols(), rows) }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let (ncols, rows) = match Repr::deserialize(d)? {
            Repr::Rows(rows) if rows.is_empty() => return Err(D::Error::custom("a matrix without rows needs the form [ncols, []]")),
            Repr::Rows(rows) => (rows[0].len(), rows),
            Repr::Sized(ncols, rows) => (ncols, rows),
        };
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
    }
}
