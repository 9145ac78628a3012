//! High-dimensional plant in modal coordinates.
//!
//! The linear part is stored as an ordered list of real modal blocks (slowest
//! first), so `A` is block diagonal by construction and the first `n` state
//! coordinates are always the spectral-subspace coordinates.

mod assumptions;
mod benchmark;
mod disturbance;
mod nonlinearity;
mod simulate;

pub use assumptions::{check_assumptions, AssumptionReport, Resonance, ResonanceDirection};
pub use benchmark::{manufacture_benchmark, BenchmarkConfig, BenchmarkSpec, SpectraConfig};
pub use disturbance::{sample_disturbance, sample_sphere};
pub use nonlinearity::{ManufacturedNonlinearity, Nonlinearity};
pub use simulate::{simulate, simulate_interval, Schedule, Trajectory};
pub(crate) use simulate::fmt_f64;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    ScalarReal,
    RotationalPair,
}

/// One real block of the modal linear part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalBlock {
    pub kind: BlockKind,
    /// Real part of the eigenvalue(s), 1/s.
    pub decay: f64,
    /// Imaginary part, rad/s. Zero for scalar blocks.
    pub frequency: f64,
}

impl ModalBlock {
    pub fn scalar(decay: f64) -> Self {
        Self { kind: BlockKind::ScalarReal, decay, frequency: 0.0 }
    }

    pub fn rotational(decay: f64, frequency: f64) -> Self {
        Self { kind: BlockKind::RotationalPair, decay, frequency }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            BlockKind::ScalarReal => 1,
            BlockKind::RotationalPair => 2,
        }
    }

    pub fn is_hurwitz(&self) -> bool {
        self.decay < 0.0
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        match self.kind {
            BlockKind::ScalarReal => DMatrix::from_element(1, 1, self.decay),
            BlockKind::RotationalPair => DMatrix::from_row_slice(
                2,
                2,
                &[self.decay, self.frequency, -self.frequency, self.decay],
            ),
        }
    }

    pub fn eigenvalues(&self) -> Vec<Complex<f64>> {
        match self.kind {
            BlockKind::ScalarReal => vec![Complex::new(self.decay, 0.0)],
            BlockKind::RotationalPair => vec![
                Complex::new(self.decay, self.frequency),
                Complex::new(self.decay, -self.frequency),
            ],
        }
    }
}

fn validate_blocks(blocks: &[ModalBlock]) -> Result<()> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("at least one modal block is required".into()));
    }
    for (index, b) in blocks.iter().enumerate() {
        if !b.is_hurwitz() || !b.decay.is_finite() || !b.frequency.is_finite() {
            return Err(Error::NotHurwitz { index, decay: b.decay });
        }
    }
    Ok(())
}

/// Dense block-diagonal `A` assembled from modal blocks.
pub fn assemble_a(blocks: &[ModalBlock]) -> Result<DMatrix<f64>> {
    validate_blocks(blocks)?;
    let n: usize = blocks.iter().map(ModalBlock::dim).sum();
    let mut a = DMatrix::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        let d = b.dim();
        a.view_mut((off, off), (d, d)).copy_from(&b.matrix());
        off += d;
    }
    Ok(a)
}

/// `A x` for block-diagonal `A` without forming the dense matrix.
pub fn apply_blocks(blocks: &[ModalBlock], x: &DVector<f64>) -> DVector<f64> {
    let mut y = DVector::zeros(x.len());
    let mut off = 0;
    for b in blocks {
        match b.kind {
            BlockKind::ScalarReal => {
                y[off] = b.decay * x[off];
                off += 1;
            }
            BlockKind::RotationalPair => {
                let (p, q) = (x[off], x[off + 1]);
                y[off] = b.decay * p + b.frequency * q;
                y[off + 1] = -b.frequency * p + b.decay * q;
                off += 2;
            }
        }
    }
    y
}

/// Splits the block list at state index `n`. Fails if `n` cuts a rotational pair.
pub fn split_blocks(blocks: &[ModalBlock], n: usize) -> Result<(Vec<ModalBlock>, Vec<ModalBlock>)> {
    let mut off = 0;
    for (i, b) in blocks.iter().enumerate() {
        if off == n {
            return Ok((blocks[..i].to_vec(), blocks[i..].to_vec()));
        }
        off += b.dim();
        if off > n {
            return Err(Error::InvalidArgument(format!(
                "reduced dimension {n} splits a rotational pair"
            )));
        }
    }
    if off == n {
        Ok((blocks.to_vec(), Vec::new()))
    } else {
        Err(Error::InvalidArgument(format!("reduced dimension {n} exceeds state dimension {off}")))
    }
}

/// Plant `x' = A x + f_nl(x) + B u + d` in modal coordinates.
#[derive(Debug, Clone)]
pub struct FullOrderModel {
    blocks: Vec<ModalBlock>,
    nonlinearity: Nonlinearity,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d_bar: f64,
    domain_radius: f64,
}

impl FullOrderModel {
    pub fn new(
        blocks: Vec<ModalBlock>,
        nonlinearity: Nonlinearity,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d_bar: f64,
        domain_radius: f64,
    ) -> Result<Self> {
        validate_blocks(&blocks)?;
        let n_f: usize = blocks.iter().map(ModalBlock::dim).sum();
        for w in blocks.windows(2) {
            if w[1].decay > w[0].decay {
                return Err(Error::InvalidArgument(
                    "modal blocks must be ordered from slowest to fastest".into(),
                ));
            }
        }
        if b.nrows() != n_f {
            return Err(Error::DimensionMismatch { context: "input matrix rows", expected: n_f, actual: b.nrows() });
        }
        if c.ncols() != n_f {
            return Err(Error::DimensionMismatch { context: "output matrix columns", expected: n_f, actual: c.ncols() });
        }
        if let Some(dim) = nonlinearity.state_dim() {
            if dim != n_f {
                return Err(Error::DimensionMismatch { context: "nonlinearity state dimension", expected: n_f, actual: dim });
            }
        }
        if !(d_bar >= 0.0) || !(domain_radius > 0.0) {
            return Err(Error::InvalidArgument("d_bar must be >= 0 and domain_radius > 0".into()));
        }
        Ok(Self { blocks, nonlinearity, b, c, d_bar, domain_radius })
    }

    pub fn n_f(&self) -> usize {
        self.b.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn blocks(&self) -> &[ModalBlock] {
        &self.blocks
    }

    pub fn nonlinearity(&self) -> &Nonlinearity {
        &self.nonlinearity
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn d_bar(&self) -> f64 {
        self.d_bar
    }

    pub fn domain_radius(&self) -> f64 {
        self.domain_radius
    }

    pub fn with_d_bar(mut self, d_bar: f64) -> Self {
        self.d_bar = d_bar;
        self
    }

    pub fn a_matrix(&self) -> DMatrix<f64> {
        assemble_a(&self.blocks).expect("blocks validated at construction")
    }

    pub fn apply_a(&self, x: &DVector<f64>) -> DVector<f64> {
        apply_blocks(&self.blocks, x)
    }

    pub fn eigenvalues(&self) -> Vec<Complex<f64>> {
        self.blocks.iter().flat_map(ModalBlock::eigenvalues).collect()
    }

    /// `A x + f_nl(x) + B u + d`.
    pub fn eval_rhs(&self, x: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(x, u, d)?;
        Ok(self.rhs_unchecked(x, u, d))
    }

    pub(crate) fn rhs_unchecked(&self, x: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        let mut dx = self.apply_a(x);
        dx += self.nonlinearity.eval(x);
        dx.gemv(1.0, &self.b, u, 1.0);
        dx += d;
        dx
    }

    pub(crate) fn check_dims(&self, x: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>) -> Result<()> {
        let n_f = self.n_f();
        if x.len() != n_f {
            return Err(Error::DimensionMismatch { context: "state", expected: n_f, actual: x.len() });
        }
        if u.len() != self.m() {
            return Err(Error::DimensionMismatch { context: "input", expected: self.m(), actual: u.len() });
        }
        if d.len() != n_f {
            return Err(Error::DimensionMismatch { context: "disturbance", expected: n_f, actual: d.len() });
        }
        Ok(())
    }

    /// Output `y = C x`.
    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }
}
