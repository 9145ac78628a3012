//! Convex quadratic programs with affine and second-order-cone constraints.
//!
//! Problems are assembled term by term and handed to the Clarabel interior-point
//! solver; the returned point is re-checked against the original constraints.

use std::collections::BTreeMap;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use nalgebra::DVector;

use crate::error::{Error, Result};

/// Affine expression `sum_i c_i x_i + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinearExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn var(i: usize) -> Self {
        Self { terms: vec![(i, 1.0)], constant: 0.0 }
    }

    pub fn term(mut self, i: usize, c: f64) -> Self {
        if c != 0.0 {
            self.terms.push((i, c));
        }
        self
    }

    pub fn plus(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn scale(mut self, s: f64) -> Self {
        for t in &mut self.terms {
            t.1 *= s;
        }
        self.constant *= s;
        self
    }

    pub fn push(&mut self, i: usize, c: f64) {
        if c != 0.0 {
            self.terms.push((i, c));
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>() + self.constant
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SocConstraint {
    head: LinearExpr,
    tail: Vec<LinearExpr>,
}

/// `min 1/2 x' P x + q' x + c` subject to `expr = 0`, `expr <= 0` and
/// `head >= ||tail||`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexProgram {
    n_vars: usize,
    quad: BTreeMap<(usize, usize), f64>,
    linear: Vec<f64>,
    constant: f64,
    eq: Vec<LinearExpr>,
    le: Vec<LinearExpr>,
    soc: Vec<SocConstraint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProgramStatus {
    Optimal,
    Infeasible,
    Unbounded,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexSolution {
    pub status: ProgramStatus,
    pub x: DVector<f64>,
    pub objective: f64,
    /// Largest constraint violation of `x`, recomputed from the program data.
    pub primal_residual: f64,
    pub iterations: u32,
}

/// Solutions the solver reports at reduced accuracy are accepted only below this
/// recomputed residual.
pub const ACCEPT_RESIDUAL: f64 = 1e-7;

/// Distance within which a variable bound is treated as active when polishing.
const POLISH_WINDOW: f64 = 1e-4;

impl ConvexProgram {
    pub fn new(n_vars: usize) -> Self {
        Self {
            n_vars,
            quad: BTreeMap::new(),
            linear: vec![0.0; n_vars],
            constant: 0.0,
            eq: Vec::new(),
            le: Vec::new(),
            soc: Vec::new(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    /// Adds a fresh variable and returns its index.
    pub fn add_var(&mut self) -> usize {
        self.linear.push(0.0);
        self.n_vars += 1;
        self.n_vars - 1
    }

    pub fn n_constraints(&self) -> usize {
        self.eq.len() + self.le.len() + self.soc.iter().map(|c| 1 + c.tail.len()).sum::<usize>()
    }

    /// Adds `w x_i x_j` to the objective.
    pub fn add_quadratic(&mut self, i: usize, j: usize, w: f64) {
        if w == 0.0 {
            return;
        }
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        *self.quad.entry((a, b)).or_insert(0.0) += if a == b { 2.0 * w } else { w };
    }

    /// Adds `w (expr)^2` to the objective.
    pub fn add_squared(&mut self, expr: &LinearExpr, w: f64) {
        for &(i, ci) in &expr.terms {
            for &(j, cj) in &expr.terms {
                self.add_quadratic(i, j, w * ci * cj);
            }
            self.linear[i] += 2.0 * w * expr.constant * ci;
        }
        self.constant += w * expr.constant * expr.constant;
    }

    pub fn add_linear(&mut self, i: usize, w: f64) {
        self.linear[i] += w;
    }

    pub fn add_constant(&mut self, c: f64) {
        self.constant += c;
    }

    /// `expr = 0`.
    pub fn add_eq(&mut self, expr: LinearExpr) {
        self.eq.push(expr);
    }

    /// `expr <= 0`.
    pub fn add_le(&mut self, expr: LinearExpr) {
        self.le.push(expr);
    }

    /// `lo <= x_i <= hi`; infinite bounds are skipped.
    pub fn add_bounds(&mut self, i: usize, lo: f64, hi: f64) {
        if lo.is_finite() {
            self.add_le(LinearExpr::var(i).scale(-1.0).plus(lo));
        }
        if hi.is_finite() {
            self.add_le(LinearExpr::var(i).plus(-hi));
        }
    }

    /// `head >= ||tail||_2`.
    pub fn add_soc(&mut self, head: LinearExpr, tail: Vec<LinearExpr>) {
        self.soc.push(SocConstraint { head, tail });
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut v = self.constant;
        for (&(i, j), &p) in &self.quad {
            v += if i == j { 0.5 * p * x[i] * x[i] } else { p * x[i] * x[j] };
        }
        v + self.linear.iter().zip(x).map(|(q, xi)| q * xi).sum::<f64>()
    }

    /// Largest violation of any constraint at `x`.
    pub fn residual(&self, x: &[f64]) -> f64 {
        let mut r = 0.0f64;
        for e in &self.eq {
            r = r.max(e.eval(x).abs());
        }
        for e in &self.le {
            r = r.max(e.eval(x));
        }
        for c in &self.soc {
            let t = c.tail.iter().map(|e| e.eval(x).powi(2)).sum::<f64>().sqrt();
            r = r.max(t - c.head.eval(x));
        }
        r
    }

    /// Solves the program, then re-solves with nearly active variable bounds held
    /// as equalities. The polished point replaces the first one when it is feasible
    /// and no worse; this removes the interior-point offset at degenerate bounds.
    pub fn solve(&self) -> Result<ConvexSolution> {
        let first = self.solve_raw()?;
        if first.status != ProgramStatus::Optimal {
            return Ok(first);
        }
        let x = first.x.as_slice();
        let (active, free): (Vec<&LinearExpr>, Vec<&LinearExpr>) =
            self.le.iter().partition(|e| e.terms.len() == 1 && e.eval(x).abs() <= POLISH_WINDOW * e.terms[0].1.abs());
        if active.is_empty() {
            return Ok(first);
        }
        let mut polished = self.clone();
        polished.eq.extend(active.into_iter().cloned());
        polished.le = free.into_iter().cloned().collect();
        let second = polished.solve_raw()?;
        let residual = self.residual(second.x.as_slice());
        let objective = self.objective(second.x.as_slice());
        if second.status == ProgramStatus::Optimal
            && residual <= ACCEPT_RESIDUAL
            && objective <= first.objective + 1e-8 * (1.0 + first.objective.abs())
        {
            Ok(ConvexSolution { primal_residual: residual, objective, iterations: first.iterations + second.iterations, ..second })
        } else {
            Ok(first)
        }
    }

    fn solve_raw(&self) -> Result<ConvexSolution> {
        let n = self.n_vars;
        let (pi, pj, pv) = self.quad.iter().map(|(&(i, j), &v)| (i, j, v)).fold(
            (Vec::new(), Vec::new(), Vec::new()),
            |(mut a, mut b, mut c), (i, j, v)| {
                a.push(i);
                b.push(j);
                c.push(v);
                (a, b, c)
            },
        );
        let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);

        let mut rows: Vec<&LinearExpr> = Vec::new();
        let mut cones = Vec::new();
        rows.extend(&self.eq);
        if !self.eq.is_empty() {
            cones.push(SupportedConeT::ZeroConeT(self.eq.len()));
        }
        rows.extend(&self.le);
        if !self.le.is_empty() {
            cones.push(SupportedConeT::NonnegativeConeT(self.le.len()));
        }
        for c in &self.soc {
            rows.push(&c.head);
            rows.extend(&c.tail);
            cones.push(SupportedConeT::SecondOrderConeT(1 + c.tail.len()));
        }
        // Clarabel form: A x + s = b with s in the cone. Equalities and inequalities
        // use s = -expr; cone rows use s = expr.
        let n_eq_le = self.eq.len() + self.le.len();
        let mut entries: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut b = Vec::with_capacity(rows.len());
        for (r, e) in rows.iter().enumerate() {
            let sign = if r < n_eq_le { 1.0 } else { -1.0 };
            for &(i, c) in &e.terms {
                if i >= n {
                    return Err(Error::InvalidArgument(format!("variable index {i} out of range")));
                }
                *entries.entry((i, r)).or_insert(0.0) += sign * c;
            }
            b.push(-sign * e.constant);
        }
        let (ai, aj, av) = entries.iter().fold((Vec::new(), Vec::new(), Vec::new()), |(mut a, mut bb, mut c), (&(col, row), &v)| {
            a.push(row);
            bb.push(col);
            c.push(v);
            (a, bb, c)
        });
        let a = CscMatrix::new_from_triplets(rows.len(), n, ai, aj, av);

        let settings = DefaultSettings {
            verbose: false,
            max_iter: 200,
            tol_gap_abs: 1e-9,
            tol_gap_rel: 1e-9,
            tol_feas: 1e-9,
            ..DefaultSettings::default()
        };
        let mut solver = DefaultSolver::new(&p, &self.linear, &a, &b, &cones, settings)
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        let x = DVector::from_vec(sol.x.clone());
        let residual = if x.iter().all(|v| v.is_finite()) { self.residual(x.as_slice()) } else { f64::INFINITY };
        let status = match sol.status {
            SolverStatus::Solved => ProgramStatus::Optimal,
            SolverStatus::AlmostSolved | SolverStatus::MaxIterations | SolverStatus::InsufficientProgress
                if residual <= ACCEPT_RESIDUAL =>
            {
                ProgramStatus::Optimal
            }
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => ProgramStatus::Infeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => ProgramStatus::Unbounded,
            _ => ProgramStatus::Failed,
        };
        let objective = self.objective(x.as_slice());
        Ok(ConvexSolution { status, x, objective, primal_residual: residual, iterations: sol.iterations })
    }
}
