//! Tightened polytopic output constraints and terminal ingredients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::{ConvexProgram, LinearExpr, ProgramStatus};
use crate::ssm::SsmRom;
use crate::tube::{InputNorm, TubeParams, TubeState, TubeStep};

/// Output polytope `{y : G y <= g}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConstraintTable", into = "ConstraintTable")]
pub struct PolytopicConstraints {
    g_mat: DMatrix<f64>,
    g_vec: DVector<f64>,
    row_norms: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintTable {
    rows: Vec<Vec<f64>>,
    bounds: Vec<f64>,
}

impl TryFrom<ConstraintTable> for PolytopicConstraints {
    type Error = Error;

    fn try_from(t: ConstraintTable) -> Result<Self> {
        let n_y = t.rows.first().map_or(0, Vec::len);
        if t.rows.iter().any(|r| r.len() != n_y) {
            return Err(Error::Config("constraint rows have unequal lengths".into()));
        }
        let g = DMatrix::from_row_iterator(t.rows.len(), n_y, t.rows.into_iter().flatten());
        Self::new(g, DVector::from_vec(t.bounds))
    }
}

impl From<PolytopicConstraints> for ConstraintTable {
    fn from(c: PolytopicConstraints) -> Self {
        Self {
            rows: c.g_mat.row_iter().map(|r| r.iter().copied().collect()).collect(),
            bounds: c.g_vec.iter().copied().collect(),
        }
    }
}

impl PolytopicConstraints {
    pub fn new(g_mat: DMatrix<f64>, g_vec: DVector<f64>) -> Result<Self> {
        if g_mat.nrows() != g_vec.len() {
            return Err(Error::DimensionMismatch { context: "constraint bounds", expected: g_mat.nrows(), actual: g_vec.len() });
        }
        if g_mat.nrows() == 0 {
            return Err(Error::InvalidArgument("constraint set needs at least one row".into()));
        }
        let row_norms: Vec<f64> = g_mat.row_iter().map(|r| r.norm()).collect();
        if row_norms.iter().any(|&r| !(r > 0.0 && r.is_finite())) || g_vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("constraint rows must be finite and nonzero".into()));
        }
        Ok(Self { g_mat, g_vec, row_norms })
    }

    /// Axis-aligned box `lower <= y <= upper`, rows ordered as
    /// `+y_1, .., +y_ny, -y_1, .., -y_ny`.
    pub fn from_box(lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch { context: "box bounds", expected: lower.len(), actual: upper.len() });
        }
        let n_y = lower.len();
        let mut g = DMatrix::zeros(2 * n_y, n_y);
        let mut h = DVector::zeros(2 * n_y);
        for i in 0..n_y {
            g[(i, i)] = 1.0;
            h[i] = upper[i];
            g[(n_y + i, i)] = -1.0;
            h[n_y + i] = -lower[i];
        }
        Self::new(g, h)
    }

    pub fn n_h(&self) -> usize {
        self.g_mat.nrows()
    }

    pub fn n_y(&self) -> usize {
        self.g_mat.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g_mat
    }

    pub fn bounds(&self) -> &DVector<f64> {
        &self.g_vec
    }

    /// Lipschitz constant of row `j`, `||G_j||`.
    pub fn row_norm(&self, j: usize) -> f64 {
        self.row_norms[j]
    }

    /// `G y - g`.
    pub fn values(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.g_mat * y - &self.g_vec
    }

    /// Same rows with every bound reduced by the per-row buffer.
    pub fn with_buffer(&self, buffer: &[f64]) -> Result<Self> {
        if buffer.len() != self.n_h() {
            return Err(Error::DimensionMismatch { context: "constraint buffer", expected: self.n_h(), actual: buffer.len() });
        }
        Self::new(self.g_mat.clone(), &self.g_vec - DVector::from_column_slice(buffer))
    }

    /// Whether the polytope is bounded and nonempty, by maximizing each coordinate.
    pub fn is_compact(&self) -> Result<bool> {
        for i in 0..self.n_y() {
            for sign in [1.0, -1.0] {
                let mut p = ConvexProgram::new(self.n_y());
                p.add_linear(i, -sign);
                for (j, row) in self.g_mat.row_iter().enumerate() {
                    let mut e = LinearExpr::constant(-self.g_vec[j]);
                    for (k, v) in row.iter().enumerate() {
                        e.push(k, *v);
                    }
                    p.add_le(e);
                }
                if p.solve()?.status != ProgramStatus::Optimal {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

/// Additive tightening of row `j`: `||G_j|| (L_Cw delta + ||C|| s)`.
pub fn tightening(cons: &PolytopicConstraints, rom: &SsmRom, delta: f64, s: f64, j: usize) -> f64 {
    cons.row_norm(j) * (rom.constants().l_cw * delta + rom.c_norm() * s)
}

/// `G_j C w(z) - g_j + ||G_j|| L_Cw delta + ||G_j|| ||C|| s`; nonpositive means the
/// tightened constraint holds.
pub fn tightened_value(cons: &PolytopicConstraints, rom: &SsmRom, z: &DVector<f64>, delta: f64, s: f64, j: usize) -> Result<f64> {
    if j >= cons.n_h() {
        return Err(Error::InvalidArgument(format!("constraint row {j} out of range ({} rows)", cons.n_h())));
    }
    if !(delta >= 0.0 && s >= 0.0) {
        return Err(Error::NegativeTube { s, delta });
    }
    if cons.n_y() != rom.n_y() {
        return Err(Error::DimensionMismatch { context: "constraint output dimension", expected: rom.n_y(), actual: cons.n_y() });
    }
    let y = rom.output(z);
    Ok(cons.values(&y)[j] + tightening(cons, rom, delta, s, j))
}

/// Largest tightened value over all rows.
pub fn max_tightened_value(cons: &PolytopicConstraints, rom: &SsmRom, z: &DVector<f64>, delta: f64, s: f64) -> Result<f64> {
    (0..cons.n_h()).map(|j| tightened_value(cons, rom, z, delta, s, j)).try_fold(f64::NEG_INFINITY, |a, v| Ok(a.max(v?)))
}

/// Steady pair with `A_r z + r_nl(z) + B_r u = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub z: DVector<f64>,
    pub u: DVector<f64>,
}

impl SteadyState {
    pub fn origin(rom: &SsmRom) -> Self {
        Self { z: DVector::zeros(rom.n()), u: DVector::zeros(rom.m()) }
    }

    pub fn residual(&self, rom: &SsmRom) -> f64 {
        rom.reduced_rhs(&self.z, &self.u).norm()
    }
}

/// Input bounds `lower <= u <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputBox {
    pub fn uniform(m: usize, lower: f64, upper: f64) -> Self {
        Self { lower: vec![lower; m], upper: vec![upper; m] }
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        u.iter().zip(&self.lower).zip(&self.upper).all(|((v, lo), hi)| *v >= lo - tol && *v <= hi + tol)
    }

    fn scale(&self) -> f64 {
        self.lower.iter().chain(&self.upper).filter(|v| v.is_finite()).fold(1.0f64, |a, v| a.max(v.abs()))
    }
}

const STEADY_TOL: f64 = 1e-10;

/// Steady pair reaching the output `y_ref` with the least-norm admissible input.
///
/// Damped sequential quadratic programming from `guess` (or the origin): each step
/// linearizes the steady equations and the output map and solves a small QP with
/// the input box.
pub fn solve_steady_state(rom: &SsmRom, y_ref: &DVector<f64>, inputs: &InputBox, guess: Option<&SteadyState>) -> Result<SteadyState> {
    let (n, m, n_y) = (rom.n(), rom.m(), rom.n_y());
    if y_ref.len() != n_y {
        return Err(Error::DimensionMismatch { context: "output reference", expected: n_y, actual: y_ref.len() });
    }
    if inputs.lower.len() != m || inputs.upper.len() != m {
        return Err(Error::DimensionMismatch { context: "input box", expected: m, actual: inputs.lower.len() });
    }
    let u_scale = inputs.scale();
    let mut cur = guess.cloned().unwrap_or_else(|| SteadyState::origin(rom));
    let residual = |st: &SteadyState| -> f64 {
        let r = rom.reduced_rhs(&st.z, &st.u);
        let e = rom.output(&st.z) - y_ref;
        (r.norm_squared() + e.norm_squared()).sqrt()
    };
    let mut res = residual(&cur);
    for _ in 0..50 {
        let jr = rom.reduced_jacobian(&cur.z);
        let jy = rom.output_jacobian(&cur.z);
        let r0 = rom.reduced_rhs(&cur.z, &cur.u);
        let e0 = rom.output(&cur.z) - y_ref;
        // Variables: dz (n) and the input step in units of the input scale (m).
        let mut p = ConvexProgram::new(n + m);
        // A large objective weight keeps the interior-point iterate close to active
        // input bounds.
        let weight = 1e6;
        for i in 0..n {
            p.add_quadratic(i, i, 1e-6 * weight);
        }
        for j in 0..m {
            p.add_squared(&LinearExpr::var(n + j).plus(cur.u[j] / u_scale), weight);
            p.add_bounds(n + j, (inputs.lower[j] - cur.u[j]) / u_scale, (inputs.upper[j] - cur.u[j]) / u_scale);
        }
        for i in 0..n {
            let mut e = LinearExpr::constant(r0[i]);
            for k in 0..n {
                e.push(k, jr[(i, k)]);
            }
            for j in 0..m {
                e.push(n + j, rom.b_r()[(i, j)] * u_scale);
            }
            p.add_eq(e);
        }
        for i in 0..n_y {
            let mut e = LinearExpr::constant(e0[i]);
            for k in 0..n {
                e.push(k, jy[(i, k)]);
            }
            p.add_eq(e);
        }
        let sol = p.solve()?;
        if sol.status != ProgramStatus::Optimal {
            return Err(Error::SteadyState(format!("no admissible steady input reaches output {:?}", y_ref.as_slice())));
        }
        let dz = sol.x.rows(0, n).into_owned();
        let du = sol.x.rows(n, m).into_owned() * u_scale;
        if res <= STEADY_TOL && dz.norm() <= 1e-8 && du.norm() <= 1e-6 * u_scale {
            break;
        }
        let mut step = 1.0;
        let mut next = cur.clone();
        let mut next_res = f64::INFINITY;
        while step >= 1.0 / 64.0 {
            next = SteadyState { z: &cur.z + &dz * step, u: &cur.u + &du * step };
            next_res = residual(&next);
            if next_res < res || next_res <= STEADY_TOL {
                break;
            }
            step *= 0.5;
        }
        let moved = (dz.norm() + du.norm() / u_scale) * step;
        cur = next;
        res = next_res;
        if res <= STEADY_TOL && moved <= 1e-9 {
            break;
        }
    }
    if res > 1e-8 {
        return Err(Error::SteadyState(format!("steady-state iteration stalled at residual {res:.3e}")));
    }
    Ok(cur)
}

/// Terminal ingredients: `z_N = z_bar`, `kappa = u_bar`, and the box
/// `[0, delta_max] x [0, s_max]` for the tubes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalSet {
    pub z_bar: DVector<f64>,
    pub u_bar: DVector<f64>,
    pub delta_max: f64,
    pub s_max: f64,
    /// `s` forcing at `u_bar` under the input-norm treatment of the predictions.
    pub forcing: f64,
}

/// Box corner scales tried in order.
pub const TERMINAL_SCALES: [f64; 3] = [1.05, 1.01, 1.0];

pub fn compute_terminal_set(
    rom: &SsmRom,
    params: &TubeParams,
    cons: &PolytopicConstraints,
    steady: &SteadyState,
    norm: InputNorm,
) -> Result<TerminalSet> {
    if steady.residual(rom) > 1e-8 {
        return Err(Error::SteadyState(format!("steady residual {:.3e} exceeds 1e-8", steady.residual(rom))));
    }
    let forcing = params.forcing_bound(rom, &steady.u, norm);
    let eq = params
        .steady_state_for_forcing(forcing)
        .ok_or_else(|| Error::UnstableTube(format!("s rate {:.4}, delta rate {:.4}", params.s_rate(), params.delta_rate())))?;
    let mut worst = f64::INFINITY;
    for scale in TERMINAL_SCALES {
        let ts = TerminalSet {
            z_bar: steady.z.clone(),
            u_bar: steady.u.clone(),
            delta_max: scale * eq.delta,
            s_max: scale * eq.s,
            forcing,
        };
        let v = max_tightened_value(cons, rom, &ts.z_bar, ts.delta_max, ts.s_max)?;
        if v <= 0.0 && inward_at_edges(params, &ts) {
            return Ok(ts);
        }
        worst = worst.min(v);
    }
    Err(Error::TerminalInfeasible(format!(
        "tightened constraint value {worst:.4e} > 0 at the steady state; choose a reference closer to the origin"
    )))
}

/// Tube vector field on the outer edges points into the box.
fn inward_at_edges(params: &TubeParams, ts: &TerminalSet) -> bool {
    let ds = params.s_rate() * ts.s_max + ts.forcing;
    let dd = params.delta_rate() * ts.delta_max + params.l_fnl * ts.s_max + params.d_bar;
    let tol = 1e-12;
    ds <= tol && dd <= tol
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalReport {
    pub invariant: bool,
    pub constraints_hold: bool,
    pub clf_holds: bool,
    /// Largest excursion past the box over all grid starts.
    pub max_exit: f64,
    pub max_tightened_value: f64,
}

impl TerminalReport {
    pub fn passed(&self) -> bool {
        self.invariant && self.constraints_hold && self.clf_holds
    }
}

/// Grid check of invariance over one sampling period, tightened constraints along
/// the way, and the stage-cost decrease at the steady pair.
pub fn check_terminal(ts: &TerminalSet, rom: &SsmRom, params: &TubeParams, cons: &PolytopicConstraints, dt: f64) -> Result<TerminalReport> {
    let step_full = TubeStep::new(params, dt);
    let samples = 20;
    let mut starts = Vec::new();
    for i in 0..=samples {
        let f = i as f64 / samples as f64;
        starts.push(TubeState { s: ts.s_max, delta: f * ts.delta_max });
        starts.push(TubeState { s: f * ts.s_max, delta: ts.delta_max });
        starts.push(TubeState { s: 0.0, delta: f * ts.delta_max });
        starts.push(TubeState { s: f * ts.s_max, delta: 0.0 });
    }
    let mut max_exit = 0.0f64;
    let mut max_val = f64::NEG_INFINITY;
    let sub_steps: Vec<TubeStep> = (1..=10).map(|k| TubeStep::new(params, dt * k as f64 / 10.0)).collect();
    for st in &starts {
        let end = step_full.apply(st, ts.forcing);
        max_exit = max_exit.max(end.s - ts.s_max).max(end.delta - ts.delta_max).max(-end.s).max(-end.delta);
        for sub in &sub_steps {
            let mid = sub.apply(st, ts.forcing);
            max_val = max_val.max(max_tightened_value(cons, rom, &ts.z_bar, mid.delta.max(0.0), mid.s.max(0.0))?);
        }
    }
    let scale = 1e-12 * (1.0 + ts.s_max + ts.delta_max);
    let steady = SteadyState { z: ts.z_bar.clone(), u: ts.u_bar.clone() };
    Ok(TerminalReport {
        invariant: max_exit <= scale,
        constraints_hold: max_val <= 0.0,
        clf_holds: steady.residual(rom) <= 1e-8,
        max_exit,
        max_tightened_value: max_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::{manufacture_benchmark, BenchmarkConfig};
    use crate::ssm::RomConstants;
    use rand::Rng;

    fn small() -> SsmRom {
        manufacture_benchmark(&BenchmarkConfig::small_test().to_spec().unwrap()).unwrap().1
    }

    fn unit_box() -> PolytopicConstraints {
        PolytopicConstraints::from_box(&[-0.3, -0.3], &[0.3, 0.3]).unwrap()
    }

    #[test]
    fn row_norms_are_euclidean() {
        let g = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 1.0, -1.0]);
        let c = PolytopicConstraints::new(g, DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(c.row_norm(0), 5.0);
        assert!((c.row_norm(1) - 2f64.sqrt()).abs() < 1e-15);
        assert!(!c.is_compact().unwrap());
        assert!(unit_box().is_compact().unwrap());
    }

    #[test]
    fn zero_tubes_give_plain_constraint() {
        let rom = small();
        let cons = unit_box();
        let z = DVector::from_vec(vec![0.1, -0.05, 0.02, 0.03]);
        let y = rom.output(&z);
        for j in 0..cons.n_h() {
            let plain = cons.values(&y)[j];
            assert_eq!(tightened_value(&cons, &rom, &z, 0.0, 0.0, j).unwrap(), plain);
            assert!(tightened_value(&cons, &rom, &z, 0.01, 0.0, j).unwrap() > plain);
            assert!(tightened_value(&cons, &rom, &z, 0.0, 0.01, j).unwrap() > plain);
        }
        assert!(tightened_value(&cons, &rom, &z, 0.0, 0.0, 99).is_err());
    }

    #[test]
    fn tightening_is_sound_under_sampled_errors() {
        let spec = BenchmarkConfig::small_test().to_spec().unwrap();
        let (model, rom) = manufacture_benchmark(&spec).unwrap();
        let cons = unit_box();
        let mut rng = crate::ssm::sample_rng(3, 0);
        let mut checked = 0;
        for _ in 0..10000 {
            let f: [f64; 5] = rng.random();
            let (delta, s) = (0.05 * f[1], 0.05 * f[2]);
            let z = crate::fom::sample_sphere(&mut rng, rom.n(), 0.4 * f[0]);
            let er = crate::fom::sample_sphere(&mut rng, rom.n(), delta * f[3]);
            let en = crate::fom::sample_sphere(&mut rng, rom.n_f() - rom.n(), s * f[4]);
            let mut x = rom.lift(&(&z + er));
            let mut tail = x.rows_mut(rom.n(), rom.n_f() - rom.n());
            tail += &en;
            if x.norm() > model.domain_radius() {
                continue;
            }
            let y = model.output(&x);
            for j in 0..cons.n_h() {
                let tv = tightened_value(&cons, &rom, &z, delta, s, j).unwrap();
                if tv <= 0.0 {
                    assert!(cons.values(&y)[j] <= 0.0);
                }
                assert!(cons.values(&y)[j] <= tv + 1e-12);
            }
            checked += 1;
        }
        assert!(checked > 9000);
    }

    #[test]
    fn steady_state_hits_output() {
        let rom = small();
        let inputs = InputBox::uniform(rom.m(), 0.0, 2500.0);
        let y = DVector::from_vec(vec![0.2, -0.1]);
        let st = solve_steady_state(&rom, &y, &inputs, None).unwrap();
        assert!(st.residual(&rom) <= 1e-8);
        assert!((rom.output(&st.z) - &y).norm() <= 1e-8);
        assert!(inputs.contains(&st.u, 1e-9));
        let origin = solve_steady_state(&rom, &DVector::zeros(2), &inputs, None).unwrap();
        assert!(origin.z.norm() <= 1e-9 && origin.u.norm() <= 1e-4, "{origin:?}");
    }

    #[test]
    fn degenerate_terminal_box_at_origin() {
        let rom = small();
        let k = RomConstants::linear(-30.0, -2.0, 1.0);
        let p = TubeParams::model_based(&k, 0.0);
        let ts = compute_terminal_set(&rom, &p, &unit_box(), &SteadyState::origin(&rom), InputNorm::OneNorm).unwrap();
        assert_eq!((ts.delta_max, ts.s_max), (0.0, 0.0));
        assert!(check_terminal(&ts, &rom, &p, &unit_box(), 0.02).unwrap().passed());
    }

    #[test]
    fn terminal_box_at_scaled_equilibrium() {
        let rom = small();
        let p = TubeParams::model_based(rom.constants(), 0.05);
        let inputs = InputBox::uniform(rom.m(), 0.0, 2500.0);
        let st = solve_steady_state(&rom, &DVector::from_vec(vec![0.1, 0.1]), &inputs, None).unwrap();
        let ts = compute_terminal_set(&rom, &p, &unit_box(), &st, InputNorm::OneNorm).unwrap();
        let forcing = p.forcing_bound(&rom, &st.u, InputNorm::OneNorm);
        // Analytic equilibrium of the two linear scalar equations.
        let s_eq = -forcing / p.s_rate();
        let d_eq = -(p.l_fnl * s_eq + p.d_bar) / p.delta_rate();
        assert!((ts.s_max - 1.05 * s_eq).abs() <= 1e-12 * s_eq);
        assert!((ts.delta_max - 1.05 * d_eq).abs() <= 1e-12 * d_eq);
        let report = check_terminal(&ts, &rom, &p, &unit_box(), 0.02).unwrap();
        assert!(report.passed(), "{report:?}");

        // A box beyond the equilibrium stays invariant but breaks the tightened constraints.
        let inflated = TerminalSet { delta_max: 10.0 * ts.delta_max, s_max: 10.0 * ts.s_max, ..ts.clone() };
        let report = check_terminal(&inflated, &rom, &p, &unit_box(), 0.02).unwrap();
        assert!(report.invariant && !report.constraints_hold && !report.passed());
        // A box inside the equilibrium is left by the flow.
        let shrunk = TerminalSet { delta_max: 0.5 * ts.delta_max, s_max: 0.5 * ts.s_max, ..ts.clone() };
        assert!(!check_terminal(&shrunk, &rom, &p, &unit_box(), 0.02).unwrap().invariant);
    }

    #[test]
    fn unreachable_reference_is_rejected() {
        let rom = small();
        let p = TubeParams::model_based(rom.constants(), 0.05);
        let inputs = InputBox::uniform(rom.m(), 0.0, 2500.0);
        let st = solve_steady_state(&rom, &DVector::from_vec(vec![0.3, 0.0]), &inputs, None).unwrap();
        let r = compute_terminal_set(&rom, &p, &unit_box(), &st, InputNorm::OneNorm);
        assert!(matches!(r, Err(Error::TerminalInfeasible(_))));
    }

    #[test]
    fn constraint_table_round_trip() {
        let c = unit_box();
        let text = toml::to_string(&c).unwrap();
        let back: PolytopicConstraints = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert!(c.with_buffer(&[0.01, 0.0, 0.0, 0.0]).unwrap().bounds()[0] < 0.3);
    }
}
