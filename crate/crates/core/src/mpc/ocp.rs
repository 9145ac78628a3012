use nalgebra::{DMatrix, DVector};

use super::{OcpConfig, OcpSolution, OcpStatus};
use crate::error::{Error, Result};
use crate::ode::{rk4_step, rk4_step_variational};
use crate::qp::{ConvexProgram, LinearExpr, ProgramStatus};
use crate::ssm::SsmRom;
use crate::tighten::{max_tightened_value, PolytopicConstraints, SteadyState, TerminalSet};
use crate::tube::{InputNorm, OffManifoldModel, TubeInput, TubeParams, TubeState, TubeStep};

/// Step maps of the prediction model: one RK4 step of the reduced dynamics per
/// sampling period with held input, and the exact tube map.
#[derive(Debug, Clone)]
pub struct Discretization<'a> {
    pub rom: &'a SsmRom,
    pub dt: f64,
    pub tube_step: TubeStep,
}

pub fn discretize<'a>(rom: &'a SsmRom, params: &TubeParams, cfg: &OcpConfig) -> Discretization<'a> {
    Discretization { rom, dt: cfg.dt, tube_step: TubeStep::new(params, cfg.dt) }
}

impl Discretization<'_> {
    pub fn step(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        rk4_step(|x| self.rom.reduced_rhs(x, u), z, self.dt)
    }

    /// Next state with its Jacobians with respect to state and input.
    pub fn step_linearized(&self, z: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let (n, m) = (self.rom.n(), self.rom.m());
        let mut aug = DVector::zeros(n + m);
        aug.rows_mut(0, n).copy_from(z);
        aug.rows_mut(n, m).copy_from(u);
        let f = |x: &DVector<f64>| {
            let zz = x.rows(0, n).into_owned();
            let uu = x.rows(n, m).into_owned();
            let mut v = DVector::zeros(n + m);
            v.rows_mut(0, n).copy_from(&self.rom.reduced_rhs(&zz, &uu));
            let mut j = DMatrix::zeros(n + m, n + m);
            j.view_mut((0, 0), (n, n)).copy_from(&self.rom.reduced_jacobian(&zz));
            j.view_mut((0, n), (n, m)).copy_from(self.rom.b_r());
            (v, j)
        };
        let (next, jac) = rk4_step_variational(f, &aug, self.dt);
        (next.rows(0, n).into_owned(), jac.view((0, 0), (n, n)).into_owned(), jac.view((0, n), (n, m)).into_owned())
    }
}

/// Everything the optimal control problem needs besides the measurement.
#[derive(Debug, Clone, Copy)]
pub struct OcpProblem<'a> {
    pub rom: &'a SsmRom,
    pub params: &'a TubeParams,
    /// Output constraints as given; the buffer scheme shrinks them internally.
    pub cons: &'a PolytopicConstraints,
    pub cfg: &'a OcpConfig,
    pub domain_radius: f64,
}

/// Linearization point: `z` has `N + 1` entries, `u` has `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub z: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
}

impl Iterate {
    /// Rolls the prediction model out from `z0` under `u`.
    pub fn rollout(disc: &Discretization, z0: DVector<f64>, u: Vec<DVector<f64>>) -> Self {
        let mut z = vec![z0];
        for uk in &u {
            let next = disc.step(z.last().unwrap(), uk);
            z.push(next);
        }
        Self { z, u }
    }
}

/// Steady pair tracked by the stage cost and, for the robust scheme, the terminal set.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub steady: &'a SteadyState,
    pub terminal: Option<&'a TerminalSet>,
}

/// Variable layout of a convexified subproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    /// Inputs enter the program divided by this scale.
    pub u_scale: f64,
    u0: usize,
    z0: usize,
    tubes: Option<(usize, usize)>,
    slack: Option<usize>,
}

impl Layout {
    pub fn u(&self, k: usize, j: usize) -> usize {
        self.u0 + k * self.m + j
    }

    pub fn z(&self, k: usize, i: usize) -> usize {
        self.z0 + k * self.n + i
    }

    pub fn delta(&self, k: usize) -> Option<usize> {
        self.tubes.map(|(d, _)| d + k)
    }

    pub fn s(&self, k: usize) -> Option<usize> {
        self.tubes.map(|(_, s)| s + k)
    }

    fn slack(&self, k: usize, j: usize, n_h: usize) -> Option<usize> {
        self.slack.map(|b| b + k * n_h + j)
    }

    pub fn extract(&self, x: &DVector<f64>) -> Iterate {
        Iterate {
            z: (0..=self.horizon).map(|k| DVector::from_fn(self.n, |i, _| x[self.z(k, i)])).collect(),
            u: (0..self.horizon).map(|k| DVector::from_fn(self.m, |j, _| self.u_scale * x[self.u(k, j)])).collect(),
        }
    }
}

pub struct Subproblem {
    pub program: ConvexProgram,
    pub layout: Layout,
}

fn effective_constraints(p: &OcpProblem) -> Result<PolytopicConstraints> {
    match p.cfg.scheme {
        super::Scheme::BufferSoft if !p.cfg.buffer.is_empty() => p.cons.with_buffer(&p.cfg.buffer),
        _ => Ok(p.cons.clone()),
    }
}

/// `weight (scale x - center)' M (scale x - center)` over the variables `idx`.
fn add_quadratic_form(prog: &mut ConvexProgram, idx: &[usize], scale: f64, center: &DVector<f64>, m: &DMatrix<f64>, weight: f64) {
    for a in 0..idx.len() {
        for b in 0..idx.len() {
            let w = weight * m[(a, b)];
            prog.add_quadratic(idx[a], idx[b], w * scale * scale);
            prog.add_linear(idx[a], -2.0 * w * scale * center[b]);
            prog.add_constant(w * center[a] * center[b]);
        }
    }
}

/// Convex program around the linearization point `lin` with trust radius `rho`.
pub fn build_subproblem(
    p: &OcpProblem,
    lin: &Iterate,
    x_r: &DVector<f64>,
    s0: f64,
    target: &Target,
    rho: f64,
) -> Result<Subproblem> {
    let (rom, cfg, params) = (p.rom, p.cfg, p.params);
    let (n, m, nn) = (rom.n(), rom.m(), cfg.horizon);
    if lin.z.len() != nn + 1 || lin.u.len() != nn {
        return Err(Error::DimensionMismatch { context: "linearization horizon", expected: nn, actual: lin.u.len() });
    }
    if lin.z.iter().chain(&lin.u).any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::InvalidArgument("linearization point is not finite".into()));
    }
    let robust = cfg.scheme.is_robust();
    let cons = effective_constraints(p)?;
    let n_h = cons.n_h();
    let disc = discretize(rom, params, cfg);
    let u_scale = cfg
        .input_box
        .lower
        .iter()
        .chain(&cfg.input_box.upper)
        .filter(|v| v.is_finite())
        .fold(1.0f64, |a, v| a.max(v.abs()));

    let mut n_vars = nn * m + (nn + 1) * n;
    let tubes = robust.then(|| {
        let d = n_vars;
        n_vars += 2 * (nn + 1);
        (d, d + nn + 1)
    });
    let slack = (!robust).then(|| {
        let b = n_vars;
        n_vars += (nn + 1) * n_h;
        b
    });
    let layout = Layout { n, m, horizon: nn, u_scale, u0: 0, z0: nn * m, tubes, slack };
    let mut prog = ConvexProgram::new(n_vars);

    // Stage cost.
    let (zr, ur) = (&target.steady.z, &target.steady.u);
    for k in 0..nn {
        let zi: Vec<usize> = (0..n).map(|i| layout.z(k, i)).collect();
        let ui: Vec<usize> = (0..m).map(|j| layout.u(k, j)).collect();
        add_quadratic_form(&mut prog, &zi, 1.0, zr, &cfg.q, cfg.dt);
        add_quadratic_form(&mut prog, &ui, u_scale, ur, &cfg.r, cfg.dt);
    }
    if !robust {
        let zi: Vec<usize> = (0..n).map(|i| layout.z(nn, i)).collect();
        add_quadratic_form(&mut prog, &zi, 1.0, zr, &cfg.q, cfg.dt);
    }

    // Input box.
    for k in 0..nn {
        for j in 0..m {
            prog.add_bounds(layout.u(k, j), cfg.input_box.lower[j] / u_scale, cfg.input_box.upper[j] / u_scale);
        }
    }

    // Linearized dynamics and trust region.
    for k in 0..nn {
        let (fk, jz, ju) = disc.step_linearized(&lin.z[k], &lin.u[k]);
        let offset = &fk - &jz * &lin.z[k] - &ju * &lin.u[k];
        for i in 0..n {
            let mut e = LinearExpr::var(layout.z(k + 1, i)).plus(-offset[i]);
            for c in 0..n {
                e.push(layout.z(k, c), -jz[(i, c)]);
            }
            for j in 0..m {
                e.push(layout.u(k, j), -ju[(i, j)] * u_scale);
            }
            prog.add_eq(e);
        }
    }
    let fixed_start = !robust || !cfg.free_initial_state;
    for i in 0..n {
        if fixed_start {
            prog.add_eq(LinearExpr::var(layout.z(0, i)).plus(-x_r[i]));
        }
    }
    for k in usize::from(fixed_start)..=nn {
        for i in 0..n {
            prog.add_bounds(layout.z(k, i), lin.z[k][i] - rho, lin.z[k][i] + rho);
        }
    }

    // Tubes.
    if tubes.is_some() {
        let st = disc.tube_step;
        let (d, s) = (|k| layout.delta(k).unwrap(), |k| layout.s(k).unwrap());
        prog.add_eq(LinearExpr::var(s(0)).plus(-s0));
        // delta(0) >= ||x_r - z(0)||.
        let tail = (0..n).map(|i| LinearExpr::constant(x_r[i]).term(layout.z(0, i), -1.0)).collect();
        prog.add_soc(LinearExpr::var(d(0)), tail);
        for k in 0..nn {
            let forcing = forcing_expr(&mut prog, &layout, params, rom, k, cfg.input_norm);
            // s(k+1) = phi_s s(k) + gamma_s forcing
            let mut e = LinearExpr::var(s(k + 1)).term(s(k), -st.phi_s);
            add_scaled(&mut e, &forcing, -st.gamma_s);
            prog.add_eq(e);
            // delta(k+1) = phi_d delta(k) + kappa s(k) + gamma_d + chi forcing
            let mut e = LinearExpr::var(d(k + 1)).term(d(k), -st.phi_delta).term(s(k), -st.kappa).plus(-st.gamma_delta);
            add_scaled(&mut e, &forcing, -st.chi);
            prog.add_eq(e);
        }
        for k in 0..=nn {
            prog.add_le(LinearExpr::var(d(k)).scale(-1.0));
            prog.add_le(LinearExpr::var(s(k)).scale(-1.0));
        }
        if let Some(ts) = target.terminal {
            for i in 0..n {
                prog.add_eq(LinearExpr::var(layout.z(nn, i)).plus(-ts.z_bar[i]));
            }
            prog.add_le(LinearExpr::var(d(nn)).plus(-ts.delta_max));
            prog.add_le(LinearExpr::var(s(nn)).plus(-ts.s_max));
        }
    }

    // Output constraints, linearized about the iterate.
    let l_cw = rom.constants().l_cw;
    let c_norm = rom.c_norm();
    for k in 0..=nn {
        let y0 = rom.output(&lin.z[k]);
        let jy = rom.output_jacobian(&lin.z[k]);
        let gy = cons.matrix() * &y0 - cons.bounds();
        let gj = cons.matrix() * &jy;
        for j in 0..n_h {
            let mut e = LinearExpr::constant(gy[j]);
            for i in 0..n {
                e.push(layout.z(k, i), gj[(j, i)]);
                e.constant -= gj[(j, i)] * lin.z[k][i];
            }
            if let (Some(dk), Some(sk)) = (layout.delta(k), layout.s(k)) {
                e.push(dk, cons.row_norm(j) * l_cw);
                e.push(sk, cons.row_norm(j) * c_norm);
            }
            if let Some(sl) = layout.slack(k, j, n_h) {
                e.push(sl, -1.0);
                prog.add_le(LinearExpr::var(sl).scale(-1.0));
                prog.add_linear(sl, cfg.soft_penalty);
            }
            prog.add_le(e);
        }
    }
    Ok(Subproblem { program: prog, layout })
}

fn add_scaled(e: &mut LinearExpr, f: &LinearExpr, c: f64) {
    for &(i, v) in &f.terms {
        e.push(i, c * v);
    }
    e.constant += c * f.constant;
}

/// Affine upper bound on the `s` forcing at step `k`, adding auxiliary variables.
fn forcing_expr(prog: &mut ConvexProgram, layout: &Layout, params: &TubeParams, rom: &SsmRom, k: usize, norm: InputNorm) -> LinearExpr {
    let mut f = LinearExpr::constant(params.s_forcing_offset());
    let m = layout.m;
    let us = layout.u_scale;
    let u_expr = |j: usize| LinearExpr::var(layout.u(k, j)).scale(us);
    match norm {
        InputNorm::OneNorm => {
            for (j, w) in params.input_weights(rom).into_iter().enumerate() {
                let a = prog.add_var();
                prog.add_le(u_expr(j).term(a, -1.0));
                prog.add_le(u_expr(j).scale(-1.0).term(a, -1.0));
                f.push(a, w);
            }
        }
        InputNorm::Euclidean => {
            let mut cone = |mat: Option<&DMatrix<f64>>| {
                let t = prog.add_var();
                let tail = match mat {
                    Some(b) => (0..b.nrows())
                        .map(|r| {
                            let mut e = LinearExpr::new();
                            for j in 0..m {
                                e.push(layout.u(k, j), b[(r, j)] * us);
                            }
                            e
                        })
                        .collect(),
                    None => (0..m).map(u_expr).collect(),
                };
                prog.add_soc(LinearExpr::var(t), tail);
                t
            };
            match params.off_manifold {
                OffManifoldModel::ModelBased { l_wnl } => {
                    let tn = cone(Some(rom.b_n()));
                    let tr = cone(Some(rom.b_r()));
                    f.push(tn, 1.0);
                    f.push(tr, l_wnl);
                }
                OffManifoldModel::DataDriven { b_bar, .. } => {
                    let tu = cone(None);
                    f.push(tu, b_bar);
                }
            }
        }
    }
    f
}

fn max_defect(disc: &Discretization, it: &Iterate) -> f64 {
    it.u.iter().enumerate().map(|(k, u)| (disc.step(&it.z[k], u) - &it.z[k + 1]).amax()).fold(0.0, f64::max)
}

fn stage_cost(cfg: &OcpConfig, it: &Iterate, steady: &SteadyState, terminal_cost: bool) -> f64 {
    let mut c = 0.0;
    for k in 0..cfg.horizon {
        let dz = &it.z[k] - &steady.z;
        let du = &it.u[k] - &steady.u;
        c += cfg.dt * ((dz.transpose() * &cfg.q * &dz)[0] + (du.transpose() * &cfg.r * &du)[0]);
    }
    if terminal_cost {
        let dz = &it.z[cfg.horizon] - &steady.z;
        c += cfg.dt * (dz.transpose() * &cfg.q * &dz)[0];
    }
    c
}

/// Exact tube trajectory along an iterate from the realized initial values.
pub(crate) fn propagate_tubes(p: &OcpProblem, it: &Iterate, x_r: &DVector<f64>, s0: f64) -> (Vec<f64>, Vec<f64>) {
    let step = TubeStep::new(p.params, p.cfg.dt);
    let mut st = TubeState { s: s0, delta: (x_r - &it.z[0]).norm() };
    let (mut s, mut d) = (vec![st.s], vec![st.delta]);
    for u in &it.u {
        st = step.apply(&st, p.params.s_forcing(&TubeInput::from_input(p.rom, u)));
        s.push(st.s);
        d.push(st.delta);
    }
    (s, d)
}

fn max_constraint(p: &OcpProblem, cons: &PolytopicConstraints, it: &Iterate, s: &[f64], d: &[f64]) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for (k, z) in it.z.iter().enumerate() {
        let v = if p.cfg.scheme.is_robust() {
            max_tightened_value(cons, p.rom, z, d[k], s[k])?
        } else {
            cons.values(&p.rom.output(z)).max()
        };
        worst = worst.max(v);
    }
    Ok(worst)
}

/// Sequential convex programming from the initial guess.
///
/// Steps are accepted while the nonlinear defect of the new iterate stays below a
/// tenth of the step length; otherwise the trust radius halves. Tubes of the
/// returned solution are re-propagated with exact norms.
pub fn solve_ocp(p: &OcpProblem, x_r: &DVector<f64>, s0: f64, guess: &Iterate, target: &Target) -> Result<OcpSolution> {
    p.cfg.validate(p.rom.n(), p.rom.m())?;
    if !(s0 >= 0.0) {
        return Err(Error::NegativeTube { s: s0, delta: 0.0 });
    }
    let disc = discretize(p.rom, p.params, p.cfg);
    let cons = effective_constraints(p)?;
    let tol = p.cfg.scp_tol;
    let fixed_start = !p.cfg.scheme.is_robust() || !p.cfg.free_initial_state;
    let mut rho = p.cfg.trust_radius.unwrap_or(0.5 * p.domain_radius);
    let mut cur = guess.clone();
    let mut have_solution = false;
    let mut status = OcpStatus::MaxIters;
    let mut iters = 0;
    while iters < p.cfg.max_scp_iters {
        iters += 1;
        let sub = build_subproblem(p, &cur, x_r, s0, target, rho)?;
        let sol = sub.program.solve()?;
        if sol.status != ProgramStatus::Optimal {
            if have_solution && rho > p.cfg.trust_radius_min {
                rho *= 0.5;
                continue;
            }
            status = OcpStatus::Infeasible;
            break;
        }
        let mut next = sub.layout.extract(&sol.x);
        if fixed_start {
            next.z[0] = x_r.clone();
        }
        let step = next
            .z
            .iter()
            .zip(&cur.z)
            .map(|(a, b)| (a - b).amax())
            .chain(next.u.iter().zip(&cur.u).map(|(a, b)| (a - b).amax() / sub.layout.u_scale))
            .fold(0.0, f64::max);
        let defect = max_defect(&disc, &next);
        if defect > tol && defect > 0.1 * step {
            rho *= 0.5;
            if rho < p.cfg.trust_radius_min {
                break;
            }
            continue;
        }
        cur = next;
        have_solution = true;
        if step <= tol || (p.rom.is_linear() && defect <= tol) {
            status = OcpStatus::Optimal;
            break;
        }
    }
    if !have_solution {
        status = OcpStatus::Infeasible;
    }
    let (s_traj, delta_traj) = if p.cfg.scheme.is_robust() {
        propagate_tubes(p, &cur, x_r, s0)
    } else {
        (vec![0.0; p.cfg.horizon + 1], vec![0.0; p.cfg.horizon + 1])
    };
    let defect = max_defect(&disc, &cur);
    let max_con = max_constraint(p, &cons, &cur, &s_traj, &delta_traj)?;
    if status == OcpStatus::Optimal && (defect > 1e-6 || (p.cfg.scheme.is_robust() && max_con > 1e-8)) {
        status = OcpStatus::MaxIters;
    }
    let cost = stage_cost(p.cfg, &cur, target.steady, !p.cfg.scheme.is_robust());
    Ok(OcpSolution {
        u_traj: cur.u,
        z_traj: cur.z,
        s_traj,
        delta_traj,
        cost,
        status,
        scp_iters: iters,
        defect,
        max_constraint: max_con,
    })
}
