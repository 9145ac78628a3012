//! Acceptance checks on the manufactured benchmark. Prints one PASS/FAIL line
//! per criterion and exits nonzero if any fails.
//!
//! Run with `cargo test -p rn-rompc --test acceptance`.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rn_rompc::experiment::{build_benchmark, build_rom, fit_tubes, run_schemes, ExperimentConfig, RomKind};
use rn_rompc::fom::{manufacture_benchmark, sample_sphere, BenchmarkConfig, FullOrderModel};
use rn_rompc::mpc::{
    discretize, run_closed_loop, solve_ocp, ClosedLoopOptions, ClosedLoopTrace, Iterate, OcpConfig, OcpProblem, Reference, Scheme, StepStatus,
    Target,
};
use rn_rompc::qp::{ConvexProgram, LinearExpr, ProgramStatus};
use rn_rompc::ssm::SsmRom;
use rn_rompc::tighten::{solve_steady_state, InputBox, PolytopicConstraints, SteadyState};
use rn_rompc::tube::{propagate_interval, verify_prop1, OffManifoldModel, TubeInput, TubeParams, TubeState, VerifyOptions};
use rn_rompc::{Execution, Result};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

/// Shared benchmark, built once.
struct Bench {
    model: FullOrderModel,
    rom: SsmRom,
}

fn bench() -> Bench {
    let (model, rom) = manufacture_benchmark(&BenchmarkConfig::default().to_spec().unwrap()).unwrap();
    Bench { model, rom }
}

fn ball<R: Rng>(rng: &mut R, dim: usize, radius: f64) -> DVector<f64> {
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    sample_sphere(rng, dim, r)
}

// ---------------------------------------------------------------------------
// 1. Tube soundness.

fn tube_soundness(b: &Bench) -> Result<Verdict> {
    let params = TubeParams::model_based(b.rom.constants(), b.model.d_bar());
    let report = verify_prop1(&b.model, &b.rom, &params, 500, 2.0, 0, &VerifyOptions::default(), Execution::Parallel)?;
    let (v, s, d) = (report.violations(), report.max_s_ratio(), report.max_delta_ratio());
    Ok(Verdict::new(
        v == 0 && s <= 1.0 && d <= 1.0,
        format!("trials 500, violations {v}, left domain {}, max s ratio {s:.4}, max delta ratio {d:.4} (need 0 and <= 1)", report.left_domain()),
    ))
}

// ---------------------------------------------------------------------------
// 2. Manifold identities. In modal coordinates V_r = [I; 0] and V_n = [0; I].

fn manifold_identities(b: &Bench) -> Result<Verdict> {
    let (rom, model) = (&b.rom, &b.model);
    let (n, nf) = (rom.n(), rom.n_f());
    let mut v_r = DMatrix::zeros(nf, n);
    v_r.view_mut((0, 0), (n, n)).fill_with_identity();
    let mut v_n = DMatrix::zeros(nf, nf - n);
    v_n.view_mut((n, 0), (nf - n, nf - n)).fill_with_identity();
    let a = model.a_matrix();
    let radius = model.domain_radius();
    let f = model.nonlinearity();
    let l_fnl = rom.constants().l_fnl;

    let orthogonality = (v_r.transpose() * &a * &v_n).amax().max((v_n.transpose() * &a * &v_r).amax());
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut normal_only, mut invariance, mut round_trip, mut tangent, mut lemma4) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let z = ball(&mut rng, n, 0.5 * radius);
        let w = rom.w_nl().eval(&z);
        normal_only = normal_only.max((&v_n * (v_n.transpose() * &w) - &w).amax());
        tangent = tangent.max((v_r.transpose() * &w).amax());
        let x = &v_r * &z + &w;
        round_trip = round_trip.max((rom.project(&rom.lift(&z)) - &z).amax());
        // Normal component of the invariance equation.
        let r = rom.a_r() * &z + rom.r_nl().eval(&z);
        let lhs = v_n.transpose() * rom.w_nl().jacobian(&z) * &r;
        let rhs = v_n.transpose() * (&a * &w + f.eval(&x));
        invariance = invariance.max((lhs - rhs).amax());
        // Off-manifold perturbation kept inside the certified ball.
        let room = (radius - x.norm()).max(0.0);
        let off = ball(&mut rng, nf - n, room);
        let xp = &x + &v_n * &off;
        let on = &v_r * &z + rom.w_nl().eval(&z);
        let e = f.eval(&xp) - f.eval(&on);
        let xn_tilde = v_n.transpose() * (&xp - &on);
        lemma4 = lemma4.max(e.norm() - l_fnl * xn_tilde.norm());
    }
    let pass = normal_only <= 1e-12 && tangent <= 1e-12 && round_trip <= 1e-12 && orthogonality <= 1e-12 && invariance <= 1e-6 && lemma4 <= 1e-12;
    Ok(Verdict::new(
        pass,
        format!(
            "1000 samples: normal projection {normal_only:.1e}, tangent part {tangent:.1e}, round trip {round_trip:.1e}, \
             block orthogonality {orthogonality:.1e} (tol 1e-12); invariance residual {invariance:.1e} (tol 1e-6); \
             max ||e|| - L_fnl ||x_n~|| = {lemma4:.2e} (need <= 1e-12)"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 3-5. Closed loop on the square reference.

fn square_runs() -> Result<(ExperimentConfig, Vec<ClosedLoopTrace>, PolytopicConstraints)> {
    let cfg = ExperimentConfig { seeds: (1..=10).collect(), schemes: vec![Scheme::RnRompc, Scheme::NominalSoft], ..Default::default() };
    let bench = build_benchmark(&cfg)?;
    let rom = build_rom(&cfg, &bench)?;
    let cons = cfg.constraints.build()?;
    let params = TubeParams::model_based(rom.constants(), bench.model.d_bar());
    let traces = run_schemes(&cfg, &bench.model, &rom, &params, &cons)?;
    Ok((cfg, traces, cons))
}

fn robust_constraints(traces: &[ClosedLoopTrace]) -> Verdict {
    let runs: Vec<_> = traces.iter().filter(|t| t.scheme == Scheme::RnRompc).map(ClosedLoopTrace::summary).collect();
    let violations: usize = runs.iter().map(|s| s.violations).sum();
    let worst = runs.iter().map(|s| s.max_violation).fold(f64::NEG_INFINITY, f64::max);
    let samples: usize = traces.iter().filter(|t| t.scheme == Scheme::RnRompc).map(|t| t.rows.len()).sum();
    Verdict::new(violations == 0, format!("rn-rompc, 10 seeds x 10 s: {violations} violating samples of {samples}, max G C x - g = {worst:.3e} (need <= 0)"))
}

fn baseline_contrast(traces: &[ClosedLoopTrace]) -> Verdict {
    let runs: Vec<_> = traces.iter().filter(|t| t.scheme == Scheme::NominalSoft).map(ClosedLoopTrace::summary).collect();
    let violations: usize = runs.iter().map(|s| s.violations).sum();
    let per_seed: Vec<String> = runs.iter().map(|s| format!("{}:{}/{:.2e}", s.seed, s.violations, s.max_violation.max(0.0))).collect();
    Verdict::new(violations >= 1, format!("nominal-soft: {violations} violating samples (need >= 1); seed:count/max {}", per_seed.join(" ")))
}

fn recursive_feasibility(traces: &[ClosedLoopTrace]) -> Verdict {
    let runs: Vec<_> = traces.iter().filter(|t| t.scheme == Scheme::RnRompc).collect();
    let steps: usize = runs.iter().map(|t| t.steps.len()).sum();
    let optimal = runs.iter().flat_map(|t| &t.steps).filter(|s| s.status == StepStatus::Optimal).count();
    let fallback = runs.iter().flat_map(|t| &t.steps).filter(|s| s.status == StepStatus::Fallback).count();
    Verdict::new(optimal == steps && fallback == 0, format!("rn-rompc: {optimal}/{steps} steps optimal, {fallback} fallbacks (need all optimal, none)"))
}

// ---------------------------------------------------------------------------
// 6. Convergence to a constant setpoint.

fn convergence(b: &Bench, cfg: &ExperimentConfig, cons: &PolytopicConstraints) -> Result<Verdict> {
    let y = DVector::from_vec(vec![0.1, 0.1]);
    let ocp = OcpConfig { scheme: Scheme::RnRompc, ..cfg.ocp.clone() };
    let steady = solve_steady_state(&b.rom, &y, &ocp.input_box, None)?;
    let params = TubeParams::model_based(b.rom.constants(), b.model.d_bar());
    let reference = Reference::Setpoint { output: y.iter().copied().collect() };
    let opts = ClosedLoopOptions { t_final: 8.0, seed: 1, ..Default::default() };
    let trace = run_closed_loop(&b.model, &b.rom, &params, cons, &ocp, &reference, &opts)?;
    // Nominal state at each sampling instant after 5 s.
    let tol = 1e-9;
    let instants = |t: f64| t >= 5.0 - tol && ((t / ocp.dt) - (t / ocp.dt).round()).abs() < 1e-6;
    let z_err = trace.rows.iter().filter(|r| instants(r.t)).map(|r| (&r.z_r - &steady.z).norm()).fold(0.0, f64::max);
    let u_err = trace.steps.iter().filter(|s| s.t >= 5.0 - tol).map(|s| (&s.u - &steady.u).norm()).fold(0.0, f64::max);
    Ok(Verdict::new(
        z_err <= 1e-3 && u_err <= 1e-3,
        format!("setpoint (0.1, 0.1) under disturbance: after 5 s max ||z*(0) - z_bar|| = {z_err:.2e}, max ||u - u_bar|| = {u_err:.2e} (tol 1e-3)"),
    ))
}

// ---------------------------------------------------------------------------
// 7. Fitted envelope.

fn fit_envelope() -> Result<Verdict> {
    let mut cfg = ExperimentConfig::default();
    cfg.rom.source = RomKind::Fitted;
    let bench = build_benchmark(&cfg)?;
    let rom = build_rom(&cfg, &bench)?;
    let cons = cfg.constraints.build()?;
    let fit = fit_tubes(&cfg, &bench.model, &rom, &cons)?;
    let r = &fit.result;
    // Zero-input equilibrium of the fitted tubes.
    let s_ss = r.d_hat / -(r.lambda_an + r.l_bar);
    let delta_ss = (r.l_fnl * s_ss + r.d_bar) / -(r.lambda_ar + r.l_rnl);
    let envelope = rn_rompc::fit::tube_envelope(&r.params(), &fit.train)?;
    let last = envelope.last().copied().unwrap_or_default();
    let settle = (last.delta - delta_ss).abs() / delta_ss;
    let pass = r.envelope_margin >= 0.0 && fit.heldout_margin >= 0.0 && delta_ss > 0.0 && settle <= 0.01;
    Ok(Verdict::new(
        pass,
        format!(
            "quadratic fitted rom, d_bar = d_hat = {:.4e}: l_fnl {:.3e} l_rnl {:.3e} b_bar {:.3e} l_bar {:.3e}; \
             training margin {:.3e}, held-out margin {:.3e} (need >= 0); final delta {:.5e} vs steady {delta_ss:.5e}, \
             relative gap {settle:.1e} (tol 1e-2)",
            r.d_bar, r.l_fnl, r.l_rnl, r.b_bar, r.l_bar, r.envelope_margin, fit.heldout_margin, last.delta
        ),
    ))
}

/// Same protocol without realized disturbance and a tight bound; reported only.
fn tight_fit() -> Result<String> {
    let mut cfg = ExperimentConfig::default();
    cfg.rom.source = RomKind::Fitted;
    cfg.tubes.d_bar = Some(1e-3);
    cfg.tubes.d_hat = Some(1e-3);
    cfg.tubes.excitation_disturbance = 0.0;
    let bench = build_benchmark(&cfg)?;
    let rom = build_rom(&cfg, &bench)?;
    let fit = fit_tubes(&cfg, &bench.model, &rom, &cfg.constraints.build()?)?;
    let r = &fit.result;
    Ok(format!(
        "d_bar = d_hat = 1e-3, no disturbance: l_fnl {:.3e} l_rnl {:.3e} b_bar {:.3e} l_bar {:.3e}; training margin {:.3e}, held-out margin {:.3e}",
        r.l_fnl, r.l_rnl, r.b_bar, r.l_bar, r.envelope_margin, fit.heldout_margin
    ))
}

// ---------------------------------------------------------------------------
// 8. Solver correctness.

/// Random convex QP with a planted optimum: active inequalities carry positive
/// multipliers, inactive ones have slack, so the KKT point is known.
fn planted_qp(rng: &mut ChaCha8Rng) -> (ConvexProgram, DVector<f64>, DMatrix<f64>, DVector<f64>) {
    let n = rng.random_range(2..=50);
    let m_eq = rng.random_range(0..=n / 3);
    let m_in = rng.random_range(0..=n);
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let p = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    let a = DMatrix::from_fn(m_eq, n, |_, _| rng.random_range(-1.0..1.0));
    let g = DMatrix::from_fn(m_in, n, |_, _| rng.random_range(-1.0..1.0));
    let x_star = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let nu = DVector::from_fn(m_eq, |_, _| rng.random_range(-1.0..1.0));
    let active: Vec<bool> = (0..m_in).map(|_| rng.random_bool(0.5)).collect();
    let lam = DVector::from_fn(m_in, |i, _| if active[i] { rng.random_range(0.1..1.0) } else { 0.0 });
    let q = -(&p * &x_star) - a.transpose() * &nu - g.transpose() * &lam;
    let b = &a * &x_star;
    let h = DVector::from_fn(m_in, |i, _| (g.row(i) * &x_star)[0] + if active[i] { 0.0 } else { rng.random_range(0.1..1.0) });
    let mut prog = ConvexProgram::new(n);
    for i in 0..n {
        prog.add_linear(i, q[i]);
        for j in i..n {
            prog.add_quadratic(i, j, if i == j { 0.5 * p[(i, i)] } else { p[(i, j)] });
        }
    }
    let row = |m: &DMatrix<f64>, r: usize, c: f64| {
        let mut e = LinearExpr::constant(c);
        for i in 0..n {
            e.push(i, m[(r, i)]);
        }
        e
    };
    for r in 0..m_eq {
        prog.add_eq(row(&a, r, -b[r]));
    }
    for r in 0..m_in {
        prog.add_le(row(&g, r, -h[r]));
    }
    // Equality-constrained KKT system restricted to the active set.
    let act: Vec<usize> = (0..m_in).filter(|&i| active[i]).collect();
    let k = m_eq + act.len();
    let mut c = DMatrix::zeros(k, n);
    let mut d = DVector::zeros(k);
    for r in 0..m_eq {
        c.row_mut(r).copy_from(&a.row(r));
        d[r] = b[r];
    }
    for (j, &i) in act.iter().enumerate() {
        c.row_mut(m_eq + j).copy_from(&g.row(i));
        d[m_eq + j] = h[i];
    }
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p);
    kkt.view_mut((0, n), (n, k)).copy_from(&c.transpose());
    kkt.view_mut((n, 0), (k, n)).copy_from(&c);
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-&q));
    rhs.rows_mut(n, k).copy_from(&d);
    (prog, x_star, kkt, rhs)
}

/// Condensed linear MPC with the same stage cost and RK4 discretization.
fn dense_linear_mpc(rom: &SsmRom, cfg: &OcpConfig, x0: &DVector<f64>, target: &SteadyState) -> Vec<DVector<f64>> {
    let (n, m, nn, h) = (rom.n(), rom.m(), cfg.horizon, cfg.dt);
    let ha = rom.a_r() * h;
    let i = DMatrix::<f64>::identity(n, n);
    let ha2 = &ha * &ha;
    let ha3 = &ha2 * &ha;
    let ad = &i + &ha + &ha2 / 2.0 + &ha3 / 6.0 + &ha3 * &ha / 24.0;
    let bd = (&i + &ha / 2.0 + &ha2 / 6.0 + &ha3 / 24.0) * rom.b_r() * h;
    let mut f = vec![x0.clone()];
    let mut s = vec![DMatrix::zeros(n, nn * m)];
    for k in 0..nn {
        let fk = &ad * &f[k];
        let mut sk = &ad * &s[k];
        sk.view_mut((0, k * m), (n, m)).copy_from(&bd);
        f.push(fk);
        s.push(sk);
    }
    let mut hess = DMatrix::zeros(nn * m, nn * m);
    let mut grad = DVector::zeros(nn * m);
    for k in 0..nn {
        let e = &f[k] - &target.z;
        hess += s[k].transpose() * &cfg.q * &s[k] * h;
        grad += s[k].transpose() * &cfg.q * e * h;
        let mut sel = DMatrix::zeros(m, nn * m);
        sel.view_mut((0, k * m), (m, m)).fill_with_identity();
        hess += sel.transpose() * &cfg.r * &sel * h;
        grad -= sel.transpose() * &cfg.r * &target.u * h;
    }
    let u = hess.lu().solve(&(-grad)).unwrap();
    (0..nn).map(|k| u.rows(k * m, m).into_owned()).collect()
}

fn solver_correctness() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut qp_err = 0.0f64;
    let mut not_optimal = 0;
    for _ in 0..100 {
        let (prog, x_star, kkt, rhs) = planted_qp(&mut rng);
        let n = x_star.len();
        let oracle = kkt.lu().solve(&rhs).map(|v| v.rows(0, n).into_owned()).unwrap_or(x_star);
        let sol = prog.solve()?;
        if sol.status != ProgramStatus::Optimal {
            not_optimal += 1;
        }
        qp_err = qp_err.max((&sol.x - oracle).amax());
    }

    let cfg = BenchmarkConfig::default().linear();
    let (_, rom) = manufacture_benchmark(&cfg.to_spec()?)?;
    let params = TubeParams::frozen(rom.constants().lambda_an, rom.constants().lambda_ar);
    let cons = PolytopicConstraints::from_box(&[-10.0, -10.0], &[10.0, 10.0])?;
    let mut ocfg = OcpConfig::for_dims(rom.n(), rom.m());
    ocfg.r = DMatrix::identity(rom.m(), rom.m()) * 1e-2;
    ocfg.input_box = InputBox::uniform(rom.m(), -100.0, 100.0);
    ocfg.free_initial_state = false;
    ocfg.horizon = 5;
    let prob = OcpProblem { rom: &rom, params: &params, cons: &cons, cfg: &ocfg, domain_radius: 10.0 };
    let mut mpc_err = 0.0f64;
    for _ in 0..20 {
        let x0 = DVector::from_fn(rom.n(), |_, _| rng.random_range(-0.1..0.1));
        let target = SteadyState {
            z: DVector::from_fn(rom.n(), |_, _| rng.random_range(-0.05..0.05)),
            u: DVector::from_fn(rom.m(), |_, _| rng.random_range(0.0..5.0)),
        };
        let disc = discretize(&rom, &params, &ocfg);
        let guess = Iterate::rollout(&disc, x0.clone(), vec![DVector::zeros(rom.m()); ocfg.horizon]);
        let sol = solve_ocp(&prob, &x0, 0.0, &guess, &Target { steady: &target, terminal: None })?;
        for (a, b) in sol.u_traj.iter().zip(dense_linear_mpc(&rom, &ocfg, &x0, &target)) {
            mpc_err = mpc_err.max((a - b).amax());
        }
    }
    Ok(Verdict::new(
        qp_err <= 1e-6 && not_optimal == 0 && mpc_err <= 1e-6,
        format!("100 planted QPs (<= 50 vars): max |x - x_kkt| = {qp_err:.2e}, non-optimal {not_optimal}; frozen linear MPC: max |u - u_dense| = {mpc_err:.2e} (tol 1e-6)"),
    ))
}

// ---------------------------------------------------------------------------
// 9. Exact tube propagation.

/// Tube right-hand side written out from the coefficients.
fn tube_field(p: &TubeParams, input: &TubeInput, y: [f64; 2]) -> [f64; 2] {
    let (s_rate, forcing) = match p.off_manifold {
        OffManifoldModel::ModelBased { l_wnl } => {
            (p.lambda_an + (1.0 + l_wnl) * p.l_fnl, (1.0 + l_wnl) * p.d_bar + input.bn_norm + l_wnl * input.br_norm)
        }
        OffManifoldModel::DataDriven { l_bar, b_bar, d_hat } => (p.lambda_an + l_bar, d_hat + b_bar * input.u_norm),
    };
    [s_rate * y[0] + forcing, (p.lambda_ar + p.l_rnl) * y[1] + p.l_fnl * y[0] + p.d_bar]
}

/// Adaptive Dormand-Prince 5(4) integration.
fn dopri(p: &TubeParams, input: &TubeInput, y0: [f64; 2], t_final: f64) -> [f64; 2] {
    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const E: [f64; 7] = [71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0];
    let (rtol, atol) = (1e-14, 1e-16);
    let (mut t, mut y, mut h) = (0.0, y0, t_final.min(1e-4));
    while t < t_final {
        h = h.min(t_final - t);
        let mut k = [[0.0; 2]; 7];
        k[0] = tube_field(p, input, y);
        for st in 1..7 {
            let mut yy = y;
            for (j, kj) in k.iter().enumerate().take(st) {
                yy[0] += h * A[st - 1][j] * kj[0];
                yy[1] += h * A[st - 1][j] * kj[1];
            }
            k[st] = tube_field(p, input, yy);
        }
        let mut y5 = y;
        for j in 0..6 {
            y5[0] += h * A[5][j] * k[j][0];
            y5[1] += h * A[5][j] * k[j][1];
        }
        let mut err: f64 = 0.0;
        for i in 0..2 {
            let e: f64 = (0..7).map(|j| h * E[j] * k[j][i]).sum();
            err = err.max(e.abs() / (atol + rtol * y[i].abs().max(y5[i].abs())));
        }
        if err <= 1.0 {
            t += h;
            y = y5;
        }
        h *= (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
    }
    y
}

fn random_params(rng: &mut ChaCha8Rng) -> TubeParams {
    let lambda_an = -rng.random_range(1.0..60.0);
    let lambda_ar = if rng.random_bool(0.3) { lambda_an } else { -rng.random_range(0.5..10.0) };
    let off_manifold = if rng.random_bool(0.5) {
        OffManifoldModel::ModelBased { l_wnl: rng.random_range(0.0..2.0) }
    } else {
        OffManifoldModel::DataDriven { l_bar: rng.random_range(0.0..0.5), b_bar: rng.random_range(0.0..1e-4), d_hat: rng.random_range(0.0..0.1) }
    };
    TubeParams { lambda_an, lambda_ar, l_fnl: rng.random_range(0.0..1.0), l_rnl: rng.random_range(0.0..0.3), d_bar: rng.random_range(0.0..0.1), off_manifold }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn tube_exactness() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut ode_err, mut flow_err) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let p = random_params(&mut rng);
        let input = TubeInput { bn_norm: rng.random_range(0.0..50.0), br_norm: rng.random_range(0.0..50.0), u_norm: rng.random_range(0.0..2500.0) };
        let st = TubeState::new(rng.random_range(0.0..0.1), rng.random_range(0.0..0.1))?;
        let dt = rng.random_range(1e-3..0.5);
        let exact = propagate_interval(&p, &st, &input, dt)?;
        let oracle = dopri(&p, &input, [st.s, st.delta], dt);
        ode_err = ode_err.max(rel(exact.s, oracle[0])).max(rel(exact.delta, oracle[1]));
        let half = propagate_interval(&p, &propagate_interval(&p, &st, &input, dt / 2.0)?, &input, dt / 2.0)?;
        flow_err = flow_err.max(rel(half.s, exact.s)).max(rel(half.delta, exact.delta));
    }
    Ok(Verdict::new(
        ode_err <= 1e-10 && flow_err <= 1e-12,
        format!("200 random coefficient sets: max gap to adaptive ODE {ode_err:.2e} (tol 1e-10), half-step composition {flow_err:.2e} (tol 1e-12)"),
    ))
}

// ---------------------------------------------------------------------------

fn report(id: usize, name: &str, started: Instant, verdict: Result<Verdict>) -> bool {
    let secs = started.elapsed().as_secs_f64();
    let v = verdict.unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
    println!("[{}] {id}. {name} ({secs:.1} s): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    v.pass
}

fn main() -> ExitCode {
    let mut ok = true;
    let t = Instant::now();
    let b = bench();
    println!("benchmark: n_f {}, n {}, d_bar {:.4e}, L_fnl {:.4e} ({:.1} s)", b.model.n_f(), b.rom.n(), b.model.d_bar(), b.rom.constants().l_fnl, t.elapsed().as_secs_f64());

    let t = Instant::now();
    ok &= report(1, "tube soundness", t, tube_soundness(&b));
    let t = Instant::now();
    ok &= report(2, "manifold identities", t, manifold_identities(&b));

    let t = Instant::now();
    match square_runs() {
        Ok((cfg, traces, cons)) => {
            ok &= report(3, "robust constraint satisfaction", t, Ok(robust_constraints(&traces)));
            ok &= report(4, "baseline contrast", t, Ok(baseline_contrast(&traces)));
            ok &= report(5, "recursive feasibility", t, Ok(recursive_feasibility(&traces)));
            let t = Instant::now();
            ok &= report(6, "convergence", t, convergence(&b, &cfg, &cons));
        }
        Err(e) => {
            for (id, name) in [(3, "robust constraint satisfaction"), (4, "baseline contrast"), (5, "recursive feasibility"), (6, "convergence")] {
                ok &= report(id, name, t, Err(rn_rompc::Error::InvalidArgument(format!("closed-loop runs failed: {e}"))));
            }
        }
    }

    let t = Instant::now();
    ok &= report(7, "fitted envelope", t, fit_envelope());
    match tight_fit() {
        Ok(line) => println!("[INFO] 7. tight fit, not asserted: {line}"),
        Err(e) => println!("[INFO] 7. tight fit, not asserted: error: {e}"),
    }
    let t = Instant::now();
    ok &= report(8, "solver correctness", t, solver_correctness());
    let t = Instant::now();
    ok &= report(9, "exact tube propagation", t, tube_exactness());

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
