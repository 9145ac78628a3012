use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::controller::{Controller, StepStatus};
use super::ocp::OcpProblem;
use super::{OcpConfig, Reference, Scheme};
use crate::error::{Error, Result};
use crate::fom::{fmt_f64, sample_disturbance, simulate_interval, FullOrderModel};
use crate::ode::rk4_step;
use crate::ssm::SsmRom;
use crate::tighten::PolytopicConstraints;
use crate::tube::{TubeInput, TubeParams, TubeState, TubeStep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClosedLoopOptions {
    pub t_final: f64,
    pub dt_sim: f64,
    /// Norm of the actuation noise `u_d` in `d = B u_d`.
    pub disturbance_magnitude: f64,
    pub seed: u64,
    /// Initial full state; the origin when empty.
    pub x0: Vec<f64>,
    /// Steps at which the solver is forced to fail.
    pub faults: Vec<usize>,
}

impl Default for ClosedLoopOptions {
    fn default() -> Self {
        Self { t_final: 10.0, dt_sim: 0.002, disturbance_magnitude: 10.0, seed: 0, x0: Vec::new(), faults: Vec::new() }
    }
}

/// One simulation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub status: StepStatus,
    pub u: DVector<f64>,
    /// Nominal reduced state.
    pub z_r: DVector<f64>,
    /// Measured reduced coordinates of the plant.
    pub x_r: DVector<f64>,
    pub s: f64,
    pub delta: f64,
    /// `G y - g` at the plant output; positive entries are violations.
    pub con: DVector<f64>,
    pub y: DVector<f64>,
    pub y_ref: DVector<f64>,
    /// Realized off-manifold error and reduced error.
    pub off_manifold: f64,
    pub reduced_error: f64,
}

impl TraceRow {
    pub fn max_con(&self) -> f64 {
        self.con.max()
    }
}

/// One controller invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub status: StepStatus,
    pub theta: f64,
    pub scp_iters: usize,
    pub attempts: usize,
    pub solve_seconds: f64,
    /// Output of the steady pair tracked after the step.
    pub y_governed: DVector<f64>,
    pub u: DVector<f64>,
    pub u_steady: DVector<f64>,
    pub tracking_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrace {
    pub scheme: Scheme,
    pub seed: u64,
    pub rows: Vec<TraceRow>,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub scheme: Scheme,
    pub seed: u64,
    pub steps: usize,
    /// Samples with a positive constraint value.
    pub violations: usize,
    pub max_violation: f64,
    pub mean_tracking_error: f64,
    pub max_tracking_error: f64,
    pub final_tracking_error: f64,
    pub optimal_steps: usize,
    pub suboptimal_steps: usize,
    pub fallback_steps: usize,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
    /// SCP iterations per step, as `iterations -> count`.
    #[serde(with = "histogram")]
    pub scp_histogram: BTreeMap<usize, usize>,
    /// Largest realized error over tube bound; at most one when the tubes hold.
    pub max_s_ratio: f64,
    pub max_delta_ratio: f64,
}

impl TraceSummary {
    pub fn optimal_fraction(&self) -> f64 {
        if self.steps == 0 {
            1.0
        } else {
            self.optimal_steps as f64 / self.steps as f64
        }
    }
}

/// Histogram as `[[key, count], ...]`, since TOML keys must be strings.
mod histogram {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(h: &BTreeMap<usize, usize>, s: S) -> Result<S::Ok, S::Error> {
        h.iter().map(|(k, v)| [*k, *v]).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, usize>, D::Error> {
        Ok(Vec::<[usize; 2]>::deserialize(d)?.into_iter().map(|[k, v]| (k, v)).collect())
    }
}

fn ratio(err: f64, bound: f64) -> f64 {
    if err <= 1e-12 {
        0.0
    } else if bound <= 0.0 {
        f64::INFINITY
    } else {
        err / bound
    }
}

impl ClosedLoopTrace {
    pub fn summary(&self) -> TraceSummary {
        let violations = self.rows.iter().filter(|r| r.max_con() > 0.0).count();
        let max_violation = self.rows.iter().map(|r| r.max_con()).fold(f64::NEG_INFINITY, f64::max).max(0.0);
        let n = self.steps.len();
        let mean_tracking_error = if n == 0 { 0.0 } else { self.steps.iter().map(|s| s.tracking_error).sum::<f64>() / n as f64 };
        let count = |st: StepStatus| self.steps.iter().filter(|s| s.status == st).count();
        let times: Vec<f64> = self.steps.iter().map(|s| s.solve_seconds * 1e3).collect();
        let mut scp_histogram = BTreeMap::new();
        for s in &self.steps {
            *scp_histogram.entry(s.scp_iters).or_insert(0) += 1;
        }
        let robust = self.scheme.is_robust();
        let max_ratio = |f: &dyn Fn(&TraceRow) -> f64| if robust { self.rows.iter().map(f).fold(0.0, f64::max) } else { f64::NAN };
        TraceSummary {
            scheme: self.scheme,
            seed: self.seed,
            steps: n,
            violations,
            max_violation,
            mean_tracking_error,
            max_tracking_error: self.steps.iter().map(|s| s.tracking_error).fold(0.0, f64::max),
            final_tracking_error: self.rows.last().map_or(0.0, |r| (&r.y - &r.y_ref).norm()),
            optimal_steps: count(StepStatus::Optimal),
            suboptimal_steps: count(StepStatus::Suboptimal),
            fallback_steps: count(StepStatus::Fallback),
            mean_solve_ms: if n == 0 { 0.0 } else { times.iter().sum::<f64>() / n as f64 },
            max_solve_ms: times.iter().copied().fold(0.0, f64::max),
            scp_histogram,
            max_s_ratio: max_ratio(&|r| ratio(r.off_manifold, r.s)),
            max_delta_ratio: max_ratio(&|r| ratio(r.reduced_error, r.delta)),
        }
    }

    /// CSV with header `t,scheme,status,u_*,zr_*,xr_*,s,delta,con_*,y_*,yref_*`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let Some(first) = self.rows.first() else {
            w.flush()?;
            return Ok(());
        };
        let names = |prefix: &'static str, n: usize| (1..=n).map(move |i| format!("{prefix}_{i}"));
        let mut header = vec!["t".to_string(), "scheme".into(), "status".into()];
        header.extend(names("u", first.u.len()));
        header.extend(names("zr", first.z_r.len()));
        header.extend(names("xr", first.x_r.len()));
        header.push("s".into());
        header.push("delta".into());
        header.extend(names("con", first.con.len()));
        header.extend(names("y", first.y.len()));
        header.extend(names("yref", first.y_ref.len()));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![fmt_f64(r.t), self.scheme.name().to_string(), r.status.name().to_string()];
            for v in [&r.u, &r.z_r, &r.x_r] {
                rec.extend(v.iter().map(|x| fmt_f64(*x)));
            }
            rec.push(fmt_f64(r.s));
            rec.push(fmt_f64(r.delta));
            for v in [&r.con, &r.y, &r.y_ref] {
                rec.extend(v.iter().map(|x| fmt_f64(*x)));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Closed-loop run of the controller on the full-order plant under sampled
/// actuation noise. Inputs are held over each control period; the plant is
/// integrated at `dt_sim`.
#[allow(clippy::too_many_arguments)]
pub fn run_closed_loop(
    model: &FullOrderModel,
    rom: &SsmRom,
    params: &TubeParams,
    cons: &PolytopicConstraints,
    cfg: &OcpConfig,
    reference: &Reference,
    opts: &ClosedLoopOptions,
) -> Result<ClosedLoopTrace> {
    reference.validate(rom.n_y())?;
    if cons.n_y() != model.n_y() {
        return Err(Error::DimensionMismatch { context: "constraint outputs", expected: model.n_y(), actual: cons.n_y() });
    }
    if !(opts.dt_sim > 0.0) || !(opts.t_final >= 0.0) {
        return Err(Error::InvalidArgument("dt_sim must be positive and t_final nonnegative".into()));
    }
    let mut x = if opts.x0.is_empty() { DVector::zeros(model.n_f()) } else { DVector::from_column_slice(&opts.x0) };
    if x.len() != model.n_f() {
        return Err(Error::DimensionMismatch { context: "initial state", expected: model.n_f(), actual: x.len() });
    }
    let problem = OcpProblem { rom, params, cons, cfg, domain_radius: model.domain_radius() };
    let mut ctrl = Controller::new(problem, rom.off_manifold_error(&x))?;
    for &k in &opts.faults {
        ctrl.inject_fault(k);
    }
    let period = cfg.dt;
    let periods = (opts.t_final / period).round() as usize;
    let dist = sample_disturbance(model, opts.disturbance_magnitude, opts.seed, period, periods)?;

    let mut trace = ClosedLoopTrace { scheme: cfg.scheme, seed: opts.seed, rows: Vec::new(), steps: Vec::with_capacity(periods) };
    let make_row = |t: f64, x: &DVector<f64>, status, u: &DVector<f64>, z: &DVector<f64>, tube: TubeState, y_ref: &DVector<f64>| {
        let y = model.output(x);
        let x_r = rom.project(x);
        TraceRow {
            t,
            status,
            u: u.clone(),
            reduced_error: (&x_r - z).norm(),
            z_r: z.clone(),
            x_r,
            s: tube.s,
            delta: tube.delta,
            con: cons.values(&y),
            off_manifold: rom.off_manifold_error(x),
            y,
            y_ref: y_ref.clone(),
        }
    };

    for k in 0..periods {
        let t0 = k as f64 * period;
        let y_ref = reference.at(t0);
        let x_r = rom.project(&x);
        let clock = Instant::now();
        let out = ctrl.step(&x_r, &y_ref).map_err(|e| e.in_stage("mpc"))?;
        let solve_seconds = clock.elapsed().as_secs_f64();
        let sol = &out.solution;
        let y = model.output(&x);
        trace.steps.push(StepRecord {
            t: t0,
            status: out.status,
            theta: out.theta,
            scp_iters: out.scp_iters,
            attempts: out.attempts,
            solve_seconds,
            y_governed: rom.output(&ctrl.state().steady.z),
            u: out.u.clone(),
            u_steady: ctrl.state().steady.u.clone(),
            tracking_error: (&y - &y_ref).norm(),
        });

        let start = sol.tube(0);
        let u = &out.u;
        let forcing = params.s_forcing(&TubeInput::from_input(rom, u));
        if k == 0 {
            trace.rows.push(make_row(t0, &x, out.status, u, &sol.z_traj[0], start, &y_ref));
        }
        let mut z = sol.z_traj[0].clone();
        let mut last_t = t0;
        let d = dist.at(t0 + 0.5 * period).clone();
        let rows = &mut trace.rows;
        x = simulate_interval(model, &x, u, &d, t0, period, opts.dt_sim, |t, xs| {
            z = rk4_step(|zz| rom.reduced_rhs(zz, u), &z, t - last_t);
            last_t = t;
            let tube = TubeStep::new(params, t - t0).apply(&start, forcing);
            rows.push(make_row(t, xs, out.status, u, &z, tube, &y_ref));
        })?;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::{manufacture_benchmark, BenchmarkConfig};
    use crate::linalg::spectral_norm;

    fn setup() -> (FullOrderModel, SsmRom, TubeParams, PolytopicConstraints, OcpConfig) {
        let (model, rom) = manufacture_benchmark(&BenchmarkConfig::small_test().to_spec().unwrap()).unwrap();
        let params = TubeParams::model_based(rom.constants(), model.d_bar());
        let cons = PolytopicConstraints::from_box(&[-0.3, -0.3], &[0.3, 0.3]).unwrap();
        let cfg = OcpConfig::for_dims(rom.n(), rom.m());
        (model, rom, params, cons, cfg)
    }

    #[test]
    fn zero_reference_from_rest_keeps_the_margin() {
        let (model, rom, params, cons, cfg) = setup();
        let reference = Reference::Setpoint { output: vec![0.0, 0.0] };
        let opts = ClosedLoopOptions { t_final: 0.4, disturbance_magnitude: 0.0, ..Default::default() };
        let trace = run_closed_loop(&model, &rom, &params, &cons, &cfg, &reference, &opts).unwrap();
        assert_eq!(trace.rows.len(), 201);
        assert!(trace.rows.iter().all(|r| r.max_con() <= -0.3 + 1e-9));
        let sum = trace.summary();
        assert_eq!((sum.violations, sum.optimal_steps, sum.steps), (0, 20, 20));
    }

    #[test]
    fn runs_are_deterministic_and_tubes_hold() {
        let (model, rom, params, cons, cfg) = setup();
        let reference = Reference::Setpoint { output: vec![0.05, -0.05] };
        let magnitude = 0.9 * model.d_bar() / spectral_norm(model.b());
        let opts = ClosedLoopOptions { t_final: 0.3, disturbance_magnitude: magnitude, seed: 4, ..Default::default() };
        let a = run_closed_loop(&model, &rom, &params, &cons, &cfg, &reference, &opts).unwrap();
        let b = run_closed_loop(&model, &rom, &params, &cons, &cfg, &reference, &opts).unwrap();
        assert_eq!(a.rows, b.rows);
        let sum = a.summary();
        assert_eq!(sum.violations, 0);
        assert!(sum.max_s_ratio <= 1.0 + 1e-9 && sum.max_delta_ratio <= 1.0 + 1e-9, "{sum:?}");
    }

    #[test]
    fn csv_columns_follow_the_schema() {
        let (model, rom, params, cons, cfg) = setup();
        let reference = Reference::Setpoint { output: vec![0.0, 0.0] };
        let opts = ClosedLoopOptions { t_final: 0.02, dt_sim: 0.01, disturbance_magnitude: 0.0, ..Default::default() };
        let trace = run_closed_loop(&model, &rom, &params, &cons, &cfg, &reference, &opts).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,scheme,status,u_1,u_2,u_3,u_4,zr_1,zr_2,zr_3,zr_4,xr_1,xr_2,xr_3,xr_4,s,delta,con_1,con_2,con_3,con_4,y_1,y_2,yref_1,yref_2"
        );
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 25);
        assert_eq!((row[1], row[2]), ("rn-rompc", "optimal"));
        assert_eq!(lines.count(), 2);
    }
}
