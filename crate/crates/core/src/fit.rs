//! Data-driven tube constants fitted to an excitation experiment.
//!
//! For fixed constants the tubes propagate in closed form along the recorded
//! inputs, so feasibility of the envelope `delta(t) >= ||x_r(t) - z_r(t)||` is a
//! direct check. The constants are found by a grid search refined by coordinate
//! descent over log-spaced grids.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::fom::{fmt_f64, sample_disturbance, sample_sphere, simulate, FullOrderModel, Schedule};
use crate::ode::rk4_step;
use crate::ssm::{ConstantSource, DataDrivenConstants, RomConstants, SsmRom};
use crate::tighten::{tightening, InputBox, PolytopicConstraints};
use crate::tube::{OffManifoldModel, TubeParams, TubeState, TubeStep};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcitationPhase {
    /// Seconds.
    pub duration: f64,
    /// 2-norm of the nominal input.
    pub level: f64,
}

/// Piecewise-constant excitation: each phase holds a nonnegative input of the
/// given norm, perturbed by noise of norm `noise_norm` resampled every `period`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExcitationSchedule {
    pub phases: Vec<ExcitationPhase>,
    pub noise_norm: f64,
    pub period: f64,
    /// Time between redraws of the nominal input direction within a phase.
    pub hold: f64,
    /// Seed of the nominal directions.
    pub seed: u64,
    /// Seed of the additive noise.
    pub noise_seed: u64,
}

impl Default for ExcitationSchedule {
    fn default() -> Self {
        make_schedule()
    }
}

/// Zero, moderate, large, moderate and zero input, five seconds each.
pub fn make_schedule() -> ExcitationSchedule {
    let phase = |level| ExcitationPhase { duration: 5.0, level };
    ExcitationSchedule {
        phases: vec![phase(0.0), phase(1000.0), phase(2000.0), phase(1000.0), phase(0.0)],
        noise_norm: 400.0,
        period: 0.02,
        hold: 5.0,
        seed: 0,
        noise_seed: 0,
    }
}

impl ExcitationSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() || self.phases.iter().any(|p| !(p.duration > 0.0) || !(p.level >= 0.0)) {
            return Err(Error::Config("excitation phases need positive durations and nonnegative levels".into()));
        }
        if !(self.noise_norm >= 0.0) || !(self.period > 0.0) || !(self.hold > 0.0) {
            return Err(Error::Config("excitation noise must be nonnegative, period and hold positive".into()));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.phases.iter().map(|p| p.duration).sum()
    }

    /// Held input values, one per period, clipped to the input box. Phases with
    /// zero level carry no noise.
    pub fn inputs(&self, inputs: &InputBox) -> Result<Schedule> {
        self.validate()?;
        let m = inputs.lower.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        noise_rng.set_stream(1);
        let mut values = Vec::new();
        let mut t_end = 0.0;
        let per_hold = ((self.hold / self.period).round() as usize).max(1);
        for phase in &self.phases {
            let start = values.len();
            let mut nominal = DVector::zeros(m);
            t_end += phase.duration;
            while (values.len() as f64 + 0.5) * self.period < t_end {
                if (values.len() - start) % per_hold == 0 {
                    let dir = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal).abs());
                    nominal = dir.normalize() * phase.level;
                }
                let mut u = nominal.clone();
                if phase.level > 0.0 {
                    u += sample_sphere(&mut noise_rng, m, self.noise_norm);
                }
                for j in 0..m {
                    u[j] = u[j].clamp(inputs.lower[j], inputs.upper[j]);
                }
                values.push(u);
            }
        }
        Schedule::new(self.period, values)
    }
}

/// Time-aligned measured and predicted reduced trajectories with the held inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationData {
    pub times: Vec<f64>,
    pub x_r: Vec<DVector<f64>>,
    pub z_r: Vec<DVector<f64>>,
    /// Input held over `[times[k], times[k+1])`.
    pub u: Vec<DVector<f64>>,
}

impl ExcitationData {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `||x_r - z_r||` at every sample.
    pub fn errors(&self) -> Vec<f64> {
        self.x_r.iter().zip(&self.z_r).map(|(x, z)| (x - z).norm()).collect()
    }

    fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if n < 2 || self.x_r.len() != n || self.z_r.len() != n || self.u.len() + 1 < n {
            return Err(Error::InvalidArgument("excitation data must be time aligned with at least two samples".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("sample times must increase".into()));
        }
        Ok(())
    }
}

/// Runs the schedule on the plant from rest under sampled actuation noise and
/// integrates the reduced model with the same inputs from the same start.
pub fn run_excitation(
    model: &FullOrderModel,
    rom: &SsmRom,
    schedule: &ExcitationSchedule,
    inputs: &InputBox,
    dt_sim: f64,
    disturbance_magnitude: f64,
) -> Result<ExcitationData> {
    let u_signal = schedule.inputs(inputs)?;
    let t_final = schedule.duration();
    let periods = (t_final / schedule.period).ceil() as usize;
    let d_signal = sample_disturbance(model, disturbance_magnitude, schedule.noise_seed.wrapping_add(1), schedule.period, periods)?;
    let traj = simulate(model, &DVector::zeros(model.n_f()), &u_signal, &d_signal, t_final, dt_sim)?;
    let x_r: Vec<DVector<f64>> = traj.states.iter().map(|x| rom.project(x)).collect();
    let mut z_r = vec![x_r[0].clone()];
    for k in 1..traj.times.len() {
        let u = &traj.inputs[k - 1];
        let h = traj.times[k] - traj.times[k - 1];
        let next = rk4_step(|z| rom.reduced_rhs(z, u), &z_r[k - 1], h);
        z_r.push(next);
    }
    let u = traj.inputs[..traj.times.len() - 1].to_vec();
    Ok(ExcitationData { times: traj.times, x_r, z_r, u })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    /// Log-spaced points per axis, with zero added to each axis.
    pub grid_points: usize,
    pub refinements: usize,
    pub max_sweeps: usize,
    /// `log10` search ranges; upper ends of the rate terms are further capped by
    /// `stability_fraction` of the decay rates.
    pub log10_l_fnl: [f64; 2],
    pub log10_l_rnl: [f64; 2],
    pub log10_b_bar: [f64; 2],
    pub log10_l_bar: [f64; 2],
    pub stability_fraction: f64,
    /// Per-row weights of the objective; uniform when empty.
    pub row_weights: Vec<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            grid_points: 9,
            refinements: 3,
            max_sweeps: 8,
            log10_l_fnl: [-3.0, 3.0],
            log10_l_rnl: [-4.0, 1.0],
            log10_b_bar: [-8.0, 0.0],
            log10_l_bar: [-4.0, 2.0],
            stability_fraction: 0.95,
            row_weights: Vec::new(),
        }
    }
}

/// Fitted data-driven constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub source: ConstantSource,
    pub l_fnl: f64,
    pub l_rnl: f64,
    pub b_bar: f64,
    pub l_bar: f64,
    pub d_bar: f64,
    pub d_hat: f64,
    pub lambda_an: f64,
    pub lambda_ar: f64,
    /// Integrated weighted tightening.
    pub objective: f64,
    /// `min_t delta(t) - ||x_r(t) - z_r(t)||` on the training data.
    pub envelope_margin: f64,
    pub evaluations: usize,
}

impl FitResult {
    pub fn params(&self) -> TubeParams {
        TubeParams {
            lambda_an: self.lambda_an,
            lambda_ar: self.lambda_ar,
            l_fnl: self.l_fnl,
            l_rnl: self.l_rnl,
            d_bar: self.d_bar,
            off_manifold: OffManifoldModel::DataDriven { l_bar: self.l_bar, b_bar: self.b_bar, d_hat: self.d_hat },
        }
    }

    /// `base` with the fitted constants substituted.
    pub fn constants(&self, base: &RomConstants) -> RomConstants {
        RomConstants {
            source: ConstantSource::Fitted,
            l_fnl: self.l_fnl,
            l_rnl: self.l_rnl,
            d_bar: self.d_bar,
            data_driven: Some(DataDrivenConstants { l_bar: self.l_bar, b_bar: self.b_bar, d_hat: self.d_hat }),
            ..*base
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Tubes along recorded data, from zero initial values.
pub fn tube_envelope(params: &TubeParams, data: &ExcitationData) -> Result<Vec<TubeState>> {
    data.validate()?;
    let norms: Vec<f64> = data.u.iter().map(|u| u.norm()).collect();
    let mut out = Vec::with_capacity(data.len());
    propagate(params, &data.times, &norms, |_, st| {
        out.push(*st);
        true
    });
    Ok(out)
}

/// Visits the tube state at every sample until `visit` returns false.
fn propagate(params: &TubeParams, times: &[f64], u_norms: &[f64], mut visit: impl FnMut(usize, &TubeState) -> bool) {
    let mut st = TubeState::default();
    if !visit(0, &st) {
        return;
    }
    let mut cached: Option<(f64, TubeStep)> = None;
    let (offset, gain) = (params.s_forcing_offset(), forcing_gain(params));
    for k in 1..times.len() {
        let h = times[k] - times[k - 1];
        let step = match cached {
            Some((hh, s)) if (hh - h).abs() <= 1e-12 * h => s,
            _ => {
                let s = TubeStep::new(params, h);
                cached = Some((h, s));
                s
            }
        };
        st = step.apply(&st, offset + gain * u_norms[k - 1]);
        if !visit(k, &st) {
            return;
        }
    }
}

fn forcing_gain(params: &TubeParams) -> f64 {
    match params.off_manifold {
        OffManifoldModel::DataDriven { b_bar, .. } => b_bar,
        OffManifoldModel::ModelBased { .. } => 0.0,
    }
}

/// `min_t delta(t) - ||x_r(t) - z_r(t)||`.
pub fn envelope_margin(params: &TubeParams, data: &ExcitationData) -> Result<f64> {
    let tubes = tube_envelope(params, data)?;
    Ok(tubes.iter().zip(data.errors()).map(|(t, e)| t.delta - e).fold(f64::INFINITY, f64::min))
}

/// CSV with header `t,error,delta,s`.
pub fn write_envelope_csv<W: Write>(params: &TubeParams, data: &ExcitationData, writer: W) -> Result<()> {
    let tubes = tube_envelope(params, data)?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "error", "delta", "s"])?;
    for ((t, e), tb) in data.times.iter().zip(data.errors()).zip(&tubes) {
        w.write_record([fmt_f64(*t), fmt_f64(e), fmt_f64(tb.delta), fmt_f64(tb.s)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_envelope_csv(params: &TubeParams, data: &ExcitationData, path: &Path) -> Result<()> {
    write_envelope_csv(params, data, std::fs::File::create(path)?)
}

/// Objective and envelope margin of one constant tuple.
struct Evaluation {
    objective: f64,
    margin: f64,
}

/// One training run prepared for repeated tube propagation.
struct Run<'a> {
    times: &'a [f64],
    errors: Vec<f64>,
    u_norms: Vec<f64>,
}

struct Fitter<'a> {
    runs: Vec<Run<'a>>,
    base: TubeParams,
    w_delta: f64,
    w_s: f64,
}

impl<'a> Fitter<'a> {
    fn new(
        runs: &'a [ExcitationData],
        d_bar: f64,
        d_hat: f64,
        cons: &PolytopicConstraints,
        rom: &SsmRom,
        opts: &FitOptions,
    ) -> Result<Self> {
        let weights = if opts.row_weights.is_empty() { vec![1.0; cons.n_h()] } else { opts.row_weights.clone() };
        if weights.len() != cons.n_h() || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(format!("row weights must be {} nonnegative numbers", cons.n_h())));
        }
        let k = rom.constants();
        Ok(Fitter {
            runs: runs
                .iter()
                .map(|d| Run { times: &d.times, errors: d.errors(), u_norms: d.u.iter().map(|u| u.norm()).collect() })
                .collect(),
            base: TubeParams {
                lambda_an: k.lambda_an,
                lambda_ar: k.lambda_ar,
                l_fnl: 0.0,
                l_rnl: 0.0,
                d_bar,
                off_manifold: OffManifoldModel::DataDriven { l_bar: 0.0, b_bar: 0.0, d_hat },
            },
            w_delta: (0..cons.n_h()).map(|j| weights[j] * tightening(cons, rom, 1.0, 0.0, j)).sum(),
            w_s: (0..cons.n_h()).map(|j| weights[j] * tightening(cons, rom, 0.0, 1.0, j)).sum(),
        })
    }

    fn params(&self, c: &[f64; 4]) -> TubeParams {
        TubeParams {
            l_fnl: c[0],
            l_rnl: c[1],
            off_manifold: match self.base.off_manifold {
                OffManifoldModel::DataDriven { d_hat, .. } => OffManifoldModel::DataDriven { l_bar: c[3], b_bar: c[2], d_hat },
                other => other,
            },
            ..self.base
        }
    }

    /// Stops at the first envelope violation; the objective is then infinite.
    fn evaluate(&self, c: &[f64; 4]) -> Evaluation {
        let params = self.params(c);
        let mut margin = f64::INFINITY;
        let mut objective = 0.0;
        for run in &self.runs {
            let times = run.times;
            let mut prev = 0.0;
            propagate(&params, times, &run.u_norms, |k, st| {
                margin = margin.min(st.delta - run.errors[k]);
                let f = self.w_delta * st.delta + self.w_s * st.s;
                if k > 0 {
                    objective += 0.5 * (times[k] - times[k - 1]) * (f + prev);
                }
                prev = f;
                margin >= 0.0
            });
            if margin < 0.0 {
                break;
            }
        }
        if margin < 0.0 {
            objective = f64::INFINITY;
        }
        Evaluation { objective, margin }
    }
}

/// `log10` ranges of `(L_fnl, L_rnl, B_bar, L_bar)`, with the rate terms capped
/// below the decay rates.
fn search_ranges(opts: &FitOptions, k: &RomConstants) -> [[f64; 2]; 4] {
    let cap = |range: [f64; 2], rate: f64| {
        let hi = range[1].min((opts.stability_fraction * rate.abs()).log10());
        [range[0].min(hi), hi]
    };
    [opts.log10_l_fnl, cap(opts.log10_l_rnl, k.lambda_ar), opts.log10_b_bar, cap(opts.log10_l_bar, k.lambda_an)]
}

/// Zero followed by the log grid on each axis.
fn coarse_axes(ranges: &[[f64; 2]; 4], opts: &FitOptions) -> Vec<Vec<f64>> {
    ranges
        .iter()
        .map(|r| {
            let mut g = vec![0.0];
            g.extend(log_grid(r[0], r[1], opts.grid_points));
            g
        })
        .collect()
}

fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points <= 1 || hi <= lo {
        return vec![10f64.powf(hi)];
    }
    (0..points).map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (points - 1) as f64)).collect()
}

/// Minimizes the integrated tightening over `(L_fnl, L_rnl, B_bar, L_bar)` subject to
/// the envelope on every training run; `d_bar` and `d_hat` are held fixed. The
/// objective sums the integrated tightening over runs.
pub fn fit_tube_constants(
    runs: &[ExcitationData],
    d_bar: f64,
    d_hat: f64,
    cons: &PolytopicConstraints,
    rom: &SsmRom,
    opts: &FitOptions,
    exec: Execution,
) -> Result<FitResult> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("tube fit needs at least one excitation run".into()));
    }
    for data in runs {
        data.validate()?;
    }
    if !(d_bar >= 0.0 && d_hat >= 0.0) {
        return Err(Error::InvalidArgument("d_bar and d_hat must be nonnegative".into()));
    }
    if opts.grid_points < 2 {
        return Err(Error::Config("fit grid needs at least two points per axis".into()));
    }
    let fitter = Fitter::new(runs, d_bar, d_hat, cons, rom, opts)?;
    let ranges = search_ranges(opts, rom.constants());
    let axes = coarse_axes(&ranges, opts);

    // Coarse tensor grid.
    let sizes: Vec<usize> = axes.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().product();
    let point = |mut idx: usize| {
        let mut c = [0.0; 4];
        for a in 0..4 {
            c[a] = axes[a][idx % sizes[a]];
            idx /= sizes[a];
        }
        c
    };
    let coarse = map_indexed(exec, total, |i| fitter.evaluate(&point(i)));
    let mut evaluations = total;
    let mut best: Option<([f64; 4], f64)> = None;
    for (i, ev) in coarse.into_iter().enumerate() {
        if ev.margin >= 0.0 && best.is_none_or(|(_, o)| ev.objective < o) {
            best = Some((point(i), ev.objective));
        }
    }
    let Some((mut c, mut obj)) = best else {
        return Err(Error::FitInfeasible(format!(
            "no constants on the coarse grid bound the prediction error (largest error {:.3e}); increase d_hat or d_bar",
            fitter.runs.iter().flat_map(|r| r.errors.iter().copied()).fold(0.0, f64::max)
        )));
    };

    // Coordinate descent on windows that shrink around the incumbent.
    let mut half_width: Vec<f64> = ranges.iter().map(|r| (r[1] - r[0]) / (opts.grid_points - 1) as f64).collect();
    for _ in 0..opts.refinements {
        for _ in 0..opts.max_sweeps {
            let mut improved = false;
            for a in 0..4 {
                let center = if c[a] > 0.0 { c[a].log10() } else { ranges[a][0] };
                let lo = (center - half_width[a]).max(ranges[a][0] - half_width[a]);
                let hi = (center + half_width[a]).min(ranges[a][1]);
                let mut grid = vec![0.0];
                grid.extend(log_grid(lo, hi, opts.grid_points));
                let evals = map_indexed(exec, grid.len(), |i| {
                    let mut trial = c;
                    trial[a] = grid[i];
                    fitter.evaluate(&trial)
                });
                evaluations += grid.len();
                for (i, ev) in evals.into_iter().enumerate() {
                    if ev.margin >= 0.0 && ev.objective < obj {
                        obj = ev.objective;
                        c[a] = grid[i];
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        for h in &mut half_width {
            *h *= 2.0 / (opts.grid_points - 1) as f64;
        }
    }
    let margin = fitter.evaluate(&c).margin;
    Ok(FitResult {
        source: ConstantSource::Fitted,
        l_fnl: c[0],
        l_rnl: c[1],
        b_bar: c[2],
        l_bar: c[3],
        d_bar,
        d_hat,
        lambda_an: fitter.base.lambda_an,
        lambda_ar: fitter.base.lambda_ar,
        objective: obj,
        envelope_margin: margin,
        evaluations,
    })
}
