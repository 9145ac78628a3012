//! Scalar error tubes: `s` bounds the distance to the manifold, `delta` bounds the
//! reduced-state prediction error.
//!
//! Both tubes obey linear scalar ODEs with input-dependent forcing, so they are
//! propagated in closed form over any interval with constant input.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::fom::{sample_disturbance, sample_sphere, simulate_interval, FullOrderModel};
use crate::ode::rk4_step;
use crate::ssm::{RomConstants, SsmRom};

/// Treatment of input norms in the predicted tubes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputNorm {
    /// Column-weighted 1-norm over-bound; keeps the program a QP.
    #[default]
    OneNorm,
    /// Exact 2-norms through second-order cones.
    Euclidean,
}

/// Off-manifold bound variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum OffManifoldModel {
    /// `s' = (lambda_an + (1 + L_wnl) L_fnl) s + (1 + L_wnl) d_bar + ||B_n u|| + L_wnl ||B_r u||`.
    ModelBased { l_wnl: f64 },
    /// `s' = (lambda_an + L_bar) s + B_bar ||u|| + d_hat`.
    DataDriven { l_bar: f64, b_bar: f64, d_hat: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeParams {
    pub lambda_an: f64,
    pub lambda_ar: f64,
    pub l_fnl: f64,
    pub l_rnl: f64,
    pub d_bar: f64,
    pub off_manifold: OffManifoldModel,
}

impl TubeParams {
    pub fn model_based(k: &RomConstants, d_bar: f64) -> Self {
        Self {
            lambda_an: k.lambda_an,
            lambda_ar: k.lambda_ar,
            l_fnl: k.l_fnl,
            l_rnl: k.l_rnl,
            d_bar,
            off_manifold: OffManifoldModel::ModelBased { l_wnl: k.l_wnl },
        }
    }

    pub fn data_driven(k: &RomConstants, d_bar: f64, l_bar: f64, b_bar: f64, d_hat: f64) -> Self {
        Self {
            lambda_an: k.lambda_an,
            lambda_ar: k.lambda_ar,
            l_fnl: k.l_fnl,
            l_rnl: k.l_rnl,
            d_bar,
            off_manifold: OffManifoldModel::DataDriven { l_bar, b_bar, d_hat },
        }
    }

    /// Tubes that stay at zero: every rate and forcing term vanishes except the
    /// decay, which keeps the dynamics stable.
    pub fn frozen(lambda_an: f64, lambda_ar: f64) -> Self {
        Self {
            lambda_an,
            lambda_ar,
            l_fnl: 0.0,
            l_rnl: 0.0,
            d_bar: 0.0,
            off_manifold: OffManifoldModel::DataDriven { l_bar: 0.0, b_bar: 0.0, d_hat: 0.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut nonneg = vec![self.l_fnl, self.l_rnl, self.d_bar];
        match self.off_manifold {
            OffManifoldModel::ModelBased { l_wnl } => nonneg.push(l_wnl),
            OffManifoldModel::DataDriven { l_bar, b_bar, d_hat } => nonneg.extend([l_bar, b_bar, d_hat]),
        }
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("tube coefficients must be finite and nonnegative".into()));
        }
        if !(self.lambda_an.is_finite() && self.lambda_ar.is_finite()) {
            return Err(Error::InvalidArgument("tube decay rates must be finite".into()));
        }
        Ok(())
    }

    /// Rate of the `s` equation.
    pub fn s_rate(&self) -> f64 {
        match self.off_manifold {
            OffManifoldModel::ModelBased { l_wnl } => self.lambda_an + (1.0 + l_wnl) * self.l_fnl,
            OffManifoldModel::DataDriven { l_bar, .. } => self.lambda_an + l_bar,
        }
    }

    /// Rate of the `delta` equation.
    pub fn delta_rate(&self) -> f64 {
        self.lambda_ar + self.l_rnl
    }

    pub fn is_stable(&self) -> bool {
        self.s_rate() < 0.0 && self.delta_rate() < 0.0
    }

    /// Input-independent part of the `s` forcing.
    pub fn s_forcing_offset(&self) -> f64 {
        match self.off_manifold {
            OffManifoldModel::ModelBased { l_wnl } => (1.0 + l_wnl) * self.d_bar,
            OffManifoldModel::DataDriven { d_hat, .. } => d_hat,
        }
    }

    /// Full `s` forcing for the given input norms.
    pub fn s_forcing(&self, input: &TubeInput) -> f64 {
        self.s_forcing_offset()
            + match self.off_manifold {
                OffManifoldModel::ModelBased { l_wnl } => input.bn_norm + l_wnl * input.br_norm,
                OffManifoldModel::DataDriven { b_bar, .. } => b_bar * input.u_norm,
            }
    }

    /// Weights `w` with input forcing bounded by `sum_j w_j |u_j|` (triangle inequality
    /// over the input columns).
    pub fn input_weights(&self, rom: &SsmRom) -> Vec<f64> {
        (0..rom.m())
            .map(|j| match self.off_manifold {
                OffManifoldModel::ModelBased { l_wnl } => rom.b_n().column(j).norm() + l_wnl * rom.b_r().column(j).norm(),
                OffManifoldModel::DataDriven { b_bar, .. } => b_bar,
            })
            .collect()
    }

    /// `s` forcing under the chosen input-norm treatment; never below the exact value.
    pub fn forcing_bound(&self, rom: &SsmRom, u: &DVector<f64>, norm: InputNorm) -> f64 {
        match norm {
            InputNorm::Euclidean => self.s_forcing(&TubeInput::from_input(rom, u)),
            InputNorm::OneNorm => {
                self.s_forcing_offset() + self.input_weights(rom).iter().zip(u.iter()).map(|(w, v)| w * v.abs()).sum::<f64>()
            }
        }
    }

    /// Equilibrium under constant forcing, if both tubes are stable.
    pub fn steady_state_for_forcing(&self, forcing: f64) -> Option<TubeState> {
        if !self.is_stable() {
            return None;
        }
        let s = -forcing / self.s_rate();
        let delta = -(self.l_fnl * s + self.d_bar) / self.delta_rate();
        Some(TubeState { s, delta })
    }

    /// Equilibrium under constant input, if both tubes are stable.
    pub fn steady_state(&self, input: &TubeInput) -> Option<TubeState> {
        self.steady_state_for_forcing(self.s_forcing(input))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TubeState {
    pub s: f64,
    pub delta: f64,
}

impl TubeState {
    pub fn new(s: f64, delta: f64) -> Result<Self> {
        let st = Self { s, delta };
        st.check()?;
        Ok(st)
    }

    fn check(&self) -> Result<()> {
        if self.s >= 0.0 && self.delta >= 0.0 {
            Ok(())
        } else {
            Err(Error::NegativeTube { s: self.s, delta: self.delta })
        }
    }
}

/// Input norms entering the `s` forcing.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TubeInput {
    pub bn_norm: f64,
    pub br_norm: f64,
    pub u_norm: f64,
}

impl TubeInput {
    pub fn from_input(rom: &SsmRom, u: &DVector<f64>) -> Self {
        let (bn_norm, br_norm) = rom.input_norm_split(u);
        Self { bn_norm, br_norm, u_norm: u.norm() }
    }
}

/// `(ds/dt, d delta/dt)`.
pub fn tube_rhs(params: &TubeParams, state: &TubeState, input: &TubeInput) -> Result<(f64, f64)> {
    state.check()?;
    let ds = params.s_rate() * state.s + params.s_forcing(input);
    let dd = params.delta_rate() * state.delta + params.l_fnl * state.s + params.d_bar;
    Ok((ds, dd))
}

/// `(e^x - e^y) / (x - y)`, continuous at `x = y`.
pub fn exp_divided_difference(x: f64, y: f64) -> f64 {
    let h = 0.5 * (x - y);
    let mid = (0.5 * (x + y)).exp();
    let sinhc = if h.abs() < 1e-3 {
        let h2 = h * h;
        1.0 + h2 / 6.0 * (1.0 + h2 / 20.0 * (1.0 + h2 / 42.0))
    } else {
        h.sinh() / h
    };
    mid * sinhc
}

/// Second divided difference of `exp` on `{x0, x1, x2}`.
pub fn exp_divided_difference2(x0: f64, x1: f64, x2: f64) -> f64 {
    let mut p = [x0, x1, x2];
    p.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let spread = p[2] - p[0];
    if spread > 1.0 {
        return (exp_divided_difference(p[1], p[2]) - exp_divided_difference(p[0], p[1])) / spread;
    }
    // Taylor series about the mean: e^m * sum_k h_k(d) / (k + 2)!, where h_k is the
    // complete homogeneous symmetric polynomial of the deviations.
    let m = (p[0] + p[1] + p[2]) / 3.0;
    let d = [p[0] - m, p[1] - m, p[2] - m];
    // h_k for one, two and three variables, built incrementally.
    let mut h1 = 1.0;
    let mut h2 = 1.0;
    let mut h3 = 1.0;
    let mut fact = 2.0;
    let mut sum = 0.5;
    // Deviations are below 2/3 in magnitude, so 24 terms reach machine precision.
    for k in 1..24 {
        h1 *= d[0];
        h2 = h1 + d[1] * h2;
        h3 = h2 + d[2] * h3;
        fact *= (k + 2) as f64;
        sum += h3 / fact;
    }
    m.exp() * sum
}

/// `(e^x - 1) / x`.
pub fn phi1(x: f64) -> f64 {
    if x.abs() < 1e-5 {
        1.0 + x / 2.0 * (1.0 + x / 3.0)
    } else {
        x.exp_m1() / x
    }
}

/// Exact one-interval map of the tube dynamics under constant forcing `c`:
///
/// ```text
/// s(dt)     = phi_s s + gamma_s c
/// delta(dt) = phi_delta delta + kappa s + gamma_delta + chi c
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubeStep {
    pub phi_s: f64,
    pub gamma_s: f64,
    pub phi_delta: f64,
    pub kappa: f64,
    pub gamma_delta: f64,
    pub chi: f64,
}

impl TubeStep {
    pub fn new(params: &TubeParams, dt: f64) -> Self {
        let x = params.s_rate() * dt;
        let y = params.delta_rate() * dt;
        let l = params.l_fnl;
        Self {
            phi_s: x.exp(),
            gamma_s: dt * phi1(x),
            phi_delta: y.exp(),
            kappa: l * dt * exp_divided_difference(x, y),
            gamma_delta: params.d_bar * dt * phi1(y),
            chi: l * dt * dt * exp_divided_difference2(0.0, x, y),
        }
    }

    pub fn apply(&self, state: &TubeState, forcing: f64) -> TubeState {
        TubeState {
            s: self.phi_s * state.s + self.gamma_s * forcing,
            delta: self.phi_delta * state.delta + self.kappa * state.s + self.gamma_delta + self.chi * forcing,
        }
    }
}

/// Exact tube state after `dt` seconds of constant input.
pub fn propagate_interval(params: &TubeParams, state0: &TubeState, input: &TubeInput, dt: f64) -> Result<TubeState> {
    state0.check()?;
    if !(dt >= 0.0) {
        return Err(Error::InvalidArgument("propagation interval must be nonnegative".into()));
    }
    Ok(TubeStep::new(params, dt).apply(state0, params.s_forcing(input)))
}

/// Settings of the randomized bound check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyOptions {
    pub control_period: f64,
    pub dt_sim: f64,
    pub input_lower: f64,
    pub input_upper: f64,
    /// Mean input level is drawn up to this fraction of the input range.
    pub input_level: f64,
    /// Reduced initial states are drawn in this fraction of the operating ball.
    pub initial_radius: f64,
    pub s0_max: f64,
    pub delta0_max: f64,
    /// `||u_d||`; the disturbance is `B u_d`.
    pub disturbance_magnitude: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            control_period: 0.02,
            dt_sim: 0.002,
            input_lower: 0.0,
            input_upper: 2500.0,
            input_level: 0.5,
            initial_radius: 0.4,
            s0_max: 0.02,
            delta0_max: 0.05,
            disturbance_magnitude: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub max_s_ratio: f64,
    pub max_delta_ratio: f64,
    pub left_domain: bool,
}

impl TrialResult {
    pub fn violated(&self) -> bool {
        !self.left_domain && (self.max_s_ratio > 1.0 || self.max_delta_ratio > 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub trials: Vec<TrialResult>,
}

impl VerificationReport {
    /// Trials that stayed in the operating ball and exceeded a bound.
    pub fn violations(&self) -> usize {
        self.trials.iter().filter(|t| t.violated()).count()
    }

    pub fn left_domain(&self) -> usize {
        self.trials.iter().filter(|t| t.left_domain).count()
    }

    fn max_over_domain(&self, f: impl Fn(&TrialResult) -> f64) -> f64 {
        self.trials.iter().filter(|t| !t.left_domain).map(f).fold(0.0, f64::max)
    }

    pub fn max_s_ratio(&self) -> f64 {
        self.max_over_domain(|t| t.max_s_ratio)
    }

    pub fn max_delta_ratio(&self) -> f64 {
        self.max_over_domain(|t| t.max_delta_ratio)
    }

    /// CSV `trial,max_s_ratio,max_delta_ratio,left_domain`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["trial", "max_s_ratio", "max_delta_ratio", "left_domain"])?;
        for t in &self.trials {
            w.write_record([
                t.trial.to_string(),
                format!("{:.12e}", t.max_s_ratio),
                format!("{:.12e}", t.max_delta_ratio),
                t.left_domain.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn ratio(err: f64, bound: f64) -> f64 {
    if err <= 1e-14 {
        0.0
    } else if bound <= 0.0 {
        f64::INFINITY
    } else {
        err / bound
    }
}

/// Randomised check that the tubes bound the true errors along plant trajectories.
#[allow(clippy::too_many_arguments)]
pub fn verify_prop1(
    model: &FullOrderModel,
    rom: &SsmRom,
    params: &TubeParams,
    n_trials: usize,
    t_final: f64,
    seed: u64,
    opts: &VerifyOptions,
    exec: Execution,
) -> Result<VerificationReport> {
    params.validate()?;
    let periods = (t_final / opts.control_period).round().max(1.0) as usize;
    let results = map_indexed(exec, n_trials, |trial| {
        run_trial(model, rom, params, trial, periods, seed, opts)
    });
    let trials = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(VerificationReport { trials })
}

fn run_trial(
    model: &FullOrderModel,
    rom: &SsmRom,
    params: &TubeParams,
    trial: usize,
    periods: usize,
    seed: u64,
    opts: &VerifyOptions,
) -> Result<TrialResult> {
    let mut rng = crate::ssm::sample_rng(seed, trial);
    let n = rom.n();
    let radius = model.domain_radius();
    let mut tube = TubeState { s: opts.s0_max * rng.random::<f64>(), delta: opts.delta0_max * rng.random::<f64>() };
    let z_radius = opts.initial_radius * radius * rng.random::<f64>().powf(1.0 / n as f64);
    let mut z = sample_sphere(&mut rng, n, z_radius);
    let delta_frac: f64 = rng.random();
    let xr0 = &z + sample_sphere(&mut rng, n, tube.delta * delta_frac);
    let s_frac: f64 = rng.random();
    let off = sample_sphere(&mut rng, model.n_f() - n, tube.s * s_frac);
    let mut x = rom.lift(&xr0);
    let mut tail = x.rows_mut(n, model.n_f() - n);
    tail += &off;

    let span = opts.input_upper - opts.input_lower;
    let level = opts.input_level * rng.random::<f64>();
    let inputs: Vec<DVector<f64>> = (0..periods)
        .map(|_| {
            DVector::from_fn(model.m(), |_, _| {
                let v = opts.input_lower + span * (level + 0.5 * level * rng.random_range(-1.0..1.0));
                v.clamp(opts.input_lower, opts.input_upper)
            })
        })
        .collect();
    let dist = sample_disturbance(model, opts.disturbance_magnitude, seed.wrapping_add(trial as u64 + 1), opts.control_period, periods)?;

    let mut result = TrialResult { trial, max_s_ratio: 0.0, max_delta_ratio: 0.0, left_domain: x.norm() > radius };
    let record = |x: &DVector<f64>, z: &DVector<f64>, t: &TubeState, r: &mut TrialResult| {
        r.max_s_ratio = r.max_s_ratio.max(ratio(rom.off_manifold_error(x), t.s));
        r.max_delta_ratio = r.max_delta_ratio.max(ratio((rom.project(x) - z).norm(), t.delta));
        r.left_domain |= x.norm() > radius;
    };
    record(&x, &z, &tube, &mut result);
    for (k, u) in inputs.iter().enumerate() {
        let t0 = k as f64 * opts.control_period;
        let d = dist.at(t0 + 0.5 * opts.control_period).clone();
        let input = TubeInput::from_input(rom, u);
        let forcing = params.s_forcing(&input);
        let start = tube;
        let mut z_cur = z.clone();
        let mut last_t = t0;
        let mut res = result;
        x = simulate_interval(model, &x, u, &d, t0, opts.control_period, opts.dt_sim, |t, xs| {
            z_cur = rk4_step(|zz| rom.reduced_rhs(zz, u), &z_cur, t - last_t);
            last_t = t;
            let tb = TubeStep::new(params, t - t0).apply(&start, forcing);
            record(xs, &z_cur, &tb, &mut res);
        })?;
        result = res;
        z = z_cur;
        tube = TubeStep::new(params, opts.control_period).apply(&start, forcing);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{ConstantSource, RomConstants};
    use proptest::prelude::*;

    fn params(l_fnl: f64, l_wnl: f64, l_rnl: f64, d_bar: f64) -> TubeParams {
        let k = RomConstants {
            source: ConstantSource::Manual,
            l_fnl,
            l_wnl,
            l_rnl,
            l_cw: 1.0,
            lambda_an: -30.0,
            lambda_ar: -2.0,
            d_bar,
            lambda_an_heuristic: false,
            bound_inconsistent: false,
            data_driven: None,
        };
        TubeParams::model_based(&k, d_bar)
    }

    #[test]
    fn zero_state_zero_forcing_is_rest() {
        let p = params(5.0, 0.1, 0.5, 0.0);
        let z = TubeState::default();
        assert_eq!(tube_rhs(&p, &z, &TubeInput::default()).unwrap(), (0.0, 0.0));
        assert_eq!(propagate_interval(&p, &z, &TubeInput::default(), 0.3).unwrap(), z);
        assert!(tube_rhs(&p, &TubeState { s: -1.0, delta: 0.0 }, &TubeInput::default()).is_err());
    }

    #[test]
    fn steady_state_solves_linear_equations() {
        let p = params(5.0, 0.1, 0.5, 0.2);
        let ss = p.steady_state(&TubeInput::default()).unwrap();
        let expected_s = -(1.1 * 0.2) / (-30.0 + 1.1 * 5.0);
        assert!((ss.s - expected_s).abs() < 1e-15);
        let (ds, dd) = tube_rhs(&p, &ss, &TubeInput::default()).unwrap();
        assert!(ds.abs() < 1e-14 && dd.abs() < 1e-14);
    }

    #[test]
    fn reference_data_driven_coefficients_are_stable() {
        let k = RomConstants::linear(-30.0, -2.0, 1.0);
        let p = TubeParams::data_driven(&k, 3.0, 0.001, 0.012, 3.0);
        assert!(p.s_rate() < 0.0);
        assert!(p.steady_state(&TubeInput { u_norm: 400.0, ..Default::default() }).is_some());
    }

    #[test]
    fn divided_differences_match_direct_formulas() {
        let cases: [(f64, f64); 4] = [(-0.5, -0.03), (-3.0, 1.0), (0.2, 0.2 + 1e-9), (-1e-8, 0.0)];
        for (x, y) in cases {
            let direct = if (x - y).abs() > 1e-6 { (f64::exp(x) - f64::exp(y)) / (x - y) } else { f64::exp(0.5 * (x + y)) };
            assert!((exp_divided_difference(x, y) - direct).abs() <= 1e-9 * direct.abs());
        }
        let triples: [(f64, f64, f64); 4] = [(0.0, -0.5, -0.03), (0.0, -3.0, -40.0), (0.0, 1e-7, -1e-7), (0.0, -0.9, -0.1)];
        for (a, b, c) in triples {
            // High-precision reference through the integral over the simplex.
            let n = 4000;
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..(n - i) {
                    let u = (i as f64 + 1.0 / 3.0) / n as f64;
                    let v = (j as f64 + 1.0 / 3.0) / n as f64;
                    if u + v < 1.0 {
                        acc += (a + u * (b - a) + v * (c - a)).exp();
                    }
                }
            }
            let reference = acc / (n * n) as f64;
            let got = exp_divided_difference2(a, b, c);
            assert!((got - reference).abs() <= 2e-3 * reference.abs(), "{got} vs {reference}");
        }
        let (x, y) = (-2.0, -0.5);
        let closed = (exp_divided_difference(x, y) - exp_divided_difference(0.0, y)) / x;
        assert!((exp_divided_difference2(0.0, x, y) - closed).abs() <= 1e-13);
        assert!((exp_divided_difference2(0.0, x * 0.3, y * 0.3) - exp_divided_difference2(x * 0.3, 0.0, y * 0.3)).abs() <= 1e-16);
    }

    proptest! {
        #[test]
        fn flow_property(s0 in 0.0..1.0f64, d0 in 0.0..1.0f64, lf in 0.0..20.0f64, lr in 0.0..3.0f64,
                         bn in 0.0..5.0f64, dt in 1e-3..0.5f64) {
            let p = params(lf, 0.2, lr, 0.3);
            let input = TubeInput { bn_norm: bn, br_norm: 2.0 * bn, u_norm: 0.0 };
            let st = TubeState { s: s0, delta: d0 };
            let one = propagate_interval(&p, &st, &input, dt).unwrap();
            let half = propagate_interval(&p, &st, &input, dt / 2.0).unwrap();
            let two = propagate_interval(&p, &half, &input, dt / 2.0).unwrap();
            prop_assert!((one.s - two.s).abs() <= 1e-12 * (1.0 + one.s.abs()));
            prop_assert!((one.delta - two.delta).abs() <= 1e-12 * (1.0 + one.delta.abs()));
        }

        #[test]
        fn monotone_in_all_inputs(s0 in 0.0..1.0f64, d0 in 0.0..1.0f64, ds in 0.0..0.5f64, dd in 0.0..0.5f64,
                                  bump in 0.0..0.5f64, bn in 0.0..5.0f64, dt in 1e-3..2.0f64) {
            let p = params(8.0, 0.1, 1.0, 0.2);
            let q = params(8.0, 0.1, 1.0, 0.2 + bump);
            let input = TubeInput { bn_norm: bn, br_norm: bn, u_norm: 0.0 };
            let bigger = TubeInput { bn_norm: bn + bump, br_norm: bn + bump, u_norm: 0.0 };
            let base = propagate_interval(&p, &TubeState { s: s0, delta: d0 }, &input, dt).unwrap();
            let grown = [
                propagate_interval(&p, &TubeState { s: s0 + ds, delta: d0 + dd }, &input, dt).unwrap(),
                propagate_interval(&p, &TubeState { s: s0, delta: d0 }, &bigger, dt).unwrap(),
                propagate_interval(&q, &TubeState { s: s0, delta: d0 }, &input, dt).unwrap(),
            ];
            for g in grown {
                prop_assert!(g.s >= base.s - 1e-15 && g.delta >= base.delta - 1e-15);
            }
        }

        #[test]
        fn nonnegativity_is_preserved(s0 in 0.0..1.0f64, d0 in 0.0..1.0f64, dt in 0.0..5.0f64) {
            let p = params(25.0, 0.5, 3.0, 0.0);
            let st = propagate_interval(&p, &TubeState { s: s0, delta: d0 }, &TubeInput::default(), dt).unwrap();
            prop_assert!(st.s >= 0.0 && st.delta >= 0.0);
        }
    }

    #[test]
    fn closed_form_matches_fine_integration() {
        let p = params(18.0, 0.2, 1.5, 0.1);
        let input = TubeInput { bn_norm: 0.7, br_norm: 3.0, u_norm: 0.0 };
        let st0 = TubeState { s: 0.3, delta: 0.05 };
        let f = |y: &DVector<f64>| {
            let (a, b) = tube_rhs(&p, &TubeState { s: y[0].max(0.0), delta: y[1].max(0.0) }, &input).unwrap();
            DVector::from_vec(vec![a, b])
        };
        for t in [0.01, 0.2, 1.5] {
            let steps = 20000;
            let mut y = DVector::from_vec(vec![st0.s, st0.delta]);
            for _ in 0..steps {
                y = rk4_step(f, &y, t / steps as f64);
            }
            let exact = propagate_interval(&p, &st0, &input, t).unwrap();
            assert!((exact.s - y[0]).abs() <= 1e-10, "{t}");
            assert!((exact.delta - y[1]).abs() <= 1e-10, "{t}");
        }
    }

    #[test]
    fn settles_to_steady_state() {
        let p = params(5.0, 0.1, 0.5, 0.2);
        let ss = p.steady_state(&TubeInput::default()).unwrap();
        let t = 5.0 / p.s_rate().abs().min(p.delta_rate().abs());
        let st = propagate_interval(&p, &TubeState::default(), &TubeInput::default(), t).unwrap();
        assert!((st.s - ss.s).abs() <= 0.01 * ss.s);
        assert!((st.delta - ss.delta).abs() <= 0.01 * ss.delta);
    }

    #[test]
    fn report_csv_schema() {
        let r = VerificationReport {
            trials: vec![TrialResult { trial: 0, max_s_ratio: 0.5, max_delta_ratio: 0.25, left_domain: false }],
        };
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("trial,max_s_ratio,max_delta_ratio,left_domain\n0,"));
        assert_eq!(r.violations(), 0);
    }
}
