use std::io::Write;
use std::path::Path;

use nalgebra::DVector;

use super::FullOrderModel;
use crate::error::{Error, Result};
use crate::ode::rk4_step;

/// Piecewise-constant signal: `values[k]` holds on `[k T, (k+1) T)`; the last value
/// holds afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    period: f64,
    values: Vec<DVector<f64>>,
}

impl Schedule {
    pub fn new(period: f64, values: Vec<DVector<f64>>) -> Result<Self> {
        if !(period > 0.0) {
            return Err(Error::InvalidArgument("schedule period must be positive".into()));
        }
        let Some(first) = values.first() else {
            return Err(Error::InvalidArgument("schedule needs at least one value".into()));
        };
        let dim = first.len();
        if let Some(v) = values.iter().find(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch { context: "schedule value", expected: dim, actual: v.len() });
        }
        Ok(Self { period, values })
    }

    pub fn constant(value: DVector<f64>) -> Self {
        Self { period: f64::INFINITY, values: vec![value] }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::constant(DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    /// Duration covered by explicitly listed values.
    pub fn span(&self) -> f64 {
        self.period * self.values.len() as f64
    }

    pub fn at(&self, t: f64) -> &DVector<f64> {
        if !self.period.is_finite() {
            return &self.values[0];
        }
        let k = (t / self.period).floor().max(0.0) as usize;
        &self.values[k.min(self.values.len() - 1)]
    }
}

/// Sampled full-state trajectory.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Input held over `[times[k], times[k+1])`. The final sample repeats the last input.
    pub inputs: Vec<DVector<f64>>,
    /// Whether any sample left the operating ball of the model.
    pub left_domain: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> Option<&DVector<f64>> {
        self.states.last()
    }

    /// CSV with header `t,x_1..x_{n_f},u_1..u_m`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let n_f = self.states.first().map_or(0, |x| x.len());
        let m = self.inputs.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n_f).map(|i| format!("x_{i}")));
        header.extend((1..=m).map(|i| format!("u_{i}")));
        w.write_record(&header)?;
        for ((t, x), u) in self.times.iter().zip(&self.states).zip(&self.inputs) {
            let mut row = vec![fmt_f64(*t)];
            row.extend(x.iter().map(|v| fmt_f64(*v)));
            row.extend(u.iter().map(|v| fmt_f64(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.12e}")
}

fn check_finite(x: &DVector<f64>, t: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) && x.norm() < 1e12 {
        Ok(())
    } else {
        Err(Error::Divergence { time: t, detail: format!("state norm {}", x.norm()) })
    }
}

/// Fixed-step RK4 over `[t0, t0 + duration]` with constant `u` and `d`.
///
/// `visit` sees every intermediate sample after the initial one. Returns the final
/// state.
#[allow(clippy::too_many_arguments)]
pub fn simulate_interval<V>(
    model: &FullOrderModel,
    x0: &DVector<f64>,
    u: &DVector<f64>,
    d: &DVector<f64>,
    t0: f64,
    duration: f64,
    dt_sim: f64,
    mut visit: V,
) -> Result<DVector<f64>>
where
    V: FnMut(f64, &DVector<f64>),
{
    model.check_dims(x0, u, d)?;
    if !(dt_sim > 0.0) || !(duration >= 0.0) {
        return Err(Error::InvalidArgument("dt_sim must be positive and duration nonnegative".into()));
    }
    let steps = step_count(duration, dt_sim);
    let h = if steps == 0 { 0.0 } else { duration / steps as f64 };
    let mut x = x0.clone();
    for k in 0..steps {
        x = rk4_step(|y| model.rhs_unchecked(y, u, d), &x, h);
        let t = t0 + (k + 1) as f64 * h;
        check_finite(&x, t)?;
        visit(t, &x);
    }
    Ok(x)
}

fn step_count(duration: f64, dt: f64) -> usize {
    let r = duration / dt;
    let n = r.round();
    if (r - n).abs() < 1e-9 { n as usize } else { r.ceil() as usize }
}

/// Fixed-step RK4 trajectory sampled every `dt_sim`. Schedules are read at the
/// midpoint of each step so inputs are held exactly over each period when the
/// period is a multiple of `dt_sim`.
pub fn simulate(
    model: &FullOrderModel,
    x0: &DVector<f64>,
    u_signal: &Schedule,
    d_signal: &Schedule,
    t_final: f64,
    dt_sim: f64,
) -> Result<Trajectory> {
    if !(dt_sim > 0.0) || !(t_final >= 0.0) {
        return Err(Error::InvalidArgument("dt_sim must be positive and t_final nonnegative".into()));
    }
    if u_signal.period().is_finite() && dt_sim > u_signal.period() * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument("dt_sim exceeds the input sampling period".into()));
    }
    let zero_u = DVector::zeros(model.m());
    model.check_dims(x0, &zero_u, &DVector::zeros(model.n_f()))?;
    let steps = step_count(t_final, dt_sim);
    let h = if steps == 0 { 0.0 } else { t_final / steps as f64 };
    let radius = model.domain_radius();
    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps + 1),
        left_domain: x0.norm() > radius,
    };
    let mut x = x0.clone();
    for k in 0..steps {
        let t = k as f64 * h;
        let u = u_signal.at(t + 0.5 * h);
        let d = d_signal.at(t + 0.5 * h);
        model.check_dims(&x, u, d)?;
        traj.times.push(t);
        traj.states.push(x.clone());
        traj.inputs.push(u.clone());
        x = rk4_step(|y| model.rhs_unchecked(y, u, d), &x, h);
        check_finite(&x, t + h)?;
        traj.left_domain |= x.norm() > radius;
    }
    traj.times.push(steps as f64 * h);
    traj.states.push(x);
    traj.inputs.push(traj.inputs.last().cloned().unwrap_or_else(|| u_signal.at(0.0).clone()));
    Ok(traj)
}
