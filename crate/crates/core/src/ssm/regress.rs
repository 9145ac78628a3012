use std::io::{Read, Write};
use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use super::estimate::estimate_reduced_constants;
use super::{estimate_constants, ConstantSource, RomConstants, SsmRom};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::fom::{assemble_a, sample_sphere, simulate, split_blocks, FullOrderModel, Schedule, Trajectory};
use crate::linalg::log_norm;
use crate::poly::PolynomialMap;

const LIPSCHITZ_SAMPLES: usize = 2000;
const RANK_TOL: f64 = 1e-10;

/// Autonomous decay data sampled at a fixed period.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub dt: f64,
    pub trajectories: Vec<Vec<DVector<f64>>>,
}

impl TrainingData {
    pub fn new(dt: f64, trajectories: Vec<Vec<DVector<f64>>>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument("sample period must be positive".into()));
        }
        let dim = trajectories.first().and_then(|t| t.first()).map(|x| x.len()).unwrap_or(0);
        if dim == 0 {
            return Err(Error::InvalidArgument("training data is empty".into()));
        }
        if let Some(x) = trajectories.iter().flatten().find(|x| x.len() != dim) {
            return Err(Error::DimensionMismatch { context: "training sample", expected: dim, actual: x.len() });
        }
        Ok(Self { dt, trajectories })
    }

    /// Uses the sampling period of the first trajectory; all inputs must be zero.
    pub fn from_trajectories(trajs: &[Trajectory]) -> Result<Self> {
        let first = trajs.first().ok_or_else(|| Error::InvalidArgument("no trajectories".into()))?;
        if first.times.len() < 2 {
            return Err(Error::InvalidArgument("trajectory too short".into()));
        }
        let dt = first.times[1] - first.times[0];
        for t in trajs {
            if t.inputs.iter().any(|u| u.iter().any(|v| *v != 0.0)) {
                return Err(Error::InvalidArgument("training trajectories must be unforced".into()));
            }
            if t.times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0)) {
                return Err(Error::InvalidArgument("training trajectories must share one sample period".into()));
            }
        }
        Self::new(dt, trajs.iter().map(|t| t.states.clone()).collect())
    }

    pub fn state_dim(&self) -> usize {
        self.trajectories[0][0].len()
    }

    pub fn sample_count(&self) -> usize {
        self.trajectories.iter().map(Vec::len).sum()
    }

    /// CSV `t,x_1..x_{n_f}`; a time that does not increase starts a new trajectory.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.state_dim()).map(|i| format!("x_{i}")));
        w.write_record(&header)?;
        for traj in &self.trajectories {
            for (k, x) in traj.iter().enumerate() {
                let mut row = vec![format!("{:.12e}", k as f64 * self.dt)];
                row.extend(x.iter().map(|v| format!("{v:.17e}")));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.get(0) != Some("t") || headers.len() < 2 {
            return Err(Error::Config("training CSV must start with columns t,x_1,...".into()));
        }
        let mut trajectories: Vec<Vec<DVector<f64>>> = Vec::new();
        let mut last_t = f64::INFINITY;
        let mut dt = None;
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| Error::Config(format!("training CSV row {}: {e}", line + 2)))?;
            let t = vals[0];
            if t <= last_t {
                trajectories.push(Vec::new());
            } else if dt.is_none() {
                dt = Some(t - last_t);
            }
            last_t = t;
            trajectories.last_mut().unwrap().push(DVector::from_column_slice(&vals[1..]));
        }
        Self::new(dt.unwrap_or(0.0), trajectories)
    }
}

/// Least squares `phi * theta ~ y` with unit-norm column scaling. Each range in
/// `blocks` is one degree block, checked separately for rank deficiency.
fn least_squares(
    phi: &DMatrix<f64>,
    y: &DMatrix<f64>,
    blocks: &[(usize, Range<usize>)],
    map: &'static str,
) -> Result<DMatrix<f64>> {
    let scales: Vec<f64> = phi.column_iter().map(|c| c.norm()).collect();
    let mut scaled = phi.clone();
    for (j, s) in scales.iter().enumerate() {
        let degree = blocks.iter().find(|(_, r)| r.contains(&j)).map_or(1, |b| b.0);
        if *s == 0.0 {
            return Err(Error::RankDeficient { map, degree });
        }
        scaled.column_mut(j).scale_mut(1.0 / s);
    }
    for (degree, range) in blocks {
        let sv = scaled.columns(range.start, range.len()).into_owned().singular_values();
        let max = sv.max();
        if sv.min() <= RANK_TOL * max {
            return Err(Error::RankDeficient { map, degree: *degree });
        }
    }
    let svd = scaled.svd(true, true);
    let max = svd.singular_values.max();
    if svd.singular_values.min() <= RANK_TOL * max {
        let degree = blocks.last().map_or(1, |b| b.0);
        return Err(Error::RankDeficient { map, degree });
    }
    let mut theta = svd.solve(y, 0.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for (j, s) in scales.iter().enumerate() {
        theta.row_mut(j).scale_mut(1.0 / s);
    }
    Ok(theta)
}

fn degree_blocks(map: &PolynomialMap, offset: usize) -> Vec<(usize, Range<usize>)> {
    let (dmin, dmax) = map.degree_range();
    (dmin..=dmax)
        .map(|d| {
            let r = map.degree_block(d);
            (d, r.start + offset..r.end + offset)
        })
        .collect()
}

/// Graph-style regression of an SSM reduced model from unforced decay data.
///
/// With a plant model the reduced linear part, input and output maps come from it
/// and the constants are estimated on its operating ball. Without one the linear
/// part is regressed too, the model has no inputs, the output is the reduced state,
/// and the normal decay rate is estimated from the data.
pub fn fit_graph_rom(
    data: &TrainingData,
    n: usize,
    degrees: (usize, usize),
    model: Option<&FullOrderModel>,
) -> Result<SsmRom> {
    let n_f = data.state_dim();
    if n == 0 || n >= n_f {
        return Err(Error::InvalidArgument(format!("reduced dimension {n} must lie in [1, {n_f})")));
    }
    if let Some(m) = model {
        if m.n_f() != n_f {
            return Err(Error::DimensionMismatch { context: "training data vs model", expected: m.n_f(), actual: n_f });
        }
    }
    let (dmin, dmax) = degrees;
    let template = PolynomialMap::zeros(n, 1, dmin, dmax)?;
    let n_mono = template.monomial_count();
    let n_lin = if model.is_some() { 0 } else { n };
    let samples = data.sample_count();
    if samples < 10 * (n_mono + n_lin) {
        return Err(Error::InvalidArgument(format!(
            "{samples} samples are fewer than 10x the {} regression coefficients",
            n_mono + n_lin
        )));
    }

    // Graph: normal coordinates against monomials of the reduced coordinates.
    let all: Vec<&DVector<f64>> = data.trajectories.iter().flatten().collect();
    let mut phi = DMatrix::zeros(all.len(), n_mono);
    let mut y = DMatrix::zeros(all.len(), n_f - n);
    for (i, x) in all.iter().enumerate() {
        let xr = x.rows(0, n).into_owned();
        phi.row_mut(i).copy_from(&template.monomials(&xr).transpose());
        y.row_mut(i).copy_from(&x.rows(n, n_f - n).transpose());
    }
    let theta_w = least_squares(&phi, &y, &degree_blocks(&template, 0), "w_nl")?;
    let mut w_coeffs = DMatrix::zeros(n_f, n_mono);
    w_coeffs.rows_mut(n, n_f - n).copy_from(&theta_w.transpose());
    let w_nl = PolynomialMap::from_coefficients(n, dmin, dmax, w_coeffs)?;

    // Drift: fourth-order central differences of the reduced coordinates, two
    // samples dropped at each end.
    let a_r_model = match model {
        Some(m) => {
            let (slow, _) = split_blocks(m.blocks(), n)?;
            Some(assemble_a(&slow)?)
        }
        None => None,
    };
    let mut rows_phi = Vec::new();
    let mut rows_y = Vec::new();
    for traj in &data.trajectories {
        for k in 2..traj.len().saturating_sub(2) {
            let xr = traj[k].rows(0, n).into_owned();
            let dx = (traj[k - 2].rows(0, n) - traj[k + 2].rows(0, n)
                + (traj[k + 1].rows(0, n) - traj[k - 1].rows(0, n)) * 8.0)
                / (12.0 * data.dt);
            let mut feat = DVector::zeros(n_lin + n_mono);
            if n_lin > 0 {
                feat.rows_mut(0, n).copy_from(&xr);
            }
            feat.rows_mut(n_lin, n_mono).copy_from(&template.monomials(&xr));
            let target = match &a_r_model {
                Some(a) => dx - a * &xr,
                None => dx,
            };
            rows_phi.push(feat.transpose());
            rows_y.push(target.transpose());
        }
    }
    let phi_r = DMatrix::from_rows(&rows_phi);
    let y_r = DMatrix::from_rows(&rows_y);
    let mut blocks = degree_blocks(&template, n_lin);
    if n_lin > 0 {
        blocks.insert(0, (1, 0..n));
    }
    let theta_r = least_squares(&phi_r, &y_r, &blocks, "r_nl")?;
    let r_nl = PolynomialMap::from_coefficients(n, dmin, dmax, theta_r.rows(n_lin, n_mono).transpose())?;
    let a_r = match a_r_model {
        Some(a) => a,
        None => theta_r.rows(0, n).transpose(),
    };

    match model {
        Some(m) => {
            let b_r = m.b().rows(0, n).into_owned();
            let b_n = m.b().rows(n, n_f - n).into_owned();
            let placeholder = RomConstants::linear(-1.0, log_norm(&a_r), 0.0);
            let rom = SsmRom::new(a_r, w_nl, r_nl, b_r, b_n, m.c().clone(), placeholder)?;
            let k = estimate_constants(&rom, m, LIPSCHITZ_SAMPLES, 0, Execution::default())?;
            Ok(rom.with_constants(k))
        }
        None => {
            let mut c = DMatrix::zeros(n, n_f);
            c.view_mut((0, 0), (n, n)).fill_with_identity();
            let lambda_ar = log_norm(&a_r);
            let placeholder = RomConstants::linear(-1.0, lambda_ar.min(-1e-9), 0.0);
            let rom = SsmRom::new(a_r, w_nl, r_nl, DMatrix::zeros(n, 0), DMatrix::zeros(n_f - n, 0), c, placeholder)?;
            let radius = all.iter().map(|x| x.rows(0, n).norm()).fold(0.0, f64::max);
            let (l_wnl, l_rnl, l_cw) = estimate_reduced_constants(&rom, radius, LIPSCHITZ_SAMPLES, 0, Execution::default());
            let lambda_an = estimate_normal_decay(&rom, data).unwrap_or(10.0 * lambda_ar);
            let k = RomConstants {
                source: ConstantSource::Estimated,
                l_fnl: 0.0,
                l_wnl,
                l_rnl,
                l_cw,
                lambda_an,
                lambda_ar,
                d_bar: 0.0,
                lambda_an_heuristic: true,
                bound_inconsistent: false,
                data_driven: None,
            };
            Ok(rom.with_constants(k))
        }
    }
}

/// Slowest log-linear decay rate of the off-manifold residual over trajectories
/// where the residual is resolvable.
fn estimate_normal_decay(rom: &SsmRom, data: &TrainingData) -> Option<f64> {
    let mut slowest: Option<f64> = None;
    for traj in &data.trajectories {
        let res: Vec<f64> = traj.iter().map(|x| rom.off_manifold_error(x)).collect();
        let peak = res.iter().copied().fold(0.0, f64::max);
        if peak <= 1e-9 {
            continue;
        }
        let pts: Vec<(f64, f64)> = res
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 1e-4 * peak)
            .map(|(k, v)| (k as f64 * data.dt, v.ln()))
            .collect();
        if pts.len() < 3 {
            continue;
        }
        let nf = pts.len() as f64;
        let (mt, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / nf, a.1 + p.1 / nf));
        let cov = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum::<f64>();
        let var = pts.iter().map(|p| (p.0 - mt).powi(2)).sum::<f64>();
        let slope = cov / var;
        if slope < 0.0 {
            slowest = Some(slowest.map_or(slope, |s: f64| s.max(slope)));
        }
    }
    slowest
}

/// Unforced decays from random points of radius up to `radius` on the manifold of
/// `rom`, sampled every `dt`.
#[allow(clippy::too_many_arguments)]
pub fn decay_data(
    model: &FullOrderModel,
    rom: &SsmRom,
    count: usize,
    radius: f64,
    t_final: f64,
    dt: f64,
    seed: u64,
    exec: Execution,
) -> Result<TrainingData> {
    let trajs = map_indexed(exec, count, |k| {
        let mut rng = super::sample_rng(seed, k);
        let r = radius * rand::Rng::random::<f64>(&mut rng).powf(1.0 / rom.n() as f64);
        let z = sample_sphere(&mut rng, rom.n(), r);
        simulate(model, &rom.lift(&z), &Schedule::zeros(model.m()), &Schedule::zeros(model.n_f()), t_final, dt)
    });
    let trajs = trajs.into_iter().collect::<Result<Vec<_>>>()?;
    TrainingData::from_trajectories(&trajs)
}
