use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{assemble_a, check_assumptions, split_blocks, FullOrderModel, ManufacturedNonlinearity, ModalBlock, Nonlinearity};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::spectral_norm;
use crate::poly::PolynomialMap;
use crate::ssm::{estimate_constants, RomConstants, SsmRom};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub n: usize,
    pub n_f: usize,
    pub m: usize,
    pub n_y: usize,
}

/// Eigenvalue layout: explicit slow blocks, then geometrically spaced fast pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectraConfig {
    /// `[decay, frequency]` per slow block; frequency 0 gives a scalar block.
    pub slow: Vec<[f64; 2]>,
    /// Decay of the slowest and fastest fast pair.
    pub fast_decay: [f64; 2],
    /// Fast-pair frequency as a multiple of its decay magnitude.
    pub fast_frequency_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Degrees {
    pub graph: [usize; 2],
    pub drift: [usize; 2],
    pub coupling: [usize; 2],
}

/// Coefficient magnitudes. A degree-`d` coefficient is drawn uniformly from
/// `[-scale/d, scale/d]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scales {
    pub graph: f64,
    /// Graph rows of a fast mode are multiplied by `(|slowest fast decay| / |decay|)^power`.
    pub graph_row_power: f64,
    pub drift: f64,
    pub coupling: f64,
    /// Target steady output range reached at the upper input bound.
    pub steady_output_range: f64,
    pub input_upper: f64,
    pub input_spread: f64,
    pub normal_input_ratio: f64,
    pub normal_output_ratio: f64,
}

/// Structured-text description of a manufactured benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seed: u64,
    /// Disturbance bound. Defaults to `||B|| * disturbance_input_norm`.
    #[serde(default)]
    pub d_bar: Option<f64>,
    pub disturbance_input_norm: f64,
    pub domain_radius: f64,
    pub lipschitz_samples: usize,
    pub max_order: usize,
    pub dims: Dims,
    pub spectra: SpectraConfig,
    pub degrees: Degrees,
    pub scales: Scales,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            d_bar: None,
            disturbance_input_norm: 10.0,
            domain_radius: 1.0,
            lipschitz_samples: 4000,
            max_order: 3,
            dims: Dims { n: 4, n_f: 200, m: 4, n_y: 2 },
            spectra: SpectraConfig {
                slow: vec![[-2.0, 4.0], [-2.5, 6.0]],
                fast_decay: [-30.0, -400.0],
                fast_frequency_ratio: 2.0,
            },
            degrees: Degrees { graph: [2, 3], drift: [2, 3], coupling: [2, 2] },
            scales: Scales {
                graph: 0.01,
                graph_row_power: 2.0,
                drift: 0.1,
                coupling: 0.01,
                steady_output_range: 0.6,
                input_upper: 2500.0,
                input_spread: 0.1,
                normal_input_ratio: 0.02,
                normal_output_ratio: 0.02,
            },
        }
    }
}

impl BenchmarkConfig {
    /// Small instance for fast tests.
    pub fn small_test() -> Self {
        Self {
            lipschitz_samples: 1000,
            dims: Dims { n: 4, n_f: 12, m: 4, n_y: 2 },
            spectra: SpectraConfig {
                slow: vec![[-2.0, 4.0], [-2.5, 6.0]],
                fast_decay: [-30.0, -120.0],
                fast_frequency_ratio: 2.0,
            },
            ..Self::default()
        }
    }

    /// Same layout with every nonlinear coefficient zero.
    pub fn linear(mut self) -> Self {
        self.scales.graph = 0.0;
        self.scales.drift = 0.0;
        self.scales.coupling = 0.0;
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn blocks(&self) -> Result<Vec<ModalBlock>> {
        let Dims { n, n_f, .. } = self.dims;
        let mut blocks: Vec<ModalBlock> = self
            .spectra
            .slow
            .iter()
            .map(|&[d, w]| if w == 0.0 { ModalBlock::scalar(d) } else { ModalBlock::rotational(d, w) })
            .collect();
        let slow_dim: usize = blocks.iter().map(ModalBlock::dim).sum();
        if slow_dim != n {
            return Err(Error::Config(format!("slow blocks span {slow_dim} coordinates, expected n = {n}")));
        }
        if n_f <= n {
            return Err(Error::Config("n_f must exceed n".into()));
        }
        let normal = n_f - n;
        let pairs = normal / 2;
        let [first, last] = self.spectra.fast_decay;
        if !(first < 0.0 && last <= first) {
            return Err(Error::Config("fast decays must be negative and ordered slowest first".into()));
        }
        let ratio = if pairs > 1 { (last / first).powf(1.0 / (pairs - 1) as f64) } else { 1.0 };
        for k in 0..pairs {
            let decay = first * ratio.powi(k as i32);
            blocks.push(ModalBlock::rotational(decay, self.spectra.fast_frequency_ratio * decay.abs()));
        }
        if normal % 2 == 1 {
            blocks.push(ModalBlock::scalar(last * 1.01));
        }
        Ok(blocks)
    }

    /// Draws all random ingredients.
    pub fn to_spec(&self) -> Result<BenchmarkSpec> {
        let Dims { n, n_f, m, n_y } = self.dims;
        let blocks = self.blocks()?;
        let (slow, fast) = split_blocks(&blocks, n)?;
        let normal = n_f - n;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let s = &self.scales;
        let lambda_an = fast[0].decay.abs();

        let row_gain: Vec<f64> = fast
            .iter()
            .flat_map(|b| std::iter::repeat_n((lambda_an / b.decay.abs()).powf(s.graph_row_power), b.dim()))
            .collect();
        let [gmin, gmax] = self.degrees.graph;
        let mut graph = PolynomialMap::zeros(n, normal, gmin, gmax)?;
        fill_random(&mut graph, s.graph, &mut rng, |row| row_gain[row]);
        let [dmin, dmax] = self.degrees.drift;
        let mut drift = PolynomialMap::zeros(n, n, dmin, dmax)?;
        fill_random(&mut drift, s.drift, &mut rng, |_| 1.0);
        let [cmin, cmax] = self.degrees.coupling;
        let mut coupling = PolynomialMap::zeros(n, n * normal, cmin, cmax)?;
        // Flattened column-major: entry (i, j) of E sits at row j * n + i.
        fill_random(&mut coupling, s.coupling, &mut rng, |row| row_gain[row / n]);

        // Positions are the first coordinate of each slow block.
        let mut positions = Vec::new();
        let mut off = 0;
        for b in &slow {
            let gain = match b.kind {
                super::BlockKind::ScalarReal => b.decay.abs(),
                super::BlockKind::RotationalPair => (b.decay.powi(2) + b.frequency.powi(2)) / b.decay.abs(),
            };
            positions.push((off, gain * s.steady_output_range / s.input_upper));
            off += b.dim();
        }
        let mut b = DMatrix::zeros(n_f, m);
        for j in 0..m {
            let (row, beta) = positions[(j / 2) % positions.len()];
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            b[(row, j)] = sign * beta * (1.0 + s.input_spread * rng.random_range(-1.0..1.0));
            for i in (0..n).filter(|&i| i != row) {
                b[(i, j)] = beta * s.input_spread * 0.1 * rng.random_range(-1.0..1.0);
            }
            let col: Vec<f64> = (0..normal).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (i, v) in col.iter().enumerate() {
                b[(n + i, j)] = beta * s.normal_input_ratio * v / norm;
            }
        }
        let mut c = DMatrix::zeros(n_y, n_f);
        for i in 0..n_y {
            c[(i, positions[i % positions.len()].0)] = 1.0;
            let col: Vec<f64> = (0..normal).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (k, v) in col.iter().enumerate() {
                c[(i, n + k)] = s.normal_output_ratio * v / norm;
            }
        }
        let d_bar = self.d_bar.unwrap_or(spectral_norm(&b) * self.disturbance_input_norm);
        Ok(BenchmarkSpec {
            n,
            n_f,
            seed: self.seed,
            blocks,
            w_nl_true: graph,
            r_nl_true: drift,
            coupling,
            b,
            c,
            d_bar,
            domain_radius: self.domain_radius,
            lipschitz_samples: self.lipschitz_samples,
            max_order: self.max_order,
        })
    }
}

fn fill_random<R: Rng, G: Fn(usize) -> f64>(map: &mut PolynomialMap, scale: f64, rng: &mut R, row_gain: G) {
    if scale == 0.0 {
        return;
    }
    let degrees: Vec<usize> = map.exponents().iter().map(|e| e.iter().map(|&v| v as usize).sum()).collect();
    let rows = map.output_dim();
    let coeffs = map.coefficients_mut();
    for (k, &deg) in degrees.iter().enumerate() {
        let bound = scale / deg as f64;
        for r in 0..rows {
            coeffs[(r, k)] = row_gain(r) * rng.random_range(-bound..bound);
        }
    }
}

/// Fully drawn benchmark ingredients.
#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub n: usize,
    pub n_f: usize,
    pub seed: u64,
    pub blocks: Vec<ModalBlock>,
    /// Graph in normal coordinates, `n -> n_f - n`.
    pub w_nl_true: PolynomialMap,
    pub r_nl_true: PolynomialMap,
    /// Normal-to-reduced coupling `E(x_r)`, flattened column-major.
    pub coupling: PolynomialMap,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d_bar: f64,
    pub domain_radius: f64,
    pub lipschitz_samples: usize,
    pub max_order: usize,
}

/// Builds the plant whose graph `x_n = W(x_r)` is exactly invariant, together with
/// the exact reduced model on it.
pub fn manufacture_benchmark(spec: &BenchmarkSpec) -> Result<(FullOrderModel, SsmRom)> {
    let (slow, fast) = split_blocks(&spec.blocks, spec.n)?;
    if fast.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs at least one fast block".into()));
    }
    let fastest_slow = slow.iter().map(|b| b.decay).fold(f64::INFINITY, f64::min);
    if !(fast[0].decay.abs() > fastest_slow.abs()) {
        return Err(Error::InvalidArgument("fast blocks must be faster than every slow block".into()));
    }
    let a_r = assemble_a(&slow)?;
    let a_n = assemble_a(&fast)?;
    let manufactured = ManufacturedNonlinearity::new(
        a_r.clone(),
        &a_n,
        spec.w_nl_true.clone(),
        spec.r_nl_true.clone(),
        spec.coupling.clone(),
    )?;
    let nonlinearity =
        if manufactured.is_zero() { Nonlinearity::Zero } else { Nonlinearity::Manufactured(manufactured) };
    let model = FullOrderModel::new(
        spec.blocks.clone(),
        nonlinearity,
        spec.b.clone(),
        spec.c.clone(),
        spec.d_bar,
        spec.domain_radius,
    )?;
    let report = check_assumptions(&model, spec.n, spec.max_order);
    if !report.resonances.is_empty() {
        let r = &report.resonances[0];
        return Err(Error::Resonance(format!(
            "{} resonant combination(s), first: {:?} hits {} with multi-index {:?}",
            report.resonances.len(),
            r.direction,
            r.target,
            r.multi_index
        )));
    }
    let placeholder = RomConstants::linear(fast[0].decay, slow[0].decay, 0.0);
    let rom = SsmRom::from_normal_graph(
        a_r,
        &spec.w_nl_true,
        spec.r_nl_true.clone(),
        &spec.b,
        spec.c.clone(),
        placeholder,
    )?;
    let constants = estimate_constants(&rom, &model, spec.lipschitz_samples, spec.seed, Execution::default())?;
    Ok((model, rom.with_constants(constants)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::simulate::{simulate, Schedule};
    use nalgebra::DVector;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_benchmark_has_zero_nonlinearity() {
        let spec = BenchmarkConfig::small_test().linear().to_spec().unwrap();
        let (model, rom) = manufacture_benchmark(&spec).unwrap();
        assert!(matches!(model.nonlinearity(), Nonlinearity::Zero));
        assert!(rom.w_nl().is_zero() && rom.r_nl().is_zero());
        let z = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.4]);
        let x = rom.lift(&z);
        assert_eq!(x.rows(0, 4), z.rows(0, 4));
        assert_eq!(x.rows(4, 8).norm(), 0.0);
    }

    #[test]
    fn graph_has_no_reduced_component() {
        let (_, rom) = manufacture_benchmark(&BenchmarkConfig::small_test().to_spec().unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let z = DVector::from_fn(4, |_, _| rng.random_range(-0.5..0.5));
            assert_eq!(rom.w_nl().eval(&z).rows(0, 4).norm(), 0.0);
        }
    }

    #[test]
    fn invariance_equation_holds() {
        let (model, rom) = manufacture_benchmark(&BenchmarkConfig::small_test().to_spec().unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let z = DVector::from_fn(4, |_, _| rng.random_range(-0.5..0.5));
            let x = rom.lift(&z);
            let lhs = model.apply_a(&x) + model.nonlinearity().eval(&x);
            let rhs = rom.lift_jacobian(&z) * (rom.a_r() * &z + rom.r_nl().eval(&z));
            assert!((lhs - rhs).norm() <= 1e-8 * (1.0 + z.norm()));
        }
    }

    #[test]
    fn manifold_trajectories_stay_on_manifold() {
        let (model, rom) = manufacture_benchmark(&BenchmarkConfig::small_test().to_spec().unwrap()).unwrap();
        let x0 = rom.lift(&DVector::from_vec(vec![0.3, -0.2, 0.25, 0.1]));
        let tr = simulate(&model, &x0, &Schedule::zeros(4), &Schedule::zeros(12), 5.0, 1e-3).unwrap();
        let worst = tr.states.iter().map(|x| rom.off_manifold_error(x)).fold(0.0, f64::max);
        assert!(worst <= 1e-6, "max distance {worst}");
    }

    #[test]
    fn nonlinearity_jacobian_matches_finite_differences() {
        let (model, _) = manufacture_benchmark(&BenchmarkConfig::small_test().to_spec().unwrap()).unwrap();
        let f = model.nonlinearity();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DVector::from_fn(12, |_, _| rng.random_range(-0.3..0.3));
        let j = f.jacobian(&x);
        let eps = 1e-6;
        for c in 0..12 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += eps;
            xm[c] -= eps;
            let fd = (f.eval(&xp) - f.eval(&xm)) / (2.0 * eps);
            assert!((fd - j.column(c)).norm() < 1e-7, "column {c}");
        }
        let dense = spectral_norm(&j);
        assert!((f.jacobian_norm(&x) - dense).abs() <= 1e-10 * (1.0 + dense));
        assert!(f.jacobian(&DVector::zeros(12)).norm() <= 1e-10);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = BenchmarkConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(BenchmarkConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(BenchmarkConfig::from_toml_str("seed = 1\nbogus = 2").is_err());
    }

    #[test]
    fn default_layout_has_expected_dimensions() {
        let blocks = BenchmarkConfig::default().blocks().unwrap();
        assert_eq!(blocks.iter().map(ModalBlock::dim).sum::<usize>(), 200);
        assert!(blocks.windows(2).all(|w| w[1].decay <= w[0].decay));
    }
}
