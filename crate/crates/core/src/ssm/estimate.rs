use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ConstantSource, RomConstants, SsmRom};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::fom::{assemble_a, sample_sphere, split_blocks, FullOrderModel};
use crate::linalg::{log_norm, spectral_norm};

/// Safety factor applied to every sampled Lipschitz estimate.
pub const INFLATION: f64 = 1.2;

pub(crate) fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Point in the ball of radius `radius`, biased toward the boundary.
fn ball_point(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> DVector<f64> {
    let rho = radius * rng.random::<f64>().powf(0.25);
    sample_sphere(rng, dim, rho)
}

/// Reduced-ball constants `(L_wnl, L_rnl, L_Cw)` from the analytic Jacobians,
/// maximised over samples and inflated.
pub fn estimate_reduced_constants(
    rom: &SsmRom,
    radius: f64,
    n_samples: usize,
    seed: u64,
    exec: Execution,
) -> (f64, f64, f64) {
    let n = rom.n();
    let norms = map_indexed(exec, n_samples + 1, |i| {
        let z = if i == 0 {
            DVector::zeros(n)
        } else {
            ball_point(&mut sample_rng(seed, i), n, radius)
        };
        let w = spectral_norm(&rom.w_nl().jacobian(&z));
        let r = spectral_norm(&rom.r_nl().jacobian(&z));
        let cw = spectral_norm(&rom.output_jacobian(&z));
        (w, r, cw)
    });
    let (w, r, cw) = norms
        .into_iter()
        .fold((0.0f64, 0.0f64, 0.0f64), |a, b| (a.0.max(b.0), a.1.max(b.1), a.2.max(b.2)));
    (INFLATION * w, INFLATION * r, INFLATION * cw)
}

/// Samples `||f_nl'||` over the full operating ball. The split between reduced and
/// normal radius is drawn per sample so both the manifold neighbourhood and the
/// far normal directions are covered.
fn estimate_l_fnl(model: &FullOrderModel, n: usize, n_samples: usize, seed: u64, exec: Execution) -> f64 {
    if model.nonlinearity().is_zero() {
        return 0.0;
    }
    let n_f = model.n_f();
    let radius = model.domain_radius();
    let norms = map_indexed(exec, n_samples, |i| {
        let mut rng = sample_rng(seed ^ 0x5eed_f00d, i);
        let rho = radius * rng.random::<f64>().powf(0.25);
        let theta = rng.random::<f64>() * std::f64::consts::FRAC_PI_2;
        let xr = sample_sphere(&mut rng, n, rho * theta.cos());
        let xn = sample_sphere(&mut rng, n_f - n, rho * theta.sin());
        let mut x = DVector::zeros(n_f);
        x.rows_mut(0, n).copy_from(&xr);
        x.rows_mut(n, n_f - n).copy_from(&xn);
        model.nonlinearity().jacobian_norm(&x)
    });
    INFLATION * norms.into_iter().fold(0.0, f64::max)
}

/// All tube constants of `rom` on the operating ball of `model`.
pub fn estimate_constants(
    rom: &SsmRom,
    model: &FullOrderModel,
    n_samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<RomConstants> {
    if n_samples < 1000 {
        return Err(Error::InvalidArgument(format!("at least 1000 samples required, got {n_samples}")));
    }
    if rom.n_f() != model.n_f() {
        return Err(Error::DimensionMismatch { context: "rom vs model state", expected: model.n_f(), actual: rom.n_f() });
    }
    let n = rom.n();
    let (_, fast) = split_blocks(model.blocks(), n)?;
    let a_n: DMatrix<f64> = assemble_a(&fast)?;
    let (l_wnl, l_rnl, l_cw) = estimate_reduced_constants(rom, model.domain_radius(), n_samples, seed, exec);
    let l_fnl = estimate_l_fnl(model, n, n_samples, seed, exec);
    let bound_inconsistent = l_rnl > l_fnl * (1.0 + l_wnl) * (1.0 + 1e-9);
    if bound_inconsistent {
        log::warn!("sampled L_rnl = {l_rnl} exceeds L_fnl (1 + L_wnl) = {}", l_fnl * (1.0 + l_wnl));
    }
    Ok(RomConstants {
        source: ConstantSource::Estimated,
        l_fnl,
        l_wnl,
        l_rnl,
        l_cw,
        lambda_an: log_norm(&a_n),
        lambda_ar: log_norm(rom.a_r()),
        d_bar: model.d_bar(),
        lambda_an_heuristic: false,
        bound_inconsistent,
        data_driven: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::{manufacture_benchmark, BenchmarkConfig};

    #[test]
    fn linear_benchmark_constants() {
        let spec = BenchmarkConfig::small_test().linear().to_spec().unwrap();
        let (model, rom) = manufacture_benchmark(&spec).unwrap();
        let k = estimate_constants(&rom, &model, 1000, 1, Execution::Sequential).unwrap();
        assert_eq!((k.l_fnl, k.l_wnl, k.l_rnl), (0.0, 0.0, 0.0));
        let cvr = spectral_norm(&rom.c().columns(0, rom.n()).into_owned());
        assert!((k.l_cw - INFLATION * cvr).abs() < 1e-12);
        assert_eq!(k.lambda_ar, -2.0);
        assert_eq!(k.lambda_an, -30.0);
    }

    #[test]
    fn estimates_are_deterministic_across_execution_modes() {
        let spec = BenchmarkConfig::small_test().to_spec().unwrap();
        let (model, rom) = manufacture_benchmark(&spec).unwrap();
        let a = estimate_constants(&rom, &model, 1000, 9, Execution::Sequential).unwrap();
        let b = estimate_constants(&rom, &model, 1000, 9, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(!a.bound_inconsistent);
        assert!(estimate_constants(&rom, &model, 10, 9, Execution::Sequential).is_err());
    }
}
