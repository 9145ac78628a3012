use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{FullOrderModel, Schedule};
use crate::error::{Error, Result};
use crate::linalg::spectral_norm;

/// Uniform sample on the sphere of radius `radius` in `dim` dimensions.
pub fn sample_sphere<R: Rng + ?Sized>(rng: &mut R, dim: usize, radius: f64) -> DVector<f64> {
    if dim == 0 || radius == 0.0 {
        return DVector::zeros(dim);
    }
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-300 {
            return v * (radius / norm);
        }
    }
}

/// Actuation-noise disturbance `d = B u_d` with `||u_d|| = magnitude`, resampled
/// every `period` for `periods` periods.
pub fn sample_disturbance(
    model: &FullOrderModel,
    magnitude: f64,
    seed: u64,
    period: f64,
    periods: usize,
) -> Result<Schedule> {
    if !(magnitude >= 0.0) {
        return Err(Error::InvalidArgument("disturbance magnitude must be nonnegative".into()));
    }
    let implied = spectral_norm(model.b()) * magnitude;
    if implied > model.d_bar() * (1.0 + 1e-12) {
        return Err(Error::DisturbanceBound { magnitude, implied, d_bar: model.d_bar() });
    }
    if magnitude == 0.0 {
        return Ok(Schedule::zeros(model.n_f()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..periods.max(1))
        .map(|_| model.b() * sample_sphere(&mut rng, model.m(), magnitude))
        .collect();
    Schedule::new(period, values)
}
