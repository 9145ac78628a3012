use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output reference signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Reference {
    Setpoint {
        output: Vec<f64>,
    },
    /// Counterclockwise walk along a square in the first two outputs at constant
    /// speed, starting at the midpoint of the right edge; after `laps` periods the
    /// reference holds `final_output`.
    Square {
        center: Vec<f64>,
        half_width: f64,
        period: f64,
        laps: f64,
        final_output: Option<Vec<f64>>,
    },
}

impl Reference {
    pub fn validate(&self, n_y: usize) -> Result<()> {
        match self {
            Reference::Setpoint { output } if output.len() != n_y => {
                Err(Error::DimensionMismatch { context: "setpoint", expected: n_y, actual: output.len() })
            }
            Reference::Square { center, half_width, period, laps, final_output } => {
                if center.len() != n_y || n_y < 2 {
                    return Err(Error::Config(format!("square reference needs a center with {n_y} >= 2 entries")));
                }
                if !(*half_width > 0.0 && *period > 0.0 && *laps >= 0.0) {
                    return Err(Error::Config("square reference needs positive size and period".into()));
                }
                match final_output {
                    Some(f) if f.len() != n_y => Err(Error::DimensionMismatch { context: "final setpoint", expected: n_y, actual: f.len() }),
                    _ => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }

    pub fn at(&self, t: f64) -> DVector<f64> {
        match self {
            Reference::Setpoint { output } => DVector::from_column_slice(output),
            Reference::Square { center, half_width, period, laps, final_output } => {
                if t >= laps * period {
                    if let Some(f) = final_output {
                        return DVector::from_column_slice(f);
                    }
                }
                let h = *half_width;
                // Arc length along the perimeter (8h), starting mid right edge.
                let p = (t / period).rem_euclid(1.0) * 8.0 * h;
                let (dx, dy) = if p < h {
                    (h, p)
                } else if p < 3.0 * h {
                    (h - (p - h), h)
                } else if p < 5.0 * h {
                    (-h, h - (p - 3.0 * h))
                } else if p < 7.0 * h {
                    (-h + (p - 5.0 * h), -h)
                } else {
                    (h, -h + (p - 7.0 * h))
                };
                let mut y = DVector::from_column_slice(center);
                y[0] += dx;
                y[1] += dy;
                y
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_walks_the_perimeter() {
        let r = Reference::Square { center: vec![0.0, 0.0], half_width: 1.0, period: 8.0, laps: 1.0, final_output: Some(vec![-1.0, 1.0]) };
        r.validate(2).unwrap();
        let pts: Vec<(f64, f64)> = [0.0, 1.0, 3.0, 5.0, 7.0, 7.5].iter().map(|&t| (r.at(t)[0], r.at(t)[1])).collect();
        assert_eq!(pts, vec![(1.0, 0.0), (1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (1.0, -0.5)]);
        assert_eq!(r.at(9.0).as_slice(), &[-1.0, 1.0]);
        for k in 0..800 {
            let y = r.at(k as f64 * 0.01);
            assert!(y.amax() <= 1.0 + 1e-12);
        }
    }
}
