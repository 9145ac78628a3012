use nalgebra::Complex;

use super::FullOrderModel;

const RESONANCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResonanceDirection {
    /// An outer eigenvalue equals a combination of subspace eigenvalues.
    OuterFromSubspace,
    /// A subspace eigenvalue equals a combination of outer eigenvalues.
    SubspaceFromOuter,
}

/// One violating integer combination.
#[derive(Debug, Clone, PartialEq)]
pub struct Resonance {
    pub direction: ResonanceDirection,
    pub target: Complex<f64>,
    /// Multiplicity of each eigenvalue of the combining set, indexed like that set.
    pub multi_index: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub hurwitz: bool,
    pub semisimple: bool,
    pub ordered: bool,
    pub subspace_spectrum: Vec<Complex<f64>>,
    pub outer_spectrum: Vec<Complex<f64>>,
    pub resonances: Vec<Resonance>,
    pub max_order: usize,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.hurwitz && self.semisimple && self.ordered && self.resonances.is_empty()
    }
}

/// Checks stability, modal ordering and non-resonance of orders `2..=max_order`
/// between the leading `n` eigenvalues and the rest, in both directions.
pub fn check_assumptions(model: &FullOrderModel, n: usize, max_order: usize) -> AssumptionReport {
    let eig = model.eigenvalues();
    let n = n.min(eig.len());
    let (sub, out) = eig.split_at(n);
    let blocks = model.blocks();
    let mut resonances = Vec::new();
    if !out.is_empty() && !sub.is_empty() {
        for &target in out {
            find_combinations(sub, target, max_order, ResonanceDirection::OuterFromSubspace, &mut resonances);
        }
        for &target in sub {
            find_combinations(out, target, max_order, ResonanceDirection::SubspaceFromOuter, &mut resonances);
        }
    }
    AssumptionReport {
        hurwitz: blocks.iter().all(|b| b.is_hurwitz()),
        // Real block form with one block per eigenvalue (pair) is diagonalisable.
        semisimple: true,
        ordered: blocks.windows(2).all(|w| w[1].decay <= w[0].decay),
        subspace_spectrum: sub.to_vec(),
        outer_spectrum: out.to_vec(),
        resonances,
        max_order,
    }
}

/// Enumerates nonnegative multi-indices of order `2..=max_order` over `set`, pruning
/// on the real part: every eigenvalue is stable, so adding terms only moves the sum
/// further left.
fn find_combinations(
    set: &[Complex<f64>],
    target: Complex<f64>,
    max_order: usize,
    direction: ResonanceDirection,
    found: &mut Vec<Resonance>,
) {
    let mut multi = vec![0u32; set.len()];
    recurse(set, target, max_order, 0, 0, Complex::new(0.0, 0.0), &mut multi, direction, found);
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    set: &[Complex<f64>],
    target: Complex<f64>,
    max_order: usize,
    start: usize,
    order: usize,
    sum: Complex<f64>,
    multi: &mut Vec<u32>,
    direction: ResonanceDirection,
    found: &mut Vec<Resonance>,
) {
    if order >= 2 && (sum - target).norm() <= RESONANCE_TOL * (1.0 + target.norm()) {
        found.push(Resonance { direction, target, multi_index: multi.clone() });
    }
    if order == max_order {
        return;
    }
    for i in start..set.len() {
        let next = sum + set[i];
        if next.re < target.re - RESONANCE_TOL * (1.0 + target.norm()) {
            continue;
        }
        multi[i] += 1;
        recurse(set, target, max_order, i, order + 1, next, multi, direction, found);
        multi[i] -= 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::{ModalBlock, Nonlinearity};
    use nalgebra::DMatrix;

    fn model(blocks: Vec<ModalBlock>) -> FullOrderModel {
        let n_f: usize = blocks.iter().map(|b| b.dim()).sum();
        FullOrderModel::new(blocks, Nonlinearity::Zero, DMatrix::zeros(n_f, 1), DMatrix::zeros(1, n_f), 0.0, 1.0).unwrap()
    }

    /// Brute force over all multi-indices with bounded entries.
    fn brute_force(sub: &[Complex<f64>], target: Complex<f64>, max_order: usize) -> usize {
        let k = sub.len();
        let mut count = 0;
        let total = (max_order + 1).pow(k as u32);
        for code in 0..total {
            let mut c = code;
            let mut ord = 0;
            let mut sum = Complex::new(0.0, 0.0);
            for s in sub {
                let m = c % (max_order + 1);
                c /= max_order + 1;
                ord += m;
                sum += s * m as f64;
            }
            if (2..=max_order).contains(&ord) && (sum - target).norm() <= 1e-9 * (1.0 + target.norm()) {
                count += 1;
            }
        }
        count
    }

    #[test]
    fn separated_spectra_pass() {
        let m = model(vec![ModalBlock::rotational(-1.0, 10.0), ModalBlock::scalar(-20.0)]);
        let r = check_assumptions(&m, 2, 3);
        assert!(r.passed(), "{:?}", r.resonances);
        assert_eq!(brute_force(&r.subspace_spectrum, Complex::new(-20.0, 0.0), 3), 0);
    }

    #[test]
    fn doubled_decay_is_resonant() {
        let m = model(vec![ModalBlock::scalar(-2.0), ModalBlock::scalar(-4.0)]);
        let r = check_assumptions(&m, 1, 2);
        assert!(!r.passed());
        assert_eq!(r.resonances.len(), 1);
        assert_eq!(r.resonances[0].direction, ResonanceDirection::OuterFromSubspace);
        assert_eq!(r.resonances[0].multi_index, vec![2]);
    }

    #[test]
    fn full_dimension_is_vacuous() {
        let m = model(vec![ModalBlock::scalar(-2.0), ModalBlock::scalar(-4.0)]);
        let r = check_assumptions(&m, 2, 3);
        assert!(r.outer_spectrum.is_empty());
        assert!(r.passed());
    }

    #[test]
    fn enumeration_matches_brute_force() {
        let m = model(vec![
            ModalBlock::rotational(-1.0, 1.0),
            ModalBlock::scalar(-1.5),
            ModalBlock::scalar(-2.0),
            ModalBlock::rotational(-3.0, 1.0),
            ModalBlock::scalar(-3.5),
        ]);
        let r = check_assumptions(&m, 3, 3);
        for &t in &r.outer_spectrum {
            let ours = r
                .resonances
                .iter()
                .filter(|x| x.direction == ResonanceDirection::OuterFromSubspace && x.target == t)
                .count();
            assert_eq!(ours, brute_force(&r.subspace_spectrum, t, 3), "target {t}");
        }
        assert!(!r.passed());
    }
}
