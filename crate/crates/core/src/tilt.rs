//! Discrete reference distributions and the exponential-tilt solver.
//!
//! A reference distribution `F` is finitely supported, so its Laplace
//! transform exists everywhere and every integral below is an exact sum.
//! Tilting `F` by `theta` gives the distribution with masses
//! `exp(b + theta * y_j) * w_j`, where `b` is the normalizer.

use crate::error::{Error, Result};
use crate::par;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Finitely supported distribution with strictly increasing atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDistribution {
    atoms: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl ReferenceDistribution {
    /// Builds a distribution from atoms and probabilities that already sum
    /// to one.
    pub fn new(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        validate_atoms(&atoms)?;
        if weights.len() != atoms.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidDistribution(format!(
                "weight {w} is not strictly positive"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidDistribution(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            atoms,
            weights,
            log_weights,
        })
    }

    /// Builds a distribution from positive masses, rescaling them to sum to one.
    pub fn from_masses(atoms: Vec<f64>, masses: &[f64]) -> Result<Self> {
        if masses.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(Error::InvalidDistribution(
                "masses must be finite and strictly positive".into(),
            ));
        }
        let log_masses: Vec<f64> = masses.iter().map(|m| m.ln()).collect();
        Self::from_log_masses(atoms, &log_masses)
    }

    /// Builds a distribution from unnormalized log-masses.
    pub fn from_log_masses(atoms: Vec<f64>, log_masses: &[f64]) -> Result<Self> {
        validate_atoms(&atoms)?;
        if log_masses.len() != atoms.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} atoms but {} log-masses",
                atoms.len(),
                log_masses.len()
            )));
        }
        if log_masses.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidDistribution("non-finite log-mass".into()));
        }
        let lse = log_sum_exp(log_masses);
        let log_weights: Vec<f64> = log_masses.iter().map(|l| l - lse).collect();
        // a mass below the f64 range reads as 0.0 in `weights`; `log_weights`
        // stays exact and is what every computation uses
        let weights: Vec<f64> = log_weights.iter().map(|l| l.exp()).collect();
        Ok(Self {
            atoms,
            weights,
            log_weights,
        })
    }

    /// Empirical distribution of a sample: distinct values weighted by
    /// relative frequency.
    pub fn empirical(values: &[f64]) -> Result<Self> {
        let (atoms, counts) = distinct_counts(values)?;
        let masses: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        Self::from_masses(atoms, &masses)
    }

    pub fn uniform(atoms: Vec<f64>) -> Result<Self> {
        let masses = vec![1.0; atoms.len()];
        Self::from_masses(atoms, &masses)
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Closed support hull `[y_1, y_m]`.
    pub fn hull(&self) -> (f64, f64) {
        (self.atoms[0], self.atoms[self.atoms.len() - 1])
    }

    /// True when `mu` lies strictly inside the support hull.
    pub fn contains_interior(&self, mu: f64) -> bool {
        let (lo, hi) = self.hull();
        mu > lo && mu < hi
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().zip(&self.weights).map(|(y, w)| y * w).sum()
    }

    /// Index of the atom exactly equal to `y`.
    pub fn index_of(&self, y: f64) -> Option<usize> {
        self.atoms
            .binary_search_by(|a| a.partial_cmp(&y).expect("atoms are finite"))
            .ok()
    }

    /// The tilted distribution at `theta`, as a new reference distribution.
    pub fn tilted(&self, theta: f64) -> Self {
        let log_masses: Vec<f64> = self
            .atoms
            .iter()
            .zip(&self.log_weights)
            .map(|(y, lw)| lw + theta * y)
            .collect();
        // atoms were validated on construction and theta * y is finite
        Self::from_log_masses(self.atoms.clone(), &log_masses)
            .expect("tilting a valid distribution stays valid")
    }

    /// Copy of the distribution with every atom shifted by `c`.
    pub fn shifted(&self, c: f64) -> Self {
        Self {
            atoms: self.atoms.iter().map(|y| y + c).collect(),
            weights: self.weights.clone(),
            log_weights: self.log_weights.clone(),
        }
    }
}

fn validate_atoms(atoms: &[f64]) -> Result<()> {
    if atoms.is_empty() {
        return Err(Error::InvalidDistribution("no atoms".into()));
    }
    if atoms.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidDistribution("non-finite atom".into()));
    }
    if atoms.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidDistribution(
            "atoms must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Sorted distinct values of a sample with their multiplicities.
pub fn distinct_counts(values: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidDistribution("non-finite value".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut atoms: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for v in sorted {
        match atoms.last() {
            Some(&last) if last == v => *counts.last_mut().unwrap() += 1,
            _ => {
                atoms.push(v);
                counts.push(1);
            }
        }
    }
    Ok((atoms, counts))
}

/// `log(sum(exp(xs)))` with the max-shift.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalizer `b(theta) = -log sum_j exp(theta * y_j) w_j`.
pub fn normalizer(f: &ReferenceDistribution, theta: f64) -> f64 {
    let exps: Vec<f64> = f
        .atoms
        .iter()
        .zip(&f.log_weights)
        .map(|(y, lw)| lw + theta * y)
        .collect();
    -log_sum_exp(&exps)
}

/// Tilted masses and normalizer at `theta`.
fn tilt_weights(f: &ReferenceDistribution, theta: f64) -> (Vec<f64>, f64) {
    // centering keeps theta * y small when the atoms sit far from zero
    let c = 0.5 * (f.atoms[0] + f.atoms[f.atoms.len() - 1]);
    let mut exps: Vec<f64> = f
        .atoms
        .iter()
        .zip(&f.log_weights)
        .map(|(y, lw)| lw + theta * (y - c))
        .collect();
    let lse = log_sum_exp(&exps);
    for e in exps.iter_mut() {
        *e = (*e - lse).exp();
    }
    (exps, -lse - theta * c)
}

fn moments(atoms: &[f64], tw: &[f64]) -> (f64, f64) {
    let mean: f64 = atoms.iter().zip(tw).map(|(y, p)| y * p).sum();
    let var: f64 = atoms
        .iter()
        .zip(tw)
        .map(|(y, p)| {
            let d = y - mean;
            p * d * d
        })
        .sum();
    (mean, var)
}

/// Mean and variance of `F` tilted by `theta`.
pub fn tilted_moments(f: &ReferenceDistribution, theta: f64) -> (f64, f64) {
    let (tw, _) = tilt_weights(f, theta);
    moments(&f.atoms, &tw)
}

/// Solution of the mean constraint at one target mean.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltSolution {
    pub theta: f64,
    pub b: f64,
    pub mean: f64,
    pub variance: f64,
    pub tilted_weights: Vec<f64>,
}

impl TiltSolution {
    /// Exact conditional expectation of `g(Y)` under the tilted distribution.
    pub fn expect(&self, atoms: &[f64], g: impl Fn(f64) -> f64) -> f64 {
        atoms
            .iter()
            .zip(&self.tilted_weights)
            .map(|(&y, p)| p * g(y))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for TiltOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

/// Finds the tilt whose tilted mean equals `target_mean`.
pub fn solve_tilt(f: &ReferenceDistribution, target_mean: f64, tol: f64) -> Result<TiltSolution> {
    solve_tilt_from(
        f,
        target_mean,
        0.0,
        TiltOptions {
            tol,
            ..TiltOptions::default()
        },
    )
}

/// Safeguarded Newton on `g(theta) = mean(theta) - target`, started at
/// `theta0`. `g' = variance > 0`, so `g` is increasing with a unique root;
/// the iterate falls back to bisection when Newton leaves the bracket.
pub fn solve_tilt_from(
    f: &ReferenceDistribution,
    target_mean: f64,
    theta0: f64,
    opts: TiltOptions,
) -> Result<TiltSolution> {
    let (lo_atom, hi_atom) = f.hull();
    if !target_mean.is_finite() || target_mean <= lo_atom || target_mean >= hi_atom {
        return Err(Error::TargetOutsideHull {
            target: target_mean,
            lower: lo_atom,
            upper: hi_atom,
        });
    }
    let range = hi_atom - lo_atom;
    // keeps a single unbracketed step from jumping across many e-folds
    let max_step = 20.0 / range;

    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let mut theta = if theta0.is_finite() { theta0 } else { 0.0 };
    let mut residual = f64::INFINITY;

    for _ in 0..opts.max_iter {
        let (tw, b) = tilt_weights(f, theta);
        let (mean, variance) = moments(&f.atoms, &tw);
        let g = mean - target_mean;
        residual = g.abs();
        if residual <= opts.tol {
            let mut best = TiltSolution {
                theta,
                b,
                mean,
                variance,
                tilted_weights: tw,
            };
            // one polishing Newton step; kept only if it helps
            if variance > 0.0 && residual > 0.0 {
                let t = theta - g / variance;
                let (tw, b) = tilt_weights(f, t);
                let (mean, variance) = moments(&f.atoms, &tw);
                if (mean - target_mean).abs() < residual {
                    best = TiltSolution {
                        theta: t,
                        b,
                        mean,
                        variance,
                        tilted_weights: tw,
                    };
                }
            }
            return Ok(best);
        }
        if g < 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        let newton = if variance > 0.0 {
            theta - g / variance
        } else {
            f64::NAN
        };
        let next = if newton.is_finite() && newton > lo && newton < hi {
            theta + (newton - theta).clamp(-max_step, max_step)
        } else if lo.is_finite() && hi.is_finite() {
            0.5 * (lo + hi)
        } else if lo.is_finite() {
            theta + max_step
        } else {
            theta - max_step
        };
        if next == theta {
            break;
        }
        theta = next;
    }
    Err(Error::ToleranceNotReached {
        iterations: opts.max_iter,
        residual,
    })
}

/// Solves one tilt per target, warm-started from `theta0` when given.
/// Long batches run in parallel; results keep input order.
pub fn solve_tilts(
    f: &ReferenceDistribution,
    targets: &[f64],
    theta0: Option<&[f64]>,
    opts: TiltOptions,
) -> Vec<Result<TiltSolution>> {
    par::map_range_auto(targets.len(), |i| {
        let start = theta0.map_or(0.0, |t| t[i]);
        solve_tilt_from(f, targets[i], start, opts)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn coin() -> ReferenceDistribution {
        ReferenceDistribution::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn rejects_bad_distributions() {
        assert!(ReferenceDistribution::new(vec![1.0, 0.0], vec![0.5, 0.5]).is_err());
        assert!(ReferenceDistribution::new(vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
        assert!(ReferenceDistribution::new(vec![0.0, 1.0], vec![1.0, 0.0]).is_err());
        assert!(ReferenceDistribution::new(vec![0.0, 0.0], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn normalizer_examples() {
        assert_eq!(normalizer(&coin(), 0.0), 0.0);
        assert_relative_eq!(normalizer(&coin(), 3f64.ln()), -(2f64.ln()), epsilon = 1e-15);
        let f = ReferenceDistribution::new(vec![-3.0, 0.2, 7.0], vec![0.2, 0.3, 0.5]).unwrap();
        assert!(normalizer(&f, 0.0).abs() < 1e-15);
    }

    #[test]
    fn normalizer_survives_large_tilts() {
        let f = ReferenceDistribution::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        // b = -log(0.5 + 0.5 e^700) = -(700 + log 0.5) to double precision
        let b = normalizer(&f, 700.0);
        assert!(b.is_finite());
        assert_relative_eq!(b, -(700.0 + 0.5f64.ln()), max_relative = 1e-14);
        assert!(normalizer(&f, -700.0).is_finite());
    }

    #[test]
    fn moment_examples() {
        let (m, v) = tilted_moments(&coin(), 0.0);
        assert_eq!((m, v), (0.5, 0.25));
        let (m, v) = tilted_moments(&coin(), 3f64.ln());
        assert_relative_eq!(m, 0.75, epsilon = 1e-15);
        assert_relative_eq!(v, 0.1875, epsilon = 1e-15);
        let f = ReferenceDistribution::uniform(vec![-1.0, 0.0, 1.0]).unwrap();
        let (m, v) = tilted_moments(&f, 0.0);
        assert!(m.abs() < 1e-15);
        assert_relative_eq!(v, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn solve_examples() {
        let s = solve_tilt(&coin(), 0.5, 1e-10).unwrap();
        assert_eq!(s.theta, 0.0);
        assert_eq!(s.b, 0.0);

        let s = solve_tilt(&coin(), 0.75, 1e-12).unwrap();
        assert_relative_eq!(s.theta, 3f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(s.b, -(2f64.ln()), epsilon = 1e-12);

        assert!(matches!(
            solve_tilt(&coin(), 1.0, 1e-10),
            Err(Error::TargetOutsideHull { .. })
        ));
        assert!(matches!(
            solve_tilt(&coin(), -0.1, 1e-10),
            Err(Error::TargetOutsideHull { .. })
        ));
    }

    /// Plain bisection on the tilted mean, independent of the Newton path.
    fn bisection_theta(f: &ReferenceDistribution, target: f64) -> f64 {
        let mean_at = |t: f64| {
            let num: f64 = f
                .atoms()
                .iter()
                .zip(f.weights())
                .map(|(y, w)| y * w * (t * y).exp())
                .sum();
            let den: f64 = f
                .atoms()
                .iter()
                .zip(f.weights())
                .map(|(y, w)| w * (t * y).exp())
                .sum();
            num / den
        };
        let (mut lo, mut hi) = (-50.0, 50.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mean_at(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn three_atom_matches_bisection() {
        let f = ReferenceDistribution::uniform(vec![0.0, 1.0, 2.0]).unwrap();
        let s = solve_tilt(&f, 1.5, 1e-13).unwrap();
        let oracle = bisection_theta(&f, 1.5);
        assert!((s.theta - oracle).abs() < 1e-10, "{} vs {}", s.theta, oracle);
        // closed form: u = e^t solves u^2 - u - 3 = 0
        assert_relative_eq!(s.theta, ((1.0 + 13f64.sqrt()) / 2.0).ln(), epsilon = 1e-10);
    }

    #[test]
    fn near_boundary_targets() {
        let f = ReferenceDistribution::uniform(vec![0.0, 1.0, 2.0]).unwrap();
        for target in [1e-6, 1.999_999, 0.001, 1.99] {
            let s = solve_tilt(&f, target, 1e-10).unwrap();
            assert!((s.mean - target).abs() <= 1e-10);
        }
    }

    #[test]
    fn empirical_counts_ties() {
        let f = ReferenceDistribution::empirical(&[2.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(f.atoms(), &[0.0, 1.0, 2.0]);
        assert_relative_eq!(f.weights()[1], 0.5, epsilon = 1e-15);
        assert_eq!(f.index_of(1.0), Some(1));
        assert_eq!(f.index_of(1.5), None);
    }

    fn random_distribution() -> impl Strategy<Value = ReferenceDistribution> {
        (2usize..12).prop_flat_map(|m| {
            (
                prop::collection::vec(0.05f64..2.0, m),
                prop::collection::vec(0.01f64..1.0, m),
                -5.0f64..5.0,
            )
                .prop_map(|(gaps, masses, start)| {
                    let mut atoms = Vec::with_capacity(gaps.len());
                    let mut y = start;
                    for g in gaps {
                        y += g;
                        atoms.push(y);
                    }
                    ReferenceDistribution::from_masses(atoms, &masses).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn mean_derivative_is_variance(f in random_distribution(), theta in -3.0f64..3.0) {
            let h = 1e-5;
            let (mp, _) = tilted_moments(&f, theta + h);
            let (mm, _) = tilted_moments(&f, theta - h);
            let (_, v) = tilted_moments(&f, theta);
            let fd = (mp - mm) / (2.0 * h);
            prop_assert!((fd - v).abs() <= 1e-6 * v.abs().max(1e-12), "fd {} var {}", fd, v);
            prop_assert!(v > 0.0);
        }

        #[test]
        fn round_trip_recovers_theta(f in random_distribution(), theta in -5.0f64..5.0) {
            let (mean, _) = tilted_moments(&f, theta);
            let (lo, hi) = f.hull();
            prop_assume!(mean > lo && mean < hi);
            let s = solve_tilt(&f, mean, 1e-12).unwrap();
            prop_assert!((s.theta - theta).abs() <= 1e-8, "{} vs {}", s.theta, theta);
            let total: f64 = s.tilted_weights.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn shift_equivariance(f in random_distribution(), u in 0.05f64..0.95, c in -10.0f64..10.0) {
            let (lo, hi) = f.hull();
            let mu = lo + u * (hi - lo);
            let a = solve_tilt(&f, mu, 1e-11).unwrap();
            let b = solve_tilt(&f.shifted(c), mu + c, 1e-11).unwrap();
            prop_assert!((a.theta - b.theta).abs() <= 1e-7 * (1.0 + a.theta.abs()));
            for (p, q) in a.tilted_weights.iter().zip(&b.tilted_weights) {
                prop_assert!((p - q).abs() <= 1e-7);
            }
        }
    }
}
