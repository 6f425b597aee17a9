//! Numerical checks that the mean parameters are orthogonal to the error
//! distribution.
//!
//! The nuisance tangent space of the restricted moment model is the set of
//! functions `a(x, y)` with `E[(Y - mu) a(x, Y) | x] = 0`. Projecting onto it
//! is `s -> s - E[(Y - mu) s | x] / V (y - mu)`, computed here as an exact
//! finite sum over the atoms of the tilted distribution at `x`. The beta
//! score is linear in `y - mu`, so its projection vanishes identically.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::model::{GlmSpec, LinkFunction, ModelState};
use crate::par::{self, Execution};
use crate::parametric::ParametricFamily;
use crate::tilt::{solve_tilt_from, ReferenceDistribution, TiltOptions};

type Evaluator = dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync;

/// A vector-valued function `s(x, y)` of a covariate row and a response.
#[derive(Clone)]
pub struct ResidualFunctional {
    evaluator: Arc<Evaluator>,
    description: String,
}

impl ResidualFunctional {
    pub fn new<F>(description: impl Into<String>, f: F) -> Self
    where
        F: Fn(&[f64], f64) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            evaluator: Arc::new(f),
            description: description.into(),
        }
    }

    pub fn eval(&self, x: &[f64], y: f64) -> Vec<f64> {
        (self.evaluator)(x, y)
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    /// Contribution of one observation to the beta score,
    /// `x mu'(x^T beta) / V(x) (y - mu(x))`, under the model in `state`.
    pub fn score_contribution(state: &ModelState, link: LinkFunction) -> Self {
        let beta = state.beta.clone();
        let f = state.f.clone();
        Self::new("beta score contribution", move |x: &[f64], y: f64| {
            let eta: f64 = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            let Ok(local) = TiltedAt::solve(&f, link.mu(eta)) else {
                return vec![f64::NAN; x.len()];
            };
            let w = link.mu_prime(eta) / local.variance;
            x.iter().map(|xj| xj * w * (y - local.mean)).collect()
        })
    }
}

impl fmt::Debug for ResidualFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ResidualFunctional")
            .field("description", &self.description)
            .finish_non_exhaustive()
    }
}

/// Tilted distribution of `F` at one covariate row.
#[derive(Debug, Clone)]
struct TiltedAt {
    atoms: Vec<f64>,
    probs: Vec<f64>,
    mean: f64,
    variance: f64,
}

impl TiltedAt {
    fn solve(f: &ReferenceDistribution, mu: f64) -> Result<Self> {
        let t = solve_tilt_from(f, mu, 0.0, TiltOptions::default())?;
        Ok(Self {
            atoms: f.atoms().to_vec(),
            probs: t.tilted_weights,
            mean: t.mean,
            variance: t.variance,
        })
    }

    fn from_state(state: &ModelState, i: usize) -> Self {
        let t = &state.tilts[i];
        Self {
            atoms: state.f.atoms().to_vec(),
            probs: t.tilted_weights.clone(),
            mean: t.mean,
            variance: t.variance,
        }
    }

    /// `E[(Y - mu) s(x, Y) | x] / (scale * V)`.
    fn coefficient(&self, s: &ResidualFunctional, x: &[f64], variance_scale: f64) -> Vec<f64> {
        let mut acc = vec![0.0; x.len()];
        for (&y, &p) in self.atoms.iter().zip(&self.probs) {
            let v = s.eval(x, y);
            if acc.len() != v.len() {
                acc.resize(v.len(), 0.0);
            }
            for (a, vj) in acc.iter_mut().zip(v) {
                *a += p * (y - self.mean) * vj;
            }
        }
        let denom = variance_scale * self.variance;
        acc.iter().map(|a| a / denom).collect()
    }
}

fn row_of(spec: &GlmSpec, i: usize) -> Vec<f64> {
    spec.x().row(i).iter().copied().collect()
}

fn projected(s: ResidualFunctional, coef: Vec<f64>, mean: f64) -> ResidualFunctional {
    let description = format!("projection of {}", s.description);
    ResidualFunctional::new(description, move |x: &[f64], y: f64| {
        let mut v = s.eval(x, y);
        for (vj, c) in v.iter_mut().zip(&coef) {
            *vj -= c * (y - mean);
        }
        v
    })
}

/// Projection of `s` onto the nuisance tangent space, at covariate row `x`.
///
/// The returned functional is only meaningful at that same `x`. Errors when
/// the fitted mean at `x` is outside the hull of `F`.
pub fn project_nuisance(
    s: &ResidualFunctional,
    state: &ModelState,
    link: LinkFunction,
    x: &[f64],
) -> Result<ResidualFunctional> {
    project_nuisance_scaled(s, state, link, x, 1.0)
}

/// [`project_nuisance`] with the variance in the projection multiplied by
/// `variance_scale`; anything other than 1 gives a wrong projection.
pub fn project_nuisance_scaled(
    s: &ResidualFunctional,
    state: &ModelState,
    link: LinkFunction,
    x: &[f64],
    variance_scale: f64,
) -> Result<ResidualFunctional> {
    if x.len() != state.beta.len() {
        return Err(Error::InvalidSpec(format!(
            "covariate row has length {}, expected {}",
            x.len(),
            state.beta.len()
        )));
    }
    let eta: f64 = x.iter().zip(state.beta.iter()).map(|(a, b)| a * b).sum();
    if !link.in_domain(eta) {
        return Err(Error::InvalidSpec(format!("linear predictor {eta} outside the {link} domain")));
    }
    let local = TiltedAt::solve(&state.f, link.mu(eta))?;
    let coef = local.coefficient(s, x, variance_scale);
    Ok(projected(s.clone(), coef, local.mean))
}

/// `E[(Y - mu) s(x, Y) | x]` at covariate row `x`, summed exactly over atoms.
pub fn residual_moment(
    s: &ResidualFunctional,
    state: &ModelState,
    link: LinkFunction,
    x: &[f64],
) -> Result<Vec<f64>> {
    let eta: f64 = x.iter().zip(state.beta.iter()).map(|(a, b)| a * b).sum();
    let local = TiltedAt::solve(&state.f, link.mu(eta))?;
    Ok(local
        .coefficient(s, x, 1.0)
        .into_iter()
        .map(|c| c * local.variance)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NullityReport {
    /// Largest `|Pi S|` over observations, atoms and components.
    pub max_abs: f64,
    pub tol: f64,
    pub passed: bool,
    /// Number of (observation, atom) points evaluated.
    pub evaluations: usize,
}

/// Evaluates the projected beta score at every observation and every atom.
pub fn check_projection_nullity(state: &ModelState, spec: &GlmSpec, tol: f64) -> NullityReport {
    check_projection_nullity_scaled(state, spec, tol, 1.0)
}

/// [`check_projection_nullity`] with the projection's variance scaled; a
/// scale other than 1 is a negative control and should fail.
pub fn check_projection_nullity_scaled(
    state: &ModelState,
    spec: &GlmSpec,
    tol: f64,
    variance_scale: f64,
) -> NullityReport {
    let link = spec.link();
    let mut max_abs = 0.0f64;
    let mut evaluations = 0;
    for i in 0..spec.n() {
        let x = row_of(spec, i);
        let local = TiltedAt::from_state(state, i);
        let w = link.mu_prime(state.etas()[i]) / local.variance;
        let mean = local.mean;
        let xs = x.clone();
        let s = ResidualFunctional::new("beta score contribution", move |_: &[f64], y: f64| {
            xs.iter().map(|xj| xj * w * (y - mean)).collect()
        });
        let coef = local.coefficient(&s, &x, variance_scale);
        let ps = projected(s, coef, mean);
        for &y in &local.atoms {
            for v in ps.eval(&x, y) {
                max_abs = max_abs.max(if v.is_finite() { v.abs() } else { f64::INFINITY });
            }
            evaluations += 1;
        }
    }
    NullityReport {
        max_abs,
        tol,
        passed: max_abs <= tol,
        evaluations,
    }
}

/// A random `(link, beta, F, X)` configuration with every fitted mean inside
/// the hull of `F`, and responses drawn from the atoms.
pub fn random_config<R: Rng + ?Sized>(rng: &mut R, link: LinkFunction) -> Result<(GlmSpec, ModelState)> {
    for _ in 0..100 {
        let n = rng.random_range(3..16);
        let q = rng.random_range(1..=4usize).min(n - 1);
        let x = DMatrix::from_fn(n, q, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let spread = rng.random_range(0.05..0.6);
        let beta = DVector::from_fn(q, |j, _| {
            let base = match (link, j) {
                (LinkFunction::Inverse, 0) => rng.random_range(0.5..2.0),
                (LinkFunction::Log, 0) => rng.random_range(-1.0..2.0),
                (LinkFunction::Identity, 0) => rng.random_range(-5.0..5.0),
                _ => 0.0,
            };
            base + rng.random_range(-spread..spread)
        });
        let eta = &x * &beta;
        if eta.iter().any(|&e| !link.in_domain(e)) {
            continue;
        }
        let mus: Vec<f64> = eta.iter().map(|&e| link.mu(e)).collect();
        let lo_mu = mus.iter().copied().fold(f64::INFINITY, f64::min);
        let hi_mu = mus.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = (hi_mu - lo_mu).max(0.1);
        let lo = lo_mu - pad * rng.random_range(0.2..1.5);
        let hi = hi_mu + pad * rng.random_range(0.2..1.5);
        let m = rng.random_range(2..13usize);
        let mut atoms: Vec<f64> = if m == 2 {
            vec![lo, hi]
        } else {
            let mut a: Vec<f64> = (0..m - 2).map(|_| rng.random_range(lo..hi)).collect();
            a.push(lo);
            a.push(hi);
            a
        };
        atoms.sort_by(|a, b| a.partial_cmp(b).expect("finite atoms"));
        atoms.dedup();
        let masses: Vec<f64> = atoms.iter().map(|_| rng.random_range(0.05..1.0)).collect();
        let Ok(f) = ReferenceDistribution::from_masses(atoms.clone(), &masses) else {
            continue;
        };
        let y: Vec<f64> = (0..n).map(|_| atoms[rng.random_range(0..atoms.len())]).collect();
        let Ok(spec) = GlmSpec::new(x, y, link) else {
            continue;
        };
        if let Ok(state) = ModelState::new(&spec, beta, f) {
            return Ok((spec, state));
        }
    }
    Err(Error::InvalidSpec(format!("could not draw a valid {link} configuration")))
}

/// Score paired with the beta score in [`fisher_cross_block`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NuisanceScore {
    /// Derivative of the log-density in the family's nuisance parameter.
    Family,
    /// Derivative in a common additive shift of every mean, which is not
    /// orthogonal to beta (negative control).
    MeanShift,
}

#[derive(Debug, Clone)]
pub struct CrossBlockSetup {
    pub family: ParametricFamily,
    pub link: LinkFunction,
    pub x: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub nuisance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossBlock {
    /// Monte Carlo estimate of `E[S_beta S_phi]`.
    pub estimate: DVector<f64>,
    pub std_error: DVector<f64>,
    pub n_mc: usize,
}

impl CrossBlock {
    /// Largest `|estimate / std_error|`.
    pub fn max_z(&self) -> f64 {
        self.estimate
            .iter()
            .zip(self.std_error.iter())
            .map(|(e, s)| if *s > 0.0 { (e / s).abs() } else if *e == 0.0 { 0.0 } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }

    pub fn within(&self, z: f64) -> bool {
        self.max_z() <= z
    }
}

const MC_CHUNK: usize = 4096;

/// Monte Carlo cross-information between beta and a nuisance score at the
/// true parameters, with per-entry standard errors.
///
/// Each draw simulates a full response vector for the design. Draws are
/// split into fixed chunks seeded by `(seed, chunk index)`, so the result
/// does not depend on `exec`.
pub fn fisher_cross_block(
    setup: &CrossBlockSetup,
    score: NuisanceScore,
    n_mc: usize,
    seed: u64,
    exec: Execution,
) -> Result<CrossBlock> {
    let CrossBlockSetup {
        family,
        link,
        x,
        beta,
        nuisance,
    } = setup;
    let (family, link, nuisance) = (*family, *link, *nuisance);
    if !matches!(family, ParametricFamily::Normal { .. } | ParametricFamily::Gamma { .. }) {
        return Err(Error::InvalidSpec(format!("{} has no free nuisance parameter", family.name())));
    }
    if !(nuisance.is_finite() && nuisance > 0.0) {
        return Err(Error::InvalidSpec(format!("nuisance must be positive, got {nuisance}")));
    }
    if n_mc < 2 {
        return Err(Error::InvalidSpec("need at least two Monte Carlo draws".into()));
    }
    if x.ncols() != beta.len() {
        return Err(Error::InvalidSpec("design and beta dimensions differ".into()));
    }
    let eta = x * beta;
    if let Some(e) = eta.iter().find(|&&e| !link.in_domain(e)) {
        return Err(Error::InvalidSpec(format!("linear predictor {e} outside the {link} domain")));
    }
    let mus: Vec<f64> = eta.iter().map(|&e| link.mu(e)).collect();
    if matches!(family, ParametricFamily::Gamma { .. }) && mus.iter().any(|&m| m <= 0.0) {
        return Err(Error::InvalidSpec("gamma means must be positive".into()));
    }
    // per-observation beta-score weights mu' / Var
    let weights: Vec<f64> = eta
        .iter()
        .zip(&mus)
        .map(|(&e, &m)| link.mu_prime(e) / family.variance(m, Some(nuisance)))
        .collect();
    let q = beta.len();
    let n = x.nrows();

    let n_chunks = n_mc.div_ceil(MC_CHUNK);
    let partial: Vec<(DVector<f64>, DVector<f64>)> = par::map_range(n_chunks, exec, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let draws = MC_CHUNK.min(n_mc - c * MC_CHUNK);
        let mut sum = DVector::zeros(q);
        let mut sum_sq = DVector::zeros(q);
        let mut s_beta = DVector::zeros(q);
        for _ in 0..draws {
            s_beta.fill(0.0);
            let mut s_phi = 0.0;
            for i in 0..n {
                let y = draw(family, mus[i], nuisance, &mut rng);
                let r = y - mus[i];
                for j in 0..q {
                    s_beta[j] += x[(i, j)] * weights[i] * r;
                }
                s_phi += match score {
                    NuisanceScore::Family => family
                        .nuisance_score(y, mus[i], nuisance)
                        .expect("family has a nuisance score"),
                    NuisanceScore::MeanShift => r / family.variance(mus[i], Some(nuisance)),
                };
            }
            for j in 0..q {
                let v = s_beta[j] * s_phi;
                sum[j] += v;
                sum_sq[j] += v * v;
            }
        }
        (sum, sum_sq)
    });
    let mut sum = DVector::zeros(q);
    let mut sum_sq = DVector::zeros(q);
    for (s, s2) in &partial {
        sum += s;
        sum_sq += s2;
    }
    let k = n_mc as f64;
    let estimate = &sum / k;
    let std_error = DVector::from_fn(q, |j, _| {
        let var = (sum_sq[j] / k - estimate[j] * estimate[j]).max(0.0) * k / (k - 1.0);
        (var / k).sqrt()
    });
    Ok(CrossBlock {
        estimate,
        std_error,
        n_mc,
    })
}

fn draw<R: Rng + ?Sized>(family: ParametricFamily, mu: f64, nuisance: f64, rng: &mut R) -> f64 {
    match family {
        ParametricFamily::Normal { .. } => Normal::new(mu, nuisance.sqrt()).expect("valid normal").sample(rng),
        ParametricFamily::Gamma { .. } => Gamma::new(nuisance, mu / nuisance).expect("valid gamma").sample(rng),
        _ => unreachable!("checked by caller"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn two_atom_state() -> (GlmSpec, ModelState) {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let spec = GlmSpec::new(x, vec![0.0, 1.0], LinkFunction::Identity).unwrap();
        let f = ReferenceDistribution::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let state = ModelState::new(&spec, DVector::from_vec(vec![0.3]), f).unwrap();
        (spec, state)
    }

    #[test]
    fn score_projects_to_zero() {
        let (spec, state) = two_atom_state();
        let s = ResidualFunctional::score_contribution(&state, spec.link());
        let ps = project_nuisance(&s, &state, spec.link(), &[1.0]).unwrap();
        for y in [0.0, 1.0] {
            assert!(ps.eval(&[1.0], y)[0].abs() <= 1e-12);
        }
    }

    #[test]
    fn functions_of_x_alone_are_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (spec, state) = random_config(&mut rng, LinkFunction::Log).unwrap();
        let s = ResidualFunctional::new("x only", |x: &[f64], _| x.iter().map(|v| 2.0 * v + 1.0).collect());
        let x = row_of(&spec, 0);
        let ps = project_nuisance(&s, &state, spec.link(), &x).unwrap();
        for &y in state.f.atoms() {
            for (a, b) in ps.eval(&x, y).iter().zip(s.eval(&x, y)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn identity_in_y_projects_to_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for link in LinkFunction::ALL {
            let (spec, state) = random_config(&mut rng, link).unwrap();
            let x = row_of(&spec, 0);
            let s = ResidualFunctional::new("y", |_: &[f64], y| vec![y]);
            let ps = project_nuisance(&s, &state, link, &x).unwrap();
            // oracle: the tilted mean summed directly over the atoms
            let t = &state.tilts[0];
            let mean: f64 = state.f.atoms().iter().zip(&t.tilted_weights).map(|(a, p)| a * p).sum();
            for &y in state.f.atoms() {
                assert_relative_eq!(ps.eval(&x, y)[0], mean, epsilon = 1e-10, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn corrupted_variance_breaks_nullity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (spec, state) = random_config(&mut rng, LinkFunction::Identity).unwrap();
        let good = check_projection_nullity(&state, &spec, 1e-10);
        assert!(good.passed, "{good:?}");
        let bad = check_projection_nullity_scaled(&state, &spec, 1e-10, 1.1);
        assert!(!bad.passed && bad.max_abs > 1e-4, "{bad:?}");
    }

    #[test]
    fn nullity_over_random_configurations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst = 0.0f64;
        for k in 0..1000 {
            let link = LinkFunction::ALL[k % LinkFunction::ALL.len()];
            let (spec, state) = random_config(&mut rng, link).unwrap();
            let r = check_projection_nullity(&state, &spec, 1e-10);
            worst = worst.max(r.max_abs);
            assert!(r.passed, "{link}: {r:?}");
        }
        assert!(worst < 1e-10);
    }

    fn random_functional(seed: u64) -> ResidualFunctional {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        ResidualFunctional::new("random smooth", move |x: &[f64], y: f64| {
            x.iter()
                .map(|xj| c[0] * (c[1] * y).sin() + c[2] * y * y * xj + c[3] * xj)
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn projection_is_idempotent(seed in any::<u64>(), link_ix in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let link = LinkFunction::ALL[link_ix];
            let (spec, state) = random_config(&mut rng, link).unwrap();
            let x = row_of(&spec, 0);
            let s = random_functional(seed ^ 0x5eed);
            let p1 = project_nuisance(&s, &state, link, &x).unwrap();
            let p2 = project_nuisance(&p1, &state, link, &x).unwrap();
            for &y in state.f.atoms() {
                let scale = s.eval(&x, y).iter().fold(1.0f64, |m, v| m.max(v.abs()));
                for (a, b) in p1.eval(&x, y).iter().zip(p2.eval(&x, y)) {
                    prop_assert!((a - b).abs() <= 1e-12 * scale, "{a} vs {b}");
                }
            }
        }

        #[test]
        fn projection_satisfies_moment_condition(seed in any::<u64>(), link_ix in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let link = LinkFunction::ALL[link_ix];
            let (spec, state) = random_config(&mut rng, link).unwrap();
            let x = row_of(&spec, spec.n() - 1);
            let s = random_functional(seed.wrapping_add(1));
            let p = project_nuisance(&s, &state, link, &x).unwrap();
            let raw = residual_moment(&s, &state, link, &x).unwrap();
            let scale = raw.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for v in residual_moment(&p, &state, link, &x).unwrap() {
                prop_assert!(v.abs() <= 1e-12 * scale, "moment {v}");
            }
        }
    }

    fn cross_setup(family: ParametricFamily, link: LinkFunction, nuisance: f64) -> CrossBlockSetup {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 8;
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        CrossBlockSetup {
            family,
            link,
            x,
            beta: DVector::from_vec(vec![0.5, 0.3]),
            nuisance,
        }
    }

    #[test]
    fn cross_block_is_thread_independent() {
        let setup = cross_setup(ParametricFamily::Gamma { shape: None }, LinkFunction::Log, 2.0);
        let a = fisher_cross_block(&setup, NuisanceScore::Family, 10_000, 7, Execution::Sequential).unwrap();
        let b = fisher_cross_block(&setup, NuisanceScore::Family, 10_000, 7, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_shift_control_is_detected() {
        let setup = cross_setup(ParametricFamily::Normal { sigma2: None }, LinkFunction::Identity, 1.0);
        let ctrl = fisher_cross_block(&setup, NuisanceScore::MeanShift, 20_000, 1, Execution::Sequential).unwrap();
        assert!(ctrl.max_z() > 10.0, "{ctrl:?}");
        // analytic value sum_i x_i mu_i' / V_i, here the column sums of X
        let expect = setup.x.row_sum().transpose();
        for j in 0..2 {
            assert!((ctrl.estimate[j] - expect[j]).abs() <= 4.0 * ctrl.std_error[j]);
        }
    }

    #[test]
    fn rejects_families_without_nuisance() {
        let setup = cross_setup(ParametricFamily::Poisson, LinkFunction::Log, 1.0);
        assert!(fisher_cross_block(&setup, NuisanceScore::Family, 100, 1, Execution::Sequential).is_err());
    }
}
