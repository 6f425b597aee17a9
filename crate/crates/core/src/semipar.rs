//! Joint maximum likelihood over `(beta, F)` with `F` supported on the
//! distinct observed responses.
//!
//! The fit alternates two blocks, each step-halved against the
//! log-likelihood so the trace never decreases:
//!
//! * F-step: damped Newton ascent on the log-masses of `F` at fixed `beta`,
//!   run to convergence, which gives the profile `max_F l(beta, F)`;
//! * beta-step: Newton on that profile. Its gradient is [`score_beta`] at the
//!   maximizing `F`; its Hessian is a central difference of that gradient.
//!   When the Hessian is not negative definite the direction falls back to
//!   Fisher scoring with [`fisher_beta`].
//!
//! The likelihood is invariant under tilting `F` itself, so `(beta, F)` is
//! only identified up to that tilt. The reported `F` is tilted so that its
//! mean equals the fitted mean of the observation holding the median fitted
//! mean, i.e. the tilt at that observation is zero.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{fisher_beta, loglik_indexed, response_atoms, score_beta, GlmSpec, LinkFunction, ModelState};
use crate::parametric::{fit_quasi, inverse_spd, solve_spd, FitOptions, VarianceFunction};
use crate::tilt::{distinct_counts, ReferenceDistribution};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemiparOptions {
    pub max_outer: usize,
    /// Outer stopping threshold on the log-likelihood gain.
    pub loglik_tol: f64,
    /// Outer stopping threshold on the Euclidean norm of the beta score.
    pub score_tol: f64,
    pub max_halvings: usize,
    /// Newton iterations per F-step.
    pub max_inner: usize,
    /// F-step stops once the Newton decrement falls below this.
    pub inner_tol: f64,
    /// Consecutive outer iterations gaining less than `loglik_tol` after
    /// which a fit whose score is still above `score_tol` is stopped and
    /// flagged as stalled.
    pub stall_iters: usize,
}

impl Default for SemiparOptions {
    fn default() -> Self {
        Self {
            max_outer: 500,
            loglik_tol: 1e-9,
            score_tol: 1e-6,
            max_halvings: 30,
            max_inner: 50,
            inner_tol: 1e-12,
            stall_iters: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SemiparFitResult {
    pub beta: DVector<f64>,
    pub f_hat: ReferenceDistribution,
    /// Log-likelihood at the start and after every outer iteration.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    /// Inverse of [`fisher_beta`] at the estimate.
    pub beta_cov: DMatrix<f64>,
    pub n_outer: usize,
    pub score_norm: f64,
    /// The log-likelihood stopped increasing while the score norm stayed
    /// above `score_tol`. This happens when the supremum is not attained:
    /// a fitted mean runs into the edge of the response hull, or `F`
    /// degenerates so that one tilt diverges. `beta` is then a point whose
    /// log-likelihood is within `loglik_tol` per iteration of the supremum.
    pub stalled: bool,
    /// Observation whose fitted mean anchors `f_hat`.
    pub anchor_index: usize,
}

impl SemiparFitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }

    pub fn std_errors(&self) -> DVector<f64> {
        self.beta_cov.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Responses mapped onto the support of `F`.
struct Problem<'a> {
    spec: &'a GlmSpec,
    idx: Vec<usize>,
    counts: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(spec: &'a GlmSpec, f: &ReferenceDistribution) -> Result<Self> {
        let idx = response_atoms(f, spec.y())?;
        let mut counts = vec![0.0; f.len()];
        for &j in &idx {
            counts[j] += 1.0;
        }
        Ok(Self { spec, idx, counts })
    }

    fn loglik(&self, state: &ModelState) -> f64 {
        loglik_indexed(state, self.spec, &self.idx)
    }

    /// Gradient and Hessian of the log-likelihood in the log-masses of `F`.
    fn f_derivatives(&self, state: &ModelState, with_hessian: bool) -> (DVector<f64>, Option<DMatrix<f64>>) {
        f_derivatives(state, self.spec, &self.counts, with_hessian)
    }

    /// Fisher scoring step at fixed `F`.
    fn scoring_step(&self, state: ModelState, ll: f64, opts: &SemiparOptions) -> (ModelState, f64) {
        let score = score_beta(&state, self.spec);
        let Some(step) = solve_spd(&fisher_beta(&state, self.spec), &score) else {
            return (state, ll);
        };
        let mut t = 1.0;
        for _ in 0..=opts.max_halvings {
            let beta = &state.beta + &step * t;
            if let Ok(cand) = ModelState::new_warm(self.spec, beta, state.f.clone(), &state) {
                let cand_ll = self.loglik(&cand);
                if cand_ll >= ll {
                    return (cand, cand_ll);
                }
            }
            t *= 0.5;
        }
        (state, ll)
    }

    /// Profile Newton step; `state` must already be F-maximized.
    fn beta_step(&self, state: ModelState, ll: f64, opts: &SemiparOptions) -> (ModelState, f64) {
        let score = score_beta(&state, self.spec);
        let q = score.len();
        let mut hess = DMatrix::zeros(q, q);
        let mut have_hess = true;
        for k in 0..q {
            let h = 1e-5 * state.beta[k].abs().max(1.0);
            let mut col = Vec::with_capacity(2);
            for sign in [1.0, -1.0] {
                let mut beta = state.beta.clone();
                beta[k] += sign * h;
                match ModelState::new_warm(self.spec, beta, state.f.clone(), &state) {
                    Ok(s) => {
                        let l = self.loglik(&s);
                        let (s, _) = self.f_step(s, l, opts, opts.max_inner);
                        col.push(score_beta(&s, self.spec));
                    }
                    Err(_) => have_hess = false,
                }
            }
            if col.len() == 2 {
                hess.set_column(k, &((&col[0] - &col[1]) / (2.0 * h)));
            }
        }
        let neg_h = -(&hess + hess.transpose()) * 0.5;
        let newton = if have_hess { neg_h.cholesky().map(|c| c.solve(&score)) } else { None };
        let directions = newton
            .into_iter()
            .chain(solve_spd(&fisher_beta(&state, self.spec), &score));
        for step in directions {
            let mut t = 1.0;
            for _ in 0..=opts.max_halvings {
                let beta = &state.beta + &step * t;
                if let Ok(cand) = ModelState::new_warm(self.spec, beta, state.f.clone(), &state) {
                    let cand_ll = self.loglik(&cand);
                    let (cand, cand_ll) = self.f_step(cand, cand_ll, opts, opts.max_inner);
                    if cand_ll >= ll {
                        return (cand, cand_ll);
                    }
                }
                t *= 0.5;
            }
        }
        (state, ll)
    }

    /// Damped Newton on the log-masses; returns the final state and loglik.
    fn f_step(&self, mut state: ModelState, mut ll: f64, opts: &SemiparOptions, max_inner: usize) -> (ModelState, f64) {
        let m = state.f.len();
        for _ in 0..max_inner {
            let (g, h) = self.f_derivatives(&state, true);
            let neg_h = -h.expect("hessian requested");
            let scale = neg_h.diagonal().amax().max(1e-300);
            let mut lambda = 1e-10 * scale;
            let step = loop {
                let mut a = neg_h.clone();
                for j in 0..m {
                    a[(j, j)] += lambda;
                }
                if let Some(ch) = a.cholesky() {
                    break Some(ch.solve(&g));
                }
                lambda *= 10.0;
                if lambda > 1e6 * scale {
                    break None;
                }
            };
            let Some(step) = step else { break };
            let decrement = g.dot(&step);
            if !(decrement > opts.inner_tol) {
                break;
            }
            let alpha = DVector::from_column_slice(state.f.log_weights());
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=opts.max_halvings {
                let cand_alpha = &alpha + &step * t;
                let cand = ReferenceDistribution::from_log_masses(state.f.atoms().to_vec(), cand_alpha.as_slice())
                    .and_then(|f| ModelState::new_warm(self.spec, state.beta.clone(), f, &state));
                if let Ok(cand) = cand {
                    let cand_ll = self.loglik(&cand);
                    if cand_ll >= ll {
                        accepted = Some((cand, cand_ll));
                        break;
                    }
                }
                t *= 0.5;
            }
            match accepted {
                Some((s, l)) => {
                    let gain = l - ll;
                    state = s;
                    ll = l;
                    if gain <= opts.inner_tol && t == 1.0 && decrement <= 1e3 * opts.inner_tol {
                        break;
                    }
                }
                None => break,
            }
        }
        (state, ll)
    }
}

/// Gradient (and optionally Hessian) of the log-likelihood with respect to
/// unnormalized log-masses `alpha` of `F`, at fixed `beta`. `counts[j]` is
/// the number of responses equal to atom `j`.
///
/// With `p_ij` the tilted masses, `d_ij = z_j - mu_i`, `r_i = y_i - mu_i`:
/// `g_j = c_j - sum_i p_ij (1 + d_ij r_i / V_i)`.
/// Both are invariant under `alpha -> alpha + a + b z`, so `g` is orthogonal
/// to the constant and atom vectors and the Hessian is singular along them.
pub fn f_derivatives(
    state: &ModelState,
    spec: &GlmSpec,
    counts: &[f64],
    with_hessian: bool,
) -> (DVector<f64>, Option<DMatrix<f64>>) {
    let z = state.f.atoms();
    let n = state.tilts.len();
    let m = z.len();
    let y = spec.y();
    let mut g = DVector::from_column_slice(counts);

    let mut gmat = DMatrix::zeros(n, m);
    let mut pmat = DMatrix::zeros(n, m);
    let mut ud = DMatrix::zeros(n, m);
    let mut pd = DMatrix::zeros(n, m);
    let mut e = DMatrix::zeros(n, m);
    let mut hh = DMatrix::zeros(n, m);
    for (i, t) in state.tilts.iter().enumerate() {
        let mu = t.mean;
        let v = t.variance;
        let r = y[i] - mu;
        let third: f64 = if with_hessian {
            z.iter()
                .zip(&t.tilted_weights)
                .map(|(&zj, p)| p * (zj - mu).powi(3))
                .sum()
        } else {
            0.0
        };
        for j in 0..m {
            let p = t.tilted_weights[j];
            let d = z[j] - mu;
            let gij = p * (1.0 + d * r / v);
            g[j] -= gij;
            if with_hessian {
                gmat[(i, j)] = gij;
                pmat[(i, j)] = p;
                ud[(i, j)] = gij * d / v;
                pd[(i, j)] = p * d;
                e[(i, j)] = p * d * r / (v * v);
                hh[(i, j)] = p * (d * d - v - d * third / v);
            }
        }
    }
    if !with_hessian {
        return (g, None);
    }
    let mut h = gmat.tr_mul(&pmat) + ud.tr_mul(&pd) + e.tr_mul(&hh);
    for j in 0..m {
        h[(j, j)] -= gmat.column(j).sum();
    }
    let h = (&h + h.transpose()) * 0.5;
    (g, Some(h))
}

/// Starting value with every fitted mean strictly inside `(lo, hi)`.
fn initial_beta(spec: &GlmSpec, lo: f64, hi: f64) -> Result<DVector<f64>> {
    let link = spec.link();
    let feasible = |beta: &DVector<f64>| {
        spec.linear_predictor(beta).iter().all(|&eta| {
            let mu = link.mu(eta);
            link.in_domain(eta) && mu > lo && mu < hi
        })
    };
    let v = match link {
        LinkFunction::Identity => VarianceFunction::constant(),
        LinkFunction::Log => VarianceFunction::mu(),
        LinkFunction::Logit => VarianceFunction::custom("binomial", |m| m * (1.0 - m)),
        LinkFunction::Inverse => VarianceFunction::mu_squared(),
    };
    let quasi = fit_quasi(spec, &v, FitOptions::default()).ok().map(|f| f.beta);
    if let Some(b) = &quasi {
        if feasible(b) {
            return Ok(b.clone());
        }
    }
    let ybar = spec.y().iter().sum::<f64>() / spec.n() as f64;
    let center = if ybar > lo && ybar < hi { ybar } else { 0.5 * (lo + hi) };
    let Some(j) = spec.intercept_column().filter(|_| link.in_range(center)) else {
        return Err(Error::HullViolation);
    };
    let mut base = DVector::zeros(spec.q());
    base[j] = link.eta(center);
    if !feasible(&base) {
        return Err(Error::HullViolation);
    }
    if let Some(b) = quasi {
        let mut t = 0.5;
        for _ in 0..30 {
            let cand = &base + (&b - &base) * t;
            if feasible(&cand) {
                return Ok(cand);
            }
            t *= 0.5;
        }
    }
    Ok(base)
}

fn check_inputs(spec: &GlmSpec) -> Result<()> {
    let (atoms, _) = distinct_counts(spec.y()).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    if atoms.len() < 2 {
        return Err(Error::DegenerateResponse);
    }
    if spec.n() < spec.q() + 2 {
        return Err(Error::InvalidSpec(format!(
            "need n >= q + 2, got n = {}, q = {}",
            spec.n(),
            spec.q()
        )));
    }
    Ok(())
}

/// Index of the observation holding the (lower) median fitted mean.
fn median_index(state: &ModelState) -> usize {
    let mut order: Vec<usize> = (0..state.tilts.len()).collect();
    order.sort_by(|&a, &b| {
        state.tilts[a]
            .mean
            .partial_cmp(&state.tilts[b].mean)
            .unwrap()
            .then(a.cmp(&b))
    });
    order[(order.len() - 1) / 2]
}

/// Re-expresses the state with `F` tilted to the anchor observation's mean.
fn anchor(spec: &GlmSpec, state: ModelState) -> (ModelState, usize) {
    let k = median_index(&state);
    let theta_ref = state.tilts[k].theta;
    let f = state.f.tilted(theta_ref);
    let start: Vec<f64> = state.tilts.iter().map(|t| t.theta - theta_ref).collect();
    let mut shifted = state.clone();
    for (t, s) in shifted.tilts.iter_mut().zip(start) {
        t.theta = s;
    }
    match ModelState::new_warm(spec, state.beta.clone(), f, &shifted) {
        Ok(s) => (s, k),
        Err(_) => (state, k),
    }
}

/// Joint maximum semiparametric likelihood over `(beta, F)`.
pub fn fit_semiparametric(spec: &GlmSpec, opts: SemiparOptions) -> Result<SemiparFitResult> {
    check_inputs(spec)?;
    let f0 = ReferenceDistribution::empirical(spec.y())?;
    let (lo, hi) = f0.hull();
    let beta0 = initial_beta(spec, lo, hi)?;
    let problem = Problem::new(spec, &f0)?;
    let state = ModelState::new(spec, beta0, f0).map_err(|_| Error::HullViolation)?;
    let (state, _) = anchor(spec, state);
    let ll = problem.loglik(&state);
    let mut trace = vec![ll];
    let (mut state, mut ll) = problem.f_step(state, ll, &opts, opts.max_inner);
    trace.push(ll);
    let mut converged = false;
    let mut score_norm = score_beta(&state, spec).norm();
    let mut n_outer = 0;
    let mut flat = 0;
    let mut stalled = false;

    while n_outer < opts.max_outer {
        n_outer += 1;
        let prev = ll;
        let (s, l) = problem.beta_step(state, ll, &opts);
        state = s;
        ll = l;
        trace.push(ll);
        score_norm = score_beta(&state, spec).norm();
        if ll - prev >= opts.loglik_tol {
            flat = 0;
            continue;
        }
        if score_norm < opts.score_tol {
            converged = true;
            break;
        }
        flat += 1;
        if flat >= opts.stall_iters {
            converged = true;
            stalled = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations: n_outer,
            reason: format!("beta score norm {score_norm:e} after outer cap"),
        });
    }
    let (state, anchor_index) = anchor(spec, state);
    let info = fisher_beta(&state, spec);
    let beta_cov = inverse_spd(&info).ok_or_else(|| Error::NonConvergence {
        iterations: n_outer,
        reason: "singular information at the estimate".into(),
    })?;
    Ok(SemiparFitResult {
        beta: state.beta,
        f_hat: state.f,
        loglik_trace: trace,
        converged,
        beta_cov,
        n_outer,
        score_norm,
        stalled,
        anchor_index,
    })
}

/// Maximizes the log-likelihood over `F` at fixed `beta`; returns the
/// profile log-likelihood and the maximizing (anchored) `F`.
pub fn profile_beta(
    spec: &GlmSpec,
    beta: &DVector<f64>,
    opts: SemiparOptions,
) -> Result<(f64, ReferenceDistribution)> {
    check_inputs(spec)?;
    let f0 = ReferenceDistribution::empirical(spec.y())?;
    let problem = Problem::new(spec, &f0)?;
    let state = ModelState::new(spec, beta.clone(), f0).map_err(|e| match e {
        Error::ConstraintViolation { .. } => Error::HullViolation,
        other => other,
    })?;
    let ll = problem.loglik(&state);
    let (state, ll) = problem.f_step(state, ll, &opts, opts.max_inner.max(500));
    let (state, _) = anchor(spec, state);
    Ok((ll, state.f))
}

/// Profile log-likelihood `max_F l(beta, F)`.
pub fn profile_loglik_beta(spec: &GlmSpec, beta: &DVector<f64>, opts: SemiparOptions) -> Result<f64> {
    profile_beta(spec, beta, opts).map(|(ll, _)| ll)
}

/// Fit with beta-steps only, holding `F` fixed.
#[derive(Debug, Clone)]
pub struct FixedReferenceFit {
    pub beta: DVector<f64>,
    pub loglik: f64,
    pub score_norm: f64,
    pub iterations: usize,
}

/// Maximizes the log-likelihood over `beta` with `F` held fixed. Every
/// response must be an atom of `f`.
pub fn fit_beta_given_reference(
    spec: &GlmSpec,
    f: &ReferenceDistribution,
    opts: SemiparOptions,
) -> Result<FixedReferenceFit> {
    let problem = Problem::new(spec, f)?;
    let (lo, hi) = f.hull();
    let beta0 = initial_beta(spec, lo, hi)?;
    let mut state = ModelState::new(spec, beta0, f.clone()).map_err(|_| Error::HullViolation)?;
    let mut ll = problem.loglik(&state);
    for it in 0..opts.max_outer {
        let score_norm = score_beta(&state, spec).norm();
        if score_norm < opts.score_tol {
            return Ok(FixedReferenceFit {
                beta: state.beta,
                loglik: ll,
                score_norm,
                iterations: it,
            });
        }
        let prev = ll;
        let (s, l) = problem.scoring_step(state, ll, &opts);
        state = s;
        ll = l;
        if l == prev && score_norm >= opts.score_tol {
            return Err(Error::NonConvergence {
                iterations: it,
                reason: format!("beta-step stalled at score norm {score_norm:e}"),
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_outer,
        reason: "iteration cap reached".into(),
    })
}
