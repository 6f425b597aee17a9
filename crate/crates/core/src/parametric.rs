//! Oracle maximum likelihood for classical families and quasi-likelihood
//! fits with a user-specified variance function.
//!
//! Both run iteratively reweighted least squares (Fisher scoring) on the
//! estimating equations `sum_i X_i mu'_i (y_i - mu_i) / v(mu_i) = 0`, with
//! step-halving whenever the (quasi-)deviance increases.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::model::{weighted_gram, GlmSpec};

type UnitFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type DevianceFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Mean-variance relationship `Var(Y | X) = v(mu)` up to dispersion.
#[derive(Clone)]
pub struct VarianceFunction {
    name: String,
    v: UnitFn,
    /// Closed-form unit deviance `2 int_mu^y (y - t) / v(t) dt`, when known.
    unit_deviance: Option<DevianceFn>,
}

impl fmt::Debug for VarianceFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VarianceFunction")
            .field("name", &self.name)
            .finish()
    }
}

impl VarianceFunction {
    /// Arbitrary positive variance function; the quasi-deviance is
    /// integrated numerically.
    pub fn custom(name: impl Into<String>, v: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            v: Arc::new(v),
            unit_deviance: None,
        }
    }

    /// `v(mu) = 1`.
    pub fn constant() -> Self {
        Self {
            name: "constant".into(),
            v: Arc::new(|_| 1.0),
            unit_deviance: Some(Arc::new(|y, mu| (y - mu) * (y - mu))),
        }
    }

    /// `v(mu) = mu`.
    pub fn mu() -> Self {
        Self {
            name: "mu".into(),
            v: Arc::new(|mu| mu),
            unit_deviance: Some(Arc::new(|y, mu| {
                let ylog = if y > 0.0 { y * (y / mu).ln() } else { 0.0 };
                2.0 * (ylog - (y - mu))
            })),
        }
    }

    /// `v(mu) = mu^2`.
    pub fn mu_squared() -> Self {
        Self {
            name: "mu^2".into(),
            v: Arc::new(|mu| mu * mu),
            unit_deviance: Some(Arc::new(|y, mu| 2.0 * (-(y / mu).ln() + (y - mu) / mu))),
        }
    }

    /// `v(mu) = mu^p`.
    pub fn power(p: f64) -> Self {
        Self::custom(format!("mu^{p}"), move |mu| mu.powf(p))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, mu: f64) -> f64 {
        (self.v)(mu)
    }

    pub fn unit_deviance(&self, y: f64, mu: f64) -> f64 {
        match &self.unit_deviance {
            Some(d) => d(y, mu),
            None => quasi_unit_deviance(&*self.v, y, mu),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "constant" | "1" => Some(Self::constant()),
            "mu" => Some(Self::mu()),
            "mu2" | "mu^2" => Some(Self::mu_squared()),
            _ => None,
        }
    }
}

/// `2 (y - mu)^2 int_0^1 (1 - s) / v(mu + (y - mu) s) ds` by 20-point
/// Gauss-Legendre.
fn quasi_unit_deviance(v: &(dyn Fn(f64) -> f64 + Send + Sync), y: f64, mu: f64) -> f64 {
    let d = y - mu;
    if d == 0.0 {
        return 0.0;
    }
    let integral: f64 = GL20_NODES
        .iter()
        .zip(GL20_WEIGHTS)
        .map(|(&x, w)| {
            let s = 0.5 * (x + 1.0);
            0.5 * w * (1.0 - s) / v(mu + d * s)
        })
        .sum();
    2.0 * d * d * integral
}

const GL20_NODES: [f64; 20] = [
    -0.993_128_599_185_094_9,
    -0.963_971_927_277_913_8,
    -0.912_234_428_251_326,
    -0.839_116_971_822_218_8,
    -0.746_331_906_460_150_8,
    -0.636_053_680_726_515,
    -0.510_867_001_950_827_1,
    -0.373_706_088_715_419_6,
    -0.227_785_851_141_645_1,
    -0.076_526_521_133_497_33,
    0.076_526_521_133_497_33,
    0.227_785_851_141_645_1,
    0.373_706_088_715_419_6,
    0.510_867_001_950_827_1,
    0.636_053_680_726_515,
    0.746_331_906_460_150_8,
    0.839_116_971_822_218_8,
    0.912_234_428_251_326,
    0.963_971_927_277_913_8,
    0.993_128_599_185_094_9,
];

const GL20_WEIGHTS: [f64; 20] = [
    0.017_614_007_139_152_12,
    0.040_601_429_800_386_94,
    0.062_672_048_334_109_06,
    0.083_276_741_576_704_75,
    0.101_930_119_817_240_4,
    0.118_194_531_961_518_4,
    0.131_688_638_449_176_6,
    0.142_096_109_318_382_1,
    0.149_172_986_472_603_7,
    0.152_753_387_130_725_9,
    0.152_753_387_130_725_9,
    0.149_172_986_472_603_7,
    0.142_096_109_318_382_1,
    0.131_688_638_449_176_6,
    0.118_194_531_961_518_4,
    0.101_930_119_817_240_4,
    0.083_276_741_576_704_75,
    0.062_672_048_334_109_06,
    0.040_601_429_800_386_94,
    0.017_614_007_139_152_12,
];

/// Known parametric error families. `None` nuisances are estimated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParametricFamily {
    Normal { sigma2: Option<f64> },
    Poisson,
    Gamma { shape: Option<f64> },
    /// Gamma with shape fixed at one.
    Exponential,
}

impl ParametricFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ParametricFamily::Normal { .. } => "normal",
            ParametricFamily::Poisson => "poisson",
            ParametricFamily::Gamma { .. } => "gamma",
            ParametricFamily::Exponential => "exponential",
        }
    }

    /// Variance function with unit dispersion.
    pub fn unit_variance(&self) -> VarianceFunction {
        match self {
            ParametricFamily::Normal { .. } => VarianceFunction::constant(),
            ParametricFamily::Poisson => VarianceFunction::mu(),
            ParametricFamily::Gamma { .. } | ParametricFamily::Exponential => {
                VarianceFunction::mu_squared()
            }
        }
    }

    /// `Var(Y)` at mean `mu` given the nuisance value.
    pub fn variance(&self, mu: f64, nuisance: Option<f64>) -> f64 {
        match self {
            ParametricFamily::Normal { sigma2 } => nuisance.or(*sigma2).unwrap_or(1.0),
            ParametricFamily::Poisson => mu,
            ParametricFamily::Gamma { shape } => mu * mu / nuisance.or(*shape).unwrap_or(1.0),
            ParametricFamily::Exponential => mu * mu,
        }
    }

    pub fn nuisance_name(&self) -> Option<&'static str> {
        match self {
            ParametricFamily::Normal { .. } => Some("sigma2"),
            ParametricFamily::Gamma { .. } | ParametricFamily::Exponential => Some("shape"),
            ParametricFamily::Poisson => None,
        }
    }

    fn fixed_nuisance(&self) -> Option<f64> {
        match self {
            ParametricFamily::Normal { sigma2 } => *sigma2,
            ParametricFamily::Gamma { shape } => *shape,
            ParametricFamily::Exponential => Some(1.0),
            ParametricFamily::Poisson => None,
        }
    }

    fn check_response(&self, y: &[f64]) -> Result<()> {
        match self {
            ParametricFamily::Normal { .. } => Ok(()),
            ParametricFamily::Poisson => match y.iter().position(|&v| v < 0.0 || v.fract() != 0.0) {
                Some(i) => Err(Error::InvalidResponse(format!(
                    "poisson response y[{i}] = {} is not a non-negative integer",
                    y[i]
                ))),
                None => Ok(()),
            },
            ParametricFamily::Gamma { .. } | ParametricFamily::Exponential => {
                match y.iter().position(|&v| v <= 0.0) {
                    Some(i) => Err(Error::InvalidResponse(format!(
                        "{} response y[{i}] = {} is not positive",
                        self.name(),
                        y[i]
                    ))),
                    None => Ok(()),
                }
            }
        }
    }

    fn valid_mean(&self, mu: f64) -> bool {
        match self {
            ParametricFamily::Normal { .. } => mu.is_finite(),
            _ => mu.is_finite() && mu > 0.0,
        }
    }

    /// Log density (or mass) of one response.
    pub fn log_density(&self, y: f64, mu: f64, nuisance: Option<f64>) -> f64 {
        match self {
            ParametricFamily::Normal { sigma2 } => {
                let s2 = nuisance.or(*sigma2).unwrap_or(1.0);
                -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - (y - mu) * (y - mu) / (2.0 * s2)
            }
            ParametricFamily::Poisson => {
                let ylog = if y > 0.0 { y * mu.ln() } else { 0.0 };
                ylog - mu - ln_gamma(y + 1.0)
            }
            ParametricFamily::Gamma { shape } => {
                gamma_log_density(y, mu, nuisance.or(*shape).unwrap_or(1.0))
            }
            ParametricFamily::Exponential => gamma_log_density(y, mu, 1.0),
        }
    }

    /// Score of one response with respect to the nuisance (`sigma2` or
    /// `shape`).
    pub fn nuisance_score(&self, y: f64, mu: f64, nuisance: f64) -> Option<f64> {
        match self {
            ParametricFamily::Normal { .. } => {
                let s2 = nuisance;
                Some(-0.5 / s2 + (y - mu) * (y - mu) / (2.0 * s2 * s2))
            }
            ParametricFamily::Gamma { .. } | ParametricFamily::Exponential => {
                let k = nuisance;
                Some(k.ln() + 1.0 - mu.ln() + y.ln() - y / mu - digamma(k))
            }
            ParametricFamily::Poisson => None,
        }
    }

    /// Maximum likelihood nuisance at fixed fitted means.
    fn estimate_nuisance(&self, y: &[f64], mu: &[f64]) -> Result<Option<f64>> {
        if let Some(fixed) = self.fixed_nuisance() {
            return Ok(Some(fixed));
        }
        let n = y.len() as f64;
        match self {
            ParametricFamily::Normal { .. } => {
                let rss: f64 = y.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                Ok(Some(rss / n))
            }
            ParametricFamily::Gamma { .. } => gamma_shape_mle(y, mu).map(Some),
            _ => Ok(None),
        }
    }
}

fn gamma_log_density(y: f64, mu: f64, k: f64) -> f64 {
    k * k.ln() - k * mu.ln() + (k - 1.0) * y.ln() - k * y / mu - ln_gamma(k)
}

/// Polygamma of order one: recurrence up to 20, then the asymptotic series.
pub(crate) fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x
        + x2 / 2.0
        + (1.0 / x) * x2 * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

/// Solves `log k - digamma(k) = s` with `s = -(n + sum(log(y/mu) - y/mu)) / n`
/// by Newton in `log k`.
fn gamma_shape_mle(y: &[f64], mu: &[f64]) -> Result<f64> {
    let n = y.len() as f64;
    let d: f64 = y.iter().zip(mu).map(|(&a, &b)| (a / b).ln() - a / b).sum();
    let s = -(n + d) / n;
    if !(s > 0.0) {
        return Err(Error::NonConvergence {
            iterations: 0,
            reason: "gamma shape is unbounded (perfect fit)".into(),
        });
    }
    // Minka's closed-form starting value
    let mut k = (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s);
    for it in 0..100 {
        let h = k.ln() - digamma(k) - s;
        let dh = 1.0 / k - trigamma(k);
        // Newton step in log k
        let step = h / (dh * k);
        let next = (k.ln() - step).exp();
        if (next - k).abs() <= 1e-14 * k {
            return Ok(next);
        }
        k = next;
        if !k.is_finite() {
            return Err(Error::NonConvergence {
                iterations: it,
                reason: "gamma shape diverged".into(),
            });
        }
    }
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Convergence threshold on the Euclidean norm of the estimating equations.
    pub tol: f64,
    pub max_halvings: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceKind {
    InverseInformation,
    Sandwich,
}

/// Result of a parametric or quasi-likelihood fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub method: String,
    pub beta: DVector<f64>,
    /// Estimated or fixed nuisance value, with its name.
    pub nuisance: Option<(&'static str, f64)>,
    pub covariance: DMatrix<f64>,
    pub covariance_kind: CovarianceKind,
    /// Log-likelihood at the estimate; absent for quasi fits.
    pub loglik: Option<f64>,
    pub deviance: f64,
    pub score_norm: f64,
    pub iterations: usize,
    /// Deviance after each accepted iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl FitResult {
    pub fn std_errors(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

struct Irls<'a> {
    spec: &'a GlmSpec,
    v: &'a VarianceFunction,
    valid_mean: &'a dyn Fn(f64) -> bool,
}

struct IrlsOutput {
    beta: DVector<f64>,
    deviance: f64,
    score_norm: f64,
    iterations: usize,
    trace: Vec<f64>,
}

impl Irls<'_> {
    fn means(&self, beta: &DVector<f64>) -> Option<(Vec<f64>, Vec<f64>)> {
        let link = self.spec.link();
        let eta: Vec<f64> = self.spec.linear_predictor(beta).iter().copied().collect();
        let mut mu = Vec::with_capacity(eta.len());
        for &e in &eta {
            let m = link.mu(e);
            if !link.in_domain(e) || !(self.valid_mean)(m) || !(self.v.eval(m) > 0.0) {
                return None;
            }
            mu.push(m);
        }
        Some((eta, mu))
    }

    fn deviance(&self, beta: &DVector<f64>) -> f64 {
        match self.means(beta) {
            Some((_, mu)) => {
                let d: f64 = self
                    .spec
                    .y()
                    .iter()
                    .zip(&mu)
                    .map(|(&y, &m)| self.v.unit_deviance(y, m))
                    .sum();
                if d.is_finite() {
                    d
                } else {
                    f64::INFINITY
                }
            }
            None => f64::INFINITY,
        }
    }

    /// Estimating-equation vector and the Fisher-scoring WLS update.
    fn scoring(&self, beta: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let link = self.spec.link();
        let (eta, mu) = self.means(beta)?;
        let n = eta.len();
        let mut w = DVector::zeros(n);
        let mut u = DVector::zeros(n);
        for i in 0..n {
            let d = link.mu_prime(eta[i]);
            let v = self.v.eval(mu[i]);
            w[i] = d * d / v;
            u[i] = d * (self.spec.y()[i] - mu[i]) / v;
        }
        let score = self.spec.x().tr_mul(&u);
        let info = weighted_gram(self.spec.x(), &w);
        let step = solve_spd(&info, &score)?;
        Some((score, step))
    }

    fn start(&self) -> DVector<f64> {
        let spec = self.spec;
        let link = spec.link();
        let y = spec.y();
        let ybar = y.iter().sum::<f64>() / y.len() as f64;
        let ok = |m: f64| link.in_range(m) && (self.valid_mean)(m) && self.v.eval(m) > 0.0;
        let mu0: Vec<f64> = y
            .iter()
            .map(|&yi| {
                let m = 0.5 * (yi + ybar);
                if ok(m) {
                    m
                } else if ok(ybar) {
                    ybar
                } else {
                    link.mu(0.0)
                }
            })
            .collect();
        // one weighted least-squares pass on the working response
        let n = y.len();
        let mut w = DVector::zeros(n);
        let mut z = DVector::zeros(n);
        for i in 0..n {
            let eta = link.eta(mu0[i]);
            let d = link.mu_prime(eta);
            w[i] = d * d / self.v.eval(mu0[i]);
            z[i] = eta + (y[i] - mu0[i]) / d;
        }
        let info = weighted_gram(spec.x(), &w);
        let mut xwz = spec.x().clone();
        for (mut row, (&wi, &zi)) in xwz.row_iter_mut().zip(w.iter().zip(z.iter())) {
            row *= wi * zi;
        }
        let rhs = DVector::from_iterator(spec.q(), xwz.column_iter().map(|c| c.sum()));
        let beta = solve_spd(&info, &rhs).unwrap_or_else(|| DVector::zeros(spec.q()));
        if self.deviance(&beta).is_finite() {
            return beta;
        }
        let mut fallback = DVector::zeros(spec.q());
        if let (Some(j), true) = (spec.intercept_column(), ok(ybar)) {
            fallback[j] = link.eta(ybar);
        }
        fallback
    }

    fn run(&self, opts: &FitOptions) -> Result<IrlsOutput> {
        let mut beta = self.start();
        let mut dev = self.deviance(&beta);
        if !dev.is_finite() {
            return Err(Error::NonConvergence {
                iterations: 0,
                reason: "no valid starting value".into(),
            });
        }
        let mut trace = vec![dev];
        for it in 0..opts.max_iter {
            let Some((score, step)) = self.scoring(&beta) else {
                return Err(Error::NonConvergence {
                    iterations: it,
                    reason: "singular information matrix".into(),
                });
            };
            let score_norm = score.norm();
            if score_norm <= opts.tol {
                return Ok(IrlsOutput {
                    beta,
                    deviance: dev,
                    score_norm,
                    iterations: it,
                    trace,
                });
            }
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=opts.max_halvings {
                let cand = &beta + &step * t;
                let d = self.deviance(&cand);
                if d.is_finite() && d <= dev + 1e-12 * dev.abs().max(1.0) {
                    accepted = Some((cand, d));
                    break;
                }
                t *= 0.5;
            }
            match accepted {
                Some((b, d)) => {
                    beta = b;
                    dev = d;
                    trace.push(dev);
                }
                None => {
                    return Err(Error::NonConvergence {
                        iterations: it,
                        reason: format!("step-halving failed at score norm {score_norm:e}"),
                    })
                }
            }
        }
        Err(Error::NonConvergence {
            iterations: opts.max_iter,
            reason: "iteration cap reached".into(),
        })
    }
}

/// Cholesky solve, falling back to LU for marginally indefinite systems.
pub(crate) fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(b));
    }
    a.clone().lu().solve(b)
}

pub(crate) fn inverse_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.inverse());
    }
    a.clone().try_inverse()
}

/// Per-observation `(mu'_i, mu_i)` at `beta`.
fn derivs_and_means(spec: &GlmSpec, beta: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
    let link = spec.link();
    spec.linear_predictor(beta)
        .iter()
        .map(|&e| (link.mu_prime(e), link.mu(e)))
        .unzip()
}

/// Maximum likelihood fit for a known parametric family.
pub fn fit_mle(spec: &GlmSpec, family: ParametricFamily, opts: FitOptions) -> Result<FitResult> {
    family.check_response(spec.y())?;
    let v = family.unit_variance();
    let valid = |m: f64| family.valid_mean(m);
    let out = Irls {
        spec,
        v: &v,
        valid_mean: &valid,
    }
    .run(&opts)?;

    let (dmu, mu) = derivs_and_means(spec, &out.beta);
    let nuisance = family.estimate_nuisance(spec.y(), &mu)?;
    let w = DVector::from_iterator(
        spec.n(),
        dmu.iter()
            .zip(&mu)
            .map(|(&d, &m)| d * d / family.variance(m, nuisance)),
    );
    let info = weighted_gram(spec.x(), &w);
    let covariance = inverse_spd(&info).ok_or_else(|| Error::NonConvergence {
        iterations: out.iterations,
        reason: "singular information at the estimate".into(),
    })?;
    let loglik = spec
        .y()
        .iter()
        .zip(&mu)
        .map(|(&y, &m)| family.log_density(y, m, nuisance))
        .sum();
    Ok(FitResult {
        method: format!("mle-{}", family.name()),
        beta: out.beta,
        nuisance: family.nuisance_name().zip(nuisance),
        covariance,
        covariance_kind: CovarianceKind::InverseInformation,
        loglik: Some(loglik),
        deviance: out.deviance,
        score_norm: out.score_norm,
        iterations: out.iterations,
        trace: out.trace,
        converged: true,
    })
}

/// Quasi-likelihood fit with sandwich covariance `A^-1 B A^-1`.
pub fn fit_quasi(spec: &GlmSpec, v: &VarianceFunction, opts: FitOptions) -> Result<FitResult> {
    let valid = |m: f64| m.is_finite();
    let out = Irls {
        spec,
        v,
        valid_mean: &valid,
    }
    .run(&opts)?;

    let (dmu, mu) = derivs_and_means(spec, &out.beta);
    let n = spec.n();
    let mut wa = DVector::zeros(n);
    let mut wb = DVector::zeros(n);
    for i in 0..n {
        let vi = v.eval(mu[i]);
        wa[i] = dmu[i] * dmu[i] / vi;
        let u = dmu[i] * (spec.y()[i] - mu[i]) / vi;
        wb[i] = u * u;
    }
    let a = weighted_gram(spec.x(), &wa);
    let b = weighted_gram(spec.x(), &wb);
    let a_inv = inverse_spd(&a).ok_or_else(|| Error::NonConvergence {
        iterations: out.iterations,
        reason: "singular information at the estimate".into(),
    })?;
    let sandwich = &a_inv * b * &a_inv;
    let covariance = (&sandwich + sandwich.transpose()) * 0.5;
    Ok(FitResult {
        method: format!("quasi-{}", v.name()),
        beta: out.beta,
        nuisance: None,
        covariance,
        covariance_kind: CovarianceKind::Sandwich,
        loglik: None,
        deviance: out.deviance,
        score_norm: out.score_norm,
        iterations: out.iterations,
        trace: out.trace,
        converged: true,
    })
}

/// Euclidean norm of `sum_i X_i mu'_i (y_i - mu_i) / v(mu_i)` at `beta`,
/// computed from scratch.
pub fn estimating_equation_norm(spec: &GlmSpec, v: &VarianceFunction, beta: &DVector<f64>) -> f64 {
    let (dmu, mu) = derivs_and_means(spec, beta);
    let u = DVector::from_iterator(
        spec.n(),
        (0..spec.n()).map(|i| dmu[i] * (spec.y()[i] - mu[i]) / v.eval(mu[i])),
    );
    spec.x().tr_mul(&u).norm()
}
