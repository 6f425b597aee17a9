//! Links, data specifications and the tilt-form GLM likelihood.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::parametric::{ParametricFamily, VarianceFunction};
use crate::tilt::{self, ReferenceDistribution, TiltOptions, TiltSolution};

/// Inverse-link functions `mu(eta)` with closed-form derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkFunction {
    Identity,
    Log,
    Logit,
    /// `mu = 1 / eta` on `eta > 0`.
    Inverse,
}

impl LinkFunction {
    pub const ALL: [LinkFunction; 4] = [
        LinkFunction::Identity,
        LinkFunction::Log,
        LinkFunction::Logit,
        LinkFunction::Inverse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LinkFunction::Identity => "identity",
            LinkFunction::Log => "log",
            LinkFunction::Logit => "logit",
            LinkFunction::Inverse => "inverse",
        }
    }

    /// Inverse link `mu(eta)`.
    pub fn mu(self, eta: f64) -> f64 {
        match self {
            LinkFunction::Identity => eta,
            LinkFunction::Log => eta.exp(),
            LinkFunction::Logit => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
            LinkFunction::Inverse => 1.0 / eta,
        }
    }

    /// Derivative `mu'(eta)`.
    pub fn mu_prime(self, eta: f64) -> f64 {
        match self {
            LinkFunction::Identity => 1.0,
            LinkFunction::Log => eta.exp(),
            LinkFunction::Logit => {
                let p = self.mu(eta);
                p * (1.0 - p)
            }
            LinkFunction::Inverse => -1.0 / (eta * eta),
        }
    }

    /// Link `g(mu)`, the inverse of [`LinkFunction::mu`].
    pub fn eta(self, mu: f64) -> f64 {
        match self {
            LinkFunction::Identity => mu,
            LinkFunction::Log => mu.ln(),
            LinkFunction::Logit => (mu / (1.0 - mu)).ln(),
            LinkFunction::Inverse => 1.0 / mu,
        }
    }

    /// Whether `eta` is a valid linear predictor.
    pub fn in_domain(self, eta: f64) -> bool {
        match self {
            LinkFunction::Inverse => eta.is_finite() && eta > 0.0,
            _ => eta.is_finite(),
        }
    }

    /// Whether `mu` is in the range of the inverse link.
    pub fn in_range(self, mu: f64) -> bool {
        match self {
            LinkFunction::Identity => mu.is_finite(),
            LinkFunction::Log | LinkFunction::Inverse => mu.is_finite() && mu > 0.0,
            LinkFunction::Logit => mu > 0.0 && mu < 1.0,
        }
    }
}

impl fmt::Display for LinkFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LinkFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(LinkFunction::Identity),
            "log" => Ok(LinkFunction::Log),
            "logit" => Ok(LinkFunction::Logit),
            "inverse" => Ok(LinkFunction::Inverse),
            other => Err(Error::InvalidSpec(format!("unknown link '{other}'"))),
        }
    }
}

/// How the error distribution is treated when fitting.
#[derive(Debug, Clone)]
pub enum FamilyMode {
    Parametric(ParametricFamily),
    Semiparametric,
    Quasi(VarianceFunction),
}

/// Design matrix, responses and link.
#[derive(Debug, Clone)]
pub struct GlmSpec {
    x: DMatrix<f64>,
    y: Vec<f64>,
    link: LinkFunction,
    mode: FamilyMode,
}

impl GlmSpec {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>, link: LinkFunction) -> Result<Self> {
        Self::with_mode(x, y, link, FamilyMode::Semiparametric)
    }

    pub fn with_mode(
        x: DMatrix<f64>,
        y: Vec<f64>,
        link: LinkFunction,
        mode: FamilyMode,
    ) -> Result<Self> {
        let (n, q) = x.shape();
        if y.len() != n {
            return Err(Error::InvalidSpec(format!(
                "design has {n} rows but there are {} responses",
                y.len()
            )));
        }
        if q == 0 || q > n {
            return Err(Error::InvalidSpec(format!(
                "need 1 <= q <= n, got q = {q}, n = {n}"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("design contains non-finite values".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("responses contain non-finite values".into()));
        }
        let sv = x.clone().svd(false, false).singular_values;
        let smax = sv.max();
        let smin = sv.min();
        if !(smin > smax * (n.max(q) as f64) * f64::EPSILON * 16.0) {
            return Err(Error::InvalidSpec("design is not of full column rank".into()));
        }
        Ok(Self { x, y, link, mode })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn link(&self) -> LinkFunction {
        self.link
    }

    pub fn mode(&self) -> &FamilyMode {
        &self.mode
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn q(&self) -> usize {
        self.x.ncols()
    }

    /// Row `i` of the design as an owned vector.
    pub fn row(&self, i: usize) -> DVector<f64> {
        self.x.row(i).transpose()
    }

    pub fn linear_predictor(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.x * beta
    }

    pub fn fitted_means(&self, beta: &DVector<f64>) -> Vec<f64> {
        self.linear_predictor(beta)
            .iter()
            .map(|&eta| self.link.mu(eta))
            .collect()
    }

    /// Index of a column equal to one everywhere, if any.
    pub fn intercept_column(&self) -> Option<usize> {
        (0..self.q()).find(|&j| self.x.column(j).iter().all(|&v| v == 1.0))
    }
}

/// `(beta, F)` together with the tilt solved at every observation.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub beta: DVector<f64>,
    pub f: ReferenceDistribution,
    pub tilts: Vec<TiltSolution>,
    etas: Vec<f64>,
}

impl ModelState {
    /// Solves the tilts for every observation. A fitted mean outside the
    /// open support hull of `F` is a [`Error::ConstraintViolation`].
    pub fn new(spec: &GlmSpec, beta: DVector<f64>, f: ReferenceDistribution) -> Result<Self> {
        Self::build(spec, beta, f, None)
    }

    /// Like [`ModelState::new`], warm-starting each tilt from `prev`.
    pub fn new_warm(
        spec: &GlmSpec,
        beta: DVector<f64>,
        f: ReferenceDistribution,
        prev: &ModelState,
    ) -> Result<Self> {
        let start: Vec<f64> = prev.tilts.iter().map(|t| t.theta).collect();
        Self::build(spec, beta, f, Some(&start))
    }

    fn build(
        spec: &GlmSpec,
        beta: DVector<f64>,
        f: ReferenceDistribution,
        theta0: Option<&[f64]>,
    ) -> Result<Self> {
        if beta.len() != spec.q() {
            return Err(Error::InvalidSpec(format!(
                "beta has length {} but design has {} columns",
                beta.len(),
                spec.q()
            )));
        }
        let link = spec.link();
        let etas: Vec<f64> = spec.linear_predictor(&beta).iter().copied().collect();
        let (lower, upper) = f.hull();
        let mut means = Vec::with_capacity(etas.len());
        for (index, &eta) in etas.iter().enumerate() {
            let mean = link.mu(eta);
            if !link.in_domain(eta) || !f.contains_interior(mean) {
                return Err(Error::ConstraintViolation {
                    index,
                    mean,
                    lower,
                    upper,
                });
            }
            means.push(mean);
        }
        let opts = tilt_options_for(&f);
        let tilts = tilt::solve_tilts(&f, &means, theta0, opts)
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            beta,
            f,
            tilts,
            etas,
        })
    }

    pub fn etas(&self) -> &[f64] {
        &self.etas
    }

    pub fn means(&self) -> impl Iterator<Item = f64> + '_ {
        self.tilts.iter().map(|t| t.mean)
    }
}

/// Tilt tolerance scaled to the magnitude of the support.
pub(crate) fn tilt_options_for(f: &ReferenceDistribution) -> TiltOptions {
    let (lo, hi) = f.hull();
    let scale = lo.abs().max(hi.abs()).max(1.0);
    TiltOptions {
        tol: 1e-10f64.max(1e-12 * scale),
        max_iter: 100,
    }
}

/// Atom index of every response, or the offending observation indices.
pub fn response_atoms(f: &ReferenceDistribution, y: &[f64]) -> Result<Vec<usize>> {
    let mut idx = Vec::with_capacity(y.len());
    let mut off = Vec::new();
    for (i, &yi) in y.iter().enumerate() {
        match f.index_of(yi) {
            Some(j) => idx.push(j),
            None => off.push(i),
        }
    }
    if off.is_empty() {
        Ok(idx)
    } else {
        Err(Error::OffSupportResponse { indices: off })
    }
}

/// `sum_i [log w(y_i) + b_i + theta_i y_i]`.
pub fn loglik(state: &ModelState, spec: &GlmSpec) -> Result<f64> {
    let idx = response_atoms(&state.f, spec.y())?;
    Ok(loglik_indexed(state, spec, &idx))
}

pub(crate) fn loglik_indexed(state: &ModelState, spec: &GlmSpec, idx: &[usize]) -> f64 {
    let lw = state.f.log_weights();
    state
        .tilts
        .iter()
        .zip(spec.y())
        .zip(idx)
        .map(|((t, &y), &j)| lw[j] + t.b + t.theta * y)
        .sum()
}

/// Log-likelihood at `(beta, F)`, or negative infinity when some fitted mean
/// leaves the hull or some response is off the support.
pub fn loglik_or_neg_inf(spec: &GlmSpec, beta: &DVector<f64>, f: &ReferenceDistribution) -> f64 {
    ModelState::new(spec, beta.clone(), f.clone())
        .and_then(|s| loglik(&s, spec))
        .unwrap_or(f64::NEG_INFINITY)
}

/// Per-observation weight `mu'(eta_i) / V_i` in the beta score.
fn score_weights(state: &ModelState, spec: &GlmSpec) -> Vec<f64> {
    let link = spec.link();
    state
        .etas
        .iter()
        .zip(&state.tilts)
        .map(|(&eta, t)| link.mu_prime(eta) / t.variance)
        .collect()
}

/// `sum_i X_i mu'_i / V_i (y_i - mu_i)`.
pub fn score_beta(state: &ModelState, spec: &GlmSpec) -> DVector<f64> {
    let w = score_weights(state, spec);
    let resid = DVector::from_iterator(
        spec.n(),
        w.iter()
            .zip(spec.y())
            .zip(&state.tilts)
            .map(|((wi, y), t)| wi * (y - t.mean)),
    );
    spec.x().tr_mul(&resid)
}

/// `sum_i X_i X_i^T mu'_i^2 / V_i`.
pub fn fisher_beta(state: &ModelState, spec: &GlmSpec) -> DMatrix<f64> {
    let link = spec.link();
    let w = DVector::from_iterator(
        spec.n(),
        state.etas.iter().zip(&state.tilts).map(|(&eta, t)| {
            let d = link.mu_prime(eta);
            d * d / t.variance
        }),
    );
    weighted_gram(spec.x(), &w)
}

/// `X^T diag(w) X`, symmetrized.
pub(crate) fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (mut row, &wi) in xw.row_iter_mut().zip(w.iter()) {
        row *= wi;
    }
    let g = x.tr_mul(&xw);
    (&g + g.transpose()) * 0.5
}
