//! Seeded Monte Carlo comparisons of the semiparametric MLE against the
//! oracle parametric MLE and a constant-variance quasi-likelihood fit.
//!
//! Replicate `r` draws its data from a ChaCha8 stream selected by `r` under
//! the master seed, so a report is a pure function of
//! `(scenario, reps, master_seed, estimators)` regardless of thread count.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{GlmSpec, LinkFunction};
use crate::par::{self, Execution};
use crate::parametric::{fit_mle, fit_quasi, FitOptions, ParametricFamily, VarianceFunction};
use crate::semipar::{fit_semiparametric, SemiparOptions};

/// Largest tolerated failure rate per estimator.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Design {
    /// Exponential responses, log link, covariates (1, group, uniform slope on [0, 5]).
    ExponentialGroupSlope,
    /// Poisson responses, log link, covariates (1, binary, normal, normal).
    PoissonThreeCovariates,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub data_label: String,
    pub design: Design,
    pub n: usize,
    pub true_beta: DVector<f64>,
    pub parameter_labels: Vec<String>,
    pub oracle_family: ParametricFamily,
    pub link: LinkFunction,
}

impl Scenario {
    pub const BUILTIN: [&'static str; 3] = ["exponential-n33", "exponential-n66", "poisson-n44"];

    pub fn exponential(n: usize) -> Self {
        Self {
            name: format!("exponential-n{n}"),
            data_label: "Exponential".into(),
            design: Design::ExponentialGroupSlope,
            n,
            true_beta: DVector::from_vec(vec![4.0, 1.0, -0.3]),
            parameter_labels: vec!["Intercept".into(), "Group effect".into(), "Common slope".into()],
            oracle_family: ParametricFamily::Exponential,
            link: LinkFunction::Log,
        }
    }

    pub fn poisson(n: usize) -> Self {
        Self {
            name: format!("poisson-n{n}"),
            data_label: "Poisson".into(),
            design: Design::PoissonThreeCovariates,
            n,
            true_beta: DVector::from_vec(vec![1.0, 0.5, 0.2, -0.5]),
            parameter_labels: vec![
                "Intercept".into(),
                "Coefficient of X1".into(),
                "Coefficient of X2".into(),
                "Coefficient of X3".into(),
            ],
            oracle_family: ParametricFamily::Poisson,
            link: LinkFunction::Log,
        }
    }

    /// Looks up `exponential-n<N>` or `poisson-n<N>`.
    pub fn builtin(name: &str) -> Option<Self> {
        let (kind, n) = name.rsplit_once("-n")?;
        let n: usize = n.parse().ok()?;
        match kind {
            "exponential" if n >= 6 => Some(Self::exponential(n)),
            "poisson" if n >= 7 => Some(Self::poisson(n)),
            _ => None,
        }
    }

    pub fn with_n(&self, n: usize) -> Self {
        match self.design {
            Design::ExponentialGroupSlope => Self::exponential(n),
            Design::PoissonThreeCovariates => Self::poisson(n),
        }
    }

    /// Draws one data set (covariates and responses).
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<GlmSpec> {
        let n = self.n;
        let b = &self.true_beta;
        let (x, y) = match self.design {
            Design::ExponentialGroupSlope => {
                let mut x = DMatrix::zeros(n, 3);
                let mut y = Vec::with_capacity(n);
                for i in 0..n {
                    let g = (i % 2) as f64;
                    let z = 5.0 * rng.random::<f64>();
                    x[(i, 0)] = 1.0;
                    x[(i, 1)] = g;
                    x[(i, 2)] = z;
                    let mean = (b[0] + b[1] * g + b[2] * z).exp();
                    y.push(Exp::new(1.0 / mean).expect("positive rate").sample(rng));
                }
                (x, y)
            }
            Design::PoissonThreeCovariates => {
                let mut x = DMatrix::zeros(n, 4);
                let mut y = Vec::with_capacity(n);
                for i in 0..n {
                    let x1 = (i % 2) as f64;
                    let x2: f64 = StandardNormal.sample(rng);
                    let x3: f64 = StandardNormal.sample(rng);
                    x[(i, 0)] = 1.0;
                    x[(i, 1)] = x1;
                    x[(i, 2)] = x2;
                    x[(i, 3)] = x3;
                    let mean = (b[0] + b[1] * x1 + b[2] * x2 + b[3] * x3).exp();
                    y.push(Poisson::new(mean).expect("positive mean").sample(rng));
                }
                (x, y)
            }
        };
        GlmSpec::new(x, y, self.link)
    }
}

/// RNG for replicate `r` under `master_seed`.
pub fn replicate_rng(master_seed: u64, r: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(r);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    /// Joint maximum likelihood over `(beta, F)`.
    SemiParametric,
    /// Maximum likelihood under the true family.
    Mle,
    /// Quasi-likelihood with constant variance (misspecified).
    Quasi,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::SemiParametric => "sp",
            Estimator::Mle => "mle",
            Estimator::Quasi => "quasi",
        }
    }

    /// Estimate and whether the fit stopped on a stall.
    fn fit(self, sc: &Scenario, spec: &GlmSpec) -> Result<(DVector<f64>, bool)> {
        match self {
            Estimator::SemiParametric => {
                fit_semiparametric(spec, SemiparOptions::default()).map(|f| (f.beta, f.stalled))
            }
            Estimator::Mle => {
                fit_mle(spec, sc.oracle_family, FitOptions::default()).map(|f| (f.beta, false))
            }
            Estimator::Quasi => fit_quasi(spec, &VarianceFunction::constant(), FitOptions::default())
                .map(|f| (f.beta, false)),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sp" => Ok(Estimator::SemiParametric),
            "mle" => Ok(Estimator::Mle),
            "quasi" => Ok(Estimator::Quasi),
            other => Err(Error::InvalidSpec(format!("unknown estimator '{other}'"))),
        }
    }
}

/// Component-wise `sqrt(mean((b_j - beta_j)^2)) / |beta_j|`.
pub fn relative_rmse(estimates: &[DVector<f64>], true_beta: &DVector<f64>) -> Result<DVector<f64>> {
    if estimates.len() < 2 {
        return Err(Error::InvalidSpec("need at least two estimates".into()));
    }
    if let Some(index) = true_beta.iter().position(|b| *b == 0.0) {
        return Err(Error::ZeroTrueParameter { index });
    }
    let q = true_beta.len();
    let mut sq = DVector::zeros(q);
    for est in estimates {
        if est.len() != q {
            return Err(Error::InvalidSpec("estimate length mismatch".into()));
        }
        let d = est - true_beta;
        sq += d.component_mul(&d);
    }
    let k = estimates.len() as f64;
    Ok(DVector::from_iterator(
        q,
        (0..q).map(|j| (sq[j] / k).sqrt() / true_beta[j].abs()),
    ))
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub estimators: Vec<Estimator>,
    pub exec: Execution,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            estimators: vec![Estimator::SemiParametric, Estimator::Mle],
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRow {
    pub label: String,
    pub true_value: f64,
    pub rrmse_sp: Option<f64>,
    pub rrmse_mle: Option<f64>,
    pub rrmse_quasi: Option<f64>,
    /// `rrmse_sp / rrmse_mle`.
    pub ratio: Option<f64>,
}

impl SimRow {
    pub fn rrmse(&self, est: Estimator) -> Option<f64> {
        match est {
            Estimator::SemiParametric => self.rrmse_sp,
            Estimator::Mle => self.rrmse_mle,
            Estimator::Quasi => self.rrmse_quasi,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub scenario: String,
    pub data_label: String,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub estimators: Vec<Estimator>,
    /// Failed replicates per estimator, in `estimators` order.
    pub failures: Vec<usize>,
    /// Replicates entering the comparison (every estimator succeeded).
    pub used: usize,
    /// Semiparametric fits among those that stopped on a stall.
    pub stalled: usize,
    pub rows: Vec<SimRow>,
}

/// Estimate and stalled flag of one fit.
type Fitted = (DVector<f64>, bool);

/// Runs `reps` replicates of a scenario and summarizes relative RMSEs.
///
/// A replicate on which any estimator fails is dropped from every
/// estimator's summary; failures are counted per estimator and more than
/// [`MAX_FAILURE_RATE`] for any one is an error.
pub fn run_scenario(sc: &Scenario, reps: usize, master_seed: u64, opts: &SimOptions) -> Result<SimReport> {
    if reps < 2 {
        return Err(Error::InvalidSpec("need at least two replicates".into()));
    }
    let estimators = dedup(&opts.estimators);
    if estimators.is_empty() {
        return Err(Error::InvalidSpec("no estimators selected".into()));
    }
    let records: Vec<Vec<Option<Fitted>>> = par::map_range(reps, opts.exec, |r| {
        let mut rng = replicate_rng(master_seed, r as u64);
        match sc.generate(&mut rng) {
            Ok(spec) => estimators.iter().map(|e| e.fit(sc, &spec).ok()).collect(),
            Err(_) => vec![None; estimators.len()],
        }
    });

    let failures: Vec<usize> = (0..estimators.len())
        .map(|k| records.iter().filter(|rec| rec[k].is_none()).count())
        .collect();
    for (e, &fails) in estimators.iter().zip(&failures) {
        if fails as f64 > MAX_FAILURE_RATE * reps as f64 {
            return Err(Error::TooManyFailures {
                estimator: e.name().into(),
                failures: fails,
                reps,
            });
        }
    }
    let complete: Vec<&Vec<Option<Fitted>>> =
        records.iter().filter(|rec| rec.iter().all(Option::is_some)).collect();
    let stalled = complete
        .iter()
        .filter(|rec| rec.iter().flatten().any(|(_, s)| *s))
        .count();
    let mut rrmse: Vec<(Estimator, DVector<f64>)> = Vec::new();
    for (k, &e) in estimators.iter().enumerate() {
        let est: Vec<DVector<f64>> = complete
            .iter()
            .map(|rec| rec[k].as_ref().expect("complete replicate").0.clone())
            .collect();
        rrmse.push((e, relative_rmse(&est, &sc.true_beta)?));
    }
    let lookup = |e: Estimator, j: usize| rrmse.iter().find(|(x, _)| *x == e).map(|(_, v)| v[j]);
    let rows = (0..sc.true_beta.len())
        .map(|j| {
            let sp = lookup(Estimator::SemiParametric, j);
            let mle = lookup(Estimator::Mle, j);
            SimRow {
                label: sc.parameter_labels[j].clone(),
                true_value: sc.true_beta[j],
                rrmse_sp: sp,
                rrmse_mle: mle,
                rrmse_quasi: lookup(Estimator::Quasi, j),
                ratio: sp.zip(mle).map(|(a, b)| a / b),
            }
        })
        .collect();
    Ok(SimReport {
        scenario: sc.name.clone(),
        data_label: sc.data_label.clone(),
        n: sc.n,
        reps,
        seed: master_seed,
        estimators,
        failures,
        used: complete.len(),
        stalled,
        rows,
    })
}

fn dedup(es: &[Estimator]) -> Vec<Estimator> {
    let mut out = Vec::new();
    for &e in es {
        if !out.contains(&e) {
            out.push(e);
        }
    }
    out
}

impl SimReport {
    pub fn failures_for(&self, e: Estimator) -> Option<usize> {
        self.estimators
            .iter()
            .position(|x| *x == e)
            .map(|k| self.failures[k])
    }

    /// CSV with columns
    /// `scenario,parameter,estimator,rrmse,ratio,reps,failures`; `ratio` is
    /// the estimator's relative RMSE over the oracle MLE's.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scenario", "parameter", "estimator", "rrmse", "ratio", "reps", "failures"])
            .expect("in-memory write");
        for row in &self.rows {
            for (k, &e) in self.estimators.iter().enumerate() {
                let Some(value) = row.rrmse(e) else { continue };
                let ratio = row
                    .rrmse_mle
                    .map(|m| format!("{:.6}", value / m))
                    .unwrap_or_default();
                w.write_record([
                    self.scenario.as_str(),
                    row.label.as_str(),
                    e.name(),
                    &format!("{value:.6}"),
                    &ratio,
                    &self.reps.to_string(),
                    &self.failures[k].to_string(),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 csv")
    }

    /// Aligned text table with one row per parameter.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Relative root mean-square errors, {} ({} replications, seed {}, synthetic design)",
            self.scenario, self.reps, self.seed
        );
        let fails: Vec<String> = self
            .estimators
            .iter()
            .zip(&self.failures)
            .map(|(e, f)| format!("{e} {f}"))
            .collect();
        let _ = writeln!(
            out,
            "failed replicates: {}; compared: {}; stalled sp fits: {}",
            fails.join(", "),
            self.used,
            self.stalled
        );
        let mut header = format!("{:<12} {:>4}  {:<20}", "Data", "n", "Parameter");
        for e in &self.estimators {
            let _ = write!(header, " {:>8}", e.name().to_uppercase());
        }
        if self.rows.iter().any(|r| r.ratio.is_some()) {
            let _ = write!(header, " {:>8}", "SP/MLE");
        }
        let rule = "-".repeat(header.len());
        let _ = writeln!(out, "{rule}\n{header}\n{rule}");
        for (j, row) in self.rows.iter().enumerate() {
            let (data, n) = if j == 0 {
                (self.data_label.clone(), self.n.to_string())
            } else {
                (String::new(), String::new())
            };
            let mut line = format!("{data:<12} {n:>4}  {:<20}", row.label);
            for &e in &self.estimators {
                match row.rrmse(e) {
                    Some(v) => {
                        let _ = write!(line, " {v:>8.3}");
                    }
                    None => line.push_str(&format!(" {:>8}", "-")),
                }
            }
            if let Some(r) = row.ratio {
                let _ = write!(line, " {r:>8.3}");
            }
            let _ = writeln!(out, "{line}");
        }
        let _ = writeln!(out, "{rule}");
        out
    }
}
