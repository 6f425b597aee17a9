//! Randomized self-checks run by the `verify` command.
//!
//! Configuration `k` of a check is drawn from ChaCha8 stream `k` under the
//! check's seed, so reports depend only on the seed and the options.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{loglik_or_neg_inf, score_beta, LinkFunction};
use crate::orthogonality::{
    check_projection_nullity_scaled, fisher_cross_block, random_config, CrossBlockSetup, NuisanceScore,
};
use crate::par::{self, Execution};
use crate::parametric::ParametricFamily;
use crate::tilt::{solve_tilt, tilted_moments, ReferenceDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Projection,
    Fisher,
    Tilt,
    Score,
}

impl Check {
    pub const ALL: [Check; 4] = [Check::Projection, Check::Fisher, Check::Tilt, Check::Score];

    pub fn name(self) -> &'static str {
        match self {
            Check::Projection => "projection",
            Check::Fisher => "fisher",
            Check::Tilt => "tilt",
            Check::Score => "score",
        }
    }

    /// Bound used when none is given.
    pub fn default_tol(self) -> f64 {
        match self {
            Check::Projection | Check::Tilt => 1e-10,
            Check::Fisher => 3.0,
            Check::Score => 1e-5,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Check {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Check::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown check '{s}'")))
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Random configurations per check (Monte Carlo draws for `fisher`
    /// come from `n_mc` instead).
    pub configs: usize,
    /// Overrides [`Check::default_tol`] for the main metric.
    pub tol: Option<f64>,
    /// Scale applied to the variance inside the projection (negative
    /// control); `None` leaves it exact.
    pub corrupt_variance: Option<f64>,
    pub n_mc: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            configs: 1000,
            tol: None,
            corrupt_variance: None,
            n_mc: 100_000,
            seed: 0,
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub label: String,
    pub value: f64,
    pub bound: f64,
    pub kind: Bound,
}

impl Metric {
    fn at_most(label: &str, value: f64, bound: f64) -> Self {
        Self {
            label: label.into(),
            value,
            bound,
            kind: Bound::AtMost,
        }
    }

    fn at_least(label: &str, value: f64, bound: f64) -> Self {
        Self {
            label: label.into(),
            value,
            bound,
            kind: Bound::AtLeast,
        }
    }

    pub fn passed(&self) -> bool {
        match self.kind {
            Bound::AtMost => self.value <= self.bound,
            Bound::AtLeast => self.value > self.bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub check: Check,
    pub metrics: Vec<Metric>,
    pub evaluations: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.metrics.iter().all(Metric::passed)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in &self.metrics {
            let op = match m.kind {
                Bound::AtMost => "<=",
                Bound::AtLeast => "> ",
            };
            writeln!(
                f,
                "{:<10} {:<34} {:>12.4e} {op} {:<10.3e} {}",
                self.check.name(),
                m.label,
                m.value,
                m.bound,
                if m.passed() { "PASS" } else { "FAIL" }
            )?;
        }
        writeln!(f, "{:<10} evaluations {}", self.check.name(), self.evaluations)
    }
}

fn stream_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

pub fn run_check(check: Check, opts: &VerifyOptions) -> Result<CheckReport> {
    if opts.configs == 0 {
        return Err(Error::InvalidSpec("need at least one configuration".into()));
    }
    let tol = opts.tol.unwrap_or(check.default_tol());
    match check {
        Check::Projection => projection(opts, tol),
        Check::Fisher => fisher(opts, tol),
        Check::Tilt => tilt(opts, tol),
        Check::Score => score(opts, tol),
    }
}

fn projection(opts: &VerifyOptions, tol: f64) -> Result<CheckReport> {
    let scale = opts.corrupt_variance.unwrap_or(1.0);
    let results = par::map_range(opts.configs, opts.exec, |k| {
        let link = LinkFunction::ALL[k % LinkFunction::ALL.len()];
        let (spec, state) = random_config(&mut stream_rng(opts.seed, k), link)?;
        Ok(check_projection_nullity_scaled(&state, &spec, tol, scale))
    });
    let mut max_abs = 0.0f64;
    let mut evaluations = 0;
    for r in results {
        let r: crate::orthogonality::NullityReport = r?;
        max_abs = max_abs.max(r.max_abs);
        evaluations += r.evaluations;
    }
    let label = match opts.corrupt_variance {
        Some(c) => format!("max |projected score| (V*{c})"),
        None => "max |projected score|".to_string(),
    };
    Ok(CheckReport {
        check: Check::Projection,
        metrics: vec![Metric::at_most(&label, max_abs, tol)],
        evaluations,
    })
}

/// Fixed design shared by the cross-block checks.
fn cross_design(seed: u64) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, usize::MAX >> 1);
    DMatrix::from_fn(10, 2, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) })
}

fn fisher(opts: &VerifyOptions, tol: f64) -> Result<CheckReport> {
    let x = cross_design(opts.seed);
    let beta = DVector::from_vec(vec![0.5, 0.3]);
    let normal = CrossBlockSetup {
        family: ParametricFamily::Normal { sigma2: None },
        link: LinkFunction::Identity,
        x: x.clone(),
        beta: beta.clone(),
        nuisance: 1.0,
    };
    let gamma = CrossBlockSetup {
        family: ParametricFamily::Gamma { shape: None },
        link: LinkFunction::Log,
        x,
        beta,
        nuisance: 2.0,
    };
    let nz = fisher_cross_block(&normal, NuisanceScore::Family, opts.n_mc, opts.seed, opts.exec)?;
    let gz = fisher_cross_block(&gamma, NuisanceScore::Family, opts.n_mc, opts.seed ^ 1, opts.exec)?;
    let ctrl = fisher_cross_block(&gamma, NuisanceScore::MeanShift, opts.n_mc, opts.seed ^ 2, opts.exec)?;
    Ok(CheckReport {
        check: Check::Fisher,
        metrics: vec![
            Metric::at_most("normal sigma2 max |z|", nz.max_z(), tol),
            Metric::at_most("gamma shape max |z|", gz.max_z(), tol),
            Metric::at_least("mean-shift control max |z|", ctrl.max_z(), tol),
        ],
        evaluations: 3 * opts.n_mc,
    })
}

/// Random distribution with 2 to 20 atoms on a random interval.
fn random_reference<R: Rng + ?Sized>(rng: &mut R) -> ReferenceDistribution {
    loop {
        let m = rng.random_range(2..=20usize);
        let center = rng.random_range(-50.0..50.0);
        let width = 10f64.powf(rng.random_range(-1.0..2.0));
        let atoms: Vec<f64> = (0..m).map(|_| center + width * rng.random_range(-1.0..1.0)).collect();
        let masses: Vec<f64> = (0..m).map(|_| rng.random_range(0.02..1.0)).collect();
        let mut pairs: Vec<(f64, f64)> = atoms.into_iter().zip(masses).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));
        pairs.dedup_by(|a, b| a.0 == b.0);
        if pairs.len() < 2 {
            continue;
        }
        let (atoms, masses): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Ok(f) = ReferenceDistribution::from_masses(atoms, &masses) {
            return f;
        }
    }
}

fn tilt(opts: &VerifyOptions, tol: f64) -> Result<CheckReport> {
    let results = par::map_range(opts.configs, opts.exec, |k| {
        let mut rng = stream_rng(opts.seed, k);
        let f = random_reference(&mut rng);
        let (lo, hi) = f.hull();
        let theta = rng.random_range(-6.0..6.0) / (hi - lo);
        let (target, _) = tilted_moments(&f, theta);
        let sol = solve_tilt(&f, target, tol)?;
        Ok(((sol.mean - target).abs(), (sol.theta - theta).abs()))
    });
    let mut mean_dev = 0.0f64;
    let mut theta_dev = 0.0f64;
    for r in results {
        let (m, t): (f64, f64) = r?;
        mean_dev = mean_dev.max(m);
        theta_dev = theta_dev.max(t);
    }
    let f = ReferenceDistribution::new(vec![0.0, 1.0], vec![0.5, 0.5])?;
    let sol = solve_tilt(&f, 0.75, tol)?;
    let closed = (sol.theta - 3f64.ln()).abs().max((sol.b + 2f64.ln()).abs());
    Ok(CheckReport {
        check: Check::Tilt,
        metrics: vec![
            Metric::at_most("max |tilted mean - target|", mean_dev, tol),
            Metric::at_most("max theta round-trip error", theta_dev, 1e-8),
            Metric::at_most("closed form (log 3, -log 2)", closed, 1e-12),
        ],
        evaluations: opts.configs + 1,
    })
}

/// Largest component of `|fd - score|` over `max(|score|_inf, 1e-2)`.
fn score(opts: &VerifyOptions, tol: f64) -> Result<CheckReport> {
    let results = par::map_range(opts.configs, opts.exec, |k| {
        let link = LinkFunction::ALL[k % LinkFunction::ALL.len()];
        let (spec, state) = random_config(&mut stream_rng(opts.seed, k), link)?;
        let s = score_beta(&state, &spec);
        let scale = s.amax().max(1e-2);
        let mut worst = 0.0f64;
        for j in 0..spec.q() {
            let central = |h: f64| {
                let mut bp = state.beta.clone();
                bp[j] += h;
                let mut bm = state.beta.clone();
                bm[j] -= h;
                (loglik_or_neg_inf(&spec, &bp, &state.f) - loglik_or_neg_inf(&spec, &bm, &state.f)) / (2.0 * h)
            };
            // one Richardson step: near the hull edge the h^2 term alone is too large
            let h = 1e-5 * state.beta[j].abs().max(1.0);
            let fd = (4.0 * central(h / 2.0) - central(h)) / 3.0;
            let err = (fd - s[j]).abs() / scale;
            worst = worst.max(if err.is_finite() { err } else { f64::INFINITY });
        }
        Ok(worst)
    });
    let mut worst = 0.0f64;
    for r in results {
        let r: f64 = r?;
        worst = worst.max(r);
    }
    Ok(CheckReport {
        check: Check::Score,
        metrics: vec![Metric::at_most("max relative score error", worst, tol)],
        evaluations: opts.configs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(configs: usize) -> VerifyOptions {
        VerifyOptions {
            configs,
            n_mc: 20_000,
            seed: 17,
            ..VerifyOptions::default()
        }
    }

    #[test]
    fn all_checks_pass_on_small_runs() {
        for check in Check::ALL {
            let r = run_check(check, &opts(50)).unwrap();
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn corrupted_variance_fails_projection() {
        let o = VerifyOptions {
            corrupt_variance: Some(1.1),
            ..opts(20)
        };
        assert!(!run_check(Check::Projection, &o).unwrap().passed());
    }

    #[test]
    fn reports_do_not_depend_on_execution() {
        for check in Check::ALL {
            let a = run_check(check, &VerifyOptions { exec: Execution::Sequential, ..opts(30) }).unwrap();
            let b = run_check(check, &VerifyOptions { exec: Execution::Parallel, ..opts(30) }).unwrap();
            assert_eq!(a.to_string(), b.to_string());
        }
    }

    #[test]
    fn check_names_round_trip() {
        for c in Check::ALL {
            assert_eq!(c.name().parse::<Check>().unwrap(), c);
        }
        assert!("nope".parse::<Check>().is_err());
    }
}
