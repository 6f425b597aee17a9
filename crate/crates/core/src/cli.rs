//! Command-line front end.
//!
//! Exit codes: 0 ok, 1 input error, 2 non-convergence, 3 verification
//! failure. Every error prints one line `error[<kind>]: <message>` on stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::Error;
use crate::model::{GlmSpec, LinkFunction};
use crate::par::Execution;
use crate::parametric::{fit_mle, fit_quasi, CovarianceKind, FitOptions, FitResult, ParametricFamily, VarianceFunction};
use crate::semipar::{fit_semiparametric, SemiparFitResult, SemiparOptions};
use crate::sim::{run_scenario, Estimator, Scenario, SimOptions};
use crate::verify::{run_check, Check, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NONCONVERGENCE: i32 = 2;
pub const EXIT_VERIFICATION: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "tiltglm", version, about = "GLMs in exponential-tilt form")]
pub struct Cli {
    /// Master seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads: a positive count or `auto`.
    #[arg(long, global = true, default_value = "auto")]
    threads: Threads,
    /// Output file (fit, verify) or directory (simulate).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress informational output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy)]
#[cfg_attr(not(feature = "parallel"), allow(dead_code))]
enum Threads {
    Auto,
    Count(usize),
}

impl FromStr for Threads {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(Threads::Auto);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Threads::Count(n)),
            _ => Err(format!("expected a positive integer or 'auto', got '{s}'")),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model to CSV data and write a JSON report.
    Fit(FitArgs),
    /// Run randomized self-checks.
    Verify(VerifyArgs),
    /// Run a simulation scenario and write CSV and text tables.
    Simulate(SimulateArgs),
    /// List the built-in simulation scenarios.
    Scenarios,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FamilyArg {
    Normal,
    Poisson,
    Gamma,
    Exponential,
    Semiparametric,
    Quasi,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long, value_enum)]
    family: FamilyArg,
    /// identity, log, logit or inverse. Defaults to identity for normal and
    /// log for the other families when the responses allow it.
    #[arg(long)]
    link: Option<String>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    response: String,
    /// Comma-separated covariate columns; defaults to every other column.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    #[arg(long)]
    no_intercept: bool,
    /// Variance function for `quasi`: constant, mu or mu2.
    #[arg(long, default_value = "constant")]
    variance: String,
    /// Outer iteration cap.
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Comma-separated subset of projection, fisher, tilt, score.
    #[arg(long, value_delimiter = ',', default_value = "projection,fisher,tilt,score")]
    checks: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    configs: usize,
    /// Bound for each check's main metric.
    #[arg(long)]
    tol: Option<f64>,
    /// Multiply the variance in the projection by this factor.
    #[arg(long)]
    corrupt_variance: Option<f64>,
    /// Monte Carlo draws for the fisher check.
    #[arg(long, default_value_t = 100_000)]
    n_mc: usize,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    /// Comma-separated subset of sp, mle, quasi.
    #[arg(long, value_delimiter = ',', default_value = "sp,mle")]
    estimators: Vec<String>,
    /// Override the scenario's sample size.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Convergence(String),
    Verification(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Convergence(_) => EXIT_NONCONVERGENCE,
            CliError::Verification(_) => EXIT_VERIFICATION,
        }
    }

    fn line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Input(m) => ("input", m),
            CliError::Convergence(m) => ("convergence", m),
            CliError::Verification(m) => ("verification", m),
        };
        format!("error[{kind}]: {}", msg.replace('\n', " "))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonConvergence { .. } | Error::TooManyFailures { .. } => CliError::Convergence(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

/// Runs the CLI with the process's stdout and stderr; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

/// [`run`] with explicit output streams.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return EXIT_OK;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let first = first.trim_start_matches("error: ");
            let _ = writeln!(err, "{}", CliError::Input(first.to_string()).line());
            return EXIT_INPUT;
        }
    };
    let (res, o, e) = with_threads(cli.threads, || {
        let mut o = Vec::new();
        let mut e = Vec::new();
        let res = dispatch(&cli, &mut o, &mut e);
        (res, o, e)
    });
    let _ = out.write_all(&o);
    let _ = err.write_all(&e);
    match res {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "{}", e.line());
            e.code()
        }
    }
}

#[cfg(feature = "parallel")]
fn with_threads<R: Send>(threads: Threads, f: impl FnOnce() -> R + Send) -> R {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Threads::Count(n) = threads {
        builder = builder.num_threads(n);
    }
    match builder.build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_threads<R: Send>(_threads: Threads, f: impl FnOnce() -> R + Send) -> R {
    f()
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(cli, a, out, err),
        Command::Verify(a) => cmd_verify(cli, a, out),
        Command::Simulate(a) => cmd_simulate(cli, a, out),
        Command::Scenarios => cmd_scenarios(out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Input(format!("cannot write output: {e}")))
}

// ---------------------------------------------------------------- fit

/// Numeric columns read from a CSV file with a header row.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn read(path: &Path) -> Result<Self, String> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        let names: Vec<String> = rdr
            .headers()
            .map_err(|e| format!("{}: {e}", path.display()))?
            .iter()
            .map(str::to_string)
            .collect();
        if names.is_empty() || names.iter().all(String::is_empty) {
            return Err(format!("{}: missing header row", path.display()));
        }
        let mut columns = vec![Vec::new(); names.len()];
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| format!("{}: {e}", path.display()))?;
            let line = r + 2;
            if rec.len() != names.len() {
                return Err(format!(
                    "{} line {line}: {} fields, header has {}",
                    path.display(),
                    rec.len(),
                    names.len()
                ));
            }
            for (j, field) in rec.iter().enumerate() {
                if field.is_empty() {
                    return Err(format!("{} line {line}: missing value in column '{}'", path.display(), names[j]));
                }
                let v: f64 = field.parse().map_err(|_| {
                    format!("{} line {line}: '{field}' in column '{}' is not a number", path.display(), names[j])
                })?;
                columns[j].push(v);
            }
        }
        Ok(Self { names, columns })
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|j| self.columns[j].as_slice())
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }
}

struct Design {
    x: DMatrix<f64>,
    y: Vec<f64>,
    names: Vec<String>,
}

fn design(data: &Dataset, a: &FitArgs) -> Result<Design, CliError> {
    let y = data
        .column(&a.response)
        .ok_or_else(|| CliError::Input(format!("response column '{}' not found", a.response)))?
        .to_vec();
    let covs: Vec<String> = match &a.covariates {
        Some(c) => c.iter().filter(|s| !s.is_empty()).cloned().collect(),
        None => data.names.iter().filter(|n| **n != a.response).cloned().collect(),
    };
    if covs.contains(&a.response) {
        return Err(CliError::Input(format!("response '{}' is also listed as a covariate", a.response)));
    }
    let mut names = Vec::new();
    let mut cols: Vec<&[f64]> = Vec::new();
    let ones = vec![1.0; data.rows()];
    if !a.no_intercept {
        names.push("(Intercept)".to_string());
        cols.push(&ones);
    }
    for c in &covs {
        let col = data
            .column(c)
            .ok_or_else(|| CliError::Input(format!("covariate column '{c}' not found")))?;
        names.push(c.clone());
        cols.push(col);
    }
    if cols.is_empty() {
        return Err(CliError::Input("no covariates and no intercept".into()));
    }
    let x = DMatrix::from_fn(data.rows(), cols.len(), |i, j| cols[j][i]);
    Ok(Design { x, y, names })
}

fn default_link(family: FamilyArg, y: &[f64], variance: &str) -> LinkFunction {
    let nonneg = y.iter().all(|&v| v >= 0.0) && y.iter().any(|&v| v > 0.0);
    match family {
        FamilyArg::Normal => LinkFunction::Identity,
        FamilyArg::Poisson | FamilyArg::Gamma | FamilyArg::Exponential => LinkFunction::Log,
        FamilyArg::Semiparametric if nonneg => LinkFunction::Log,
        FamilyArg::Quasi if nonneg && variance != "constant" && variance != "1" => LinkFunction::Log,
        _ => LinkFunction::Identity,
    }
}

#[derive(Serialize)]
struct Coefficient {
    name: String,
    estimate: f64,
    std_error: f64,
}

#[derive(Serialize)]
struct Nuisance {
    name: String,
    value: f64,
}

#[derive(Serialize)]
struct Reference {
    atoms: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    anchor_observation: usize,
}

#[derive(Serialize)]
struct FitReport {
    method: String,
    family: String,
    link: String,
    n: usize,
    q: usize,
    converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    stalled: Option<bool>,
    iterations: usize,
    loglik: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    deviance: Option<f64>,
    score_norm: f64,
    coefficients: Vec<Coefficient>,
    covariance_kind: String,
    covariance: Vec<Vec<f64>>,
    nuisance: Option<Nuisance>,
    /// Deviance per iteration for parametric fits, log-likelihood for
    /// semiparametric fits.
    trace_kind: String,
    trace: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference_distribution: Option<Reference>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn coefficients(names: &[String], beta: &DVector<f64>, se: &DVector<f64>) -> Vec<Coefficient> {
    names
        .iter()
        .zip(beta.iter().zip(se.iter()))
        .map(|(n, (b, s))| Coefficient {
            name: n.clone(),
            estimate: *b,
            std_error: *s,
        })
        .collect()
}

fn parametric_report(fit: &FitResult, family: &str, spec: &GlmSpec, names: &[String]) -> FitReport {
    FitReport {
        method: fit.method.clone(),
        family: family.to_string(),
        link: spec.link().name().to_string(),
        n: spec.n(),
        q: spec.q(),
        converged: fit.converged,
        stalled: None,
        iterations: fit.iterations,
        loglik: fit.loglik,
        deviance: Some(fit.deviance),
        score_norm: fit.score_norm,
        coefficients: coefficients(names, &fit.beta, &fit.std_errors()),
        covariance_kind: match fit.covariance_kind {
            CovarianceKind::InverseInformation => "inverse_information",
            CovarianceKind::Sandwich => "sandwich",
        }
        .to_string(),
        covariance: matrix_rows(&fit.covariance),
        nuisance: fit.nuisance.map(|(name, value)| Nuisance {
            name: name.to_string(),
            value,
        }),
        trace_kind: "deviance".into(),
        trace: fit.trace.clone(),
        reference_distribution: None,
    }
}

fn semipar_report(fit: &SemiparFitResult, spec: &GlmSpec, names: &[String]) -> FitReport {
    FitReport {
        method: "semiparametric_mle".into(),
        family: "semiparametric".into(),
        link: spec.link().name().to_string(),
        n: spec.n(),
        q: spec.q(),
        converged: fit.converged,
        stalled: Some(fit.stalled),
        iterations: fit.n_outer,
        loglik: Some(fit.loglik()),
        deviance: None,
        score_norm: fit.score_norm,
        coefficients: coefficients(names, &fit.beta, &fit.std_errors()),
        covariance_kind: "inverse_information".into(),
        covariance: matrix_rows(&fit.beta_cov),
        nuisance: None,
        trace_kind: "loglik".into(),
        trace: fit.loglik_trace.clone(),
        reference_distribution: Some(Reference {
            atoms: fit.f_hat.atoms().to_vec(),
            weights: fit.f_hat.weights().to_vec(),
            log_weights: fit.f_hat.log_weights().to_vec(),
            anchor_observation: fit.anchor_index,
        }),
    }
}

fn cmd_fit(cli: &Cli, a: &FitArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let data = Dataset::read(&a.data).map_err(CliError::Input)?;
    let Design { x, y, names } = design(&data, a)?;
    let link = match &a.link {
        Some(l) => l.parse::<LinkFunction>()?,
        None => default_link(a.family, &y, &a.variance),
    };
    let spec = GlmSpec::new(x, y, link)?;
    let mut popts = FitOptions::default();
    let mut sopts = SemiparOptions::default();
    if let Some(m) = a.max_iter {
        popts.max_iter = m;
        sopts.max_outer = m;
    }
    let report = match a.family {
        FamilyArg::Semiparametric => {
            let fit = fit_semiparametric(&spec, sopts)?;
            if fit.stalled && !cli.quiet {
                let _ = writeln!(
                    err,
                    "warning: log-likelihood stalled with score norm {:e}; the supremum is not attained",
                    fit.score_norm
                );
            }
            semipar_report(&fit, &spec, &names)
        }
        FamilyArg::Quasi => {
            let v = VarianceFunction::by_name(&a.variance)
                .ok_or_else(|| CliError::Input(format!("unknown variance function '{}'", a.variance)))?;
            let fit = fit_quasi(&spec, &v, popts)?;
            parametric_report(&fit, &format!("quasi({})", v.name()), &spec, &names)
        }
        fam => {
            let family = match fam {
                FamilyArg::Normal => ParametricFamily::Normal { sigma2: None },
                FamilyArg::Poisson => ParametricFamily::Poisson,
                FamilyArg::Gamma => ParametricFamily::Gamma { shape: None },
                _ => ParametricFamily::Exponential,
            };
            let fit = fit_mle(&spec, family, popts)?;
            parametric_report(&fit, family.name(), &spec, &names)
        }
    };
    let mut json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Input(format!("cannot serialize report: {e}")))?;
    json.push('\n');
    match &cli.out {
        Some(path) => {
            fs::write(path, &json).map_err(|e| io_err(path, e))?;
            if !cli.quiet {
                emit(out, &format!("wrote {}\n", path.display()))?;
            }
        }
        None => emit(out, &json)?,
    }
    Ok(())
}

// ------------------------------------------------------------- verify

fn cmd_verify(cli: &Cli, a: &VerifyArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let checks = a
        .checks
        .iter()
        .map(|c| c.parse::<Check>())
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(c) = a.corrupt_variance {
        if !(c.is_finite() && c > 0.0) {
            return Err(CliError::Input(format!("--corrupt-variance must be positive, got {c}")));
        }
    }
    let opts = VerifyOptions {
        configs: a.configs,
        tol: a.tol,
        corrupt_variance: a.corrupt_variance,
        n_mc: a.n_mc,
        seed: cli.seed,
        exec: Execution::Parallel,
    };
    let mut text = String::new();
    let mut failed = Vec::new();
    for check in checks {
        let report = run_check(check, &opts)?;
        if !report.passed() {
            failed.push(check.name());
        }
        text.push_str(&report.to_string());
    }
    if let Some(path) = &cli.out {
        fs::write(path, &text).map_err(|e| io_err(path, e))?;
    }
    if !cli.quiet {
        emit(out, &text)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("failed checks: {}", failed.join(", "))))
    }
}

// ----------------------------------------------------------- simulate

fn scenario_names() -> String {
    format!("{} (or exponential-n<N>, poisson-n<N>)", Scenario::BUILTIN.join(", "))
}

fn cmd_simulate(cli: &Cli, a: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut sc = Scenario::builtin(&a.scenario).ok_or_else(|| {
        CliError::Input(format!("unknown scenario '{}'; available: {}", a.scenario, scenario_names()))
    })?;
    if let Some(n) = a.n {
        sc = sc.with_n(n);
        if Scenario::builtin(&sc.name).is_none() {
            return Err(CliError::Input(format!("sample size {n} too small for this scenario")));
        }
    }
    if a.reps < 2 {
        return Err(CliError::Input(format!("--reps must be at least 2, got {}", a.reps)));
    }
    let estimators = a
        .estimators
        .iter()
        .map(|e| e.parse::<Estimator>())
        .collect::<Result<Vec<_>, _>>()?;
    let opts = SimOptions {
        estimators,
        exec: Execution::Parallel,
    };
    let report = run_scenario(&sc, a.reps, cli.seed, &opts)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let csv_path = dir.join(format!("{}.csv", report.scenario));
    let txt_path = dir.join(format!("{}.txt", report.scenario));
    let table = report.to_table();
    fs::write(&csv_path, report.to_csv()).map_err(|e| io_err(&csv_path, e))?;
    fs::write(&txt_path, &table).map_err(|e| io_err(&txt_path, e))?;
    if !cli.quiet {
        emit(out, &table)?;
    }
    Ok(())
}

fn cmd_scenarios(out: &mut dyn Write) -> Result<(), CliError> {
    let mut text = String::new();
    for name in Scenario::BUILTIN {
        let sc = Scenario::builtin(name).expect("built-in scenario");
        let beta: Vec<String> = sc.true_beta.iter().map(|b| b.to_string()).collect();
        text.push_str(&format!(
            "{:<18} {} responses, {} link, n = {}, beta = ({})\n",
            sc.name,
            sc.data_label,
            sc.link,
            sc.n,
            beta.join(", ")
        ));
    }
    emit(out, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(std::iter::once("tiltglm").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_one_with_single_line() {
        let (code, _, err) = run_capture(&["fit", "--family", "poisson"]);
        assert_eq!(code, EXIT_INPUT);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error[input]: "));
    }

    #[test]
    fn unknown_scenario_lists_names() {
        let (code, _, err) = run_capture(&["simulate", "--scenario", "nope"]);
        assert_eq!(code, EXIT_INPUT);
        assert!(err.contains("exponential-n33") && err.contains("poisson-n44"), "{err}");
    }

    #[test]
    fn scenarios_lists_builtins() {
        let (code, out, _) = run_capture(&["scenarios"]);
        assert_eq!(code, EXIT_OK);
        assert_eq!(out.lines().count(), 3);
    }

    #[test]
    fn threads_flag_parses() {
        assert!(matches!("auto".parse::<Threads>(), Ok(Threads::Auto)));
        assert!(matches!("3".parse::<Threads>(), Ok(Threads::Count(3))));
        assert!("0".parse::<Threads>().is_err());
    }
}
