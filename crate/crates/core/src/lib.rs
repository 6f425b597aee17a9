//! Generalized linear models written in exponential-tilt form.
//!
//! Every GLM is indexed by a regression vector `beta` and a reference
//! distribution `F`. Each response distribution is an exponential tilt of
//! `F` whose mean equals `mu(x^T beta)`. This crate provides:
//!
//! * [`tilt`]: discrete reference distributions and the tilt solver,
//! * [`model`]: links, data specs, model states, log-likelihood and score,
//! * [`parametric`]: oracle maximum likelihood and quasi-likelihood fits,
//! * [`semipar`]: joint maximum likelihood over `(beta, F)`,
//! * [`orthogonality`]: numerical checks of score/nuisance orthogonality,
//! * [`sim`]: seeded Monte Carlo efficiency comparisons,
//! * [`verify`]: randomized self-checks behind the `verify` command,
//! * [`cli`]: the command-line front end.
//!
//! With the default `parallel` feature, per-observation tilt solves,
//! Monte Carlo chunks and simulation replicates run on rayon. Without it
//! every loop runs sequentially and produces bitwise-identical output.

pub mod cli;
pub mod error;
pub mod model;
pub mod orthogonality;
pub mod par;
pub mod parametric;
pub mod semipar;
pub mod sim;
pub mod tilt;
pub mod verify;

pub use error::{Error, Result};
pub use model::{fisher_beta, loglik, score_beta, GlmSpec, LinkFunction, ModelState};
pub use par::Execution;
pub use parametric::{fit_mle, fit_quasi, FitOptions, FitResult, ParametricFamily, VarianceFunction};
pub use semipar::{fit_semiparametric, profile_loglik_beta, SemiparFitResult, SemiparOptions};

pub use tilt::{normalizer, solve_tilt, tilted_moments, ReferenceDistribution, TiltSolution};
