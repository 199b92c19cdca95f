//! Probabilistic population-form modelling of frequency response functions.
//!
//! This crate builds a generative statistical model (a "form") for the FRFs
//! of a population of nominally-identical structures and uses it for
//! evidence-based novelty detection:
//!
//! - [`modal`]: accelerance FRF synthesis from modal parameters, population
//!   simulation, noisy replication, and simulated damage.
//! - [`spectral`]: H1 FRF estimation and coherence from measured force and
//!   response time histories.
//! - [`gp`]: Gaussian process regression with a squared-exponential kernel
//!   and a modal-FRF mean function.
//! - [`omgp`]: an overlapping mixture of Gaussian processes trained by
//!   variational EM, with predictive and evidence equations.
//! - [`novelty`]: negative-log-evidence novelty scoring, bootstrap
//!   thresholds, and damage sweeps.
//! - [`io`], [`config`], [`manifest`], [`cli`]: file formats, experiment
//!   configuration, run manifests, and the command-line pipeline.
//!
//! The `examples/` directory holds one runnable walkthrough per capability;
//! start with `simulate_population` and `fit_omgp`.

pub mod cli;
pub mod config;
pub mod error;
pub mod gp;
pub mod io;
pub mod manifest;
pub mod modal;
pub mod novelty;
pub mod omgp;
pub mod opt;
pub mod spectral;

pub use error::{Error, Result};
