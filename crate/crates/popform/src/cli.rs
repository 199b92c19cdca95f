//! Command-line pipeline: simulate, h1, fit, threshold, novelty, posterior,
//! sweep.
//!
//! Every command is a pure function of its input files, the effective
//! configuration, and the seeds in it, so reruns reproduce numeric outputs
//! byte for byte. Each run writes a `manifest.json` listing every produced
//! file per stage.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::gp::{self, GpModel, HyperBounds, Hyperparameters, Part, TrainingSet};
use crate::io;
use crate::manifest::RunManifest;
use crate::modal::{self, FrfRecord, ModalModel};
use crate::novelty::{
    bootstrap_threshold_with_scorer, damage_sweep, msd, nmse, FormPair, NoveltyVerdict,
};
use crate::omgp::{self, OmgpModel};
use crate::spectral::{self, SpectralConfig, WindowKind};

#[derive(Parser, Debug)]
#[command(
    name = "popform",
    version,
    about = "Population-form FRF modelling and novelty detection"
)]
pub struct Cli {
    /// Experiment configuration file (JSON); defaults apply where absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the stage being run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Bounds the within-stage parallelism (restarts, replica scoring).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitMode {
    /// One GP per labelled member, real and imaginary parts separately.
    SupervisedMixture,
    /// One pooled GP over all members (the complete-pooling baseline).
    SingleGp,
    /// Unsupervised overlapping mixture with the restart protocol.
    Omgp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WindowArg {
    Hanning,
    Rectangular,
}

impl From<WindowArg> for WindowKind {
    fn from(w: WindowArg) -> WindowKind {
        match w {
            WindowArg::Hanning => WindowKind::Hanning,
            WindowArg::Rectangular => WindowKind::Rectangular,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize the configured population: one FRF CSV and one modal-model
    /// JSON per member.
    Simulate,
    /// Estimate an FRF (and coherence) from force/response time histories
    /// via windowed block averaging.
    H1 {
        #[arg(long)]
        force: PathBuf,
        #[arg(long)]
        response: PathBuf,
        #[arg(long, default_value_t = 16384)]
        block_size: usize,
        #[arg(long, default_value_t = 20)]
        blocks: usize,
        #[arg(long, value_enum, default_value_t = WindowArg::Hanning)]
        window: WindowArg,
        #[arg(long, default_value_t = 0.0)]
        overlap: f64,
    },
    /// Fit a form to member FRF files (replicated with noise and subsampled
    /// per the configuration).
    Fit {
        #[arg(long, value_enum)]
        mode: FitMode,
        /// Member FRF CSV files; one per structure, labelled by file order.
        #[arg(required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        restarts: Option<usize>,
        /// Number of mixture components (OMGP); defaults to the config value.
        #[arg(long)]
        components: Option<usize>,
        /// Hyperparameter bounds JSON overriding the configured bounds.
        #[arg(long)]
        bounds_file: Option<PathBuf>,
        /// Previously fitted real-part OMGP model JSON; skips the real fit
        /// and chains the imaginary fit from its components.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Bootstrap the normal-condition novelty threshold from member FRFs.
    Threshold {
        #[arg(long)]
        real_model: PathBuf,
        #[arg(long)]
        imag_model: PathBuf,
        #[arg(required = true)]
        data: Vec<PathBuf>,
    },
    /// Score test FRFs against a fitted form; one verdict row per file.
    Novelty {
        #[arg(long)]
        real_model: PathBuf,
        #[arg(long)]
        imag_model: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        threshold_file: Option<PathBuf>,
        /// Test FRF CSV files (may be empty: emits the header only).
        data: Vec<PathBuf>,
    },
    /// Per-component posterior curves plus a sampled magnitude envelope.
    Posterior {
        #[arg(long)]
        real_model: PathBuf,
        #[arg(long)]
        imag_model: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Damage sweep: incremental frequency reductions per member, replicated
    /// with noise and scored against the form.
    Sweep {
        #[arg(long)]
        real_model: PathBuf,
        #[arg(long)]
        imag_model: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        threshold_file: Option<PathBuf>,
        /// Member modal-model JSON files (the undamaged baselines).
        #[arg(required = true)]
        member_models: Vec<PathBuf>,
    },
}

/// Loads the config file (or defaults) and applies the global overrides that
/// make sense for the given command.
fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        match &cli.command {
            Command::Simulate => config.population.rng_seed = seed,
            Command::Fit { .. } => {
                config.gp.seed = seed;
                config.omgp.seed = seed;
            }
            Command::Threshold { .. } => config.novelty.threshold.rng_seed = seed,
            Command::Sweep { .. } => config.novelty.sweep.seed = seed,
            Command::Posterior { .. } => config.posterior.seed = seed,
            Command::H1 { .. } | Command::Novelty { .. } => {}
        }
    }
    Ok(config)
}

/// Entry point used by the binary.
pub fn run(cli: Cli) -> Result<()> {
    let config = effective_config(&cli)?;
    let out_dir = config.output_dir.clone();
    match &cli.command {
        Command::Simulate => {
            run_simulate(&config, &out_dir)?;
        }
        Command::H1 {
            force,
            response,
            block_size,
            blocks,
            window,
            overlap,
        } => {
            let spectral_config = SpectralConfig {
                block_size: *block_size,
                n_blocks: *blocks,
                window: (*window).into(),
                overlap_fraction: *overlap,
            };
            run_h1(&config, force, response, &spectral_config, &out_dir)?;
        }
        Command::Fit {
            mode,
            data,
            restarts,
            components,
            bounds_file,
            init_from,
        } => {
            let mut config = config;
            if let Some(r) = restarts {
                config.gp.restarts = *r;
                config.omgp.restarts = *r;
            }
            if let Some(k) = components {
                config.omgp.components = *k;
            }
            if let Some(path) = bounds_file {
                config.gp.bounds = io::read_json::<HyperBounds>(path)?;
                config.gp.bounds.validate()?;
            }
            run_fit(&config, *mode, data, init_from.as_deref(), &out_dir)?;
        }
        Command::Threshold {
            real_model,
            imag_model,
            data,
        } => {
            run_threshold(&config, real_model, imag_model, data, &out_dir)?;
        }
        Command::Novelty {
            real_model,
            imag_model,
            threshold,
            threshold_file,
            data,
        } => {
            let threshold = resolve_threshold(*threshold, threshold_file.as_deref())?;
            run_novelty(&config, real_model, imag_model, threshold, data, &out_dir)?;
        }
        Command::Posterior {
            real_model,
            imag_model,
            samples,
        } => {
            let mut config = config;
            if let Some(n) = samples {
                config.posterior.n_samples = *n;
            }
            run_posterior(&config, real_model, imag_model, &out_dir)?;
        }
        Command::Sweep {
            real_model,
            imag_model,
            threshold,
            threshold_file,
            member_models,
        } => {
            let threshold = resolve_threshold(*threshold, threshold_file.as_deref())?;
            run_sweep(&config, real_model, imag_model, member_models, threshold, &out_dir)?;
        }
    }
    Ok(())
}

fn resolve_threshold(value: Option<f64>, file: Option<&Path>) -> Result<f64> {
    match (value, file) {
        (Some(v), _) => Ok(v),
        (None, Some(path)) => Ok(io::read_threshold_json(path)?.threshold),
        (None, None) => Err(Error::InvalidInput(
            "provide --threshold or --threshold-file".into(),
        )),
    }
}

// --- Data preparation -------------------------------------------------

/// Replicates each member FRF `replicas` times with peak-scaled noise; one
/// derived seed per member, drawn in member order.
pub fn replicate_population(
    member_frfs: &[FrfRecord],
    replicas: usize,
    noise_fraction: f64,
    seed: u64,
) -> Result<Vec<Vec<FrfRecord>>> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    member_frfs
        .iter()
        .map(|frf| {
            let sub: u64 = master.random();
            modal::replicate_with_noise(frf, replicas, noise_fraction, sub)
        })
        .collect()
}

fn part_pairs(replicas: &[FrfRecord], part: Part) -> Vec<(f64, f64)> {
    let mut pairs = Vec::new();
    for replica in replicas {
        for (f, v) in replica.frequencies_hz.iter().zip(&replica.values) {
            pairs.push((*f, part.extract(*v)));
        }
    }
    pairs
}

/// Draws `n_points` (frequency, value) pairs without replacement from one
/// member's replicated data.
pub fn sample_member_training(
    replicated: &[Vec<FrfRecord>],
    part: Part,
    n_points: usize,
    seed: u64,
) -> Result<Vec<TrainingSet>> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    replicated
        .iter()
        .map(|member| {
            let sub: u64 = master.random();
            let mut rng = ChaCha8Rng::seed_from_u64(sub);
            let pairs = part_pairs(member, part);
            if n_points > pairs.len() {
                return Err(Error::InvalidInput(format!(
                    "cannot draw {n_points} points from {} available",
                    pairs.len()
                )));
            }
            let chosen = rand::seq::index::sample(&mut rng, pairs.len(), n_points);
            let x = chosen.iter().map(|i| pairs[i].0).collect();
            let y = chosen.iter().map(|i| pairs[i].1).collect();
            TrainingSet::new(x, y, part)
        })
        .collect()
}

/// Draws `n_points` pairs without replacement from the pooled replicated
/// data of all members; returns the generating member index per point.
pub fn sample_pooled_training(
    replicated: &[Vec<FrfRecord>],
    part: Part,
    n_points: usize,
    seed: u64,
) -> Result<(TrainingSet, Vec<usize>)> {
    let mut pairs = Vec::new();
    let mut owners = Vec::new();
    for (member, replicas) in replicated.iter().enumerate() {
        let member_pairs = part_pairs(replicas, part);
        owners.extend(std::iter::repeat(member).take(member_pairs.len()));
        pairs.extend(member_pairs);
    }
    if n_points > pairs.len() {
        return Err(Error::InvalidInput(format!(
            "cannot draw {n_points} points from {} available",
            pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, pairs.len(), n_points);
    let x = chosen.iter().map(|i| pairs[i].0).collect();
    let y = chosen.iter().map(|i| pairs[i].1).collect();
    let labels = chosen.iter().map(|i| owners[i]).collect();
    Ok((TrainingSet::new(x, y, part)?, labels))
}

/// A mean-function starting point inside the bounds, shaped like the
/// population base model.
pub fn clamped_init(
    base: &ModalModel,
    part: Part,
    bounds: &HyperBounds,
    data_scale: f64,
) -> Result<Hyperparameters> {
    let clamp = |v: f64, (lo, hi): (f64, f64)| v.clamp(lo, hi);
    let modes = base
        .modes
        .iter()
        .map(|m| {
            crate::modal::Mode::new(
                clamp(m.natural_frequency_hz, bounds.natural_frequency_hz),
                clamp(m.damping_ratio, bounds.damping_ratio),
                clamp(m.residue, bounds.residue),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Hyperparameters {
        length_scale: clamp(1.0, bounds.length_scale),
        process_std: clamp(0.2 * data_scale.max(1e-6), bounds.process_std),
        noise_std: clamp(0.05 * data_scale.max(1e-6), bounds.noise_std),
        mean_modes: ModalModel::new(modes, base.dof_pair)?,
        part,
    })
}

fn data_scale(sets: &[&TrainingSet]) -> f64 {
    sets.iter()
        .flat_map(|s| s.y.iter())
        .fold(0.0f64, |acc, y| acc.max(y.abs()))
}

// --- Fit report --------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartReport {
    /// Final NLML (GP modes) or final `L_bc` (OMGP).
    pub objective: f64,
    pub converged: bool,
    /// Held-out normalized mean squared error, percent.
    pub nmse: f64,
    /// Held-out mean squared residual over predictive variance.
    pub msd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub mode: String,
    pub real: PartReport,
    pub imag: PartReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound_trace_real: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound_trace_imag: Option<Vec<f64>>,
}

enum FittedPart<'a> {
    PerMember(&'a [GpModel]),
    Pooled(&'a GpModel),
    Mixture(&'a OmgpModel),
}

/// Pools held-out replicas of every member into one prediction/observation
/// pair per part and evaluates NMSE and MSD over the concatenation.
fn holdout_metrics(
    fitted: &FittedPart,
    holdout: &[Vec<FrfRecord>],
    grid: &[f64],
    part: Part,
) -> Result<(f64, f64)> {
    let mut prediction = Vec::new();
    let mut variance = Vec::new();
    let mut observed = Vec::new();
    // Per-member posterior curves are reused across that member's replicas.
    let mut posterior_cache: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; holdout.len()];
    let pooled_posterior = match fitted {
        FittedPart::Pooled(model) => {
            let p = model.predict(grid);
            Some((p.mean.iter().cloned().collect::<Vec<f64>>(), p.variance_diag()))
        }
        _ => None,
    };
    let mixture_posterior = match fitted {
        FittedPart::Mixture(model) => Some(model.predict(grid)?),
        _ => None,
    };

    for (member, replicas) in holdout.iter().enumerate() {
        for replica in replicas {
            let y: Vec<f64> = replica.values.iter().map(|v| part.extract(*v)).collect();
            let (mu, var): (Vec<f64>, Vec<f64>) = match fitted {
                FittedPart::PerMember(models) => {
                    if posterior_cache[member].is_none() {
                        let p = models[member].predict(grid);
                        posterior_cache[member] =
                            Some((p.mean.iter().cloned().collect(), p.variance_diag()));
                    }
                    posterior_cache[member].clone().unwrap()
                }
                FittedPart::Pooled(_) => pooled_posterior.clone().unwrap(),
                FittedPart::Mixture(_) => {
                    let posterior = mixture_posterior.as_ref().unwrap();
                    let k = posterior.map_component(&y)?;
                    (
                        posterior.means[k].iter().cloned().collect(),
                        (0..grid.len()).map(|i| posterior.covariances[k][(i, i)]).collect(),
                    )
                }
            };
            prediction.extend(mu);
            variance.extend(var);
            observed.extend(y);
        }
    }
    Ok((
        nmse(&prediction, &observed)?,
        msd(&prediction, &variance, &observed)?,
    ))
}

// --- Commands -----------------------------------------------------------

pub fn run_simulate(config: &ExperimentConfig, out_dir: &Path) -> Result<RunManifest> {
    config.validate()?;
    let mut manifest = RunManifest::new("simulate", &config.canonical_json());
    let grid = config.band.grid()?;
    manifest.stage("simulate", || {
        let members = modal::synthesize_population(&config.population, &grid)?;
        let mut outputs = Vec::new();
        for (index, (model, frf)) in members.iter().enumerate() {
            let frf_path = out_dir.join(format!("member{}.csv", index + 1));
            io::write_frf_csv(&frf_path, frf)?;
            let model_path = out_dir.join(format!("member{}_model.json", index + 1));
            io::write_modal_model_json(&model_path, model)?;
            outputs.push(frf_path);
            outputs.push(model_path);
        }
        Ok(((), outputs))
    })?;
    manifest.write_atomic(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn run_h1(
    config: &ExperimentConfig,
    force_path: &Path,
    response_path: &Path,
    spectral_config: &SpectralConfig,
    out_dir: &Path,
) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("h1", &config.canonical_json());
    manifest.stage("h1", || {
        let force = io::read_time_series_csv(force_path, "force")?;
        let response = io::read_time_series_csv(response_path, "acceleration")?;
        let frf = spectral::h1_estimate(&force, &response, spectral_config)?;
        let coherence = spectral::coherence(&force, &response, spectral_config)?;
        let frf_path = out_dir.join("frf.csv");
        let coh_path = out_dir.join("coherence.csv");
        io::write_frf_csv(&frf_path, &frf)?;
        io::write_coherence_csv(&coh_path, &coherence)?;
        Ok(((), vec![frf_path, coh_path]))
    })?;
    manifest.write_atomic(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn run_fit(
    config: &ExperimentConfig,
    mode: FitMode,
    data: &[PathBuf],
    init_from: Option<&Path>,
    out_dir: &Path,
) -> Result<RunManifest> {
    config.validate()?;
    let mut manifest = RunManifest::new("fit", &config.canonical_json());
    let grid = config.band.grid()?;
    let member_frfs: Vec<FrfRecord> = data.iter().map(|p| io::read_frf_csv(p)).collect::<Result<_>>()?;
    if member_frfs.is_empty() {
        return Err(Error::InvalidInput("no member FRF files given".into()));
    }

    let replicated = manifest.stage("replicate", || {
        let r = replicate_population(
            &member_frfs,
            config.training.replicas_per_member,
            config.training.noise_fraction,
            config.training.sampling_seed,
        )?;
        Ok((r, vec![]))
    })?;
    let holdout = replicate_population(
        &member_frfs,
        config.training.holdout_replicas_per_member,
        config.training.noise_fraction,
        config.training.holdout_seed,
    )?;

    let bounds = config.gp.bounds;
    let mut sampling_master = ChaCha8Rng::seed_from_u64(config.training.sampling_seed ^ 0x5eed);
    let real_sample_seed: u64 = sampling_master.random();
    let imag_sample_seed: u64 = sampling_master.random();

    let (report, outputs) = match mode {
        FitMode::SupervisedMixture => {
            let training_real = sample_member_training(
                &replicated,
                Part::Real,
                config.training.mixture_points_per_member,
                real_sample_seed,
            )?;
            let training_imag = sample_member_training(
                &replicated,
                Part::Imag,
                config.training.mixture_points_per_member,
                imag_sample_seed,
            )?;
            let scale = data_scale(&training_real.iter().collect::<Vec<_>>());
            let fit_part = |sets: &[TrainingSet], part: Part| -> Result<Vec<GpModel>> {
                sets.iter()
                    .enumerate()
                    .map(|(i, set)| {
                        let init = clamped_init(&config.population.base_model, part, &bounds, scale)?;
                        gp::fit(
                            set,
                            &bounds,
                            &init,
                            config.gp.restarts,
                            config.gp.seed.wrapping_add(i as u64),
                        )
                    })
                    .collect()
            };
            let real_models = manifest.stage("fit-real", || Ok((fit_part(&training_real, Part::Real)?, vec![])))?;
            let imag_models = manifest.stage("fit-imag", || Ok((fit_part(&training_imag, Part::Imag)?, vec![])))?;

            let mut outputs = Vec::new();
            for (i, (re, im)) in real_models.iter().zip(&imag_models).enumerate() {
                let re_path = out_dir.join(format!("member{}_gp_real.json", i + 1));
                let im_path = out_dir.join(format!("member{}_gp_imag.json", i + 1));
                io::write_gp_model_json(&re_path, re, &bounds)?;
                io::write_gp_model_json(&im_path, im, &bounds)?;
                outputs.push(re_path);
                outputs.push(im_path);
            }

            let (nmse_re, msd_re) =
                holdout_metrics(&FittedPart::PerMember(&real_models), &holdout, &grid, Part::Real)?;
            let (nmse_im, msd_im) =
                holdout_metrics(&FittedPart::PerMember(&imag_models), &holdout, &grid, Part::Imag)?;
            let report = FitReport {
                mode: "supervised-mixture".into(),
                real: PartReport {
                    objective: real_models.iter().map(|m| m.nlml).sum(),
                    converged: real_models.iter().all(|m| m.converged),
                    nmse: nmse_re,
                    msd: msd_re,
                },
                imag: PartReport {
                    objective: imag_models.iter().map(|m| m.nlml).sum(),
                    converged: imag_models.iter().all(|m| m.converged),
                    nmse: nmse_im,
                    msd: msd_im,
                },
                bound_trace_real: None,
                bound_trace_imag: None,
            };
            (report, outputs)
        }
        FitMode::SingleGp => {
            let (training_real, _) = sample_pooled_training(
                &replicated,
                Part::Real,
                config.training.pooled_points,
                real_sample_seed,
            )?;
            let (training_imag, _) = sample_pooled_training(
                &replicated,
                Part::Imag,
                config.training.pooled_points,
                imag_sample_seed,
            )?;
            let scale = data_scale(&[&training_real, &training_imag]);
            let init_re = clamped_init(&config.population.base_model, Part::Real, &bounds, scale)?;
            let init_im = clamped_init(&config.population.base_model, Part::Imag, &bounds, scale)?;
            let real_model = manifest.stage("fit-real", || {
                Ok((gp::fit(&training_real, &bounds, &init_re, config.gp.restarts, config.gp.seed)?, vec![]))
            })?;
            let imag_model = manifest.stage("fit-imag", || {
                Ok((
                    gp::fit(
                        &training_imag,
                        &bounds,
                        &init_im,
                        config.gp.restarts,
                        config.gp.seed.wrapping_add(1),
                    )?,
                    vec![],
                ))
            })?;

            let re_path = out_dir.join("single_gp_real.json");
            let im_path = out_dir.join("single_gp_imag.json");
            io::write_gp_model_json(&re_path, &real_model, &bounds)?;
            io::write_gp_model_json(&im_path, &imag_model, &bounds)?;

            let (nmse_re, msd_re) =
                holdout_metrics(&FittedPart::Pooled(&real_model), &holdout, &grid, Part::Real)?;
            let (nmse_im, msd_im) =
                holdout_metrics(&FittedPart::Pooled(&imag_model), &holdout, &grid, Part::Imag)?;
            let report = FitReport {
                mode: "single-gp".into(),
                real: PartReport {
                    objective: real_model.nlml,
                    converged: real_model.converged,
                    nmse: nmse_re,
                    msd: msd_re,
                },
                imag: PartReport {
                    objective: imag_model.nlml,
                    converged: imag_model.converged,
                    nmse: nmse_im,
                    msd: msd_im,
                },
                bound_trace_real: None,
                bound_trace_imag: None,
            };
            (report, vec![re_path, im_path])
        }
        FitMode::Omgp => {
            let (training_real, _) = sample_pooled_training(
                &replicated,
                Part::Real,
                config.training.pooled_points,
                real_sample_seed,
            )?;
            let (training_imag, _) = sample_pooled_training(
                &replicated,
                Part::Imag,
                config.training.pooled_points,
                imag_sample_seed,
            )?;
            let mut seeds = ChaCha8Rng::seed_from_u64(config.omgp.seed);
            let real_seed: u64 = seeds.random();
            let imag_seed: u64 = seeds.random();

            let real_model = match init_from {
                Some(path) => manifest.stage("load-real", || {
                    let model = io::read_omgp_model_json(path)?;
                    if model.training.part != Part::Real {
                        return Err(Error::InvalidInput(
                            "--init-from expects a real-part OMGP model".into(),
                        ));
                    }
                    Ok((model, vec![]))
                })?,
                None => manifest.stage("fit-real", || {
                    Ok((
                        omgp::fit(
                            &training_real,
                            config.omgp.components,
                            &bounds,
                            config.omgp.restarts,
                            real_seed,
                            None,
                            &config.omgp.options,
                        )?,
                        vec![],
                    ))
                })?,
            };
            // The optimized real-part components initialize the imaginary
            // fit; restarts then differ only in their responsibility noise.
            let imag_model = manifest.stage("fit-imag", || {
                Ok((
                    omgp::fit(
                        &training_imag,
                        config.omgp.components,
                        &bounds,
                        config.omgp.restarts,
                        imag_seed,
                        Some(&real_model.components),
                        &config.omgp.options,
                    )?,
                    vec![],
                ))
            })?;

            let re_path = out_dir.join("omgp_real.json");
            let im_path = out_dir.join("omgp_imag.json");
            io::write_omgp_model_json(&re_path, &real_model)?;
            io::write_omgp_model_json(&im_path, &imag_model)?;

            let (nmse_re, msd_re) =
                holdout_metrics(&FittedPart::Mixture(&real_model), &holdout, &grid, Part::Real)?;
            let (nmse_im, msd_im) =
                holdout_metrics(&FittedPart::Mixture(&imag_model), &holdout, &grid, Part::Imag)?;
            let report = FitReport {
                mode: "omgp".into(),
                real: PartReport {
                    objective: *real_model.bound_trace.last().unwrap_or(&f64::NAN),
                    converged: real_model.converged,
                    nmse: nmse_re,
                    msd: msd_re,
                },
                imag: PartReport {
                    objective: *imag_model.bound_trace.last().unwrap_or(&f64::NAN),
                    converged: imag_model.converged,
                    nmse: nmse_im,
                    msd: msd_im,
                },
                bound_trace_real: Some(real_model.bound_trace.clone()),
                bound_trace_imag: Some(imag_model.bound_trace.clone()),
            };
            (report, vec![re_path, im_path])
        }
    };

    let report_path = out_dir.join("fit_report.json");
    io::write_json(&report_path, &report)?;
    let mut all_outputs = outputs;
    all_outputs.push(report_path);
    manifest.stage("write-models", || Ok(((), all_outputs)))?;
    manifest.write_atomic(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Rebuilds the form from its two model files, with the band and grid from
/// the configuration.
pub fn load_form(
    config: &ExperimentConfig,
    real_model: &Path,
    imag_model: &Path,
) -> Result<FormPair> {
    let real = io::read_omgp_model_json(real_model)?;
    let imag = io::read_omgp_model_json(imag_model)?;
    FormPair::new(
        real,
        imag,
        (config.band.f_lo, config.band.f_hi),
        config.band.grid()?,
    )
}

pub fn run_threshold(
    config: &ExperimentConfig,
    real_model: &Path,
    imag_model: &Path,
    data: &[PathBuf],
    out_dir: &Path,
) -> Result<RunManifest> {
    config.validate()?;
    let mut manifest = RunManifest::new("threshold", &config.canonical_json());
    let form = load_form(config, real_model, imag_model)?;
    let report = manifest.stage("bootstrap", || {
        let member_frfs: Vec<FrfRecord> =
            data.iter().map(|p| io::read_frf_csv(p)).collect::<Result<_>>()?;
        if member_frfs.is_empty() {
            return Err(Error::InvalidInput("no normal-condition FRF files given".into()));
        }
        let normal_pool: Vec<FrfRecord> = replicate_population(
            &member_frfs,
            config.novelty.normal_replicas_per_member,
            config.training.noise_fraction,
            config.novelty.normal_seed,
        )?
        .into_iter()
        .flatten()
        .collect();
        let scorer = form.scorer()?;
        let report =
            bootstrap_threshold_with_scorer(&scorer, &normal_pool, &config.novelty.threshold)?;
        Ok((report, vec![]))
    })?;
    let path = out_dir.join("threshold.json");
    io::write_threshold_json(&path, &report)?;
    manifest.stage("write-threshold", || Ok(((), vec![path.clone()])))?;
    manifest.write_atomic(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn run_novelty(
    config: &ExperimentConfig,
    real_model: &Path,
    imag_model: &Path,
    threshold: f64,
    data: &[PathBuf],
    out_dir: &Path,
) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("novelty", &config.canonical_json());
    let form = load_form(config, real_model, imag_model)?;
    let scorer = form.scorer()?;
    let verdicts = manifest.stage("score", || {
        let mut rows: Vec<(String, NoveltyVerdict)> = Vec::new();
        for path in data {
            let frf = io::read_frf_csv(path)?;
            let verdict = scorer.verdict(&frf, threshold)?;
            rows.push((path.display().to_string(), verdict));
        }
        Ok((rows, vec![]))
    })?;
    let path = out_dir.join("verdicts.csv");
    io::write_verdicts_csv(&path, &verdicts)?;
    manifest.stage("write-verdicts", || Ok(((), vec![path.clone()])))?;
    manifest.write_atomic(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn run_sweep(
    config: &ExperimentConfig,
    real_model: &Path,
    imag_model: &Path,
    member_models: &[PathBuf],
    threshold: f64,
    out_dir: &Path,
) -> Result<RunManifest> {
    config.validate()?;
    let mut manifest = RunManifest::new("sweep", &config.canonical_json());
    let form = load_form(config, real_model, imag_model)?;
    let rows = manifest.stage("sweep", || {
        let bases: Vec<ModalModel> = member_models
            .iter()
            .map(|p| io::read_modal_model_json(p))
            .collect::<Result<_>>()?;
        let rows = damage_sweep(
            &form,
            &bases,
            &config.novelty.sweep.reductions,
            config.novelty.sweep.replicas,
            config.novelty.sweep.noise_fraction,
            config.novelty.sweep.seed,
        )?;
        Ok((rows, vec![]))
    })?;
    let path = out_dir.join("sweep.csv");
    io::write_sweep_csv(&path, &rows, threshold)?;
    manifest.stage("write-sweep", || Ok(((), vec![path.clone()])))?;
    manifest.write_atomic(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn run_posterior(
    config: &ExperimentConfig,
    real_model: &Path,
    imag_model: &Path,
    out_dir: &Path,
) -> Result<RunManifest> {
    config.validate()?;
    let mut manifest = RunManifest::new("posterior", &config.canonical_json());
    let form = load_form(config, real_model, imag_model)?;
    let grid = form.grid.clone();
    let outputs = manifest.stage("posterior", || {
        let real = form.real_model.predict(&grid)?;
        let imag = form.imag_model.predict(&grid)?;
        let collect = |p: &crate::omgp::ComponentPosterior| {
            let means: Vec<Vec<f64>> =
                p.means.iter().map(|m| m.iter().cloned().collect()).collect();
            let vars: Vec<Vec<f64>> = p
                .covariances
                .iter()
                .map(|c| (0..c.nrows()).map(|i| c[(i, i)]).collect())
                .collect();
            (means, vars)
        };
        let (re_means, re_vars) = collect(&real);
        let (im_means, im_vars) = collect(&imag);
        let re_path = out_dir.join("posterior_real.csv");
        let im_path = out_dir.join("posterior_imag.csv");
        io::write_posterior_csv(&re_path, &grid, &re_means, &re_vars)?;
        io::write_posterior_csv(&im_path, &grid, &im_means, &im_vars)?;

        // Magnitude envelope: draw a component (uniformly, matching the
        // test-weight prior), then one joint sample of the real and
        // imaginary posteriors, and track per-bin statistics of |re + i im|.
        let k = real.means.len();
        let m = grid.len();
        let chols_re: Vec<_> = real
            .covariances
            .iter()
            .map(|c| {
                let scale = (0..m).map(|i| c[(i, i)]).fold(0.0, f64::max).max(1e-300);
                crate::gp::cholesky_with_jitter(c, scale).map(|(l, _)| l)
            })
            .collect::<Result<_>>()?;
        let chols_im: Vec<_> = imag
            .covariances
            .iter()
            .map(|c| {
                let scale = (0..m).map(|i| c[(i, i)]).fold(0.0, f64::max).max(1e-300);
                crate::gp::cholesky_with_jitter(c, scale).map(|(l, _)| l)
            })
            .collect::<Result<_>>()?;

        let mut mag_mean = vec![0.0; m];
        let mut mag_min = vec![f64::INFINITY; m];
        let mut mag_max = vec![f64::NEG_INFINITY; m];
        let mut rng = ChaCha8Rng::seed_from_u64(config.posterior.seed);
        let n_samples = config.posterior.n_samples;
        for _ in 0..n_samples {
            let comp = rng.random_range(0..k);
            let z1 = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
            let z2 = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
            let re = &real.means[comp] + &chols_re[comp] * z1;
            let im = &imag.means[comp] + &chols_im[comp] * z2;
            for i in 0..m {
                let mag = (re[i] * re[i] + im[i] * im[i]).sqrt();
                mag_mean[i] += mag;
                mag_min[i] = mag_min[i].min(mag);
                mag_max[i] = mag_max[i].max(mag);
            }
        }
        for v in mag_mean.iter_mut() {
            *v /= n_samples as f64;
        }
        let env_path = out_dir.join("magnitude_envelope.csv");
        io::write_envelope_csv(&env_path, &grid, &mag_mean, &mag_min, &mag_max)?;
        Ok(((), vec![re_path, im_path, env_path]))
    })?;
    let _ = outputs;
    manifest.write_atomic(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
