//! Declarative experiment configuration.
//!
//! One JSON file drives the whole pipeline; every stage seed is explicit so
//! reruns are byte-identical. The defaults encode the reference protocol:
//! a 48-56 Hz band at 0.0488 Hz spacing, a four-member population with a
//! ~2.5 Hz natural-frequency spread, 20 noisy replicas per member at 5% of
//! the per-part peak, 300 training points per member for mixtures and 600
//! for pooled fits, 10 restarts, and a 99th-percentile bootstrap threshold
//! over 1000-sample trials.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::HyperBounds;
use crate::modal::{band_grid, ModalModel, PopulationSpec};
use crate::novelty::ThresholdConfig;
use crate::omgp::OmgpOptions;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandConfig {
    pub f_lo: f64,
    pub f_hi: f64,
    pub grid_step: f64,
}

impl Default for BandConfig {
    fn default() -> Self {
        BandConfig {
            f_lo: 48.0,
            f_hi: 56.0,
            grid_step: 0.0488,
        }
    }
}

impl BandConfig {
    pub fn grid(&self) -> Result<Vec<f64>> {
        band_grid(self.f_lo, self.f_hi, self.grid_step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Training points drawn per member for the supervised mixture.
    pub mixture_points_per_member: usize,
    /// Training points drawn from the pooled data for single-GP and OMGP fits.
    pub pooled_points: usize,
    /// Noisy copies made of each member FRF before sampling.
    pub replicas_per_member: usize,
    /// Noise standard deviation as a fraction of each part's absolute peak.
    pub noise_fraction: f64,
    /// Seed for replication noise and training-point sampling.
    pub sampling_seed: u64,
    /// Fresh replicas per member held out for the fit report metrics.
    pub holdout_replicas_per_member: usize,
    /// Seed for the held-out replicas.
    pub holdout_seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            mixture_points_per_member: 300,
            pooled_points: 600,
            replicas_per_member: 20,
            noise_fraction: 0.05,
            sampling_seed: 202,
            holdout_replicas_per_member: 4,
            holdout_seed: 212,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    pub bounds: HyperBounds,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            bounds: HyperBounds::default(),
            restarts: 10,
            seed: 303,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OmgpConfig {
    /// Number of mixture components (one per structure in the population).
    pub components: usize,
    pub restarts: usize,
    pub seed: u64,
    pub options: OmgpOptions,
}

impl Default for OmgpConfig {
    fn default() -> Self {
        OmgpConfig {
            components: 4,
            restarts: 10,
            seed: 404,
            options: OmgpOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Frequency reduction fractions; the default is 0.5% steps up to 3.5%.
    pub reductions: Vec<f64>,
    pub replicas: usize,
    pub noise_fraction: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            reductions: (1..=7).map(|i| i as f64 * 0.005).collect(),
            replicas: 1000,
            noise_fraction: 0.05,
            seed: 606,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoveltyConfig {
    pub threshold: ThresholdConfig,
    pub sweep: SweepConfig,
    /// Replicas per member used as the normal-condition pool for the
    /// bootstrap threshold.
    pub normal_replicas_per_member: usize,
    pub normal_seed: u64,
}

impl Default for NoveltyConfig {
    fn default() -> Self {
        NoveltyConfig {
            threshold: ThresholdConfig {
                rng_seed: 505,
                ..ThresholdConfig::default()
            },
            sweep: SweepConfig::default(),
            normal_replicas_per_member: 50,
            normal_seed: 515,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PosteriorConfig {
    /// Joint samples drawn from the real/imaginary posteriors for the
    /// magnitude envelope.
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        PosteriorConfig {
            n_samples: 10_000,
            seed: 707,
        }
    }
}

/// The whole experiment in one declarative document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub band: BandConfig,
    pub population: PopulationSpec,
    pub training: TrainingConfig,
    pub gp: GpConfig,
    pub omgp: OmgpConfig,
    pub novelty: NoveltyConfig,
    pub posterior: PosteriorConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            band: BandConfig::default(),
            population: PopulationSpec {
                n_members: 4,
                base_model: ModalModel::single_mode(52.0, 0.01, 1.0)
                    .expect("default base model is valid"),
                frequency_jitter: 0.025,
                residue_jitter: 0.05,
                damping_jitter: 0.05,
                rng_seed: 101,
            },
            training: TrainingConfig::default(),
            gp: GpConfig::default(),
            omgp: OmgpConfig::default(),
            novelty: NoveltyConfig::default(),
            posterior: PosteriorConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let config: ExperimentConfig = crate::io::read_json(path)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.band.grid()?;
        self.population.validate()?;
        self.gp.bounds.validate()?;
        self.novelty.threshold.validate()?;
        if self.training.mixture_points_per_member < 2 || self.training.pooled_points < 2 {
            return Err(Error::InvalidInput("training point counts must be >= 2".into()));
        }
        if self.training.replicas_per_member < 1 {
            return Err(Error::InvalidInput("need at least one replica per member".into()));
        }
        if self.omgp.components < 1 {
            return Err(Error::InvalidInput("OMGP needs at least one component".into()));
        }
        if self.gp.restarts < 1 || self.omgp.restarts < 1 {
            return Err(Error::InvalidInput("restart counts must be >= 1".into()));
        }
        for r in &self.novelty.sweep.reductions {
            if !(0.0..1.0).contains(r) {
                return Err(Error::InvalidInput(format!(
                    "sweep reduction {r} outside [0, 1)"
                )));
            }
        }
        if self.posterior.n_samples < 1 {
            return Err(Error::InvalidInput("posterior sampling needs n_samples >= 1".into()));
        }
        Ok(())
    }

    /// Canonical JSON used for hashing into the run manifest.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
