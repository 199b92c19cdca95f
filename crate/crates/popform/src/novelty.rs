//! Evidence-based novelty detection against a fitted form.
//!
//! The form is a pair of mixtures (real part, imaginary part) over the same
//! band. A test FRF is scored by the sum of the two negative log evidences,
//! evaluated functionally: the whole band-limited vector at once, with the
//! full predictive covariance per component. Scores above a bootstrap
//! threshold flag the test structure as outlying.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{cholesky_with_jitter, Part};
use crate::modal::{replicate_with_noise, FrfRecord, ModalModel};
use crate::omgp::{log_sum_exp, ComponentPosterior, OmgpModel};

/// The population form: one mixture per FRF part plus the band and the
/// canonical scoring grid inside it.
#[derive(Debug, Clone)]
pub struct FormPair {
    pub real_model: OmgpModel,
    pub imag_model: OmgpModel,
    /// `(f_lo, f_hi)`, Hz.
    pub band: (f64, f64),
    /// Scoring grid inside the band; test FRFs are resampled onto it.
    pub grid: Vec<f64>,
}

impl FormPair {
    pub fn new(
        real_model: OmgpModel,
        imag_model: OmgpModel,
        band: (f64, f64),
        grid: Vec<f64>,
    ) -> Result<FormPair> {
        if real_model.training.part != Part::Real || imag_model.training.part != Part::Imag {
            return Err(Error::InvalidInput(
                "form needs a real-part model and an imaginary-part model, in that order".into(),
            ));
        }
        if real_model.k() != imag_model.k() {
            return Err(Error::Mismatch(format!(
                "real model has {} components, imaginary model {}",
                real_model.k(),
                imag_model.k()
            )));
        }
        if grid.len() < 2 {
            return Err(Error::InvalidInput("scoring grid needs at least 2 points".into()));
        }
        for pair in grid.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::InvalidInput("scoring grid not strictly increasing".into()));
            }
        }
        let (lo, hi) = band;
        if !(lo < hi) {
            return Err(Error::InvalidInput(format!("band [{lo}, {hi}] is empty")));
        }
        if grid[0] < lo - 1e-9 || grid[grid.len() - 1] > hi + 1e-9 {
            return Err(Error::BandMismatch(format!(
                "grid [{}, {}] exceeds the band [{lo}, {hi}]",
                grid[0],
                grid[grid.len() - 1]
            )));
        }
        Ok(FormPair {
            real_model,
            imag_model,
            band,
            grid,
        })
    }

    /// Precomputes the per-part component posteriors on the scoring grid so
    /// that many test FRFs can be scored cheaply.
    pub fn scorer(&self) -> Result<FormScorer> {
        let real = PreparedMixture::new(&self.real_model.predict(&self.grid)?)?;
        let imag = PreparedMixture::new(&self.imag_model.predict(&self.grid)?)?;
        Ok(FormScorer {
            grid: self.grid.clone(),
            real,
            imag,
        })
    }
}

/// One mixture predictive, factored once: per-component means, Cholesky
/// factors of the full covariances, and log weights.
struct PreparedMixture {
    means: Vec<DVector<f64>>,
    chol_lowers: Vec<DMatrix<f64>>,
    log_det_halves: Vec<f64>,
    log_weights: Vec<f64>,
}

impl PreparedMixture {
    fn new(posterior: &ComponentPosterior) -> Result<PreparedMixture> {
        let mut chol_lowers = Vec::with_capacity(posterior.k());
        let mut log_det_halves = Vec::with_capacity(posterior.k());
        for cov in &posterior.covariances {
            let scale = (0..cov.nrows()).map(|i| cov[(i, i)]).fold(0.0, f64::max).max(1e-300);
            let (l, _) = cholesky_with_jitter(cov, scale)?;
            log_det_halves.push((0..l.nrows()).map(|i| l[(i, i)].ln()).sum());
            chol_lowers.push(l);
        }
        Ok(PreparedMixture {
            means: posterior.means.clone(),
            chol_lowers,
            log_det_halves,
            log_weights: posterior.weights.iter().map(|w| w.ln()).collect(),
        })
    }

    fn neg_log_evidence(&self, y: &DVector<f64>) -> f64 {
        let m = y.len() as f64;
        let log_norm = 0.5 * m * (2.0 * std::f64::consts::PI).ln();
        let terms: Vec<f64> = (0..self.means.len())
            .map(|k| {
                let r = y - &self.means[k];
                let v = self.chol_lowers[k]
                    .solve_lower_triangular(&r)
                    .expect("triangular solve on a successful Cholesky factor");
                self.log_weights[k] - log_norm - self.log_det_halves[k] - 0.5 * v.norm_squared()
            })
            .collect();
        -log_sum_exp(&terms)
    }
}

/// Per-part and combined negative log evidence of one test FRF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoveltyScore {
    pub real: f64,
    pub imag: f64,
}

impl NoveltyScore {
    pub fn total(&self) -> f64 {
        self.real + self.imag
    }
}

/// Combined score, threshold, and decision for one test FRF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoveltyVerdict {
    pub score: f64,
    pub threshold: f64,
    pub outlying: bool,
    pub per_part: (f64, f64),
}

/// Reusable scoring engine for one form.
pub struct FormScorer {
    grid: Vec<f64>,
    real: PreparedMixture,
    imag: PreparedMixture,
}

impl FormScorer {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Resamples the test FRF onto the scoring grid (linear interpolation;
    /// extrapolation refused) and returns both parts as vectors.
    fn resample(&self, frf: &FrfRecord) -> Result<(DVector<f64>, DVector<f64>)> {
        let fs = &frf.frequencies_hz;
        let n = fs.len();
        if n == 0 {
            return Err(Error::InvalidInput("test FRF is empty".into()));
        }
        let tol = 1e-9;
        if fs[0] > self.grid[0] + tol || fs[n - 1] < self.grid[self.grid.len() - 1] - tol {
            return Err(Error::BandMismatch(format!(
                "test grid [{}, {}] does not cover the scoring grid [{}, {}]",
                fs[0],
                fs[n - 1],
                self.grid[0],
                self.grid[self.grid.len() - 1]
            )));
        }
        let same_grid = n == self.grid.len()
            && fs.iter().zip(&self.grid).all(|(a, b)| (a - b).abs() <= tol);
        if same_grid {
            return Ok((
                DVector::from_vec(frf.real()),
                DVector::from_vec(frf.imag()),
            ));
        }
        let mut re = DVector::zeros(self.grid.len());
        let mut im = DVector::zeros(self.grid.len());
        let mut cursor = 0usize;
        for (j, &g) in self.grid.iter().enumerate() {
            while cursor + 2 < n && fs[cursor + 1] <= g {
                cursor += 1;
            }
            let (f0, f1) = (fs[cursor], fs[cursor + 1]);
            let t = ((g - f0) / (f1 - f0)).clamp(0.0, 1.0);
            let v = frf.values[cursor] * (1.0 - t) + frf.values[cursor + 1] * t;
            re[j] = v.re;
            im[j] = v.im;
        }
        Ok((re, im))
    }

    /// Negative log evidence of each part under its mixture.
    pub fn score(&self, frf: &FrfRecord) -> Result<NoveltyScore> {
        let (re, im) = self.resample(frf)?;
        Ok(NoveltyScore {
            real: self.real.neg_log_evidence(&re),
            imag: self.imag.neg_log_evidence(&im),
        })
    }

    pub fn verdict(&self, frf: &FrfRecord, threshold: f64) -> Result<NoveltyVerdict> {
        let score = self.score(frf)?;
        Ok(NoveltyVerdict {
            score: score.total(),
            threshold,
            outlying: score.total() > threshold,
            per_part: (score.real, score.imag),
        })
    }
}

/// Combined novelty score (sum of per-part negative log evidences) of a test
/// FRF against a form. Builds a scorer internally; use [`FormPair::scorer`]
/// directly when scoring many records.
pub fn novelty_score(form: &FormPair, test_frf: &FrfRecord) -> Result<f64> {
    Ok(form.scorer()?.score(test_frf)?.total())
}

/// How the critical value is pulled out of the pooled score distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdMethod {
    /// Empirical percentile of the pooled scores (the default).
    Percentile,
    /// Gaussian approximation `mean + multiplier * std`; 2.58 reproduces the
    /// two-sided 99% normal value used as a one-sided cut.
    GaussianSigma { multiplier: f64 },
}

/// Bootstrap configuration for the normal-condition threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdConfig {
    pub n_samples_per_trial: usize,
    pub n_trials: usize,
    /// Percentile of the pooled scores, in (0, 100).
    pub percentile: f64,
    pub method: ThresholdMethod,
    pub rng_seed: u64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            n_samples_per_trial: 1000,
            n_trials: 100,
            percentile: 99.0,
            method: ThresholdMethod::Percentile,
            rng_seed: 0,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples_per_trial < 1 || self.n_trials < 1 {
            return Err(Error::InvalidInput("bootstrap counts must be >= 1".into()));
        }
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::InvalidInput(format!(
                "percentile must lie in (0, 100), got {}",
                self.percentile
            )));
        }
        Ok(())
    }
}

/// Pooled-score summary written alongside the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub threshold: f64,
    pub pooled_count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub percentile: f64,
    pub method: ThresholdMethod,
    pub rng_seed: u64,
}

/// Linear-interpolation percentile of a sample (the order-statistic
/// convention used throughout: `h = (n-1) p/100`).
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("percentile of an empty sample".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidInput(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return Ok(sorted[sorted.len() - 1]);
    }
    let frac = h - lo as f64;
    Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
}

/// Bootstrap threshold: over `n_trials` trials, draw `n_samples_per_trial`
/// records (with replacement) from the normal-condition data, score each
/// draw, pool all scores, and take the configured percentile (or the
/// Gaussian-sigma value) of the pooled distribution. Deterministic per seed.
pub fn bootstrap_threshold(
    form: &FormPair,
    normal_data: &[FrfRecord],
    cfg: &ThresholdConfig,
) -> Result<ThresholdReport> {
    let scorer = form.scorer()?;
    bootstrap_threshold_with_scorer(&scorer, normal_data, cfg)
}

pub fn bootstrap_threshold_with_scorer(
    scorer: &FormScorer,
    normal_data: &[FrfRecord],
    cfg: &ThresholdConfig,
) -> Result<ThresholdReport> {
    cfg.validate()?;
    if normal_data.is_empty() {
        return Err(Error::InvalidInput("no normal-condition data to bootstrap from".into()));
    }
    // Each record's score is deterministic, so score every record once and
    // resample the cached values.
    let record_scores: Vec<f64> = normal_data
        .par_iter()
        .map(|frf| scorer.score(frf).map(|s| s.total()))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let pooled_count = cfg.n_trials * cfg.n_samples_per_trial;
    let mut pooled = Vec::with_capacity(pooled_count);
    for _ in 0..pooled_count {
        let idx = rng.random_range(0..record_scores.len());
        pooled.push(record_scores[idx]);
    }

    let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
    let var = pooled.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / pooled.len() as f64;
    let std = var.sqrt();
    let threshold = match cfg.method {
        ThresholdMethod::Percentile => percentile(&pooled, cfg.percentile)?,
        ThresholdMethod::GaussianSigma { multiplier } => mean + multiplier * std,
    };
    Ok(ThresholdReport {
        threshold,
        pooled_count,
        mean,
        std,
        min: pooled.iter().cloned().fold(f64::INFINITY, f64::min),
        max: pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        percentile: cfg.percentile,
        method: cfg.method,
        rng_seed: cfg.rng_seed,
    })
}

/// Percentage-scaled normalized mean squared error between a prediction and
/// a test vector, with the population-variance convention (divide by `M`).
pub fn nmse(prediction_mean: &[f64], y_star: &[f64]) -> Result<f64> {
    let m = y_star.len();
    if prediction_mean.len() != m {
        return Err(Error::Mismatch(format!(
            "prediction has {} points, test vector {m}",
            prediction_mean.len()
        )));
    }
    if m < 2 {
        return Err(Error::InvalidInput("NMSE needs at least 2 points".into()));
    }
    let mean_y = y_star.iter().sum::<f64>() / m as f64;
    let var_pop = y_star.iter().map(|y| (y - mean_y) * (y - mean_y)).sum::<f64>() / m as f64;
    if var_pop == 0.0 {
        return Err(Error::InvalidInput("test vector has zero variance".into()));
    }
    let sse: f64 = prediction_mean
        .iter()
        .zip(y_star)
        .map(|(mu, y)| (mu - y) * (mu - y))
        .sum();
    Ok(100.0 / (m as f64 * var_pop) * sse)
}

/// Mean squared residual normalized by the predictive variance, pointwise.
pub fn msd(prediction_mean: &[f64], prediction_var_diag: &[f64], y_star: &[f64]) -> Result<f64> {
    let m = y_star.len();
    if prediction_mean.len() != m || prediction_var_diag.len() != m {
        return Err(Error::Mismatch("MSD inputs must share one length".into()));
    }
    if m == 0 {
        return Err(Error::InvalidInput("MSD of empty vectors".into()));
    }
    let mut acc = 0.0;
    for i in 0..m {
        let var = prediction_var_diag[i];
        if !(var > 0.0) {
            return Err(Error::InvalidInput(format!(
                "nonpositive predictive variance {var} at index {i}"
            )));
        }
        let r = prediction_mean[i] - y_star[i];
        acc += r * r / var;
    }
    Ok(acc / m as f64)
}

/// One scored replica of one damaged member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub member: usize,
    pub reduction: f64,
    pub replica: usize,
    pub score_real: f64,
    pub score_imag: f64,
    pub score_total: f64,
}

/// Damage sweep: for each member and frequency reduction, synthesize the
/// damaged FRF on the scoring grid, replicate it with peak-scaled noise, and
/// score every replica. Rows come back ordered (member, reduction, replica);
/// deterministic per seed.
pub fn damage_sweep(
    form: &FormPair,
    base_models: &[ModalModel],
    reductions: &[f64],
    n_replicas: usize,
    noise_fraction: f64,
    rng_seed: u64,
) -> Result<Vec<SweepRow>> {
    let scorer = form.scorer()?;
    let mut master = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut rows = Vec::with_capacity(base_models.len() * reductions.len() * n_replicas);
    for (member, base) in base_models.iter().enumerate() {
        for &reduction in reductions {
            let replica_seed: u64 = master.random();
            let damaged = base.apply_damage(reduction)?;
            let frf = damaged.frf(scorer.grid())?;
            let replicas = replicate_with_noise(&frf, n_replicas, noise_fraction, replica_seed)?;
            let scores: Vec<NoveltyScore> = replicas
                .par_iter()
                .map(|r| scorer.score(r))
                .collect::<Result<_>>()?;
            for (replica, score) in scores.into_iter().enumerate() {
                rows.push(SweepRow {
                    member,
                    reduction,
                    replica,
                    score_real: score.real,
                    score_imag: score.imag,
                    score_total: score.total(),
                });
            }
        }
    }
    Ok(rows)
}
