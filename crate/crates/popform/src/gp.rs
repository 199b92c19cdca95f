//! Single-output Gaussian process regression with a squared-exponential
//! kernel and a modal-FRF mean function.
//!
//! One GP models one part (real or imaginary) of an FRF over frequency. The
//! mean function is the corresponding part of the modal accelerance sum, so
//! the mean-function hyperparameters are physical modal parameters (natural
//! frequency, damping ratio, residue) alongside the kernel's length scale,
//! process standard deviation, and the observation noise. Hyperparameters
//! are learnt by bounded multi-start simplex search on the negative log
//! marginal likelihood.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modal::{ModalModel, Mode};
use crate::opt::{minimize_box, OptOptions};

/// Which part of the complex FRF a data set or model refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Real,
    Imag,
}

impl Part {
    pub fn extract(&self, value: num_complex::Complex64) -> f64 {
        match self {
            Part::Real => value.re,
            Part::Imag => value.im,
        }
    }
}

/// Full hyperparameter set of one GP: kernel scales, noise, and the modal
/// parameters of the mean function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Kernel length scale, Hz.
    pub length_scale: f64,
    /// Kernel process standard deviation (output units).
    pub process_std: f64,
    /// Observation noise standard deviation (output units).
    pub noise_std: f64,
    /// Modal parameters of the mean function.
    pub mean_modes: ModalModel,
    /// Part selector for the mean function.
    pub part: Part,
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale > 0.0) {
            return Err(Error::InvalidInput(format!(
                "length scale must be positive, got {}",
                self.length_scale
            )));
        }
        if !(self.process_std > 0.0) {
            return Err(Error::InvalidInput(format!(
                "process std must be positive, got {}",
                self.process_std
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "noise std must be >= 0, got {}",
                self.noise_std
            )));
        }
        self.mean_modes.validate()
    }

    /// Flat layout used by the optimizer: `[l, sigma_f, sigma]` followed by
    /// `(f_n, zeta, A)` per mode.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = vec![self.length_scale, self.process_std, self.noise_std];
        for mode in &self.mean_modes.modes {
            v.push(mode.natural_frequency_hz);
            v.push(mode.damping_ratio);
            v.push(mode.residue);
        }
        v
    }

    /// Rebuilds hyperparameters from the flat layout, keeping the part
    /// selector and dof pair of `template`.
    pub fn from_vector(template: &Hyperparameters, v: &[f64]) -> Result<Hyperparameters> {
        let n_modes = template.mean_modes.modes.len();
        if v.len() != 3 + 3 * n_modes {
            return Err(Error::Mismatch(format!(
                "hyperparameter vector has {} entries, expected {}",
                v.len(),
                3 + 3 * n_modes
            )));
        }
        let mut modes = Vec::with_capacity(n_modes);
        for k in 0..n_modes {
            modes.push(Mode::new(v[3 + 3 * k], v[4 + 3 * k], v[5 + 3 * k])?);
        }
        let hyper = Hyperparameters {
            length_scale: v[0],
            process_std: v[1],
            noise_std: v[2],
            mean_modes: ModalModel::new(modes, template.mean_modes.dof_pair)?,
            part: template.part,
        };
        hyper.validate()?;
        Ok(hyper)
    }
}

/// Box bounds for every hyperparameter kind. Modal bounds apply to each mode.
/// The residue interval must not straddle zero: the sign of the resonance is
/// assumed known from the data, not inferred.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperBounds {
    pub length_scale: (f64, f64),
    pub process_std: (f64, f64),
    pub noise_std: (f64, f64),
    pub natural_frequency_hz: (f64, f64),
    pub damping_ratio: (f64, f64),
    pub residue: (f64, f64),
}

impl Default for HyperBounds {
    /// Generous defaults for band-limited accelerance data around 50 Hz with
    /// O(10..100) peak magnitudes; override per data set as needed.
    fn default() -> Self {
        HyperBounds {
            length_scale: (0.01, 20.0),
            process_std: (1e-3, 500.0),
            noise_std: (1e-6, 100.0),
            natural_frequency_hz: (40.0, 60.0),
            damping_ratio: (5e-4, 0.2),
            residue: (1e-3, 100.0),
        }
    }
}

impl HyperBounds {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("length_scale", self.length_scale),
            ("process_std", self.process_std),
            ("noise_std", self.noise_std),
            ("natural_frequency_hz", self.natural_frequency_hz),
            ("damping_ratio", self.damping_ratio),
            ("residue", self.residue),
        ];
        for (name, (lo, hi)) in named {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "{name} bounds must be finite with lower < upper, got ({lo}, {hi})"
                )));
            }
        }
        if self.length_scale.0 <= 0.0
            || self.process_std.0 <= 0.0
            || self.noise_std.0 < 0.0
            || self.natural_frequency_hz.0 <= 0.0
        {
            return Err(Error::InvalidInput("scale bounds must be positive".into()));
        }
        if self.damping_ratio.0 <= 0.0 || self.damping_ratio.1 >= 1.0 {
            return Err(Error::InvalidInput(
                "damping ratio bounds must lie inside (0, 1)".into(),
            ));
        }
        if self.residue.0 <= 0.0 && self.residue.1 >= 0.0 {
            return Err(Error::InvalidInput(
                "residue bounds must not straddle zero; fix the resonance sign first".into(),
            ));
        }
        Ok(())
    }

    /// Flat `(lower, upper)` pairs matching [`Hyperparameters::to_vector`].
    pub fn to_vector(&self, n_modes: usize) -> Vec<(f64, f64)> {
        let mut v = vec![self.length_scale, self.process_std, self.noise_std];
        for _ in 0..n_modes {
            v.push(self.natural_frequency_hz);
            v.push(self.damping_ratio);
            v.push(self.residue);
        }
        v
    }

    pub fn contains(&self, hyper: &Hyperparameters) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        inside(hyper.length_scale, self.length_scale)
            && inside(hyper.process_std, self.process_std)
            && inside(hyper.noise_std, self.noise_std)
            && hyper.mean_modes.modes.iter().all(|m| {
                inside(m.natural_frequency_hz, self.natural_frequency_hz)
                    && inside(m.damping_ratio, self.damping_ratio)
                    && inside(m.residue, self.residue)
            })
    }

    /// Draws a random starting point for one optimizer restart. The draws
    /// are restricted to data-informed windows (clamped into the bounds):
    /// length scales a fraction of the input span, process and noise scales
    /// tied to the output spread, natural frequencies inside the data range,
    /// and residues sized so the implied resonance peak has the data's
    /// magnitude. The bounds themselves stay as wide as configured; only the
    /// starting points are reasonable.
    pub fn sample_start(
        &self,
        template: &Hyperparameters,
        data: &TrainingSet,
        rng: &mut impl Rng,
    ) -> Result<Hyperparameters> {
        let uniform = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| {
            let u: f64 = rng.random();
            lo + u * (hi - lo)
        };
        let clamp = |v: f64, (lo, hi): (f64, f64)| v.clamp(lo, hi);

        let x_lo = data.x.iter().cloned().fold(f64::INFINITY, f64::min);
        let x_hi = data.x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (x_hi - x_lo).max(1e-6);
        let mean_y = data.y.iter().sum::<f64>() / data.len() as f64;
        let y_std = (data.y.iter().map(|y| (y - mean_y) * (y - mean_y)).sum::<f64>()
            / data.len() as f64)
            .sqrt()
            .max(1e-9);
        let y_abs_max = data.y.iter().fold(0.0f64, |acc, y| acc.max(y.abs())).max(1e-9);

        let n_modes = template.mean_modes.modes.len();
        let f_window = (
            x_lo.max(self.natural_frequency_hz.0),
            x_hi.min(self.natural_frequency_hz.1),
        );
        let f_window = if f_window.0 < f_window.1 {
            f_window
        } else {
            self.natural_frequency_hz
        };
        let mut freqs: Vec<f64> = (0..n_modes)
            .map(|_| uniform(rng, f_window.0, f_window.1))
            .collect();
        freqs.sort_by(f64::total_cmp);

        let zeta_window = (
            self.damping_ratio.0.max(1e-3),
            self.damping_ratio.1.min(0.05),
        );
        let zeta_window = if zeta_window.0 < zeta_window.1 {
            zeta_window
        } else {
            self.damping_ratio
        };

        let mut modes = Vec::with_capacity(n_modes);
        for f in freqs {
            let zeta = {
                let u: f64 = rng.random();
                (zeta_window.0.ln() + u * (zeta_window.1.ln() - zeta_window.0.ln())).exp()
            };
            // |H| at resonance is A/(2 zeta), so size the residue to put the
            // implied peak near the observed magnitude.
            let residue_raw = 2.0 * zeta * y_abs_max * uniform(rng, 0.3, 1.5);
            let residue = if self.residue.0 >= 0.0 {
                clamp(residue_raw, self.residue)
            } else {
                clamp(-residue_raw, self.residue)
            };
            modes.push(Mode::new(clamp(f, self.natural_frequency_hz), zeta, residue)?);
        }
        Ok(Hyperparameters {
            length_scale: clamp(uniform(rng, span / 50.0, span / 4.0), self.length_scale),
            process_std: clamp(y_std * uniform(rng, 0.2, 2.0), self.process_std),
            noise_std: clamp(y_std * uniform(rng, 0.02, 0.5), self.noise_std),
            mean_modes: ModalModel::new(modes, template.mean_modes.dof_pair)?,
            part: template.part,
        })
    }
}

/// Scalar observations of one FRF part over frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    /// Frequencies, Hz (not necessarily sorted).
    pub x: Vec<f64>,
    /// Observed FRF part values.
    pub y: Vec<f64>,
    pub part: Part,
}

impl TrainingSet {
    pub fn new(x: Vec<f64>, y: Vec<f64>, part: Part) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Mismatch(format!(
                "{} inputs but {} outputs",
                x.len(),
                y.len()
            )));
        }
        if x.len() < 2 {
            return Err(Error::InvalidInput("training set needs at least 2 points".into()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("training data contains non-finite values".into()));
        }
        Ok(TrainingSet { x, y, part })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Squared-exponential covariance between two frequencies.
pub fn sq_exp_kernel(x1: f64, x2: f64, hyper: &Hyperparameters) -> f64 {
    let d = x1 - x2;
    hyper.process_std * hyper.process_std
        * (-d * d / (2.0 * hyper.length_scale * hyper.length_scale)).exp()
}

/// Mean-function values: the selected part of the modal accelerance sum.
pub fn mean_function(hyper: &Hyperparameters, x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&f| hyper.part.extract(hyper.mean_modes.accelerance_at(f)))
        .collect()
}

pub(crate) fn kernel_matrix(x: &[f64], hyper: &Hyperparameters) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| sq_exp_kernel(x[i], x[j], hyper))
}

pub(crate) fn cross_kernel_matrix(
    x_rows: &[f64],
    x_cols: &[f64],
    hyper: &Hyperparameters,
) -> DMatrix<f64> {
    DMatrix::from_fn(x_rows.len(), x_cols.len(), |i, j| {
        sq_exp_kernel(x_rows[i], x_cols[j], hyper)
    })
}

/// Jitter ladder shared by every factorization in the crate: fractions of
/// the process variance added to the diagonal, escalating on failure.
pub(crate) const JITTER_LADDER: [f64; 7] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Cholesky-factors `m + jitter*scale*I`, escalating jitter on failure.
/// Returns the lower factor and the jitter actually used (absolute units).
pub(crate) fn cholesky_with_jitter(m: &DMatrix<f64>, scale: f64) -> Result<(DMatrix<f64>, f64)> {
    for &fraction in &JITTER_LADDER {
        let jitter = fraction * scale;
        let mut attempt = m.clone();
        for i in 0..attempt.nrows() {
            attempt[(i, i)] += jitter;
        }
        if let Some(chol) = nalgebra::Cholesky::new(attempt) {
            return Ok((chol.unpack(), jitter));
        }
    }
    Err(Error::Factorization {
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] * scale,
    })
}

fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b)
        .expect("triangular solve on a successful Cholesky factor")
}

fn solve_spd(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let w = solve_lower(l, b);
    l.tr_solve_lower_triangular(&w)
        .expect("triangular solve on a successful Cholesky factor")
}

/// A fitted GP: hyperparameters, training data, and the cached lower factor
/// of `K_xx + R` used by every downstream solve.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub hyper: Hyperparameters,
    pub training: TrainingSet,
    /// Negative log marginal likelihood at `hyper`.
    pub nlml: f64,
    /// False when the optimizer hit its evaluation cap before converging;
    /// the model is still the best point found.
    pub converged: bool,
    /// Diagonal jitter (absolute units) that the factorization needed.
    pub jitter: f64,
    chol_lower: DMatrix<f64>,
    /// `(K_xx + R)^-1 (y - m)`.
    alpha: DVector<f64>,
}

/// Predictive distribution over a query grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl Posterior {
    pub fn variance_diag(&self) -> Vec<f64> {
        (0..self.mean.len()).map(|i| self.covariance[(i, i)]).collect()
    }
}

fn factor_training(
    hyper: &Hyperparameters,
    data: &TrainingSet,
) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
    let mut k = kernel_matrix(&data.x, hyper);
    let noise_var = hyper.noise_std * hyper.noise_std;
    for i in 0..k.nrows() {
        k[(i, i)] += noise_var;
    }
    let (l, jitter) = cholesky_with_jitter(&k, hyper.process_std * hyper.process_std)?;
    let m = DVector::from_vec(mean_function(hyper, &data.x));
    let y = DVector::from_vec(data.y.clone());
    let alpha = solve_spd(&l, &(y - m));
    Ok((l, alpha, jitter))
}

/// Negative log marginal likelihood of the data under the GP prior,
/// `N/2 log 2pi + sum log L_ii + 0.5 ||L^-1 (y - m)||^2`.
pub fn nlml(hyper: &Hyperparameters, data: &TrainingSet) -> Result<f64> {
    hyper.validate()?;
    let mut k = kernel_matrix(&data.x, hyper);
    let noise_var = hyper.noise_std * hyper.noise_std;
    for i in 0..k.nrows() {
        k[(i, i)] += noise_var;
    }
    let (l, _) = cholesky_with_jitter(&k, hyper.process_std * hyper.process_std)?;
    let m = DVector::from_vec(mean_function(hyper, &data.x));
    let y = DVector::from_vec(data.y.clone());
    let v = solve_lower(&l, &(y - m));
    let n = data.len() as f64;
    let log_det_half: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum();
    Ok(0.5 * n * (2.0 * std::f64::consts::PI).ln() + log_det_half + 0.5 * v.norm_squared())
}

impl GpModel {
    /// Builds a model at fixed hyperparameters (no optimization).
    pub fn at(hyper: Hyperparameters, training: TrainingSet) -> Result<GpModel> {
        hyper.validate()?;
        let value = nlml(&hyper, &training)?;
        let (chol_lower, alpha, jitter) = factor_training(&hyper, &training)?;
        Ok(GpModel {
            hyper,
            training,
            nlml: value,
            converged: true,
            jitter,
            chol_lower,
            alpha,
        })
    }

    /// Predictive mean and full covariance (including observation noise) on
    /// the query grid.
    pub fn predict(&self, x_star: &[f64]) -> Posterior {
        let m_star = DVector::from_vec(mean_function(&self.hyper, x_star));
        let k_cross = cross_kernel_matrix(&self.training.x, x_star, &self.hyper); // N x M
        let mean = &m_star + k_cross.transpose() * &self.alpha;

        let w = self
            .chol_lower
            .solve_lower_triangular(&k_cross)
            .expect("triangular solve on a successful Cholesky factor");
        let mut covariance = cross_kernel_matrix(x_star, x_star, &self.hyper) - w.transpose() * w;
        let noise_var = self.hyper.noise_std * self.hyper.noise_std;
        for i in 0..covariance.nrows() {
            covariance[(i, i)] += noise_var;
        }
        Posterior { mean, covariance }
    }

    /// Max-abs discrepancy between `L L^T` and the matrix it factors.
    pub fn factorization_residual(&self) -> f64 {
        let n = self.training.len();
        let mut target = kernel_matrix(&self.training.x, &self.hyper);
        let noise_var = self.hyper.noise_std * self.hyper.noise_std;
        for i in 0..n {
            target[(i, i)] += noise_var + self.jitter;
        }
        let rebuilt = &self.chol_lower * self.chol_lower.transpose();
        (rebuilt - target).abs().max()
    }
}

/// Type-II maximum likelihood: bounded simplex search on the NLML, restarted
/// from random points inside the bounds. Restart 0 starts at `init`; the
/// best final value wins, with ties broken by the lowest restart index. When
/// no restart converges within its evaluation budget the best point found is
/// still returned, flagged via [`GpModel::converged`].
pub fn fit(
    data: &TrainingSet,
    bounds: &HyperBounds,
    init: &Hyperparameters,
    restarts: usize,
    rng_seed: u64,
) -> Result<GpModel> {
    bounds.validate()?;
    init.validate()?;
    if !bounds.contains(init) {
        return Err(Error::InvalidInput(
            "initial hyperparameters lie outside the bounds".into(),
        ));
    }
    if restarts < 1 {
        return Err(Error::InvalidInput("need at least one restart".into()));
    }

    let n_modes = init.mean_modes.modes.len();
    let box_bounds = bounds.to_vector(n_modes);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let starts: Vec<Vec<f64>> = (0..restarts)
        .map(|r| {
            if r == 0 {
                Ok(init.to_vector())
            } else {
                Ok(bounds.sample_start(init, data, &mut rng)?.to_vector())
            }
        })
        .collect::<Result<_>>()?;

    let opts = OptOptions {
        max_evals: 300 * (3 + 3 * n_modes),
        f_tol: 1e-9,
        x_tol: 1e-7,
    };
    let outcomes: Vec<_> = starts
        .par_iter()
        .map(|start| {
            let objective = |v: &[f64]| match Hyperparameters::from_vector(init, v) {
                Ok(hyper) => nlml(&hyper, data).unwrap_or(f64::INFINITY),
                Err(_) => f64::INFINITY,
            };
            minimize_box(objective, start, &box_bounds, &opts)
        })
        .collect();

    let best = outcomes
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| a.value.total_cmp(&b.value).then(ia.cmp(ib)))
        .map(|(_, o)| o)
        .expect("at least one restart");
    let hyper = Hyperparameters::from_vector(init, &best.x)?;
    let mut model = GpModel::at(hyper, data.clone())?;
    model.converged = best.converged;
    Ok(model)
}
