//! Overlapping mixture of Gaussian processes.
//!
//! `K` latent trajectory functions, each an independent GP with its own
//! kernel scales and modal mean function, explain one pooled set of
//! observations; a shared noise standard deviation couples the components.
//! Which observation belongs to which trajectory is unknown and is inferred
//! by mean-field variational EM:
//!
//! - E-step: alternate the closed-form updates for the latent-function
//!   posteriors and the responsibility matrix until the variational lower
//!   bound `L_b` converges.
//! - M-step: maximize the marginalised bound `L_bc` (which depends on the
//!   responsibilities but not on the latent-function posteriors) over all
//!   hyperparameters with the responsibilities held fixed.
//!
//! Everything numerical is routed through Cholesky factors of
//! `C = I + B^1/2 K B^1/2`, which stays well conditioned even when
//! responsibilities vanish; the training-noise matrix `B^-1` is never formed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gp::{
    cholesky_with_jitter, cross_kernel_matrix, kernel_matrix, mean_function, HyperBounds,
    Hyperparameters, Part, TrainingSet,
};
use crate::modal::ModalModel;
use crate::opt::{minimize_box, OptOptions};

/// Kernel and mean-function parameters of one mixture component. The noise
/// standard deviation lives on the model, shared by all components.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ComponentParams {
    pub length_scale: f64,
    pub process_std: f64,
    pub mean_modes: ModalModel,
}

impl ComponentParams {
    pub fn to_gp_hyper(&self, noise_std: f64, part: Part) -> Hyperparameters {
        Hyperparameters {
            length_scale: self.length_scale,
            process_std: self.process_std,
            noise_std,
            mean_modes: self.mean_modes.clone(),
            part,
        }
    }

    fn to_vector(&self) -> Vec<f64> {
        let mut v = vec![self.length_scale, self.process_std];
        for m in &self.mean_modes.modes {
            v.push(m.natural_frequency_hz);
            v.push(m.damping_ratio);
            v.push(m.residue);
        }
        v
    }

    fn from_vector(template: &ComponentParams, v: &[f64]) -> Result<ComponentParams> {
        let n_modes = template.mean_modes.modes.len();
        let mut modes = Vec::with_capacity(n_modes);
        for k in 0..n_modes {
            modes.push(crate::modal::Mode::new(v[2 + 3 * k], v[3 + 3 * k], v[4 + 3 * k])?);
        }
        Ok(ComponentParams {
            length_scale: v[0],
            process_std: v[1],
            mean_modes: ModalModel::new(modes, template.mean_modes.dof_pair)?,
        })
    }

    fn bounds_vector(bounds: &HyperBounds, n_modes: usize) -> Vec<(f64, f64)> {
        let mut v = vec![bounds.length_scale, bounds.process_std];
        for _ in 0..n_modes {
            v.push(bounds.natural_frequency_hz);
            v.push(bounds.damping_ratio);
            v.push(bounds.residue);
        }
        v
    }
}

/// Checks the responsibility-matrix invariant: entries in `[0, 1]`, every
/// row summing to one within `1e-9`.
pub fn validate_responsibilities(pi_hat: &DMatrix<f64>) -> Result<()> {
    for i in 0..pi_hat.nrows() {
        let mut row_sum = 0.0;
        for k in 0..pi_hat.ncols() {
            let p = pi_hat[(i, k)];
            if !(0.0..=1.0 + 1e-12).contains(&p) {
                return Err(Error::InvalidInput(format!(
                    "responsibility [{i},{k}] = {p} outside [0, 1]"
                )));
            }
            row_sum += p;
        }
        if (row_sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "responsibility row {i} sums to {row_sum}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Uniform responsibilities perturbed by `noise_amplitude * U(0,1)` and
/// renormalized. Exact uniformity is a symmetric fixed point of the updates,
/// so a little noise is required to let EM break the symmetry.
pub fn noisy_uniform_responsibilities(
    n: usize,
    k: usize,
    noise_amplitude: f64,
    rng: &mut impl Rng,
) -> DMatrix<f64> {
    let mut pi_hat = DMatrix::from_element(n, k, 1.0 / k as f64);
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..k {
            pi_hat[(i, j)] += noise_amplitude * rng.random::<f64>();
            row_sum += pi_hat[(i, j)];
        }
        for j in 0..k {
            pi_hat[(i, j)] /= row_sum;
        }
    }
    pi_hat
}

/// The fitted mixture: per-component hyperparameters, the shared noise, the
/// responsibility matrix over training points, and the bound trace recorded
/// during EM (`L_bc` after each E- and M-step, nondecreasing).
#[derive(Debug, Clone)]
pub struct OmgpModel {
    pub components: Vec<ComponentParams>,
    pub noise_std: f64,
    pub responsibilities: DMatrix<f64>,
    pub training: TrainingSet,
    pub bound_trace: Vec<f64>,
    /// False when the EM outer loop hit its iteration cap before the bound
    /// converged; the model is still the best state reached.
    pub converged: bool,
}

impl OmgpModel {
    pub fn new(
        components: Vec<ComponentParams>,
        noise_std: f64,
        responsibilities: DMatrix<f64>,
        training: TrainingSet,
    ) -> Result<OmgpModel> {
        if components.is_empty() {
            return Err(Error::InvalidInput("mixture needs at least one component".into()));
        }
        if !(noise_std > 0.0) {
            return Err(Error::InvalidInput(format!(
                "shared noise std must be positive, got {noise_std}"
            )));
        }
        if responsibilities.nrows() != training.len() || responsibilities.ncols() != components.len()
        {
            return Err(Error::Mismatch(format!(
                "responsibilities are {}x{}, expected {}x{}",
                responsibilities.nrows(),
                responsibilities.ncols(),
                training.len(),
                components.len()
            )));
        }
        validate_responsibilities(&responsibilities)?;
        for c in &components {
            c.mean_modes.validate()?;
        }
        Ok(OmgpModel {
            components,
            noise_std,
            responsibilities,
            training,
            bound_trace: Vec::new(),
            converged: true,
        })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// Training prior over components, held uniform.
    pub fn prior_weight(&self) -> f64 {
        1.0 / self.k() as f64
    }

    /// MAP component per training point (largest responsibility, lowest
    /// index on ties).
    pub fn map_labels(&self) -> Vec<usize> {
        (0..self.responsibilities.nrows())
            .map(|i| {
                let mut best = 0;
                for k in 1..self.k() {
                    if self.responsibilities[(i, k)] > self.responsibilities[(i, best)] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Per-component predictive distributions on a query grid, with the
    /// uniform prior test weights.
    pub fn predict(&self, x_star: &[f64]) -> Result<ComponentPosterior> {
        let part = self.training.part;
        let y = DVector::from_vec(self.training.y.clone());
        let mut means = Vec::with_capacity(self.k());
        let mut covariances = Vec::with_capacity(self.k());
        let noise_var = self.noise_std * self.noise_std;
        for (k, comp) in self.components.iter().enumerate() {
            let hyper = comp.to_gp_hyper(self.noise_std, part);
            let kernel = kernel_matrix(&self.training.x, &hyper);
            let pi_col: Vec<f64> = self.responsibilities.column(k).iter().cloned().collect();
            let chol = CholC::new(&kernel, &pi_col, self.noise_std)?;
            let m = DVector::from_vec(mean_function(&hyper, &self.training.x));
            let gamma = chol.information_weight(&(&y - &m));

            let m_star = DVector::from_vec(mean_function(&hyper, x_star));
            let k_cross = cross_kernel_matrix(&self.training.x, x_star, &hyper); // N x M
            let mean = &m_star + k_cross.transpose() * &gamma;

            let mut scaled = k_cross.clone();
            for i in 0..scaled.nrows() {
                for j in 0..scaled.ncols() {
                    scaled[(i, j)] *= chol.b_sqrt[i];
                }
            }
            let t = chol
                .l
                .solve_lower_triangular(&scaled)
                .expect("triangular solve on a successful Cholesky factor");
            let mut cov = cross_kernel_matrix(x_star, x_star, &hyper) - t.transpose() * t;
            for i in 0..cov.nrows() {
                cov[(i, i)] += noise_var;
            }
            means.push(mean);
            covariances.push(cov);
        }
        Ok(ComponentPosterior {
            means,
            covariances,
            weights: vec![self.prior_weight(); self.k()],
        })
    }

    /// Log evidence of a test vector under the mixture predictive,
    /// `log sum_k w_k N(y*; mu*_k, Sigma*_k)`, with full covariances.
    /// `test_weights` overrides the uniform prior weights.
    pub fn evidence(
        &self,
        x_star: &[f64],
        y_star: &[f64],
        test_weights: Option<&[f64]>,
    ) -> Result<f64> {
        let posterior = self.predict(x_star)?;
        posterior.log_evidence(y_star, test_weights)
    }

    /// MAP component for a test vector: the argmax of the unnormalised
    /// posterior `N(y*; mu*_k, Sigma*_k) * w_k`, lowest index on ties.
    pub fn map_component(&self, x_star: &[f64], y_star: &[f64]) -> Result<usize> {
        let posterior = self.predict(x_star)?;
        posterior.map_component(y_star)
    }
}

/// Per-component predictive means/covariances on a grid plus prior test
/// weights.
#[derive(Debug, Clone)]
pub struct ComponentPosterior {
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    pub weights: Vec<f64>,
}

fn validate_weights(weights: &[f64], k: usize) -> Result<()> {
    if weights.len() != k {
        return Err(Error::Mismatch(format!(
            "{} test weights for {} components",
            weights.len(),
            k
        )));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidInput("test weights must be nonnegative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("test weights sum to {sum}, expected 1")));
    }
    Ok(())
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl ComponentPosterior {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    fn log_densities(&self, y_star: &[f64]) -> Result<Vec<f64>> {
        let m = y_star.len();
        let y = DVector::from_column_slice(y_star);
        let mut out = Vec::with_capacity(self.k());
        for k in 0..self.k() {
            if self.means[k].len() != m {
                return Err(Error::Mismatch(format!(
                    "test vector has {m} points but the posterior grid has {}",
                    self.means[k].len()
                )));
            }
            let cov = &self.covariances[k];
            let scale = (0..m).map(|i| cov[(i, i)]).fold(0.0, f64::max).max(1e-300);
            let (l, _) = cholesky_with_jitter(cov, scale)?;
            let r = &y - &self.means[k];
            let v = l
                .solve_lower_triangular(&r)
                .expect("triangular solve on a successful Cholesky factor");
            let log_det_half: f64 = (0..m).map(|i| l[(i, i)].ln()).sum();
            out.push(
                -0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln() - log_det_half
                    - 0.5 * v.norm_squared(),
            );
        }
        Ok(out)
    }

    /// `log sum_k w_k N(y*; mu*_k, Sigma*_k)` via log-sum-exp.
    pub fn log_evidence(&self, y_star: &[f64], test_weights: Option<&[f64]>) -> Result<f64> {
        let weights = match test_weights {
            Some(w) => {
                validate_weights(w, self.k())?;
                w.to_vec()
            }
            None => self.weights.clone(),
        };
        let log_densities = self.log_densities(y_star)?;
        let terms: Vec<f64> = log_densities
            .iter()
            .zip(&weights)
            .map(|(ld, w)| ld + w.ln())
            .collect();
        Ok(log_sum_exp(&terms))
    }

    pub fn map_component(&self, y_star: &[f64]) -> Result<usize> {
        let log_densities = self.log_densities(y_star)?;
        let mut best = 0;
        let mut best_value = log_densities[0] + self.weights[0].ln();
        for k in 1..self.k() {
            let value = log_densities[k] + self.weights[k].ln();
            if value > best_value {
                best = k;
                best_value = value;
            }
        }
        Ok(best)
    }
}

/// Diagonal of `B^(k)`: the k-th responsibility column divided by the noise
/// variance.
pub fn b_matrix(responsibilities: &DMatrix<f64>, k: usize, sigma: f64) -> Result<DVector<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidInput(format!(
            "noise std must be positive, got {sigma}"
        )));
    }
    if k >= responsibilities.ncols() {
        return Err(Error::InvalidInput(format!(
            "component {k} out of range for {} columns",
            responsibilities.ncols()
        )));
    }
    let var = sigma * sigma;
    Ok(DVector::from_iterator(
        responsibilities.nrows(),
        responsibilities.column(k).iter().map(|p| p / var),
    ))
}

/// Cholesky factor of `C = I + B^1/2 K B^1/2` for one component, the
/// workhorse behind the f-update, both bounds, and the predictive equations.
struct CholC {
    l: DMatrix<f64>,
    b_sqrt: DVector<f64>,
    sum_log_diag: f64,
}

impl CholC {
    fn new(kernel: &DMatrix<f64>, pi_column: &[f64], sigma: f64) -> Result<CholC> {
        let n = kernel.nrows();
        let b_sqrt =
            DVector::from_iterator(n, pi_column.iter().map(|p| (p / (sigma * sigma)).sqrt()));
        let mut c = DMatrix::from_fn(n, n, |i, j| b_sqrt[i] * kernel[(i, j)] * b_sqrt[j]);
        for i in 0..n {
            c[(i, i)] += 1.0;
        }
        // C's eigenvalues are >= 1, so the ladder's first rung is already
        // negligible for it.
        let (l, _) = cholesky_with_jitter(&c, 1.0)?;
        let sum_log_diag = (0..n).map(|i| l[(i, i)].ln()).sum();
        Ok(CholC {
            l,
            b_sqrt,
            sum_log_diag,
        })
    }

    /// `||L^-1 (B^1/2 r)||^2`, the quadratic term of the marginalised bound.
    fn quad_form(&self, r: &DVector<f64>) -> f64 {
        let scaled = DVector::from_fn(r.len(), |i, _| self.b_sqrt[i] * r[i]);
        let v = self
            .l
            .solve_lower_triangular(&scaled)
            .expect("triangular solve on a successful Cholesky factor");
        v.norm_squared()
    }

    /// `B^1/2 C^-1 B^1/2 r`, the information-form weight vector equal to
    /// `(K + B^-1)^-1 r` wherever `B` is invertible, and well-defined in the
    /// zero-responsibility limit.
    fn information_weight(&self, r: &DVector<f64>) -> DVector<f64> {
        let scaled = DVector::from_fn(r.len(), |i, _| self.b_sqrt[i] * r[i]);
        let v = self
            .l
            .solve_lower_triangular(&scaled)
            .expect("triangular solve on a successful Cholesky factor");
        let u = self
            .l
            .tr_solve_lower_triangular(&v)
            .expect("triangular solve on a successful Cholesky factor");
        DVector::from_fn(r.len(), |i, _| self.b_sqrt[i] * u[i])
    }

    /// `V = L^-1 B^1/2 K`, from which the posterior covariance is
    /// `K - V^T V`.
    fn v_matrix(&self, kernel: &DMatrix<f64>) -> DMatrix<f64> {
        let mut scaled = kernel.clone();
        for i in 0..scaled.nrows() {
            for j in 0..scaled.ncols() {
                scaled[(i, j)] *= self.b_sqrt[i];
            }
        }
        self.l
            .solve_lower_triangular(&scaled)
            .expect("triangular solve on a successful Cholesky factor")
    }

    /// `tr(C^-1)`, needed by the latent-function KL term of `L_b`.
    fn trace_c_inv(&self) -> f64 {
        let n = self.l.nrows();
        let inv = self
            .l
            .solve_lower_triangular(&DMatrix::<f64>::identity(n, n))
            .expect("triangular solve on a successful Cholesky factor");
        inv.iter().map(|v| v * v).sum()
    }
}

/// Variational posterior of one latent function on the training inputs.
#[derive(Debug, Clone)]
pub struct ComponentState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Closed-form update of the latent-function posteriors at the model's
/// current responsibilities: `Sigma_k = (K_k^-1 + B_k)^-1` and
/// `mu_k = m_k + Sigma_k B_k (y - m_k)`, computed in factored form (the
/// kernel matrix is never inverted directly).
pub fn estep_update_f(model: &OmgpModel) -> Result<Vec<ComponentState>> {
    let part = model.training.part;
    let y = DVector::from_vec(model.training.y.clone());
    let noise_var = model.noise_std * model.noise_std;
    let mut states = Vec::with_capacity(model.k());
    for (k, comp) in model.components.iter().enumerate() {
        let hyper = comp.to_gp_hyper(model.noise_std, part);
        let kernel = kernel_matrix(&model.training.x, &hyper);
        let pi_col: Vec<f64> = model.responsibilities.column(k).iter().cloned().collect();
        let chol = CholC::new(&kernel, &pi_col, model.noise_std)?;
        let m = DVector::from_vec(mean_function(&hyper, &model.training.x));
        let r = &y - &m;

        let d = DVector::from_fn(r.len(), |i, _| pi_col[i] / noise_var * r[i]);
        let kd = &kernel * &d;
        let w = &d - chol.information_weight(&kd);
        let mean = &m + &kernel * &w;

        let v = chol.v_matrix(&kernel);
        let cov = &kernel - v.transpose() * v;
        states.push(ComponentState { mean, cov });
    }
    Ok(states)
}

fn log_gaussian_terms(model: &OmgpModel, states: &[ComponentState]) -> DMatrix<f64> {
    let n = model.training.len();
    let k = model.k();
    let noise_var = model.noise_std * model.noise_std;
    let log_norm = 0.5 * (2.0 * std::f64::consts::PI * noise_var).ln();
    DMatrix::from_fn(n, k, |i, j| {
        let resid = model.training.y[i] - states[j].mean[i];
        -(resid * resid + states[j].cov[(i, i)]) / (2.0 * noise_var) - log_norm
    })
}

/// Closed-form responsibility update: `pi_hat[i,k] ~ prior[i,k] * exp(a_ik)`
/// normalized per row in log space (max subtraction), where `a_ik` is the
/// expected log-likelihood of point `i` under component `k`.
pub fn estep_update_z(model: &OmgpModel, states: &[ComponentState]) -> DMatrix<f64> {
    let a = log_gaussian_terms(model, states);
    normalize_rows_log(&a, model.prior_weight())
}

fn normalize_rows_log(a: &DMatrix<f64>, prior: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let k = a.ncols();
    let mut pi_hat = DMatrix::zeros(n, k);
    let mut row = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            row[j] = prior.ln() + a[(i, j)];
        }
        let norm = log_sum_exp(&row);
        for j in 0..k {
            pi_hat[(i, j)] = (row[j] - norm).exp();
        }
        // Explicit renormalization mops up the last-ulp drift of exp.
        let sum: f64 = (0..k).map(|j| pi_hat[(i, j)]).sum();
        for j in 0..k {
            pi_hat[(i, j)] /= sum;
        }
    }
    pi_hat
}

fn kl_responsibilities(pi_hat: &DMatrix<f64>, prior: f64) -> f64 {
    let mut kl = 0.0;
    for p in pi_hat.iter() {
        if *p > 0.0 {
            kl += p * (p.ln() - prior.ln());
        }
    }
    kl
}

/// The standard variational lower bound `L_b` at the given posterior states
/// and the model's responsibilities: expected log-likelihood minus the
/// responsibility and latent-function KL terms.
pub fn lower_bound_lb(model: &OmgpModel, states: &[ComponentState]) -> Result<f64> {
    let n = model.training.len();
    let a = log_gaussian_terms(model, states);
    let mut bound = 0.0;
    for i in 0..n {
        for k in 0..model.k() {
            bound += model.responsibilities[(i, k)] * a[(i, k)];
        }
    }
    bound -= kl_responsibilities(&model.responsibilities, model.prior_weight());

    let part = model.training.part;
    for (k, comp) in model.components.iter().enumerate() {
        let hyper = comp.to_gp_hyper(model.noise_std, part);
        let kernel = kernel_matrix(&model.training.x, &hyper);
        let scale = comp.process_std * comp.process_std;
        let (l_k, _) = cholesky_with_jitter(&kernel, scale)?;
        let m = DVector::from_vec(mean_function(&hyper, &model.training.x));
        let delta = &states[k].mean - &m;

        let v = l_k
            .solve_lower_triangular(&delta)
            .expect("triangular solve on a successful Cholesky factor");
        let quad = v.norm_squared();

        let w = l_k
            .solve_lower_triangular(&states[k].cov)
            .expect("triangular solve on a successful Cholesky factor");
        let w2 = l_k
            .tr_solve_lower_triangular(&w)
            .expect("triangular solve on a successful Cholesky factor");
        let trace = w2.trace();

        let log_det_k: f64 = (0..n).map(|i| 2.0 * l_k[(i, i)].ln()).sum();
        let cov_scale = (0..n)
            .map(|i| states[k].cov[(i, i)])
            .fold(0.0, f64::max)
            .max(1e-300);
        let (l_s, _) = cholesky_with_jitter(&states[k].cov, cov_scale)?;
        let log_det_s: f64 = (0..n).map(|i| 2.0 * l_s[(i, i)].ln()).sum();

        bound -= 0.5 * (trace + quad - n as f64 + log_det_k - log_det_s);
    }
    Ok(bound)
}

fn lbc_from_pieces(
    quads: &[f64],
    sum_log_diags: &[f64],
    pi_hat: &DMatrix<f64>,
    prior: f64,
    sigma: f64,
) -> f64 {
    let noise_var = sigma * sigma;
    let pi_total: f64 = pi_hat.iter().sum();
    let mut bound = 0.0;
    for (quad, sum_log) in quads.iter().zip(sum_log_diags) {
        bound += -0.5 * quad - sum_log;
    }
    bound -= kl_responsibilities(pi_hat, prior);
    bound -= 0.5 * pi_total * (2.0 * std::f64::consts::PI * noise_var).ln();
    bound
}

fn lbc_impl(
    training: &TrainingSet,
    components: &[ComponentParams],
    noise_std: f64,
    pi_hat: &DMatrix<f64>,
) -> Result<f64> {
    let y = DVector::from_vec(training.y.clone());
    let mut quads = Vec::with_capacity(components.len());
    let mut sum_logs = Vec::with_capacity(components.len());
    for (k, comp) in components.iter().enumerate() {
        let hyper = comp.to_gp_hyper(noise_std, training.part);
        let kernel = kernel_matrix(&training.x, &hyper);
        let pi_col: Vec<f64> = pi_hat.column(k).iter().cloned().collect();
        let chol = CholC::new(&kernel, &pi_col, noise_std)?;
        let m = DVector::from_vec(mean_function(&hyper, &training.x));
        quads.push(chol.quad_form(&(&y - &m)));
        sum_logs.push(chol.sum_log_diag);
    }
    Ok(lbc_from_pieces(
        &quads,
        &sum_logs,
        pi_hat,
        1.0 / components.len() as f64,
        noise_std,
    ))
}

/// The marginalised variational bound `L_bc`: the value of `L_b` after an
/// optimal latent-function update, independent of the current posterior
/// states. Used as the M-step objective and as the model-selection score
/// across restarts.
pub fn lower_bound_lbc(model: &OmgpModel) -> Result<f64> {
    lbc_impl(
        &model.training,
        &model.components,
        model.noise_std,
        &model.responsibilities,
    )
}

/// EM schedule knobs. The defaults implement the documented protocol:
/// E-step relative tolerance `1e-6` (cap 200 alternations), outer relative
/// tolerance `1e-6` (cap 50 iterations), responsibility init noise 0.05.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OmgpOptions {
    pub estep_rel_tol: f64,
    pub estep_max_alternations: usize,
    pub outer_rel_tol: f64,
    pub outer_max_iters: usize,
    /// Simplex evaluation budget per component block in the M-step.
    pub mstep_component_evals: usize,
    /// Simplex evaluation budget for the shared-noise block.
    pub mstep_noise_evals: usize,
    pub pi_init_noise: f64,
}

impl Default for OmgpOptions {
    fn default() -> Self {
        OmgpOptions {
            estep_rel_tol: 1e-6,
            estep_max_alternations: 200,
            outer_rel_tol: 1e-6,
            outer_max_iters: 50,
            mstep_component_evals: 120,
            mstep_noise_evals: 60,
            pi_init_noise: 0.05,
        }
    }
}

/// A fully explicit EM starting point.
#[derive(Debug, Clone)]
pub struct OmgpInit {
    pub components: Vec<ComponentParams>,
    pub noise_std: f64,
    pub responsibilities: DMatrix<f64>,
}

/// Fast per-component E-step state: posterior mean, covariance diagonal, and
/// the scalars the bounds need.
struct FastState {
    mean: DVector<f64>,
    cov_diag: DVector<f64>,
    sum_log_diag: f64,
    trace_c_inv: f64,
    quad_w_k_w: f64,
}

/// Per-E-step workspace: kernels and prior means are fixed while the
/// responsibilities iterate, so they are built once.
struct Workspace {
    kernels: Vec<DMatrix<f64>>,
    prior_means: Vec<DVector<f64>>,
    y: DVector<f64>,
}

impl Workspace {
    fn new(training: &TrainingSet, components: &[ComponentParams], noise_std: f64) -> Workspace {
        let kernels = components
            .iter()
            .map(|c| kernel_matrix(&training.x, &c.to_gp_hyper(noise_std, training.part)))
            .collect();
        let prior_means = components
            .iter()
            .map(|c| {
                DVector::from_vec(mean_function(
                    &c.to_gp_hyper(noise_std, training.part),
                    &training.x,
                ))
            })
            .collect();
        Workspace {
            kernels,
            prior_means,
            y: DVector::from_vec(training.y.clone()),
        }
    }

    fn f_update(&self, pi_hat: &DMatrix<f64>, sigma: f64) -> Result<Vec<FastState>> {
        let noise_var = sigma * sigma;
        let mut states = Vec::with_capacity(self.kernels.len());
        for k in 0..self.kernels.len() {
            let kernel = &self.kernels[k];
            let pi_col: Vec<f64> = pi_hat.column(k).iter().cloned().collect();
            let chol = CholC::new(kernel, &pi_col, sigma)?;
            let r = &self.y - &self.prior_means[k];

            let d = DVector::from_fn(r.len(), |i, _| pi_col[i] / noise_var * r[i]);
            let kd = kernel * &d;
            let w = &d - chol.information_weight(&kd);
            let kw = kernel * &w;
            let mean = &self.prior_means[k] + &kw;

            let v = chol.v_matrix(kernel);
            let cov_diag =
                DVector::from_fn(kernel.nrows(), |j, _| kernel[(j, j)] - v.column(j).norm_squared());
            states.push(FastState {
                mean,
                cov_diag,
                sum_log_diag: chol.sum_log_diag,
                trace_c_inv: chol.trace_c_inv(),
                quad_w_k_w: w.dot(&kw),
            });
        }
        Ok(states)
    }

    fn log_gaussian(&self, states: &[FastState], sigma: f64) -> DMatrix<f64> {
        let noise_var = sigma * sigma;
        let log_norm = 0.5 * (2.0 * std::f64::consts::PI * noise_var).ln();
        DMatrix::from_fn(self.y.len(), states.len(), |i, j| {
            let resid = self.y[i] - states[j].mean[i];
            -(resid * resid + states[j].cov_diag[i]) / (2.0 * noise_var) - log_norm
        })
    }

    fn z_update(&self, states: &[FastState], sigma: f64, prior: f64) -> DMatrix<f64> {
        normalize_rows_log(&self.log_gaussian(states, sigma), prior)
    }

    fn elbo(&self, states: &[FastState], pi_hat: &DMatrix<f64>, sigma: f64, prior: f64) -> f64 {
        let n = self.y.len();
        let a = self.log_gaussian(states, sigma);
        let mut bound = 0.0;
        for i in 0..n {
            for k in 0..states.len() {
                bound += pi_hat[(i, k)] * a[(i, k)];
            }
        }
        bound -= kl_responsibilities(pi_hat, prior);
        for state in states {
            bound -=
                0.5 * (state.trace_c_inv + state.quad_w_k_w - n as f64 + 2.0 * state.sum_log_diag);
        }
        bound
    }
}

/// Runs EM from a fully explicit starting point. The bound trace records
/// `L_bc` after each E-step and each M-step; a final E-step leaves the
/// responsibilities consistent with the final hyperparameters.
pub fn fit_with_init(
    data: &TrainingSet,
    bounds: &HyperBounds,
    init: &OmgpInit,
    opts: &OmgpOptions,
) -> Result<OmgpModel> {
    bounds.validate()?;
    if !(bounds.noise_std.0 > 0.0) {
        return Err(Error::InvalidInput(
            "the shared-noise lower bound must be positive for the mixture".into(),
        ));
    }
    let k = init.components.len();
    if k < 1 {
        return Err(Error::InvalidInput("mixture needs at least one component".into()));
    }
    validate_responsibilities(&init.responsibilities)?;
    if init.responsibilities.nrows() != data.len() || init.responsibilities.ncols() != k {
        return Err(Error::Mismatch(format!(
            "responsibility init is {}x{}, expected {}x{}",
            init.responsibilities.nrows(),
            init.responsibilities.ncols(),
            data.len(),
            k
        )));
    }

    let n_modes = init.components[0].mean_modes.modes.len();
    let component_box = ComponentParams::bounds_vector(bounds, n_modes);
    let prior = 1.0 / k as f64;

    let mut components = init.components.clone();
    let mut sigma = init.noise_std.clamp(bounds.noise_std.0, bounds.noise_std.1);
    let mut pi_hat = init.responsibilities.clone();
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;

    let run_estep = |components: &[ComponentParams],
                     sigma: f64,
                     pi_hat: &mut DMatrix<f64>|
     -> Result<()> {
        let workspace = Workspace::new(data, components, sigma);
        let mut lb_prev = f64::NEG_INFINITY;
        for _alt in 0..opts.estep_max_alternations {
            let states = workspace.f_update(pi_hat, sigma)?;
            *pi_hat = workspace.z_update(&states, sigma, prior);
            let lb = workspace.elbo(&states, pi_hat, sigma, prior);
            if lb_prev.is_finite() && (lb - lb_prev).abs() < opts.estep_rel_tol * lb.abs() {
                break;
            }
            lb_prev = lb;
        }
        Ok(())
    };

    let mut previous_lbc = f64::NEG_INFINITY;
    for _outer in 0..opts.outer_max_iters {
        run_estep(&components, sigma, &mut pi_hat)?;
        trace.push(lbc_impl(data, &components, sigma, &pi_hat)?);

        // M-step: block-coordinate ascent on L_bc, one simplex run per
        // component's hyperparameters and one for the shared noise, with the
        // responsibilities fixed. Each block starts at the current value, so
        // the bound cannot decrease.
        let y = DVector::from_vec(data.y.clone());
        for j in 0..k {
            let template = components[j].clone();
            let pi_col: Vec<f64> = pi_hat.column(j).iter().cloned().collect();
            let objective = |v: &[f64]| match ComponentParams::from_vector(&template, v) {
                Ok(cand) => {
                    let hyper = cand.to_gp_hyper(sigma, data.part);
                    let kernel = kernel_matrix(&data.x, &hyper);
                    match CholC::new(&kernel, &pi_col, sigma) {
                        Ok(chol) => {
                            let m = DVector::from_vec(mean_function(&hyper, &data.x));
                            0.5 * chol.quad_form(&(&y - &m)) + chol.sum_log_diag
                        }
                        Err(_) => f64::INFINITY,
                    }
                }
                Err(_) => f64::INFINITY,
            };
            let outcome = minimize_box(
                objective,
                &components[j].to_vector(),
                &component_box,
                &OptOptions {
                    max_evals: opts.mstep_component_evals,
                    f_tol: 1e-9,
                    x_tol: 1e-7,
                },
            );
            components[j] = ComponentParams::from_vector(&template, &outcome.x)?;
        }
        {
            let sigma_objective = |v: &[f64]| match lbc_impl(data, &components, v[0], &pi_hat) {
                Ok(bound) => -bound,
                Err(_) => f64::INFINITY,
            };
            let outcome = minimize_box(
                sigma_objective,
                &[sigma],
                &[bounds.noise_std],
                &OptOptions {
                    max_evals: opts.mstep_noise_evals,
                    f_tol: 1e-10,
                    x_tol: 1e-8,
                },
            );
            sigma = outcome.x[0];
        }

        let lbc = lbc_impl(data, &components, sigma, &pi_hat)?;
        trace.push(lbc);
        if previous_lbc.is_finite() && (lbc - previous_lbc).abs() < opts.outer_rel_tol * lbc.abs() {
            converged = true;
            break;
        }
        previous_lbc = lbc;
    }

    run_estep(&components, sigma, &mut pi_hat)?;
    trace.push(lbc_impl(data, &components, sigma, &pi_hat)?);

    let mut model = OmgpModel::new(components, sigma, pi_hat, data.clone())?;
    model.bound_trace = trace;
    model.converged = converged;
    Ok(model)
}

/// Local maxima of the binned mean `|y|` over the input range, tallest
/// first, greedily separated by at least two bin widths. Unsupervised fits
/// seed the component mean frequencies from these, mirroring how resonance
/// peaks are read off a measured spectrum.
fn peak_candidates(data: &TrainingSet, n_bins: usize) -> Vec<f64> {
    let x_lo = data.x.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_hi = data.x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(x_hi > x_lo) || n_bins < 3 {
        return Vec::new();
    }
    let width = (x_hi - x_lo) / n_bins as f64;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (x, y) in data.x.iter().zip(&data.y) {
        let bin = (((x - x_lo) / width) as usize).min(n_bins - 1);
        sums[bin] += y.abs();
        counts[bin] += 1;
    }
    let height = |i: usize| {
        if counts[i] > 0 {
            sums[i] / counts[i] as f64
        } else {
            0.0
        }
    };
    let mut maxima: Vec<(f64, f64)> = (1..n_bins - 1)
        .filter(|&i| counts[i] > 0 && height(i) >= height(i - 1) && height(i) >= height(i + 1))
        .map(|i| (height(i), x_lo + (i as f64 + 0.5) * width))
        .collect();
    maxima.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut centers: Vec<f64> = Vec::new();
    for (_, center) in maxima {
        if centers.iter().all(|c| (c - center).abs() >= 2.0 * width) {
            centers.push(center);
        }
    }
    centers
}

/// Fits the mixture with the restart protocol: each restart draws its own
/// starting hyperparameters (or reuses `init` when given, e.g. to chain the
/// imaginary fit from the real fit) and its own noisy-uniform responsibility
/// matrix, runs EM, and the restart with the highest final `L_bc` wins (ties
/// broken by the lowest restart index). Deterministic per seed; restarts may
/// run in parallel.
pub fn fit(
    data: &TrainingSet,
    k: usize,
    bounds: &HyperBounds,
    restarts: usize,
    rng_seed: u64,
    init: Option<&[ComponentParams]>,
    opts: &OmgpOptions,
) -> Result<OmgpModel> {
    if k < 1 {
        return Err(Error::InvalidInput("mixture needs at least one component".into()));
    }
    if restarts < 1 {
        return Err(Error::InvalidInput("need at least one restart".into()));
    }
    bounds.validate()?;
    if let Some(components) = init {
        if components.len() != k {
            return Err(Error::Mismatch(format!(
                "{} initial components for k = {k}",
                components.len()
            )));
        }
    }

    let mut master = ChaCha8Rng::seed_from_u64(rng_seed);
    let sub_seeds: Vec<u64> = (0..restarts).map(|_| master.random()).collect();

    let peaks = peak_candidates(data, 48);
    let template_modes = match init {
        Some(components) => components[0].mean_modes.clone(),
        None => ModalModel::single_mode(
            0.5 * (bounds.natural_frequency_hz.0 + bounds.natural_frequency_hz.1),
            0.5 * (bounds.damping_ratio.0 + bounds.damping_ratio.1),
            0.5 * (bounds.residue.0 + bounds.residue.1),
        )?,
    };
    let template_hyper = Hyperparameters {
        length_scale: 1.0,
        process_std: 1.0,
        noise_std: bounds.noise_std.0,
        mean_modes: template_modes,
        part: data.part,
    };
    let mean_y = data.y.iter().sum::<f64>() / data.len() as f64;
    let y_std = (data.y.iter().map(|y| (y - mean_y) * (y - mean_y)).sum::<f64>()
        / data.len() as f64)
        .sqrt()
        .max(1e-9);

    let inits: Vec<OmgpInit> = sub_seeds
        .iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let components = match init {
                Some(components) => components.to_vec(),
                None => (0..k)
                    .map(|j| {
                        let h = bounds.sample_start(&template_hyper, data, &mut rng)?;
                        let mut mean_modes = h.mean_modes;
                        // Seed each component's first-mode frequency near a
                        // distinct empirical peak of the pooled data, with
                        // per-restart jitter; surplus components keep their
                        // random draw.
                        if let Some(&peak) = peaks.get(j) {
                            let jitter: f64 = rng.random();
                            let f = (peak + 0.3 * (jitter - 0.5)).clamp(
                                bounds.natural_frequency_hz.0,
                                bounds.natural_frequency_hz.1,
                            );
                            if mean_modes.modes.len() == 1 {
                                mean_modes.modes[0].natural_frequency_hz = f;
                            }
                        }
                        Ok(ComponentParams {
                            length_scale: h.length_scale,
                            process_std: h.process_std,
                            mean_modes,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            let noise_std = {
                let u: f64 = rng.random();
                (y_std * (0.1 + u * 0.4)).clamp(bounds.noise_std.0, bounds.noise_std.1)
            };
            let responsibilities =
                noisy_uniform_responsibilities(data.len(), k, opts.pi_init_noise, &mut rng);
            Ok(OmgpInit {
                components,
                noise_std,
                responsibilities,
            })
        })
        .collect::<Result<_>>()?;

    let results: Vec<Result<OmgpModel>> = inits
        .par_iter()
        .map(|start| fit_with_init(data, bounds, start, opts))
        .collect();

    let mut best: Option<OmgpModel> = None;
    let mut last_error = None;
    for result in results {
        match result {
            Ok(model) => {
                let score = *model.bound_trace.last().expect("EM records at least one bound");
                let better = match &best {
                    None => true,
                    Some(incumbent) => {
                        score
                            > *incumbent
                                .bound_trace
                                .last()
                                .expect("EM records at least one bound")
                    }
                };
                if better {
                    best = Some(model);
                }
            }
            Err(e) => last_error = Some(e),
        }
    }
    match best {
        Some(model) => Ok(model),
        None => Err(last_error.expect("at least one restart ran")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_training(n: usize) -> TrainingSet {
        let x: Vec<f64> = (0..n).map(|i| 48.0 + 8.0 * i as f64 / n as f64).collect();
        let y: Vec<f64> = x.iter().map(|f| (f - 52.0).sin()).collect();
        TrainingSet::new(x, y, Part::Real).unwrap()
    }

    fn toy_component(f_n: f64) -> ComponentParams {
        ComponentParams {
            length_scale: 1.0,
            process_std: 2.0,
            mean_modes: ModalModel::single_mode(f_n, 0.01, 1.0).unwrap(),
        }
    }

    fn uniform_resp(n: usize, k: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, k, 1.0 / k as f64)
    }

    #[test]
    fn b_matrix_closed_forms() {
        let all_one = DMatrix::from_element(3, 1, 1.0);
        let b = b_matrix(&all_one, 0, 1.0).unwrap();
        assert_eq!(b.as_slice(), &[1.0, 1.0, 1.0]);

        let mut resp = uniform_resp(4, 2);
        resp[(2, 0)] = 0.0;
        resp[(2, 1)] = 1.0;
        let b = b_matrix(&resp, 0, 1.0).unwrap();
        assert_eq!(b[2], 0.0);

        let b1 = b_matrix(&resp, 1, 1.0).unwrap();
        let b2 = b_matrix(&resp, 1, 0.5).unwrap();
        for i in 0..4 {
            assert_relative_eq!(b2[i], 4.0 * b1[i], max_relative = 1e-15);
        }
        assert!(b_matrix(&resp, 0, 0.0).is_err());
    }

    #[test]
    fn dead_component_recovers_its_prior() {
        let data = toy_training(12);
        let n = data.len();
        let mut resp = DMatrix::zeros(n, 2);
        for i in 0..n {
            resp[(i, 1)] = 1.0;
        }
        let model = OmgpModel::new(
            vec![toy_component(51.0), toy_component(53.0)],
            0.3,
            resp,
            data.clone(),
        )
        .unwrap();
        let states = estep_update_f(&model).unwrap();

        let hyper = model.components[0].to_gp_hyper(model.noise_std, data.part);
        let prior_mean = mean_function(&hyper, &data.x);
        let prior_cov = kernel_matrix(&data.x, &hyper);
        for i in 0..n {
            assert_relative_eq!(states[0].mean[i], prior_mean[i], epsilon = 1e-10);
            for j in 0..n {
                assert_relative_eq!(states[0].cov[(i, j)], prior_cov[(i, j)], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn identical_components_share_responsibility_equally() {
        let data = toy_training(10);
        let model = OmgpModel::new(
            vec![toy_component(52.0), toy_component(52.0)],
            0.5,
            uniform_resp(data.len(), 2),
            data,
        )
        .unwrap();
        let states = estep_update_f(&model).unwrap();
        let pi_hat = estep_update_z(&model, &states);
        for i in 0..pi_hat.nrows() {
            assert_relative_eq!(pi_hat[(i, 0)], 0.5, epsilon = 1e-12);
            assert_relative_eq!(pi_hat[(i, 1)], 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn dominant_component_takes_the_point() {
        let data = toy_training(8);
        let n = data.len();
        let model = OmgpModel::new(
            vec![toy_component(51.0), toy_component(53.0)],
            0.01,
            uniform_resp(n, 2),
            data.clone(),
        )
        .unwrap();
        // Hand the z-update states whose first component sits exactly on the
        // data and whose second is far away relative to sigma.
        let y = DVector::from_vec(data.y.clone());
        let far = DVector::from_element(n, 100.0);
        let cov = DMatrix::zeros(n, n);
        let states = vec![
            ComponentState {
                mean: y,
                cov: cov.clone(),
            },
            ComponentState { mean: far, cov },
        ];
        let pi_hat = estep_update_z(&model, &states);
        for i in 0..n {
            assert!(pi_hat[(i, 0)] > 1.0 - 1e-6);
            let row: f64 = (0..2).map(|k| pi_hat[(i, k)]).sum();
            assert_relative_eq!(row, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rows_remain_stochastic_after_updates() {
        let data = toy_training(17);
        let model = OmgpModel::new(
            vec![toy_component(50.0), toy_component(52.0), toy_component(54.0)],
            0.4,
            noisy_uniform_responsibilities(
                17,
                3,
                0.05,
                &mut ChaCha8Rng::seed_from_u64(2),
            ),
            data,
        )
        .unwrap();
        let states = estep_update_f(&model).unwrap();
        let pi_hat = estep_update_z(&model, &states);
        validate_responsibilities(&pi_hat).unwrap();
    }

    #[test]
    fn kl_term_vanishes_when_posterior_matches_prior() {
        let pi_hat = uniform_resp(9, 3);
        assert_relative_eq!(kl_responsibilities(&pi_hat, 1.0 / 3.0), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn dead_component_contributes_only_the_noise_share() {
        // With one component owning everything and the other nothing, L_bc
        // differs from the K = 1 value only through the responsibility KL
        // (log 2 per point under the uniform prior): the dead component's
        // quadratic and log-det terms vanish because its C is the identity.
        let data = toy_training(9);
        let n = data.len();
        let mut resp = DMatrix::zeros(n, 2);
        for i in 0..n {
            resp[(i, 1)] = 1.0;
        }
        let live = toy_component(52.0);
        let two = OmgpModel::new(
            vec![toy_component(47.0), live.clone()],
            0.3,
            resp,
            data.clone(),
        )
        .unwrap();
        let one =
            OmgpModel::new(vec![live], 0.3, DMatrix::from_element(n, 1, 1.0), data).unwrap();
        let lbc_two = lower_bound_lbc(&two).unwrap();
        let lbc_one = lower_bound_lbc(&one).unwrap();
        assert_relative_eq!(lbc_two, lbc_one - n as f64 * 2.0f64.ln(), max_relative = 1e-10);
    }

    #[test]
    fn map_component_breaks_ties_toward_the_lowest_index() {
        let posterior = ComponentPosterior {
            means: vec![DVector::from_element(2, 0.0); 3],
            covariances: vec![DMatrix::identity(2, 2); 3],
            weights: vec![1.0 / 3.0; 3],
        };
        assert_eq!(posterior.map_component(&[0.1, -0.2]).unwrap(), 0);
    }

    #[test]
    fn evidence_of_a_single_point_mixture_is_the_gaussian_density() {
        let v = 0.7;
        let posterior = ComponentPosterior {
            means: vec![DVector::from_element(1, 2.0)],
            covariances: vec![DMatrix::from_element(1, 1, v)],
            weights: vec![1.0],
        };
        let expected = -0.5 * (2.0 * std::f64::consts::PI * v).ln();
        assert_relative_eq!(
            posterior.log_evidence(&[2.0], None).unwrap(),
            expected,
            max_relative = 1e-10
        );
    }

    #[test]
    fn log_sum_exp_handles_extreme_ranges() {
        assert_relative_eq!(
            log_sum_exp(&[1234.0, 1232.0]),
            1232.0 + (2.0f64.exp() + 1.0).ln(),
            max_relative = 1e-14
        );
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
    }
}
