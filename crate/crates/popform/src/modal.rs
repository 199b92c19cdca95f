//! Modal accelerance FRF synthesis.
//!
//! A structure is summarized by a small set of modes (natural frequency,
//! damping ratio, residue). The accelerance FRF of a response/excitation
//! point pair is the damped modal sum
//!
//! ```text
//! H(w) = -w^2 * sum_k A_k / (w_nk^2 - w^2 + 2 i zeta_k w w_nk)
//! ```
//!
//! with `w = 2*pi*f`. All public interfaces take frequencies in Hz; the
//! conversion to rad/s happens only inside the evaluation.
//!
//! The module also synthesizes populations of nominally-identical structures
//! (per-member parameter jitter), replicates FRFs with peak-scaled Gaussian
//! noise, and applies simulated damage as a natural-frequency reduction.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One vibration mode: natural frequency (Hz), damping ratio, and residue
/// (the product of mass-normalised mode shapes at the response and
/// excitation points).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    #[serde(rename = "f_n_hz")]
    pub natural_frequency_hz: f64,
    #[serde(rename = "zeta")]
    pub damping_ratio: f64,
    pub residue: f64,
}

impl Mode {
    pub fn new(natural_frequency_hz: f64, damping_ratio: f64, residue: f64) -> Result<Self> {
        let mode = Mode {
            natural_frequency_hz,
            damping_ratio,
            residue,
        };
        mode.validate()?;
        Ok(mode)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.natural_frequency_hz > 0.0) || !self.natural_frequency_hz.is_finite() {
            return Err(Error::InvalidInput(format!(
                "natural frequency must be positive and finite, got {}",
                self.natural_frequency_hz
            )));
        }
        if !(self.damping_ratio > 0.0 && self.damping_ratio < 1.0) {
            return Err(Error::InvalidInput(format!(
                "damping ratio must lie in (0, 1), got {}",
                self.damping_ratio
            )));
        }
        if !self.residue.is_finite() || self.residue == 0.0 {
            return Err(Error::InvalidInput(format!(
                "residue must be finite and nonzero, got {}",
                self.residue
            )));
        }
        Ok(())
    }
}

/// An ordered set of modes defining one accelerance FRF, plus the
/// response/excitation indices it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalModel {
    pub modes: Vec<Mode>,
    pub dof_pair: (usize, usize),
}

impl ModalModel {
    pub fn new(modes: Vec<Mode>, dof_pair: (usize, usize)) -> Result<Self> {
        let model = ModalModel { modes, dof_pair };
        model.validate()?;
        Ok(model)
    }

    /// Single-mode convenience constructor with dof pair (0, 0).
    pub fn single_mode(natural_frequency_hz: f64, damping_ratio: f64, residue: f64) -> Result<Self> {
        Self::new(
            vec![Mode::new(natural_frequency_hz, damping_ratio, residue)?],
            (0, 0),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::InvalidInput("modal model has no modes".into()));
        }
        for mode in &self.modes {
            mode.validate()?;
        }
        for pair in self.modes.windows(2) {
            if pair[1].natural_frequency_hz <= pair[0].natural_frequency_hz {
                return Err(Error::InvalidInput(format!(
                    "mode natural frequencies must be strictly increasing ({} Hz then {} Hz)",
                    pair[0].natural_frequency_hz, pair[1].natural_frequency_hz
                )));
            }
        }
        Ok(())
    }

    /// Evaluates the accelerance at a single frequency. Negative frequencies
    /// are meaningful here (H(-f) is the conjugate of H(f)), so no grid
    /// constraint applies.
    pub fn accelerance_at(&self, f_hz: f64) -> Complex64 {
        let w = 2.0 * std::f64::consts::PI * f_hz;
        let mut sum = Complex64::new(0.0, 0.0);
        for mode in &self.modes {
            let wn = 2.0 * std::f64::consts::PI * mode.natural_frequency_hz;
            let denom = Complex64::new(wn * wn - w * w, 2.0 * mode.damping_ratio * w * wn);
            sum += Complex64::new(mode.residue, 0.0) / denom;
        }
        -w * w * sum
    }

    /// Evaluates the accelerance FRF on a strictly increasing, nonnegative
    /// grid of frequencies in Hz.
    pub fn frf(&self, frequencies_hz: &[f64]) -> Result<FrfRecord> {
        self.validate()?;
        validate_grid(frequencies_hz)?;
        let values = frequencies_hz
            .iter()
            .map(|&f| self.accelerance_at(f))
            .collect();
        FrfRecord::new(frequencies_hz.to_vec(), values, FrfMeta::default())
    }

    /// Returns a copy with every natural frequency reduced by the given
    /// fraction; damping ratios and residues are untouched.
    pub fn apply_damage(&self, reduction_fraction: f64) -> Result<ModalModel> {
        if !(0.0..1.0).contains(&reduction_fraction) {
            return Err(Error::InvalidInput(format!(
                "frequency reduction must lie in [0, 1), got {reduction_fraction}"
            )));
        }
        let modes = self
            .modes
            .iter()
            .map(|m| Mode {
                natural_frequency_hz: m.natural_frequency_hz * (1.0 - reduction_fraction),
                ..*m
            })
            .collect();
        ModalModel::new(modes, self.dof_pair)
    }
}

/// Provenance carried alongside FRF values.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrfMeta {
    pub structure_id: String,
    pub condition: String,
    pub boundary: String,
}

/// A complex FRF sampled on a strictly increasing frequency grid (Hz).
#[derive(Debug, Clone, PartialEq)]
pub struct FrfRecord {
    pub frequencies_hz: Vec<f64>,
    pub values: Vec<Complex64>,
    pub meta: FrfMeta,
}

impl FrfRecord {
    pub fn new(frequencies_hz: Vec<f64>, values: Vec<Complex64>, meta: FrfMeta) -> Result<Self> {
        if frequencies_hz.len() != values.len() {
            return Err(Error::Mismatch(format!(
                "{} frequencies but {} values",
                frequencies_hz.len(),
                values.len()
            )));
        }
        validate_grid(&frequencies_hz)?;
        Ok(FrfRecord {
            frequencies_hz,
            values,
            meta,
        })
    }

    /// Builds a record from unordered (frequency, value) pairs by sorting on
    /// frequency first.
    pub fn from_pairs(mut pairs: Vec<(f64, Complex64)>, meta: FrfMeta) -> Result<Self> {
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (frequencies_hz, values) = pairs.into_iter().unzip();
        FrfRecord::new(frequencies_hz, values, meta)
    }

    pub fn len(&self) -> usize {
        self.frequencies_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies_hz.is_empty()
    }

    pub fn real(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.re).collect()
    }

    pub fn imag(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.im).collect()
    }

    pub fn with_meta(mut self, meta: FrfMeta) -> Self {
        self.meta = meta;
        self
    }
}

fn validate_grid(frequencies_hz: &[f64]) -> Result<()> {
    if frequencies_hz.is_empty() {
        return Err(Error::InvalidInput("frequency grid is empty".into()));
    }
    for &f in frequencies_hz {
        if !f.is_finite() {
            return Err(Error::InvalidInput("frequency grid contains non-finite values".into()));
        }
    }
    for pair in frequencies_hz.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::InvalidInput(format!(
                "frequency grid not strictly increasing at {} Hz",
                pair[0]
            )));
        }
    }
    Ok(())
}

/// Regular grid over `[f_lo, f_hi]` with the given step; the last point is
/// the largest `f_lo + n*step` not exceeding `f_hi` (within rounding).
pub fn band_grid(f_lo: f64, f_hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(f_lo >= 0.0 && f_hi > f_lo) {
        return Err(Error::InvalidInput(format!(
            "band must satisfy 0 <= f_lo < f_hi, got [{f_lo}, {f_hi}]"
        )));
    }
    if !(step > 0.0) {
        return Err(Error::InvalidInput(format!("grid step must be positive, got {step}")));
    }
    let n = ((f_hi - f_lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| f_lo + i as f64 * step).collect())
}

/// Recipe for a population of nominally-identical structures: a base modal
/// model plus fractional per-member jitters on each modal parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub n_members: usize,
    pub base_model: ModalModel,
    pub frequency_jitter: f64,
    pub residue_jitter: f64,
    pub damping_jitter: f64,
    pub rng_seed: u64,
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_members < 1 {
            return Err(Error::InvalidInput("population needs at least one member".into()));
        }
        self.base_model.validate()?;
        for (name, j) in [
            ("frequency_jitter", self.frequency_jitter),
            ("residue_jitter", self.residue_jitter),
            ("damping_jitter", self.damping_jitter),
        ] {
            if !(j >= 0.0) || !j.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be >= 0, got {j}")));
            }
        }
        Ok(())
    }
}

/// Draws `1 + U(-jitter, +jitter)`. Always consumes one RNG value so the
/// draw sequence does not depend on which jitters are zero.
fn jitter_factor(rng: &mut impl Rng, jitter: f64) -> f64 {
    let u: f64 = rng.random();
    1.0 + jitter * (2.0 * u - 1.0)
}

/// Synthesizes a population of member models and their FRFs on the given
/// grid. Deterministic for a fixed `rng_seed`: member parameters are each
/// the base value scaled by an independent uniform factor in the jitter
/// range (frequency, then damping, then residue, per mode, per member).
pub fn synthesize_population(
    spec: &PopulationSpec,
    frequencies_hz: &[f64],
) -> Result<Vec<(ModalModel, FrfRecord)>> {
    spec.validate()?;
    validate_grid(frequencies_hz)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut members = Vec::with_capacity(spec.n_members);
    for index in 0..spec.n_members {
        let modes = spec
            .base_model
            .modes
            .iter()
            .map(|m| Mode {
                natural_frequency_hz: m.natural_frequency_hz
                    * jitter_factor(&mut rng, spec.frequency_jitter),
                damping_ratio: m.damping_ratio * jitter_factor(&mut rng, spec.damping_jitter),
                residue: m.residue * jitter_factor(&mut rng, spec.residue_jitter),
            })
            .collect();
        let model = ModalModel::new(modes, spec.base_model.dof_pair)?;
        let frf = model.frf(frequencies_hz)?.with_meta(FrfMeta {
            structure_id: format!("member{}", index + 1),
            condition: "normal".into(),
            boundary: "fixed-free".into(),
        });
        members.push((model, frf));
    }
    Ok(members)
}

/// Replicates an FRF `n_copies` times, adding independent zero-mean Gaussian
/// noise to the real and imaginary parts. Each part's noise standard
/// deviation is `noise_fraction` times that part's own absolute peak, so a
/// part that is identically zero stays noise-free. Deterministic per seed.
pub fn replicate_with_noise(
    frf: &FrfRecord,
    n_copies: usize,
    noise_fraction: f64,
    rng_seed: u64,
) -> Result<Vec<FrfRecord>> {
    if frf.is_empty() {
        return Err(Error::InvalidInput("cannot replicate an empty FRF".into()));
    }
    if n_copies < 1 {
        return Err(Error::InvalidInput("n_copies must be >= 1".into()));
    }
    if !(noise_fraction >= 0.0) || !noise_fraction.is_finite() {
        return Err(Error::InvalidInput(format!(
            "noise fraction must be >= 0, got {noise_fraction}"
        )));
    }
    let peak_re = frf.values.iter().map(|v| v.re.abs()).fold(0.0, f64::max);
    let peak_im = frf.values.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
    let noise_re = Normal::new(0.0, noise_fraction * peak_re)
        .map_err(|e| Error::InvalidInput(format!("noise distribution: {e}")))?;
    let noise_im = Normal::new(0.0, noise_fraction * peak_im)
        .map_err(|e| Error::InvalidInput(format!("noise distribution: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut copies = Vec::with_capacity(n_copies);
    for _ in 0..n_copies {
        let mut values = frf.values.clone();
        for v in values.iter_mut() {
            v.re += noise_re.sample(&mut rng);
        }
        for v in values.iter_mut() {
            v.im += noise_im.sample(&mut rng);
        }
        copies.push(FrfRecord {
            frequencies_hz: frf.frequencies_hz.clone(),
            values,
            meta: frf.meta.clone(),
        });
    }
    Ok(copies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single_mode() -> ModalModel {
        ModalModel::single_mode(52.0, 0.01, 1.0).unwrap()
    }

    #[test]
    fn dc_response_is_zero() {
        let frf = single_mode().frf(&[0.0, 50.0]).unwrap();
        assert_eq!(frf.values[0], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn resonance_magnitude_is_residue_over_twice_damping() {
        let h = single_mode().accelerance_at(52.0);
        // At w = w_n the denominator is purely imaginary, 2i*zeta*w_n^2, so
        // H = -A/(2i*zeta) = +i*A/(2*zeta): zero real part, positive
        // imaginary part for a positive residue.
        assert_relative_eq!(h.norm(), 50.0, max_relative = 1e-12);
        assert_relative_eq!(h.re, 0.0, epsilon = 1e-9);
        assert_relative_eq!(h.im, 50.0, max_relative = 1e-12);
    }

    #[test]
    fn modal_sum_is_linear() {
        let m1 = ModalModel::single_mode(52.0, 0.01, 1.0).unwrap();
        let m2 = ModalModel::single_mode(61.0, 0.02, -0.7).unwrap();
        let both = ModalModel::new(
            vec![m1.modes[0], m2.modes[0]],
            (0, 0),
        )
        .unwrap();
        let grid = band_grid(40.0, 70.0, 0.25).unwrap();
        let f1 = m1.frf(&grid).unwrap();
        let f2 = m2.frf(&grid).unwrap();
        let fb = both.frf(&grid).unwrap();
        for i in 0..grid.len() {
            let sum = f1.values[i] + f2.values[i];
            assert_relative_eq!(fb.values[i].re, sum.re, max_relative = 1e-12);
            assert_relative_eq!(fb.values[i].im, sum.im, max_relative = 1e-12);
        }
    }

    #[test]
    fn rejects_bad_grid_and_empty_model() {
        assert!(single_mode().frf(&[1.0, 1.0]).is_err());
        assert!(single_mode().frf(&[2.0, 1.0]).is_err());
        assert!(single_mode().frf(&[]).is_err());
        assert!(ModalModel::new(vec![], (0, 0)).is_err());
    }

    #[test]
    fn single_lightly_damped_peak_sits_near_natural_frequency() {
        let model = single_mode();
        let grid = band_grid(48.0, 56.0, 0.01).unwrap();
        let frf = model.frf(&grid).unwrap();
        let peak_idx = (0..grid.len())
            .max_by(|&a, &b| frf.values[a].norm().total_cmp(&frf.values[b].norm()))
            .unwrap();
        let expected = 52.0 * (1.0 - 2.0 * 0.01f64 * 0.01).sqrt();
        assert!(
            (grid[peak_idx] - expected).abs() <= 2.0 * 0.01 + 1e-12,
            "|H| peak at {} Hz, expected within 2 grid steps of {} Hz",
            grid[peak_idx],
            expected
        );
    }

    #[test]
    fn population_with_zero_jitter_repeats_the_base() {
        let spec = PopulationSpec {
            n_members: 4,
            base_model: single_mode(),
            frequency_jitter: 0.0,
            residue_jitter: 0.0,
            damping_jitter: 0.0,
            rng_seed: 11,
        };
        let grid = band_grid(48.0, 56.0, 0.05).unwrap();
        let members = synthesize_population(&spec, &grid).unwrap();
        let base = single_mode().frf(&grid).unwrap();
        assert_eq!(members.len(), 4);
        for (model, frf) in &members {
            assert_eq!(model.modes, spec.base_model.modes);
            assert_eq!(frf.values, base.values);
        }
    }

    #[test]
    fn population_frequencies_stay_within_jitter_bounds() {
        let spec = PopulationSpec {
            n_members: 64,
            base_model: single_mode(),
            frequency_jitter: 0.025,
            residue_jitter: 0.0,
            damping_jitter: 0.0,
            rng_seed: 3,
        };
        let grid = band_grid(48.0, 56.0, 0.05).unwrap();
        for (model, _) in synthesize_population(&spec, &grid).unwrap() {
            let f = model.modes[0].natural_frequency_hz;
            assert!((50.7..=53.3).contains(&f), "member frequency {f} out of bounds");
        }
    }

    #[test]
    fn population_is_deterministic_per_seed() {
        let spec = PopulationSpec {
            n_members: 8,
            base_model: single_mode(),
            frequency_jitter: 0.025,
            residue_jitter: 0.1,
            damping_jitter: 0.1,
            rng_seed: 42,
        };
        let grid = band_grid(48.0, 56.0, 0.1).unwrap();
        let a = synthesize_population(&spec, &grid).unwrap();
        let b = synthesize_population(&spec, &grid).unwrap();
        for ((ma, fa), (mb, fb)) in a.iter().zip(&b) {
            assert_eq!(ma, mb);
            assert_eq!(fa.values, fb.values);
        }
    }

    #[test]
    fn zero_noise_replicas_are_identical() {
        let frf = single_mode().frf(&band_grid(48.0, 56.0, 0.1).unwrap()).unwrap();
        let copies = replicate_with_noise(&frf, 5, 0.0, 9).unwrap();
        assert_eq!(copies.len(), 5);
        for copy in &copies {
            assert_eq!(copy.values, frf.values);
        }
    }

    #[test]
    fn replication_count_matches_request() {
        let frf = single_mode().frf(&band_grid(48.0, 56.0, 0.5).unwrap()).unwrap();
        assert_eq!(replicate_with_noise(&frf, 20, 0.05, 1).unwrap().len(), 20);
        assert!(replicate_with_noise(&frf, 0, 0.05, 1).is_err());
    }

    #[test]
    fn damage_reduces_frequencies_only() {
        let model = single_mode();
        let damaged = model.apply_damage(0.005).unwrap();
        assert_relative_eq!(damaged.modes[0].natural_frequency_hz, 51.74, max_relative = 1e-12);
        assert_eq!(damaged.modes[0].damping_ratio, 0.01);
        assert_eq!(damaged.modes[0].residue, 1.0);

        let heavy = model.apply_damage(0.035).unwrap();
        assert_relative_eq!(heavy.modes[0].natural_frequency_hz, 50.18, max_relative = 1e-12);

        let same = model.apply_damage(0.0).unwrap();
        assert_eq!(same, model);
        assert!(model.apply_damage(1.0).is_err());
    }

    #[test]
    fn band_grid_matches_protocol_spacing() {
        let grid = band_grid(48.0, 56.0, 0.0488).unwrap();
        assert_eq!(grid.len(), 164);
        assert_relative_eq!(grid[1] - grid[0], 0.0488, max_relative = 1e-12);
        assert!(*grid.last().unwrap() <= 56.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]

            #[test]
            fn hermitian_symmetry(
                fn_hz in 1.0f64..200.0,
                zeta in 1e-3f64..0.5,
                residue in prop_oneof![-10.0f64..-0.01, 0.01f64..10.0],
                f in 0.0f64..300.0,
            ) {
                let model = ModalModel::single_mode(fn_hz, zeta, residue).unwrap();
                let pos = model.accelerance_at(f);
                let neg = model.accelerance_at(-f);
                prop_assert!((neg - pos.conj()).norm() <= 1e-12 * pos.norm().max(1.0));
            }

            #[test]
            fn damage_composes_multiplicatively(
                fn_hz in 10.0f64..100.0,
                step in 0.001f64..0.02,
            ) {
                let model = ModalModel::single_mode(fn_hz, 0.01, 1.0).unwrap();
                let mut repeated = model.clone();
                for _ in 0..7 {
                    repeated = repeated.apply_damage(step).unwrap();
                }
                let once = model.apply_damage(1.0 - (1.0 - step).powi(7)).unwrap();
                prop_assert!(
                    (repeated.modes[0].natural_frequency_hz - once.modes[0].natural_frequency_hz).abs()
                        <= 1e-9 * fn_hz
                );
            }
        }
    }
}
