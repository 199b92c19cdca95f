//! H1 FRF estimation from excitation/response time histories.
//!
//! The estimator divides both channels into windowed blocks, averages the
//! cross- and auto-spectra over blocks, and forms `H1 = G_zu / G_zz`. The
//! companion coherence diagnostic is `gamma^2 = |G_zu|^2 / (G_zz * G_uu)`.
//! Block spectra are energy-corrected for the window so that per-spectrum
//! quantities stay consistent; the correction cancels in both ratios.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modal::{FrfMeta, FrfRecord};

/// A sampled time history for one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    /// Seconds per sample.
    pub dt: f64,
    pub samples: Vec<f64>,
    /// Free-form channel label ("force", "acceleration", ...).
    pub channel: String,
}

impl TimeSeries {
    pub fn new(dt: f64, samples: Vec<f64>, channel: impl Into<String>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
        }
        if samples.is_empty() {
            return Err(Error::InvalidInput("time series has no samples".into()));
        }
        Ok(TimeSeries {
            dt,
            samples,
            channel: channel.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hanning,
    Rectangular,
}

/// Block-averaging setup for the spectral estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub block_size: usize,
    pub n_blocks: usize,
    pub window: WindowKind,
    /// Fraction of each block shared with the next, in `[0, 1)`. The
    /// acquisition protocol this mirrors used contiguous blocks, so the
    /// default is zero.
    pub overlap_fraction: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            block_size: 16384,
            n_blocks: 20,
            window: WindowKind::Hanning,
            overlap_fraction: 0.0,
        }
    }
}

impl SpectralConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size < 2 {
            return Err(Error::InvalidInput(format!(
                "block size must be >= 2, got {}",
                self.block_size
            )));
        }
        if self.n_blocks < 1 {
            return Err(Error::InvalidInput("need at least one block".into()));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::InvalidInput(format!(
                "overlap fraction must lie in [0, 1), got {}",
                self.overlap_fraction
            )));
        }
        Ok(())
    }

    /// Samples between consecutive block starts.
    pub fn hop(&self) -> usize {
        (((self.block_size as f64) * (1.0 - self.overlap_fraction)).round() as usize).max(1)
    }

    /// Minimum number of samples each channel must provide.
    pub fn required_samples(&self) -> usize {
        (self.n_blocks - 1) * self.hop() + self.block_size
    }
}

/// Coherence spectrum on the same grid as the matching H1 estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceRecord {
    pub frequencies_hz: Vec<f64>,
    pub values: Vec<f64>,
}

struct AveragedSpectra {
    frequencies_hz: Vec<f64>,
    /// Force auto-spectrum, `mean |S_z|^2`.
    g_zz: Vec<f64>,
    /// Response auto-spectrum, `mean |S_u|^2`.
    g_uu: Vec<f64>,
    /// Cross-spectrum, `mean S_u * conj(S_z)`.
    g_zu: Vec<Complex64>,
}

fn window_samples(kind: WindowKind, n: usize) -> Vec<f64> {
    match kind {
        WindowKind::Rectangular => vec![1.0; n],
        WindowKind::Hanning => (0..n)
            .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
            .collect(),
    }
}

fn averaged_spectra(
    force: &TimeSeries,
    response: &TimeSeries,
    cfg: &SpectralConfig,
) -> Result<AveragedSpectra> {
    cfg.validate()?;
    if (force.dt - response.dt).abs() > 1e-12 * force.dt.max(response.dt) {
        return Err(Error::Mismatch(format!(
            "channel time steps differ: {} s vs {} s",
            force.dt, response.dt
        )));
    }
    if force.samples.len() != response.samples.len() {
        return Err(Error::Mismatch(format!(
            "channel lengths differ: {} vs {} samples",
            force.samples.len(),
            response.samples.len()
        )));
    }
    let required = cfg.required_samples();
    if force.samples.len() < required {
        return Err(Error::InvalidInput(format!(
            "{} samples available but {} blocks of {} (overlap {}) require at least {required}",
            force.samples.len(),
            cfg.n_blocks,
            cfg.block_size,
            cfg.overlap_fraction
        )));
    }

    let n = cfg.block_size;
    let window = window_samples(cfg.window, n);
    // Energy correction keeps auto-spectra consistent across window choices;
    // it cancels in the H1 and coherence ratios.
    let gain = (window.iter().map(|w| w * w).sum::<f64>()).sqrt();
    let n_bins = n / 2 + 1;

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);

    let mut g_zz = vec![0.0; n_bins];
    let mut g_uu = vec![0.0; n_bins];
    let mut g_zu = vec![Complex64::new(0.0, 0.0); n_bins];
    let mut buf_z = vec![Complex64::new(0.0, 0.0); n];
    let mut buf_u = vec![Complex64::new(0.0, 0.0); n];

    for block in 0..cfg.n_blocks {
        let start = block * cfg.hop();
        for i in 0..n {
            buf_z[i] = Complex64::new(force.samples[start + i] * window[i] / gain, 0.0);
            buf_u[i] = Complex64::new(response.samples[start + i] * window[i] / gain, 0.0);
        }
        fft.process(&mut buf_z);
        fft.process(&mut buf_u);
        for bin in 0..n_bins {
            g_zz[bin] += buf_z[bin].norm_sqr();
            g_uu[bin] += buf_u[bin].norm_sqr();
            g_zu[bin] += buf_u[bin] * buf_z[bin].conj();
        }
    }
    let scale = 1.0 / cfg.n_blocks as f64;
    for bin in 0..n_bins {
        g_zz[bin] *= scale;
        g_uu[bin] *= scale;
        g_zu[bin] *= scale;
    }

    let df = 1.0 / (n as f64 * force.dt);
    let frequencies_hz = (0..n_bins).map(|i| i as f64 * df).collect();
    Ok(AveragedSpectra {
        frequencies_hz,
        g_zz,
        g_uu,
        g_zu,
    })
}

/// H1 FRF estimate `G_zu / G_zz` on the grid from 0 to Nyquist.
///
/// A bin where the force auto-spectrum is exactly zero has no defined ratio
/// and is reported as an error rather than divided through.
pub fn h1_estimate(
    force: &TimeSeries,
    response: &TimeSeries,
    cfg: &SpectralConfig,
) -> Result<FrfRecord> {
    let spectra = averaged_spectra(force, response, cfg)?;
    let mut values = Vec::with_capacity(spectra.g_zu.len());
    for (bin, (&gzz, &gzu)) in spectra.g_zz.iter().zip(&spectra.g_zu).enumerate() {
        if gzz == 0.0 {
            return Err(Error::ZeroForcePower {
                bin,
                freq_hz: spectra.frequencies_hz[bin],
            });
        }
        values.push(gzu / gzz);
    }
    FrfRecord::new(
        spectra.frequencies_hz,
        values,
        FrfMeta {
            structure_id: String::new(),
            condition: String::new(),
            boundary: String::new(),
        },
    )
}

/// Magnitude-squared coherence, clamped to `[0, 1]` after rounding.
pub fn coherence(
    force: &TimeSeries,
    response: &TimeSeries,
    cfg: &SpectralConfig,
) -> Result<CoherenceRecord> {
    let spectra = averaged_spectra(force, response, cfg)?;
    let mut values = Vec::with_capacity(spectra.g_zz.len());
    for bin in 0..spectra.g_zz.len() {
        let gzz = spectra.g_zz[bin];
        if gzz == 0.0 {
            return Err(Error::ZeroForcePower {
                bin,
                freq_hz: spectra.frequencies_hz[bin],
            });
        }
        let guu = spectra.g_uu[bin];
        let value = if guu == 0.0 {
            0.0
        } else {
            (spectra.g_zu[bin].norm_sqr() / (gzz * guu)).clamp(0.0, 1.0)
        };
        values.push(value);
    }
    Ok(CoherenceRecord {
        frequencies_hz: spectra.frequencies_hz,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn white_noise(n: usize, dt: f64, seed: u64, channel: &str) -> TimeSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        TimeSeries::new(dt, samples, channel).unwrap()
    }

    fn small_cfg(window: WindowKind, n_blocks: usize) -> SpectralConfig {
        SpectralConfig {
            block_size: 256,
            n_blocks,
            window,
            overlap_fraction: 0.0,
        }
    }

    #[test]
    fn passthrough_gives_unit_frf() {
        let force = white_noise(1024, 1e-3, 5, "force");
        let response = TimeSeries::new(1e-3, force.samples.clone(), "acceleration").unwrap();
        let frf = h1_estimate(&force, &response, &small_cfg(WindowKind::Hanning, 4)).unwrap();
        for v in &frf.values {
            assert_relative_eq!(v.re, 1.0, max_relative = 1e-10);
            assert!(v.im.abs() < 1e-10);
        }
    }

    #[test]
    fn linear_gain_scales_the_frf() {
        let force = white_noise(1024, 1e-3, 6, "force");
        let response = TimeSeries::new(
            1e-3,
            force.samples.iter().map(|s| 2.0 * s).collect(),
            "acceleration",
        )
        .unwrap();
        let frf = h1_estimate(&force, &response, &small_cfg(WindowKind::Hanning, 4)).unwrap();
        for v in &frf.values {
            assert_relative_eq!(v.re, 2.0, max_relative = 1e-10);
            assert!(v.im.abs() < 1e-9);
        }
    }

    #[test]
    fn rectangular_single_block_reproduces_raw_fft_ratio() {
        let force = white_noise(256, 2e-3, 7, "force");
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let response = TimeSeries::new(
            2e-3,
            force
                .samples
                .iter()
                .map(|s| 0.3 * s + 0.1 * rng.random::<f64>())
                .collect(),
            "acceleration",
        )
        .unwrap();
        let cfg = small_cfg(WindowKind::Rectangular, 1);
        let frf = h1_estimate(&force, &response, &cfg).unwrap();

        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(256);
        let mut z: Vec<Complex64> = force.samples.iter().map(|&s| Complex64::new(s, 0.0)).collect();
        let mut u: Vec<Complex64> = response
            .samples
            .iter()
            .map(|&s| Complex64::new(s, 0.0))
            .collect();
        fft.process(&mut z);
        fft.process(&mut u);
        for bin in 0..frf.len() {
            let expected = u[bin] / z[bin];
            assert_relative_eq!(frf.values[bin].re, expected.re, max_relative = 1e-12, epsilon = 1e-12);
            assert_relative_eq!(frf.values[bin].im, expected.im, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn grid_spacing_is_reciprocal_block_duration() {
        let force = white_noise(1024, 1.25e-3, 9, "force");
        let response = white_noise(1024, 1.25e-3, 10, "acceleration");
        let cfg = small_cfg(WindowKind::Hanning, 4);
        let frf = h1_estimate(&force, &response, &cfg).unwrap();
        assert_eq!(frf.len(), 129);
        assert_relative_eq!(
            frf.frequencies_hz[1] - frf.frequencies_hz[0],
            1.0 / (256.0 * 1.25e-3),
            max_relative = 1e-12
        );
    }

    #[test]
    fn coherence_of_single_block_is_one() {
        let force = white_noise(256, 1e-3, 11, "force");
        let response = white_noise(256, 1e-3, 12, "acceleration");
        let coh = coherence(&force, &response, &small_cfg(WindowKind::Hanning, 1)).unwrap();
        for &g in &coh.values {
            assert_relative_eq!(g, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn coherence_of_noiseless_relation_is_one() {
        let force = white_noise(4096, 1e-3, 13, "force");
        let response = TimeSeries::new(
            1e-3,
            force.samples.iter().map(|s| -1.7 * s).collect(),
            "acceleration",
        )
        .unwrap();
        let coh = coherence(&force, &response, &small_cfg(WindowKind::Hanning, 16)).unwrap();
        for &g in &coh.values {
            assert!(g > 1.0 - 1e-9);
        }
    }

    #[test]
    fn coherence_of_independent_signals_is_low() {
        let force = white_noise(256 * 64, 1e-3, 14, "force");
        let response = white_noise(256 * 64, 1e-3, 15, "acceleration");
        let coh = coherence(&force, &response, &small_cfg(WindowKind::Hanning, 64)).unwrap();
        let mean = coh.values.iter().sum::<f64>() / coh.values.len() as f64;
        assert!(mean < 0.2, "mean coherence {mean} for independent channels");
    }

    #[test]
    fn mismatched_channels_are_rejected() {
        let force = white_noise(512, 1e-3, 16, "force");
        let shorter = white_noise(256, 1e-3, 17, "acceleration");
        let other_dt = white_noise(512, 2e-3, 18, "acceleration");
        let cfg = small_cfg(WindowKind::Hanning, 2);
        assert!(matches!(
            h1_estimate(&force, &shorter, &cfg),
            Err(Error::Mismatch(_))
        ));
        assert!(matches!(
            h1_estimate(&force, &other_dt, &cfg),
            Err(Error::Mismatch(_))
        ));
    }

    #[test]
    fn short_input_error_names_the_required_minimum() {
        let force = white_noise(300, 1e-3, 19, "force");
        let response = white_noise(300, 1e-3, 20, "acceleration");
        let cfg = small_cfg(WindowKind::Hanning, 2);
        let err = h1_estimate(&force, &response, &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("512"), "error should name the required minimum: {msg}");
    }

    #[test]
    fn zero_force_reports_the_bin() {
        let force = TimeSeries::new(1e-3, vec![0.0; 256], "force").unwrap();
        let response = white_noise(256, 1e-3, 21, "acceleration");
        let err = h1_estimate(&force, &response, &small_cfg(WindowKind::Hanning, 1)).unwrap_err();
        assert!(matches!(err, Error::ZeroForcePower { bin: 0, .. }));
    }
}
