//! File formats: numeric CSVs and model/config JSON.
//!
//! Numeric CSV fields are written with 17 significant digits
//! (`{:.16e}`), so a write-read round trip reproduces every `f64` exactly.
//! Readers are strict: a wrong header or an unparseable field is reported
//! with its 1-based line number.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use num_complex::Complex64;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{GpModel, HyperBounds, Hyperparameters, TrainingSet};
use crate::modal::{FrfMeta, FrfRecord, ModalModel};
use crate::novelty::{NoveltyVerdict, SweepRow, ThresholdReport};
use crate::omgp::{ComponentParams, OmgpModel};
use crate::spectral::{CoherenceRecord, TimeSeries};

/// 17-significant-digit rendering; round-trips any finite `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(field: &str, path: &Path, line: usize, column: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::csv(path, line, format!("cannot parse {column} value {field:?}")))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn expect_header(lines: &[String], path: &Path, header: &str) -> Result<()> {
    match lines.first() {
        Some(first) if first.trim() == header => Ok(()),
        Some(first) => Err(Error::csv(
            path,
            1,
            format!("expected header {header:?}, found {first:?}"),
        )),
        None => Err(Error::csv(path, 1, "file is empty")),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

// --- FRF CSV: freq_hz,real,imag ---

pub fn write_frf_csv(path: &Path, frf: &FrfRecord) -> Result<()> {
    let mut out = String::from("freq_hz,real,imag\n");
    for (f, v) in frf.frequencies_hz.iter().zip(&frf.values) {
        out.push_str(&format!("{},{},{}\n", fmt_f64(*f), fmt_f64(v.re), fmt_f64(v.im)));
    }
    write_file(path, &out)
}

pub fn read_frf_csv(path: &Path) -> Result<FrfRecord> {
    let lines = read_lines(path)?;
    expect_header(&lines, path, "freq_hz,real,imag")?;
    let mut frequencies = Vec::new();
    let mut values = Vec::new();
    for (idx, line) in lines.iter().enumerate().skip(1) {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::csv(
                path,
                line_no,
                format!("expected 3 fields, found {}", fields.len()),
            ));
        }
        frequencies.push(parse_f64(fields[0], path, line_no, "freq_hz")?);
        values.push(Complex64::new(
            parse_f64(fields[1], path, line_no, "real")?,
            parse_f64(fields[2], path, line_no, "imag")?,
        ));
    }
    FrfRecord::new(frequencies, values, FrfMeta::default())
}

// --- Coherence CSV: freq_hz,coherence ---

pub fn write_coherence_csv(path: &Path, coh: &CoherenceRecord) -> Result<()> {
    let mut out = String::from("freq_hz,coherence\n");
    for (f, g) in coh.frequencies_hz.iter().zip(&coh.values) {
        out.push_str(&format!("{},{}\n", fmt_f64(*f), fmt_f64(*g)));
    }
    write_file(path, &out)
}

// --- Time-series CSV: t_s,value ---

pub fn write_time_series_csv(path: &Path, series: &TimeSeries) -> Result<()> {
    let mut out = String::from("t_s,value\n");
    for (i, v) in series.samples.iter().enumerate() {
        out.push_str(&format!("{},{}\n", fmt_f64(i as f64 * series.dt), fmt_f64(*v)));
    }
    write_file(path, &out)
}

pub fn read_time_series_csv(path: &Path, channel: &str) -> Result<TimeSeries> {
    let lines = read_lines(path)?;
    expect_header(&lines, path, "t_s,value")?;
    let mut times = Vec::new();
    let mut samples = Vec::new();
    for (idx, line) in lines.iter().enumerate().skip(1) {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return Err(Error::csv(
                path,
                line_no,
                format!("expected 2 fields, found {}", fields.len()),
            ));
        }
        times.push(parse_f64(fields[0], path, line_no, "t_s")?);
        samples.push(parse_f64(fields[1], path, line_no, "value")?);
    }
    if times.len() < 2 {
        return Err(Error::csv(path, lines.len(), "need at least 2 samples"));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(Error::csv(path, 3, "time column must be strictly increasing"));
    }
    for (i, pair) in times.windows(2).enumerate() {
        let step = pair[1] - pair[0];
        if (step - dt).abs() > 1e-6 * dt {
            return Err(Error::csv(
                path,
                i + 3,
                format!("non-uniform time step {step} (expected {dt})"),
            ));
        }
    }
    TimeSeries::new(dt, samples, channel)
}

// --- Verdicts CSV ---

pub fn write_verdicts_csv(path: &Path, rows: &[(String, NoveltyVerdict)]) -> Result<()> {
    let mut out = String::from("test_id,score_real,score_imag,score_total,threshold,outlying\n");
    for (id, v) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            id,
            fmt_f64(v.per_part.0),
            fmt_f64(v.per_part.1),
            fmt_f64(v.score),
            fmt_f64(v.threshold),
            v.outlying
        ));
    }
    write_file(path, &out)
}

// --- Sweep CSV ---

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow], threshold: f64) -> Result<()> {
    let mut out = String::from("member,reduction_pct,replica,score_real,score_imag,score_total,outlying\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.member + 1,
            fmt_f64(row.reduction * 100.0),
            row.replica,
            fmt_f64(row.score_real),
            fmt_f64(row.score_imag),
            fmt_f64(row.score_total),
            row.score_total > threshold
        ));
    }
    write_file(path, &out)
}

// --- Posterior CSVs ---

/// Per-component predictive mean/variance columns on a grid.
pub fn write_posterior_csv(
    path: &Path,
    grid: &[f64],
    means: &[Vec<f64>],
    variances: &[Vec<f64>],
) -> Result<()> {
    let k = means.len();
    let mut out = String::from("freq_hz");
    for c in 0..k {
        out.push_str(&format!(",comp{}_mean,comp{}_var", c + 1, c + 1));
    }
    out.push('\n');
    for (i, f) in grid.iter().enumerate() {
        out.push_str(&fmt_f64(*f));
        for c in 0..k {
            out.push_str(&format!(",{},{}", fmt_f64(means[c][i]), fmt_f64(variances[c][i])));
        }
        out.push('\n');
    }
    write_file(path, &out)
}

/// Sampled magnitude envelope: per-bin mean, min, max of `|re + i*im|`.
pub fn write_envelope_csv(
    path: &Path,
    grid: &[f64],
    mean: &[f64],
    min: &[f64],
    max: &[f64],
) -> Result<()> {
    let mut out = String::from("freq_hz,mag_mean,mag_min,mag_max\n");
    for i in 0..grid.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(grid[i]),
            fmt_f64(mean[i]),
            fmt_f64(min[i]),
            fmt_f64(max[i])
        ));
    }
    write_file(path, &out)
}

// --- JSON helpers ---

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    write_file(path, &(text + "\n"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

// --- Modal model JSON: {modes:[{f_n_hz, zeta, residue}], dof_pair:[i,j]} ---

pub fn write_modal_model_json(path: &Path, model: &ModalModel) -> Result<()> {
    write_json(path, model)
}

pub fn read_modal_model_json(path: &Path) -> Result<ModalModel> {
    let model: ModalModel = read_json(path)?;
    model.validate()?;
    Ok(model)
}

// --- GP model JSON ---

pub const GP_MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModelFile {
    pub schema_version: u32,
    pub hyper: Hyperparameters,
    pub bounds: HyperBounds,
    pub training: TrainingSet,
    pub nlml: f64,
    pub converged: bool,
}

impl GpModelFile {
    pub fn from_model(model: &GpModel, bounds: &HyperBounds) -> GpModelFile {
        GpModelFile {
            schema_version: GP_MODEL_SCHEMA_VERSION,
            hyper: model.hyper.clone(),
            bounds: *bounds,
            training: model.training.clone(),
            nlml: model.nlml,
            converged: model.converged,
        }
    }

    /// Rebuilds the runtime model (the factorization is recomputed, not
    /// stored).
    pub fn into_model(self) -> Result<(GpModel, HyperBounds)> {
        if self.schema_version != GP_MODEL_SCHEMA_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported GP model schema version {}",
                self.schema_version
            )));
        }
        let converged = self.converged;
        let mut model = GpModel::at(self.hyper, self.training)?;
        model.converged = converged;
        Ok((model, self.bounds))
    }
}

pub fn write_gp_model_json(path: &Path, model: &GpModel, bounds: &HyperBounds) -> Result<()> {
    write_json(path, &GpModelFile::from_model(model, bounds))
}

pub fn read_gp_model_json(path: &Path) -> Result<(GpModel, HyperBounds)> {
    read_json::<GpModelFile>(path)?.into_model()
}

// --- OMGP model JSON ---

pub const OMGP_MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OmgpModelFile {
    pub schema_version: u32,
    pub k: usize,
    pub components: Vec<ComponentParams>,
    pub noise_std: f64,
    /// Responsibility matrix, row-major.
    pub responsibilities: Vec<Vec<f64>>,
    pub training: TrainingSet,
    pub bound_trace: Vec<f64>,
    pub converged: bool,
}

impl OmgpModelFile {
    pub fn from_model(model: &OmgpModel) -> OmgpModelFile {
        let responsibilities = (0..model.responsibilities.nrows())
            .map(|i| {
                (0..model.responsibilities.ncols())
                    .map(|k| model.responsibilities[(i, k)])
                    .collect()
            })
            .collect();
        OmgpModelFile {
            schema_version: OMGP_MODEL_SCHEMA_VERSION,
            k: model.k(),
            components: model.components.clone(),
            noise_std: model.noise_std,
            responsibilities,
            training: model.training.clone(),
            bound_trace: model.bound_trace.clone(),
            converged: model.converged,
        }
    }

    pub fn into_model(self) -> Result<OmgpModel> {
        if self.schema_version != OMGP_MODEL_SCHEMA_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported OMGP model schema version {}",
                self.schema_version
            )));
        }
        if self.components.len() != self.k {
            return Err(Error::Mismatch(format!(
                "file declares k = {} but holds {} components",
                self.k,
                self.components.len()
            )));
        }
        let n = self.responsibilities.len();
        let k = self.k;
        for (i, row) in self.responsibilities.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Mismatch(format!(
                    "responsibility row {i} has {} entries, expected {k}",
                    row.len()
                )));
            }
        }
        let matrix = nalgebra::DMatrix::from_fn(n, k, |i, j| self.responsibilities[i][j]);
        let mut model = OmgpModel::new(self.components, self.noise_std, matrix, self.training)?;
        model.bound_trace = self.bound_trace;
        model.converged = self.converged;
        Ok(model)
    }
}

pub fn write_omgp_model_json(path: &Path, model: &OmgpModel) -> Result<()> {
    write_json(path, &OmgpModelFile::from_model(model))
}

pub fn read_omgp_model_json(path: &Path) -> Result<OmgpModel> {
    read_json::<OmgpModelFile>(path)?.into_model()
}

pub fn write_threshold_json(path: &Path, report: &ThresholdReport) -> Result<()> {
    write_json(path, report)
}

pub fn read_threshold_json(path: &Path) -> Result<ThresholdReport> {
    read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::Part;
    use crate::modal::band_grid;
    use tempfile::tempdir;

    #[test]
    fn frf_csv_round_trips_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("frf.csv");
        let model = ModalModel::single_mode(52.0, 0.01, 1.0).unwrap();
        let frf = model.frf(&band_grid(48.0, 56.0, 0.25).unwrap()).unwrap();
        write_frf_csv(&path, &frf).unwrap();
        let back = read_frf_csv(&path).unwrap();
        assert_eq!(back.frequencies_hz, frf.frequencies_hz);
        assert_eq!(back.values, frf.values);
    }

    #[test]
    fn malformed_csv_reports_the_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "freq_hz,real,imag\n1.0,2.0,3.0\n4.0,oops,6.0\n").unwrap();
        let err = read_frf_csv(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":3:"), "message should carry line 3: {msg}");
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("head.csv");
        std::fs::write(&path, "f,re,im\n1.0,2.0,3.0\n").unwrap();
        assert!(read_frf_csv(&path).is_err());
    }

    #[test]
    fn time_series_csv_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ts.csv");
        let series = TimeSeries::new(1.25e-3, vec![0.1, -0.2, 0.3, 0.05], "force").unwrap();
        write_time_series_csv(&path, &series).unwrap();
        let back = read_time_series_csv(&path, "force").unwrap();
        assert_eq!(back.samples, series.samples);
        assert!((back.dt - series.dt).abs() < 1e-18);
    }

    #[test]
    fn modal_model_json_uses_the_documented_field_names() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = ModalModel::single_mode(52.0, 0.01, 1.0).unwrap();
        write_modal_model_json(&path, &model).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"f_n_hz\""));
        assert!(text.contains("\"zeta\""));
        assert!(text.contains("\"residue\""));
        assert!(text.contains("\"dof_pair\""));
        assert_eq!(read_modal_model_json(&path).unwrap(), model);
    }

    #[test]
    fn gp_model_json_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("gp.json");
        let hyper = Hyperparameters {
            length_scale: 0.8,
            process_std: 3.0,
            noise_std: 0.4,
            mean_modes: ModalModel::single_mode(52.0, 0.01, 1.0).unwrap(),
            part: Part::Real,
        };
        let x = vec![49.0, 50.0, 51.0, 52.0, 53.0];
        let y = crate::gp::mean_function(&hyper, &x);
        let model = GpModel::at(hyper, TrainingSet::new(x, y, Part::Real).unwrap()).unwrap();
        let bounds = HyperBounds::default();
        write_gp_model_json(&path, &model, &bounds).unwrap();
        let (back, back_bounds) = read_gp_model_json(&path).unwrap();
        assert_eq!(back.hyper, model.hyper);
        assert_eq!(back.training, model.training);
        assert_eq!(back_bounds, bounds);
        assert!((back.nlml - model.nlml).abs() < 1e-12);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn f64_formatting_round_trips(bits in any::<u64>()) {
                let v = f64::from_bits(bits);
                prop_assume!(v.is_finite());
                let parsed: f64 = fmt_f64(v).parse().unwrap();
                prop_assert_eq!(parsed.to_bits(), v.to_bits());
            }
        }
    }
}
