//! Unit-level study frames: a population of units with an embedded
//! experimental sample.
//!
//! The sample is a subset of the population. Sampled units (`z = 1`) carry a
//! treatment indicator and an outcome; non-sampled units carry only
//! covariates. Categorical covariates are expected to arrive already encoded
//! as numeric levels or indicator columns.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One population unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    id: String,
    z: bool,
    w: Option<bool>,
    y: Option<f64>,
    x: Vec<f64>,
}

impl UnitRecord {
    /// A unit selected into the experiment.
    pub fn sampled(id: impl Into<String>, treated: bool, outcome: f64, covariates: Vec<f64>) -> Self {
        UnitRecord {
            id: id.into(),
            z: true,
            w: Some(treated),
            y: Some(outcome),
            x: covariates,
        }
    }

    /// A population unit outside the experiment.
    pub fn unsampled(id: impl Into<String>, covariates: Vec<f64>) -> Self {
        UnitRecord {
            id: id.into(),
            z: false,
            w: None,
            y: None,
            x: covariates,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn in_sample(&self) -> bool {
        self.z
    }

    /// Treatment indicator; `None` for non-sampled units.
    pub fn treated(&self) -> Option<bool> {
        self.w
    }

    /// Observed outcome; `None` for non-sampled units.
    pub fn outcome(&self) -> Option<f64> {
        self.y
    }

    pub fn covariates(&self) -> &[f64] {
        &self.x
    }

    fn with_covariates(&self, x: Vec<f64>) -> Self {
        UnitRecord {
            x,
            ..self.clone()
        }
    }
}

/// A population of `N` units; the `n` units with `z = 1` form the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyFrame {
    covariate_names: Vec<String>,
    units: Vec<UnitRecord>,
    ids: Arc<[String]>,
}

impl StudyFrame {
    /// Builds a frame, checking covariate arity and id uniqueness.
    ///
    /// Sample-composition requirements (`0 < n < N`, both arms present) are
    /// reported by [`validate_frame`] instead, so degenerate frames can still
    /// be constructed and inspected.
    pub fn new(covariate_names: Vec<String>, units: Vec<UnitRecord>) -> Result<Self> {
        let q = covariate_names.len();
        let mut seen = HashSet::with_capacity(units.len());
        for (row, unit) in units.iter().enumerate() {
            if unit.x.len() != q {
                return Err(Error::MalformedRow {
                    row: row + 1,
                    message: format!("expected {q} covariates, found {}", unit.x.len()),
                });
            }
            if !seen.insert(unit.id.as_str()) {
                return Err(Error::DuplicateId(unit.id.clone()));
            }
        }
        let ids = units.iter().map(|u| u.id.clone()).collect();
        Ok(StudyFrame {
            covariate_names,
            units,
            ids,
        })
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    /// Unit ids in frame order, shared with derived score sets.
    pub(crate) fn shared_ids(&self) -> Arc<[String]> {
        self.ids.clone()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Number of covariates `q`.
    pub fn q(&self) -> usize {
        self.covariate_names.len()
    }

    /// Sample size `n`.
    pub fn n(&self) -> usize {
        self.units.iter().filter(|u| u.z).count()
    }

    /// Population size `N`.
    pub fn population_size(&self) -> usize {
        self.units.len()
    }

    /// Index of a covariate by name.
    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    /// One covariate column across all units.
    pub fn column(&self, index: usize) -> Vec<f64> {
        self.units.iter().map(|u| u.x[index]).collect()
    }

    /// `0..q`
    pub fn covariate_indices(&self) -> Vec<usize> {
        (0..self.q()).collect()
    }

    /// Indices of every unit, in frame order.
    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.units.len()).collect()
    }

    pub(crate) fn check_subset(&self, subset: &[usize]) -> Result<()> {
        match subset.iter().find(|&&i| i >= self.q()) {
            Some(&index) => Err(Error::CovariateIndex {
                index,
                count: self.q(),
            }),
            None => Ok(()),
        }
    }
}

/// Column mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSchema {
    pub id: String,
    pub z: String,
    pub w: String,
    pub y: String,
    /// Covariate columns to read, in order. `None` takes every remaining
    /// column in header order.
    pub covariates: Option<Vec<String>>,
}

impl Default for FrameSchema {
    fn default() -> Self {
        FrameSchema {
            id: "id".into(),
            z: "z".into(),
            w: "w".into(),
            y: "y".into(),
            covariates: None,
        }
    }
}

impl FrameSchema {
    pub fn with_covariates(covariates: Vec<String>) -> Self {
        FrameSchema {
            covariates: Some(covariates),
            ..Default::default()
        }
    }
}

/// Reads and validates a study frame from a CSV file.
pub fn load_frame(path: impl AsRef<Path>, schema: &FrameSchema) -> Result<StudyFrame> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_frame(file, schema)
}

/// Reads a study frame from any CSV source. Row order is preserved.
pub fn read_frame<R: Read>(reader: R, schema: &FrameSchema) -> Result<StudyFrame> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = find(&schema.id)?;
    let z_col = find(&schema.z)?;
    let w_col = find(&schema.w)?;
    let y_col = find(&schema.y)?;
    let reserved = [id_col, z_col, w_col, y_col];

    let covariate_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !reserved.contains(i))
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    let covariate_cols = covariate_names
        .iter()
        .map(|name| find(name))
        .collect::<Result<Vec<_>>>()?;

    let mut units = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let bad = |message: String| Error::MalformedRow { row, message };
        let cell = |col: usize| record.get(col).unwrap_or("");

        let id = cell(id_col);
        if id.is_empty() {
            return Err(bad("empty id".into()));
        }
        let z = parse_binary(cell(z_col)).ok_or_else(|| {
            bad(format!("sample indicator must be 0 or 1, found `{}`", cell(z_col)))
        })?;

        let x = covariate_cols
            .iter()
            .zip(&covariate_names)
            .map(|(&col, name)| {
                let raw = cell(col);
                if raw.is_empty() {
                    return Err(bad(format!("missing value for covariate `{name}`")));
                }
                parse_real(raw)
                    .ok_or_else(|| bad(format!("covariate `{name}` is not a number: `{raw}`")))
            })
            .collect::<Result<Vec<_>>>()?;

        let (w_raw, y_raw) = (cell(w_col), cell(y_col));
        let unit = if z {
            if w_raw.is_empty() {
                return Err(bad("missing treatment on sampled unit".into()));
            }
            let w = parse_binary(w_raw).ok_or_else(|| {
                bad(format!("treatment indicator must be 0 or 1, found `{w_raw}`"))
            })?;
            if y_raw.is_empty() {
                return Err(bad("missing outcome on sampled unit".into()));
            }
            let y = parse_real(y_raw)
                .ok_or_else(|| bad(format!("outcome is not a number: `{y_raw}`")))?;
            UnitRecord::sampled(id, w, y, x)
        } else {
            if !w_raw.is_empty() || !y_raw.is_empty() {
                return Err(bad("treatment/outcome present on non-sampled unit".into()));
            }
            UnitRecord::unsampled(id, x)
        };
        units.push(unit);
    }
    StudyFrame::new(covariate_names, units)
}

fn parse_binary(raw: &str) -> Option<bool> {
    match raw {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    }
}

fn parse_real(raw: &str) -> Option<f64> {
    raw.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Writes a frame as CSV with columns `id,z,w,y,<covariates...>`.
///
/// Reals are written in shortest round-trip form, so reloading reproduces
/// the frame exactly.
pub fn write_frame<W: Write>(frame: &StudyFrame, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "z".into(), "w".into(), "y".into()];
    header.extend(frame.covariate_names.iter().cloned());
    wtr.write_record(&header)?;
    for unit in &frame.units {
        let mut row = Vec::with_capacity(header.len());
        row.push(unit.id.clone());
        row.push(if unit.z { "1" } else { "0" }.to_string());
        row.push(unit.w.map(|w| if w { "1" } else { "0" }.to_string()).unwrap_or_default());
        row.push(unit.y.map(|y| y.to_string()).unwrap_or_default());
        row.extend(unit.x.iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// A single frame-level invariant violation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    EmptyPopulation,
    NoSampledUnits,
    NoNonSampledUnits,
    NoTreatedUnits,
    NoControlUnits,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Violation::EmptyPopulation => "population is empty",
            Violation::NoSampledUnits => "no sampled units",
            Violation::NoNonSampledUnits => "no non-sampled units; bounds degenerate",
            Violation::NoTreatedUnits => "no treated units",
            Violation::NoControlUnits => "no control units",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidFrame(
                self.violations.iter().map(ToString::to_string).collect(),
            ))
        }
    }
}

/// Reports every sample-composition violation in the frame.
pub fn validate_frame(frame: &StudyFrame) -> ValidationReport {
    let mut violations = Vec::new();
    let big_n = frame.population_size();
    let n = frame.n();
    if big_n == 0 {
        violations.push(Violation::EmptyPopulation);
    }
    if n == 0 {
        violations.push(Violation::NoSampledUnits);
    } else if n == big_n {
        violations.push(Violation::NoNonSampledUnits);
    }
    if n > 0 {
        let treated = frame.units.iter().filter(|u| u.w == Some(true)).count();
        if treated == 0 {
            violations.push(Violation::NoTreatedUnits);
        }
        if treated == n {
            violations.push(Violation::NoControlUnits);
        }
    }
    ValidationReport { violations }
}

/// Per-covariate location and scale used to standardize a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardization {
    /// Computes population means and `N - 1` standard deviations for the
    /// selected covariate columns.
    pub fn fit(frame: &StudyFrame, subset: &[usize]) -> Result<Self> {
        frame.check_subset(subset)?;
        let big_n = frame.population_size();
        let mut means = Vec::with_capacity(subset.len());
        let mut sds = Vec::with_capacity(subset.len());
        for &j in subset {
            let column = frame.column(j);
            let mean = column.iter().sum::<f64>() / big_n as f64;
            let ss: f64 = column.iter().map(|v| (v - mean).powi(2)).sum();
            let sd = if big_n > 1 {
                (ss / (big_n - 1) as f64).sqrt()
            } else {
                0.0
            };
            if !(sd > 0.0) || !sd.is_finite() {
                return Err(Error::ZeroVariance(frame.covariate_names[j].clone()));
            }
            means.push(mean);
            sds.push(sd);
        }
        Ok(Standardization { means, sds })
    }

    /// Standardizes one already-subsetted covariate vector.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Rescales every covariate to mean 0 and sd 1 over all `N` units.
pub fn standardize_covariates(frame: &StudyFrame) -> Result<(StudyFrame, Standardization)> {
    let all: Vec<usize> = (0..frame.q()).collect();
    let transform = Standardization::fit(frame, &all)?;
    let units = frame
        .units
        .iter()
        .map(|u| u.with_covariates(transform.apply(&u.x)))
        .collect();
    Ok((
        StudyFrame {
            covariate_names: frame.covariate_names.clone(),
            units,
            ids: frame.ids.clone(),
        },
        transform,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(text: &str) -> Result<StudyFrame> {
        read_frame(text.as_bytes(), &FrameSchema::default())
    }

    #[test]
    fn three_row_frame() {
        let frame = csv("id,z,w,y,a,b\n1,1,1,0.5,1,2\n2,0,,,3,4\n3,0,,,5,6\n").unwrap();
        assert_eq!(frame.population_size(), 3);
        assert_eq!(frame.n(), 1);
        assert_eq!(frame.q(), 2);
        assert_eq!(frame.units()[1].treated(), None);
        assert_eq!(frame.units()[1].outcome(), None);
        assert_eq!(frame.units()[2].covariates(), &[5.0, 6.0]);
    }

    #[test]
    fn missing_outcome_on_sampled_unit() {
        let err = csv("id,z,w,y,a\n1,1,1,,1\n").unwrap_err();
        assert!(err.to_string().contains("missing outcome on sampled unit"), "{err}");
    }

    #[test]
    fn non_binary_indicators() {
        assert!(csv("id,z,w,y,a\n1,2,1,1,1\n").is_err());
        assert!(csv("id,z,w,y,a\n1,1,0.5,1,1\n").is_err());
    }

    #[test]
    fn duplicate_ids() {
        let err = csv("id,z,w,y,a\n1,1,1,1,1\n1,0,,,1\n").unwrap_err();
        assert!(matches!(err, Error::DuplicateId(ref id) if id == "1"));
    }

    #[test]
    fn missing_covariate_value_rejected() {
        assert!(csv("id,z,w,y,a\n1,0,,,\n").is_err());
    }

    #[test]
    fn schema_names_missing_column() {
        let schema = FrameSchema::with_covariates(vec!["nope".into()]);
        let err = read_frame("id,z,w,y,a\n1,0,,,1\n".as_bytes(), &schema).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn validation_reports() {
        let ok = csv("id,z,w,y,a\n1,1,1,1,1\n2,1,0,1,2\n3,0,,,3\n").unwrap();
        assert!(validate_frame(&ok).is_empty());

        let no_controls = csv("id,z,w,y,a\n1,1,1,1,1\n2,1,1,1,2\n3,0,,,3\n").unwrap();
        assert_eq!(validate_frame(&no_controls).violations, vec![Violation::NoControlUnits]);

        let census = csv("id,z,w,y,a\n1,1,1,1,1\n2,1,0,1,2\n").unwrap();
        let report = validate_frame(&census);
        assert_eq!(report.violations, vec![Violation::NoNonSampledUnits]);
        assert_eq!(report.violations[0].to_string(), "no non-sampled units; bounds degenerate");
    }

    #[test]
    fn standardize_two_points() {
        let frame = csv("id,z,w,y,a\n1,1,1,1,0\n2,0,,,10\n").unwrap();
        let (std_frame, transform) = standardize_covariates(&frame).unwrap();
        assert_eq!(transform.means, vec![5.0]);
        // sd with denominator N - 1: sqrt(50)
        assert!((transform.sds[0] - 50f64.sqrt()).abs() < 1e-12);
        // (0 - 5) / sqrt(50) = -1/sqrt(2)
        let col = std_frame.column(0);
        assert!((col[0] + 0.5f64.sqrt()).abs() < 1e-12);
        assert!((col[1] - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn standardize_constant_column_errors() {
        let frame = csv("id,z,w,y,a,flat\n1,1,1,1,0,3\n2,0,,,10,3\n").unwrap();
        assert!(matches!(
            standardize_covariates(&frame),
            Err(Error::ZeroVariance(ref c)) if c == "flat"
        ));
    }

    #[test]
    fn standardize_idempotent() {
        let frame = csv("id,z,w,y,a,b\n1,1,1,1,0,3\n2,0,,,10,-1\n3,1,0,2,4,7\n4,0,,,-2,0\n").unwrap();
        let (once, _) = standardize_covariates(&frame).unwrap();
        let (twice, _) = standardize_covariates(&once).unwrap();
        for (a, b) in once.units().iter().zip(twice.units()) {
            for (u, v) in a.covariates().iter().zip(b.covariates()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
