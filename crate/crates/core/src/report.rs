//! End-to-end pipelines behind the command-line front end, and the files
//! they write.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::bounds::{precision_gain, stratified_bounds, unstratified_bounds, BoundsEstimate, OutcomeRange, RangePolicy};
use crate::data::{validate_frame, StudyFrame};
use crate::error::{Error, Result};
use crate::overlap::{estimate_overlap, OverlapStat};
use crate::propensity::{fit_logistic, predict_scores, FitOptions, LogisticModel, ScoreSet};
use crate::simulation::{subsets_of_size, ScenarioConfig, SweepResult, SweepTiming};
use crate::stratification::{
    stratify, stratum_summaries, StrataRule, StratumAssignment, StratumSummary,
};

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOptions {
    pub range: OutcomeRange,
    pub rule: StrataRule,
    pub policy: RangePolicy,
    pub ridge: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMeta {
    pub population_size: usize,
    pub sample_size: usize,
    pub covariates: Vec<String>,
    pub range: OutcomeRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub study: StudyMeta,
    pub model: LogisticModel,
    pub overlap: OverlapStat,
    pub k: usize,
    pub unstratified: BoundsEstimate,
    pub stratified: BoundsEstimate,
    pub precision_gain: f64,
    /// R² of the propensity covariates (plus treatment) for the sample
    /// outcome; absent when the sample is too small or the design singular.
    pub r2: Option<f64>,
    pub strata: Vec<StratumSummary>,
    pub warnings: Vec<String>,
}

/// Validated frame, fitted model and scores: the shared front half of
/// `analyze` and `overlap`.
pub struct Scored {
    pub model: LogisticModel,
    pub scores: ScoreSet,
    pub warnings: Vec<String>,
}

pub fn score_frame(frame: &StudyFrame, ridge: bool) -> Result<Scored> {
    validate_frame(frame).into_result()?;
    let subset = frame.covariate_indices();
    let options = if ridge { FitOptions::ridge() } else { FitOptions::default() };
    let model = fit_logistic(frame, &subset, &options)?;
    let mut warnings = Vec::new();
    if ridge {
        warnings.push(format!("ridge penalty {} applied to standardized coefficients", model.ridge));
    }
    if !model.converged {
        warnings.push(format!(
            "propensity model did not converge after {} iterations (gradient max-norm {:e})",
            model.iterations, model.final_gradient_norm
        ));
    }
    let scores = predict_scores(&model, frame)?;
    Ok(Scored { model, scores, warnings })
}

/// Fit, score, stratify and bound a study frame.
pub fn analyze(frame: &StudyFrame, options: &AnalysisOptions) -> Result<AnalysisReport> {
    let Scored { model, scores, mut warnings } = score_frame(frame, options.ridge)?;
    let overlap = estimate_overlap(&scores)?;
    let unstratified = unstratified_bounds(frame, options.range)?;
    let assignment = stratify(&scores, &options.rule)?;
    let k = assignment.k;
    if k < options.rule.k_max {
        warnings.push(format!(
            "stratum count reduced from {} to {k} so every stratum meets the arm minima",
            options.rule.k_max
        ));
    }
    let stratified = stratified_bounds(frame, &assignment, options.range, options.policy)?;
    for s in stratified.strata.iter().filter(|s| s.degenerate_range) {
        warnings.push(format!("stratum {} has a degenerate outcome range", s.stratum));
    }
    let gain = precision_gain(&unstratified, &stratified)?;
    let subset = frame.covariate_indices();
    let r2 = match crate::simulation::r_squared(frame, &subset) {
        Ok(v) => Some(v),
        Err(e) => {
            warnings.push(format!("R² unavailable: {e}"));
            None
        }
    };
    Ok(AnalysisReport {
        study: StudyMeta {
            population_size: frame.population_size(),
            sample_size: frame.n(),
            covariates: frame.covariate_names().to_vec(),
            range: options.range,
        },
        model,
        overlap,
        k,
        unstratified,
        stratified,
        precision_gain: gain,
        r2,
        strata: stratum_summaries(frame, &scores, &assignment),
        warnings,
    })
}

/// Strata for an analysis, for callers that want the raw assignment too.
pub fn assignment_for(frame: &StudyFrame, options: &AnalysisOptions) -> Result<(ScoreSet, StratumAssignment)> {
    let scored = score_frame(frame, options.ridge)?;
    let assignment = stratify(&scored.scores, &options.rule)?;
    Ok((scored.scores, assignment))
}

pub fn overlap_report(frame: &StudyFrame, ridge: bool) -> Result<OverlapStat> {
    estimate_overlap(&score_frame(frame, ridge)?.scores)
}

fn interval(b: &BoundsEstimate) -> String {
    format!("[{:.2}, {:.2}]", b.lower, b.upper)
}

/// Two-decimal summary table.
pub fn render_table(report: &AnalysisReport) -> String {
    let r2 = report.r2.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:<20} {:<20} {:<6} {:<8} Precision Gain",
        "Covariates", "Unstratified Bounds", "Stratified Bounds", "R^2", "Overlap"
    );
    let _ = writeln!(
        out,
        "{:<10} {:<20} {:<20} {:<6} {:<8} {:.2}",
        report.study.covariates.len(),
        interval(&report.unstratified),
        interval(&report.stratified),
        r2,
        format!("{:.2}", report.overlap.omega),
        report.precision_gain
    );
    let _ = writeln!(
        out,
        "N = {}, n = {}, k = {}, policy = {}",
        report.study.population_size, report.study.sample_size, report.k, report.stratified.policy
    );
    for w in &report.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}

pub fn render_overlap(stat: &OverlapStat) -> String {
    format!(
        "Overlap {:.4} ({} of {} population units inside [{:.6}, {:.6}])\n",
        stat.omega, stat.n_pop_inside, stat.n_pop_total, stat.lo, stat.hi
    )
}

/// Serializes with full precision.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(format!("json: {e}")))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Sweep grids

/// A parsed sweep grid: explicit design points plus the grid-level seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub seed: Option<u64>,
    pub points: Vec<ScenarioConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridFormat {
    Json,
    Toml,
}

impl GridFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => GridFormat::Toml,
            _ => GridFormat::Json,
        }
    }
}

const ARRAY_FIELDS: [&str; 4] = ["propensity_subset", "selection_covariates", "outcome_covariates", "alpha"];
const AXIS_ORDER: [&str; 4] = ["scenario", "propensity_subset", "n_frac", "target_r2"];

pub fn load_grid(path: &Path) -> Result<Grid> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grid(&text, GridFormat::from_path(path))
}

/// Parses a grid document.
///
/// Top-level keys: `seed`, `defaults` (fields applied to every point),
/// `points` (explicit design points) and `sweeps` (Cartesian products: a
/// list-valued field becomes an axis; `q = [2, 3]` expands to every subset
/// of `X1..X6` of those sizes).
pub fn parse_grid(text: &str, format: GridFormat) -> Result<Grid> {
    let doc: Value = match format {
        GridFormat::Json => serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
        GridFormat::Toml => toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
    };
    let Value::Object(doc) = doc else {
        return Err(Error::Config("grid must be a table/object".into()));
    };
    for key in doc.keys() {
        if !matches!(key.as_str(), "seed" | "defaults" | "points" | "sweeps") {
            return Err(Error::Config(format!("unknown grid key `{key}`")));
        }
    }
    let seed = match doc.get("seed") {
        None => None,
        Some(v) => Some(v.as_u64().ok_or_else(|| Error::Config("seed must be a non-negative integer".into()))?),
    };
    let defaults = match doc.get("defaults") {
        None => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return Err(Error::Config("defaults must be a table".into())),
    };
    let list = |key: &str| -> Result<Vec<Map<String, Value>>> {
        match doc.get(key) {
            None => Ok(Vec::new()),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Object(m) => Ok(m.clone()),
                    _ => Err(Error::Config(format!("{key} entries must be tables"))),
                })
                .collect(),
            Some(_) => Err(Error::Config(format!("{key} must be an array of tables"))),
        }
    };

    let mut raw_points: Vec<Map<String, Value>> = list("points")?;
    for sweep in list("sweeps")? {
        raw_points.extend(expand_sweep(&sweep)?);
    }
    if raw_points.is_empty() {
        return Err(Error::Config("grid defines no design points".into()));
    }

    let points = raw_points
        .into_iter()
        .map(|point| {
            let mut merged = defaults.clone();
            merged.extend(point);
            if let (Some(seed), false) = (seed, merged.contains_key("seed")) {
                merged.insert("seed".into(), Value::from(seed));
            }
            let config: ScenarioConfig =
                serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))?;
            config.validate()?;
            Ok(config)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Grid { seed, points })
}

fn is_axis(key: &str, value: &Value) -> bool {
    match value {
        Value::Array(items) if ARRAY_FIELDS.contains(&key) => items.first().is_some_and(Value::is_array),
        Value::Array(_) => true,
        _ => false,
    }
}

fn expand_sweep(sweep: &Map<String, Value>) -> Result<Vec<Map<String, Value>>> {
    let mut fixed = Map::new();
    let mut axes: Vec<(String, Vec<Value>)> = Vec::new();
    for (key, value) in sweep {
        if key == "q" {
            if sweep.contains_key("propensity_subset") {
                return Err(Error::Config("sweep sets both q and propensity_subset".into()));
            }
            let sizes: Vec<Value> = match value {
                Value::Array(v) => v.clone(),
                v => vec![v.clone()],
            };
            let mut subsets = Vec::new();
            for size in sizes {
                let size = size
                    .as_u64()
                    .filter(|s| (1..=6).contains(s))
                    .ok_or_else(|| Error::Config(format!("q must be an integer in 1..=6, found {size}")))?;
                subsets.extend(subsets_of_size(size as usize).into_iter().map(Value::from));
            }
            axes.push(("propensity_subset".into(), subsets));
        } else if is_axis(key, value) {
            let Value::Array(items) = value else { unreachable!() };
            axes.push((key.clone(), items.clone()));
        } else {
            fixed.insert(key.clone(), value.clone());
        }
    }
    let rank = |k: &str| AXIS_ORDER.iter().position(|a| *a == k).unwrap_or(AXIS_ORDER.len());
    axes.sort_by(|a, b| rank(&a.0).cmp(&rank(&b.0)).then_with(|| a.0.cmp(&b.0)));

    let mut points = vec![fixed];
    for (key, values) in axes {
        if values.is_empty() {
            return Err(Error::Config(format!("sweep axis `{key}` is empty")));
        }
        let mut next = Vec::with_capacity(points.len() * values.len());
        for p in &points {
            for v in &values {
                let mut point = p.clone();
                point.insert(key.clone(), v.clone());
                next.push(point);
            }
        }
        points = next;
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// Sweep outputs

fn subset_label(subset: &[usize]) -> String {
    subset.iter().map(|j| format!("X{j}")).collect::<Vec<_>>().join(" ")
}

fn csv_bytes<F>(header: &[&str], fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>,
{
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(header)?;
    fill(&mut wtr)?;
    wtr.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))
}

/// One row per design point.
pub fn sweep_csv(result: &SweepResult) -> Result<Vec<u8>> {
    let header = [
        "index", "scenario", "N", "n_frac", "target_r2", "q", "propensity_subset", "reps", "replications",
        "failures", "failed", "omega_mean", "omega_sd", "gain_mean", "gain_sd", "r2_mean", "r2_sd",
        "realized_n_frac_mean", "realized_n_frac_sd", "k_mean", "k_sd", "coverage_unstratified",
        "coverage_stratified",
    ];
    csv_bytes(&header, |w| {
        for p in &result.points {
            let c = &p.config;
            w.write_record([
                p.index.to_string(),
                c.scenario.to_string(),
                c.population_size.to_string(),
                c.n_frac.to_string(),
                c.target_r2.to_string(),
                c.q().to_string(),
                subset_label(&c.propensity_subset),
                c.reps.to_string(),
                p.replications.to_string(),
                p.failures.to_string(),
                p.failed.to_string(),
                p.omega.mean.to_string(),
                p.omega.sd.to_string(),
                p.precision_gain.mean.to_string(),
                p.precision_gain.sd.to_string(),
                p.realized_r2.mean.to_string(),
                p.realized_r2.sd.to_string(),
                p.realized_n_frac.mean.to_string(),
                p.realized_n_frac.sd.to_string(),
                p.k.mean.to_string(),
                p.k.sd.to_string(),
                p.coverage_unstratified.to_string(),
                p.coverage_stratified.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// Average over design points that share `(scenario, N, n_frac, target_r2, q)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QRow {
    pub scenario: u8,
    pub population_size: usize,
    pub n_frac: f64,
    pub target_r2: f64,
    pub q: usize,
    pub design_points: usize,
    pub omega_mean: f64,
    pub gain_mean: f64,
}

/// Overlap and gain by number of covariates, rows ordered by scenario then
/// descending `q`.
pub fn by_q(result: &SweepResult) -> Vec<QRow> {
    let mut rows: Vec<QRow> = Vec::new();
    for p in result.points.iter().filter(|p| !p.failed) {
        let c = &p.config;
        let row = rows.iter_mut().find(|r| {
            r.scenario == c.scenario
                && r.population_size == c.population_size
                && r.n_frac == c.n_frac
                && r.target_r2 == c.target_r2
                && r.q == c.q()
        });
        match row {
            Some(r) => {
                r.design_points += 1;
                r.omega_mean += p.omega.mean;
                r.gain_mean += p.precision_gain.mean;
            }
            None => rows.push(QRow {
                scenario: c.scenario,
                population_size: c.population_size,
                n_frac: c.n_frac,
                target_r2: c.target_r2,
                q: c.q(),
                design_points: 1,
                omega_mean: p.omega.mean,
                gain_mean: p.precision_gain.mean,
            }),
        }
    }
    for r in &mut rows {
        r.omega_mean /= r.design_points as f64;
        r.gain_mean /= r.design_points as f64;
    }
    rows.sort_by(|a, b| {
        a.scenario
            .cmp(&b.scenario)
            .then(a.population_size.cmp(&b.population_size))
            .then(a.n_frac.total_cmp(&b.n_frac).reverse())
            .then(a.target_r2.total_cmp(&b.target_r2))
            .then(b.q.cmp(&a.q))
    });
    rows
}

pub fn by_q_csv(result: &SweepResult) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for row in by_q(result) {
        wtr.serialize(row)?;
    }
    if result.points.iter().all(|p| p.failed) {
        wtr.write_record(["scenario", "population_size", "n_frac", "target_r2", "q", "design_points", "omega_mean", "gain_mean"])?;
    }
    wtr.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))
}

/// Figure data: one series per overlap level, gain against R².
pub fn figure_csv(result: &SweepResult) -> Result<Vec<u8>> {
    let header = [
        "scenario", "propensity_subset", "n_frac", "overlap", "target_r2", "r2", "gain", "reduction_pct",
    ];
    let mut points: Vec<_> = result.points.iter().filter(|p| !p.failed).collect();
    points.sort_by(|a, b| {
        a.config
            .scenario
            .cmp(&b.config.scenario)
            .then_with(|| a.config.propensity_subset.cmp(&b.config.propensity_subset))
            .then(a.config.n_frac.total_cmp(&b.config.n_frac).reverse())
            .then(a.config.target_r2.total_cmp(&b.config.target_r2))
            .then(a.index.cmp(&b.index))
    });
    csv_bytes(&header, |w| {
        for p in points {
            let c = &p.config;
            w.write_record([
                c.scenario.to_string(),
                subset_label(&c.propensity_subset),
                c.n_frac.to_string(),
                p.omega.mean.to_string(),
                c.target_r2.to_string(),
                p.realized_r2.mean.to_string(),
                p.precision_gain.mean.to_string(),
                (100.0 * p.precision_gain.mean).to_string(),
            ])?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FailedPoint {
    pub index: usize,
    pub failures: usize,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub design_points: usize,
    pub success_share: f64,
    pub failed_points: Vec<FailedPoint>,
    pub files: Vec<&'static str>,
    pub grid: Vec<ScenarioConfig>,
}

pub fn manifest(result: &SweepResult, seed: Option<u64>) -> Manifest {
    Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        seed,
        design_points: result.points.len(),
        success_share: result.success_share(),
        failed_points: result
            .failed_points()
            .map(|p| FailedPoint {
                index: p.index,
                failures: p.failures,
                reasons: p.failure_reasons.clone(),
            })
            .collect(),
        files: vec!["sweep.csv", "by_q.csv", "figure.csv", "manifest.json", "timing.json"],
        grid: result.points.iter().map(|p| p.config.clone()).collect(),
    }
}

/// Writes every sweep output into `out_dir`. All files except `timing.json`
/// are pure functions of the grid.
pub fn write_sweep_outputs(
    result: &SweepResult,
    seed: Option<u64>,
    timing: &SweepTiming,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files: [(&str, Vec<u8>); 5] = [
        ("sweep.csv", sweep_csv(result)?),
        ("by_q.csv", by_q_csv(result)?),
        ("figure.csv", figure_csv(result)?),
        ("manifest.json", (to_json(&manifest(result, seed))? + "\n").into_bytes()),
        ("timing.json", (to_json(timing)? + "\n").into_bytes()),
    ];
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = out_dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
