//! Monte Carlo designs relating overlap, covariate predictiveness and the
//! precision gained by stratifying the bounds.
//!
//! Each population has six covariates: `X1..X4` standard normal, `X5` a
//! fair `±1` coin and `X6` uniform on `{-1, 0, 1}`. Selection follows
//! `logit Pr(Z = 1) = g0 + c (X1 + X2 + X3)` with `g0` calibrated to the
//! target sampling fraction. The control outcome is linear in the scenario's
//! outcome covariates plus normal noise sized for a target R²; the treatment
//! effect is `tau0 + tau1 X1`. Potential outcomes are clipped to a known
//! range `[-B, B]`, which is the range handed to the bounds.
//!
//! Scenario 1 predicts the outcome with `X1..X3` (the selection covariates);
//! scenario 2 with `X4..X6`, which play no part in selection.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{
    precision_gain, stratified_bounds, unstratified_bounds, OutcomeRange, RangePolicy,
};
use crate::data::{StudyFrame, UnitRecord};
use crate::error::{Error, Result};
use crate::overlap::estimate_overlap;
use crate::propensity::{fit_logistic, inv_logit, predict_scores, FitOptions};
use crate::stratification::{stratify, StrataRule};

pub const COVARIATE_COUNT: usize = 6;
pub const CALIBRATION_DRAWS: usize = 1_000_000;
const CALIBRATION_SEED: u64 = 0x5eed_ca11_b4a7_e000;
/// A design point fails when more than this share of replications error.
pub const MAX_FAILURE_SHARE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CovariateKind {
    Normal,
    Sign,
    ThreePoint,
}

impl CovariateKind {
    fn of(index: usize) -> Self {
        match index {
            1..=4 => CovariateKind::Normal,
            5 => CovariateKind::Sign,
            _ => CovariateKind::ThreePoint,
        }
    }

    fn variance(self) -> f64 {
        match self {
            CovariateKind::Normal | CovariateKind::Sign => 1.0,
            CovariateKind::ThreePoint => 2.0 / 3.0,
        }
    }

    fn draw<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            CovariateKind::Normal => rng.sample(StandardNormal),
            CovariateKind::Sign => {
                if rng.gen::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            CovariateKind::ThreePoint => rng.gen_range(-1i32..=1) as f64,
        }
    }
}

fn default_population() -> usize {
    20_000
}
fn default_n_frac() -> f64 {
    0.05
}
fn default_selection() -> Vec<usize> {
    vec![1, 2, 3]
}
fn default_alpha() -> Vec<f64> {
    vec![2.0, 2.0, 0.1, 0.1, 0.1, 0.1]
}
fn default_r2() -> f64 {
    0.9
}
fn default_reps() -> usize {
    200
}
fn default_half() -> f64 {
    0.5
}
fn default_k_max() -> usize {
    crate::stratification::DEFAULT_K_MAX
}
fn default_min_arm() -> usize {
    1
}

/// One simulation design point. Covariate indices are 1-based (`X1..X6`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: u8,
    #[serde(rename = "N", default = "default_population")]
    pub population_size: usize,
    #[serde(default = "default_n_frac")]
    pub n_frac: f64,
    #[serde(default = "default_selection")]
    pub selection_covariates: Vec<usize>,
    /// Defaults to `X1..X3` for scenario 1 and `X4..X6` for scenario 2.
    #[serde(default)]
    pub outcome_covariates: Option<Vec<usize>>,
    /// Outcome coefficients, paired in order with the outcome covariates.
    #[serde(default = "default_alpha")]
    pub alpha: Vec<f64>,
    #[serde(default = "default_r2")]
    pub target_r2: f64,
    /// Covariates in the analyst's propensity model.
    pub propensity_subset: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_half")]
    pub selection_coefficient: f64,
    #[serde(default = "default_half")]
    pub tau0: f64,
    #[serde(default = "default_half")]
    pub tau1: f64,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_min_arm")]
    pub min_treated: usize,
    #[serde(default = "default_min_arm")]
    pub min_control: usize,
}

impl ScenarioConfig {
    /// Defaults for a scenario with the given analyst subset.
    pub fn new(scenario: u8, propensity_subset: Vec<usize>) -> Self {
        ScenarioConfig {
            scenario,
            population_size: default_population(),
            n_frac: default_n_frac(),
            selection_covariates: default_selection(),
            outcome_covariates: None,
            alpha: default_alpha(),
            target_r2: default_r2(),
            propensity_subset,
            reps: default_reps(),
            seed: 0,
            selection_coefficient: default_half(),
            tau0: default_half(),
            tau1: default_half(),
            k_max: default_k_max(),
            min_treated: default_min_arm(),
            min_control: default_min_arm(),
        }
    }

    pub fn outcome_covariates(&self) -> Vec<usize> {
        match (&self.outcome_covariates, self.scenario) {
            (Some(c), _) => c.clone(),
            (None, 2) => vec![4, 5, 6],
            (None, _) => vec![1, 2, 3],
        }
    }

    pub fn q(&self) -> usize {
        self.propensity_subset.len()
    }

    pub fn strata_rule(&self) -> StrataRule {
        StrataRule {
            k_max: self.k_max,
            min_treated: self.min_treated,
            min_control: self.min_control,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !matches!(self.scenario, 1 | 2) {
            return bad(format!("scenario must be 1 or 2, found {}", self.scenario));
        }
        let outcome = self.outcome_covariates();
        for (name, set) in [
            ("selection_covariates", &self.selection_covariates),
            ("outcome_covariates", &outcome),
            ("propensity_subset", &self.propensity_subset),
        ] {
            if let Some(i) = set.iter().find(|&&i| !(1..=COVARIATE_COUNT).contains(&i)) {
                return bad(format!("{name}: covariate X{i} does not exist"));
            }
            let mut sorted = set.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != set.len() {
                return bad(format!("{name}: repeated covariate"));
            }
        }
        if self.alpha.len() < outcome.len() {
            return bad(format!(
                "alpha has {} entries for {} outcome covariates",
                self.alpha.len(),
                outcome.len()
            ));
        }
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if !(self.n_frac > 0.0 && self.n_frac < 1.0) {
            return bad(format!("n_frac {} outside (0, 1)", self.n_frac));
        }
        if !(self.target_r2 > 0.0 && self.target_r2 < 1.0) {
            return bad(format!("target_r2 {} outside (0, 1)", self.target_r2));
        }
        if self.population_size < 10 {
            return bad("N must be at least 10".into());
        }
        if self.k_max == 0 {
            return bad("k_max must be at least 1".into());
        }
        Ok(())
    }

    /// Analytic variance of the outcome signal.
    pub fn signal_variance(&self) -> f64 {
        self.outcome_covariates()
            .iter()
            .zip(&self.alpha)
            .map(|(&j, a)| a * a * CovariateKind::of(j).variance())
            .sum()
    }

    /// Half-width `B` of the declared outcome range `[-B, B]`.
    pub fn outcome_bound(&self) -> f64 {
        4.0 * self.signal_variance().sqrt() + self.tau0.abs() + 4.0
    }

    pub fn outcome_range(&self) -> OutcomeRange {
        let b = self.outcome_bound();
        OutcomeRange { lo: -b, hi: b }
    }

    /// The fields that shape the population, serialized. Analysis settings
    /// (propensity subset, strata rule), seed and reps are blanked, so design
    /// points that differ only in how the analyst works share populations.
    fn population_key(&self) -> Vec<u8> {
        let mut key = self.clone();
        key.seed = 0;
        key.reps = 0;
        key.outcome_covariates = Some(self.outcome_covariates());
        key.propensity_subset = Vec::new();
        key.k_max = 0;
        key.min_treated = 0;
        key.min_control = 0;
        serde_json::to_vec(&key).expect("config serializes")
    }

    /// Per-replication seed: the configured seed XOR a stable hash of the
    /// population fields and the replication index.
    pub fn replication_seed(&self, rep_index: usize) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.population_key());
        hasher.update((rep_index as u64).to_le_bytes());
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        self.seed ^ u64::from_le_bytes(bytes)
    }
}

/// Finds the selection intercept whose expected sampling probability equals
/// `n_frac`, by bisection over `[-20, 20]` against a fixed Monte Carlo draw.
pub fn calibrate_selection_intercept(config: &ScenarioConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(CALIBRATION_SEED);
    let kinds: Vec<CovariateKind> = config.selection_covariates.iter().map(|&j| CovariateKind::of(j)).collect();
    let predictors: Vec<f64> = (0..CALIBRATION_DRAWS)
        .map(|_| config.selection_coefficient * kinds.iter().map(|k| k.draw(&mut rng)).sum::<f64>())
        .collect();
    let expected = |g0: f64| predictors.iter().map(|lp| inv_logit(g0 + lp)).sum::<f64>() / predictors.len() as f64;

    let (mut lo, mut hi) = (-20.0, 20.0);
    if expected(lo) > config.n_frac || expected(hi) < config.n_frac {
        return Err(Error::Calibration(format!(
            "sampling fraction {} is not reachable with an intercept in [-20, 20]",
            config.n_frac
        )));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let value = expected(mid);
        if (value - config.n_frac).abs() < 1e-9 || hi - lo < 1e-12 {
            return Ok(mid);
        }
        if value < config.n_frac {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Noise variance giving the target R² for the outcome signal.
pub fn calibrate_noise_for_r2(config: &ScenarioConfig) -> Result<f64> {
    let r2 = config.target_r2;
    if !(r2 > 0.0 && r2 < 1.0) {
        return Err(Error::Calibration(format!("target R² {r2} outside (0, 1)")));
    }
    Ok(config.signal_variance() * (1.0 - r2) / r2)
}

/// A simulated population with the ground truth that estimators never see.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    frame: StudyFrame,
    y1: Vec<f64>,
    y0: Vec<f64>,
    selection_probability: Vec<f64>,
    range: OutcomeRange,
}

impl SyntheticFrame {
    /// The observable part.
    pub fn frame(&self) -> &StudyFrame {
        &self.frame
    }

    pub fn potential_outcomes(&self) -> (&[f64], &[f64]) {
        (&self.y1, &self.y0)
    }

    pub fn selection_probability(&self) -> &[f64] {
        &self.selection_probability
    }

    pub fn range(&self) -> OutcomeRange {
        self.range
    }
}

fn covariate_names() -> Vec<String> {
    (1..=COVARIATE_COUNT).map(|j| format!("X{j}")).collect()
}

/// Draws one population for replication `rep_index`.
pub fn generate_population(config: &ScenarioConfig, rep_index: usize) -> Result<SyntheticFrame> {
    config.validate()?;
    let g0 = calibrate_selection_intercept(config)?;
    let sigma2 = calibrate_noise_for_r2(config)?;
    Ok(generate_with(config, rep_index, g0, sigma2))
}

fn generate_with(config: &ScenarioConfig, rep_index: usize, g0: f64, sigma2: f64) -> SyntheticFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(config.replication_seed(rep_index));
    let kinds: Vec<CovariateKind> = (1..=COVARIATE_COUNT).map(CovariateKind::of).collect();
    let outcome = config.outcome_covariates();
    let range = config.outcome_range();
    let sigma = sigma2.sqrt();

    let big_n = config.population_size;
    let mut units = Vec::with_capacity(big_n);
    let mut y1 = Vec::with_capacity(big_n);
    let mut y0 = Vec::with_capacity(big_n);
    let mut selection_probability = Vec::with_capacity(big_n);
    for i in 0..big_n {
        let x: Vec<f64> = kinds.iter().map(|k| k.draw(&mut rng)).collect();
        let lp = g0
            + config.selection_coefficient
                * config.selection_covariates.iter().map(|&j| x[j - 1]).sum::<f64>();
        let prob = inv_logit(lp);
        let selected = rng.gen::<f64>() < prob;
        let treated = rng.gen::<bool>();
        let noise: f64 = rng.sample(StandardNormal);

        let signal: f64 = outcome.iter().zip(&config.alpha).map(|(&j, a)| a * x[j - 1]).sum();
        let control = signal + sigma * noise;
        let effect = config.tau0 + config.tau1 * x[0];
        let c = control.clamp(range.lo, range.hi);
        let t = (control + effect).clamp(range.lo, range.hi);

        let id = (i + 1).to_string();
        units.push(if selected {
            UnitRecord::sampled(id, treated, if treated { t } else { c }, x)
        } else {
            UnitRecord::unsampled(id, x)
        });
        y1.push(t);
        y0.push(c);
        selection_probability.push(prob);
    }
    let frame = StudyFrame::new(covariate_names(), units).expect("generated ids are unique");
    SyntheticFrame {
        frame,
        y1,
        y0,
        selection_probability,
        range,
    }
}

/// Mean of `y1 - y0` over all `N` units.
pub fn true_pate(frame: &SyntheticFrame) -> f64 {
    let sum: f64 = frame.y1.iter().zip(&frame.y0).map(|(a, b)| a - b).sum();
    sum / frame.y1.len() as f64
}

/// R² of an OLS fit of observed sample outcomes on the given covariates
/// (0-based frame indices) plus the treatment indicator and an intercept.
pub fn r_squared(frame: &StudyFrame, covariate_subset: &[usize]) -> Result<f64> {
    frame.check_subset(covariate_subset)?;
    let p = covariate_subset.len() + 2;
    let sampled: Vec<&UnitRecord> = frame.units().iter().filter(|u| u.in_sample()).collect();
    if sampled.len() < covariate_subset.len() + 3 {
        return Err(Error::InvalidArgument(format!(
            "R² needs at least {} sampled units, found {}",
            covariate_subset.len() + 3,
            sampled.len()
        )));
    }
    let ys: Vec<f64> = sampled.iter().map(|u| u.outcome().unwrap_or(0.0)).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_total: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_total == 0.0 {
        return Ok(0.0);
    }

    let row = |u: &UnitRecord| {
        let mut r = Vec::with_capacity(p);
        r.push(1.0);
        r.push(if u.treated() == Some(true) { 1.0 } else { 0.0 });
        r.extend(covariate_subset.iter().map(|&j| u.covariates()[j]));
        r
    };
    let mut xtx = nalgebra::DMatrix::<f64>::zeros(p, p);
    let mut xty = nalgebra::DVector::<f64>::zeros(p);
    for (u, &y) in sampled.iter().zip(&ys) {
        let r = row(u);
        for a in 0..p {
            xty[a] += r[a] * y;
            for b in 0..p {
                xtx[(a, b)] += r[a] * r[b];
            }
        }
    }
    // Column scaling guards the relative pivot test against unit choice.
    let scale: Vec<f64> = (0..p).map(|a| xtx[(a, a)].sqrt().max(f64::MIN_POSITIVE)).collect();
    let scaled = nalgebra::DMatrix::from_fn(p, p, |a, b| xtx[(a, b)] / (scale[a] * scale[b]));
    let svd = scaled.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    if svd.singular_values.min() <= max_sv * 1e-10 {
        return Err(Error::RankDeficient);
    }
    let rhs = nalgebra::DVector::from_fn(p, |a, _| xty[a] / scale[a]);
    let solved = svd.solve(&rhs, 0.0).map_err(|_| Error::RankDeficient)?;
    let beta: Vec<f64> = (0..p).map(|a| solved[a] / scale[a]).collect();

    let ss_resid: f64 = sampled
        .iter()
        .zip(&ys)
        .map(|(u, y)| {
            let fit: f64 = row(u).iter().zip(&beta).map(|(x, b)| x * b).sum();
            (y - fit).powi(2)
        })
        .sum();
    Ok(1.0 - ss_resid / ss_total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub seed: u64,
    pub n: usize,
    pub realized_n_frac: f64,
    pub omega: f64,
    pub k: usize,
    pub sate: f64,
    pub true_pate: f64,
    pub unstratified_lower: f64,
    pub unstratified_upper: f64,
    pub stratified_lower: f64,
    pub stratified_upper: f64,
    pub precision_gain: f64,
    pub realized_r2: f64,
    pub covers_unstratified: bool,
    pub covers_stratified: bool,
}

/// Runs one replication of a design point end to end.
pub fn run_replication(config: &ScenarioConfig, rep_index: usize) -> Result<ReplicationRecord> {
    config.validate()?;
    let g0 = calibrate_selection_intercept(config)?;
    let sigma2 = calibrate_noise_for_r2(config)?;
    replicate(config, rep_index, g0, sigma2)
}

fn replicate(config: &ScenarioConfig, rep_index: usize, g0: f64, sigma2: f64) -> Result<ReplicationRecord> {
    analyze_replication(config, rep_index, &generate_with(config, rep_index, g0, sigma2))
}

fn analyze_replication(config: &ScenarioConfig, rep_index: usize, synthetic: &SyntheticFrame) -> Result<ReplicationRecord> {
    let wrap = |e: Error| Error::Replication {
        rep: rep_index,
        source: Box::new(e),
    };
    let frame = synthetic.frame();
    crate::data::validate_frame(frame).into_result().map_err(wrap)?;

    let subset: Vec<usize> = config.propensity_subset.iter().map(|j| j - 1).collect();
    let model = fit_logistic(frame, &subset, &FitOptions::default()).map_err(wrap)?;
    let scores = predict_scores(&model, frame).map_err(wrap)?;
    let overlap = estimate_overlap(&scores).map_err(wrap)?;

    let range = synthetic.range();
    let unstratified = unstratified_bounds(frame, range).map_err(wrap)?;
    let assignment = stratify(&scores, &config.strata_rule()).map_err(wrap)?;
    let k = assignment.k;
    let stratified = stratified_bounds(frame, &assignment, range, RangePolicy::StratumEmpirical).map_err(wrap)?;
    let gain = precision_gain(&unstratified, &stratified).map_err(wrap)?;

    let outcome: Vec<usize> = config.outcome_covariates().iter().map(|j| j - 1).collect();
    let realized_r2 = r_squared(frame, &outcome).map_err(wrap)?;
    let pate = true_pate(synthetic);
    let n = frame.n();

    Ok(ReplicationRecord {
        rep: rep_index,
        seed: config.replication_seed(rep_index),
        n,
        realized_n_frac: n as f64 / frame.population_size() as f64,
        omega: overlap.omega,
        k,
        sate: unstratified.strata[0].sate,
        true_pate: pate,
        unstratified_lower: unstratified.lower,
        unstratified_upper: unstratified.upper,
        stratified_lower: stratified.lower,
        stratified_upper: stratified.upper,
        precision_gain: gain,
        realized_r2,
        covers_unstratified: unstratified.contains(pate),
        covers_stratified: stratified.contains(pate),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    /// Mean and `n - 1` standard deviation, summed in the given order.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Summary {
                mean: f64::NAN,
                sd: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        Summary { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPointResult {
    pub index: usize,
    pub config: ScenarioConfig,
    pub replications: usize,
    pub failures: usize,
    pub failed: bool,
    pub failure_reasons: Vec<String>,
    pub omega: Summary,
    pub precision_gain: Summary,
    pub realized_r2: Summary,
    pub realized_n_frac: Summary,
    pub k: Summary,
    pub coverage_unstratified: f64,
    pub coverage_stratified: f64,
    #[serde(skip)]
    pub records: Vec<ReplicationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<DesignPointResult>,
}

impl SweepResult {
    pub fn failed_points(&self) -> impl Iterator<Item = &DesignPointResult> {
        self.points.iter().filter(|p| p.failed)
    }

    /// Share of design points that did not fail.
    pub fn success_share(&self) -> f64 {
        let ok = self.points.iter().filter(|p| !p.failed).count();
        ok as f64 / self.points.len().max(1) as f64
    }
}

fn aggregate(index: usize, config: &ScenarioConfig, outcomes: Vec<Result<ReplicationRecord>>) -> DesignPointResult {
    let total = outcomes.len();
    let mut records = Vec::with_capacity(total);
    let mut reasons: Vec<String> = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => {
                let reason = e.to_string();
                if reasons.len() < 10 {
                    reasons.push(reason);
                }
            }
        }
    }
    let failures = total - records.len();
    let failed = records.is_empty() || failures as f64 > MAX_FAILURE_SHARE * total as f64;
    let column = |f: fn(&ReplicationRecord) -> f64| Summary::of(&records.iter().map(f).collect::<Vec<_>>());
    let share = |f: fn(&ReplicationRecord) -> bool| {
        records.iter().filter(|r| f(r)).count() as f64 / records.len().max(1) as f64
    };
    DesignPointResult {
        index,
        config: config.clone(),
        replications: records.len(),
        failures,
        failed,
        failure_reasons: reasons,
        omega: column(|r| r.omega),
        precision_gain: column(|r| r.precision_gain),
        realized_r2: column(|r| r.realized_r2),
        realized_n_frac: column(|r| r.realized_n_frac),
        k: column(|r| r.k as f64),
        coverage_unstratified: share(|r| r.covers_unstratified),
        coverage_stratified: share(|r| r.covers_stratified),
        records,
    }
}

fn calibration_key(config: &ScenarioConfig) -> (Vec<usize>, u64, u64) {
    (
        config.selection_covariates.clone(),
        config.n_frac.to_bits(),
        config.selection_coefficient.to_bits(),
    )
}

/// Population key and seed.
type PopulationId = (Vec<u8>, u64);

/// Runs every replication of every design point on `workers` threads.
///
/// Results depend only on the grid (seeds included): each replication draws
/// from its own derived seed and aggregation runs in replication order.
pub fn run_sweep(grid: &[ScenarioConfig], workers: usize) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    for config in grid {
        config.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    pool.install(|| {
        let mut keys: Vec<_> = grid.iter().map(calibration_key).collect();
        keys.sort();
        keys.dedup();
        let intercepts: HashMap<_, Result<f64, String>> = keys
            .par_iter()
            .map(|key| {
                let config = grid.iter().find(|c| &calibration_key(c) == key).expect("key from grid");
                (key.clone(), calibrate_selection_intercept(config).map_err(|e| e.to_string()))
            })
            .collect();

        // One population per (population key, seed, rep), analysed by every
        // design point that shares it.
        let mut groups: Vec<(PopulationId, Vec<usize>)> = Vec::new();
        for (p, config) in grid.iter().enumerate() {
            let key = (config.population_key(), config.seed);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, members)) => members.push(p),
                None => groups.push((key, vec![p])),
            }
        }
        let jobs: Vec<(usize, usize)> = groups
            .iter()
            .enumerate()
            .flat_map(|(g, (_, members))| {
                let reps = members.iter().map(|&p| grid[p].reps).max().unwrap_or(0);
                (0..reps).map(move |r| (g, r))
            })
            .collect();
        let outcomes: Vec<Vec<(usize, Result<ReplicationRecord>)>> = jobs
            .par_iter()
            .map(|&(g, r)| {
                let members = &groups[g].1;
                let config = &grid[members[0]];
                let calibrated: Result<(f64, f64), String> = intercepts[&calibration_key(config)]
                    .clone()
                    .and_then(|g0| Ok((g0, calibrate_noise_for_r2(config).map_err(|e| e.to_string())?)));
                let synthetic = calibrated.as_ref().ok().map(|&(g0, sigma2)| generate_with(config, r, g0, sigma2));
                members
                    .iter()
                    .filter(|&&p| r < grid[p].reps)
                    .map(|&p| {
                        let outcome = match (&synthetic, &calibrated) {
                            (Some(synthetic), _) => analyze_replication(&grid[p], r, synthetic),
                            (None, Err(e)) => Err(Error::Calibration(e.clone())),
                            (None, Ok(_)) => unreachable!("population generated whenever calibration succeeds"),
                        };
                        (p, outcome)
                    })
                    .collect()
            })
            .collect();

        let mut per_point: Vec<Vec<Result<ReplicationRecord>>> = grid.iter().map(|c| Vec::with_capacity(c.reps)).collect();
        for (p, outcome) in outcomes.into_iter().flatten() {
            per_point[p].push(outcome);
        }
        let points = grid
            .iter()
            .zip(per_point)
            .enumerate()
            .map(|(p, (config, outcomes))| aggregate(p, config, outcomes))
            .collect();
        Ok(SweepResult { points })
    })
}

/// All subsets of `X1..X6` of the given size, in lexicographic order.
pub fn subsets_of_size(size: usize) -> Vec<Vec<usize>> {
    fn extend(start: usize, size: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == size {
            out.push(current.clone());
            return;
        }
        for j in start..=COVARIATE_COUNT {
            current.push(j);
            extend(j + 1, size, current, out);
            current.pop();
        }
    }
    let mut out = Vec::new();
    extend(1, size, &mut Vec::new(), &mut out);
    out
}

/// Every analyst subset with between two and six covariates.
pub fn all_propensity_subsets() -> Vec<Vec<usize>> {
    (2..=COVARIATE_COUNT).flat_map(subsets_of_size).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTiming {
    pub workers: usize,
    pub elapsed_seconds: f64,
}

/// [`run_sweep`] plus wall-clock timing.
pub fn run_sweep_timed(grid: &[ScenarioConfig], workers: usize) -> Result<(SweepResult, SweepTiming)> {
    let start = Instant::now();
    let result = run_sweep(grid, workers)?;
    Ok((
        result,
        SweepTiming {
            workers,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(scenario: u8) -> ScenarioConfig {
        ScenarioConfig {
            population_size: 4000,
            reps: 3,
            seed: 7,
            ..ScenarioConfig::new(scenario, vec![1, 2])
        }
    }

    #[test]
    fn subset_count_is_57() {
        assert_eq!(all_propensity_subsets().len(), 57);
        assert_eq!(subsets_of_size(2).len(), 15);
        assert_eq!(subsets_of_size(6), vec![vec![1, 2, 3, 4, 5, 6]]);
    }

    #[test]
    fn noise_calibration() {
        let mut c = ScenarioConfig::new(1, vec![1, 2]);
        c.target_r2 = 0.5;
        assert!((calibrate_noise_for_r2(&c).unwrap() - c.signal_variance()).abs() < 1e-12);
        c.target_r2 = 0.9;
        assert!((calibrate_noise_for_r2(&c).unwrap() - 8.01 / 9.0).abs() < 1e-12);
        c.target_r2 = 1.0 - 1e-9;
        assert!(calibrate_noise_for_r2(&c).unwrap() < 1e-8);
        c.target_r2 = 1.0;
        assert!(calibrate_noise_for_r2(&c).is_err());
    }

    #[test]
    fn scenario_two_signal_variance() {
        let c = ScenarioConfig::new(2, vec![4, 5]);
        assert!((c.signal_variance() - (4.0 + 4.0 + 0.01 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn intercept_calibration() {
        let mut c = ScenarioConfig::new(1, vec![1, 2]);
        c.n_frac = 0.5;
        assert!(calibrate_selection_intercept(&c).unwrap().abs() < 0.01);
        c.n_frac = 0.05;
        let g = calibrate_selection_intercept(&c).unwrap();
        assert!(g < 0.0);
        assert_eq!(g, calibrate_selection_intercept(&c).unwrap());
        c.n_frac = 1e-12;
        assert!(calibrate_selection_intercept(&c).is_err());
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let c = small(1);
        let a = generate_population(&c, 1).unwrap();
        let b = generate_population(&c, 1).unwrap();
        assert_eq!(a, b);
        let other = generate_population(&c, 2).unwrap();
        assert_ne!(a.frame(), other.frame());
    }

    #[test]
    fn constant_effect_pate() {
        let mut c = small(1);
        c.tau1 = 0.0;
        c.target_r2 = 1.0 - 1e-12;
        let s = generate_population(&c, 0).unwrap();
        let (y1, y0) = s.potential_outcomes();
        // clipping can only bind far in the tails here
        assert!(y1.iter().zip(y0).all(|(a, b)| (a - b - 0.5).abs() < 1e-9));
        assert!((true_pate(&s) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn pate_is_mean_effect() {
        let s = generate_population(&small(2), 0).unwrap();
        let (y1, y0) = s.potential_outcomes();
        let mut total = 0.0;
        for i in 0..y1.len() {
            total += y1[i] - y0[i];
        }
        assert!((true_pate(&s) - total / y1.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn observed_outcome_is_the_assigned_potential_outcome() {
        let s = generate_population(&small(1), 0).unwrap();
        let (y1, y0) = s.potential_outcomes();
        for (i, u) in s.frame().units().iter().enumerate() {
            match u.treated() {
                Some(true) => assert_eq!(u.outcome(), Some(y1[i])),
                Some(false) => assert_eq!(u.outcome(), Some(y0[i])),
                None => assert_eq!(u.outcome(), None),
            }
            assert!(y1[i].abs() <= s.range().hi && y0[i].abs() <= s.range().hi);
        }
    }

    #[test]
    fn r_squared_exact_and_degenerate() {
        let units: Vec<UnitRecord> = (0..20)
            .map(|i| {
                let x = i as f64 * 0.37 - 3.0;
                let w = i % 3 == 0;
                UnitRecord::sampled(i.to_string(), w, 1.5 + 2.0 * x - 0.7 * f64::from(u8::from(w)), vec![x, 1.0])
            })
            .collect();
        let frame = StudyFrame::new(vec!["x".into(), "one".into()], units).unwrap();
        assert!((r_squared(&frame, &[0]).unwrap() - 1.0).abs() < 1e-10);
        // constant column collides with the intercept
        assert!(matches!(r_squared(&frame, &[0, 1]), Err(Error::RankDeficient)));

        let flat: Vec<UnitRecord> =
            (0..10).map(|i| UnitRecord::sampled(i.to_string(), i % 2 == 0, 3.0, vec![i as f64])).collect();
        let flat = StudyFrame::new(vec!["x".into()], flat).unwrap();
        assert_eq!(r_squared(&flat, &[0]).unwrap(), 0.0);
    }

    #[test]
    fn replication_record_is_sane() {
        let r = run_replication(&small(1), 0).unwrap();
        assert!(r.k >= 1 && r.k <= 5);
        assert!(r.covers_unstratified);
        assert!((0.0..=1.0).contains(&r.omega));
        assert!(r.precision_gain >= 0.0 && r.precision_gain < 1.0);
    }

    #[test]
    fn one_point_sweep() {
        let mut c = small(1);
        c.reps = 1;
        let sweep = run_sweep(&[c.clone()], 1).unwrap();
        assert_eq!(sweep.points.len(), 1);
        assert_eq!(sweep.points[0].replications, 1);
        assert_eq!(sweep.points[0].records[0], run_replication(&c, 0).unwrap());
    }

    #[test]
    fn rep_seed_ignores_reps_and_mixes_seed() {
        let a = small(1);
        let mut b = a.clone();
        b.reps = 99;
        assert_eq!(a.replication_seed(3), b.replication_seed(3));
        b.seed = 8;
        assert_eq!(a.replication_seed(3) ^ 7, b.replication_seed(3) ^ 8);
        assert_ne!(a.replication_seed(3), a.replication_seed(4));
    }

    #[test]
    fn invalid_configs() {
        let mut c = small(1);
        c.scenario = 3;
        assert!(c.validate().is_err());
        let mut c = small(1);
        c.propensity_subset = vec![7];
        assert!(c.validate().is_err());
        let mut c = small(1);
        c.reps = 0;
        assert!(c.validate().is_err());
    }
}
