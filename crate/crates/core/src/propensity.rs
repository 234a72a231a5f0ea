//! Sampling-propensity model: logistic regression of the selection
//! indicator on covariates, fitted by iteratively reweighted least squares.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Standardization, StudyFrame};
use crate::error::{Error, Result};

/// Stop when the max-norm of the score vector falls below this.
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 50;
/// Penalty on standardized slopes when ridge is enabled; the intercept is
/// never penalized.
pub const RIDGE_STRENGTH: f64 = 1e-4;
/// Predicted scores are clipped to `[SCORE_CLIP, 1 - SCORE_CLIP]`.
pub const SCORE_CLIP: f64 = 1e-12;
/// A fitted probability this close to 0 or 1 signals separation.
pub const SEPARATION_SCORE: f64 = 1e-10;
/// A standardized slope larger than this signals separation.
pub const SEPARATION_COEFFICIENT: f64 = 30.0;

const MAX_HALVINGS: usize = 40;
const NEWTON_DECREMENT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FitOptions {
    /// Opt into the ridge penalty instead of failing on separation.
    pub ridge: bool,
}

impl FitOptions {
    pub fn ridge() -> Self {
        FitOptions { ridge: true }
    }

    fn penalty(&self) -> f64 {
        if self.ridge {
            RIDGE_STRENGTH
        } else {
            0.0
        }
    }
}

/// Fitted logistic sampling model. Coefficients live on the standardized
/// covariate scale; `standardization` maps raw covariates onto it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub covariate_names: Vec<String>,
    pub standardization: Standardization,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    #[serde(default)]
    pub ridge: f64,
}

impl LogisticModel {
    /// Intercept and slopes mapped back to the raw covariate scale.
    pub fn raw_scale(&self) -> (f64, Vec<f64>) {
        let slopes: Vec<f64> = self
            .coefficients
            .iter()
            .zip(&self.standardization.sds)
            .map(|(b, s)| b / s)
            .collect();
        let shift: f64 = slopes
            .iter()
            .zip(&self.standardization.means)
            .map(|(b, m)| b * m)
            .sum();
        (self.intercept - shift, slopes)
    }

    /// Linear predictor for a raw covariate vector already restricted to the
    /// model's covariates.
    pub fn linear_predictor(&self, raw: &[f64]) -> f64 {
        let z = self.standardization.apply(raw);
        self.intercept + z.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Design matrix (intercept plus standardized covariates) and response for
/// the sampling model. Exposes the objective and its analytic gradient.
#[derive(Debug, Clone)]
pub struct LogisticDesign {
    /// Columns of the design, the intercept column first.
    columns: Vec<Vec<f64>>,
    response: Vec<f64>,
    penalty: f64,
}

impl LogisticDesign {
    pub fn new(frame: &StudyFrame, subset: &[usize], standardization: &Standardization, penalty: f64) -> Self {
        let big_n = frame.population_size();
        let mut columns = vec![vec![1.0; big_n]];
        for (c, &j) in subset.iter().enumerate() {
            let (mean, sd) = (standardization.means[c], standardization.sds[c]);
            columns.push(frame.units().iter().map(|u| (u.covariates()[j] - mean) / sd).collect());
        }
        let response = frame.units().iter().map(|u| if u.in_sample() { 1.0 } else { 0.0 }).collect();
        LogisticDesign {
            columns,
            response,
            penalty,
        }
    }

    /// Number of parameters, intercept included.
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    fn linear(&self, beta: &[f64]) -> Vec<f64> {
        let mut eta = vec![0.0; self.response.len()];
        for (column, b) in self.columns.iter().zip(beta) {
            for (e, x) in eta.iter_mut().zip(column) {
                *e += b * x;
            }
        }
        eta
    }

    fn ridge_term(&self, beta: &[f64]) -> f64 {
        0.5 * self.penalty * beta[1..].iter().map(|b| b * b).sum::<f64>()
    }

    /// Binomial log-likelihood minus the ridge term.
    pub fn log_likelihood(&self, beta: &[f64]) -> f64 {
        let eta = self.linear(beta);
        let ll: f64 = eta.iter().zip(&self.response).map(|(&e, &y)| log_density(e, y)).sum();
        ll - self.ridge_term(beta)
    }

    /// Analytic score vector of [`Self::log_likelihood`].
    pub fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let resid: Vec<f64> = self
            .linear(beta)
            .iter()
            .zip(&self.response)
            .map(|(&e, &y)| y - inv_logit(e))
            .collect();
        let mut g: Vec<f64> = self.columns.iter().map(|c| dot(c, &resid)).collect();
        for j in 1..g.len() {
            g[j] -= self.penalty * beta[j];
        }
        g
    }

    /// Objective, score and negative Hessian at `beta`.
    fn evaluate(&self, beta: &[f64]) -> Evaluation {
        let p = self.width();
        let mut eta = self.linear(beta);
        let mut objective = 0.0;
        // eta is overwritten with the residual y - mu; mu (1 - mu) goes to weight.
        let mut weight = vec![0.0; eta.len()];
        for ((e, w), &y) in eta.iter_mut().zip(weight.iter_mut()).zip(&self.response) {
            let tail = (-e.abs()).exp();
            let mu = if *e >= 0.0 { 1.0 / (1.0 + tail) } else { tail / (1.0 + tail) };
            let signed = if y > 0.5 { -*e } else { *e };
            objective -= signed.max(0.0) + tail.ln_1p();
            *w = mu * (1.0 - mu);
            *e = y - mu;
        }
        objective -= self.ridge_term(beta);

        let mut gradient: Vec<f64> = self.columns.iter().map(|c| dot(c, &eta)).collect();
        let mut hessian = DMatrix::zeros(p, p);
        let mut scaled = vec![0.0; weight.len()];
        for a in 0..p {
            for ((s, x), w) in scaled.iter_mut().zip(&self.columns[a]).zip(&weight) {
                *s = x * w;
            }
            for b in a..p {
                let h = dot(&scaled, &self.columns[b]);
                hessian[(a, b)] = h;
                hessian[(b, a)] = h;
            }
        }
        for j in 1..p {
            gradient[j] -= self.penalty * beta[j];
            hessian[(j, j)] += self.penalty;
        }
        Evaluation {
            objective,
            gradient,
            hessian,
        }
    }

    fn fitted(&self, beta: &[f64]) -> Vec<f64> {
        self.linear(beta).into_iter().map(inv_logit).collect()
    }
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (a4, b4) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = a4.remainder().iter().zip(b4.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in a4.zip(b4) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `log p` for `y = 1` and `log(1 - p)` for `y = 0`, as `-softplus(∓eta)`.
fn log_density(eta: f64, y: f64) -> f64 {
    if y > 0.5 {
        -softplus(-eta)
    } else {
        -softplus(eta)
    }
}

pub fn inv_logit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct Evaluation {
    objective: f64,
    gradient: Vec<f64>,
    hessian: DMatrix<f64>,
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Fits `logit Pr(Z = 1 | X) = a0 + a'X` on the selected covariates.
///
/// Covariates are standardized over all `N` units before fitting. An empty
/// subset fits the intercept-only model. Starts from zero, uses Newton
/// (IRLS) steps with step-halving whenever the objective would decrease.
pub fn fit_logistic(frame: &StudyFrame, subset: &[usize], options: &FitOptions) -> Result<LogisticModel> {
    frame.check_subset(subset)?;
    if frame.population_size() == 0 {
        return Err(Error::InvalidArgument("cannot fit a propensity model on an empty frame".into()));
    }
    let standardization = Standardization::fit(frame, subset)?;
    let design = LogisticDesign::new(frame, subset, &standardization, options.penalty());
    let p = design.width();

    let mut beta = vec![0.0; p];
    let mut current = design.evaluate(&beta);
    let mut iterations = 0;
    let mut converged = max_norm(&current.gradient) < GRADIENT_TOLERANCE;

    while !converged && iterations < MAX_ITERATIONS {
        let step = current
            .hessian
            .clone()
            .cholesky()
            .ok_or(Error::RankDeficient)?
            .solve(&DVector::from_column_slice(&current.gradient));
        if step.iter().any(|s| !s.is_finite()) {
            return Err(Error::RankDeficient);
        }

        // Inside the quadratic region the predicted change is below the
        // rounding noise of the objective, so the full step is taken.
        let decrement: f64 = current.gradient.iter().zip(step.iter()).map(|(g, s)| g * s).sum();
        let mut scale = 1.0;
        let mut halvings = 0;
        let (candidate, evaluation) = loop {
            let candidate: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let evaluation = design.evaluate(&candidate);
            if evaluation.objective >= current.objective
                || decrement < NEWTON_DECREMENT_FLOOR
                || halvings == MAX_HALVINGS
            {
                break (candidate, evaluation);
            }
            scale *= 0.5;
            halvings += 1;
        };
        iterations += 1;
        beta = candidate;
        current = evaluation;
        converged = max_norm(&current.gradient) < GRADIENT_TOLERANCE;

        if !options.ridge {
            if let Some(b) = beta[1..].iter().find(|b| b.abs() > SEPARATION_COEFFICIENT) {
                return Err(Error::Separation(format!(
                    "standardized coefficient {b:.1} exceeds {SEPARATION_COEFFICIENT}"
                )));
            }
        }
    }

    if !options.ridge {
        if let Some(s) = design
            .fitted(&beta)
            .into_iter()
            .find(|s| !(SEPARATION_SCORE..=1.0 - SEPARATION_SCORE).contains(s))
        {
            return Err(Error::Separation(format!("fitted score {s:e} is degenerate")));
        }
    }

    Ok(LogisticModel {
        intercept: beta[0],
        coefficients: beta[1..].to_vec(),
        covariate_names: subset.iter().map(|&j| frame.covariate_names()[j].clone()).collect(),
        standardization,
        converged,
        iterations,
        final_gradient_norm: max_norm(&current.gradient),
        ridge: options.penalty(),
    })
}

/// Estimated sampling propensities for every population unit, in frame
/// order, together with what stratification needs to know about each unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    ids: Arc<[String]>,
    scores: Vec<f64>,
    in_sample: Vec<bool>,
    treated: Vec<Option<bool>>,
}

impl ScoreSet {
    /// Pairs externally computed scores with a frame's units.
    pub fn from_scores(frame: &StudyFrame, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != frame.population_size() {
            return Err(Error::InvalidArgument(format!(
                "{} scores for {} units",
                scores.len(),
                frame.population_size()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
            return Err(Error::InvalidArgument(format!("score {s} outside (0, 1)")));
        }
        Ok(ScoreSet {
            ids: frame.shared_ids(),
            scores,
            in_sample: frame.units().iter().map(|u| u.in_sample()).collect(),
            treated: frame.units().iter().map(|u| u.treated()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn in_sample(&self) -> &[bool] {
        &self.in_sample
    }

    pub fn treated(&self) -> &[Option<bool>] {
        &self.treated
    }

    /// Scores of the `z = 1` units.
    pub fn sample_scores(&self) -> Vec<f64> {
        self.scores
            .iter()
            .zip(&self.in_sample)
            .filter(|(_, &z)| z)
            .map(|(s, _)| *s)
            .collect()
    }

    /// Scores of every population unit (the sample included).
    pub fn population_scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}

/// Applies a fitted model to a frame. Covariates are located by name, so
/// the frame may carry extra columns.
pub fn predict_scores(model: &LogisticModel, frame: &StudyFrame) -> Result<ScoreSet> {
    let q = model.coefficients.len();
    if frame.q() < q || model.covariate_names.len() != q || model.standardization.means.len() != q {
        return Err(Error::CovariateMismatch {
            expected: q,
            found: frame.q(),
        });
    }
    let columns = model
        .covariate_names
        .iter()
        .map(|name| frame.covariate_index(name))
        .collect::<Result<Vec<_>>>()?;
    let mut raw = vec![0.0; q];
    let scores = frame
        .units()
        .iter()
        .map(|unit| {
            for (slot, &j) in raw.iter_mut().zip(&columns) {
                *slot = unit.covariates()[j];
            }
            inv_logit(model.linear_predictor(&raw)).clamp(SCORE_CLIP, 1.0 - SCORE_CLIP)
        })
        .collect();
    ScoreSet::from_scores(frame, scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UnitRecord;

    fn frame_from(rows: &[(bool, f64)]) -> StudyFrame {
        let units = rows
            .iter()
            .enumerate()
            .map(|(i, &(z, x))| {
                if z {
                    UnitRecord::sampled(i.to_string(), i % 2 == 0, 0.0, vec![x])
                } else {
                    UnitRecord::unsampled(i.to_string(), vec![x])
                }
            })
            .collect();
        StudyFrame::new(vec!["x1".into()], units).unwrap()
    }

    #[test]
    fn intercept_only_closed_form() {
        let rows: Vec<(bool, f64)> = (0..40).map(|i| (i % 4 == 0, i as f64)).collect();
        let frame = frame_from(&rows);
        let model = fit_logistic(&frame, &[], &FitOptions::default()).unwrap();
        assert!(model.converged);
        assert!((model.intercept - (0.25f64 / 0.75).ln()).abs() < 1e-8);
        assert!(model.coefficients.is_empty());
    }

    #[test]
    fn separation_is_an_error() {
        let rows: Vec<(bool, f64)> = (0..40).map(|i| {
            let x = i as f64 - 19.5;
            (x > 0.0, x)
        }).collect();
        let frame = frame_from(&rows);
        let err = fit_logistic(&frame, &[0], &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Separation(_)), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn ridge_fits_separated_data() {
        let rows: Vec<(bool, f64)> = (0..40).map(|i| {
            let x = i as f64 - 19.5;
            (x > 0.0, x)
        }).collect();
        let frame = frame_from(&rows);
        let model = fit_logistic(&frame, &[0], &FitOptions::ridge()).unwrap();
        assert!(model.coefficients[0] > 0.0);
        assert!(model.coefficients[0].is_finite());
    }

    fn toy_model(intercept: f64, slope: f64) -> LogisticModel {
        LogisticModel {
            intercept,
            coefficients: vec![slope],
            covariate_names: vec!["x1".into()],
            standardization: Standardization {
                means: vec![0.0],
                sds: vec![1.0],
            },
            converged: true,
            iterations: 0,
            final_gradient_norm: 0.0,
            ridge: 0.0,
        }
    }

    #[test]
    fn zero_model_scores_half() {
        let frame = frame_from(&[(true, 1.0), (false, -3.0), (false, 7.0)]);
        let scores = predict_scores(&toy_model(0.0, 0.0), &frame).unwrap();
        assert!(scores.scores().iter().all(|&s| s == 0.5));
    }

    #[test]
    fn zero_linear_predictor() {
        let frame = frame_from(&[(true, -2.0), (false, 0.0)]);
        let scores = predict_scores(&toy_model(2.0, 1.0), &frame).unwrap();
        assert_eq!(scores.scores()[0], 0.5);
    }

    #[test]
    fn scores_clipped_inside_unit_interval() {
        let frame = frame_from(&[(true, 100.0), (false, -100.0)]);
        let scores = predict_scores(&toy_model(0.0, 1.0), &frame).unwrap();
        assert_eq!(scores.scores()[0], 1.0 - SCORE_CLIP);
        assert_eq!(scores.scores()[1], SCORE_CLIP);
    }

    #[test]
    fn missing_covariate_in_prediction_frame() {
        let frame = StudyFrame::new(vec![], vec![UnitRecord::unsampled("a", vec![])]).unwrap();
        assert!(matches!(
            predict_scores(&toy_model(0.0, 1.0), &frame),
            Err(Error::CovariateMismatch { expected: 1, found: 0 })
        ));
    }

    #[test]
    fn raw_scale_matches_linear_predictor() {
        let mut model = toy_model(0.3, 1.7);
        model.standardization = Standardization {
            means: vec![2.0],
            sds: vec![4.0],
        };
        let (a0, a) = model.raw_scale();
        let x = 5.5;
        assert!((a0 + a[0] * x - model.linear_predictor(&[x])).abs() < 1e-12);
    }
}
