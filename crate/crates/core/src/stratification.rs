//! Equal-size propensity-score strata over the population.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::StudyFrame;
use crate::error::{Error, Result};
use crate::propensity::ScoreSet;

pub const DEFAULT_K_MAX: usize = 5;

/// Per-stratum arm-size requirements used when choosing `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrataRule {
    pub k_max: usize,
    pub min_treated: usize,
    pub min_control: usize,
}

impl Default for StrataRule {
    fn default() -> Self {
        StrataRule {
            k_max: DEFAULT_K_MAX,
            min_treated: 1,
            min_control: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCounts {
    /// `N_j`
    pub population: usize,
    /// `n_j`
    pub sample: usize,
    pub treated: usize,
    pub control: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumAssignment {
    pub k: usize,
    /// 1-based stratum label per unit, in frame order.
    pub labels: Vec<usize>,
    /// Counts for strata `1..=k`, stored at index `j - 1`.
    pub strata: Vec<StratumCounts>,
}

impl StratumAssignment {
    /// Frame indices of the units in stratum `j` (1-based).
    pub fn members(&self, j: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == j)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn satisfies(&self, min_treated: usize, min_control: usize) -> bool {
        self.strata
            .iter()
            .all(|s| s.treated >= min_treated && s.control >= min_control)
    }
}

/// Ascending id, comparing numerically when both ids are integers.
fn compare_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<i128>(), b.parse::<i128>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

/// Frame indices sorted by `(score, id)`.
pub fn score_order(scores: &ScoreSet) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let (s, ids) = (scores.scores(), scores.ids());
    order.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then_with(|| compare_ids(&ids[a], &ids[b])));
    order
}

fn assign_sorted(scores: &ScoreSet, order: &[usize], k: usize) -> StratumAssignment {
    let total = order.len();
    let base = total / k;
    let extra = total % k;
    let mut labels = vec![0; total];
    let mut strata = vec![StratumCounts::default(); k];
    let mut cursor = 0;
    for (j, counts) in strata.iter_mut().enumerate() {
        let size = base + usize::from(j < extra);
        for &i in &order[cursor..cursor + size] {
            labels[i] = j + 1;
            counts.population += 1;
            if scores.in_sample()[i] {
                counts.sample += 1;
                match scores.treated()[i] {
                    Some(true) => counts.treated += 1,
                    Some(false) => counts.control += 1,
                    None => {}
                }
            }
        }
        cursor += size;
    }
    StratumAssignment { k, labels, strata }
}

/// Cuts the population into `k` contiguous blocks of the score order whose
/// sizes differ by at most one, larger blocks first. Ties on score go to the
/// lower stratum by ascending id.
pub fn assign_equal_strata(scores: &ScoreSet, k: usize) -> Result<StratumAssignment> {
    if k == 0 {
        return Err(Error::InvalidArgument("stratum count must be at least 1".into()));
    }
    if k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "{k} strata requested for {} units",
            scores.len()
        )));
    }
    Ok(assign_sorted(scores, &score_order(scores), k))
}

/// Largest `k <= k_max` whose equal-size strata all meet the arm minima.
pub fn effective_strata_count(scores: &ScoreSet, rule: &StrataRule) -> Result<usize> {
    stratify(scores, rule).map(|a| a.k)
}

/// Equal strata at the [`effective_strata_count`].
pub fn stratify(scores: &ScoreSet, rule: &StrataRule) -> Result<StratumAssignment> {
    if rule.k_max == 0 {
        return Err(Error::InvalidArgument("k_max must be at least 1".into()));
    }
    let order = score_order(scores);
    let top = rule.k_max.min(scores.len());
    for k in (1..=top).rev() {
        let assignment = assign_sorted(scores, &order, k);
        if assignment.satisfies(rule.min_treated, rule.min_control) {
            return Ok(assignment);
        }
    }
    let whole = assign_sorted(scores, &order, 1);
    Err(Error::UnsatisfiableStrata {
        min_treated: rule.min_treated,
        min_control: rule.min_control,
        treated: whole.strata.first().map_or(0, |s| s.treated),
        control: whole.strata.first().map_or(0, |s| s.control),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub stratum: usize,
    pub population: usize,
    pub sample: usize,
    pub sample_fraction: f64,
    pub mean_score: f64,
    pub outcome_min: Option<f64>,
    pub outcome_max: Option<f64>,
}

pub fn stratum_summaries(
    frame: &StudyFrame,
    scores: &ScoreSet,
    assignment: &StratumAssignment,
) -> Vec<StratumSummary> {
    (1..=assignment.k)
        .map(|j| {
            let members = assignment.members(j);
            let counts = assignment.strata[j - 1];
            let mean_score =
                members.iter().map(|&i| scores.scores()[i]).sum::<f64>() / members.len() as f64;
            let outcomes = members.iter().filter_map(|&i| frame.units()[i].outcome());
            let (outcome_min, outcome_max) = outcomes.fold((None, None), |(lo, hi), y| {
                (
                    Some(lo.map_or(y, |l: f64| l.min(y))),
                    Some(hi.map_or(y, |h: f64| h.max(y))),
                )
            });
            StratumSummary {
                stratum: j,
                population: counts.population,
                sample: counts.sample,
                sample_fraction: counts.sample as f64 / counts.population as f64,
                mean_score,
                outcome_min,
                outcome_max,
            }
        })
        .collect()
}

/// Writes `id,stratum` rows in frame order.
pub fn write_assignment_csv<W: Write>(scores: &ScoreSet, assignment: &StratumAssignment, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["id", "stratum"])?;
    for (id, label) in scores.ids().iter().zip(&assignment.labels) {
        wtr.write_record([id.as_str(), &label.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn write_summaries_csv<W: Write>(summaries: &[StratumSummary], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for row in summaries {
        wtr.serialize(row)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
