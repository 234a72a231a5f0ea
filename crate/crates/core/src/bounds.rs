//! Worst-case bounds for the population average treatment effect, with and
//! without propensity-score stratification.
//!
//! Unstratified, with `p = n / N`:
//!
//! ```text
//! lower = sate * p + (y_lo - y_hi) * (1 - p)
//! upper = sate * p + (y_hi - y_lo) * (1 - p)
//! ```
//!
//! Stratified, the same formula is applied inside each stratum with the
//! within-stratum sampling fraction `n_j / N_j` and the stratum SATE, then the
//! endpoints are averaged with weights `N_j / N`.
//!
//! With a single global outcome range in every stratum the stratified width
//! telescopes back to the unstratified width, so stratification can only
//! narrow the bounds through stratum-specific ranges. [`RangePolicy`] selects
//! between the two.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::StudyFrame;
use crate::error::{Error, Result};
use crate::stratification::StratumAssignment;

/// Known outcome range `[y_lo, y_hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRange {
    pub lo: f64,
    pub hi: f64,
}

impl OutcomeRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidRange { lo, hi });
        }
        Ok(OutcomeRange { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

impl FromStr for OutcomeRange {
    type Err = Error;

    /// Parses `LO:HI`.
    fn from_str(s: &str) -> Result<Self> {
        let (lo, hi) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("range `{s}` is not of the form LO:HI")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("range endpoint `{v}` is not a number")))
        };
        OutcomeRange::new(parse(lo)?, parse(hi)?)
    }
}

/// Which outcome range bounds each stratum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RangePolicy {
    /// The declared range in every stratum.
    Global,
    /// The observed sample outcome min/max in the stratum, clipped to the
    /// declared range.
    #[default]
    StratumEmpirical,
}

impl fmt::Display for RangePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RangePolicy::Global => "global",
            RangePolicy::StratumEmpirical => "stratum-empirical",
        })
    }
}

impl FromStr for RangePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(RangePolicy::Global),
            "stratum-empirical" => Ok(RangePolicy::StratumEmpirical),
            other => Err(Error::InvalidArgument(format!(
                "unknown range policy `{other}` (expected global or stratum-empirical)"
            ))),
        }
    }
}

/// One stratum's contribution to a bounds estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumBounds {
    pub stratum: usize,
    pub population: usize,
    pub sample: usize,
    pub sate: f64,
    pub p_sampled: f64,
    pub p_unsampled: f64,
    pub y_lo: f64,
    pub y_hi: f64,
    /// `N_j / N`
    pub weight: f64,
    pub lower: f64,
    pub upper: f64,
    /// Set when the stratum range collapsed to a point.
    pub degenerate_range: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsEstimate {
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
    pub policy: RangePolicy,
    pub k: usize,
    pub strata: Vec<StratumBounds>,
}

impl BoundsEstimate {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Difference in mean observed outcomes between treated and control
/// sampled units among `subset` (frame indices).
pub fn estimate_sate(frame: &StudyFrame, subset: &[usize]) -> Result<f64> {
    sate_in(frame, subset, None)
}

fn sate_in(frame: &StudyFrame, subset: &[usize], stratum: Option<usize>) -> Result<f64> {
    let (mut t_sum, mut t_n, mut c_sum, mut c_n) = (0.0, 0usize, 0.0, 0usize);
    for &i in subset {
        let unit = &frame.units()[i];
        if let (Some(w), Some(y)) = (unit.treated(), unit.outcome()) {
            if w {
                t_sum += y;
                t_n += 1;
            } else {
                c_sum += y;
                c_n += 1;
            }
        }
    }
    if t_n == 0 {
        return Err(Error::EmptyArm { arm: "treated", stratum });
    }
    if c_n == 0 {
        return Err(Error::EmptyArm { arm: "control", stratum });
    }
    Ok(t_sum / t_n as f64 - c_sum / c_n as f64)
}

fn stratum_term(stratum: usize, sate: f64, sample: usize, population: usize, weight: f64, lo: f64, hi: f64) -> StratumBounds {
    let p_sampled = sample as f64 / population as f64;
    let p_unsampled = (population - sample) as f64 / population as f64;
    StratumBounds {
        stratum,
        population,
        sample,
        sate,
        p_sampled,
        p_unsampled,
        y_lo: lo,
        y_hi: hi,
        weight,
        lower: sate * p_sampled + (lo - hi) * p_unsampled,
        upper: sate * p_sampled + (hi - lo) * p_unsampled,
        degenerate_range: lo == hi,
    }
}

/// Unstratified worst-case bounds from a SATE estimate and sample counts.
pub fn worst_case_bounds(sate: f64, n: usize, population: usize, range: OutcomeRange) -> Result<BoundsEstimate> {
    if n == 0 {
        return Err(Error::InvalidArgument("worst-case bounds need n > 0".into()));
    }
    if n > population {
        return Err(Error::InvalidArgument(format!("sample size {n} exceeds population {population}")));
    }
    let term = stratum_term(1, sate, n, population, 1.0, range.lo, range.hi);
    Ok(BoundsEstimate {
        lower: term.lower,
        upper: term.upper,
        width: term.upper - term.lower,
        policy: RangePolicy::Global,
        k: 1,
        strata: vec![term],
    })
}

/// Worst-case bounds over the whole frame.
pub fn unstratified_bounds(frame: &StudyFrame, range: OutcomeRange) -> Result<BoundsEstimate> {
    let sate = estimate_sate(frame, &frame.all_indices())?;
    worst_case_bounds(sate, frame.n(), frame.population_size(), range)
}

/// Population-weighted average of per-stratum worst-case bounds.
pub fn stratified_bounds(
    frame: &StudyFrame,
    assignment: &StratumAssignment,
    range: OutcomeRange,
    policy: RangePolicy,
) -> Result<BoundsEstimate> {
    if assignment.labels.len() != frame.population_size() {
        return Err(Error::InvalidArgument(format!(
            "assignment covers {} units, frame has {}",
            assignment.labels.len(),
            frame.population_size()
        )));
    }
    let total = frame.population_size() as f64;
    let mut strata = Vec::with_capacity(assignment.k);
    for j in 1..=assignment.k {
        let members = assignment.members(j);
        let sate = sate_in(frame, &members, Some(j))?;
        let sample = members.iter().filter(|&&i| frame.units()[i].in_sample()).count();
        let (lo, hi) = match policy {
            RangePolicy::Global => (range.lo, range.hi),
            RangePolicy::StratumEmpirical => {
                let (ymin, ymax) = members
                    .iter()
                    .filter_map(|&i| frame.units()[i].outcome())
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
                let lo = ymin.max(range.lo).min(range.hi);
                let hi = ymax.min(range.hi).max(lo);
                (lo, hi)
            }
        };
        strata.push(stratum_term(
            j,
            sate,
            sample,
            members.len(),
            members.len() as f64 / total,
            lo,
            hi,
        ));
    }
    let lower = strata.iter().map(|s| s.weight * s.lower).sum::<f64>();
    let upper = strata.iter().map(|s| s.weight * s.upper).sum::<f64>();
    Ok(BoundsEstimate {
        lower,
        upper,
        width: upper - lower,
        policy,
        k: assignment.k,
        strata,
    })
}

/// Proportional reduction in width: `1 - stratified / unstratified`.
pub fn precision_gain(unstratified: &BoundsEstimate, stratified: &BoundsEstimate) -> Result<f64> {
    if !(unstratified.width > 0.0) {
        return Err(Error::InvalidArgument("unstratified bounds have zero width".into()));
    }
    Ok(1.0 - stratified.width / unstratified.width)
}
