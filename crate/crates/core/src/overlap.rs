//! Distributional overlap between sample and population propensity scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propensity::ScoreSet;

pub const LOWER_PERCENTILE: f64 = 5.0;
pub const UPPER_PERCENTILE: f64 = 95.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapStat {
    pub omega: f64,
    pub lo: f64,
    pub hi: f64,
    pub n_pop_inside: usize,
    pub n_pop_total: usize,
}

/// Percentile by linear interpolation between order statistics: with the
/// sorted values `v[0..m]` and `h = (m - 1) p / 100`, the result is
/// `v[floor h] + frac(h) (v[floor h + 1] - v[floor h])`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of an empty sequence".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, p))
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    let h = (m - 1) as f64 * p / 100.0;
    let lower = h.floor() as usize;
    if lower + 1 >= m {
        return sorted[m - 1];
    }
    let frac = h - lower as f64;
    sorted[lower] + frac * (sorted[lower + 1] - sorted[lower])
}

/// Fraction of `population` scores inside the closed band between the 5th
/// and 95th percentiles of `sample`.
pub fn overlap_between(sample: &[f64], population: &[f64]) -> Result<OverlapStat> {
    if sample.is_empty() {
        return Err(Error::InvalidArgument("overlap needs at least one sample unit".into()));
    }
    if population.is_empty() {
        return Err(Error::InvalidArgument("overlap needs at least one population unit".into()));
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, LOWER_PERCENTILE);
    let hi = percentile_sorted(&sorted, UPPER_PERCENTILE);
    Ok(count_inside(lo, hi, population))
}

/// Overlap against an explicit band, e.g. the sample's min and max.
pub fn count_inside(lo: f64, hi: f64, population: &[f64]) -> OverlapStat {
    let inside = population.iter().filter(|&&s| lo <= s && s <= hi).count();
    OverlapStat {
        omega: inside as f64 / population.len() as f64,
        lo,
        hi,
        n_pop_inside: inside,
        n_pop_total: population.len(),
    }
}

/// Overlap of a score set; the denominator is all `N` population units.
pub fn estimate_overlap(scores: &ScoreSet) -> Result<OverlapStat> {
    overlap_between(&scores.sample_scores(), scores.population_scores())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_element() {
        for p in [0.0, 5.0, 37.5, 100.0] {
            assert_eq!(percentile(&[7.0], p).unwrap(), 7.0);
        }
    }

    #[test]
    fn four_point_fixture() {
        let v = [0.8, 0.2, 0.6, 0.4];
        // h = 3 * 0.05 = 0.15 -> 0.2 + 0.15 * 0.2
        assert!((percentile(&v, 5.0).unwrap() - 0.23).abs() < 1e-15);
        assert!((percentile(&v, 95.0).unwrap() - 0.77).abs() < 1e-15);
        assert_eq!(percentile(&v, 0.0).unwrap(), 0.2);
        assert_eq!(percentile(&v, 100.0).unwrap(), 0.8);
    }

    #[test]
    fn median_of_three() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0).unwrap(), 2.0);
    }

    #[test]
    fn empty_and_out_of_range() {
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&[1.0], 101.0).is_err());
        assert!(overlap_between(&[], &[0.5]).is_err());
        assert!(overlap_between(&[0.5], &[]).is_err());
    }

    #[test]
    fn hand_counted_overlap() {
        let stat = overlap_between(&[0.2, 0.4, 0.6, 0.8], &[0.1, 0.25, 0.5, 0.75, 0.9]).unwrap();
        assert!((stat.lo - 0.23).abs() < 1e-15);
        assert!((stat.hi - 0.77).abs() < 1e-15);
        assert_eq!(stat.n_pop_inside, 3);
        assert_eq!(stat.n_pop_total, 5);
        assert_eq!(stat.omega, 0.6);
    }

    #[test]
    fn full_containment() {
        let stat = overlap_between(&[0.1, 0.5, 0.9], &[0.3, 0.4, 0.5]).unwrap();
        assert_eq!(stat.omega, 1.0);
    }

    #[test]
    fn closed_interval_counts_boundary() {
        let stat = count_inside(0.2, 0.4, &[0.2, 0.4, 0.41]);
        assert_eq!(stat.n_pop_inside, 2);
    }
}
