#![allow(dead_code)]

use psbounds::bounds::OutcomeRange;
use psbounds::data::{StudyFrame, UnitRecord};
use psbounds::propensity::ScoreSet;
use rand::seq::SliceRandom;
use rand::Rng;

/// A frame with externally chosen scores whose equal strata all contain a
/// treated and a control unit.
pub struct Fixture {
    pub frame: StudyFrame,
    pub scores: ScoreSet,
    pub k: usize,
    pub range: OutcomeRange,
    /// Stratum of each unit (1-based) computed directly from the score ranks.
    pub labels: Vec<usize>,
}

pub fn random_fixture<R: Rng>(rng: &mut R, max_units: usize, k: usize) -> Fixture {
    let big_n = rng.gen_range(2 * k..=max_units.max(2 * k));
    let lo: f64 = rng.gen_range(-5.0..0.0);
    let hi = lo + rng.gen_range(1.0..10.0);
    let scores: Vec<f64> = (0..big_n).map(|_| rng.gen_range(0.01..0.99)).collect();

    let mut order: Vec<usize> = (0..big_n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut labels = vec![0; big_n];
    let (base, extra) = (big_n / k, big_n % k);
    let mut start = 0;
    let mut blocks = Vec::new();
    for j in 0..k {
        let size = base + usize::from(j < extra);
        for &i in &order[start..start + size] {
            labels[i] = j + 1;
        }
        blocks.push(order[start..start + size].to_vec());
        start += size;
    }

    // None: not sampled; Some(w): sampled with treatment w.
    let mut status: Vec<Option<bool>> = vec![None; big_n];
    let share = rng.gen_range(0.05..0.6);
    for block in &mut blocks {
        block.shuffle(rng);
        status[block[0]] = Some(true);
        status[block[1]] = Some(false);
        for &i in &block[2..] {
            if rng.gen_bool(share) {
                status[i] = Some(rng.gen_bool(0.5));
            }
        }
    }

    let units = (0..big_n)
        .map(|i| {
            let id = (i + 1).to_string();
            let x = vec![scores[i]];
            match status[i] {
                Some(w) => UnitRecord::sampled(id, w, rng.gen_range(lo..=hi), x),
                None => UnitRecord::unsampled(id, x),
            }
        })
        .collect();
    let frame = StudyFrame::new(vec!["s".into()], units).unwrap();
    let scores = ScoreSet::from_scores(&frame, scores).unwrap();
    Fixture {
        frame,
        scores,
        k,
        range: OutcomeRange::new(lo, hi).unwrap(),
        labels,
    }
}

/// One CSV row: (z, w, y, covariates).
pub type Row = (u8, Option<u8>, Option<f64>, Vec<f64>);

/// CSV text for a small study.
pub fn csv(names: &[&str], rows: &[Row]) -> String {
    let mut out = format!("id,z,w,y,{}\n", names.join(","));
    for (i, (z, w, y, x)) in rows.iter().enumerate() {
        let w = w.map_or(String::new(), |v| v.to_string());
        let y = y.map_or(String::new(), |v| v.to_string());
        let x: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("{},{z},{w},{y},{}\n", i + 1, x.join(",")));
    }
    out
}

/// A 400-unit study with selection on `x1`, treatment effect 0.5 and
/// outcomes inside [-5, 5].
pub fn logistic_study<R: Rng>(rng: &mut R) -> String {
    let mut rows = Vec::new();
    for _ in 0..400 {
        let x1: f64 = rng.gen_range(-2.0..2.0);
        let x2: f64 = rng.gen_range(-2.0..2.0);
        let p = 1.0 / (1.0 + (-(-1.6 + 0.9 * x1)).exp());
        if rng.gen_bool(p) {
            let w = rng.gen_bool(0.5);
            let y = (1.0 + x1 + if w { 0.5 } else { 0.0 } + rng.gen_range(-1.0..1.0)).clamp(-5.0, 5.0);
            rows.push((1, Some(u8::from(w)), Some(y), vec![x1, x2]));
        } else {
            rows.push((0, None, None, vec![x1, x2]));
        }
    }
    csv(&["x1", "x2"], &rows)
}
