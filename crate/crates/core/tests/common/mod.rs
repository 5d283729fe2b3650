//! Brute-force reference implementations of the evaluation metrics and a
//! generator of small random instances with ties.

#![allow(dead_code)]

use std::collections::HashMap;

use pdc_refine::metrics::EvalRecord;
use rand::Rng;

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (sx, sy): (f64, f64) = (xs.iter().sum(), ys.iter().sum());
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Rank of each value as one plus the count of smaller values plus half the other equal ones.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|x| {
            let less = xs.iter().filter(|y| *y < x).count() as f64;
            let equal = xs.iter().filter(|y| *y == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    pearson(&ranks(xs), &ranks(ys))
}

/// Normal equations of `y ≈ a·p + b` solved by Cramer's rule.
fn calibrate(ps: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = ps.len() as f64;
    let (sp, sy): (f64, f64) = (ps.iter().sum(), ys.iter().sum());
    let spp: f64 = ps.iter().map(|p| p * p).sum();
    let spy: f64 = ps.iter().zip(ys).map(|(p, y)| p * y).sum();
    let det = spp * n - sp * sp;
    let (a, b) = if det.abs() <= 1e-12 * spp.max(1.0) * n { (0.0, sy / n) } else { ((spy * n - sp * sy) / det, (spp * sy - sp * spy) / det) };
    ps.iter().map(|p| a * p + b).collect()
}

pub fn minimized_rmse(ps: &[f64], ys: &[f64]) -> f64 {
    let c = calibrate(ps, ys);
    (c.iter().zip(ys).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / ys.len() as f64).sqrt()
}

pub fn minimized_mae(ps: &[f64], ys: &[f64]) -> f64 {
    let c = calibrate(ps, ys);
    c.iter().zip(ys).map(|(p, y)| (p - y).abs()).sum::<f64>() / ys.len() as f64
}

/// Fraction of (positive, negative) pairs ordered correctly, ties counting one half.
pub fn auroc(records: &[EvalRecord]) -> Option<f64> {
    let pos: Vec<f64> = records.iter().filter(|r| r.y_true > 0.0).map(|r| r.y_pred).collect();
    let neg: Vec<f64> = records.iter().filter(|r| r.y_true <= 0.0).map(|r| r.y_pred).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

fn constant(v: &[f64]) -> bool {
    v.iter().all(|x| *x == v[0])
}

/// Mean per-structure Pearson and Spearman over structures with at least
/// `min_size` records and non-constant labels and predictions.
pub fn per_structure(records: &[EvalRecord], min_size: usize) -> Option<(f64, f64, usize)> {
    let mut groups: HashMap<&str, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for r in records {
        let g = groups.entry(r.structure.as_str()).or_default();
        g.0.push(r.y_true);
        g.1.push(r.y_pred);
    }
    let scored: Vec<(f64, f64)> = groups
        .values()
        .filter(|(ys, ps)| ys.len() >= min_size && !constant(ys) && !constant(ps))
        .map(|(ys, ps)| (pearson(ys, ps), spearman(ys, ps)))
        .collect();
    if scored.is_empty() {
        return None;
    }
    let k = scored.len() as f64;
    Some((scored.iter().map(|s| s.0).sum::<f64>() / k, scored.iter().map(|s| s.1).sum::<f64>() / k, scored.len()))
}

/// A random instance of 3 to 60 records over up to four structures. Half of
/// the instances draw small integers so that ties are common.
pub fn random_records<R: Rng>(rng: &mut R) -> Vec<EvalRecord> {
    let n = rng.random_range(3..=60);
    let tied = rng.random_bool(0.5);
    let structures = rng.random_range(1..=4);
    let draw = |rng: &mut R| if tied { rng.random_range(-3..=3) as f64 } else { rng.random_range(-5.0..5.0) };
    loop {
        let records: Vec<EvalRecord> = (0..n)
            .map(|_| EvalRecord { structure: format!("s{}", rng.random_range(0..structures)), y_true: draw(rng), y_pred: draw(rng) })
            .collect();
        let ys: Vec<f64> = records.iter().map(|r| r.y_true).collect();
        let ps: Vec<f64> = records.iter().map(|r| r.y_pred).collect();
        if !constant(&ys) && !constant(&ps) {
            return records;
        }
    }
}

/// Largest absolute difference between every metric and its oracle; `None`
/// entries must agree on being undefined.
pub fn max_metric_gap(records: &[EvalRecord]) -> f64 {
    use pdc_refine::metrics;
    let ys: Vec<f64> = records.iter().map(|r| r.y_true).collect();
    let ps: Vec<f64> = records.iter().map(|r| r.y_pred).collect();
    let report = metrics::evaluate(records).expect("metrics on a valid instance");
    let mut gap = [
        (report.pearson - pearson(&ys, &ps)).abs(),
        (report.spearman - spearman(&ys, &ps)).abs(),
        (report.minimized_rmse - minimized_rmse(&ps, &ys)).abs(),
        (report.minimized_mae - minimized_mae(&ps, &ys)).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    match (report.auroc, auroc(records)) {
        (Some(a), Some(b)) => gap = gap.max((a - b).abs()),
        (None, None) => {}
        _ => return f64::INFINITY,
    }
    match (&report.per_structure, per_structure(records, metrics::MIN_GROUP_SIZE)) {
        (Some(p), Some((op, os, k))) => {
            if p.groups.len() != k {
                return f64::INFINITY;
            }
            gap = gap.max((p.pearson - op).abs()).max((p.spearman - os).abs());
        }
        (None, None) => {}
        _ => return f64::INFINITY,
    }
    gap
}
