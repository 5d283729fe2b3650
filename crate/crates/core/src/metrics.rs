//! Correlation, calibrated-error, classification and per-structure metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum number of records for a structure to enter the per-structure averages.
pub const MIN_GROUP_SIZE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub structure: String,
    pub y_true: f64,
    pub y_pred: f64,
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Metric(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Metric("need at least two values".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite value".into()));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Metric("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Least-squares `(a, b)` of `y ≈ a·x + b`; `(0, mean y)` when `x` is constant.
pub fn affine_calibration(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    check_pair(xs, ys)?;
    let (mx, my) = (mean(xs), mean(ys));
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Ok((0.0, my));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let a = sxy / sxx;
    Ok((a, my - a * mx))
}

pub fn rmse(preds: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(preds, ys)?;
    Ok((preds.iter().zip(ys).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / ys.len() as f64).sqrt())
}

pub fn mae(preds: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(preds, ys)?;
    Ok(preds.iter().zip(ys).map(|(p, y)| (p - y).abs()).sum::<f64>() / ys.len() as f64)
}

fn calibrated(preds: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
    let (a, b) = affine_calibration(preds, ys)?;
    Ok(preds.iter().map(|p| a * p + b).collect())
}

/// RMSE after least-squares affine calibration of the predictions.
pub fn minimized_rmse(preds: &[f64], ys: &[f64]) -> Result<f64> {
    rmse(&calibrated(preds, ys)?, ys)
}

/// MAE after the same least-squares calibration as [`minimized_rmse`].
pub fn minimized_mae(preds: &[f64], ys: &[f64]) -> Result<f64> {
    mae(&calibrated(preds, ys)?, ys)
}

/// Probability that a random positive (`y_true > 0`) outranks a random
/// negative, counting ties as one half.
pub fn auroc(records: &[EvalRecord]) -> Result<f64> {
    let preds: Vec<f64> = records.iter().map(|r| r.y_pred).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.y_true > 0.0).collect();
    auroc_scores(&preds, &labels)
}

pub fn auroc_scores(preds: &[f64], labels: &[bool]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Metric("length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("both classes must be present".into()));
    }
    let ranks = average_ranks(preds);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub structure: String,
    pub n: usize,
    pub pearson: f64,
    pub spearman: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerStructure {
    pub pearson: f64,
    pub spearman: f64,
    pub groups: Vec<GroupScore>,
}

/// Unweighted means of per-structure correlations over structures with at
/// least [`MIN_GROUP_SIZE`] records. Groups whose labels or predictions are
/// constant have no defined correlation and are skipped as well.
pub fn per_structure(records: &[EvalRecord]) -> Result<PerStructure> {
    let mut by_structure: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let e = by_structure.entry(&r.structure).or_default();
        e.0.push(r.y_true);
        e.1.push(r.y_pred);
    }
    let mut groups = Vec::new();
    for (name, (ys, ps)) in by_structure {
        if ys.len() < MIN_GROUP_SIZE {
            continue;
        }
        match (pearson(&ys, &ps), spearman(&ys, &ps)) {
            (Ok(p), Ok(s)) => groups.push(GroupScore { structure: name.to_string(), n: ys.len(), pearson: p, spearman: s }),
            _ => log::warn!("structure {name}: correlation undefined, group skipped"),
        }
    }
    if groups.is_empty() {
        return Err(Error::Metric(format!("no structure has {MIN_GROUP_SIZE} or more scorable records")));
    }
    let k = groups.len() as f64;
    Ok(PerStructure {
        pearson: groups.iter().map(|g| g.pearson).sum::<f64>() / k,
        spearman: groups.iter().map(|g| g.spearman).sum::<f64>() / k,
        groups,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub pearson: f64,
    pub spearman: f64,
    pub minimized_rmse: f64,
    pub minimized_mae: f64,
    pub auroc: Option<f64>,
    pub per_structure: Option<PerStructure>,
}

/// All metrics; AUROC and per-structure entries are `None` when undefined.
pub fn evaluate(records: &[EvalRecord]) -> Result<MetricsReport> {
    let ys: Vec<f64> = records.iter().map(|r| r.y_true).collect();
    let ps: Vec<f64> = records.iter().map(|r| r.y_pred).collect();
    Ok(MetricsReport {
        n: records.len(),
        pearson: pearson(&ys, &ps)?,
        spearman: spearman(&ys, &ps)?,
        minimized_rmse: minimized_rmse(&ps, &ys)?,
        minimized_mae: minimized_mae(&ps, &ys)?,
        auroc: auroc(records).ok(),
        per_structure: per_structure(records).ok(),
    })
}

impl MetricsReport {
    /// `metric\tvalue` rows, then `structure\tn\tpearson\tspearman` rows.
    pub fn to_tsv(&self) -> String {
        let na = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_else(|| "NA".into());
        let mut out = String::from("metric\tvalue\n");
        let ps = self.per_structure.as_ref();
        for (name, value) in [
            ("per_structure_pearson", na(ps.map(|p| p.pearson))),
            ("per_structure_spearman", na(ps.map(|p| p.spearman))),
            ("pearson", format!("{}", self.pearson)),
            ("spearman", format!("{}", self.spearman)),
            ("minimized_rmse", format!("{}", self.minimized_rmse)),
            ("minimized_mae", format!("{}", self.minimized_mae)),
            ("auroc", na(self.auroc)),
            ("n", format!("{}", self.n)),
        ] {
            let _ = writeln!(out, "{name}\t{value}");
        }
        out.push_str("\nstructure\tn\tpearson\tspearman\n");
        for g in ps.map(|p| p.groups.as_slice()).unwrap_or_default() {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", g.structure, g.n, g.pearson, g.spearman);
        }
        out
    }
}
