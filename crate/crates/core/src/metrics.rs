//! Recall-style evaluation of relationship predictions.
//!
//! R@K follows the graph-constraint convention: each pair contributes its one
//! predicted class with that class's score, candidates of an image are ranked
//! by score, and a ground-truth pair counts as recalled when it is among the
//! top K and its predicted class is right. Macro variants average per-class
//! rates over classes that have ground truth.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::PredictionRow;

pub const DEFAULT_KS: [usize; 3] = [20, 50, 100];

/// `#(gt = k and pred = k) / #(gt = k)`, `None` for classes without ground truth.
pub fn per_class_recall(rows: &[PredictionRow], num_classes: usize) -> Vec<Option<f64>> {
    let hits: Vec<bool> = rows.iter().map(PredictionRow::is_correct).collect();
    class_rates(rows, &hits, &class_totals(rows, num_classes))
}

/// Mean over the present values.
pub fn macro_mean(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Fraction of rows predicted correctly.
pub fn accuracy(rows: &[PredictionRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| r.is_correct()).count() as f64 / rows.len() as f64
}

pub fn class_totals(rows: &[PredictionRow], num_classes: usize) -> Vec<usize> {
    let mut totals = vec![0usize; num_classes];
    for r in rows {
        totals[r.gt] += 1;
    }
    totals
}

fn class_rates(rows: &[PredictionRow], hits: &[bool], totals: &[usize]) -> Vec<Option<f64>> {
    let mut matched = vec![0usize; totals.len()];
    for (r, &hit) in rows.iter().zip(hits) {
        if hit {
            matched[r.gt] += 1;
        }
    }
    matched
        .iter()
        .zip(totals)
        .map(|(&m, &t)| (t > 0).then(|| m as f64 / t as f64))
        .collect()
}

/// For each row, whether its pair is recalled within the top `k` candidates of
/// its image. Ties in score go to the smaller pair id, then the smaller class.
pub fn recalled_at_k(rows: &[PredictionRow], k: usize) -> Vec<bool> {
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        by_image.entry(r.image_id.as_str()).or_default().push(i);
    }
    let mut hits = vec![false; rows.len()];
    for idxs in by_image.values_mut() {
        idxs.sort_by(|&a, &b| {
            let (ra, rb) = (&rows[a], &rows[b]);
            rb.score[rb.pred]
                .total_cmp(&ra.score[ra.pred])
                .then(ra.pair_id.cmp(&rb.pair_id))
                .then(ra.pred.cmp(&rb.pred))
        });
        for &i in idxs.iter().take(k) {
            hits[i] = rows[i].is_correct();
        }
    }
    hits
}

/// `sum matched / sum ground-truth pairs`; `total_gt` defaults to the row count.
pub fn recall_at_k(rows: &[PredictionRow], k: usize, total_gt: Option<usize>) -> f64 {
    let total = total_gt.unwrap_or(rows.len());
    if total == 0 {
        return 0.0;
    }
    recalled_at_k(rows, k).iter().filter(|&&h| h).count() as f64 / total as f64
}

/// Per-class R@K with the given per-class ground-truth totals.
pub fn per_class_recall_at_k(rows: &[PredictionRow], k: usize, totals: &[usize]) -> Vec<Option<f64>> {
    class_rates(rows, &recalled_at_k(rows, k), totals)
}

/// `(avg_r + avg_mr) / 2`.
pub fn mr_composite(avg_r: f64, avg_mr: f64) -> f64 {
    (avg_r + avg_mr) / 2.0
}

/// Correction rates for one setting: per class, among pairs the baseline got
/// wrong, the fraction the adjusted predictions got right.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectionRate {
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

fn correction_from_hits(
    rows: &[PredictionRow],
    baseline_hits: &[bool],
    adjusted_hits: &[bool],
    num_classes: usize,
) -> CorrectionRate {
    let mut wrong = vec![0usize; num_classes];
    let mut fixed = vec![0usize; num_classes];
    for ((r, &b), &a) in rows.iter().zip(baseline_hits).zip(adjusted_hits) {
        if !b {
            wrong[r.gt] += 1;
            if a {
                fixed[r.gt] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = fixed
        .iter()
        .zip(&wrong)
        .map(|(&f, &w)| (w > 0).then(|| f as f64 / w as f64))
        .collect();
    let mean = macro_mean(&per_class);
    CorrectionRate { per_class, mean }
}

/// Reorder `baseline` to line up with `adjusted` by `(image_id, pair_id)`.
fn align<'a>(adjusted: &[PredictionRow], baseline: &'a [PredictionRow]) -> Result<Vec<&'a PredictionRow>> {
    if adjusted.len() != baseline.len() {
        return Err(Error::invalid(
            "prediction sets",
            format!("key-set mismatch: {} vs {} rows", adjusted.len(), baseline.len()),
        ));
    }
    let index: HashMap<(&str, usize), &PredictionRow> =
        baseline.iter().map(|r| ((r.image_id.as_str(), r.pair_id), r)).collect();
    adjusted
        .iter()
        .map(|r| {
            index
                .get(&(r.image_id.as_str(), r.pair_id))
                .copied()
                .filter(|b| b.gt == r.gt)
                .ok_or_else(|| {
                    Error::invalid(
                        "prediction sets",
                        format!("key-set mismatch at ({:?}, {})", r.image_id, r.pair_id),
                    )
                })
        })
        .collect()
}

/// Correction rate using plain arg-max correctness.
pub fn correction_rate(
    baseline: &[PredictionRow],
    adjusted: &[PredictionRow],
    num_classes: usize,
) -> Result<CorrectionRate> {
    let aligned = align(adjusted, baseline)?;
    let b: Vec<bool> = aligned.iter().map(|r| r.is_correct()).collect();
    let a: Vec<bool> = adjusted.iter().map(PredictionRow::is_correct).collect();
    Ok(correction_from_hits(adjusted, &b, &a, num_classes))
}

/// Correction rate using top-`k` recall as correctness.
pub fn correction_rate_at_k(
    baseline: &[PredictionRow],
    adjusted: &[PredictionRow],
    k: usize,
    num_classes: usize,
) -> Result<CorrectionRate> {
    let aligned: Vec<PredictionRow> = align(adjusted, baseline)?.into_iter().cloned().collect();
    let b = recalled_at_k(&aligned, k);
    let a = recalled_at_k(adjusted, k);
    Ok(correction_from_hits(adjusted, &b, &a, num_classes))
}

/// 1-based position of the ground-truth class in the row's score ordering.
pub fn gt_rank(row: &PredictionRow) -> usize {
    let g = row.score[row.gt];
    1 + row
        .score
        .iter()
        .enumerate()
        .filter(|&(c, &s)| s > g || (s == g && c < row.gt))
        .count()
}

/// Percentage of false predictions by the rank of their ground-truth class.
pub fn gt_rank_distribution(rows: &[PredictionRow]) -> BTreeMap<usize, f64> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut total = 0usize;
    for r in rows.iter().filter(|r| !r.is_correct()) {
        *counts.entry(gt_rank(r)).or_default() += 1;
        total += 1;
    }
    counts
        .into_iter()
        .map(|(rank, n)| (rank, 100.0 * n as f64 / total as f64))
        .collect()
}

/// Most frequent rank, ties to the smaller rank.
pub fn histogram_mode(hist: &BTreeMap<usize, f64>) -> Option<usize> {
    hist.iter()
        .fold(None, |best: Option<(usize, f64)>, (&r, &p)| match best {
            Some((_, bp)) if bp >= p => best,
            _ => Some((r, p)),
        })
        .map(|(r, _)| r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub num_pairs: usize,
    pub accuracy: f64,
    /// Macro mean of per-class arg-max recall.
    pub mean_recall: Option<f64>,
    pub per_class_recall: Vec<Option<f64>>,
    pub r_at: BTreeMap<usize, f64>,
    pub mr_at: BTreeMap<usize, f64>,
    pub avg_r: f64,
    pub avg_mr: f64,
    pub mr_combined: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_argmax: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub mc_at: BTreeMap<usize, f64>,
    pub gt_rank_histogram: BTreeMap<usize, f64>,
}

/// Evaluation inputs beyond the prediction rows.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions<'a> {
    pub ks: Vec<usize>,
    pub baseline: Option<&'a [PredictionRow]>,
    /// Ground-truth pairs per class; pairs without a prediction count as missed.
    pub gt_totals: Option<Vec<usize>>,
}

pub fn evaluate(rows: &[PredictionRow], num_classes: usize, opts: &EvalOptions<'_>) -> Result<MetricsReport> {
    if let Some(bad) = rows
        .iter()
        .find(|r| r.gt >= num_classes || r.pred >= num_classes || r.score.len() != num_classes)
    {
        return Err(Error::invalid(
            "predictions",
            format!(
                "row ({:?}, {}) inconsistent with K={num_classes}",
                bad.image_id, bad.pair_id
            ),
        ));
    }
    let totals = match &opts.gt_totals {
        Some(t) => {
            if t.len() != num_classes {
                return Err(Error::invalid("ground truth", "per-class totals have wrong length"));
            }
            t.clone()
        }
        None => class_totals(rows, num_classes),
    };
    let total_gt: usize = totals.iter().sum();
    let ks = if opts.ks.is_empty() {
        DEFAULT_KS.to_vec()
    } else {
        opts.ks.clone()
    };

    let hits: Vec<bool> = rows.iter().map(PredictionRow::is_correct).collect();
    let per_class = class_rates(rows, &hits, &totals);
    let accuracy = if total_gt == 0 {
        0.0
    } else {
        hits.iter().filter(|&&h| h).count() as f64 / total_gt as f64
    };

    let mut r_at = BTreeMap::new();
    let mut mr_at = BTreeMap::new();
    for &k in &ks {
        r_at.insert(k, recall_at_k(rows, k, Some(total_gt)));
        if let Some(m) = macro_mean(&per_class_recall_at_k(rows, k, &totals)) {
            mr_at.insert(k, m);
        }
    }
    let mean_of = |m: &BTreeMap<usize, f64>| {
        if m.is_empty() {
            0.0
        } else {
            m.values().sum::<f64>() / m.len() as f64
        }
    };
    let avg_r = mean_of(&r_at);
    let avg_mr = mean_of(&mr_at);

    let mut mc_at = BTreeMap::new();
    let mut mc_argmax = None;
    if let Some(base) = opts.baseline {
        mc_argmax = Some(correction_rate(base, rows, num_classes)?.mean.unwrap_or(0.0));
        for &k in &ks {
            let rate = correction_rate_at_k(base, rows, k, num_classes)?;
            mc_at.insert(k, rate.mean.unwrap_or(0.0));
        }
    }

    Ok(MetricsReport {
        num_pairs: rows.len(),
        accuracy,
        mean_recall: macro_mean(&per_class),
        per_class_recall: per_class,
        r_at,
        mr_at,
        avg_r,
        avg_mr,
        mr_combined: mr_composite(avg_r, avg_mr),
        mc_argmax,
        mc_at,
        gt_rank_histogram: gt_rank_distribution(rows),
    })
}
