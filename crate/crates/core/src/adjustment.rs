//! Post-hoc adaptive logit adjustment.
//!
//! Logits are augmented to `z[c] = exp(f[c]) * g` with `g` the background
//! logit (floored at [`GUIDANCE_FLOOR`]). For every cell `(class i, rank j)`
//! with `j <= beta`, each sample whose rank-`j` class is `i` imposes one bound
//! on the cell's factor `t`:
//!
//! * ground truth `i`: lower bound `max_{c != i} z[c] / z[i]` (satisfied when `t >= bound`),
//! * ground truth `g != i`: upper bound `z[g] / z[i]` (satisfied when `t < bound`).
//!
//! Lower and upper bounds are subsampled to equal counts, and the factor is
//! the value satisfying the most bounds, found by a sweep over the sorted
//! bound values. Cells are fitted independently of each other.
//!
//! Ratios and arg-max decisions are evaluated from the raw logits, where the
//! common guidance factor cancels exactly; `z` itself is only materialized
//! for reported scores.

use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{LogitDump, PredictionSet};
use crate::types::{AdjustmentMatrix, LogitRecord, PredictionRow};

/// Guidance used when the background logit is not positive.
pub const GUIDANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_BETA: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedLogits {
    log_base: Vec<f64>,
    guidance: f64,
}

impl AugmentedLogits {
    /// `z[c] = exp(f[c]) * guidance`.
    pub fn z(&self) -> Vec<f64> {
        self.log_base.iter().map(|f| f.exp() * self.guidance).collect()
    }

    pub fn guidance(&self) -> f64 {
        self.guidance
    }

    pub fn len(&self) -> usize {
        self.log_base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_base.is_empty()
    }

    /// `z[a] / z[b]`, computed without the guidance factor.
    pub fn ratio(&self, a: usize, b: usize) -> f64 {
        (self.log_base[a] - self.log_base[b]).exp()
    }
}

pub fn augment_logits(record: &LogitRecord) -> AugmentedLogits {
    let guidance = if record.bg_logit > 0.0 {
        record.bg_logit
    } else {
        GUIDANCE_FLOOR
    };
    AugmentedLogits {
        log_base: record.fg_logits.clone(),
        guidance,
    }
}

/// Classes by descending augmented logit; ties to the smaller class id.
pub fn rank_classes(z: &AugmentedLogits) -> Vec<usize> {
    rank_by_key(&z.log_base)
}

fn rank_by_key(keys: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    order
}

fn argmax(keys: &[f64]) -> usize {
    keys.iter()
        .enumerate()
        .fold(0, |best, (c, v)| if *v > keys[best] { c } else { best })
}

/// Bounds collected for one `(class, rank)` cell; `rank` is 1-based. Both
/// lists are kept sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundSet {
    pub class: usize,
    pub rank: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoundSet {
    pub fn new(class: usize, rank: usize, mut lower: Vec<f64>, mut upper: Vec<f64>) -> Self {
        lower.sort_by(f64::total_cmp);
        upper.sort_by(f64::total_cmp);
        BoundSet {
            class,
            rank,
            lower,
            upper,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty() && self.upper.is_empty()
    }

    pub fn len(&self) -> usize {
        self.lower.len() + self.upper.len()
    }
}

enum Bound {
    Lower(f64),
    Upper(f64),
}

/// The bound a ranked sample puts on the cell of the class at `rank`.
fn sample_bound(aug: &AugmentedLogits, ranks: &[usize], gt: usize, rank: usize) -> Bound {
    let class = ranks[rank - 1];
    if gt == class {
        let rival = if rank == 1 { ranks[1] } else { ranks[0] };
        Bound::Lower(aug.ratio(rival, class))
    } else {
        Bound::Upper(aug.ratio(gt, class))
    }
}

/// Bounds on the factor of cell `(class, rank)` from every sample whose
/// rank-`rank` class is `class`.
pub fn extract_bounds(dump: &[LogitRecord], class: usize, rank: usize) -> BoundSet {
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for rec in dump {
        if rank == 0 || rank > rec.fg_logits.len() || rec.fg_logits.len() < 2 {
            continue;
        }
        let aug = augment_logits(rec);
        let ranks = rank_classes(&aug);
        if ranks[rank - 1] != class {
            continue;
        }
        match sample_bound(&aug, &ranks, rec.gt_predicate, rank) {
            Bound::Lower(v) => lower.push(v),
            Bound::Upper(v) => upper.push(v),
        }
    }
    BoundSet::new(class, rank, lower, upper)
}

/// Bounds of every cell in one pass; index `class * beta + (rank - 1)`.
pub fn extract_all_bounds(dump: &[LogitRecord], num_classes: usize, beta: usize) -> Vec<BoundSet> {
    let depth = beta.min(num_classes);
    let mut lower = vec![Vec::new(); num_classes * beta];
    let mut upper = vec![Vec::new(); num_classes * beta];
    for rec in dump {
        let aug = augment_logits(rec);
        let ranks = rank_classes(&aug);
        for rank in 1..=depth {
            let cell = ranks[rank - 1] * beta + (rank - 1);
            match sample_bound(&aug, &ranks, rec.gt_predicate, rank) {
                Bound::Lower(v) => lower[cell].push(v),
                Bound::Upper(v) => upper[cell].push(v),
            }
        }
    }
    lower
        .into_iter()
        .zip(upper)
        .enumerate()
        .map(|(cell, (lo, up))| BoundSet::new(cell / beta, cell % beta + 1, lo, up))
        .collect()
}

/// Subsample lower and upper bounds to `min(|lower|, |upper|)` each,
/// uniformly without replacement. A set with an empty side is returned as is.
pub fn balance_bounds(bounds: &BoundSet, seed: u64) -> BoundSet {
    let m = bounds.lower.len().min(bounds.upper.len());
    if m == 0 {
        return bounds.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |values: &[f64]| -> Vec<f64> {
        if values.len() == m {
            return values.to_vec();
        }
        let mut idx = index::sample(&mut rng, values.len(), m).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| values[i]).collect()
    };
    let lower = pick(&bounds.lower);
    let upper = pick(&bounds.upper);
    BoundSet::new(bounds.class, bounds.rank, lower, upper)
}

/// Seed of cell `(class, rank)` derived from the master seed.
pub fn cell_seed(master_seed: u64, class: usize, rank: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((class as u64) << 32) | rank as u64);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepResult {
    pub chosen_t: f64,
    pub satisfied_count: usize,
    /// `[lo, hi)`; `hi = None` means unbounded. An interval starting at 0 is
    /// open at 0.
    pub optimal_interval: (f64, Option<f64>),
}

/// Number of bounds satisfied by factor `t`.
pub fn count_satisfied(bounds: &BoundSet, t: f64) -> usize {
    bounds.lower.iter().filter(|&&l| t >= l).count() + bounds.upper.iter().filter(|&&u| t < u).count()
}

/// Factor satisfying the most bounds.
///
/// The count is piecewise constant on half-open intervals between sorted
/// bound values. Each maximal run of best intervals gets one representative:
/// `1` if it contains `1`, its left end if it lies above `1`, its midpoint if
/// it lies below. The run whose representative is closest to `1` wins, ties to
/// the smaller value.
pub fn sweep_optimal_factor(bounds: &BoundSet) -> SweepResult {
    let mut events: Vec<(f64, i64)> = bounds
        .lower
        .iter()
        .map(|&v| (v, 1))
        .chain(bounds.upper.iter().map(|&v| (v, -1)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));

    // (lo, hi, count) for consecutive intervals covering (0, inf).
    let mut intervals: Vec<(f64, Option<f64>, i64)> = Vec::with_capacity(events.len() + 1);
    let mut count = bounds.upper.len() as i64;
    let mut lo = 0.0;
    let mut i = 0;
    while i < events.len() {
        let value = events[i].0;
        if value > lo || intervals.is_empty() && value > 0.0 {
            intervals.push((lo, Some(value), count));
        }
        while i < events.len() && events[i].0 == value {
            count += events[i].1;
            i += 1;
        }
        lo = value;
    }
    intervals.push((lo, None, count));

    let best = intervals.iter().map(|iv| iv.2).max().unwrap_or(0);
    let mut choice: Option<(f64, (f64, Option<f64>))> = None;
    let mut k = 0;
    while k < intervals.len() {
        if intervals[k].2 != best {
            k += 1;
            continue;
        }
        let run_lo = intervals[k].0;
        let mut run_hi = intervals[k].1;
        while k + 1 < intervals.len() && intervals[k + 1].2 == best {
            k += 1;
            run_hi = intervals[k].1;
        }
        k += 1;
        let t = representative(run_lo, run_hi);
        let better = match choice {
            None => true,
            Some((ct, _)) => {
                let (d, cd) = ((t - 1.0).abs(), (ct - 1.0).abs());
                d < cd || (d == cd && t < ct)
            }
        };
        if better {
            choice = Some((t, (run_lo, run_hi)));
        }
    }
    let (chosen_t, optimal_interval) = choice.expect("at least one interval");
    SweepResult {
        chosen_t,
        satisfied_count: best as usize,
        optimal_interval,
    }
}

fn representative(lo: f64, hi: Option<f64>) -> f64 {
    let contains_one = lo <= 1.0 && hi.is_none_or(|h| 1.0 < h);
    match hi {
        _ if contains_one => 1.0,
        _ if lo > 1.0 => lo,
        Some(h) => (lo + h) / 2.0,
        None => lo,
    }
}

/// Per-cell fitting summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellDiagnostic {
    pub class: usize,
    pub rank: usize,
    pub lower: usize,
    pub upper: usize,
    pub kept_per_side: usize,
    pub factor: f64,
    pub satisfied: usize,
    /// Among upper bounds satisfied by the factor, the fraction whose sample
    /// actually becomes correct when only this cell is adjusted.
    pub upper_flip_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjustmentFit {
    pub matrix: AdjustmentMatrix,
    pub cells: Vec<CellDiagnostic>,
}

fn check_dump(dump: &LogitDump, beta: usize) -> Result<()> {
    if beta == 0 {
        return Err(Error::invalid("beta", "beta must be ≥ 1"));
    }
    if dump.records.is_empty() {
        return Err(Error::invalid("logit dump", "no records to fit on"));
    }
    for rec in &dump.records {
        rec.validate(dump.num_predicates)?;
    }
    Ok(())
}

/// Fit the `K x beta` factor matrix on a logit dump.
pub fn fit_adjustment(dump: &LogitDump, beta: usize, seed: u64) -> Result<AdjustmentMatrix> {
    Ok(fit_adjustment_with_diagnostics(dump, beta, seed)?.matrix)
}

pub fn fit_adjustment_with_diagnostics(dump: &LogitDump, beta: usize, seed: u64) -> Result<AdjustmentFit> {
    check_dump(dump, beta)?;
    let k = dump.num_predicates;
    let cells = extract_all_bounds(&dump.records, k, beta);
    let fitted: Vec<(SweepResult, usize)> = cells
        .par_iter()
        .map(|b| {
            let balanced = balance_bounds(b, cell_seed(seed, b.class, b.rank));
            let kept = balanced.lower.len().min(balanced.upper.len());
            (sweep_optimal_factor(&balanced), kept)
        })
        .collect();
    let factors: Vec<Vec<f64>> = fitted
        .chunks(beta)
        .map(|row| row.iter().map(|(r, _)| r.chosen_t).collect())
        .collect();
    let matrix = AdjustmentMatrix::new(beta, factors)?;

    let mut flips = vec![(0usize, 0usize); k * beta];
    for rec in &dump.records {
        let aug = augment_logits(rec);
        let ranks = rank_classes(&aug);
        let gt = rec.gt_predicate;
        for rank in 1..=beta.min(k) {
            let class = ranks[rank - 1];
            if class == gt {
                continue;
            }
            let t = matrix.factor(class, rank);
            if t < aug.ratio(gt, class) {
                let cell = &mut flips[class * beta + rank - 1];
                cell.0 += 1;
                let mut keys = rec.fg_logits.clone();
                keys[class] += t.ln();
                if argmax(&keys) == gt {
                    cell.1 += 1;
                }
            }
        }
    }

    let diagnostics = cells
        .iter()
        .zip(&fitted)
        .zip(&flips)
        .map(|((b, (sweep, kept)), &(sat, flipped))| CellDiagnostic {
            class: b.class,
            rank: b.rank,
            lower: b.lower.len(),
            upper: b.upper.len(),
            kept_per_side: *kept,
            factor: sweep.chosen_t,
            satisfied: sweep.satisfied_count,
            upper_flip_fraction: (sat > 0).then(|| flipped as f64 / sat as f64),
        })
        .collect();
    Ok(AdjustmentFit {
        matrix,
        cells: diagnostics,
    })
}

/// Adjusted scores and prediction for one record: the class at rank
/// `j <= beta` is scaled by its cell factor, lower ranks are left alone.
pub fn apply_adjustment(record: &LogitRecord, matrix: &AdjustmentMatrix) -> Result<(Vec<f64>, usize)> {
    let k = record.fg_logits.len();
    if matrix.num_predicates() != k {
        return Err(Error::KMismatch {
            left: "logit record".into(),
            left_k: k,
            right: "adjustment matrix".into(),
            right_k: matrix.num_predicates(),
        });
    }
    let aug = augment_logits(record);
    let ranks = rank_classes(&aug);
    let mut scores = aug.z();
    let mut keys = record.fg_logits.clone();
    for (pos, &class) in ranks.iter().take(matrix.beta()).enumerate() {
        let t = matrix.factor(class, pos + 1);
        scores[class] *= t;
        keys[class] += t.ln();
    }
    Ok((scores, argmax(&keys)))
}

/// Apply `matrix` to every record of a dump.
pub fn apply_to_dump(dump: &LogitDump, matrix: &AdjustmentMatrix) -> Result<PredictionSet> {
    let rows = dump
        .records
        .par_iter()
        .map(|rec| {
            let (score, pred) = apply_adjustment(rec, matrix)?;
            Ok(PredictionRow {
                image_id: rec.image_id.clone(),
                pair_id: rec.pair_id,
                gt: rec.gt_predicate,
                pred,
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionSet {
        num_predicates: dump.num_predicates,
        rows,
    })
}
