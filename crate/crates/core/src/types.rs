//! Domain types shared by every stage.
//!
//! Constructors validate invariants and reject bad input; nothing here repairs
//! data. All types are plain values and immutable once built.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in center format: `(cx, cy)` is the center, `h`/`w` the
/// height and width, all in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub h: f64,
    pub w: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, h: f64, w: f64) -> Result<Self> {
        let b = BoundingBox { cx, cy, h, w };
        b.validate()?;
        Ok(b)
    }

    /// Build from corner coordinates `(x0, y0)` upper-left, `(x1, y1)` lower-right.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, y1 - y0, x1 - x0)
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.cx, self.cy, self.h, self.w].iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::invalid("box", format!("non-finite field in {self:?}")));
        }
        if self.h <= 0.0 || self.w <= 0.0 {
            return Err(Error::invalid(
                "box",
                format!("non-positive size h={} w={}", self.h, self.w),
            ));
        }
        Ok(())
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    /// Same box moved by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        BoundingBox {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Multiply every coordinate and size by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        BoundingBox {
            cx: self.cx * factor,
            cy: self.cy * factor,
            h: self.h * factor,
            w: self.w * factor,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.h, self.w]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectInstance {
    pub category: usize,
    pub bbox: BoundingBox,
}

/// A `<subject, predicate, object>` annotation; indices point into the owning
/// image's object list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletInstance {
    pub subject_idx: usize,
    pub object_idx: usize,
    pub predicate: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub objects: Vec<ObjectInstance>,
    pub triplets: Vec<TripletInstance>,
}

impl ImageRecord {
    fn validate(&self, num_categories: usize, num_predicates: usize) -> Result<()> {
        let what = || format!("image {:?}", self.image_id);
        for (i, obj) in self.objects.iter().enumerate() {
            if obj.category >= num_categories {
                return Err(Error::invalid(
                    what(),
                    format!("object {i} category {} >= C={num_categories}", obj.category),
                ));
            }
            obj.bbox
                .validate()
                .map_err(|e| Error::invalid(what(), format!("object {i}: {e}")))?;
        }
        let n = self.objects.len();
        for (t, tr) in self.triplets.iter().enumerate() {
            if tr.subject_idx >= n || tr.object_idx >= n {
                return Err(Error::invalid(
                    what(),
                    format!(
                        "invalid object index in triplet {t}: ({}, {}) with {n} objects",
                        tr.subject_idx, tr.object_idx
                    ),
                ));
            }
            if tr.subject_idx == tr.object_idx {
                return Err(Error::invalid(
                    what(),
                    format!("triplet {t} relates object {} to itself", tr.subject_idx),
                ));
            }
            if tr.predicate >= num_predicates {
                return Err(Error::invalid(
                    what(),
                    format!("triplet {t} predicate {} >= K={num_predicates}", tr.predicate),
                ));
            }
        }
        Ok(())
    }
}

/// Annotated images with `num_categories` object classes (C) and
/// `num_predicates` relationship classes (K).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_categories: usize,
    num_predicates: usize,
    records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn new(num_categories: usize, num_predicates: usize, records: Vec<ImageRecord>) -> Result<Self> {
        if num_predicates < 2 {
            return Err(Error::invalid("dataset", format!("K={num_predicates} < 2")));
        }
        if num_categories < 1 {
            return Err(Error::invalid("dataset", "C must be positive"));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for rec in &records {
            if !seen.insert(rec.image_id.as_str()) {
                return Err(Error::invalid(
                    format!("image {:?}", rec.image_id),
                    "duplicate image_id",
                ));
            }
            rec.validate(num_categories, num_predicates)?;
        }
        Ok(Dataset {
            num_categories,
            num_predicates,
            records,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn num_predicates(&self) -> usize {
        self.num_predicates
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn num_triplets(&self) -> usize {
        self.records.iter().map(|r| r.triplets.len()).sum()
    }
}

/// One classifier output for a subject-object pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRecord {
    pub image_id: String,
    pub pair_id: usize,
    #[serde(rename = "gt")]
    pub gt_predicate: usize,
    #[serde(rename = "fg")]
    pub fg_logits: Vec<f64>,
    #[serde(rename = "bg")]
    pub bg_logit: f64,
}

impl LogitRecord {
    pub fn validate(&self, num_predicates: usize) -> Result<()> {
        let what = || format!("logit record ({:?}, {})", self.image_id, self.pair_id);
        if self.fg_logits.len() != num_predicates {
            return Err(Error::invalid(
                what(),
                format!(
                    "logit arity mismatch: {} logits, expected K={num_predicates}",
                    self.fg_logits.len()
                ),
            ));
        }
        if self.gt_predicate >= num_predicates {
            return Err(Error::invalid(
                what(),
                format!("gt {} >= K={num_predicates}", self.gt_predicate),
            ));
        }
        if !self.bg_logit.is_finite() || self.fg_logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(what(), "non-finite logit"));
        }
        Ok(())
    }

    pub fn num_predicates(&self) -> usize {
        self.fg_logits.len()
    }
}

/// Per-class lists of the `alpha` most similar other classes.
///
/// Membership is directed: `i` in the list of `j` says nothing about `j` in the
/// list of `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PopulationTable {
    alpha: usize,
    populations: Vec<Vec<usize>>,
}

impl PopulationTable {
    pub fn new(alpha: usize, populations: Vec<Vec<usize>>) -> Result<Self> {
        if alpha == 0 {
            return Err(Error::invalid("population table", "alpha must be positive"));
        }
        let k = populations.len();
        for (class, pop) in populations.iter().enumerate() {
            if pop.len() > alpha {
                return Err(Error::invalid(
                    "population table",
                    format!("class {class} has {} members > alpha={alpha}", pop.len()),
                ));
            }
            let mut seen = HashSet::new();
            for &m in pop {
                if m >= k {
                    return Err(Error::invalid(
                        "population table",
                        format!("class {class} member {m} >= K={k}"),
                    ));
                }
                if m == class {
                    return Err(Error::invalid(
                        "population table",
                        format!("class {class} lists itself"),
                    ));
                }
                if !seen.insert(m) {
                    return Err(Error::invalid(
                        "population table",
                        format!("class {class} lists {m} twice"),
                    ));
                }
            }
        }
        Ok(PopulationTable { alpha, populations })
    }

    /// Table where every population is empty; the population loss then
    /// reduces to cross-entropy.
    pub fn empty(num_predicates: usize, alpha: usize) -> Self {
        PopulationTable {
            alpha: alpha.max(1),
            populations: vec![Vec::new(); num_predicates],
        }
    }

    pub fn alpha(&self) -> usize {
        self.alpha
    }

    pub fn num_predicates(&self) -> usize {
        self.populations.len()
    }

    pub fn population(&self, class: usize) -> &[usize] {
        &self.populations[class]
    }

    pub fn populations(&self) -> &[Vec<usize>] {
        &self.populations
    }

    pub fn contains(&self, class: usize, member: usize) -> bool {
        self.populations[class].contains(&member)
    }
}

/// Normalized class frequencies; every entry strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyVector {
    pi: Vec<f64>,
}

impl FrequencyVector {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        if let Some(k) = pi.iter().position(|&p| !(p.is_finite() && p > 0.0)) {
            return Err(Error::FrequencyUndefined(k));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "frequency vector",
                format!("sums to {total}, expected 1"),
            ));
        }
        Ok(FrequencyVector { pi })
    }

    /// Normalize raw per-class counts.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::FrequencyUndefined(k));
        }
        let total: usize = counts.iter().sum();
        let pi = counts.iter().map(|&c| c as f64 / total as f64).collect();
        FrequencyVector::new(pi)
    }

    pub fn uniform(num_predicates: usize) -> Self {
        FrequencyVector {
            pi: vec![1.0 / num_predicates as f64; num_predicates],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pi
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }
}

/// `K x beta` multiplicative factors; row = class, column = rank position
/// (column 0 is rank 1). A factor of `1.0` leaves the cell unadjusted.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustmentMatrix {
    beta: usize,
    factors: Vec<Vec<f64>>,
}

impl AdjustmentMatrix {
    pub fn new(beta: usize, factors: Vec<Vec<f64>>) -> Result<Self> {
        if beta == 0 {
            return Err(Error::invalid("adjustment matrix", "beta must be ≥ 1"));
        }
        for (class, row) in factors.iter().enumerate() {
            if row.len() != beta {
                return Err(Error::invalid(
                    "adjustment matrix",
                    format!("class {class} has {} factors, expected beta={beta}", row.len()),
                ));
            }
            if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::invalid(
                    "adjustment matrix",
                    format!("class {class} factor {v} is not a positive finite number"),
                ));
            }
        }
        Ok(AdjustmentMatrix { beta, factors })
    }

    pub fn identity(num_predicates: usize, beta: usize) -> Self {
        AdjustmentMatrix {
            beta: beta.max(1),
            factors: vec![vec![1.0; beta.max(1)]; num_predicates],
        }
    }

    pub fn beta(&self) -> usize {
        self.beta
    }

    pub fn num_predicates(&self) -> usize {
        self.factors.len()
    }

    /// Factor for `class` at 1-based `rank`.
    pub fn factor(&self, class: usize, rank: usize) -> f64 {
        self.factors[class][rank - 1]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.factors
    }
}

/// One feature vector with its label, optionally tied to a dataset pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub label: usize,
    pub x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<usize>,
}

/// Final prediction for one pair, with the per-class scores that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub image_id: String,
    pub pair_id: usize,
    pub gt: usize,
    pub pred: usize,
    pub score: Vec<f64>,
}

impl PredictionRow {
    pub fn is_correct(&self) -> bool {
        self.gt == self.pred
    }
}
