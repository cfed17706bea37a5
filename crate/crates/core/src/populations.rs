//! Relationship populations: for each predicate, the `alpha` predicates whose
//! mean pair geometry is closest.
//!
//! Features are first averaged per (subject category, object category,
//! predicate) key, then averaged again over the keys observed for each
//! predicate. The two-level mean makes the result insensitive to how often
//! each object-pair combination occurs, only which combinations occur.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::pair_feature;
use crate::types::{Dataset, FrequencyVector, PopulationTable};

pub const FEATURE_DIM: usize = 6;
pub const DEFAULT_ALPHA: usize = 5;

pub type Feature = [f64; FEATURE_DIM];

/// Key of one pair category: `(subject category, object category, predicate)`.
pub type PairCategoryKey = (usize, usize, usize);

/// Per-class triplet frequencies of `dataset`.
pub fn class_frequencies(dataset: &Dataset) -> Result<FrequencyVector> {
    let mut counts = vec![0usize; dataset.num_predicates()];
    for rec in dataset.records() {
        for t in &rec.triplets {
            counts[t.predicate] += 1;
        }
    }
    FrequencyVector::from_counts(&counts)
}

/// Running sums of pair features per pair category.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairCategoryAccumulator {
    num_predicates: usize,
    entries: BTreeMap<PairCategoryKey, (Feature, usize)>,
}

impl PairCategoryAccumulator {
    pub fn new(num_predicates: usize) -> Self {
        PairCategoryAccumulator {
            num_predicates,
            entries: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, key: PairCategoryKey, feature: &Feature) {
        let (sum, count) = self.entries.entry(key).or_insert(([0.0; FEATURE_DIM], 0));
        for (s, v) in sum.iter_mut().zip(feature) {
            *s += v;
        }
        *count += 1;
    }

    pub fn count(&self, key: &PairCategoryKey) -> usize {
        self.entries.get(key).map_or(0, |e| e.1)
    }

    /// Mean feature of one pair category, if observed.
    pub fn mean(&self, key: &PairCategoryKey) -> Option<Feature> {
        self.entries.get(key).map(|(sum, count)| mean_of(sum, *count))
    }

    /// Observed keys in ascending order.
    pub fn keys(&self) -> impl Iterator<Item = &PairCategoryKey> {
        self.entries.keys()
    }

    pub fn num_predicates(&self) -> usize {
        self.num_predicates
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn mean_of(sum: &Feature, count: usize) -> Feature {
    let mut out = *sum;
    for v in out.iter_mut() {
        *v /= count as f64;
    }
    out
}

/// Sum the pair feature of every triplet into its pair category. Records are
/// visited in file order.
pub fn accumulate_pair_features(dataset: &Dataset) -> Result<PairCategoryAccumulator> {
    let mut acc = PairCategoryAccumulator::new(dataset.num_predicates());
    for rec in dataset.records() {
        for (pair_id, t) in rec.triplets.iter().enumerate() {
            let subj = &rec.objects[t.subject_idx];
            let obj = &rec.objects[t.object_idx];
            let psi = pair_feature(&subj.bbox, &obj.bbox)
                .map_err(|e| Error::invalid(format!("image {:?} pair {pair_id}", rec.image_id), e.to_string()))?;
            acc.add((subj.category, obj.category, t.predicate), &psi.psi);
        }
    }
    Ok(acc)
}

/// Per-predicate fused features and the number of pair categories behind each.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationFeatureTable {
    features: Vec<Option<Feature>>,
    support: Vec<usize>,
}

impl RelationFeatureTable {
    pub fn from_accumulator(acc: &PairCategoryAccumulator) -> Self {
        let k = acc.num_predicates();
        let mut sums = vec![[0.0; FEATURE_DIM]; k];
        let mut support = vec![0usize; k];
        // BTreeMap order makes the summation order fixed.
        for (&(_, _, predicate), (sum, count)) in &acc.entries {
            let mean = mean_of(sum, *count);
            for (s, v) in sums[predicate].iter_mut().zip(&mean) {
                *s += v;
            }
            support[predicate] += 1;
        }
        let features = sums
            .iter()
            .zip(&support)
            .map(|(sum, &n)| (n > 0).then(|| mean_of(sum, n)))
            .collect();
        RelationFeatureTable { features, support }
    }

    /// Build directly from per-predicate features (support 1 where present).
    pub fn from_features(features: Vec<Option<Feature>>) -> Self {
        let support = features.iter().map(|f| usize::from(f.is_some())).collect();
        RelationFeatureTable { features, support }
    }

    pub fn feature(&self, predicate: usize) -> Option<&Feature> {
        self.features[predicate].as_ref()
    }

    pub fn support(&self, predicate: usize) -> usize {
        self.support[predicate]
    }

    pub fn num_predicates(&self) -> usize {
        self.features.len()
    }

    pub fn num_with_features(&self) -> usize {
        self.features.iter().filter(|f| f.is_some()).count()
    }
}

/// Mean of a predicate's observed pair-category means; `None` if the predicate
/// never occurs.
pub fn relation_feature(acc: &PairCategoryAccumulator, predicate: usize) -> Option<Feature> {
    let mut sum = [0.0; FEATURE_DIM];
    let mut n = 0usize;
    for (&(_, _, p), (s, count)) in &acc.entries {
        if p == predicate {
            let mean = mean_of(s, *count);
            for (a, v) in sum.iter_mut().zip(&mean) {
                *a += v;
            }
            n += 1;
        }
    }
    (n > 0).then(|| mean_of(&sum, n))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum DistanceNorm {
    #[default]
    Euclidean,
    Manhattan,
}

impl DistanceNorm {
    pub fn distance(self, a: &Feature, b: &Feature) -> f64 {
        let diffs = a.iter().zip(b).map(|(x, y)| x - y);
        match self {
            DistanceNorm::Euclidean => diffs.map(|d| d * d).sum::<f64>().sqrt(),
            DistanceNorm::Manhattan => diffs.map(f64::abs).sum(),
        }
    }
}

/// Select, for each predicate with a feature, the `alpha` nearest other
/// predicates (ties to the smaller id). Predicates without a feature get an
/// empty population and are never candidates.
pub fn build_populations(table: &RelationFeatureTable, alpha: usize, norm: DistanceNorm) -> Result<PopulationTable> {
    let candidates: Vec<usize> = (0..table.num_predicates())
        .filter(|&p| table.feature(p).is_some())
        .collect();
    let max = candidates.len().saturating_sub(1);
    if alpha < 1 || alpha > max {
        return Err(Error::AlphaOutOfRange { alpha, max });
    }
    if alpha * 4 > table.num_predicates() {
        log::warn!(
            "alpha={alpha} is large relative to K={}; populations are meant to be sparse",
            table.num_predicates()
        );
    }
    let populations = (0..table.num_predicates())
        .map(|t| {
            let Some(ft) = table.feature(t) else {
                return Vec::new();
            };
            let mut dists: Vec<(f64, usize)> = candidates
                .iter()
                .filter(|&&c| c != t)
                .map(|&c| (norm.distance(ft, table.feature(c).expect("candidate has feature")), c))
                .collect();
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            dists.into_iter().take(alpha).map(|(_, c)| c).collect()
        })
        .collect();
    PopulationTable::new(alpha, populations)
}

/// Full population pipeline: dataset in, table out. No classifier is involved.
pub fn populations_from_dataset(dataset: &Dataset, alpha: usize) -> Result<PopulationTable> {
    let acc = accumulate_pair_features(dataset)?;
    let table = RelationFeatureTable::from_accumulator(&acc);
    build_populations(&table, alpha, DistanceNorm::Euclidean)
}
