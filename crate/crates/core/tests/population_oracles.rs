use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tscm::geometry::pair_feature;
use tscm::populations::{
    accumulate_pair_features, build_populations, class_frequencies, populations_from_dataset, DistanceNorm, Feature,
    RelationFeatureTable,
};
use tscm::synth::{generate, SynthConfig};
use tscm::Dataset;

fn small_world(seed: u64) -> Dataset {
    let cfg = SynthConfig {
        n_train: 3000,
        n_test: 1,
        seed,
        ..SynthConfig::default()
    };
    generate(&cfg).unwrap().train.dataset
}

/// Repeated argmin with ties to the smaller id; O(K^2) per predicate.
fn knn_oracle(features: &[Option<Feature>], alpha: usize) -> Vec<Vec<usize>> {
    let dist = |a: &Feature, b: &Feature| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    (0..features.len())
        .map(|t| {
            let Some(ft) = &features[t] else { return Vec::new() };
            let mut chosen = Vec::new();
            for _ in 0..alpha {
                let mut best: Option<(f64, usize)> = None;
                for (c, fc) in features.iter().enumerate() {
                    let Some(fc) = fc else { continue };
                    if c == t || chosen.contains(&c) {
                        continue;
                    }
                    let d = dist(ft, fc);
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, c));
                    }
                }
                chosen.push(best.unwrap().1);
            }
            chosen
        })
        .collect()
}

/// Two-level mean computed from scratch: group by key, then by predicate.
fn relation_oracle(ds: &Dataset) -> Vec<Option<Feature>> {
    let mut groups: BTreeMap<(usize, usize, usize), Vec<Feature>> = BTreeMap::new();
    for rec in ds.records() {
        for t in &rec.triplets {
            let s = &rec.objects[t.subject_idx];
            let o = &rec.objects[t.object_idx];
            let psi = pair_feature(&s.bbox, &o.bbox).unwrap().psi;
            groups
                .entry((s.category, o.category, t.predicate))
                .or_default()
                .push(psi);
        }
    }
    let mut per_pred: Vec<Vec<Feature>> = vec![Vec::new(); ds.num_predicates()];
    for ((_, _, p), xs) in groups {
        let mut m = [0.0; 6];
        for x in &xs {
            for d in 0..6 {
                m[d] += x[d];
            }
        }
        per_pred[p].push(m.map(|v| v / xs.len() as f64));
    }
    per_pred
        .into_iter()
        .map(|ms| {
            (!ms.is_empty()).then(|| {
                let mut m = [0.0; 6];
                for x in &ms {
                    for d in 0..6 {
                        m[d] += x[d];
                    }
                }
                m.map(|v| v / ms.len() as f64)
            })
        })
        .collect()
}

fn features_of(ds: &Dataset) -> Vec<Option<Feature>> {
    let table = RelationFeatureTable::from_accumulator(&accumulate_pair_features(ds).unwrap());
    (0..ds.num_predicates()).map(|p| table.feature(p).copied()).collect()
}

fn close(a: &[Option<Feature>], b: &[Option<Feature>], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| match (x, y) {
            (Some(x), Some(y)) => x.iter().zip(y).all(|(u, v)| (u - v).abs() <= tol * u.abs().max(1.0)),
            (None, None) => true,
            _ => false,
        })
}

#[test]
fn relation_features_match_grouping_oracle() {
    let ds = small_world(31);
    assert!(close(&features_of(&ds), &relation_oracle(&ds), 1e-12));
}

#[test]
fn populations_match_brute_force_on_random_tables() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..50 {
        let features: Vec<Option<Feature>> = (0..20)
            .map(|_| {
                (rng.random_range(0.0..1.0) > 0.1).then(|| {
                    // coarse values force distance ties
                    std::array::from_fn(|_| rng.random_range(0..4) as f64 * 0.5)
                })
            })
            .collect();
        let n = features.iter().flatten().count();
        if n < 6 {
            continue;
        }
        let got = build_populations(
            &RelationFeatureTable::from_features(features.clone()),
            5,
            DistanceNorm::Euclidean,
        )
        .unwrap();
        assert_eq!(got.populations(), knn_oracle(&features, 5).as_slice());
    }
}

#[test]
fn populations_match_brute_force_on_synthetic_world() {
    let ds = small_world(33);
    let got = populations_from_dataset(&ds, 5).unwrap();
    assert_eq!(got.populations(), knn_oracle(&relation_oracle(&ds), 5).as_slice());
}

#[test]
fn duplicating_annotations_changes_nothing() {
    let ds = small_world(34);
    let base_feats = features_of(&ds);
    let base_pops = populations_from_dataset(&ds, 3).unwrap();
    for r in [2usize, 5] {
        let records = ds
            .records()
            .iter()
            .map(|rec| {
                let mut rec = rec.clone();
                rec.triplets = rec.triplets.iter().flat_map(|t| std::iter::repeat_n(*t, r)).collect();
                rec
            })
            .collect();
        let dup = Dataset::new(ds.num_categories(), ds.num_predicates(), records).unwrap();
        assert!(close(&features_of(&dup), &base_feats, 1e-12), "r = {r}");
        assert_eq!(populations_from_dataset(&dup, 3).unwrap(), base_pops);
        // frequencies are untouched by uniform duplication as well
        let (a, b) = (class_frequencies(&ds).unwrap(), class_frequencies(&dup).unwrap());
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn neighbour_relation_is_not_symmetric() {
    let f = |x: f64, y: f64| Some([x, y, y, y, 1.0, 1.0]);
    let table =
        RelationFeatureTable::from_features(vec![f(0.0, 0.0), Some([0.1, 0.0, 0.0, 0.0, 1.0, 1.0]), f(9.0, 9.0)]);
    let pops = build_populations(&table, 1, DistanceNorm::Euclidean).unwrap();
    assert_eq!(pops.populations(), &[vec![1], vec![0], vec![1]]);
    assert!(pops.contains(2, 1) && !pops.contains(1, 2));
}

#[test]
fn frequencies_match_counting() {
    let ds = small_world(35);
    let mut counts = vec![0usize; ds.num_predicates()];
    for rec in ds.records() {
        for t in &rec.triplets {
            counts[t.predicate] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let pi = class_frequencies(&ds).unwrap();
    for (c, p) in counts.iter().zip(pi.as_slice()) {
        assert!((*c as f64 / total as f64 - p).abs() <= 1e-12);
    }
}

#[test]
fn repeated_runs_agree() {
    let ds = small_world(36);
    assert_eq!(
        populations_from_dataset(&ds, 4).unwrap(),
        populations_from_dataset(&ds, 4).unwrap()
    );
}
