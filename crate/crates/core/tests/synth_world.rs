use tscm::adjustment::augment_logits;
use tscm::pipeline::population_recovery;
use tscm::ploss::{train_linear, PLossContext, TrainConfig};
use tscm::populations::populations_from_dataset;
use tscm::synth::{generate, simulate_biased_logits, BgMode, SynthConfig};

fn counts(ds: &tscm::Dataset) -> Vec<usize> {
    let mut c = vec![0usize; ds.num_predicates()];
    for rec in ds.records() {
        for t in &rec.triplets {
            c[t.predicate] += 1;
        }
    }
    c
}

#[test]
fn head_to_tail_ratio_follows_zipf() {
    let cfg = SynthConfig::default();
    let world = generate(&cfg).unwrap();
    let c = counts(&world.train.dataset);
    assert_eq!(c.iter().sum::<usize>(), 20000);
    let k = cfg.num_predicates as f64;
    let analytic = k.powf(cfg.zipf_s);
    let empirical = c[0] as f64 / c[c.len() - 1] as f64;
    assert!((empirical / analytic - 1.0).abs() <= 0.10, "{empirical} vs {analytic}");
    assert!(c.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn balanced_world_has_equal_counts() {
    let cfg = SynthConfig {
        zipf_s: 0.0,
        n_train: 2003,
        ..SynthConfig::default()
    };
    let c = counts(&generate(&cfg).unwrap().train.dataset);
    let (lo, hi) = (c.iter().min().unwrap(), c.iter().max().unwrap());
    assert!(hi - lo <= 1);
}

#[test]
fn populations_recover_confusion_clusters() {
    let cfg = SynthConfig::default();
    let world = generate(&cfg).unwrap();
    let alpha = cfg.num_predicates / cfg.n_clusters - 1;
    let pops = populations_from_dataset(&world.train.dataset, alpha).unwrap();
    let recovery = population_recovery(&pops, &world.clusters);
    assert!(recovery >= 0.90, "recovery {recovery}");
}

#[test]
fn guidance_modes_share_argmax() {
    let cfg = SynthConfig {
        n_train: 2000,
        n_test: 500,
        ..SynthConfig::default()
    };
    let world = generate(&cfg).unwrap();
    let x: Vec<Vec<f64>> = world.train.features.rows.iter().map(|r| r.x.clone()).collect();
    let tc = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let model = train_linear(
        &x,
        &world.train.features.labels(),
        &PLossContext::cross_entropy(20),
        &tc,
    )
    .unwrap();
    let a = simulate_biased_logits(&model, &world.test.features, BgMode::Constant(1.0), 1).unwrap();
    let b = simulate_biased_logits(&model, &world.test.features, BgMode::Uniform(-0.5, 1.5), 1).unwrap();
    assert_eq!(a.records.len(), world.test.features.rows.len());
    let clamped = b.records.iter().filter(|r| r.bg_logit <= 0.0).count();
    assert!(clamped > 0);
    for (ra, rb) in a.records.iter().zip(&b.records) {
        assert_eq!(ra.fg_logits, rb.fg_logits);
        let za = augment_logits(ra).z();
        for (z, f) in za.iter().zip(&ra.fg_logits) {
            assert_eq!(*z, f.exp());
        }
    }
}
