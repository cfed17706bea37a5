use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tscm::geometry::{canonicalize_pair, pair_feature};
use tscm::BoundingBox;

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    BoundingBox::new(
        rng.random_range(-200.0..800.0),
        rng.random_range(-200.0..600.0),
        rng.random_range(0.5..300.0),
        rng.random_range(0.5..300.0),
    )
    .unwrap()
}

/// Box whose center and size are multiples of 1/4, so that every coordinate
/// involved in canonicalization is exactly representable.
fn grid_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let q = |rng: &mut ChaCha8Rng, lo: i32, hi: i32| rng.random_range(lo..hi) as f64 / 4.0;
    BoundingBox::new(q(rng, -800, 3200), q(rng, -800, 2400), q(rng, 1, 1200), q(rng, 1, 1200)).unwrap()
}

#[test]
fn translation_is_quotiented_out_exactly_on_grid_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let (s, o) = (grid_box(&mut rng), grid_box(&mut rng));
        let dx = rng.random_range(-4000..4000) as f64 / 4.0;
        let dy = rng.random_range(-4000..4000) as f64 / 4.0;
        let a = pair_feature(&s, &o).unwrap();
        let b = pair_feature(&s.translated(dx, dy), &o.translated(dx, dy)).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            canonicalize_pair(&s, &o),
            canonicalize_pair(&s.translated(dx, dy), &o.translated(dx, dy))
        );
    }
}

#[test]
fn translation_is_near_exact_on_arbitrary_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..1000 {
        let (s, o) = (random_box(&mut rng), random_box(&mut rng));
        let (dx, dy) = (rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3));
        let a = pair_feature(&s, &o).unwrap().psi;
        let b = pair_feature(&s.translated(dx, dy), &o.translated(dx, dy)).unwrap().psi;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }
}

#[test]
fn uniform_scaling_is_invisible() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..1000 {
        let (s, o) = (random_box(&mut rng), random_box(&mut rng));
        let k = rng.random_range(0.01..100.0);
        let a = pair_feature(&s, &o).unwrap().psi;
        let b = pair_feature(&s.scaled(k), &o.scaled(k)).unwrap().psi;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1e-300), "{x} vs {y}");
        }
    }
}

#[test]
fn union_corner_lands_on_origin() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..200 {
        let (s, o) = canonicalize_pair(&grid_box(&mut rng), &grid_box(&mut rng));
        assert_eq!(s.left().min(o.left()), 0.0);
        assert_eq!(s.top().min(o.top()), 0.0);
    }
}

#[test]
fn hand_fixtures() {
    let unit = BoundingBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
    assert_eq!(pair_feature(&unit, &unit).unwrap().psi, [0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    let s = BoundingBox::new(1.0, 1.0, 2.0, 2.0).unwrap();
    let o = BoundingBox::new(3.0, 1.0, 2.0, 2.0).unwrap();
    assert_eq!(pair_feature(&s, &o).unwrap().psi, [0.5, 0.0, 1.5, 1.0, 1.0, 1.0]);
    assert_eq!(
        pair_feature(&s.scaled(10.0), &o.scaled(10.0)).unwrap().psi,
        [0.5, 0.0, 1.5, 1.0, 1.0, 1.0]
    );
}
