use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tscm::ploss::{p_loss, p_loss_gradient, PLossContext};
use tscm::{FrequencyVector, PopulationTable};

/// Plain log-sum-exp cross-entropy, written without any shared code.
fn ce_oracle(y: usize, f: &[f64]) -> f64 {
    let m = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + f.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - f[y]
}

/// Direct evaluation of `log(1 + sum_{c != y} w_c exp(f_c - f_y))`.
fn weighted_oracle(y: usize, f: &[f64], pi: &[f64], pop: &[usize]) -> f64 {
    let mut s = 0.0;
    for c in 0..f.len() {
        if c == y {
            continue;
        }
        let w = if pop.contains(&c) { pi[c] / pi[y] } else { 1.0 };
        s += w * (f[c] - f[y]).exp();
    }
    s.ln_1p()
}

fn random_context(rng: &mut ChaCha8Rng, k: usize) -> (PLossContext, Vec<f64>, Vec<Vec<usize>>) {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let pi: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let alpha = rng.random_range(1..k);
    let pops: Vec<Vec<usize>> = (0..k)
        .map(|t| {
            sample(rng, k - 1, alpha)
                .into_iter()
                .map(|i| if i >= t { i + 1 } else { i })
                .collect()
        })
        .collect();
    let ctx = PLossContext::new(
        FrequencyVector::new(pi.clone()).unwrap(),
        PopulationTable::new(alpha, pops.clone()).unwrap(),
    )
    .unwrap();
    (ctx, pi, pops)
}

fn logits(rng: &mut ChaCha8Rng, k: usize, scale: f64) -> Vec<f64> {
    (0..k).map(|_| rng.random_range(-scale..scale)).collect()
}

#[test]
fn unit_weights_reduce_to_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let k = rng.random_range(2..=50);
        let f = logits(&mut rng, k, 5.0);
        let y = rng.random_range(0..k);
        let ctx = PLossContext::cross_entropy(k);
        assert!((p_loss(&ctx, y, &f) - ce_oracle(y, &f)).abs() <= 1e-12);
    }
}

#[test]
fn uniform_frequencies_with_populations_also_reduce() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let k = rng.random_range(3..=30);
        let (_, _, pops) = random_context(&mut rng, k);
        let alpha = pops[0].len();
        let ctx = PLossContext::new(FrequencyVector::uniform(k), PopulationTable::new(alpha, pops).unwrap()).unwrap();
        let f = logits(&mut rng, k, 4.0);
        let y = rng.random_range(0..k);
        assert!((p_loss(&ctx, y, &f) - ce_oracle(y, &f)).abs() <= 1e-12);
    }
}

#[test]
fn weighted_loss_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..500 {
        let k = rng.random_range(2..=50);
        let (ctx, pi, pops) = random_context(&mut rng, k);
        let f = logits(&mut rng, k, 3.0);
        let y = rng.random_range(0..k);
        let want = weighted_oracle(y, &f, &pi, &pops[y]);
        let got = p_loss(&ctx, y, &f);
        assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{got} vs {want}");
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(2..=50);
        let (ctx, _, _) = random_context(&mut rng, k);
        let f = logits(&mut rng, k, 3.0);
        let y = rng.random_range(0..k);
        let g = p_loss_gradient(&ctx, y, &f);
        assert!(g.iter().sum::<f64>().abs() <= 1e-12);
        for c in 0..k {
            let mut up = f.clone();
            let mut dn = f.clone();
            up[c] += h;
            dn[c] -= h;
            let fd = (p_loss(&ctx, y, &up) - p_loss(&ctx, y, &dn)) / (2.0 * h);
            let rel = (g[c] - fd).abs() / g[c].abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn common_shift_leaves_loss_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..200 {
        let k = rng.random_range(2..=20);
        let (ctx, _, _) = random_context(&mut rng, k);
        let f = logits(&mut rng, k, 3.0);
        let shift = rng.random_range(-50.0..50.0);
        let g: Vec<f64> = f.iter().map(|v| v + shift).collect();
        let y = rng.random_range(0..k);
        assert!((p_loss(&ctx, y, &f) - p_loss(&ctx, y, &g)).abs() <= 1e-12);
    }
}

#[test]
fn heavier_rival_costs_more() {
    // y = 0 with a single population member whose relative frequency grows.
    let f = [0.3, 0.1, -0.4];
    let mut last = f64::NEG_INFINITY;
    for heavy in [0.1, 0.2, 0.4, 0.6, 0.8] {
        let light = (1.0 - heavy) / 2.0;
        let pi = FrequencyVector::new(vec![light, heavy, light]).unwrap();
        let pops = PopulationTable::new(1, vec![vec![1], vec![0], vec![1]]).unwrap();
        let l = p_loss(&PLossContext::new(pi, pops).unwrap(), 0, &f);
        assert!(l > last);
        last = l;
    }
}

#[test]
fn editing_another_class_population_is_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let k = 8;
    let pi = FrequencyVector::new((1..=k).map(|i| i as f64 / 36.0).collect()).unwrap();
    let base: Vec<Vec<usize>> = (0..k).map(|t| vec![(t + 1) % k, (t + 2) % k]).collect();
    let mut edited = base.clone();
    edited[5] = vec![0, 1];
    let a = PLossContext::new(pi.clone(), PopulationTable::new(2, base).unwrap()).unwrap();
    let b = PLossContext::new(pi, PopulationTable::new(2, edited).unwrap()).unwrap();
    for _ in 0..50 {
        let f = logits(&mut rng, k, 2.0);
        for y in (0..k).filter(|&y| y != 5) {
            assert_eq!(p_loss(&a, y, &f), p_loss(&b, y, &f));
        }
        assert_ne!(p_loss(&a, 5, &f), p_loss(&b, 5, &f));
    }
}
