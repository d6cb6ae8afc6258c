#![allow(dead_code)]

pub mod checks;
pub mod criteria;

use morf::forest::LeafDistributions;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors; both zero counts as exact.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn central_diff<F: FnMut(&[f64]) -> f64>(x: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Leaf rows drawn uniformly, then sorted into non-increasing order.
pub fn random_leaves(rng: &mut ChaCha8Rng, leaves: usize, thresholds: usize) -> LeafDistributions {
    let rows = (0..leaves)
        .map(|_| {
            let mut row: Vec<f64> = (0..thresholds)
                .map(|_| rng.random_range(0.02..0.98))
                .collect();
            row.sort_by(|a, b| b.partial_cmp(a).unwrap());
            row
        })
        .collect();
    LeafDistributions::from_rows(rows).unwrap()
}
