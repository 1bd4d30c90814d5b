//! Seeded Lloyd clustering on pixel vectors, used to initialize logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::Image;

pub const DEFAULT_KMEANS_ITERS: usize = 20;

/// Cluster assignment per pixel plus centers (`k` rows of `channels` values).
#[derive(Clone, Debug)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// k-means++ seeding followed by `iters` Lloyd rounds. Deterministic in `seed`.
pub fn kmeans(x: &Image, k: usize, iters: usize, seed: u64) -> Clustering {
    assert!(k >= 1);
    let n = x.num_pixels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<Vec<f64>> = vec![x.pixel(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|p| dist2(x.pixel(p), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (p, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = p;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = x.pixel(pick).to_vec();
        for (p, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist2(x.pixel(p), &c));
        }
        centers.push(c);
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..iters.max(1) {
        for (p, a) in assignment.iter_mut().enumerate() {
            let px = x.pixel(p);
            let mut best = (f64::INFINITY, 0);
            for (j, c) in centers.iter().enumerate() {
                let d = dist2(px, c);
                if d < best.0 {
                    best = (d, j);
                }
            }
            *a = best.1;
        }
        let ch = x.channels();
        let mut sums = vec![vec![0.0; ch]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x.pixel(p)) {
                *s += v;
            }
        }
        // Empty clusters keep their previous center.
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    Clustering { assignment, centers }
}
