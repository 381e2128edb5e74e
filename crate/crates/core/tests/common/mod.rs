//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

pub mod grads;

use kbdm::numerics::{RngState, Tensor};

/// Squared Euclidean distance by explicit loop.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Brute-force nearest entry with lowest-index tie-break.
pub fn brute_nearest(z: &[f64], entries: &Tensor) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for j in 0..entries.rows() {
        let d = sq_dist(z, entries.row(j));
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding, best of `restarts`, each run to
/// convergence. Returns (centers, mean squared quantization error).
pub fn lloyd(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> (Vec<Vec<f64>>, f64) {
    let mut rng = RngState::new(seed);
    let mut best: Option<(Vec<Vec<f64>>, f64)> = None;
    for _ in 0..restarts {
        let mut centers = vec![points[rng.below(points.len())].clone()];
        while centers.len() < k {
            let d: Vec<f64> = points
                .iter()
                .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d.iter().sum();
            let mut r = rng.uniform() * total;
            let mut pick = points.len() - 1;
            for (i, di) in d.iter().enumerate() {
                if r < *di {
                    pick = i;
                    break;
                }
                r -= di;
            }
            centers.push(points[pick].clone());
        }
        let mut assign = vec![usize::MAX; points.len()];
        loop {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let mut bj = 0;
                for j in 1..k {
                    if sq_dist(p, &centers[j]) < sq_dist(p, &centers[bj]) {
                        bj = j;
                    }
                }
                if assign[i] != bj {
                    assign[i] = bj;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            for (j, c) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                for (d, v) in c.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let err = points
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / points.len() as f64;
        if best.as_ref().is_none_or(|b| err < b.1) {
            best = Some((centers, err));
        }
    }
    best.unwrap()
}

/// 200 points around the unit-square corners, σ = 0.05.
pub fn gaussian_clusters(count: usize, sigma: f64, seed: u64) -> Vec<Vec<f64>> {
    let corners = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let mut rng = RngState::new(seed);
    (0..count)
        .map(|_| {
            let c = corners[rng.below(4)];
            vec![c[0] + sigma * rng.normal(), c[1] + sigma * rng.normal()]
        })
        .collect()
}
