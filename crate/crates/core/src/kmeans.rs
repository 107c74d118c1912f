//! Spherical k-means over unit vectors.
//!
//! Seeding is k-means++ (sampling proportional to squared chordal distance),
//! assignment maximizes cosine, and centroids are re-normalized means. An
//! empty cluster is repaired by stealing the point of the largest cluster that
//! lies farthest from its centroid.

use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::dot_f32;
use crate::{Error, Result};

pub const DEFAULT_MAX_ITERATIONS: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub dim: usize,
    /// `k × dim`, row-major, unit rows.
    pub centroids: Vec<f32>,
    pub assignment: Vec<u32>,
    pub iterations: usize,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

/// Clusters `n = data.len() / dim` unit rows into `k` groups.
pub fn spherical_kmeans(data: &[f32], dim: usize, k: usize, seed: u64, max_iterations: usize) -> Result<KMeans> {
    let n = data.len() / dim;
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    if k == 0 || k > n {
        return Err(Error::InvalidClusterCount {
            requested: k,
            records: n,
        });
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut min_dist: Vec<f64> = (0..n).map(|i| chordal_sq(dot_f32(row(i), row(first)))).collect();
    for _ in 1..k {
        let pick = match WeightedIndex::new(&min_dist) {
            Ok(w) => w.sample(&mut rng),
            // Every remaining point coincides with a centroid.
            Err(_) => rng.random_range(0..n),
        };
        let c = row(pick).to_vec();
        for (i, d) in min_dist.iter_mut().enumerate() {
            let nd = chordal_sq(dot_f32(row(i), &c));
            if nd < *d {
                *d = nd;
            }
        }
        centroids.extend_from_slice(&c);
    }

    let mut assignment = vec![u32::MAX; n];
    let mut iterations = 0;
    for _ in 0..max_iterations {
        iterations += 1;
        let mut changed = false;
        for (i, a) in assignment.iter_mut().enumerate() {
            let best = nearest_centroid(&centroids, dim, row(i)) as u32;
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        repair_empty(data, dim, k, &mut centroids, &mut assignment);
        recompute_centroids(data, dim, k, &assignment, &mut centroids);
        if !changed {
            break;
        }
    }
    Ok(KMeans {
        dim,
        centroids,
        assignment,
        iterations,
    })
}

#[inline]
fn chordal_sq(cos: f64) -> f64 {
    (2.0 - 2.0 * cos).max(0.0)
}

/// Index of the highest-cosine centroid; ties go to the lower index.
pub fn nearest_centroid(centroids: &[f32], dim: usize, x: &[f32]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let s = dot_f32(centroid, x);
        if s > best_sim {
            best_sim = s;
            best = c;
        }
    }
    best
}

fn repair_empty(data: &[f32], dim: usize, k: usize, centroids: &mut [f32], assignment: &mut [u32]) {
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignment.iter() {
            sizes[a as usize] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        // Largest cluster, lowest index on ties.
        let largest = (0..k).fold(0, |b, c| if sizes[c] > sizes[b] { c } else { b });
        if sizes[largest] < 2 {
            return;
        }
        let centroid = &centroids[largest * dim..(largest + 1) * dim];
        let mut far = usize::MAX;
        let mut far_sim = f64::INFINITY;
        for (i, &a) in assignment.iter().enumerate() {
            if a as usize == largest {
                let s = dot_f32(&data[i * dim..(i + 1) * dim], centroid);
                if s < far_sim {
                    far_sim = s;
                    far = i;
                }
            }
        }
        assignment[far] = empty as u32;
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(&data[far * dim..(far + 1) * dim]);
    }
}

fn recompute_centroids(data: &[f32], dim: usize, k: usize, assignment: &[u32], centroids: &mut [f32]) {
    let mut sums = vec![0.0f64; k * dim];
    for (i, &a) in assignment.iter().enumerate() {
        let s = &mut sums[a as usize * dim..(a as usize + 1) * dim];
        for (acc, &x) in s.iter_mut().zip(&data[i * dim..(i + 1) * dim]) {
            *acc += x as f64;
        }
    }
    for (c, s) in sums.chunks_exact(dim).enumerate() {
        let n = libm::sqrt(s.iter().map(|x| x * x).sum::<f64>());
        // Antipodal members can cancel; keep the previous centroid then.
        if n > 1e-12 {
            for (dst, &x) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(s) {
                *dst = (x / n) as f32;
            }
        }
    }
}
