use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::tensor::Matrix;

pub const DEFAULT_KMEANS_ITERS: usize = 10;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| {
        let t = x - y;
        acc + t * t
    })
}

/// Index of the nearest centroid; ties go to the lower index.
fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with Euclidean assignment and a fixed iteration count.
///
/// Initial centroids are `clusters` distinct rows sampled with `seed`. A
/// cluster left empty after an assignment pass takes over the point that is
/// farthest from its own centroid. Returned assignments are the nearest
/// centroid of every row under the final centroids.
pub fn kmeans(data: &Matrix, clusters: usize, iters: usize, seed: u64) -> Result<(Matrix, Vec<u32>)> {
    let n = data.rows();
    if clusters < 1 || clusters > n {
        return Err(Error::InvalidArgument(format!(
            "k-means needs 1 <= C <= N, got C = {clusters}, N = {n}"
        )));
    }
    let dim = data.cols();
    let mut rng = seeded_rng(seed, "kmeans.init");
    let mut init: Vec<usize> = sample(&mut rng, n, clusters).into_vec();
    init.sort_unstable();
    let mut centroids = Matrix::zeros(clusters, dim);
    for (c, &row) in init.iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(data.row(row));
    }

    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0; n];
    for _ in 0..iters {
        for i in 0..n {
            let (c, d) = nearest(data.row(i), &centroids);
            assign[i] = c;
            dist[i] = d;
        }

        let mut counts = vec![0usize; clusters];
        for &c in &assign {
            counts[c] += 1;
        }
        let mut taken = vec![false; n];
        for empty in 0..clusters {
            if counts[empty] > 0 {
                continue;
            }
            // Farthest point from its centroid, ties to the lower row, never
            // stealing the last member of a cluster.
            let mut pick: Option<usize> = None;
            for i in 0..n {
                if taken[i] || counts[assign[i]] <= 1 {
                    continue;
                }
                if pick.is_none_or(|p| dist[i] > dist[p]) {
                    pick = Some(i);
                }
            }
            if let Some(i) = pick {
                counts[assign[i]] -= 1;
                counts[empty] = 1;
                assign[i] = empty;
                dist[i] = 0.0;
                taken[i] = true;
            }
        }

        let mut sums = Matrix::zeros(clusters, dim);
        for i in 0..n {
            for (s, x) in sums.row_mut(assign[i]).iter_mut().zip(data.row(i)) {
                *s += x;
            }
        }
        for c in 0..clusters {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        }
    }

    let assignments = (0..n)
        .map(|i| nearest(data.row(i), &centroids).0 as u32)
        .collect();
    Ok((centroids, assignments))
}

/// Sum of squared distances from each row to its assigned centroid.
pub fn distortion(data: &Matrix, centroids: &Matrix, assignments: &[u32]) -> f64 {
    (0..data.rows())
        .map(|i| sq_dist(data.row(i), centroids.row(assignments[i] as usize)))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = seeded_rng(seed, "test");
        let data = (0..n * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Matrix::from_vec(n, d, data)
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let data = gaussian(50, 4, 1);
        let (c, a) = kmeans(&data, 1, DEFAULT_KMEANS_ITERS, 3).unwrap();
        let mean = data.mean_rows(0..50);
        for (x, y) in c.row(0).iter().zip(&mean) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(a.iter().all(|&x| x == 0));
    }

    #[test]
    fn one_cluster_per_point_has_zero_distortion() {
        let data = gaussian(12, 3, 2);
        let (c, a) = kmeans(&data, 12, DEFAULT_KMEANS_ITERS, 9).unwrap();
        assert_eq!(distortion(&data, &c, &a), 0.0);
        let mut seen = a.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 12);
    }

    #[test]
    fn too_many_clusters_is_an_error() {
        let data = gaussian(5, 2, 3);
        assert!(kmeans(&data, 6, 10, 0).is_err());
        assert!(kmeans(&data, 0, 10, 0).is_err());
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let mut rng = seeded_rng(11, "blobs");
        let n = 200;
        let mut data = Matrix::zeros(n, 5);
        let mut blob = vec![0u32; n];
        for i in 0..n {
            blob[i] = rng.random_range(0..2);
            let center = if blob[i] == 0 { -10.0 } else { 10.0 };
            for x in data.row_mut(i) {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *x = center + noise;
            }
        }
        for seed in 0..5 {
            let (_, a) = kmeans(&data, 2, DEFAULT_KMEANS_ITERS, seed).unwrap();
            // Brute-force check: same partition up to label swap.
            let same = (0..n).all(|i| a[i] == blob[i]);
            let swapped = (0..n).all(|i| a[i] != blob[i]);
            assert!(same || swapped, "seed {seed}");
        }
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // Three identical points and one outlier: initial centroids drawn
        // from the duplicates collapse, leaving a cluster empty.
        let data = Matrix::from_vec(4, 1, vec![0.0, 0.0, 0.0, 10.0]);
        for seed in 0..20 {
            let (c, a) = kmeans(&data, 2, DEFAULT_KMEANS_ITERS, seed).unwrap();
            assert_eq!(distortion(&data, &c, &a), 0.0, "seed {seed}");
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let data = gaussian(100, 4, 5);
        assert_eq!(kmeans(&data, 7, 10, 42).unwrap(), kmeans(&data, 7, 10, 42).unwrap());
    }
}
