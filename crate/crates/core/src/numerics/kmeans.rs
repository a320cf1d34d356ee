//! Lloyd's algorithm with k-means++ seeding.

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;

const MAX_ITERS: usize = 50;
const TOLERANCE: f64 = 1e-9;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the lowest index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus(points: &[Vec<f64>], m: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // Rounding can leave `pick` on a zero-weight point.
            if d2[pick] <= 0.0 {
                pick = d2.iter().rposition(|d| *d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // Every remaining point coincides with a centroid.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.below(free.len())]
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Moves the point farthest from its centroid (among clusters with more than
/// one member) into each empty cluster.
fn fill_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], labels: &mut [usize]) {
    let m = centroids.len();
    loop {
        let mut counts = vec![0usize; m];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let empty = match counts.iter().position(|&c| c == 0) {
            Some(e) => e,
            None => return,
        };
        let donor = (0..points.len())
            .filter(|&i| counts[labels[i]] > 1)
            .map(|i| (i, sq_dist(&points[i], &centroids[labels[i]])))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            })
            .map(|(i, _)| i)
            .expect("m <= n guarantees a cluster with spare members");
        labels[donor] = empty;
        centroids[empty] = points[donor].clone();
    }
}

fn canonical(labels: &[usize], m: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; m];
    let mut next = 0;
    labels
        .iter()
        .map(|&l| {
            if map[l] == usize::MAX {
                map[l] = next;
                next += 1;
            }
            map[l]
        })
        .collect()
}

/// Partitions `points` into `m` non-empty clusters. Labels are renumbered in
/// order of first appearance, so point 0 is always in cluster 0.
pub fn kmeans(points: &[Vec<f64>], m: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    let n = points.len();
    if m < 1 || m > n {
        return Err(Error::Parameter(format!(
            "group count {m} outside [1, {n}]"
        )));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::dim("kmeans", &[n, d], &[]));
    }

    let mut centroids = seed_plus_plus(points, m, rng);
    let mut labels = vec![0; n];
    for _ in 0..MAX_ITERS {
        for (l, p) in labels.iter_mut().zip(points) {
            *l = nearest(p, &centroids).0;
        }
        fill_empty(points, &mut centroids, &mut labels);

        let mut sums = vec![vec![0.0; d]; m];
        let mut counts = vec![0usize; m];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut moved: f64 = 0.0;
        for c in 0..m {
            let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            moved = moved.max(sq_dist(&mean, &centroids[c]).sqrt());
            centroids[c] = mean;
        }
        if moved < TOLERANCE {
            break;
        }
    }
    Ok(canonical(&labels, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sse(points: &[Vec<f64>], labels: &[usize], m: usize) -> f64 {
        let d = points[0].len();
        (0..m)
            .map(|c| {
                let members: Vec<&Vec<f64>> = points
                    .iter()
                    .zip(labels)
                    .filter(|(_, l)| **l == c)
                    .map(|(p, _)| p)
                    .collect();
                if members.is_empty() {
                    return 0.0;
                }
                let mean: Vec<f64> = (0..d)
                    .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
                    .collect();
                members.iter().map(|p| sq_dist(p, &mean)).sum::<f64>()
            })
            .sum()
    }

    /// Exhaustive search over all labelings with every cluster non-empty.
    fn brute_force(points: &[Vec<f64>], m: usize) -> Vec<usize> {
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        for code in 0..m.pow(n as u32) {
            let labels: Vec<usize> = (0..n).map(|i| code / m.pow(i as u32) % m).collect();
            if (0..m).any(|c| !labels.contains(&c)) {
                continue;
            }
            let s = sse(points, &labels, m);
            if s < best.0 {
                best = (s, labels);
            }
        }
        canonical(&best.1, m)
    }

    #[test]
    fn two_obvious_clusters_match_brute_force() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 5.0], vec![5.1, 5.0]];
        let oracle = brute_force(&pts, 2);
        assert_eq!(oracle, vec![0, 0, 1, 1]);
        for seed in 0..10 {
            assert_eq!(kmeans(&pts, 2, &mut RngStream::new(seed, 0)).unwrap(), oracle);
        }
    }

    #[test]
    fn boundary_group_counts() {
        let pts = vec![vec![1.0], vec![2.0], vec![4.0], vec![8.0]];
        let mut rng = RngStream::new(0, 0);
        assert_eq!(kmeans(&pts, 4, &mut rng).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(kmeans(&pts, 1, &mut rng).unwrap(), vec![0, 0, 0, 0]);
        assert!(matches!(kmeans(&pts, 5, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(kmeans(&pts, 0, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn duplicate_points_still_cover_every_label() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let labels = kmeans(&pts, 3, &mut RngStream::new(2, 0)).unwrap();
        for c in 0..3 {
            assert!(labels.contains(&c));
        }
    }

    proptest! {
        #[test]
        fn labels_form_a_partition(
            raw in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..9),
            m_frac in 0.0f64..1.0,
            seed in 0u64..1000,
        ) {
            let n = raw.len();
            let m = 1 + ((n - 1) as f64 * m_frac) as usize;
            let labels = kmeans(&raw, m, &mut RngStream::new(seed, 0)).unwrap();
            prop_assert_eq!(labels.len(), n);
            prop_assert!(labels.iter().all(|&l| l < m));
            for c in 0..m {
                prop_assert!(labels.contains(&c));
            }
            let again = kmeans(&raw, m, &mut RngStream::new(seed, 0)).unwrap();
            prop_assert_eq!(labels, again);
        }
    }
}
