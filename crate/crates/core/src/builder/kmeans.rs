//! Lloyd's k-means with k-means++ seeding.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numkernel::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// Cluster index of every input point.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances from each point to its centroid.
    pub inertia: f64,
    /// Inertia after every assignment step, in order.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, ties to the lowest index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = RngStream::new(seed).substream("kmeans++");
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();

    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < d {
                    break;
                }
                target -= d;
            }
            pick.expect("positive total mass")
        } else {
            // Every remaining point coincides with a centroid.
            chosen.iter().position(|c| !c).expect("k <= n")
        };
        chosen[next] = true;
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(p, &points[next]));
        }
    }
    centroids
}

/// Clusters `points` into `k` groups.
///
/// Runs until the assignment stops changing or `max_iters` assignment steps
/// have been made. A cluster that loses all its points is moved onto the point
/// farthest from its current centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::Range {
            what: "k",
            value: 0,
            lo: 1,
            hi: points.len() as i64,
        });
    }
    if k > points.len() {
        return Err(Error::Size(format!(
            "k = {k} exceeds the number of points ({})",
            points.len()
        )));
    }
    let dim = points[0].len();
    if let Some(bad) = points.iter().position(|p| p.len() != dim) {
        return Err(Error::Shape(format!(
            "point {bad} has dimension {}, expected {dim}",
            points[bad].len()
        )));
    }

    let mut centroids = seed_plus_plus(points, k, seed);
    let mut assignment = vec![usize::MAX; points.len()];
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0;

    loop {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
            inertia += d;
        }
        iterations += 1;

        // Reseed empty clusters one at a time.
        loop {
            let mut counts = vec![0usize; k];
            for &a in &assignment {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let far = (0..points.len())
                .max_by(|&a, &b| {
                    let da = sq_dist(&points[a], &centroids[assignment[a]]);
                    let db = sq_dist(&points[b], &centroids[assignment[b]]);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("non-empty input");
            inertia -= sq_dist(&points[far], &centroids[assignment[far]]);
            centroids[empty] = points[far].clone();
            assignment[far] = empty;
            changed = true;
        }

        if let Some(&prev) = history.last() {
            debug_assert!(inertia <= prev + 1e-9 * prev.abs().max(1.0), "inertia increased");
        }
        history.push(inertia);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for (c, (s, &n)) in centroids.iter_mut().zip(sums.iter().zip(&counts)) {
            *c = s.iter().map(|v| v / n as f64).collect();
        }

        if !changed || iterations >= max_iters {
            break;
        }
    }

    let inertia = points
        .iter()
        .zip(&assignment)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum();
    Ok(KMeans {
        assignment,
        centroids,
        inertia,
        history,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive minimum inertia over all assignments into at most `k` labels.
    fn brute_force_inertia(points: &[Vec<f64>], k: usize) -> f64 {
        let n = points.len();
        let mut best = f64::INFINITY;
        for code in 0..k.pow(n as u32) {
            let labels: Vec<usize> = (0..n).map(|i| code / k.pow(i as u32) % k).collect();
            let mut total = 0.0;
            for c in 0..k {
                let members: Vec<&Vec<f64>> =
                    (0..n).filter(|&i| labels[i] == c).map(|i| &points[i]).collect();
                if members.is_empty() {
                    continue;
                }
                let dim = members[0].len();
                let mean: Vec<f64> = (0..dim)
                    .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64)
                    .collect();
                total += members.iter().map(|p| sq_dist(p, &mean)).sum::<f64>();
            }
            best = best.min(total);
        }
        best
    }

    #[test]
    fn singleton_clusters_when_k_equals_n() {
        let pts = vec![vec![0.0, 1.0], vec![3.0, 1.0], vec![-2.0, 5.0]];
        let r = kmeans(&pts, 3, 1, 50).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut a = r.assignment.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2]);
    }

    #[test]
    fn one_cluster_on_a_line() {
        let r = kmeans(&[vec![0.0], vec![2.0]], 1, 0, 10).unwrap();
        assert_eq!(r.centroids, vec![vec![1.0]]);
        assert_eq!(r.inertia, 2.0);
    }

    #[test]
    fn two_tight_pairs() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]];
        let oracle = brute_force_inertia(&pts, 2);
        assert_eq!(oracle, 1.0);
        for seed in 0..10 {
            let r = kmeans(&pts, 2, seed, 50).unwrap();
            assert_eq!(r.inertia, oracle, "seed {seed}");
            assert_eq!(r.assignment[0], r.assignment[1]);
            assert_eq!(r.assignment[2], r.assignment[3]);
            assert_ne!(r.assignment[0], r.assignment[2]);
        }
    }

    #[test]
    fn errors() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(matches!(kmeans(&pts, 0, 0, 5), Err(Error::Range { .. })));
        assert!(matches!(kmeans(&pts, 3, 0, 5), Err(Error::Size(_))));
        assert!(matches!(
            kmeans(&[vec![0.0], vec![1.0, 2.0]], 1, 0, 5),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn inertia_never_increases_and_is_deterministic() {
        let mut rng = RngStream::new(3).substream("pts");
        for trial in 0..30 {
            let n = 5 + trial % 20;
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.random::<f64>() * 10.0).collect())
                .collect();
            let k = 1 + trial % 4;
            let r = kmeans(&pts, k, trial as u64, 100).unwrap();
            for w in r.history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", r.history);
            }
            assert!(r.inertia <= r.history.last().unwrap() + 1e-9);
            assert_eq!(r, kmeans(&pts, k, trial as u64, 100).unwrap());
            if n <= 8 && k <= 3 {
                assert!(r.inertia >= brute_force_inertia(&pts, k) - 1e-9);
            }
        }
    }
}
