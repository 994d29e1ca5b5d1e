use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Greedy farthest point sampling. The first index is a seeded uniform draw;
/// each following index maximizes the distance to the already selected set
/// (ties go to the lowest index). Returned in selection order.
pub fn farthest_point_indices(points: &[Vec3], n: usize, seed: u64) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::Empty("farthest point sampling input"));
    }
    if n > points.len() {
        return Err(Error::invalid(format!(
            "cannot sample {n} points from {}",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::with_capacity(n);
    if n == 0 {
        return Ok(selected);
    }
    let first = rng.random_range(0..points.len());
    selected.push(first);
    let mut min_d2: Vec<f64> = points
        .iter()
        .map(|p| (p - points[first]).norm_squared())
        .collect();
    min_d2[first] = f64::NEG_INFINITY;
    while selected.len() < n {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
        let q = points[best];
        min_d2[best] = f64::NEG_INFINITY;
        for (d, p) in min_d2.iter_mut().zip(points) {
            if *d > f64::NEG_INFINITY {
                let nd = (p - q).norm_squared();
                if nd < *d {
                    *d = nd;
                }
            }
        }
    }
    Ok(selected)
}

pub fn farthest_point_sample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    let idx = farthest_point_indices(&cloud.points, n, seed)?;
    PointCloud::new(idx.into_iter().map(|i| cloud.points[i]).collect())
}

/// FPS down to `n` when the set is larger, otherwise returns it unchanged.
pub fn resample_to_at_most(points: &[Vec3], n: usize, seed: u64) -> Result<Vec<Vec3>> {
    if points.len() <= n {
        return Ok(points.to_vec());
    }
    Ok(farthest_point_indices(points, n, seed)?
        .into_iter()
        .map(|i| points[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect()
    }

    #[test]
    fn full_sample_is_a_permutation() {
        let pts = random_cloud(50, 1);
        let mut idx = farthest_point_indices(&pts, 50, 9).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn square_picks_diagonal() {
        let pts = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        for seed in 0..20 {
            let idx = farthest_point_indices(&pts, 2, seed).unwrap();
            assert!((pts[idx[0]] - pts[idx[1]]).norm() > 1.4, "seed {seed}");
        }
    }

    #[test]
    fn too_many_is_an_error() {
        assert!(farthest_point_indices(&random_cloud(3, 0), 4, 0).is_err());
    }

    /// Re-scan oracle: every pick attains the max-min distance.
    #[test]
    fn greedy_choice_verified_by_rescan() {
        let pts = random_cloud(100, 2);
        let idx = farthest_point_indices(&pts, 10, 4).unwrap();
        for k in 1..idx.len() {
            let sel = &idx[..k];
            let dist = |i: usize| {
                sel.iter()
                    .map(|&s| (pts[i] - pts[s]).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            };
            let best = (0..pts.len())
                .filter(|i| !sel.contains(i))
                .map(dist)
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(dist(idx[k]), best);
        }
    }

    #[test]
    fn spread_beats_random_subsets() {
        let min_pair = |pts: &[Vec3]| {
            let mut m = f64::INFINITY;
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    m = m.min((pts[i] - pts[j]).norm());
                }
            }
            m
        };
        for trial in 0..100u64 {
            let pts = random_cloud(200, 100 + trial);
            let fps: Vec<Vec3> = farthest_point_indices(&pts, 16, trial)
                .unwrap()
                .into_iter()
                .map(|i| pts[i])
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let mut pool: Vec<usize> = (0..pts.len()).collect();
            for i in 0..16 {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
            }
            let random: Vec<Vec3> = pool[..16].iter().map(|&i| pts[i]).collect();
            assert!(min_pair(&fps) >= min_pair(&random), "trial {trial}");
        }
    }
}
