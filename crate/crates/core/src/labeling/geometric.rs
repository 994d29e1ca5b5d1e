use crate::cloud::{LabeledPointCloud, PointCloud, LEVELS};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

const MAX_ITERS: usize = 1000;

/// Lloyd iterations of 1-D k-means started from the given centres. Returns
/// the final centres and per-value cluster indices. Ties go to the lower
/// centre; a cluster that empties keeps its previous centre.
pub fn kmeans_1d(values: &[f64], init: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut centers = init.to_vec();
    let mut assign = vec![usize::MAX; values.len()];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for (a, &v) in assign.iter_mut().zip(values) {
            let mut best = 0;
            for k in 1..centers.len() {
                if (v - centers[k]).abs() < (v - centers[best]).abs() {
                    best = k;
                }
            }
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sum = vec![0.0; centers.len()];
        let mut count = vec![0usize; centers.len()];
        for (&a, &v) in assign.iter().zip(values) {
            sum[a] += v;
            count[a] += 1;
        }
        for k in 0..centers.len() {
            if count[k] > 0 {
                centers[k] = sum[k] / count[k] as f64;
            }
        }
    }
    (centers, assign)
}

/// Labels points by 5-cluster 1-D k-means on their projection onto `axis`;
/// clusters are numbered in increasing projection order.
pub fn label_by_geometry(cloud: &PointCloud, axis: &Vec3) -> Result<LabeledPointCloud> {
    if cloud.points.is_empty() {
        return Err(Error::Empty("point cloud"));
    }
    let n = axis.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::invalid("labeling axis must be non-zero"));
    }
    let axis = axis / n;
    let proj: Vec<f64> = cloud.points.iter().map(|p| p.dot(&axis)).collect();
    let mut sorted = proj.clone();
    sorted.sort_by(f64::total_cmp);
    let spread = sorted[sorted.len() - 1] - sorted[0];
    let tol = 1e-6 * spread.max(1.0);
    let distinct = 1 + sorted.windows(2).filter(|w| w[1] - w[0] > tol).count();
    if distinct < LEVELS as usize {
        return Err(Error::Degenerate(format!(
            "{distinct} distinct positions along the axis; need at least {LEVELS}"
        )));
    }
    let init: Vec<f64> = [0.1, 0.3, 0.5, 0.7, 0.9]
        .iter()
        .map(|q| sorted[(q * (sorted.len() - 1) as f64).round() as usize])
        .collect();
    let (centers, assign) = kmeans_1d(&proj, &init);
    let mut order: Vec<usize> = (0..centers.len()).collect();
    order.sort_by(|&a, &b| centers[a].total_cmp(&centers[b]));
    let mut rank = vec![0u8; centers.len()];
    for (r, &k) in order.iter().enumerate() {
        rank[k] = r as u8 + 1;
    }
    let labels = assign.iter().map(|&a| rank[a]).collect();
    LabeledPointCloud::new(cloud.points.clone(), labels)
}
