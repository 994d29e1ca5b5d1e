//! Shape-completion metrics: Chamfer distance, EMD and F1, reported ×10⁴.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compounding::fps::resample_to_at_most;
use crate::completion::CompletionResult;
use crate::error::{Error, Result};
use crate::geometry::{bounding_box, Vec3};
use crate::phantom::{sample_surface, SpineModel};
use crate::spatial::KdTree;

/// Reporting scale applied to CD and EMD.
pub const SCALE: f64 = 1e4;

/// Sum over `from` of squared distance to the nearest point of `to`.
fn nn_sq_sum(from: &[Vec3], to: &KdTree) -> f64 {
    from.par_iter()
        .map(|p| to.nearest_dist2(p))
        .collect::<Vec<_>>()
        .iter()
        .sum()
}

fn require_non_empty(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("metric input"));
    }
    Ok(())
}

/// Bounding-box diagonal of the ground truth.
pub fn diagonal(points: &[Vec3]) -> Result<f64> {
    let (lo, hi) = bounding_box(points).ok_or(Error::Empty("metric input"))?;
    let d = (hi - lo).norm();
    if !(d > 0.0) {
        return Err(Error::Degenerate("ground-truth bounding box has zero diagonal".into()));
    }
    Ok(d)
}

/// One-directional mean squared nearest-neighbour distance from `a` to `b`
/// (unscaled, in squared input units).
pub fn one_sided_chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    require_non_empty(a, b)?;
    Ok(nn_sq_sum(a, &KdTree::new(b)) / a.len() as f64)
}

/// Squared-distance Chamfer distance ×10⁴. With `normalize`, both sets are
/// divided by the bounding-box diagonal of `gt` first.
pub fn chamfer(pred: &[Vec3], gt: &[Vec3], normalize: bool) -> Result<f64> {
    require_non_empty(pred, gt)?;
    let s = if normalize { diagonal(gt)? } else { 1.0 };
    let raw = one_sided_chamfer(pred, gt)? + one_sided_chamfer(gt, pred)?;
    Ok(raw / (s * s) * SCALE)
}

/// Min-cost perfect matching on a square cost matrix (row-major), returned
/// as `assignment[row] = col`. Shortest augmenting path with potentials,
/// O(n³).
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    let inf = f64::INFINITY;
    // 1-based with a virtual column 0, after the classic formulation
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Mean Euclidean distance of the optimal one-to-one matching between two
/// equal-size sets (unscaled).
pub fn matching_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    require_non_empty(a, b)?;
    if a.len() != b.len() {
        return Err(Error::invalid(format!("matching needs equal sizes, got {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    let cost: Vec<f64> = a.iter().flat_map(|p| b.iter().map(move |q| (p - q).norm())).collect();
    let assign = hungarian(&cost, n);
    Ok(assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Divide by the ground-truth bounding-box diagonal before scaling.
    pub normalize: bool,
    /// Resampling size for EMD when sets differ in size or exceed it.
    pub n_emd: usize,
    /// F1 threshold as a fraction of the ground-truth diagonal.
    pub f1_tau_frac: f64,
    /// Ground-truth surface samples per level.
    pub n_gt: usize,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            normalize: true,
            n_emd: 256,
            f1_tau_frac: 0.01,
            n_gt: 2048,
            seed: 0,
        }
    }
}

/// Earth mover's distance ×10⁴. Sets of different size, or larger than
/// `n_emd`, are first reduced by FPS (fixed seed) to a common size.
pub fn emd(pred: &[Vec3], gt: &[Vec3], normalize: bool, n_emd: usize, seed: u64) -> Result<f64> {
    require_non_empty(pred, gt)?;
    let s = if normalize { diagonal(gt)? } else { 1.0 };
    let n = if pred.len() == gt.len() && pred.len() <= n_emd {
        pred.len()
    } else {
        n_emd.min(pred.len()).min(gt.len())
    };
    let a = resample_to_at_most(pred, n, seed)?;
    let b = resample_to_at_most(gt, n, seed)?;
    Ok(matching_distance(&a, &b)? / s * SCALE)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_at_threshold(pred: &[Vec3], gt: &[Vec3], tau: f64) -> Result<F1Score> {
    require_non_empty(pred, gt)?;
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("F1 threshold must be positive, got {tau}")));
    }
    let t2 = tau * tau;
    let frac_within = |from: &[Vec3], to: &[Vec3]| {
        let tree = KdTree::new(to);
        from.par_iter().filter(|p| tree.nearest_dist2(p) <= t2).count() as f64 / from.len() as f64
    };
    let precision = frac_within(pred, gt);
    let recall = frac_within(gt, pred);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(F1Score { precision, recall, f1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub level: u8,
    pub cd: f64,
    pub emd: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for fewer than two values).
    pub fn of(values: &[f64]) -> MeanStd {
        if values.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub cd: MeanStd,
    pub emd: MeanStd,
    pub f1: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
}

impl Average {
    pub fn of(rows: &[MetricsRow]) -> Average {
        let col = |f: fn(&MetricsRow) -> f64| MeanStd::of(&rows.iter().map(f).collect::<Vec<_>>());
        Average {
            cd: col(|r| r.cd),
            emd: col(|r| r.emd),
            f1: col(|r| r.f1),
            precision: col(|r| r.precision),
            recall: col(|r| r.recall),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    /// Levels without a completion.
    pub missing: Vec<u8>,
    pub average: Average,
    pub config: MetricsConfig,
}

impl MetricsReport {
    pub fn new(rows: Vec<MetricsRow>, missing: Vec<u8>, config: MetricsConfig) -> Self {
        let average = Average::of(&rows);
        Self {
            rows,
            missing,
            average,
            config,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Aligned text table: one row per level plus the mean ± std line.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>18} {:>18} {:>16}", "Level", "CD", "EMD", "F1");
        for r in &self.rows {
            let _ = writeln!(s, "{:<8} {:>18.2} {:>18.2} {:>16.4}", format!("L{}", r.level), r.cd, r.emd, r.f1);
        }
        let a = &self.average;
        let _ = writeln!(
            s,
            "{:<8} {:>18} {:>18} {:>16}",
            "Average",
            format!("{:.2} ± {:.2}", a.cd.mean, a.cd.std),
            format!("{:.2} ± {:.2}", a.emd.mean, a.emd.std),
            format!("{:.4} ± {:.4}", a.f1.mean, a.f1.std),
        );
        for l in &self.missing {
            let _ = writeln!(s, "L{l}: no completion");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,cd,emd,f1,precision,recall\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.level, r.cd, r.emd, r.f1, r.precision, r.recall);
        }
        s
    }

    /// Writes `metrics.json`, `metrics.txt` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            ("metrics.json", self.to_json()),
            ("metrics.txt", self.to_table()),
            ("metrics.csv", self.to_csv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// All three metrics of `pred` against ground-truth samples `gt`.
pub fn evaluate_points(level: u8, pred: &[Vec3], gt: &[Vec3], cfg: &MetricsConfig) -> Result<MetricsRow> {
    let diag = diagonal(gt)?;
    let cd = chamfer(pred, gt, cfg.normalize)?;
    let e = emd(pred, gt, cfg.normalize, cfg.n_emd, cfg.seed)?;
    let f = f1_at_threshold(pred, gt, cfg.f1_tau_frac * diag)?;
    Ok(MetricsRow {
        level,
        cd,
        emd: e,
        f1: f.f1,
        precision: f.precision,
        recall: f.recall,
    })
}

/// Per-level metrics against area-uniform samples of the phantom surface.
/// Levels without a result are listed in `missing`.
pub fn evaluate_spine(results: &[CompletionResult], gt: &SpineModel, cfg: &MetricsConfig) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for v in &gt.vertebrae {
        match results.iter().find(|r| r.level == v.level) {
            Some(r) => {
                let gt_pts = sample_surface(&v.mesh, cfg.n_gt, cfg.seed.wrapping_add(v.level as u64))?;
                rows.push(evaluate_points(v.level, &r.points, &gt_pts, cfg)?);
            }
            None => {
                log::warn!("no completion for L{}; row omitted", v.level);
                missing.push(v.level);
            }
        }
    }
    Ok(MetricsReport::new(rows, missing, *cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect()
    }

    fn brute_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
        let side = |x: &[Vec3], y: &[Vec3]| {
            x.iter()
                .map(|p| y.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / x.len() as f64
        };
        (side(a, b) + side(b, a)) * SCALE
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..=p.len() {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn chamfer_examples() {
        let a = vec![Vec3::zeros()];
        let b = vec![Vec3::new(0.0, 0.0, 0.01)];
        assert!((chamfer(&a, &b, false).unwrap() - 2.0).abs() < 1e-9);
        assert_eq!(chamfer(&a, &a, false).unwrap(), 0.0);
        assert!(chamfer(&a, &a, true).is_err(), "degenerate diagonal");
        assert!(chamfer(&[], &a, false).is_err());
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = random_set(50, &mut rng);
            let b = random_set(43, &mut rng);
            assert!((chamfer(&a, &b, false).unwrap() - brute_chamfer(&a, &b)).abs() < 1e-9);
        }
    }

    #[test]
    fn chamfer_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_set(30, &mut rng);
        let b = random_set(30, &mut rng);
        let s = 3.5;
        let sa: Vec<Vec3> = a.iter().map(|p| p * s).collect();
        let sb: Vec<Vec3> = b.iter().map(|p| p * s).collect();
        let base = chamfer(&a, &b, false).unwrap();
        assert!((chamfer(&sa, &sb, false).unwrap() - s * s * base).abs() < 1e-9 * s * s * base);
        assert!((chamfer(&sa, &sb, true).unwrap() - chamfer(&a, &b, true).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn emd_two_points_crossed() {
        let a = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        let b = vec![Vec3::new(1.1, 0.0, 0.0), Vec3::new(0.1, 0.0, 0.0)];
        let straight = ((a[0] - b[0]).norm() + (a[1] - b[1]).norm()) / 2.0;
        let crossed = ((a[0] - b[1]).norm() + (a[1] - b[0]).norm()) / 2.0;
        let got = emd(&a, &b, false, 256, 0).unwrap() / SCALE;
        assert!((got - straight.min(crossed)).abs() < 1e-12);
    }

    #[test]
    fn emd_matches_factorial_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=6 {
            let perms = permutations(n);
            for _ in 0..10 {
                let a = random_set(n, &mut rng);
                let b = random_set(n, &mut rng);
                let best = perms
                    .iter()
                    .map(|p| p.iter().enumerate().map(|(i, &j)| (a[i] - b[j]).norm()).sum::<f64>() / n as f64)
                    .fold(f64::INFINITY, f64::min);
                let got = emd(&a, &b, false, 256, 0).unwrap() / SCALE;
                assert!((got - best).abs() < 1e-9, "n={n}");
            }
        }
    }

    #[test]
    fn emd_zero_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_set(40, &mut rng);
        let b = random_set(40, &mut rng);
        assert_eq!(emd(&a, &a, false, 256, 0).unwrap(), 0.0);
        let mut shuffled = a.clone();
        shuffled.reverse();
        assert!(emd(&a, &shuffled, false, 256, 0).unwrap() < 1e-12);
        let ab = emd(&a, &b, false, 256, 0).unwrap();
        assert!((ab - emd(&b, &a, false, 256, 0).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn emd_resamples_unequal_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_set(300, &mut rng);
        let b = random_set(120, &mut rng);
        let v = emd(&a, &b, true, 256, 0).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn hungarian_small_matrix() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let a = hungarian(&cost, 3);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * 3 + j]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn f1_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_set(30, &mut rng);
        let s = f1_at_threshold(&a, &a, 1e-6).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let far: Vec<Vec3> = a.iter().map(|p| p + Vec3::repeat(100.0)).collect();
        let s = f1_at_threshold(&a, &far, 0.5).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert!(f1_at_threshold(&a, &a, 0.0).is_err());
    }

    #[test]
    fn f1_monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a = random_set(20, &mut rng);
            let b = random_set(25, &mut rng);
            let t1 = rng.random_range(0.01..0.3);
            let t2 = t1 + rng.random_range(0.0..0.3);
            assert!(f1_at_threshold(&a, &b, t2).unwrap().f1 >= f1_at_threshold(&a, &b, t1).unwrap().f1);
        }
    }

    #[test]
    fn report_average_and_round_trip() {
        let rows: Vec<MetricsRow> = (1..=5)
            .map(|l| MetricsRow {
                level: l,
                cd: 1.0 / 3.0 * l as f64,
                emd: 0.1 + l as f64,
                f1: 0.2 * l as f64,
                precision: 0.9,
                recall: 0.7,
            })
            .collect();
        let r = MetricsReport::new(rows.clone(), vec![], MetricsConfig::default());
        let mean = rows.iter().map(|r| r.cd).sum::<f64>() / 5.0;
        assert!((r.average.cd.mean - mean).abs() < 1e-12);
        let back = MetricsReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.to_csv().lines().count(), 6);
        assert!(r.to_table().contains("Average"));
        assert_eq!(MeanStd::of(&[2.0]).std, 0.0);
        assert!((MeanStd::of(&[1.0, 3.0]).std - 2f64.sqrt()).abs() < 1e-15);
    }
}
