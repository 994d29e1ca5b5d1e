//! Point-to-point ICP with closed-form (SVD) rigid fits.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::geometry::{centroid, RigidTransform, Vec3};
use crate::phantom::principal_axes;
use crate::spatial::KdTree;

/// Least-squares rigid transform mapping `src[i]` onto `dst[i]`
/// (orthogonal Procrustes; a reflection is turned into the nearest rotation).
pub fn fit_rigid(src: &[Vec3], dst: &[Vec3]) -> RigidTransform {
    let cs = centroid(src);
    let cd = centroid(dst);
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v requested");
    let mut d = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v_t.transpose() * d * u.transpose();
    RigidTransform {
        rotation: r,
        translation: cd - r * cs,
    }
}

/// Errors unless the points span at least a plane.
pub fn check_non_collinear(points: &[Vec3], what: &str) -> Result<()> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!("{what} needs at least 3 points, got {}", points.len())));
    }
    let (_, var) = principal_axes(points);
    if !(var.y > 1e-12 * var.x.max(1e-300)) {
        return Err(Error::Degenerate(format!("{what} points are collinear")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps the source onto the target.
    pub transform: RigidTransform,
    /// RMS nearest-neighbour distance after alignment.
    pub rms: f64,
    /// RMS before the first iteration and after each one.
    pub history: Vec<f64>,
}

fn rms_to(points: &[Vec3], t: &RigidTransform, tree: &KdTree) -> (f64, Vec<Vec3>) {
    let mut sum = 0.0;
    let mut matched = Vec::with_capacity(points.len());
    for p in points {
        let q = t.apply(p);
        let (i, d2) = tree.nearest(&q).expect("non-empty target");
        sum += d2;
        matched.push(tree.points()[i]);
    }
    ((sum / points.len() as f64).sqrt(), matched)
}

/// ICP from an initial guess. Each iteration fits the optimal rigid motion
/// to the current nearest-neighbour pairs, so the residual never increases.
/// Stops when the improvement drops below `tol` or after `max_iters`.
pub fn icp_from(
    source: &[Vec3],
    target: &KdTree,
    init: &RigidTransform,
    max_iters: usize,
    tol: f64,
) -> IcpResult {
    let mut t = *init;
    let (mut rms, mut matched) = rms_to(source, &t, target);
    let mut history = vec![rms];
    for _ in 0..max_iters {
        let next = fit_rigid(source, &matched);
        let (next_rms, next_matched) = rms_to(source, &next, target);
        if next_rms > rms {
            // numerical noise only; keep the better transform
            break;
        }
        let gain = rms - next_rms;
        t = next;
        rms = next_rms;
        matched = next_matched;
        history.push(rms);
        if gain < tol {
            break;
        }
    }
    IcpResult {
        transform: t,
        rms,
        history,
    }
}

/// Rigid ICP of `source` onto `target` starting from the identity.
pub fn icp_rigid(source: &[Vec3], target: &[Vec3], max_iters: usize, tol: f64) -> Result<IcpResult> {
    check_non_collinear(source, "ICP source")?;
    check_non_collinear(target, "ICP target")?;
    Ok(icp_from(
        source,
        &KdTree::new(target),
        &RigidTransform::identity(),
        max_iters,
        tol,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.random::<f64>() * 40.0, rng.random::<f64>() * 20.0, rng.random::<f64>() * 10.0))
            .collect()
    }

    #[test]
    fn procrustes_recovers_exact_motion() {
        let src = cloud(30, 1);
        let t = RigidTransform::from_axis_angle(&Vec3::new(1.0, 2.0, 0.5), 2.5).with_translation(Vec3::new(3.0, -4.0, 9.0));
        let dst: Vec<Vec3> = src.iter().map(|p| t.apply(p)).collect();
        let fit = fit_rigid(&src, &dst);
        assert!((fit.rotation - t.rotation).amax() < 1e-9);
        assert!((fit.translation - t.translation).amax() < 1e-9);
        assert!((fit.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn reflection_guard() {
        let src = cloud(20, 2);
        let dst: Vec<Vec3> = src.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
        assert!(fit_rigid(&src, &dst).rotation.determinant() > 0.0);
    }

    #[test]
    fn recovers_small_known_motion() {
        let target = cloud(400, 3);
        let t = RigidTransform::from_axis_angle(&Vec3::new(0.3, 1.0, -0.2), 0.08).with_translation(Vec3::new(0.8, -0.5, 0.3));
        let source: Vec<Vec3> = target.iter().map(|p| t.inverse().apply(p)).collect();
        let r = icp_rigid(&source, &target, 200, 1e-12).unwrap();
        assert!(r.transform.rotation_angle_to(&t) < 1e-3);
        assert!((r.transform.translation - t.translation).norm() < 1e-3);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn identical_clouds_give_identity() {
        let c = cloud(50, 4);
        let r = icp_rigid(&c, &c, 10, 1e-12).unwrap();
        assert_eq!(r.rms, 0.0);
        assert!(r.transform.rotation_angle_to(&RigidTransform::identity()) < 1e-12);
        assert!(r.transform.translation.norm() < 1e-12);
    }

    #[test]
    fn collinear_is_degenerate() {
        let line: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(icp_rigid(&line, &cloud(10, 5), 10, 1e-9), Err(Error::Degenerate(_))));
    }
}
