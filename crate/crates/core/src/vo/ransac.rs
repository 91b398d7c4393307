//! RANSAC over minimal 3-point rigid alignments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{rigid_align, Pose};
use crate::Point3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    /// 3D residual in meters.
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            iterations: 200,
            inlier_threshold: 0.05,
            seed: 0,
        }
    }
}

fn inliers_of(pose: &Pose<f64>, src: &[Point3], dst: &[Point3], thr: f64) -> Vec<usize> {
    let thr2 = thr * thr;
    src.iter()
        .zip(dst)
        .enumerate()
        .filter(|(_, (s, d))| (*d - pose.transform(s)).norm_squared() <= thr2)
        .map(|(i, _)| i)
        .collect()
}

fn gather(pts: &[Point3], idx: &[usize]) -> Vec<Point3> {
    idx.iter().map(|&i| pts[i]).collect()
}

/// Robust `dst ≈ pose(src)`; returns the refit pose and its inlier indices.
pub fn estimate_relative_pose(
    src: &[Point3],
    dst: &[Point3],
    params: &RansacParams,
) -> Result<(Pose<f64>, Vec<usize>)> {
    ransac(src, dst, None, params)
}

/// Like [`estimate_relative_pose`], but hypotheses are ranked by inliers among
/// `preferred` correspondences first and by total inliers second.
pub fn estimate_relative_pose_prioritized(
    src: &[Point3],
    dst: &[Point3],
    preferred: &[bool],
    params: &RansacParams,
) -> Result<(Pose<f64>, Vec<usize>)> {
    if preferred.len() != src.len() {
        return Err(Error::Shape(format!(
            "{} priorities for {} points",
            preferred.len(),
            src.len()
        )));
    }
    ransac(src, dst, Some(preferred), params)
}

fn ransac(
    src: &[Point3],
    dst: &[Point3],
    preferred: Option<&[bool]>,
    params: &RansacParams,
) -> Result<(Pose<f64>, Vec<usize>)> {
    if src.len() != dst.len() {
        return Err(Error::Shape(format!("{} vs {} points", src.len(), dst.len())));
    }
    let score = |inl: &[usize]| {
        let p = preferred.map_or(inl.len(), |pr| inl.iter().filter(|&&i| pr[i]).count());
        (p, inl.len())
    };
    let n = src.len();
    if n < 3 {
        return Err(Error::DegenerateGeometry("fewer than 3 correspondences"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Vec<usize> = Vec::new();
    let mut best_score = (0, 0);
    for _ in 0..params.iterations {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.random_range(0..n - 2);
        for lo in [i.min(j), i.max(j)] {
            if k >= lo {
                k += 1;
            }
        }
        let sample = [i, j, k];
        let Ok(h) = rigid_align(&gather(src, &sample), &gather(dst, &sample)) else {
            continue;
        };
        let inl = inliers_of(&h, src, dst, params.inlier_threshold);
        let sc = score(&inl);
        if sc > best_score {
            best_score = sc;
            best = inl;
        }
    }
    if best.len() < 3 {
        return Err(Error::DegenerateGeometry("no hypothesis with 3 inliers"));
    }
    let mut pose = rigid_align(&gather(src, &best), &gather(dst, &best))?;
    for _ in 0..5 {
        let inl = inliers_of(&pose, src, dst, params.inlier_threshold);
        if inl == best || inl.len() < 3 {
            break;
        }
        match rigid_align(&gather(src, &inl), &gather(dst, &inl)) {
            Ok(p) => {
                pose = p;
                best = inl;
            }
            Err(_) => break,
        }
    }
    let best = inliers_of(&pose, src, dst, params.inlier_threshold);
    Ok((pose, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(1.0..5.0),
                )
            })
            .collect()
    }

    fn truth() -> Pose<f64> {
        Pose::new(
            UnitQuaternion::from_euler_angles(0.05, -0.1, 0.2),
            Vector3::new(0.1, -0.05, 0.2),
        )
    }

    #[test]
    fn exact_transform_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = random_points(&mut rng, 50);
        let t = truth();
        let dst: Vec<Point3> = src.iter().map(|p| t.transform(p)).collect();
        let (pose, inl) = estimate_relative_pose(&src, &dst, &RansacParams::default()).unwrap();
        assert_eq!(inl.len(), 50);
        assert!((pose.translation - t.translation).norm() < 1e-6);
        assert!(pose.rotation.angle_to(&t.rotation) < 1e-6);
    }

    #[test]
    fn sixty_percent_outliers() {
        let t = truth();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let src = random_points(&mut rng, 100);
            let mut outlier = [false; 100];
            let dst: Vec<Point3> = src
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let q = t.transform(p);
                    if i % 5 < 3 {
                        outlier[i] = true;
                        q + Vector3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        )
                    } else {
                        q + Vector3::new(rng.random_range(-0.005..0.005), rng.random_range(-0.005..0.005), 0.0)
                    }
                })
                .collect();
            let params = RansacParams {
                seed,
                ..RansacParams::default()
            };
            let (pose, inl) = estimate_relative_pose(&src, &dst, &params).unwrap();
            assert!((pose.translation - t.translation).norm() < 0.01, "seed {seed}");
            assert!(inl.iter().filter(|&&i| !outlier[i]).count() == 40);
        }
    }

    #[test]
    fn coherent_majority_motion_wins() {
        // 70% of points belong to an object with its own motion: the estimate follows it.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let src = random_points(&mut rng, 100);
        let cam = truth();
        let object = Pose::from_translation(Vector3::new(0.3, 0.0, 0.0)).compose(&cam);
        let dst: Vec<Point3> = src
            .iter()
            .enumerate()
            .map(|(i, p)| if i < 70 { object.transform(p) } else { cam.transform(p) })
            .collect();
        let (pose, inl) = estimate_relative_pose(&src, &dst, &RansacParams::default()).unwrap();
        assert!((pose.translation - object.translation).norm() < 1e-6);
        assert_eq!(inl, (0..70).collect::<Vec<_>>());
    }

    #[test]
    fn preferred_minority_outranks_coherent_majority() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let src = random_points(&mut rng, 100);
        let cam = truth();
        let object = Pose::from_translation(Vector3::new(0.3, 0.0, 0.0)).compose(&cam);
        // Object points that did not move agree with the camera and still count.
        let dst: Vec<Point3> = src
            .iter()
            .enumerate()
            .map(|(i, p)| if i < 70 { object.transform(p) } else { cam.transform(p) })
            .collect();
        let preferred: Vec<bool> = (0..100).map(|i| i >= 80).collect();
        let (pose, inl) = estimate_relative_pose_prioritized(&src, &dst, &preferred, &RansacParams::default()).unwrap();
        assert!((pose.translation - cam.translation).norm() < 1e-6);
        assert_eq!(inl, (70..100).collect::<Vec<_>>());
        let all = vec![true; 100];
        assert_eq!(
            estimate_relative_pose_prioritized(&src, &dst, &all, &RansacParams::default()).unwrap(),
            estimate_relative_pose(&src, &dst, &RansacParams::default()).unwrap()
        );
        assert!(estimate_relative_pose_prioritized(&src, &dst, &all[..3], &RansacParams::default()).is_err());
    }

    #[test]
    fn degenerate_inputs() {
        let p = vec![Point3::new(0.0, 0.0, 1.0), Point3::new(1.0, 0.0, 1.0)];
        assert!(estimate_relative_pose(&p, &p, &RansacParams::default()).is_err());
        let line: Vec<Point3> = (0..10).map(|i| Point3::new(f64::from(i), 0.0, 1.0)).collect();
        assert!(estimate_relative_pose(&line, &line, &RansacParams::default()).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = random_points(&mut rng, 60);
        let dst: Vec<Point3> = src
            .iter()
            .map(|p| truth().transform(p) + Vector3::new(rng.random_range(-0.3..0.3), 0.0, 0.0))
            .collect();
        let p = RansacParams {
            seed: 77,
            ..RansacParams::default()
        };
        assert_eq!(
            estimate_relative_pose(&src, &dst, &p).unwrap(),
            estimate_relative_pose(&src, &dst, &p).unwrap()
        );
    }
}
