//! Detection filtering and 3D centroid extraction for segmented instances.

use std::collections::BTreeSet;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::dataset::{DepthImage, Detection};
use crate::error::{Error, Result};
use crate::geom::{backproject, Intrinsics, Pose};
use crate::tracker::ekf::EkfNoise;

/// How the mask-overlap clause of motion classification is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum IouRule {
    /// A track that has moved before stays Moving while its consecutive masks overlap
    /// by at least `iou_threshold`.
    #[default]
    Hysteresis,
    /// A track whose consecutive masks overlap by less than `iou_threshold` is Moving.
    Displacement,
}

/// Segmentation and tracking parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub score_threshold: f64,
    pub dynamic_classes: BTreeSet<String>,
    pub max_tracked_objects: usize,
    pub termination_frames: u32,
    /// m/s
    pub velocity_threshold_person: f64,
    /// m/s
    pub velocity_threshold_object: f64,
    pub iou_threshold: f64,
    /// meters
    pub association_gate: f64,
    pub iou_rule: IouRule,
    /// Relative deviation of the bbox-center depth from the in-mask median beyond
    /// which the median is used instead.
    pub centroid_outlier_ratio: f64,
    pub ekf: EkfNoise,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            score_threshold: 0.9,
            dynamic_classes: ["person", "chair", "bottle"].iter().map(|s| s.to_string()).collect(),
            max_tracked_objects: 5,
            termination_frames: 10,
            velocity_threshold_person: 0.7,
            velocity_threshold_object: 1.2,
            iou_threshold: 0.5,
            association_gate: 0.5,
            iou_rule: IouRule::Hysteresis,
            centroid_outlier_ratio: 0.5,
            ekf: EkfNoise::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let mut bad = Vec::new();
        if !unit(self.score_threshold) {
            bad.push("score_threshold");
        }
        if !unit(self.iou_threshold) {
            bad.push("iou_threshold");
        }
        if self.max_tracked_objects < 1 {
            bad.push("max_tracked_objects");
        }
        if self.termination_frames < 1 {
            bad.push("termination_frames");
        }
        if !(self.velocity_threshold_person >= 0.0) {
            bad.push("velocity_threshold_person");
        }
        if !(self.velocity_threshold_object >= 0.0) {
            bad.push("velocity_threshold_object");
        }
        if !(self.association_gate > 0.0) {
            bad.push("association_gate");
        }
        if !(self.centroid_outlier_ratio > 0.0) {
            bad.push("centroid_outlier_ratio");
        }
        self.ekf.validate()?;
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("out of range: {}", bad.join(", "))))
        }
    }

    /// Speed threshold for a class: the person threshold for `person`, the object
    /// threshold otherwise.
    pub fn velocity_threshold(&self, class_name: &str) -> f64 {
        if class_name == "person" {
            self.velocity_threshold_person
        } else {
            self.velocity_threshold_object
        }
    }
}

/// Keeps dynamic-class detections scoring at least the threshold, best score first.
pub fn filter_detections(dets: &[Detection], cfg: &Config) -> Vec<Detection> {
    let mut kept: Vec<Detection> = dets
        .iter()
        .filter(|d| cfg.dynamic_classes.contains(&d.class_name) && d.score >= cfg.score_threshold)
        .cloned()
        .collect();
    // Stable: equal scores keep input order.
    kept.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentroidSource {
    BboxCenterDepth,
    MaskMedianDepth,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centroid {
    /// World frame, meters.
    pub position: crate::Point3,
    pub source: CentroidSource,
    pub valid: bool,
}

impl Centroid {
    fn invalid() -> Self {
        Centroid {
            position: crate::Point3::origin(),
            source: CentroidSource::MaskMedianDepth,
            valid: false,
        }
    }
}

fn mask_median_depth(det: &Detection, depth: &DepthImage) -> Option<u16> {
    let (w, h) = det.mask.dims();
    let mut vals: Vec<u16> = Vec::new();
    for v in 0..h {
        for u in 0..w {
            if det.mask.get(u, v) {
                let d = depth.get_pixel(u, v)[0];
                if d != 0 {
                    vals.push(d);
                }
            }
        }
    }
    if vals.is_empty() {
        return None;
    }
    let mid = vals.len() / 2;
    let (_, m, _) = vals.select_nth_unstable(mid);
    Some(*m)
}

/// World-frame centroid at the bbox center ray.
///
/// Uses the depth at the bbox center pixel unless it is invalid or deviates from the
/// in-mask median by more than `cfg.centroid_outlier_ratio`, in which case the median
/// depth is used along the same ray.
pub fn compute_centroid(
    det: &Detection,
    depth: &DepthImage,
    intr: &Intrinsics,
    cam_pose: &Pose<f64>,
    cfg: &Config,
) -> Centroid {
    let (uc, vc) = det.bbox.center();
    let (pu, pv) = (uc.round() as u32, vc.round() as u32);
    if pu >= depth.width() || pv >= depth.height() {
        return Centroid::invalid();
    }
    let Some(median) = mask_median_depth(det, depth) else {
        return Centroid::invalid();
    };
    let median_m = f64::from(median) / intr.depth_scale;
    let center = depth.get_pixel(pu, pv)[0];
    let (d, source) = match intr.depth_meters(center) {
        Some(c) if (c - median_m).abs() <= cfg.centroid_outlier_ratio * median_m => {
            (c, CentroidSource::BboxCenterDepth)
        }
        _ => (median_m, CentroidSource::MaskMedianDepth),
    };
    match backproject(Vector2::new(uc, vc), d, intr) {
        Ok(p) => Centroid {
            position: cam_pose.transform(&p),
            source,
            valid: true,
        },
        Err(_) => Centroid::invalid(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Mask;
    use image::Luma;
    use nalgebra::{UnitQuaternion, Vector3};

    fn det(class: &str, score: f64) -> Detection {
        let mask = Mask::from_fn(8, 8, |u, v| u < 4 && v < 4);
        Detection {
            class_id: 0,
            class_name: class.into(),
            score,
            bbox: mask.bbox().unwrap(),
            mask,
        }
    }

    #[test]
    fn score_threshold_and_class_filter() {
        let cfg = Config::default();
        assert_eq!(filter_detections(&[det("person", 0.95)], &cfg).len(), 1);
        assert!(filter_detections(&[det("person", 0.85)], &cfg).is_empty());
        assert_eq!(filter_detections(&[det("person", 0.9)], &cfg).len(), 1);
        assert!(filter_detections(&[det("table-lamp", 1.0)], &cfg).is_empty());
    }

    #[test]
    fn filter_sorts_and_is_idempotent() {
        let cfg = Config::default();
        let dets = vec![
            det("chair", 0.91),
            det("person", 0.99),
            det("bottle", 0.95),
            det("cat", 0.99),
        ];
        let once = filter_detections(&dets, &cfg);
        let scores: Vec<f64> = once.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.99, 0.95, 0.91]);
        assert_eq!(filter_detections(&once, &cfg), once);
    }

    fn intr() -> Intrinsics {
        Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 20.0,
            cy: 15.0,
            width: 40,
            height: 30,
            depth_scale: 5000.0,
        }
    }

    fn centered_box(depth_m: f64) -> (Detection, DepthImage) {
        let i = intr();
        let mask = Mask::from_fn(i.width, i.height, |u, v| (15..26).contains(&u) && (10..21).contains(&v));
        let depth = DepthImage::from_fn(i.width, i.height, |u, v| {
            if mask.get(u, v) {
                Luma([(depth_m * i.depth_scale) as u16])
            } else {
                Luma([20000])
            }
        });
        (
            Detection {
                class_id: 0,
                class_name: "person".into(),
                score: 1.0,
                bbox: mask.bbox().unwrap(),
                mask,
            },
            depth,
        )
    }

    #[test]
    fn centroid_at_principal_point() {
        let (d, depth) = centered_box(2.0);
        let c = compute_centroid(&d, &depth, &intr(), &Pose::identity(), &Config::default());
        assert!(c.valid);
        assert_eq!(c.source, CentroidSource::BboxCenterDepth);
        assert!((c.position.coords - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn centroid_falls_back_to_mask_median() {
        let (d, mut depth) = centered_box(1.8);
        depth.put_pixel(20, 15, Luma([0]));
        let c = compute_centroid(&d, &depth, &intr(), &Pose::identity(), &Config::default());
        assert!(c.valid);
        assert_eq!(c.source, CentroidSource::MaskMedianDepth);
        assert!((c.position.z - 1.8).abs() < 1e-9);
        // Outlier center depth (background through a gap).
        depth.put_pixel(20, 15, Luma([30000]));
        let c = compute_centroid(&d, &depth, &intr(), &Pose::identity(), &Config::default());
        assert_eq!(c.source, CentroidSource::MaskMedianDepth);
    }

    #[test]
    fn centroid_invalid_without_mask_depth() {
        let (d, _) = centered_box(1.0);
        let depth = DepthImage::new(40, 30);
        let c = compute_centroid(&d, &depth, &intr(), &Pose::identity(), &Config::default());
        assert!(!c.valid);
    }

    #[test]
    fn centroid_uses_camera_pose_and_ignores_small_dilation() {
        let (d, depth) = centered_box(2.0);
        let pose = Pose::new(
            UnitQuaternion::from_euler_angles(0.0, 0.5, 0.0),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let cfg = Config::default();
        let c = compute_centroid(&d, &depth, &intr(), &pose, &cfg);
        let expected = pose.transform(&crate::Point3::new(0.0, 0.0, 2.0));
        assert!((c.position - expected).norm() < 1e-12);
        let mut dilated = d.clone();
        dilated.mask = d.mask.morph(1);
        let c2 = compute_centroid(&dilated, &depth, &intr(), &pose, &cfg);
        assert_eq!(c2.source, CentroidSource::BboxCenterDepth);
        assert!((c2.position - c.position).norm() < 1e-12);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_ranges() {
        assert!(toml::from_str::<Config>("score_threshold = 0.8\nbogus = 1\n").is_err());
        let cfg: Config = toml::from_str("score_threshold = 0.8\n").unwrap();
        assert_eq!(cfg.score_threshold, 0.8);
        assert_eq!(cfg.max_tracked_objects, 5);
        let bad = Config {
            score_threshold: 1.5,
            ..Config::default()
        };
        assert!(bad.validate().is_err());
    }
}
