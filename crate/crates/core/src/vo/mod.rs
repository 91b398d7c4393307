//! Sparse RGB-D keyframe odometry.
//!
//! Corners are detected outside the odometry mask, matched against the current
//! keyframe and aligned in 3D with RANSAC. The resulting relative pose is chained onto
//! the keyframe's world pose.

pub mod features;
pub mod matching;
mod pattern;
pub mod ransac;

use serde::{Deserialize, Serialize};

use crate::dataset::{Frame, Trajectory, DEFAULT_MAX_DT};
use crate::error::{Error, Result};
use crate::geom::Pose;
use crate::tracker::FrameMasks;
use crate::Point3;

pub use features::{detect_features, smooth, to_gray, DetectorParams, FeaturePoint};
pub use matching::{hamming, match_features, Correspondence};
pub use ransac::{estimate_relative_pose, estimate_relative_pose_prioritized, RansacParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdometryConfig {
    pub target_features: usize,
    pub fast_threshold: u8,
    pub match_ratio: f64,
    pub ransac_iterations: usize,
    /// meters
    pub inlier_threshold: f64,
    pub keyframe_inlier_ratio: f64,
    /// meters
    pub keyframe_translation: f64,
    /// degrees
    pub keyframe_rotation_deg: f64,
    pub min_inliers: usize,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        OdometryConfig {
            target_features: 600,
            fast_threshold: 20,
            match_ratio: 0.8,
            ransac_iterations: 200,
            inlier_threshold: 0.05,
            keyframe_inlier_ratio: 0.6,
            keyframe_translation: 0.15,
            keyframe_rotation_deg: 10.0,
            min_inliers: 20,
        }
    }
}

impl OdometryConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.target_features > 0
            && self.match_ratio > 0.0
            && self.match_ratio <= 1.0
            && self.ransac_iterations > 0
            && self.inlier_threshold > 0.0
            && (0.0..=1.0).contains(&self.keyframe_inlier_ratio)
            && self.keyframe_translation > 0.0
            && self.keyframe_rotation_deg > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("odometry parameters out of range".into()))
        }
    }

    pub fn detector(&self) -> DetectorParams {
        DetectorParams {
            fast_threshold: self.fast_threshold,
            ..DetectorParams::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdometryStatus {
    Ok,
    Degraded,
    Lost,
}

impl OdometryStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            OdometryStatus::Ok => "ok",
            OdometryStatus::Degraded => "degraded",
            OdometryStatus::Lost => "lost",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdometryEstimate {
    pub timestamp: f64,
    pub pose: Pose<f64>,
    pub inlier_count: usize,
    pub tracked_feature_count: usize,
    pub status: OdometryStatus,
    pub keyframe: bool,
}

/// `timestamp status inliers features`
pub fn format_health_line(e: &OdometryEstimate) -> String {
    format!(
        "{:.6} {} {} {}",
        e.timestamp,
        e.status.as_str(),
        e.inlier_count,
        e.tracked_feature_count
    )
}

#[derive(Debug, Clone)]
struct Keyframe {
    pose: Pose<f64>,
    features: Vec<FeaturePoint>,
}

#[derive(Debug, Clone)]
enum Source {
    Features,
    GroundTruth { trajectory: Trajectory, max_dt: f64 },
}

/// Pose at `t` continuing the motion from `(t0, p0)` to `(t1, p1)`.
pub fn extrapolate_constant_velocity(t0: f64, p0: &Pose<f64>, t1: f64, p1: &Pose<f64>, t: f64) -> Pose<f64> {
    let span = t1 - t0;
    if !(span > 0.0) {
        return *p1;
    }
    let s = (t - t1) / span;
    let delta = p0.inverse().compose(p1);
    let step = Pose::new(delta.rotation.powf(s), delta.translation * s);
    p1.compose(&step)
}

/// Stateful odometry; feed frames in timestamp order.
#[derive(Debug, Clone)]
pub struct Odometry {
    cfg: OdometryConfig,
    seed: u64,
    source: Source,
    initial_pose: Pose<f64>,
    keyframe: Option<Keyframe>,
    /// Last two `(timestamp, pose)` outputs, oldest first.
    history: Vec<(f64, Pose<f64>)>,
    frames: u64,
}

impl Odometry {
    pub fn new(cfg: OdometryConfig, seed: u64, initial_pose: Pose<f64>) -> Result<Self> {
        cfg.validate()?;
        Ok(Odometry {
            cfg,
            seed,
            source: Source::Features,
            initial_pose,
            keyframe: None,
            history: Vec::new(),
            frames: 0,
        })
    }

    /// Oracle mode: poses are read from `trajectory`, features are not computed.
    pub fn ground_truth(trajectory: Trajectory) -> Self {
        Odometry {
            cfg: OdometryConfig::default(),
            seed: 0,
            source: Source::GroundTruth {
                trajectory,
                max_dt: DEFAULT_MAX_DT,
            },
            initial_pose: Pose::identity(),
            keyframe: None,
            history: Vec::new(),
            frames: 0,
        }
    }

    /// Best current guess for the pose at `t` before the frame is processed.
    pub fn predict(&self, t: f64) -> Pose<f64> {
        if let Source::GroundTruth { trajectory, max_dt } = &self.source {
            if let Some(p) = trajectory.pose_near(t, *max_dt) {
                return p;
            }
        }
        self.fallback(t)
    }

    fn fallback(&self, t: f64) -> Pose<f64> {
        match self.history.as_slice() {
            [] => self.initial_pose,
            [(_, p)] => *p,
            [(t0, p0), (t1, p1)] => extrapolate_constant_velocity(*t0, p0, *t1, p1, t),
            _ => unreachable!(),
        }
    }

    fn record(&mut self, t: f64, pose: Pose<f64>) {
        self.history.push((t, pose));
        if self.history.len() > 2 {
            self.history.remove(0);
        }
        self.frames += 1;
    }

    pub fn track_frame(&mut self, frame: &Frame, masks: &FrameMasks) -> Result<OdometryEstimate> {
        let t = frame.timestamp;
        if let Some(&(last, _)) = self.history.last() {
            if !(t > last) {
                return Err(Error::TimeOrder(format!("odometry frame {t} after {last}")));
            }
        }
        if let Source::GroundTruth { trajectory, max_dt } = &self.source {
            let est = match trajectory.pose_near(t, *max_dt) {
                Some(pose) => OdometryEstimate {
                    timestamp: t,
                    pose,
                    inlier_count: 0,
                    tracked_feature_count: 0,
                    status: OdometryStatus::Ok,
                    keyframe: false,
                },
                None => OdometryEstimate {
                    timestamp: t,
                    pose: self.fallback(t),
                    inlier_count: 0,
                    tracked_feature_count: 0,
                    status: OdometryStatus::Lost,
                    keyframe: false,
                },
            };
            self.record(t, est.pose);
            return Ok(est);
        }

        let gray = to_gray(&frame.rgb);
        let feats = detect_features(
            &gray,
            &frame.depth,
            &masks.odometry_mask,
            &frame.intrinsics,
            self.cfg.target_features,
            &self.cfg.detector(),
        )?;
        debug_assert!(feats
            .iter()
            .all(|f| !masks.odometry_mask.get(f.pixel.x as u32, f.pixel.y as u32)));
        let n_feats = feats.len();

        let Some(kf) = &self.keyframe else {
            let pose = self.initial_pose;
            self.keyframe = Some(Keyframe { pose, features: feats });
            self.record(t, pose);
            return Ok(OdometryEstimate {
                timestamp: t,
                pose,
                inlier_count: n_feats,
                tracked_feature_count: n_feats,
                status: OdometryStatus::Ok,
                keyframe: true,
            });
        };

        let corr = match_features(&kf.features, &feats, self.cfg.match_ratio);
        let dst: Vec<Point3> = corr.iter().map(|c| kf.features[c.a].point_cam).collect();
        let src: Vec<Point3> = corr.iter().map(|c| feats[c.b].point_cam).collect();
        // Features on temporarily static objects count, but never outvote the background.
        let background: Vec<bool> = corr
            .iter()
            .map(|c| {
                let px = feats[c.b].pixel;
                !masks.mapping_mask.get(px.x as u32, px.y as u32)
            })
            .collect();
        let params = RansacParams {
            iterations: self.cfg.ransac_iterations,
            inlier_threshold: self.cfg.inlier_threshold,
            seed: self.seed ^ self.frames.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        };
        let est = match estimate_relative_pose_prioritized(&src, &dst, &background, &params) {
            Ok((rel, inliers)) => {
                let pose = kf.pose.compose(&rel);
                let n_in = inliers.len();
                let promote = (n_in as f64) < self.cfg.keyframe_inlier_ratio * kf.features.len() as f64
                    || rel.translation.norm() > self.cfg.keyframe_translation
                    || rel.rotation_angle().to_degrees() > self.cfg.keyframe_rotation_deg;
                if promote {
                    self.keyframe = Some(Keyframe { pose, features: feats });
                }
                OdometryEstimate {
                    timestamp: t,
                    pose,
                    inlier_count: n_in,
                    tracked_feature_count: n_feats,
                    status: if n_in < self.cfg.min_inliers {
                        OdometryStatus::Degraded
                    } else {
                        OdometryStatus::Ok
                    },
                    keyframe: promote,
                }
            }
            Err(_) => {
                let pose = self.fallback(t);
                let promote = n_feats >= self.cfg.min_inliers;
                if promote {
                    self.keyframe = Some(Keyframe { pose, features: feats });
                }
                OdometryEstimate {
                    timestamp: t,
                    pose,
                    inlier_count: 0,
                    tracked_feature_count: n_feats,
                    status: OdometryStatus::Lost,
                    keyframe: promote,
                }
            }
        };
        self.record(t, est.pose);
        Ok(est)
    }
}
