//! Multi-object tracking: track lifecycle, association, motion classification and
//! construction of the per-frame odometry and mapping exclusion masks.

pub mod ekf;

use crate::dataset::{DepthImage, Detection};
use crate::error::{Error, Result};
use crate::geom::{Intrinsics, Pose};
use crate::mask::{mask_iou, BBox, Mask};
use crate::seg::{compute_centroid, filter_detections, Centroid, Config, IouRule};
use crate::Point3;

pub use ekf::{ekf_predict, ekf_update, EkfNoise, TrackState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionStatus {
    Moving,
    TempStatic,
}

impl MotionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            MotionStatus::Moving => "moving",
            MotionStatus::TempStatic => "temp-static",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    pub class_name: String,
    pub state: TrackState<f64>,
    pub frames_since_seen: u32,
    pub motion_status: MotionStatus,
    pub ever_moving: bool,
    pub last_mask: Mask,
    pub last_bbox: BBox,
    pub last_update_timestamp: f64,
}

/// Pixels excluded from odometry and from map construction (`true` = excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMasks {
    pub odometry_mask: Mask,
    pub mapping_mask: Mask,
}

impl FrameMasks {
    pub fn empty(width: u32, height: u32) -> Self {
        FrameMasks {
            odometry_mask: Mask::new(width, height),
            mapping_mask: Mask::new(width, height),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectReport {
    pub id: u64,
    pub class_name: String,
    pub centroid: Point3,
    pub speed: f64,
    pub status: MotionStatus,
    pub matched: bool,
}

/// `timestamp id class cx cy cz speed status`
pub fn format_report_line(timestamp: f64, r: &ObjectReport) -> String {
    format!(
        "{timestamp:.6} {} {} {:.6} {:.6} {:.6} {:.6} {}",
        r.id,
        r.class_name,
        r.centroid.x,
        r.centroid.y,
        r.centroid.z,
        r.speed,
        r.status.as_str()
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub masks: FrameMasks,
    pub report: Vec<ObjectReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    /// `(track index, detection index)`
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// A filtered detection with its world centroid.
#[derive(Debug, Clone)]
pub struct Observation {
    pub detection: Detection,
    pub centroid: Centroid,
}

/// Greedy same-class association on ascending centroid distance within `gate`.
///
/// Detections without a valid centroid are matched instead by mask overlap with a
/// track's last mask (`iou >= iou_threshold`, best overlap first).
pub fn associate(tracks: &[Track], obs: &[Observation], gate: f64, iou_threshold: f64) -> Assignment {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (ti, t) in tracks.iter().enumerate() {
        let pred = t.state.position();
        for (di, o) in obs.iter().enumerate() {
            if !o.centroid.valid || o.detection.class_name != t.class_name {
                continue;
            }
            let d = (o.centroid.position - pred).norm();
            if d <= gate {
                candidates.push((d, ti, di));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((a.1, a.2).cmp(&(b.1, b.2)))
    });
    let mut track_used = vec![false; tracks.len()];
    let mut det_used = vec![false; obs.len()];
    let mut pairs = Vec::new();
    for (_, ti, di) in candidates {
        if !track_used[ti] && !det_used[di] {
            track_used[ti] = true;
            det_used[di] = true;
            pairs.push((ti, di));
        }
    }

    let mut overlap: Vec<(f64, usize, usize)> = Vec::new();
    for (di, o) in obs.iter().enumerate() {
        if o.centroid.valid || det_used[di] {
            continue;
        }
        for (ti, t) in tracks.iter().enumerate() {
            if track_used[ti] || t.class_name != o.detection.class_name {
                continue;
            }
            if let Ok(iou) = mask_iou(&o.detection.mask, &t.last_mask) {
                if iou >= iou_threshold && iou > 0.0 {
                    overlap.push((iou, ti, di));
                }
            }
        }
    }
    overlap.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((a.1, a.2).cmp(&(b.1, b.2)))
    });
    for (_, ti, di) in overlap {
        if !track_used[ti] && !det_used[di] {
            track_used[ti] = true;
            det_used[di] = true;
            pairs.push((ti, di));
        }
    }

    pairs.sort_unstable();
    Assignment {
        pairs,
        unmatched_tracks: (0..tracks.len()).filter(|&i| !track_used[i]).collect(),
        unmatched_detections: (0..obs.len()).filter(|&i| !det_used[i]).collect(),
    }
}

/// Motion status of a track that has just been updated.
///
/// Moving when speed strictly exceeds the class threshold. Under the hysteresis rule a
/// track that has been Moving before stays Moving while `iou_with_prev` reaches the
/// IoU threshold; under the displacement rule a low overlap marks it Moving.
pub fn classify(track: &Track, cfg: &Config, iou_with_prev: f64) -> MotionStatus {
    let speed = track.state.speed();
    if speed > cfg.velocity_threshold(&track.class_name) {
        return MotionStatus::Moving;
    }
    let by_overlap = match cfg.iou_rule {
        IouRule::Hysteresis => track.ever_moving && iou_with_prev >= cfg.iou_threshold,
        IouRule::Displacement => iou_with_prev < cfg.iou_threshold,
    };
    if by_overlap {
        MotionStatus::Moving
    } else {
        MotionStatus::TempStatic
    }
}

/// Stateful multi-object tracker; one [`Tracker::step`] per frame.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: Config,
    tracks: Vec<Track>,
    next_id: u64,
    last_timestamp: Option<f64>,
}

impl Tracker {
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        Ok(Tracker {
            cfg,
            tracks: Vec::new(),
            next_id: 0,
            last_timestamp: None,
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn step(
        &mut self,
        detections: &[Detection],
        depth: &DepthImage,
        intr: &Intrinsics,
        cam_pose: &Pose<f64>,
        timestamp: f64,
    ) -> Result<StepOutput> {
        let (w, h) = depth.dimensions();
        if let Some(last) = self.last_timestamp {
            if !(timestamp > last) {
                return Err(Error::TimeOrder(format!("tracker step at {timestamp} after {last}")));
            }
            let dt = timestamp - last;
            let n = self.cfg.ekf;
            for t in &mut self.tracks {
                t.state = ekf_predict(&t.state, dt, n.q_pos, n.q_vel)?;
            }
        }
        self.last_timestamp = Some(timestamp);

        let kept = filter_detections(detections, &self.cfg);
        for d in &kept {
            if d.mask.dims() != (w, h) {
                return Err(Error::Shape(format!(
                    "detection mask {:?} vs frame {w}x{h}",
                    d.mask.dims()
                )));
            }
        }
        let obs: Vec<Observation> = kept
            .into_iter()
            .map(|d| {
                let centroid = compute_centroid(&d, depth, intr, cam_pose, &self.cfg);
                Observation { detection: d, centroid }
            })
            .collect();

        let assignment = associate(&self.tracks, &obs, self.cfg.association_gate, self.cfg.iou_threshold);

        let mut updated = vec![false; self.tracks.len()];
        for &(ti, di) in &assignment.pairs {
            let o = &obs[di];
            let track = &mut self.tracks[ti];
            if o.centroid.valid {
                track.state = ekf_update(&track.state, &o.centroid.position, self.cfg.ekf.r)?;
            }
            let iou_prev = mask_iou(&o.detection.mask, &track.last_mask)?;
            track.frames_since_seen = 0;
            track.last_mask = o.detection.mask.clone();
            track.last_bbox = o.detection.bbox;
            track.last_update_timestamp = timestamp;
            let status = classify(track, &self.cfg, iou_prev);
            track.motion_status = status;
            track.ever_moving |= status == MotionStatus::Moving;
            updated[ti] = true;
        }

        // Spawn in score order; the cap counts tracks that may be removed below.
        let mut spawned = Vec::new();
        for &di in &assignment.unmatched_detections {
            if self.tracks.len() + spawned.len() >= self.cfg.max_tracked_objects {
                break;
            }
            let o = &obs[di];
            if !o.centroid.valid {
                continue;
            }
            spawned.push(Track {
                id: self.next_id,
                class_name: o.detection.class_name.clone(),
                state: TrackState::init(o.centroid.position, &self.cfg.ekf),
                frames_since_seen: 0,
                motion_status: MotionStatus::TempStatic,
                ever_moving: false,
                last_mask: o.detection.mask.clone(),
                last_bbox: o.detection.bbox,
                last_update_timestamp: timestamp,
            });
            self.next_id += 1;
        }

        let mut odometry_mask = Mask::new(w, h);
        let mut mapping_mask = Mask::new(w, h);
        for o in &obs {
            mapping_mask.union_with(&o.detection.mask)?;
        }
        let mut survivors = Vec::with_capacity(self.tracks.len() + spawned.len());
        let mut matched_flags = Vec::new();
        for (ti, mut track) in std::mem::take(&mut self.tracks).into_iter().enumerate() {
            if updated[ti] {
                if track.motion_status == MotionStatus::Moving {
                    odometry_mask.union_with(&track.last_mask)?;
                }
            } else {
                track.frames_since_seen += 1;
                if track.frames_since_seen >= self.cfg.termination_frames {
                    continue;
                }
                mapping_mask.union_with(&track.last_mask)?;
            }
            matched_flags.push(updated[ti]);
            survivors.push(track);
        }
        for t in spawned {
            matched_flags.push(true);
            survivors.push(t);
        }
        self.tracks = survivors;

        let report = self
            .tracks
            .iter()
            .zip(matched_flags)
            .map(|(t, matched)| ObjectReport {
                id: t.id,
                class_name: t.class_name.clone(),
                centroid: t.state.position(),
                speed: t.state.speed(),
                status: t.motion_status,
                matched,
            })
            .collect();
        debug_assert!(odometry_mask.is_subset_of(&mapping_mask));
        Ok(StepOutput {
            masks: FrameMasks {
                odometry_mask,
                mapping_mask,
            },
            report,
        })
    }
}
