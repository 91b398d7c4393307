//! Dynamic-object-aware RGB-D SLAM front end.
//!
//! Instance detections are ingested per frame, filtered, lifted to 3D world centroids
//! and tracked with per-object constant-velocity Kalman filters. Moving objects are
//! excluded from odometry, every potentially dynamic object is excluded from the
//! static map, and removed regions can be filled before map insertion. A synthetic
//! scene renderer and an ATE evaluator close the loop.

// `!(x > y)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod eval;
pub mod geom;
pub mod inpaint;
pub mod map;
pub mod mask;
pub mod pipeline;
pub mod scalar;
pub mod seg;
pub mod synth;
pub mod tracker;
pub mod vo;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Real;

/// World/camera point in meters.
pub type Point3 = nalgebra::Point3<f64>;
/// Camera-to-world rigid transform.
pub type Pose = geom::Pose<f64>;
pub type Pose32 = geom::Pose<f32>;
pub type TrackState = tracker::ekf::TrackState<f64>;
