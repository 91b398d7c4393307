//! Scene description (TOML) and its kinematics.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Intrinsics, Pose};
use crate::Point3;

/// Class ids written to detection files (COCO numbering).
pub fn class_id(class: &str) -> i32 {
    match class {
        "person" => 0,
        "bottle" => 39,
        "chair" => 56,
        _ => -1,
    }
}

const CLASSES: [&str; 3] = ["person", "chair", "bottle"];

fn default_true() -> bool {
    true
}
fn default_room_cell() -> f64 {
    0.15
}
fn default_object_cell() -> f64 {
    0.08
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// seconds
    pub duration: f64,
    /// Hz
    pub fps: f64,
    /// Texture seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "Intrinsics::tum_fr3")]
    pub intrinsics: Intrinsics,
    pub room: Room,
    pub camera: Vec<CameraKey>,
    #[serde(default)]
    pub boxes: Vec<StaticBox>,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Room {
    pub min: [f64; 3],
    pub max: [f64; 3],
    /// Texture cell edge in meters.
    #[serde(default = "default_room_cell")]
    pub cell: f64,
    #[serde(default = "default_true")]
    pub textured: bool,
}

/// Camera keyframe; the camera looks from `position` towards `look_at` with world z up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraKey {
    pub t: f64,
    pub position: [f64; 3],
    pub look_at: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    #[serde(default = "default_object_cell")]
    pub cell: f64,
    #[serde(default = "default_true")]
    pub textured: bool,
}

impl StaticBox {
    pub(super) fn tint(&self, i: usize) -> [f64; 3] {
        const T: [[f64; 3]; 4] = [[1.0, 0.9, 0.8], [0.8, 0.95, 0.85], [0.85, 0.85, 1.0], [1.0, 1.0, 0.8]];
        T[i % T.len()]
    }
}

/// Constant-velocity interval of an object schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    /// seconds
    pub duration: f64,
    /// m/s
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub class: String,
    /// Box edge lengths in meters.
    pub size: [f64; 3],
    /// Box center at t = 0.
    pub start: [f64; 3],
    /// Consecutive segments from t = 0; the object rests after the last one.
    #[serde(default)]
    pub schedule: Vec<Segment>,
    #[serde(default = "default_object_cell")]
    pub cell: f64,
    #[serde(default = "default_true")]
    pub textured: bool,
}

impl ObjectSpec {
    pub(super) fn tint(&self) -> [f64; 3] {
        match self.class.as_str() {
            "person" => [1.0, 0.75, 0.65],
            "chair" => [0.65, 0.8, 1.0],
            _ => [0.65, 1.0, 0.7],
        }
    }
}

/// Sensor and detector noise applied while writing a sequence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Additive Gaussian depth noise, millimeters.
    pub depth_sigma_mm: f64,
    /// Probability of dropping a whole detection.
    pub detection_dropout: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_sigma_mm >= 0.0 && self.depth_sigma_mm.is_finite())
            || !(0.0..=1.0).contains(&self.detection_dropout)
        {
            return Err(Error::Config(
                "noise: depth_sigma_mm >= 0 and dropout in [0, 1] required".into(),
            ));
        }
        Ok(())
    }
}

fn look_rotation(position: &Vector3<f64>, look_at: &Vector3<f64>) -> Option<UnitQuaternion<f64>> {
    let f = (look_at - position).try_normalize(1e-12)?;
    let right = f.cross(&Vector3::z()).try_normalize(1e-9)?;
    let down = f.cross(&right);
    let r = Matrix3::from_columns(&[right, down, f]);
    Some(UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
        r,
    )))
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: SceneSpec = toml::from_str(text).map_err(|e| Error::Config(format!("scene spec: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.fps).round() as usize
    }

    pub fn frame_time(&self, k: usize) -> f64 {
        k as f64 / self.fps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scene spec: {m}")));
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad("fps must be positive".into());
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive".into());
        }
        self.intrinsics.validate()?;
        if (0..3).any(|a| !(self.room.max[a] > self.room.min[a])) || !(self.room.cell > 0.0) {
            return bad("room min must be below max and cell positive".into());
        }
        if self.camera.is_empty() {
            return bad("at least one camera keyframe required".into());
        }
        for (i, k) in self.camera.iter().enumerate() {
            if i > 0 && !(k.t > self.camera[i - 1].t) {
                return bad("camera keyframe times must increase".into());
            }
            if look_rotation(&Vector3::from(k.position), &Vector3::from(k.look_at)).is_none() {
                return bad(format!(
                    "camera keyframe {i}: look direction must not be vertical or zero"
                ));
            }
            if !self.inside_room(&Point3::from(k.position), &Point3::from(k.position)) {
                return bad(format!("camera keyframe {i} outside the room"));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if (0..3).any(|a| !(b.max[a] > b.min[a])) || !(b.cell > 0.0) {
                return bad(format!("box {i}: min must be below max"));
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !CLASSES.contains(&o.class.as_str()) {
                return bad(format!("object {i}: class must be one of {CLASSES:?}"));
            }
            if o.size.iter().any(|s| !(*s > 0.0)) || !(o.cell > 0.0) {
                return bad(format!("object {i}: size must be positive"));
            }
            if o.schedule
                .iter()
                .any(|s| !(s.duration >= 0.0 && s.duration.is_finite()) || s.velocity.iter().any(|v| !v.is_finite()))
            {
                return bad(format!("object {i}: schedule must be finite"));
            }
            // Motion is piecewise linear, so checking the breakpoints bounds the path.
            let mut t = 0.0;
            let mut times = vec![0.0];
            for s in &o.schedule {
                t += s.duration;
                times.push(t);
            }
            for &t in &times {
                let (min, max) = self.object_bounds(i, t);
                if !self.inside_room(&min, &max) {
                    return bad(format!("object {i} leaves the room at t = {t}"));
                }
            }
        }
        Ok(())
    }

    fn inside_room(&self, min: &Point3, max: &Point3) -> bool {
        (0..3).all(|a| min[a] >= self.room.min[a] && max[a] <= self.room.max[a])
    }

    /// Camera-to-world pose: linear position and slerped orientation between keys.
    pub fn camera_pose(&self, t: f64) -> Pose<f64> {
        let key = |k: &CameraKey| {
            let p = Vector3::from(k.position);
            (
                p,
                look_rotation(&p, &Vector3::from(k.look_at)).unwrap_or_else(UnitQuaternion::identity),
            )
        };
        let keys = &self.camera;
        let i = keys.partition_point(|k| k.t <= t);
        if i == 0 {
            let (p, q) = key(&keys[0]);
            return Pose::new(q, p);
        }
        if i == keys.len() {
            let (p, q) = key(&keys[i - 1]);
            return Pose::new(q, p);
        }
        let (a, b) = (&keys[i - 1], &keys[i]);
        let s = (t - a.t) / (b.t - a.t);
        let (pa, qa) = key(a);
        let (pb, qb) = key(b);
        Pose::new(qa.slerp(&qb, s), pa + (pb - pa) * s)
    }

    pub fn object_center(&self, i: usize, t: f64) -> Point3 {
        let o = &self.objects[i];
        let mut c = Vector3::from(o.start);
        let mut t0 = 0.0;
        for s in &o.schedule {
            let dt = (t - t0).clamp(0.0, s.duration);
            c += Vector3::from(s.velocity) * dt;
            t0 += s.duration;
            if t <= t0 {
                break;
            }
        }
        Point3::from(c)
    }

    pub fn object_velocity(&self, i: usize, t: f64) -> Vector3<f64> {
        let mut t0 = 0.0;
        for s in &self.objects[i].schedule {
            if t >= t0 && t < t0 + s.duration {
                return Vector3::from(s.velocity);
            }
            t0 += s.duration;
        }
        Vector3::zeros()
    }

    pub fn object_bounds(&self, i: usize, t: f64) -> (Point3, Point3) {
        let c = self.object_center(i, t);
        let h = Vector3::from(self.objects[i].size) / 2.0;
        (c - h, c + h)
    }
}
