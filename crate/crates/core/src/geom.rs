//! Pinhole camera model, rigid poses and closed-form rigid alignment.

use nalgebra::{Matrix3, Matrix4, Point3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Pinhole intrinsics plus the depth-image scale (raw units per meter).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub depth_scale: f64,
}

impl Intrinsics {
    /// Factory calibration of the TUM RGB-D freiburg3 sensor.
    pub fn tum_fr3() -> Self {
        Intrinsics {
            fx: 535.4,
            fy: 539.2,
            cx: 320.1,
            cy: 247.6,
            width: 640,
            height: 480,
            depth_scale: 5000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < f64::from(self.width)
            && self.cy > 0.0
            && self.cy < f64::from(self.height)
            && self.depth_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < f64::from(self.width) && v < f64::from(self.height)
    }

    /// Converts a raw depth sample to meters; 0 (invalid) maps to `None`.
    pub fn depth_meters(&self, raw: u16) -> Option<f64> {
        (raw != 0).then(|| f64::from(raw) / self.depth_scale)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Back-projects a pixel with metric depth into the camera frame.
pub fn backproject<T: Real>(pixel: Vector2<T>, depth: T, intr: &Intrinsics) -> Result<Point3<T>> {
    if !(depth > T::zero()) {
        return Err(Error::InvalidDepth(depth.to_f64_lossy()));
    }
    let (u, v) = (pixel.x.to_f64_lossy(), pixel.y.to_f64_lossy());
    if !intr.contains(u, v) {
        return Err(Error::Precondition(format!("pixel ({u}, {v}) outside image")));
    }
    let x = (pixel.x - T::lit(intr.cx)) / T::lit(intr.fx) * depth;
    let y = (pixel.y - T::lit(intr.cy)) / T::lit(intr.fy) * depth;
    Ok(Point3::new(x, y, depth))
}

/// Projects a camera-frame point to pixel coordinates; `None` behind the camera.
pub fn project<T: Real>(p: &Point3<T>, intr: &Intrinsics) -> Option<Vector2<T>> {
    if !(p.z > T::zero()) {
        return None;
    }
    Some(Vector2::new(
        p.x / p.z * T::lit(intr.fx) + T::lit(intr.cx),
        p.y / p.z * T::lit(intr.fy) + T::lit(intr.cy),
    ))
}

/// Rigid transform mapping camera-frame points into the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T: Real> {
    pub rotation: UnitQuaternion<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Default for Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<T>, translation: Vector3<T>) -> Self {
        Pose { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Pose::new(UnitQuaternion::identity(), translation)
    }

    /// Builds a pose from raw quaternion components, normalizing them.
    pub fn from_parts(translation: Vector3<T>, qx: T, qy: T, qz: T, qw: T) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        Pose::new(q, translation)
    }

    pub fn from_rotation_matrix(r: &Matrix3<T>, translation: Vector3<T>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
        Pose::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn transform(&self, p: &Point3<T>) -> Point3<T> {
        self.rotation * p + self.translation
    }

    /// `a.compose(b)` maps `p` to `a(b(p))`.
    pub fn compose(&self, b: &Pose<T>) -> Pose<T> {
        let q = (self.rotation * b.rotation).into_inner();
        Pose {
            rotation: UnitQuaternion::new_normalize(q),
            translation: self.rotation * b.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose<T> {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn to_matrix(&self) -> Matrix4<T> {
        let mut m = self.rotation.to_homogeneous();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn rotation_angle(&self) -> T {
        self.rotation.angle()
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        let q = self.rotation.quaternion();
        let c = |v: T| U::lit(v.to_f64_lossy());
        Pose::from_parts(
            Vector3::new(c(self.translation.x), c(self.translation.y), c(self.translation.z)),
            c(q.i),
            c(q.j),
            c(q.k),
            c(q.w),
        )
    }
}

pub fn transform<T: Real>(pose: &Pose<T>, p: &Point3<T>) -> Point3<T> {
    pose.transform(p)
}

pub fn compose<T: Real>(a: &Pose<T>, b: &Pose<T>) -> Pose<T> {
    a.compose(b)
}

pub fn invert<T: Real>(a: &Pose<T>) -> Pose<T> {
    a.inverse()
}

fn centroid<T: Real>(pts: &[Point3<T>]) -> Vector3<T> {
    let n = T::from_usize(pts.len()).expect("point count");
    pts.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n
}

/// Least-squares rigid transform with `dst ≈ R·src + t` (no scale, reflection corrected).
///
/// Fails on fewer than three pairs or when either point set is collinear.
pub fn rigid_align<T: Real>(src: &[Point3<T>], dst: &[Point3<T>]) -> Result<Pose<T>> {
    if src.len() != dst.len() {
        return Err(Error::Shape(format!(
            "rigid_align: {} source vs {} destination points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::DegenerateGeometry("fewer than 3 point pairs"));
    }
    if is_collinear(src) || is_collinear(dst) {
        return Err(Error::DegenerateGeometry("collinear point configuration"));
    }
    align_closed_form(src, dst).ok_or(Error::Numerical("SVD did not converge"))
}

/// Closed-form alignment without the degeneracy checks. For degenerate inputs this
/// still returns one of the (non-unique) minimizers.
pub(crate) fn align_closed_form<T: Real>(src: &[Point3<T>], dst: &[Point3<T>]) -> Option<Pose<T>> {
    let cs = centroid(src);
    let cd = centroid(dst);
    let mut h = Matrix3::<T>::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s.coords - cs) * (d.coords - cd).transpose();
    }
    let svd = h.try_svd(true, true, T::default_epsilon(), 0)?;
    let u = svd.u?;
    let v_t = svd.v_t?;
    let v = v_t.transpose();
    let mut r = v * u.transpose();
    if r.determinant() < T::zero() {
        let (mut min_i, mut min_s) = (0, svd.singular_values[0]);
        for i in 1..3 {
            if svd.singular_values[i] < min_s {
                min_s = svd.singular_values[i];
                min_i = i;
            }
        }
        let mut flip = Matrix3::identity();
        flip[(min_i, min_i)] = -T::one();
        r = v * flip * u.transpose();
    }
    let t = cd - r * cs;
    Some(Pose::from_rotation_matrix(&r, t))
}

/// True when the points span at most a line (relative to their spread).
pub(crate) fn is_collinear<T: Real>(pts: &[Point3<T>]) -> bool {
    if pts.len() < 3 {
        return true;
    }
    let c = centroid(pts);
    let mut cov = Matrix3::<T>::zeros();
    for p in pts {
        let d = p.coords - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigenvalues();
    let mut vals = [eig[0], eig[1], eig[2]];
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let rel = T::default_epsilon().sqrt();
    !(vals[0] > T::zero()) || vals[1] <= vals[0] * rel
}

/// Sum of squared residuals of `dst - pose(src)`.
pub fn alignment_residual<T: Real>(pose: &Pose<T>, src: &[Point3<T>], dst: &[Point3<T>]) -> T {
    src.iter()
        .zip(dst)
        .fold(T::zero(), |acc, (s, d)| acc + (d - pose.transform(s)).norm_squared())
}
