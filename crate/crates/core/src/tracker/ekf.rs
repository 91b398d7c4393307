//! Constant-velocity Kalman filter over world-frame position and velocity.
//!
//! State `x = [px, py, pz, vx, vy, vz]`; both the motion and the measurement models
//! are linear, so predict/update are the plain Kalman equations. Covariance updates
//! use the Joseph form and are explicitly re-symmetrized.

use nalgebra::{Matrix3, Matrix3x6, Matrix6, Point3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Process/measurement noise and the initial covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkfNoise {
    /// Position process noise density, m²/s.
    pub q_pos: f64,
    /// Velocity process noise density, m²/s³.
    pub q_vel: f64,
    /// Centroid measurement variance, m².
    pub r: f64,
    /// Initial position standard deviation, m.
    pub init_pos_std: f64,
    /// Initial velocity standard deviation, m/s.
    pub init_vel_std: f64,
}

impl Default for EkfNoise {
    fn default() -> Self {
        EkfNoise {
            q_pos: 1e-4,
            q_vel: 0.5,
            r: 0.04 * 0.04,
            init_pos_std: 0.05,
            init_vel_std: 1.0,
        }
    }
}

impl EkfNoise {
    pub fn validate(&self) -> Result<()> {
        let ok = self.q_pos >= 0.0
            && self.q_vel >= 0.0
            && self.r > 0.0
            && self.init_pos_std > 0.0
            && self.init_vel_std > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid EKF noise {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackState<T: Real> {
    pub x: Vector6<T>,
    pub p: Matrix6<T>,
}

impl<T: Real> TrackState<T> {
    /// New object at `position`, presumed idle.
    pub fn init(position: Point3<T>, noise: &EkfNoise) -> Self {
        let mut x = Vector6::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&position.coords);
        let pv = T::lit(noise.init_pos_std * noise.init_pos_std);
        let vv = T::lit(noise.init_vel_std * noise.init_vel_std);
        let p = Matrix6::from_diagonal(&Vector6::new(pv, pv, pv, vv, vv, vv));
        TrackState { x, p }
    }

    pub fn position(&self) -> Point3<T> {
        Point3::from(self.x.fixed_rows::<3>(0).into_owned())
    }

    pub fn velocity(&self) -> Vector3<T> {
        self.x.fixed_rows::<3>(3).into_owned()
    }

    pub fn speed(&self) -> T {
        self.velocity().norm()
    }

    /// Max absolute asymmetry `|P - Pᵀ|∞`.
    pub fn asymmetry(&self) -> T {
        (self.p - self.p.transpose()).abs().max()
    }

    pub fn is_positive_definite(&self) -> bool {
        self.p.cholesky().is_some()
    }
}

fn transition<T: Real>(dt: T) -> Matrix6<T> {
    let mut f = Matrix6::identity();
    for i in 0..3 {
        f[(i, i + 3)] = dt;
    }
    f
}

fn observation<T: Real>() -> Matrix3x6<T> {
    let mut h = Matrix3x6::zeros();
    for i in 0..3 {
        h[(i, i)] = T::one();
    }
    h
}

fn symmetrize<T: Real>(p: &Matrix6<T>) -> Matrix6<T> {
    (p + p.transpose()) * T::lit(0.5)
}

/// `x' = F x`, `P' = F P Fᵀ + Q(dt)` with `Q = diag(q_pos·dt·I₃, q_vel·dt·I₃)`.
pub fn ekf_predict<T: Real>(state: &TrackState<T>, dt: T, q_pos: T, q_vel: T) -> Result<TrackState<T>> {
    if !(dt > T::zero()) {
        return Err(Error::TimeOrder(format!(
            "predict with non-positive dt {}",
            dt.to_f64_lossy()
        )));
    }
    let f = transition(dt);
    let qp = q_pos * dt;
    let qv = q_vel * dt;
    let q = Matrix6::from_diagonal(&Vector6::new(qp, qp, qp, qv, qv, qv));
    Ok(TrackState {
        x: f * state.x,
        p: symmetrize(&(f * state.p * f.transpose() + q)),
    })
}

/// Position measurement update with `H = [I₃ 0]`, `R = r·I₃`.
pub fn ekf_update<T: Real>(state: &TrackState<T>, z: &Point3<T>, r: T) -> Result<TrackState<T>> {
    let h = observation::<T>();
    let r_m = Matrix3::identity() * r;
    let s = h * state.p * h.transpose() + r_m;
    let s_inv = s
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::Numerical("innovation covariance not invertible"))?;
    let k = state.p * h.transpose() * s_inv;
    let innovation = z.coords - h * state.x;
    let x = state.x + k * innovation;
    let i_kh = Matrix6::identity() - k * h;
    let p = i_kh * state.p * i_kh.transpose() + k * r_m * k.transpose();
    Ok(TrackState { x, p: symmetrize(&p) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Reference Kalman filter on heap matrices, written out entry by entry.
    struct DenseKf {
        x: DVector<f64>,
        p: DMatrix<f64>,
    }

    impl DenseKf {
        fn predict(&mut self, dt: f64, q_pos: f64, q_vel: f64) {
            let mut f = DMatrix::<f64>::identity(6, 6);
            for i in 0..3 {
                f[(i, i + 3)] = dt;
            }
            let mut q = DMatrix::<f64>::zeros(6, 6);
            for i in 0..3 {
                q[(i, i)] = q_pos * dt;
                q[(i + 3, i + 3)] = q_vel * dt;
            }
            self.x = &f * &self.x;
            self.p = &f * &self.p * f.transpose() + q;
        }

        fn update(&mut self, z: [f64; 3], r: f64) {
            let mut h = DMatrix::<f64>::zeros(3, 6);
            for i in 0..3 {
                h[(i, i)] = 1.0;
            }
            let rm = DMatrix::<f64>::identity(3, 3) * r;
            let s = &h * &self.p * h.transpose() + &rm;
            let k = &self.p * h.transpose() * s.try_inverse().unwrap();
            let y = DVector::from_row_slice(&z) - &h * &self.x;
            self.x = &self.x + &k * y;
            // Standard form; equal to Joseph form in exact arithmetic.
            self.p = (DMatrix::<f64>::identity(6, 6) - &k * &h) * &self.p;
        }
    }

    fn random_spd(rng: &mut ChaCha8Rng) -> Matrix6<f64> {
        let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        a * a.transpose() + Matrix6::identity() * 0.1
    }

    #[test]
    fn predict_constant_velocity() {
        let s = TrackState {
            x: Vector6::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0),
            p: Matrix6::identity(),
        };
        let n = ekf_predict(&s, 0.5, 1e-4, 0.5).unwrap();
        assert_eq!(n.position(), Point3::new(0.5, 0.0, 0.0));
        assert_eq!(n.velocity(), Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn predict_small_dt_is_nearly_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = TrackState {
            x: Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            p: random_spd(&mut rng),
        };
        let n = ekf_predict(&s, 1e-12, 1e-4, 0.5).unwrap();
        assert!((n.x - s.x).abs().max() < 1e-11);
        assert!((n.p - s.p).abs().max() < 1e-10);
        assert!(matches!(ekf_predict(&s, 0.0, 1e-4, 0.5), Err(Error::TimeOrder(_))));
        assert!(matches!(ekf_predict(&s, -0.1, 1e-4, 0.5), Err(Error::TimeOrder(_))));
    }

    #[test]
    fn predict_update_match_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let x0 = Vector6::from_fn(|_, _| rng.random_range(-2.0..2.0));
            let p0 = random_spd(&mut rng);
            let mut s = TrackState { x: x0, p: p0 };
            let mut d = DenseKf {
                x: DVector::from_column_slice(x0.as_slice()),
                p: DMatrix::from_column_slice(6, 6, p0.as_slice()),
            };
            for _ in 0..5 {
                s = ekf_predict(&s, 1.0 / 30.0, 1e-4, 0.5).unwrap();
                d.predict(1.0 / 30.0, 1e-4, 0.5);
                for i in 0..6 {
                    assert!((s.x[i] - d.x[i]).abs() < 1e-9);
                    for j in 0..6 {
                        assert!((s.p[(i, j)] - d.p[(i, j)]).abs() < 1e-9);
                    }
                }
                let z = [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ];
                s = ekf_update(&s, &Point3::new(z[0], z[1], z[2]), 0.0016).unwrap();
                d.update(z, 0.0016);
                for i in 0..6 {
                    assert!((s.x[i] - d.x[i]).abs() < 1e-9);
                    for j in 0..6 {
                        assert!((s.p[(i, j)] - d.p[(i, j)]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn uninformative_measurement_leaves_state() {
        let s = TrackState::init(Point3::new(1.0, 2.0, 3.0), &EkfNoise::default());
        let n = ekf_update(&s, &Point3::new(10.0, -10.0, 4.0), 1e12).unwrap();
        assert!((n.x - s.x).norm() < 1e-3);
    }

    #[test]
    fn certain_prior_ignores_measurement() {
        let mut p = Matrix6::zeros();
        for i in 3..6 {
            p[(i, i)] = 1.0;
        }
        let s = TrackState {
            x: Vector6::new(1.0, 1.0, 1.0, 0.0, 0.0, 0.0),
            p,
        };
        let n = ekf_update(&s, &Point3::new(5.0, 5.0, 5.0), 0.0016).unwrap();
        assert_eq!(n.position(), s.position());
    }

    #[test]
    fn velocity_converges_on_noiseless_track() {
        let noise = EkfNoise::default();
        let dt = 1.0 / 30.0;
        let mut s = TrackState::init(Point3::new(0.0, 0.0, 2.0), &noise);
        let mut d = DenseKf {
            x: DVector::from_column_slice(s.x.as_slice()),
            p: DMatrix::from_column_slice(6, 6, s.p.as_slice()),
        };
        for k in 1..=50 {
            let z = Point3::new(k as f64 * dt, 0.0, 2.0);
            s = ekf_predict(&s, dt, noise.q_pos, noise.q_vel).unwrap();
            s = ekf_update(&s, &z, noise.r).unwrap();
            d.predict(dt, noise.q_pos, noise.q_vel);
            d.update([z.x, z.y, z.z], noise.r);
        }
        let v = s.velocity();
        assert!((v - Vector3::new(1.0, 0.0, 0.0)).norm() < 0.05, "{v:?}");
        for i in 3..6 {
            assert!((v[i - 3] - d.x[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn works_in_f32() {
        let noise = EkfNoise::default();
        let mut s = TrackState::<f32>::init(Point3::new(0.0, 0.0, 2.0), &noise);
        for k in 1..=50 {
            s = ekf_predict(&s, 1.0 / 30.0, 1e-4, 0.5).unwrap();
            s = ekf_update(&s, &Point3::new(k as f32 / 30.0, 0.0, 2.0), 0.0016).unwrap();
        }
        assert!((s.velocity().x - 1.0).abs() < 0.05);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn covariance_stays_symmetric_positive_definite(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = EkfNoise::default();
            let mut s = TrackState::init(Point3::new(0.0, 0.0, 2.0), &noise);
            for _ in 0..1000 {
                if rng.random_bool(0.7) {
                    s = ekf_predict(&s, rng.random_range(0.005..0.2), noise.q_pos, noise.q_vel).unwrap();
                }
                if rng.random_bool(0.8) {
                    let z = Point3::new(
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                        rng.random_range(0.1..8.0),
                    );
                    s = ekf_update(&s, &z, rng.random_range(1e-4..1.0)).unwrap();
                }
                prop_assert!(s.asymmetry() < 1e-9);
                prop_assert!(s.is_positive_definite());
            }
        }
    }
}
