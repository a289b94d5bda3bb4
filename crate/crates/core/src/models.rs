//! Motion and sensing models, shared by the truth simulator and the filters.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

pub const DEFAULT_WHEELBASE: f64 = 0.6;

#[derive(Clone, Debug, PartialEq)]
pub struct DubinsParams {
    /// Front-rear wheel distance (m).
    pub wheelbase: f64,
    /// Covariance of the additive rate noise [w_x, w_y, w_theta].
    pub process_noise: Matrix3<f64>,
    pub dt: f64,
}

impl DubinsParams {
    /// Covariance of the per-step pose increment, `dt^2 * Q_r`.
    pub fn step_noise(&self) -> Matrix3<f64> {
        self.process_noise * (self.dt * self.dt)
    }
}

fn dubins_raw(pose: &Vector3<f64>, v: f64, phi: f64, p: &DubinsParams, noise: &Vector3<f64>) -> Vector3<f64> {
    let th = pose[2];
    Vector3::new(
        pose[0] + p.dt * (v * th.cos() + noise[0]),
        pose[1] + p.dt * (v * th.sin() + noise[1]),
        th + p.dt * (v / p.wheelbase * phi.tan() + noise[2]),
    )
}

/// One forward-Euler step of the Dubins car; heading wrapped to (-pi, pi].
pub fn dubins_step(pose: &Vector3<f64>, v: f64, phi: f64, p: &DubinsParams, noise: &Vector3<f64>) -> Vector3<f64> {
    let mut next = dubins_raw(pose, v, phi, p, noise);
    next[2] = wrap_angle(next[2]);
    next
}

/// Noise-free Euler step without heading wrap, for filters that carry an unwrapped heading.
pub fn dubins_predict(pose: &Vector3<f64>, v: f64, phi: f64, p: &DubinsParams) -> Vector3<f64> {
    dubins_raw(pose, v, phi, p, &Vector3::zeros())
}

pub fn dubins_jacobian(pose: &Vector3<f64>, v: f64, _phi: f64, p: &DubinsParams) -> Matrix3<f64> {
    let th = pose[2];
    Matrix3::new(
        1.0, 0.0, -p.dt * v * th.sin(),
        0.0, 1.0, p.dt * v * th.cos(),
        0.0, 0.0, 1.0,
    )
}

/// Piecewise-constant input over time, optionally repeating.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule<T> {
    /// (duration in seconds, value) segments in order.
    pub segments: Vec<(f64, T)>,
    pub cyclic: bool,
}

impl<T: Clone> Schedule<T> {
    pub fn constant(value: T) -> Self {
        Schedule {
            segments: vec![(f64::INFINITY, value)],
            cyclic: false,
        }
    }

    /// Value in effect at time `t` seconds; the last segment holds forever
    /// unless the schedule is cyclic.
    pub fn value_at(&self, t: f64) -> T {
        assert!(!self.segments.is_empty(), "schedule needs at least one segment");
        let total: f64 = self.segments.iter().map(|s| s.0).sum();
        let mut t = t.max(0.0);
        if self.cyclic && total.is_finite() && total > 0.0 {
            t = t.rem_euclid(total);
        }
        let mut start = 0.0;
        for (dur, value) in &self.segments {
            if t < start + dur - 1e-9 {
                return value.clone();
            }
            start += dur;
        }
        self.segments.last().unwrap().1.clone()
    }
}

/// Target moving under a known per-step displacement.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlledTargetParams {
    pub process_noise: Matrix2<f64>,
}

pub fn controlled_target_step(t: &Vector2<f64>, u: &Vector2<f64>, noise: &Vector2<f64>) -> Vector2<f64> {
    t + u + noise
}

/// Nearly-constant-velocity target, state [x, vx, y, vy].
#[derive(Clone, Debug, PartialEq)]
pub struct NcvTargetParams {
    /// White-noise acceleration intensity ((m/s^2)^2 s).
    pub q: f64,
    pub dt: f64,
}

impl NcvTargetParams {
    pub fn transition_matrices(&self) -> (Matrix4<f64>, Matrix4<f64>) {
        let dt = self.dt;
        let f = Matrix4::new(
            1.0, dt, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, dt,
            0.0, 0.0, 0.0, 1.0,
        );
        let (a, b, c) = (dt.powi(3) / 3.0, dt.powi(2) / 2.0, dt);
        let q = Matrix4::new(
            a, b, 0.0, 0.0,
            b, c, 0.0, 0.0,
            0.0, 0.0, a, b,
            0.0, 0.0, b, c,
        ) * self.q;
        (f, q)
    }

    pub fn step(&self, t: &Vector4<f64>, noise: &Vector4<f64>) -> Vector4<f64> {
        let (f, _) = self.transition_matrices();
        f * t + noise
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RangeBearingSensor {
    /// diag-or-full covariance of (range m, bearing rad).
    pub noise: Matrix2<f64>,
    pub landmarks: Vec<Vector2<f64>>,
    pub max_landmarks: usize,
}

pub const DEFAULT_MAX_LANDMARKS: usize = 4;

impl RangeBearingSensor {
    /// Indices of the `max_landmarks` landmarks nearest to `position`, nearest first.
    pub fn nearest_landmarks(&self, position: &Vector2<f64>) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.landmarks.len()).collect();
        idx.sort_by(|&a, &b| {
            let da = (self.landmarks[a] - position).norm_squared();
            let db = (self.landmarks[b] - position).norm_squared();
            da.total_cmp(&db).then(a.cmp(&b))
        });
        idx.truncate(self.max_landmarks);
        idx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RangeBearing {
    pub range: f64,
    pub bearing: f64,
    /// d(range, bearing)/d(x, y, theta)
    pub d_pose: Matrix2x3<f64>,
    /// d(range, bearing)/d(p_x, p_y)
    pub d_point: Matrix2<f64>,
}

pub fn range_bearing_predict(pose: &Vector3<f64>, point: &Vector2<f64>) -> Result<RangeBearing> {
    let dx = point[0] - pose[0];
    let dy = point[1] - pose[1];
    let q = dx * dx + dy * dy;
    let range = q.sqrt();
    if range <= 1e-6 {
        return Err(Error::DegenerateGeometry(format!(
            "sensor at ({:.3}, {:.3}) coincides with observed point",
            pose[0], pose[1]
        )));
    }
    let bearing = wrap_angle(dy.atan2(dx) - pose[2]);
    let d_point = Matrix2::new(dx / range, dy / range, -dy / q, dx / q);
    let d_pose = Matrix2x3::new(-dx / range, -dy / range, 0.0, dy / q, -dx / q, -1.0);
    Ok(RangeBearing {
        range,
        bearing,
        d_pose,
        d_point,
    })
}

/// Relative target position corrupted by the sensor bias: `y = t + s + v1`.
pub fn biased_position_measure(t: &Vector2<f64>, s: &Vector2<f64>, noise: &Vector2<f64>) -> Vector2<f64> {
    t + s + noise
}

/// Landmark-relative measurement observing only the bias: `m = s + v2`.
pub fn bias_only_measure(s: &Vector2<f64>, noise: &Vector2<f64>) -> Vector2<f64> {
    s + noise
}

/// Scalar indices of the planar position inside a target state of dimension `dim`.
pub fn target_position_indices(dim: usize) -> [usize; 2] {
    match dim {
        4 => [0, 2],
        _ => [0, 1],
    }
}
