//! Rotation representations, finite-difference derivatives and local frames.
//!
//! Rotations are stored as exponential maps (axis times angle) and converted
//! to unit quaternions for composition. The rotational difference operator
//! `a ⊖ b` is `log(a * b^-1)`, the minimal rotation taking `b` to `a`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MotionFrame;

pub type Vec3 = Vector3<f64>;

/// Below this angle the closed-form series are replaced by Taylor expansions.
const SMALL_ANGLE: f64 = 1e-6;

/// Projected forward vectors shorter than this have no usable heading.
pub const HEADING_EPS: f64 = 1e-6;

#[inline]
pub fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

#[inline]
pub fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Unit quaternion kept in the `w >= 0` hemisphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl UnitQuaternion {
    pub const IDENTITY: Self = Self {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and flips into the canonical hemisphere.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let s = if w < 0.0 { -1.0 / n } else { 1.0 / n };
        Self {
            w: w * s,
            x: x * s,
            y: y * s,
            z: z * s,
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        Self::from_exp_map(axis * (angle / n))
    }

    /// Rotation about the world up axis (+z).
    pub fn from_yaw(yaw: f64) -> Self {
        let (s, c) = (0.5 * yaw).sin_cos();
        Self::new(c, 0.0, 0.0, s)
    }

    pub fn from_exp_map(v: Vec3) -> Self {
        let theta = v.norm();
        let half = 0.5 * theta;
        let k = if theta < SMALL_ANGLE {
            // sin(θ/2)/θ
            0.5 - theta * theta / 48.0
        } else {
            half.sin() / theta
        };
        Self::new(half.cos(), v.x * k, v.y * k, v.z * k)
    }

    /// Minimal exponential map; the returned angle lies in `[0, π]`.
    pub fn to_exp_map(&self) -> Vec3 {
        let (w, xyz) = if self.w < 0.0 {
            (-self.w, Vec3::new(-self.x, -self.y, -self.z))
        } else {
            (self.w, Vec3::new(self.x, self.y, self.z))
        };
        let s = xyz.norm();
        if s < SMALL_ANGLE {
            // θ ≈ 2s, so scale ≈ 2/w (1 + s²/(3w²))
            return xyz * (2.0 / w) * (1.0 - s * s / (3.0 * w * w));
        }
        let theta = 2.0 * s.atan2(w);
        xyz * (theta / s)
    }

    pub fn conjugate(&self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn dot(&self, o: &Self) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn mul(&self, o: &Self) -> Self {
        Self::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.to_matrix() * v
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Geodesic angle to `o` in `[0, π]`.
    pub fn angle_to(&self, o: &Self) -> f64 {
        2.0 * self.dot(o).abs().min(1.0).acos()
    }
}

/// Rotation stored as axis times angle (radians).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpMap(pub [f64; 3]);

impl ExpMap {
    pub const ZERO: Self = Self([0.0; 3]);

    /// Wraps an arbitrary rotation vector to its minimal representative.
    pub fn new(v: [f64; 3]) -> Self {
        let n = v3(v).norm();
        if n <= std::f64::consts::PI {
            Self(v)
        } else {
            Self::from_quat(&UnitQuaternion::from_exp_map(v3(v)))
        }
    }

    pub fn from_quat(q: &UnitQuaternion) -> Self {
        Self(arr(&q.to_exp_map()))
    }

    pub fn to_quat(&self) -> UnitQuaternion {
        UnitQuaternion::from_exp_map(self.vec())
    }

    pub fn vec(&self) -> Vec3 {
        v3(self.0)
    }

    pub fn angle(&self) -> f64 {
        self.vec().norm()
    }
}

/// `a ⊖ b`: exponential map of `a * b^-1`.
pub fn quat_diff(a: &UnitQuaternion, b: &UnitQuaternion) -> ExpMap {
    ExpMap::from_quat(&a.mul(&b.conjugate()))
}

pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left Jacobian of SO(3): `Exp(v + δ) ≈ Exp(J_l(v) δ) Exp(v)`.
pub fn left_jacobian(v: &Vec3) -> Matrix3<f64> {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(v);
    let (a, b) = if theta < 1e-4 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * a + k * k * b
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Order-`order` forward differences scaled by `fps^order`.
///
/// The output has the input's length; the last `order` rows repeat the last
/// computable difference.
pub fn finite_diff(seq: &[Vec<f64>], fps: f64, order: usize) -> Result<Vec<Vec<f64>>> {
    let n = seq.len();
    if n < order + 1 {
        return Err(Error::InsufficientFrames {
            needed: order + 1,
            got: n,
        });
    }
    let dim = seq[0].len();
    if seq.iter().any(|r| r.len() != dim) {
        return Err(Error::ShapeMismatch("ragged sequence".into()));
    }
    let coeffs: Vec<f64> = (0..=order)
        .map(|i| {
            let sign = if (order - i).is_multiple_of(2) {
                1.0
            } else {
                -1.0
            };
            sign * binomial(order, i)
        })
        .collect();
    let scale = fps.powi(order as i32);
    let mut out = Vec::with_capacity(n);
    for t in 0..n - order {
        let row: Vec<f64> = (0..dim)
            .map(|d| {
                coeffs
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c * seq[t + i][d])
                    .sum::<f64>()
                    * scale
            })
            .collect();
        out.push(row);
    }
    let last = out[n - order - 1].clone();
    out.resize(n, last);
    Ok(out)
}

/// Yaw of the rotated +x axis, or `None` when it points (nearly) straight up or down.
pub fn heading_of(q: &UnitQuaternion) -> Option<f64> {
    let f = q.rotate(&Vec3::x());
    if f.x.hypot(f.y) < HEADING_EPS {
        None
    } else {
        Some(f.y.atan2(f.x))
    }
}

/// Horizontal frame attached to a character: z stays the world up axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalFrame {
    pub origin: [f64; 3],
    pub heading: f64,
}

impl LocalFrame {
    pub fn new(origin: [f64; 3], heading: f64) -> Self {
        Self { origin, heading }
    }

    /// Frame anchored at `frames[anchor]`: root's horizontal position and heading,
    /// with the vertical origin left at zero so heights stay world heights.
    ///
    /// Degenerate headings fall back to the closest earlier frame with a valid
    /// heading, and to zero if none exists.
    pub fn from_frames(frames: &[MotionFrame], anchor: usize) -> Self {
        let heading = (0..=anchor)
            .rev()
            .find_map(|i| heading_of(&frames[i].root_rot.to_quat()))
            .unwrap_or(0.0);
        let p = frames[anchor].root_pos;
        Self {
            origin: [p[0], p[1], 0.0],
            heading,
        }
    }

    pub fn yaw(&self) -> UnitQuaternion {
        UnitQuaternion::from_yaw(self.heading)
    }

    pub fn point_to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let d = v3(p) - v3(self.origin);
        let (s, c) = self.heading.sin_cos();
        [c * d.x + s * d.y, -s * d.x + c * d.y, d.z]
    }

    pub fn point_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.heading.sin_cos();
        [
            c * p[0] - s * p[1] + self.origin[0],
            s * p[0] + c * p[1] + self.origin[1],
            p[2] + self.origin[2],
        ]
    }

    pub fn dir_to_local(&self, d: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
    }

    pub fn dir_to_world(&self, d: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [c * d[0] - s * d[1], s * d[0] + c * d[1]]
    }

    pub fn frame_to_local(&self, f: &MotionFrame) -> MotionFrame {
        let inv = self.yaw().conjugate();
        MotionFrame {
            root_pos: self.point_to_local(f.root_pos),
            root_rot: ExpMap::from_quat(&inv.mul(&f.root_rot.to_quat())),
            joint_rot: f.joint_rot.clone(),
            joint_pos: f
                .joint_pos
                .iter()
                .map(|p| self.point_to_local(*p))
                .collect(),
            contacts: f.contacts.clone(),
        }
    }

    pub fn frame_to_world(&self, f: &MotionFrame) -> MotionFrame {
        let yaw = self.yaw();
        MotionFrame {
            root_pos: self.point_to_world(f.root_pos),
            root_rot: ExpMap::from_quat(&yaw.mul(&f.root_rot.to_quat())),
            joint_rot: f.joint_rot.clone(),
            joint_pos: f
                .joint_pos
                .iter()
                .map(|p| self.point_to_world(*p))
                .collect(),
            contacts: f.contacts.clone(),
        }
    }
}

/// Expresses every frame in the local frame of `frames[anchor]`.
pub fn canonicalize(frames: &[MotionFrame], anchor: usize) -> Result<Vec<MotionFrame>> {
    if anchor >= frames.len() {
        return Err(Error::OutOfBounds(format!(
            "anchor {anchor} outside {} frames",
            frames.len()
        )));
    }
    let frame = LocalFrame::from_frames(frames, anchor);
    Ok(frames.iter().map(|f| frame.frame_to_local(f)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_quat(rng: &mut impl Rng) -> UnitQuaternion {
        UnitQuaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
    }

    #[test]
    fn diff_of_identical_is_zero() {
        let q = UnitQuaternion::from_axis_angle(Vec3::new(1.0, 2.0, 3.0), 0.7);
        let d = quat_diff(&q, &q);
        assert!(d.angle() < 1e-12);
    }

    #[test]
    fn diff_quarter_turn_about_z() {
        let q = UnitQuaternion::from_axis_angle(Vec3::z(), FRAC_PI_2);
        let d = quat_diff(&q, &UnitQuaternion::IDENTITY);
        assert_abs_diff_eq!(d.0[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.0[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.0[2], FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn diff_magnitude_matches_dot_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = random_quat(&mut rng);
            let b = random_quat(&mut rng);
            let oracle = 2.0 * a.dot(&b).abs().min(1.0).acos();
            assert_abs_diff_eq!(quat_diff(&a, &b).angle(), oracle, epsilon = 1e-7);
            assert_abs_diff_eq!(
                quat_diff(&a, &b).angle(),
                quat_diff(&b, &a).angle(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn exp_map_round_trip_is_minimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let q = random_quat(&mut rng);
            let e = ExpMap::from_quat(&q);
            assert!(e.angle() <= PI + 1e-12);
            assert!(e.to_quat().angle_to(&q) < 1e-7);
        }
        // 1.5 turns about x wraps to a half turn the other way
        let e = ExpMap::new([3.0 * PI / 2.0, 0.0, 0.0]);
        assert_abs_diff_eq!(e.0[0], -FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn small_angle_branches_are_continuous() {
        let v = Vec3::new(3e-7, -2e-7, 1e-7);
        let q = UnitQuaternion::from_exp_map(v);
        assert_abs_diff_eq!((q.to_exp_map() - v).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn left_jacobian_matches_finite_differences() {
        let v = Vec3::new(0.3, -1.1, 0.8);
        let q = UnitQuaternion::from_exp_map(v);
        let jl = left_jacobian(&v);
        let h = 1e-6;
        for i in 0..3 {
            let mut dv = Vec3::zeros();
            dv[i] = h;
            let qp = UnitQuaternion::from_exp_map(v + dv);
            let w = quat_diff(&qp, &q).vec() / h;
            let col = jl.column(i);
            assert_abs_diff_eq!((w - col).norm(), 0.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn finite_diff_constant_and_ramp() {
        let c: Vec<Vec<f64>> = (0..10).map(|_| vec![3.0, -1.0]).collect();
        for r in finite_diff(&c, 30.0, 1).unwrap() {
            assert_eq!(r, vec![0.0, 0.0]);
        }
        // slope 2 per second
        let ramp: Vec<Vec<f64>> = (0..10).map(|i| vec![2.0 * i as f64 / 30.0]).collect();
        for r in finite_diff(&ramp, 30.0, 1).unwrap() {
            assert_abs_diff_eq!(r[0], 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn third_difference_of_cubic_is_six() {
        let fps = 30.0;
        let seq: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let t = i as f64 / fps;
                vec![t * t * t]
            })
            .collect();
        let d = finite_diff(&seq, fps, 3).unwrap();
        assert_eq!(d.len(), 40);
        for r in &d {
            assert_abs_diff_eq!(r[0], 6.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn finite_diff_rejects_short_sequences() {
        let seq = vec![vec![0.0]; 3];
        assert!(matches!(
            finite_diff(&seq, 30.0, 3),
            Err(Error::InsufficientFrames { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn finite_diff_replicates_tail() {
        let seq: Vec<Vec<f64>> = [0.0, 1.0, 4.0, 9.0, 16.0]
            .iter()
            .map(|v| vec![*v])
            .collect();
        let d = finite_diff(&seq, 1.0, 1).unwrap();
        let flat: Vec<f64> = d.iter().map(|r| r[0]).collect();
        assert_eq!(flat, vec![1.0, 3.0, 5.0, 7.0, 7.0]);
    }

    #[test]
    fn heading_degenerate_when_facing_up() {
        let up = UnitQuaternion::from_axis_angle(Vec3::y(), -FRAC_PI_2);
        assert!(heading_of(&up).is_none());
        let yaw = UnitQuaternion::from_yaw(1.0);
        assert_abs_diff_eq!(heading_of(&yaw).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn local_frame_round_trip() {
        let f = LocalFrame::new([1.0, -2.0, 0.5], 0.8);
        let p = [0.3, 4.0, 1.0];
        let back = f.point_to_world(f.point_to_local(p));
        for i in 0..3 {
            assert_abs_diff_eq!(back[i], p[i], epsilon = 1e-12);
        }
    }
}
