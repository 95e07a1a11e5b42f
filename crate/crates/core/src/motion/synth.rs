//! Procedural walking clips on flat ground.
//!
//! Used as replay data, test fixtures and toy training data. Every frame puts
//! the lowest sample of the stance foot exactly on the ground and labels only
//! that foot as in contact.

use crate::rotmath::{v3, ExpMap, UnitQuaternion};

use super::{MotionClip, MotionFrame, Skeleton, DEFAULT_FPS};

#[derive(Debug, Clone, Copy)]
pub struct WalkParams {
    pub frames: usize,
    pub fps: f64,
    /// Forward speed in m/s.
    pub speed: f64,
    /// Gait cycle duration in seconds.
    pub cycle: f64,
    pub start: [f64; 2],
    pub heading: f64,
    pub ground: f64,
    pub hip_swing: f64,
    pub knee_bend: f64,
}

impl Default for WalkParams {
    fn default() -> Self {
        Self {
            frames: 90,
            fps: DEFAULT_FPS,
            speed: 1.2,
            cycle: 1.0,
            start: [0.0, 0.0],
            heading: 0.0,
            ground: 0.0,
            hip_swing: 0.35,
            knee_bend: 0.6,
        }
    }
}

pub fn walk_clip(skeleton: &Skeleton, params: &WalkParams) -> MotionClip {
    let j = skeleton.num_joints();
    let idx = |n: &str| skeleton.joint_index(n);
    let yaw = UnitQuaternion::from_yaw(params.heading);
    let root_rot = ExpMap::from_quat(&yaw);
    let (s, c) = params.heading.sin_cos();
    let frames = (0..params.frames)
        .map(|i| {
            let t = i as f64 / params.fps;
            let phase = std::f64::consts::TAU * t / params.cycle;
            let mut rot = vec![ExpMap::ZERO; j];
            let mut pitch = |name: &str, angle: f64| {
                if let Some(k) = idx(name) {
                    rot[k] = ExpMap([0.0, angle, 0.0]);
                }
            };
            pitch("left_hip", -params.hip_swing * phase.sin());
            pitch("right_hip", params.hip_swing * phase.sin());
            pitch("left_knee", params.knee_bend * phase.cos().max(0.0));
            pitch("right_knee", params.knee_bend * (-phase.cos()).max(0.0));
            pitch("left_shoulder", 0.3 * phase.sin());
            pitch("right_shoulder", -0.3 * phase.sin());
            pitch("left_elbow", -0.3);
            pitch("right_elbow", -0.3);

            let d = params.speed * t;
            let xy = [params.start[0] + c * d, params.start[1] + s * d];
            let pose = skeleton.pose([xy[0], xy[1], 0.0], &root_rot, &rot);
            let lowest = |b: usize| {
                skeleton.surface_samples[b]
                    .iter()
                    .map(|p| (pose.pos[b] + pose.rot[b] * v3(*p)).z)
                    .fold(f64::INFINITY, f64::min)
            };
            let stance = skeleton
                .foot_joints
                .iter()
                .copied()
                .min_by(|&a, &b| lowest(a).total_cmp(&lowest(b)));
            let mut contacts = vec![0.0; j];
            let height = match stance {
                Some(f) => {
                    contacts[f] = 1.0;
                    params.ground - lowest(f)
                }
                None => params.ground + super::REFERENCE_STAND_HEIGHT,
            };
            MotionFrame::from_pose(skeleton, [xy[0], xy[1], height], root_rot, rot, contacts)
        })
        .collect();
    let mut clip = MotionClip::new(params.fps, frames);
    clip.skeleton_id = skeleton.id.clone();
    clip
}
