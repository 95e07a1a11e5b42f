//! Motion frames and clips, skeleton kinematics and surface sampling.

mod skeleton;
pub mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use skeleton::{Capsule, JointNode, Pose, Skeleton, SkeletonFile, REFERENCE_STAND_HEIGHT};

use crate::error::{Error, Result};
use crate::rotmath::{canonicalize, v3, ExpMap};

/// Frames per generated window: 2 conditioning frames and 13 future frames.
pub const WINDOW_FRAMES: usize = 15;
pub const PREV_FRAMES: usize = 2;
pub const DEFAULT_FPS: f64 = 30.0;
/// Contact labels at or above this value count as "in contact".
pub const CONTACT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionFrame {
    pub root_pos: [f64; 3],
    pub root_rot: ExpMap,
    pub joint_rot: Vec<ExpMap>,
    pub joint_pos: Vec<[f64; 3]>,
    pub contacts: Vec<f64>,
}

impl MotionFrame {
    /// Frame with joint positions filled in by forward kinematics.
    pub fn from_pose(
        skeleton: &Skeleton,
        root_pos: [f64; 3],
        root_rot: ExpMap,
        joint_rot: Vec<ExpMap>,
        contacts: Vec<f64>,
    ) -> Self {
        let joint_pos = skeleton.forward_kinematics(root_pos, &root_rot, &joint_rot);
        Self {
            root_pos,
            root_rot,
            joint_rot,
            joint_pos,
            contacts,
        }
    }

    pub fn rest(skeleton: &Skeleton, root_pos: [f64; 3]) -> Self {
        let j = skeleton.num_joints();
        Self::from_pose(
            skeleton,
            root_pos,
            ExpMap::ZERO,
            vec![ExpMap::ZERO; j],
            vec![0.0; j],
        )
    }

    pub fn num_joints(&self) -> usize {
        self.joint_rot.len()
    }

    pub fn validate(&self, joints: usize) -> Result<()> {
        if self.joint_rot.len() != joints
            || self.joint_pos.len() != joints
            || self.contacts.len() != joints
        {
            return Err(Error::ShapeMismatch(format!(
                "frame has {}/{}/{} rotations/positions/contacts, skeleton has {joints} joints",
                self.joint_rot.len(),
                self.joint_pos.len(),
                self.contacts.len()
            )));
        }
        if self.contacts.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidParameter(
                "contact label outside [0, 1]".into(),
            ));
        }
        let finite = self.root_pos.iter().all(|v| v.is_finite())
            && self.root_rot.0.iter().all(|v| v.is_finite())
            && self.joint_rot.iter().flat_map(|r| r.0).all(f64::is_finite)
            && self.joint_pos.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter("non-finite frame value".into()));
        }
        Ok(())
    }

    pub fn in_contact(&self, joint: usize) -> bool {
        self.contacts[joint] >= CONTACT_THRESHOLD
    }

    /// Length of the flattened feature vector for `joints` joints.
    pub fn flat_dim(joints: usize) -> usize {
        6 + 7 * joints
    }

    /// `[root_pos(3), root_rot(3), joint_rot(3J), joint_pos(3J), contacts(J)]`.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.root_pos);
        out.extend_from_slice(&self.root_rot.0);
        for r in &self.joint_rot {
            out.extend_from_slice(&r.0);
        }
        for p in &self.joint_pos {
            out.extend_from_slice(p);
        }
        out.extend_from_slice(&self.contacts);
    }

    pub fn read_flat(v: &[f64], joints: usize) -> Self {
        let triple = |o: usize| [v[o], v[o + 1], v[o + 2]];
        let jr = 6;
        let jp = jr + 3 * joints;
        let c = jp + 3 * joints;
        Self {
            root_pos: triple(0),
            root_rot: ExpMap(triple(3)),
            joint_rot: (0..joints).map(|j| ExpMap(triple(jr + 3 * j))).collect(),
            joint_pos: (0..joints).map(|j| triple(jp + 3 * j)).collect(),
            contacts: v[c..c + joints].to_vec(),
        }
    }
}

/// Flattens frames back to back.
pub fn flatten_frames(frames: &[MotionFrame]) -> Vec<f64> {
    let mut out = Vec::new();
    for f in frames {
        f.write_flat(&mut out);
    }
    out
}

pub fn unflatten_frames(v: &[f64], joints: usize) -> Result<Vec<MotionFrame>> {
    let dim = MotionFrame::flat_dim(joints);
    if !v.len().is_multiple_of(dim) {
        return Err(Error::ShapeMismatch(format!(
            "flat length {} is not a multiple of frame size {dim}",
            v.len()
        )));
    }
    Ok(v.chunks(dim)
        .map(|c| MotionFrame::read_flat(c, joints))
        .collect())
}

/// A motion sequence at a fixed frame rate, paired with a terrain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionClip {
    pub fps: f64,
    #[serde(default)]
    pub skeleton_id: String,
    #[serde(default)]
    pub terrain_id: String,
    pub frames: Vec<MotionFrame>,
}

impl MotionClip {
    pub fn new(fps: f64, frames: Vec<MotionFrame>) -> Self {
        Self {
            fps,
            skeleton_id: String::new(),
            terrain_id: String::new(),
            frames,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }

    pub fn validate(&self, skeleton: &Skeleton) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::InsufficientFrames { needed: 1, got: 0 });
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::InvalidParameter(format!("fps {}", self.fps)));
        }
        self.frames
            .iter()
            .try_for_each(|f| f.validate(skeleton.num_joints()))
    }

    /// 15 consecutive frames canonicalized to the window's second frame.
    pub fn window(&self, start: usize) -> Result<Vec<MotionFrame>> {
        if start + WINDOW_FRAMES > self.frames.len() {
            return Err(Error::OutOfBounds(format!(
                "window [{start}, {}) exceeds clip of {} frames",
                start + WINDOW_FRAMES,
                self.frames.len()
            )));
        }
        canonicalize(&self.frames[start..start + WINDOW_FRAMES], 1)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let clip: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if clip.frames.is_empty() {
            return Err(Error::InsufficientFrames { needed: 1, got: 0 });
        }
        Ok(clip)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// World-space surface samples for one frame with their owning body.
#[derive(Debug, Clone)]
pub struct SurfacePoints {
    pub points: Vec<[f64; 3]>,
    pub body: Vec<usize>,
}

impl SurfacePoints {
    /// Points grouped by body, in body order.
    pub fn by_body(&self, body: usize) -> impl Iterator<Item = &[f64; 3]> {
        self.points
            .iter()
            .zip(&self.body)
            .filter(move |(_, &b)| b == body)
            .map(|(p, _)| p)
    }
}

pub fn sample_surface_points(skeleton: &Skeleton, frame: &MotionFrame) -> SurfacePoints {
    let pose = skeleton.pose(frame.root_pos, &frame.root_rot, &frame.joint_rot);
    surface_points_for_pose(skeleton, &pose)
}

pub fn surface_points_for_pose(skeleton: &Skeleton, pose: &Pose) -> SurfacePoints {
    let n = skeleton.num_surface_points();
    let mut points = Vec::with_capacity(n);
    let mut body = Vec::with_capacity(n);
    for (b, samples) in skeleton.surface_samples.iter().enumerate() {
        for s in samples {
            let p = pose.pos[b] + pose.rot[b] * v3(*s);
            points.push([p.x, p.y, p.z]);
            body.push(b);
        }
    }
    SurfacePoints { points, body }
}

pub fn load_skeleton(path: &Path) -> Result<Skeleton> {
    let file: SkeletonFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Skeleton::from_file_repr(&file)
}

pub fn save_skeleton(skeleton: &Skeleton, path: &Path) -> Result<()> {
    std::fs::write(
        path,
        serde_json::to_string_pretty(&skeleton.to_file_repr())?,
    )?;
    Ok(())
}
