//! Motion-tracking rewards, pose termination and failure-weighted clip
//! sampling for a physics-based tracker.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{MotionClip, Skeleton, CONTACT_THRESHOLD};
use crate::rotmath::{quat_diff, v3, ExpMap};

pub const TERMINATION_DISTANCE: f64 = 0.7;
pub const MIN_SAMPLE_WEIGHT: f64 = 0.01;
/// Attempts over which failure rates are averaged.
pub const FAILURE_HORIZON: u64 = 100;

/// Kinematic state of a character, simulated or reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterState {
    pub root_pos: [f64; 3],
    pub root_rot: ExpMap,
    pub root_vel: [f64; 3],
    pub root_angvel: [f64; 3],
    pub joint_rot: Vec<ExpMap>,
    pub joint_vel: Vec<[f64; 3]>,
    pub key_pos: Vec<[f64; 3]>,
    pub contacts: Vec<f64>,
}

impl CharacterState {
    pub fn validate(&self, skeleton: &Skeleton) -> Result<()> {
        let j = skeleton.num_joints();
        if self.joint_rot.len() != j || self.joint_vel.len() != j || self.contacts.len() != j {
            return Err(Error::ShapeMismatch(format!(
                "state does not have {j} joints"
            )));
        }
        if self.key_pos.len() != skeleton.key_bodies.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} key positions for {} key bodies",
                self.key_pos.len(),
                skeleton.key_bodies.len()
            )));
        }
        if let Some(i) = self.contacts.iter().position(|&c| c != 0.0 && c != 1.0) {
            return Err(Error::InvalidParameter(format!(
                "contact {i} is not binary"
            )));
        }
        Ok(())
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.joint_rot.len() != other.joint_rot.len()
            || self.joint_vel.len() != other.joint_vel.len()
            || self.key_pos.len() != other.key_pos.len()
            || self.contacts.len() != other.contacts.len()
            || self.joint_rot.len() != self.joint_vel.len()
            || self.joint_rot.len() != self.contacts.len()
        {
            return Err(Error::ShapeMismatch(
                "character states differ in shape".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub pose: f64,
    pub pose_vel: f64,
    pub root: f64,
    pub root_vel: f64,
    pub key: f64,
    pub contact: f64,
    pub total: f64,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (v3(*a) - v3(*b)).norm_squared()
}

/// Tracking reward of `sim` against `reference`, with per-joint weights.
pub fn reward_total(
    sim: &CharacterState,
    reference: &CharacterState,
    joint_weights: &[f64],
) -> Result<RewardBreakdown> {
    sim.check_compatible(reference)?;
    let j = sim.joint_rot.len();
    if joint_weights.len() != j {
        return Err(Error::ShapeMismatch(format!(
            "{} joint weights for {j} joints",
            joint_weights.len()
        )));
    }
    if j == 0 {
        return Err(Error::ShapeMismatch("no joints".into()));
    }

    let mut pose_err = 0.0;
    let mut vel_err = 0.0;
    for i in 0..j {
        let d = quat_diff(
            &reference.joint_rot[i].to_quat(),
            &sim.joint_rot[i].to_quat(),
        );
        pose_err += joint_weights[i] * d.angle().powi(2);
        vel_err += joint_weights[i] * dist2(&reference.joint_vel[i], &sim.joint_vel[i]);
    }
    let pose = (-0.25 * pose_err).exp();
    let pose_vel = (-0.01 * vel_err).exp();

    let root_rot_err = quat_diff(&reference.root_rot.to_quat(), &sim.root_rot.to_quat())
        .angle()
        .powi(2);
    let root = (-5.0 * (dist2(&reference.root_pos, &sim.root_pos) + 0.1 * root_rot_err)).exp();
    let root_vel = (-(dist2(&reference.root_vel, &sim.root_vel)
        + 0.1 * dist2(&reference.root_angvel, &sim.root_angvel)))
    .exp();

    let key_err: f64 = reference
        .key_pos
        .iter()
        .zip(&sim.key_pos)
        .map(|(a, b)| dist2(a, b))
        .sum();
    let key = (-10.0 * key_err).exp();

    let contact = reference
        .contacts
        .iter()
        .zip(&sim.contacts)
        .map(|(&rc, &c)| rc * c - (1.0 - rc) * c)
        .sum::<f64>()
        / j as f64;

    let total = 0.5 * pose + 0.1 * pose_vel + 0.15 * root + 0.1 * root_vel + 0.15 * key + contact;
    Ok(RewardBreakdown {
        pose,
        pose_vel,
        root,
        root_vel,
        key,
        contact,
        total,
    })
}

/// True if any non-foot joint strays more than `threshold` from the reference.
pub fn pose_termination(
    sim: &CharacterState,
    reference: &CharacterState,
    skeleton: &Skeleton,
    threshold: f64,
) -> bool {
    let a = skeleton.forward_kinematics(sim.root_pos, &sim.root_rot, &sim.joint_rot);
    let b = skeleton.forward_kinematics(
        reference.root_pos,
        &reference.root_rot,
        &reference.joint_rot,
    );
    positions_terminate(&a, &b, skeleton, threshold)
}

/// Termination test on precomputed world joint positions.
pub fn positions_terminate(
    sim: &[[f64; 3]],
    reference: &[[f64; 3]],
    skeleton: &Skeleton,
    threshold: f64,
) -> bool {
    sim.iter()
        .zip(reference)
        .enumerate()
        .filter(|(i, _)| !skeleton.foot_joints.contains(i))
        .any(|(_, (a, b))| dist2(a, b).sqrt() > threshold)
}

/// Per-clip failure record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureStats {
    pub attempts: u64,
    pub failures: u64,
    /// Moving-average failure rate.
    pub rate: f64,
}

impl FailureStats {
    pub fn with_rate(rate: f64) -> Self {
        Self {
            attempts: 0,
            failures: 0,
            rate,
        }
    }

    /// Exact running mean for the first `FAILURE_HORIZON` attempts, then an
    /// exponential moving average with that horizon.
    pub fn record(&mut self, failed: bool) {
        self.attempts += 1;
        if failed {
            self.failures += 1;
        }
        let alpha = 1.0 / self.attempts.min(FAILURE_HORIZON) as f64;
        let x = if failed { 1.0 } else { 0.0 };
        self.rate += alpha * (x - self.rate);
    }

    pub fn weight(&self) -> f64 {
        self.rate.max(MIN_SAMPLE_WEIGHT)
    }
}

/// Normalized sampling probabilities, one per clip.
pub fn sampling_probabilities(stats: &[FailureStats]) -> Result<Vec<f64>> {
    if stats.is_empty() {
        return Err(Error::InvalidParameter("no clips to sample".into()));
    }
    if let Some(i) = stats.iter().position(|s| !s.rate.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let w: Vec<f64> = stats.iter().map(FailureStats::weight).collect();
    let sum: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / sum).collect())
}

/// `n` clip indices drawn with probability proportional to clip weight.
pub fn prioritized_sample<R: Rng + ?Sized>(
    stats: &[FailureStats],
    rng: &mut R,
    n: usize,
) -> Result<Vec<usize>> {
    sampling_probabilities(stats)?;
    let dist = WeightedIndex::new(stats.iter().map(FailureStats::weight))
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Mean Euclidean joint-position error over frames and joints.
pub fn joint_tracking_error(sim: &[Vec<[f64; 3]>], reference: &[Vec<[f64; 3]>]) -> Result<f64> {
    if sim.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} simulated frames vs {} reference frames",
            sim.len(),
            reference.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in sim.iter().zip(reference) {
        if a.len() != b.len() {
            return Err(Error::ShapeMismatch("joint counts differ".into()));
        }
        sum += a
            .iter()
            .zip(b)
            .map(|(p, q)| dist2(p, q).sqrt())
            .sum::<f64>();
        count += a.len();
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

/// Per-frame states with forward-difference velocities; the last frame
/// repeats the preceding velocity.
pub fn states_from_clip(clip: &MotionClip, skeleton: &Skeleton) -> Result<Vec<CharacterState>> {
    clip.validate(skeleton)?;
    let n = clip.len();
    let fps = clip.fps;
    let scale = |a: [f64; 3], b: [f64; 3]| {
        [
            (b[0] - a[0]) * fps,
            (b[1] - a[1]) * fps,
            (b[2] - a[2]) * fps,
        ]
    };
    let ang = |a: &ExpMap, b: &ExpMap| (quat_diff(&b.to_quat(), &a.to_quat()).vec() * fps).into();
    Ok((0..n)
        .map(|t| {
            let f = &clip.frames[t];
            let (a, b) = if n < 2 {
                (t, t)
            } else if t + 1 < n {
                (t, t + 1)
            } else {
                (t - 1, t)
            };
            let fa = &clip.frames[a];
            let fb = &clip.frames[b];
            CharacterState {
                root_pos: f.root_pos,
                root_rot: f.root_rot,
                root_vel: scale(fa.root_pos, fb.root_pos),
                root_angvel: ang(&fa.root_rot, &fb.root_rot),
                joint_rot: f.joint_rot.clone(),
                joint_vel: fa
                    .joint_rot
                    .iter()
                    .zip(&fb.joint_rot)
                    .map(|(x, y)| ang(x, y))
                    .collect(),
                key_pos: skeleton
                    .key_bodies
                    .iter()
                    .map(|&k| f.joint_pos[k])
                    .collect(),
                contacts: f
                    .contacts
                    .iter()
                    .map(|&c| if c >= CONTACT_THRESHOLD { 1.0 } else { 0.0 })
                    .collect(),
            }
        })
        .collect())
}
