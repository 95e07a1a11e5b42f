//! Adam and kinematic motion correction.
//!
//! The optimization variables per frame are the root position, the root
//! rotation and the joint rotations (exp-maps), flattened as
//! `[root_pos 3, root_rot 3, joint_rot 3J]`. Joint positions are always
//! re-derived by forward kinematics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    contact_terms, jerk_terms, penetration_terms, LossBreakdown, OPTIMIZE_JERK_MAX,
};
use crate::motion::{surface_points_for_pose, MotionClip, MotionFrame, Pose, Skeleton};
use crate::rotmath::{left_jacobian, v3, ExpMap, Vec3};
use crate::terrain::TerrainGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Bias-corrected Adam update in place. A non-finite gradient leaves
    /// state and parameters untouched.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state {} vs params {} vs grad {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for k in 0..params.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn adam_step(state: &AdamState, params: &[f64], grad: &[f64]) -> Result<(AdamState, Vec<f64>)> {
    let mut s = state.clone();
    let mut p = params.to_vec();
    s.update(&mut p, grad)?;
    Ok((s, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_reg: f64,
    pub w_pen: f64,
    pub w_contact: f64,
    pub w_jerk: f64,
    pub jerk_max: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_reg: 1.0,
            w_pen: 1000.0,
            w_contact: 1000.0,
            w_jerk: 1000.0,
            jerk_max: OPTIMIZE_JERK_MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizationConfig {
    pub weights: LossWeights,
    pub iters: usize,
    pub lr: f64,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            iters: 3000,
            lr: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub loss_trace: Vec<f64>,
    #[serde(rename = "final")]
    pub final_breakdown: LossBreakdown,
    pub iterations_run: usize,
}

/// Unweighted loss terms at one configuration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub reg: f64,
    pub pen: f64,
    pub contact: f64,
    pub jerk: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.w_reg * self.reg + w.w_pen * self.pen + w.w_contact * self.contact + w.w_jerk * self.jerk
    }
}

/// Flattened optimization variables for a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionVars {
    pub frames: usize,
    pub joints: usize,
    pub data: Vec<f64>,
}

impl MotionVars {
    pub fn stride(joints: usize) -> usize {
        6 + 3 * joints
    }

    pub fn from_frames(frames: &[MotionFrame]) -> Self {
        let joints = frames.first().map_or(0, |f| f.joint_rot.len());
        let mut data = Vec::with_capacity(frames.len() * Self::stride(joints));
        for f in frames {
            data.extend(f.root_pos);
            data.extend(f.root_rot.0);
            for r in &f.joint_rot {
                data.extend(r.0);
            }
        }
        Self {
            frames: frames.len(),
            joints,
            data,
        }
    }

    fn frame_slice(&self, t: usize) -> &[f64] {
        let s = Self::stride(self.joints);
        &self.data[t * s..(t + 1) * s]
    }

    fn root_pos(&self, t: usize) -> [f64; 3] {
        let f = self.frame_slice(t);
        [f[0], f[1], f[2]]
    }

    fn root_rot(&self, t: usize) -> ExpMap {
        let f = self.frame_slice(t);
        ExpMap([f[3], f[4], f[5]])
    }

    fn joint_rot(&self, t: usize) -> Vec<ExpMap> {
        self.frame_slice(t)[6..]
            .chunks(3)
            .map(|c| ExpMap([c[0], c[1], c[2]]))
            .collect()
    }

    pub fn pose(&self, skeleton: &Skeleton, t: usize) -> Pose {
        skeleton.pose(self.root_pos(t), &self.root_rot(t), &self.joint_rot(t))
    }

    /// Frames with joint positions from forward kinematics and contacts
    /// copied from `source`.
    pub fn to_frames(&self, skeleton: &Skeleton, source: &[MotionFrame]) -> Vec<MotionFrame> {
        (0..self.frames)
            .map(|t| {
                let joint_rot: Vec<ExpMap> =
                    self.joint_rot(t).iter().map(|r| ExpMap::new(r.0)).collect();
                let root_rot = ExpMap::new(self.root_rot(t).0);
                let joint_pos =
                    skeleton.forward_kinematics(self.root_pos(t), &root_rot, &joint_rot);
                MotionFrame {
                    root_pos: self.root_pos(t),
                    root_rot,
                    joint_rot,
                    joint_pos,
                    contacts: source[t].contacts.clone(),
                }
            })
            .collect()
    }
}

/// Pulls per-point and per-joint-position gradients of one frame back to its
/// variables, writing into `out` (one frame stride).
fn backprop_frame(
    skeleton: &Skeleton,
    vars: &MotionVars,
    t: usize,
    pose: &Pose,
    point_body: &[usize],
    points: &[[f64; 3]],
    point_grads: &[Vec3],
    joint_grads: &[Vec3],
    out: &mut [f64],
) {
    let j = skeleton.num_joints();
    let mut force = vec![Vec3::zeros(); j];
    let mut torque = vec![Vec3::zeros(); j];
    for ((p, &b), g) in points.iter().zip(point_body).zip(point_grads) {
        force[b] += g;
        torque[b] += (v3(*p) - pose.pos[b]).cross(g);
    }
    for (b, g) in joint_grads.iter().enumerate() {
        force[b] += g;
    }
    let root_pos = v3(vars.root_pos(t));
    let root_rot = vars.root_rot(t);
    let root_r = root_rot.to_quat().to_matrix();
    let joint_rot = vars.joint_rot(t);
    let mut root_force = Vec3::zeros();
    let mut root_torque = Vec3::zeros();
    for &i in skeleton.eval_order().iter().rev() {
        let (parent_rot, parent_pos) = match skeleton.parent[i] {
            -1 => (root_r, root_pos),
            p => (pose.rot[p as usize], pose.pos[p as usize]),
        };
        let g = left_jacobian(&joint_rot[i].vec()).transpose() * parent_rot.transpose() * torque[i];
        out[6 + 3 * i..9 + 3 * i].copy_from_slice(g.as_slice());
        let carried = torque[i] + (pose.pos[i] - parent_pos).cross(&force[i]);
        match skeleton.parent[i] {
            -1 => {
                root_force += force[i];
                root_torque += carried;
            }
            p => {
                let p = p as usize;
                let f = force[i];
                force[p] += f;
                torque[p] += carried;
            }
        }
    }
    out[..3].copy_from_slice(root_force.as_slice());
    let g = left_jacobian(&root_rot.vec()).transpose() * root_torque;
    out[3..6].copy_from_slice(g.as_slice());
}

fn check_inputs(vars: &MotionVars, skeleton: &Skeleton, source: &[MotionFrame]) -> Result<()> {
    if vars.joints != skeleton.num_joints() || vars.frames != source.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} frames x {} joints vs source {} frames, skeleton {} joints",
            vars.frames,
            vars.joints,
            source.len(),
            skeleton.num_joints()
        )));
    }
    if vars.frames < 4 {
        return Err(Error::InsufficientFrames {
            needed: 4,
            got: vars.frames,
        });
    }
    Ok(())
}

/// Loss terms and, optionally, the gradient of the weighted total.
fn evaluate(
    vars: &MotionVars,
    skeleton: &Skeleton,
    terrain: &TerrainGrid,
    source: &[MotionFrame],
    weights: &LossWeights,
    fps: f64,
    want_grad: bool,
) -> Result<(LossParts, Vec<f64>)> {
    check_inputs(vars, skeleton, source)?;
    let stride = MotionVars::stride(vars.joints);
    let src = MotionVars::from_frames(source);
    let poses: Vec<Pose> = (0..vars.frames)
        .into_par_iter()
        .map(|t| vars.pose(skeleton, t))
        .collect();
    let joint_pos: Vec<Vec<Vec3>> = poses.iter().map(|p| p.pos.clone()).collect();
    let (jerk, jerk_grads) = jerk_terms(&joint_pos, fps, weights.jerk_max)?;

    let per_frame: Vec<(f64, f64, Vec<f64>)> = (0..vars.frames)
        .into_par_iter()
        .map(|t| {
            let pts = surface_points_for_pose(skeleton, &poses[t]);
            let (pen, gp) = penetration_terms(&pts, terrain);
            let (con, gc) = contact_terms(&pts, &source[t], terrain);
            let mut out = vec![0.0; stride];
            if want_grad {
                let point_grads: Vec<Vec3> = gp
                    .iter()
                    .zip(&gc)
                    .map(|(a, b)| a * weights.w_pen + b * weights.w_contact)
                    .collect();
                let joint_grads: Vec<Vec3> =
                    jerk_grads[t].iter().map(|g| g * weights.w_jerk).collect();
                backprop_frame(
                    skeleton,
                    vars,
                    t,
                    &poses[t],
                    &pts.body,
                    &pts.points,
                    &point_grads,
                    &joint_grads,
                    &mut out,
                );
            }
            (pen, con, out)
        })
        .collect();

    let mut parts = LossParts {
        jerk,
        ..Default::default()
    };
    let mut grad = Vec::with_capacity(if want_grad { vars.data.len() } else { 0 });
    for (pen, con, g) in per_frame {
        parts.pen += pen;
        parts.contact += con;
        if want_grad {
            grad.extend(g);
        }
    }
    for (k, (a, b)) in vars.data.iter().zip(&src.data).enumerate() {
        let d = a - b;
        parts.reg += d * d;
        if want_grad {
            grad[k] += 2.0 * weights.w_reg * d;
        }
    }
    Ok((parts, grad))
}

pub fn loss_value(
    vars: &MotionVars,
    skeleton: &Skeleton,
    terrain: &TerrainGrid,
    source: &[MotionFrame],
    weights: &LossWeights,
    fps: f64,
) -> Result<LossParts> {
    evaluate(vars, skeleton, terrain, source, weights, fps, false).map(|(p, _)| p)
}

/// Weighted total loss and its analytic gradient with respect to `vars.data`.
pub fn loss_gradient(
    vars: &MotionVars,
    skeleton: &Skeleton,
    terrain: &TerrainGrid,
    source: &[MotionFrame],
    weights: &LossWeights,
    fps: f64,
) -> Result<(f64, Vec<f64>)> {
    let (parts, grad) = evaluate(vars, skeleton, terrain, source, weights, fps, true)?;
    Ok((parts.total(weights), grad))
}

/// Central-difference gradient of the weighted total, for verification.
pub fn finite_difference_gradient(
    vars: &MotionVars,
    skeleton: &Skeleton,
    terrain: &TerrainGrid,
    source: &[MotionFrame],
    weights: &LossWeights,
    fps: f64,
    h: f64,
) -> Result<Vec<f64>> {
    check_inputs(vars, skeleton, source)?;
    (0..vars.data.len())
        .into_par_iter()
        .map(|k| {
            let mut v = vars.clone();
            v.data[k] += h;
            let up = loss_value(&v, skeleton, terrain, source, weights, fps)?.total(weights);
            v.data[k] -= 2.0 * h;
            let down = loss_value(&v, skeleton, terrain, source, weights, fps)?.total(weights);
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

fn breakdown(parts: &LossParts) -> LossBreakdown {
    LossBreakdown {
        penetration: parts.pen,
        contact: parts.contact,
        jerk: parts.jerk,
        ..Default::default()
    }
}

/// Runs Adam on the clip's root and joint rotations and returns the
/// corrected clip with joint positions rewritten by forward kinematics.
pub fn optimize_motion(
    clip: &MotionClip,
    skeleton: &Skeleton,
    terrain: &TerrainGrid,
    config: &OptimizationConfig,
) -> Result<(MotionClip, OptimizationReport)> {
    clip.validate(skeleton)?;
    let source = &clip.frames;
    let w = &config.weights;
    let mut vars = MotionVars::from_frames(source);
    let mut adam = AdamState::new(vars.data.len(), config.lr);
    let mut trace = Vec::with_capacity(config.iters + 1);
    for _ in 0..config.iters {
        let (total, grad) = loss_gradient(&vars, skeleton, terrain, source, w, clip.fps)?;
        if !total.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
        trace.push(total);
        adam.update(&mut vars.data, &grad)?;
    }
    let parts = loss_value(&vars, skeleton, terrain, source, w, clip.fps)?;
    let total = parts.total(w);
    if !total.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    trace.push(total);
    let mut out = clip.clone();
    out.frames = vars.to_frames(skeleton, source);
    Ok((
        out,
        OptimizationReport {
            loss_trace: trace,
            final_breakdown: breakdown(&parts),
            iterations_run: config.iters,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{contact_loss, jerk_loss, penetration_loss};
    use crate::motion::synth::{walk_clip, WalkParams};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_skeleton() -> Skeleton {
        Skeleton::reference_humanoid_with_samples(6)
    }

    #[test]
    fn adam_zero_gradient() {
        let s = AdamState::new(3, 0.001);
        let (s2, p) = adam_step(&s, &[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
        assert_eq!(s2.step, 1);
        assert!(s2.m.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn adam_first_step_closed_form() {
        let s = AdamState::new(2, 0.001);
        let g = [0.3, -2.0];
        let (_, p) = adam_step(&s, &[0.0, 0.0], &g).unwrap();
        for k in 0..2 {
            let expect = -0.001 * g[k] / (g[k].abs() + 1e-8);
            assert_abs_diff_eq!(p[k], expect, epsilon = 1e-15);
        }
    }

    #[test]
    fn adam_constant_gradient_descends_by_lr() {
        let mut s = AdamState::new(1, 0.001);
        let mut p = [0.0];
        let mut prev = 0.0;
        for _ in 0..100 {
            s.update(&mut p, &[1.0]).unwrap();
            let step = prev - p[0];
            assert!(step > 0.0);
            assert_abs_diff_eq!(step, 0.001, epsilon = 1e-6);
            prev = p[0];
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut s = AdamState::new(3, 0.001);
        let mut p = [0.0; 3];
        match s.update(&mut p, &[0.0, f64::NAN, 1.0]) {
            Err(Error::NonFinite { index }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.step, 0);
        assert!(s.update(&mut p, &[0.0; 2]).is_err());
    }

    #[test]
    fn feasible_source_has_zero_gradient() {
        let sk = small_skeleton();
        let mut clip = walk_clip(
            &sk,
            &WalkParams {
                frames: 8,
                start: [2.0, 2.0],
                ..Default::default()
            },
        );
        clip.frames
            .iter_mut()
            .for_each(|f| f.contacts.iter_mut().for_each(|c| *c = 0.0));
        for f in &mut clip.frames {
            f.root_pos[2] += 0.5;
            f.joint_pos.iter_mut().for_each(|p| p[2] += 0.5);
        }
        let t = TerrainGrid::flat(20, 20, 0.4, 0.0);
        let vars = MotionVars::from_frames(&clip.frames);
        let (total, g) =
            loss_gradient(&vars, &sk, &t, &clip.frames, &LossWeights::default(), 30.0).unwrap();
        assert_eq!(total, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_penetrating_point_root_gradient() {
        let sk = Skeleton::new(
            "dot",
            vec!["p".into()],
            vec![-1],
            vec![[0.0; 3]],
            vec![Some(crate::motion::Capsule {
                a: [0.0; 3],
                b: [0.0; 3],
                radius: 1e-9,
            })],
            vec![1],
            vec![],
            vec![],
        )
        .unwrap();
        let frames: Vec<MotionFrame> = (0..4)
            .map(|_| {
                let mut f = MotionFrame::rest(&sk, [1.2, 1.2, -0.05]);
                f.contacts = vec![0.0];
                f
            })
            .collect();
        let t = TerrainGrid::flat(6, 6, 0.4, 0.0);
        let vars = MotionVars::from_frames(&frames);
        let w = LossWeights {
            w_reg: 0.0,
            w_contact: 0.0,
            w_jerk: 0.0,
            ..Default::default()
        };
        let (_, g) = loss_gradient(&vars, &sk, &t, &frames, &w, 30.0).unwrap();
        for t in 0..4 {
            let s = MotionVars::stride(1);
            assert_abs_diff_eq!(g[t * s + 2], -1000.0, epsilon = 1e-9);
            assert_abs_diff_eq!(g[t * s], 0.0, epsilon = 1e-9);
        }
    }

    fn perturbed(frames: &[MotionFrame], rng: &mut ChaCha8Rng, scale: f64) -> MotionVars {
        let mut v = MotionVars::from_frames(frames);
        for x in &mut v.data {
            *x += rng.gen_range(-scale..scale);
        }
        v
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let den = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let sk = small_skeleton();
        let clip = walk_clip(
            &sk,
            &WalkParams {
                frames: 6,
                start: [2.0, 2.0],
                ..Default::default()
            },
        );
        let mut t = TerrainGrid::flat(16, 16, 0.4, 0.0);
        for (k, h) in t.heights.iter_mut().enumerate() {
            *h = ((k * 13) % 5) as f64 * 0.03;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = LossWeights {
            jerk_max: 5.0,
            ..Default::default()
        };
        for _ in 0..3 {
            let mut v = perturbed(&clip.frames, &mut rng, 0.05);
            for f in 0..v.frames {
                v.data[f * MotionVars::stride(v.joints) + 2] -= 0.04;
            }
            let (_, a) = loss_gradient(&v, &sk, &t, &clip.frames, &w, 30.0).unwrap();
            let fd = finite_difference_gradient(&v, &sk, &t, &clip.frames, &w, 30.0, 1e-6).unwrap();
            let e = rel_err(&a, &fd);
            assert!(e < 1e-4, "relative error {e}");
        }
    }

    #[test]
    fn regularization_only_keeps_source() {
        let sk = small_skeleton();
        let clip = walk_clip(
            &sk,
            &WalkParams {
                frames: 5,
                ..Default::default()
            },
        );
        let t = TerrainGrid::flat(20, 20, 0.4, 0.0);
        let cfg = OptimizationConfig {
            weights: LossWeights {
                w_pen: 0.0,
                w_contact: 0.0,
                w_jerk: 0.0,
                ..Default::default()
            },
            iters: 50,
            lr: 0.001,
        };
        let (out, rep) = optimize_motion(&clip, &sk, &t, &cfg).unwrap();
        assert_eq!(rep.loss_trace.len(), 51);
        assert_eq!(rep.loss_trace[0], 0.0);
        let a = MotionVars::from_frames(&out.frames);
        let b = MotionVars::from_frames(&clip.frames);
        let d: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-6);
    }

    #[test]
    fn sunken_foot_is_lifted() {
        let sk = small_skeleton();
        let mut clip = walk_clip(
            &sk,
            &WalkParams {
                frames: 6,
                start: [2.0, 2.0],
                ..Default::default()
            },
        );
        for f in &mut clip.frames {
            f.root_pos[2] -= 0.05;
            f.joint_pos.iter_mut().for_each(|p| p[2] -= 0.05);
        }
        let t = TerrainGrid::flat(20, 20, 0.4, 0.0);
        let before = penetration_loss(&clip.frames, &sk, &t);
        assert!(before > 0.05);
        let (out, rep) = optimize_motion(&clip, &sk, &t, &OptimizationConfig::default()).unwrap();
        assert!(rep.loss_trace.last().unwrap() < &rep.loss_trace[0]);
        assert!(penetration_loss(&out.frames, &sk, &t) < 1e-3);
        assert!(contact_loss(&out.frames, &sk, &t) < 1e-2);
        assert!(jerk_loss(&out.frames, 30.0, 1000.0).unwrap() < 1e-6);
        assert!(joint_consistency(&out, &sk) < 1e-20);
    }

    fn joint_consistency(clip: &MotionClip, sk: &Skeleton) -> f64 {
        crate::losses::joint_consistency_loss(&clip.frames, sk)
    }

    #[test]
    fn too_short_clip_is_rejected() {
        let sk = small_skeleton();
        let clip = walk_clip(
            &sk,
            &WalkParams {
                frames: 3,
                ..Default::default()
            },
        );
        let t = TerrainGrid::flat(4, 4, 0.4, 0.0);
        assert!(optimize_motion(&clip, &sk, &t, &OptimizationConfig::default()).is_err());
    }
}
