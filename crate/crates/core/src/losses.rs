//! Motion quality losses: terrain penetration and contact, jerk, and the
//! reconstruction-style losses used to score denoiser predictions.
//!
//! All losses are sums over frames and points/joints, not means. Each loss that
//! the optimizer differentiates has a `*_terms` form returning per-point
//! gradients alongside the value.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{sample_surface_points, MotionClip, MotionFrame, Skeleton, SurfacePoints};
use crate::rotmath::{finite_diff, left_jacobian, quat_diff, v3, Vec3};
use crate::terrain::TerrainGrid;

/// Jerk threshold used for the high-jerk-frame metric, m/s³.
pub const METRIC_JERK_MAX: f64 = 11666.0;
/// Jerk threshold used inside kinematic optimization, m/s³.
pub const OPTIMIZE_JERK_MAX: f64 = 1000.0;
pub const INCOMPLETE_PENALTY: f64 = 1000.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub penetration: f64,
    pub contact: f64,
    pub jerk: f64,
    pub reconstruction: f64,
    pub velocity: f64,
    pub joint_consistency: f64,
    pub selection_score: f64,
}

/// Penetration of one frame's points and `d loss / d point`.
pub fn penetration_terms(points: &SurfacePoints, terrain: &TerrainGrid) -> (f64, Vec<Vec3>) {
    let mut loss = 0.0;
    let grads = points
        .points
        .iter()
        .map(|p| {
            let (d, g) = terrain.sd_grad(*p);
            if d < 0.0 {
                loss -= d;
                -v3(g)
            } else {
                Vec3::zeros()
            }
        })
        .collect();
    (loss, grads)
}

/// Contact loss of one frame and `d loss / d point`.
///
/// Each in-contact body adds the smallest `|sd|` over its points.
pub fn contact_terms(
    points: &SurfacePoints,
    frame: &MotionFrame,
    terrain: &TerrainGrid,
) -> (f64, Vec<Vec3>) {
    let mut grads = vec![Vec3::zeros(); points.points.len()];
    let mut loss = 0.0;
    let bodies = frame.contacts.len();
    let mut best: Vec<Option<(f64, usize, [f64; 3], f64)>> = vec![None; bodies];
    for (k, (p, &b)) in points.points.iter().zip(&points.body).enumerate() {
        if !frame.in_contact(b) {
            continue;
        }
        let (d, g) = terrain.sd_grad(*p);
        if best[b].is_none_or(|(a, ..)| d.abs() < a) {
            best[b] = Some((d.abs(), k, g, d));
        }
    }
    for (a, k, g, d) in best.into_iter().flatten() {
        loss += a;
        let s = if d < 0.0 { -1.0 } else { 1.0 };
        grads[k] = v3(g) * s;
    }
    (loss, grads)
}

pub fn penetration_loss(frames: &[MotionFrame], skeleton: &Skeleton, terrain: &TerrainGrid) -> f64 {
    frames
        .par_iter()
        .map(|f| {
            let pts = sample_surface_points(skeleton, f);
            pts.points
                .iter()
                .map(|p| (-terrain.sd(*p)).max(0.0))
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum()
}

pub fn contact_loss(frames: &[MotionFrame], skeleton: &Skeleton, terrain: &TerrainGrid) -> f64 {
    frames
        .par_iter()
        .map(|f| {
            let pts = sample_surface_points(skeleton, f);
            (0..f.contacts.len())
                .filter(|&b| f.in_contact(b))
                .map(|b| {
                    pts.by_body(b)
                        .map(|p| terrain.sd(*p).abs())
                        .fold(f64::INFINITY, f64::min)
                })
                .filter(|v| v.is_finite())
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum()
}

/// Jerk loss over joint position tracks and its gradient per frame and joint.
///
/// The last computable jerk stands in for the final three frames, so it
/// carries weight 4.
pub fn jerk_terms(
    joint_pos: &[Vec<Vec3>],
    fps: f64,
    jerk_max: f64,
) -> Result<(f64, Vec<Vec<Vec3>>)> {
    let n = joint_pos.len();
    if n < 4 {
        return Err(Error::InsufficientFrames { needed: 4, got: n });
    }
    let joints = joint_pos[0].len();
    let scale = fps.powi(3);
    let coeffs = [-1.0, 3.0, -3.0, 1.0];
    let mut grads = vec![vec![Vec3::zeros(); joints]; n];
    let mut loss = 0.0;
    for t in 0..=n - 4 {
        let weight = if t == n - 4 { 4.0 } else { 1.0 };
        for j in 0..joints {
            let jerk: Vec3 = (0..4)
                .map(|i| joint_pos[t + i][j] * coeffs[i])
                .sum::<Vec3>()
                * scale;
            let mag = jerk.norm();
            if mag > jerk_max {
                loss += weight * (mag - jerk_max);
                let dir = jerk / mag * (weight * scale);
                for i in 0..4 {
                    grads[t + i][j] += dir * coeffs[i];
                }
            }
        }
    }
    Ok((loss, grads))
}

pub fn jerk_loss(frames: &[MotionFrame], fps: f64, jerk_max: f64) -> Result<f64> {
    let tracks: Vec<Vec<Vec3>> = frames
        .iter()
        .map(|f| f.joint_pos.iter().map(|p| v3(*p)).collect())
        .collect();
    jerk_terms(&tracks, fps, jerk_max).map(|(l, _)| l)
}

/// Per-frame, per-joint jerk magnitudes from third forward differences
/// (length N, tail replicated).
pub fn jerk_magnitudes(frames: &[MotionFrame], fps: f64) -> Result<Vec<Vec<f64>>> {
    let seq: Vec<Vec<f64>> = frames.iter().map(|f| f.joint_pos.concat()).collect();
    let d = finite_diff(&seq, fps, 3)?;
    Ok(d.iter()
        .map(|row| {
            row.chunks(3)
                .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
                .collect()
        })
        .collect())
}

fn check_same_shape(pred: &[MotionFrame], target: &[MotionFrame]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted frames vs {} target frames",
            pred.len(),
            target.len()
        )));
    }
    for (a, b) in pred.iter().zip(target) {
        if a.joint_rot.len() != b.joint_rot.len()
            || a.joint_pos.len() != b.joint_pos.len()
            || a.contacts.len() != b.contacts.len()
        {
            return Err(Error::ShapeMismatch("joint counts differ".into()));
        }
    }
    Ok(())
}

fn sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Squared positional, geodesic rotational and contact error.
pub fn reconstruction_loss(pred: &[MotionFrame], target: &[MotionFrame]) -> Result<f64> {
    reconstruction_terms(pred, target).map(|(l, _)| l)
}

/// Reconstruction loss and its gradient with respect to the predicted frames,
/// in the flattened frame layout.
pub fn reconstruction_terms(
    pred: &[MotionFrame],
    target: &[MotionFrame],
) -> Result<(f64, Vec<f64>)> {
    check_same_shape(pred, target)?;
    let mut loss = 0.0;
    let mut grad = Vec::new();
    for (p, t) in pred.iter().zip(target) {
        let rot_term = |a: &crate::rotmath::ExpMap, b: &crate::rotmath::ExpMap| {
            let r = quat_diff(&a.to_quat(), &b.to_quat()).vec();
            let g = left_jacobian(&a.vec()).transpose() * r * 2.0;
            (r.norm_squared(), [g.x, g.y, g.z])
        };
        loss += sq(&p.root_pos, &t.root_pos);
        grad.extend((0..3).map(|k| 2.0 * (p.root_pos[k] - t.root_pos[k])));
        let (l, g) = rot_term(&p.root_rot, &t.root_rot);
        loss += l;
        grad.extend(g);
        for (a, b) in p.joint_rot.iter().zip(&t.joint_rot) {
            let (l, g) = rot_term(a, b);
            loss += l;
            grad.extend(g);
        }
        for (a, b) in p.joint_pos.iter().zip(&t.joint_pos) {
            loss += sq(a, b);
            grad.extend((0..3).map(|k| 2.0 * (a[k] - b[k])));
        }
        for (a, b) in p.contacts.iter().zip(&t.contacts) {
            loss += (a - b).powi(2);
            grad.push(2.0 * (a - b));
        }
    }
    Ok((loss, grad))
}

fn velocities(frames: &[MotionFrame], fps: f64) -> Vec<(Vec<Vec3>, Vec<Vec3>)> {
    frames
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0], &w[1]);
            let mut lin = vec![(v3(b.root_pos) - v3(a.root_pos)) * fps];
            lin.extend(
                a.joint_pos
                    .iter()
                    .zip(&b.joint_pos)
                    .map(|(p, q)| (v3(*q) - v3(*p)) * fps),
            );
            let ang_of = |x: &crate::rotmath::ExpMap, y: &crate::rotmath::ExpMap| {
                quat_diff(&y.to_quat(), &x.to_quat()).vec() * fps
            };
            let mut ang = vec![ang_of(&a.root_rot, &b.root_rot)];
            ang.extend(
                a.joint_rot
                    .iter()
                    .zip(&b.joint_rot)
                    .map(|(x, y)| ang_of(x, y)),
            );
            (lin, ang)
        })
        .collect()
}

/// Squared error of forward-difference linear and angular velocities.
pub fn velocity_loss(pred: &[MotionFrame], target: &[MotionFrame], fps: f64) -> Result<f64> {
    check_same_shape(pred, target)?;
    if pred.len() < 2 {
        return Err(Error::InsufficientFrames {
            needed: 2,
            got: pred.len(),
        });
    }
    let (vp, vt) = (velocities(pred, fps), velocities(target, fps));
    Ok(vp
        .iter()
        .zip(&vt)
        .map(|((lp, ap), (lt, at))| {
            lp.iter()
                .zip(lt)
                .map(|(a, b)| (a - b).norm_squared())
                .sum::<f64>()
                + ap.iter()
                    .zip(at)
                    .map(|(a, b)| (a - b).norm_squared())
                    .sum::<f64>()
        })
        .sum())
}

/// Squared distance between stored joint positions and forward kinematics.
pub fn joint_consistency_loss(pred: &[MotionFrame], skeleton: &Skeleton) -> f64 {
    pred.iter()
        .map(|f| {
            let fk = skeleton.forward_kinematics(f.root_pos, &f.root_rot, &f.joint_rot);
            fk.iter()
                .zip(&f.joint_pos)
                .map(|(a, b)| sq(a, b))
                .sum::<f64>()
        })
        .sum()
}

/// Penetration + contact + a fixed penalty when the clip did not reach the
/// end of its path.
pub fn selection_score(
    clip: &MotionClip,
    skeleton: &Skeleton,
    terrain: &TerrainGrid,
    reached_end: bool,
) -> f64 {
    let penalty = if reached_end { 0.0 } else { INCOMPLETE_PENALTY };
    penetration_loss(&clip.frames, skeleton, terrain)
        + contact_loss(&clip.frames, skeleton, terrain)
        + penalty
}

/// Index of the lowest selection score; ties go to the earliest clip.
pub fn select_best(
    clips: &[(MotionClip, bool)],
    skeleton: &Skeleton,
    terrain: &TerrainGrid,
) -> Option<(usize, f64)> {
    let scores: Vec<f64> = clips
        .par_iter()
        .map(|(c, reached)| selection_score(c, skeleton, terrain, *reached))
        .collect();
    scores
        .iter()
        .copied()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, s)| match acc {
            Some((_, b)) if b <= s => acc,
            _ => Some((i, s)),
        })
}

/// Evaluation metrics for one generated motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionMetrics {
    /// Horizontal distance from the last root position to the path end.
    pub fwd: f64,
    pub tpl: f64,
    pub tcl: f64,
    /// Percentage of frames with any joint jerk above the metric threshold.
    pub hjf_percent: f64,
    pub tpl_per_frame: f64,
    pub tcl_per_frame: f64,
}

pub fn motion_metrics(
    clip: &MotionClip,
    skeleton: &Skeleton,
    terrain: &TerrainGrid,
    path_end: [f64; 3],
    jerk_max: f64,
) -> Result<MotionMetrics> {
    let last = clip
        .frames
        .last()
        .ok_or(Error::InsufficientFrames { needed: 1, got: 0 })?;
    let fwd = (last.root_pos[0] - path_end[0]).hypot(last.root_pos[1] - path_end[1]);
    let tpl = penetration_loss(&clip.frames, skeleton, terrain);
    let tcl = contact_loss(&clip.frames, skeleton, terrain);
    let n = clip.frames.len() as f64;
    let hjf_percent = if clip.frames.len() >= 4 {
        let mags = jerk_magnitudes(&clip.frames, clip.fps)?;
        let computable = &mags[..mags.len() - 3];
        let high = computable
            .iter()
            .filter(|row| row.iter().any(|&m| m > jerk_max))
            .count();
        100.0 * high as f64 / computable.len() as f64
    } else {
        0.0
    };
    Ok(MotionMetrics {
        fwd,
        tpl,
        tcl,
        hjf_percent,
        tpl_per_frame: tpl / n,
        tcl_per_frame: tcl / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::synth::{walk_clip, WalkParams};
    use crate::rotmath::{ExpMap, LocalFrame, UnitQuaternion};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    fn skeleton() -> Skeleton {
        Skeleton::reference_humanoid_with_samples(16)
    }

    fn walk(sk: &Skeleton, frames: usize) -> MotionClip {
        walk_clip(
            sk,
            &WalkParams {
                frames,
                start: [2.0, 3.0],
                ..Default::default()
            },
        )
    }

    fn lift(frames: &mut [MotionFrame], dz: f64) {
        for f in frames {
            f.root_pos[2] += dz;
            f.joint_pos.iter_mut().for_each(|p| p[2] += dz);
        }
    }

    #[test]
    fn hovering_clip_has_no_penetration() {
        let sk = skeleton();
        let mut clip = walk(&sk, 20);
        lift(&mut clip.frames, 0.5);
        let t = TerrainGrid::flat(30, 30, 0.4, 0.0);
        assert_eq!(penetration_loss(&clip.frames, &sk, &t), 0.0);
    }

    #[test]
    fn single_point_penetration_depth() {
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
        let mut f = MotionFrame::rest(&sk, [1.2, 1.2, -0.15]);
        f.contacts = vec![0.0];
        let t = TerrainGrid::flat(6, 6, 0.4, 0.0);
        assert_abs_diff_eq!(penetration_loss(&[f], &sk, &t), 0.15, epsilon = 1e-8);
    }

    #[test]
    fn penetration_matches_brute_force_scan() {
        let sk = skeleton();
        let clip = walk(&sk, 12);
        let mut t = TerrainGrid::flat(30, 30, 0.4, 0.0);
        for (k, h) in t.heights.iter_mut().enumerate() {
            *h = ((k * 7919) % 13) as f64 * 0.05 - 0.2;
        }
        let brute: f64 = clip
            .frames
            .iter()
            .map(|f| {
                sample_surface_points(&sk, f)
                    .points
                    .iter()
                    .map(|p| (-crate::terrain::sd_terrain_brute(*p, &t)).max(0.0))
                    .sum::<f64>()
            })
            .sum();
        assert!(brute > 0.0);
        assert_abs_diff_eq!(
            penetration_loss(&clip.frames, &sk, &t),
            brute,
            epsilon = 1e-9
        );
    }

    #[test]
    fn contact_loss_cases() {
        let sk = skeleton();
        let t = TerrainGrid::flat(30, 30, 0.4, 0.0);
        let clip = walk(&sk, 10);
        // synthetic walk puts the stance sole exactly on the ground
        assert!(contact_loss(&clip.frames, &sk, &t) < 1e-12);
        let mut none = clip.clone();
        none.frames
            .iter_mut()
            .for_each(|f| f.contacts.iter_mut().for_each(|c| *c = 0.0));
        let mut lifted = none.clone();
        lift(&mut lifted.frames, 3.0);
        assert_eq!(contact_loss(&lifted.frames, &sk, &t), 0.0);
        let mut hover = clip.clone();
        lift(&mut hover.frames, 0.1);
        assert_abs_diff_eq!(
            contact_loss(&hover.frames, &sk, &t),
            0.1 * 10.0,
            epsilon = 1e-9
        );
    }

    /// Positions whose third forward differences are exactly `jerks`.
    fn integrate_jerk(jerks: &[f64], fps: f64) -> Vec<f64> {
        let mut p = vec![0.0; 3];
        for j in jerks {
            let n = p.len();
            p.push(j / fps.powi(3) + 3.0 * p[n - 1] - 3.0 * p[n - 2] + p[n - 3]);
        }
        p
    }

    fn single_joint_frames(xs: &[f64]) -> Vec<MotionFrame> {
        xs.iter()
            .map(|&x| MotionFrame {
                root_pos: [0.0; 3],
                root_rot: ExpMap::ZERO,
                joint_rot: vec![ExpMap::ZERO],
                joint_pos: vec![[x, 0.0, 0.0]],
                contacts: vec![0.0],
            })
            .collect()
    }

    #[test]
    fn jerk_loss_cases() {
        let fps = 30.0;
        let constant_velocity: Vec<f64> = (0..20).map(|i| 0.05 * i as f64).collect();
        assert_eq!(
            jerk_loss(&single_joint_frames(&constant_velocity), fps, 1000.0).unwrap(),
            0.0
        );
        let cubic: Vec<f64> = (0..20).map(|i| (i as f64 / fps).powi(3)).collect();
        assert_eq!(
            jerk_loss(&single_joint_frames(&cubic), fps, 1000.0).unwrap(),
            0.0
        );
        let mut jerks = vec![0.0; 12];
        jerks[5] = 1500.0;
        let spiked = integrate_jerk(&jerks, fps);
        let l = jerk_loss(&single_joint_frames(&spiked), fps, 1000.0).unwrap();
        assert_abs_diff_eq!(l, 500.0, epsilon = 1e-6);
        assert!(jerk_loss(&single_joint_frames(&[0.0; 3]), fps, 1.0).is_err());
    }

    #[test]
    fn jerk_terms_agree_with_finite_diff_route() {
        let sk = skeleton();
        let clip = walk(&sk, 16);
        let mags = jerk_magnitudes(&clip.frames, clip.fps).unwrap();
        let thr = 2.0;
        let expect: f64 = mags.iter().flatten().map(|m| (m - thr).max(0.0)).sum();
        assert_abs_diff_eq!(
            jerk_loss(&clip.frames, clip.fps, thr).unwrap(),
            expect,
            epsilon = 1e-6
        );
    }

    #[test]
    fn reconstruction_cases() {
        let sk = skeleton();
        let clip = walk(&sk, 4);
        let a = clip.frames.clone();
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);

        let mut b = a.clone();
        let theta = 0.4;
        let q = b[1].joint_rot[3].to_quat();
        let turned = UnitQuaternion::from_axis_angle(Vec3::new(1.0, 1.0, 0.0), theta).mul(&q);
        b[1].joint_rot[3] = ExpMap::from_quat(&turned);
        assert_abs_diff_eq!(
            reconstruction_loss(&b, &a).unwrap(),
            theta * theta,
            epsilon = 1e-12
        );

        let mut c = a[..1].to_vec();
        c[0].root_pos[0] += 0.1;
        c[0].joint_pos.iter_mut().for_each(|p| p[0] += 0.1);
        let j = sk.num_joints() as f64;
        assert_abs_diff_eq!(
            reconstruction_loss(&c, &a[..1]).unwrap(),
            (j + 1.0) * 0.01,
            epsilon = 1e-12
        );

        assert!(reconstruction_loss(&a[..2], &a[..3]).is_err());
    }

    #[test]
    fn reconstruction_is_symmetric() {
        let sk = skeleton();
        let a = walk(&sk, 6).frames;
        let b = walk_clip(
            &sk,
            &WalkParams {
                frames: 6,
                speed: 0.7,
                ..Default::default()
            },
        )
        .frames;
        assert_abs_diff_eq!(
            reconstruction_loss(&a, &b).unwrap(),
            reconstruction_loss(&b, &a).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn velocity_cases() {
        let sk = skeleton();
        let a = walk(&sk, 10).frames;
        assert_eq!(velocity_loss(&a, &a, 30.0).unwrap(), 0.0);
        let mut shifted = a.clone();
        lift(&mut shifted, 0.7);
        assert!(velocity_loss(&shifted, &a, 30.0).unwrap() < 1e-20);
        assert!(velocity_loss(&a[..1], &a[..1], 30.0).is_err());

        // root drifting 1 cm per frame against a static target
        let still: Vec<MotionFrame> = (0..10).map(|_| a[0].clone()).collect();
        let mut drift = still.clone();
        for (i, f) in drift.iter_mut().enumerate() {
            f.root_pos[0] += 0.01 * i as f64;
        }
        assert_abs_diff_eq!(
            velocity_loss(&drift, &still, 30.0).unwrap(),
            9.0 * 0.3 * 0.3,
            epsilon = 1e-9
        );
    }

    #[test]
    fn joint_consistency_cases() {
        let sk = skeleton();
        let mut frames = walk(&sk, 3).frames;
        assert!(joint_consistency_loss(&frames, &sk) < 1e-24);
        frames[1].joint_pos[4][2] += 0.2;
        assert_abs_diff_eq!(joint_consistency_loss(&frames, &sk), 0.04, epsilon = 1e-12);
        // rigid world transform of the whole frame
        let turn = LocalFrame::new([3.0, -1.0, 0.5], 1.1);
        let moved: Vec<MotionFrame> = frames.iter().map(|f| turn.frame_to_world(f)).collect();
        assert_abs_diff_eq!(joint_consistency_loss(&moved, &sk), 0.04, epsilon = 1e-9);
    }

    #[test]
    fn selection_score_cases() {
        let sk = skeleton();
        let t = TerrainGrid::flat(30, 30, 0.4, 0.0);
        let clip = walk(&sk, 10);
        assert!(selection_score(&clip, &sk, &t, true) < 1e-12);
        let diff = selection_score(&clip, &sk, &t, false) - selection_score(&clip, &sk, &t, true);
        assert_eq!(diff, 1000.0);
    }

    #[test]
    fn select_best_matches_exhaustive_scoring() {
        let sk = skeleton();
        let t = TerrainGrid::flat(30, 30, 0.4, 0.0);
        let base = walk(&sk, 8);
        let batch: Vec<(MotionClip, bool)> = (0..6)
            .map(|i| {
                let mut c = base.clone();
                lift(&mut c.frames, 0.03 * (i as f64 - 3.0));
                (c, i != 4)
            })
            .collect();
        let scores: Vec<f64> = batch
            .iter()
            .map(|(c, r)| selection_score(c, &sk, &t, *r))
            .collect();
        let mut best = 0;
        for i in 1..scores.len() {
            if scores[i] < scores[best] {
                best = i;
            }
        }
        assert_eq!(select_best(&batch, &sk, &t).unwrap().0, best);
    }

    #[test]
    fn losses_invariant_under_quarter_turns() {
        let sk = skeleton();
        let clip = walk(&sk, 8);
        let mut t = TerrainGrid::flat(20, 20, 0.4, 0.0);
        for (k, h) in t.heights.iter_mut().enumerate() {
            *h = ((k * 31) % 7) as f64 * 0.02;
        }
        // rotate terrain and clip by 90° about the world origin
        let n = t.rows;
        let mut rt = t.clone();
        rt.x0 = -t.y0 - (t.cols - 1) as f64 * t.dy;
        rt.y0 = t.x0;
        rt.rows = t.cols;
        rt.cols = n;
        for i in 0..rt.rows {
            for j in 0..rt.cols {
                rt.set_height(i, j, t.height(j, t.cols - 1 - i));
            }
        }
        let turn = LocalFrame::new([0.0; 3], FRAC_PI_2);
        let frames: Vec<MotionFrame> = clip.frames.iter().map(|f| turn.frame_to_world(f)).collect();
        assert_abs_diff_eq!(
            penetration_loss(&frames, &sk, &rt),
            penetration_loss(&clip.frames, &sk, &t),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(
            contact_loss(&frames, &sk, &rt),
            contact_loss(&clip.frames, &sk, &t),
            epsilon = 1e-9
        );
    }

    #[test]
    fn metrics_basics() {
        let sk = skeleton();
        let t = TerrainGrid::flat(30, 30, 0.4, 0.0);
        let clip = walk(&sk, 20);
        let end = clip.frames.last().unwrap().root_pos;
        let m = motion_metrics(&clip, &sk, &t, end, METRIC_JERK_MAX).unwrap();
        assert_eq!(m.fwd, 0.0);
        assert_eq!(m.hjf_percent, 0.0);
    }
}
