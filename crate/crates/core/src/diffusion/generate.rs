//! Autoregressive generation along a path and the composite training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ddim_sample, q_sample, Denoiser, GenerationConfig, GenerationContext, NoiseSchedule};
use crate::error::{Error, Result};
use crate::losses::{
    joint_consistency_loss, penetration_loss, reconstruction_loss, velocity_loss, LossBreakdown,
};
use crate::motion::{
    flatten_frames, unflatten_frames, MotionClip, MotionFrame, Skeleton, PREV_FRAMES, WINDOW_FRAMES,
};
use crate::navgraph::PathResult;
use crate::rotmath::LocalFrame;
use crate::terrain::{gen_random_boxes, sample_local_heightmap, RandomBoxesParams, TerrainGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedClip {
    pub clip: MotionClip,
    pub reached_end: bool,
    pub windows: usize,
}

fn local_target(anchor: &LocalFrame, goal: [f64; 3]) -> [f64; 2] {
    let d = anchor.dir_to_local([goal[0] - anchor.origin[0], goal[1] - anchor.origin[1]]);
    let n = d[0].hypot(d[1]);
    if n > 1e-12 {
        [d[0] / n, d[1] / n]
    } else {
        [1.0, 0.0]
    }
}

fn generate_one(
    denoiser: &dyn Denoiser,
    terrain: &TerrainGrid,
    path: &PathResult,
    skeleton: &Skeleton,
    schedule: &NoiseSchedule,
    config: &GenerationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedClip> {
    let wps = &path.waypoints;
    let mut idx = usize::from(wps.len() > 1);
    let start = wps[0].pos;
    let first = wps[idx].pos;
    let heading = if (first[0] - start[0]).hypot(first[1] - start[1]) > 0.0 {
        (first[1] - start[1]).atan2(first[0] - start[0])
    } else {
        0.0
    };
    let mut anchor = LocalFrame::new([start[0], start[1], 0.0], heading);
    let mut frames: Vec<MotionFrame> = Vec::new();
    let mut windows = 0;
    let reach = config.reach_radius;
    loop {
        let prev_frames = (frames.len() >= PREV_FRAMES).then(|| {
            frames[frames.len() - PREV_FRAMES..]
                .iter()
                .map(|f| anchor.frame_to_local(f))
                .collect()
        });
        let ctx = GenerationContext {
            heightmap: sample_local_heightmap(terrain, &anchor, config.heightmap_extent)?,
            target_dir: local_target(&anchor, wps[idx.min(wps.len() - 1)].pos),
            prev_frames,
            mask_prev: false,
        };
        let window = ddim_sample(denoiser, &ctx, schedule, config, skeleton.num_joints(), rng)?;
        windows += 1;
        let skip = if frames.is_empty() { 0 } else { PREV_FRAMES };
        for f in &window[skip..] {
            let w = anchor.frame_to_world(f);
            while idx < wps.len() {
                let p = wps[idx].pos;
                if (w.root_pos[0] - p[0]).hypot(w.root_pos[1] - p[1]) < reach {
                    idx += 1;
                } else {
                    break;
                }
            }
            frames.push(w);
        }
        if idx == wps.len() || frames.len() as f64 / config.fps >= config.max_seconds {
            break;
        }
        anchor = LocalFrame::from_frames(&frames, frames.len() - 1);
    }
    let mut clip = MotionClip::new(config.fps, frames);
    clip.skeleton_id = skeleton.id.clone();
    Ok(GeneratedClip {
        clip,
        reached_end: idx == wps.len(),
        windows,
    })
}

/// Generates `config.batch` clips along the path. Each batch element draws
/// its own seed from `rng` up front, so results do not depend on scheduling.
pub fn autoregressive_generate(
    denoiser: &dyn Denoiser,
    terrain: &TerrainGrid,
    path: &PathResult,
    skeleton: &Skeleton,
    schedule: &NoiseSchedule,
    config: &GenerationConfig,
    rng: &mut impl Rng,
) -> Result<Vec<GeneratedClip>> {
    let seeds: Vec<u64> = (0..config.batch).map(|_| rng.gen()).collect();
    generate_with_seeds(denoiser, terrain, path, skeleton, schedule, config, &seeds)
}

/// Generates one clip per seed; `config.batch` is ignored.
pub fn generate_with_seeds(
    denoiser: &dyn Denoiser,
    terrain: &TerrainGrid,
    path: &PathResult,
    skeleton: &Skeleton,
    schedule: &NoiseSchedule,
    config: &GenerationConfig,
    seeds: &[u64],
) -> Result<Vec<GeneratedClip>> {
    config.validate()?;
    if path.waypoints.is_empty() {
        return Err(Error::InvalidParameter("empty path".into()));
    }
    seeds
        .par_iter()
        .map(|&s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            generate_one(denoiser, terrain, path, skeleton, schedule, config, &mut r)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainFlags {
    pub terrain_only_prob: f64,
    pub mask_prob: f64,
}

impl Default for TrainFlags {
    fn default() -> Self {
        Self {
            terrain_only_prob: 0.10,
            mask_prob: 0.15,
        }
    }
}

/// A canonical training window with its context and the world placement
/// needed to evaluate penetration.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub window: Vec<MotionFrame>,
    pub context: GenerationContext,
    pub anchor: LocalFrame,
    pub terrain: TerrainGrid,
}

impl TrainSample {
    pub fn from_clip(
        clip: &MotionClip,
        start: usize,
        terrain: &TerrainGrid,
        extent: f64,
    ) -> Result<Self> {
        let window = clip.window(start)?;
        let anchor = LocalFrame::from_frames(&clip.frames[start..start + WINDOW_FRAMES], 1);
        let end = window[WINDOW_FRAMES - 1].root_pos;
        let n = end[0].hypot(end[1]);
        let target_dir = if n > 1e-12 {
            [end[0] / n, end[1] / n]
        } else {
            [1.0, 0.0]
        };
        Ok(Self {
            context: GenerationContext {
                heightmap: sample_local_heightmap(terrain, &anchor, extent)?,
                target_dir,
                prev_frames: Some(window[..PREV_FRAMES].to_vec()),
                mask_prev: false,
            },
            window,
            anchor,
            terrain: terrain.clone(),
        })
    }
}

fn centered_random_terrain(anchor: &LocalFrame, rng: &mut impl Rng) -> Result<TerrainGrid> {
    let mut t = gen_random_boxes(&RandomBoxesParams::default(), rng)?;
    t.x0 = anchor.origin[0] - 0.5 * (t.rows - 1) as f64 * t.dx;
    t.y0 = anchor.origin[1] - 0.5 * (t.cols - 1) as f64 * t.dy;
    Ok(t)
}

/// Batch-mean composite loss of a denoiser's clean-window predictions.
///
/// Per sample: with probability `terrain_only_prob` the window is placed on a
/// random box terrain and only penetration is scored; with probability
/// `mask_prob` the previous frames are masked; `k` is uniform in `1..=K`.
pub fn diffusion_train_loss(
    denoiser: &dyn Denoiser,
    batch: &[TrainSample],
    skeleton: &Skeleton,
    schedule: &NoiseSchedule,
    flags: &TrainFlags,
    fps: f64,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty training batch".into()));
    }
    let mut sum = LossBreakdown::default();
    for s in batch {
        let terrain_only = rng.gen::<f64>() < flags.terrain_only_prob;
        let mut ctx = s.context.clone();
        let random_terrain = if terrain_only {
            let t = centered_random_terrain(&s.anchor, rng)?;
            ctx.heightmap = sample_local_heightmap(&t, &s.anchor, ctx.heightmap.spacing * 31.0)?;
            Some(t)
        } else {
            None
        };
        ctx.mask_prev = rng.gen::<f64>() < flags.mask_prob;
        let k = rng.gen_range(1..=schedule.k);
        let x0 = flatten_frames(&s.window);
        let xk = q_sample(&x0, k, schedule, rng)?;
        let pred_flat = denoiser.denoise(k, &xk, &ctx)?;
        if pred_flat.len() != x0.len() {
            return Err(Error::Denoiser(format!(
                "returned {} values for {}",
                pred_flat.len(),
                x0.len()
            )));
        }
        let pred = unflatten_frames(&pred_flat, skeleton.num_joints())?;
        let world: Vec<MotionFrame> = pred.iter().map(|f| s.anchor.frame_to_world(f)).collect();
        match &random_terrain {
            Some(t) => sum.penetration += penetration_loss(&world, skeleton, t),
            None => {
                sum.reconstruction += reconstruction_loss(&pred, &s.window)?;
                sum.velocity += velocity_loss(&pred, &s.window, fps)?;
                sum.joint_consistency += joint_consistency_loss(&pred, skeleton);
                sum.penetration += penetration_loss(&world, skeleton, &s.terrain);
            }
        }
    }
    let n = batch.len() as f64;
    Ok(LossBreakdown {
        penetration: sum.penetration / n,
        reconstruction: sum.reconstruction / n,
        velocity: sum.velocity / n,
        joint_consistency: sum.joint_consistency / n,
        ..Default::default()
    })
}
