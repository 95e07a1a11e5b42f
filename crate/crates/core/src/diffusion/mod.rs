//! Noise schedule, forward noising, x0-prediction DDIM sampling and blended
//! denoising. Motion windows are handled as flattened vectors in the frame
//! layout of [`MotionFrame::write_flat`].

mod denoiser;
mod generate;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use denoiser::{
    decode_record, encode_record, window_dim, ConstantDenoiser, Denoiser, DenoiserRecord,
    ExecDenoiser, LinearDenoiser, ReplayDenoiser, RECORD_HEADER,
};
pub use generate::{
    autoregressive_generate, diffusion_train_loss, generate_with_seeds, GeneratedClip, TrainFlags,
    TrainSample,
};

use crate::error::{Error, Result};
use crate::motion::{unflatten_frames, MotionFrame, PREV_FRAMES, WINDOW_FRAMES};
use crate::terrain::LocalHeightmap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub k: usize,
    /// `beta[i]` is the variance of step `i + 1`.
    pub beta: Vec<f64>,
    /// `alpha_bar[0] = 1`, `alpha_bar[k] = prod_{i<k} (1 - beta[i])`.
    pub alpha_bar: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA: [f64; 2] = [1e-4, 0.02];

pub fn make_schedule(k: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if k == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "schedule K={k}, beta {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..k)
        .map(|i| {
            if k == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (k - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(k + 1);
    alpha_bar.push(1.0);
    for b in &beta {
        let last = *alpha_bar.last().unwrap();
        alpha_bar.push(last * (1.0 - b));
    }
    Ok(NoiseSchedule { k, beta, alpha_bar })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA[0], DEFAULT_BETA[1]).unwrap()
    }
}

/// `x_k = sqrt(ab_k) x0 + sqrt(1 - ab_k) eps`.
pub fn q_sample(
    x0: &[f64],
    k: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if k > schedule.k {
        return Err(Error::OutOfBounds(format!(
            "step {k} beyond K={}",
            schedule.k
        )));
    }
    if k == 0 {
        return Ok(x0.to_vec());
    }
    let ab = schedule.alpha_bar[k];
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0
        .iter()
        .map(|x| {
            let e: f64 = rng.sample(StandardNormal);
            a * x + s * e
        })
        .collect())
}

/// Coefficients `(c_x0, c_xk)` of one DDIM step from `k` to `k - d`.
pub fn ddim_coefficients(k: usize, d: usize, schedule: &NoiseSchedule) -> Result<(f64, f64)> {
    if k == 0 || d == 0 || d > k || k > schedule.k {
        return Err(Error::InvalidParameter(format!(
            "DDIM step k={k}, d={d}, K={}",
            schedule.k
        )));
    }
    let (ak, an) = (schedule.alpha_bar[k], schedule.alpha_bar[k - d]);
    let ratio = (1.0 - an).sqrt() / (1.0 - ak).sqrt();
    Ok((an.sqrt() - ak.sqrt() * ratio, ratio))
}

pub fn ddim_step(
    x_k: &[f64],
    x0_hat: &[f64],
    k: usize,
    d: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if x_k.len() != x0_hat.len() {
        return Err(Error::ShapeMismatch(format!(
            "x_k {} vs x0 {}",
            x_k.len(),
            x0_hat.len()
        )));
    }
    let (a, b) = ddim_coefficients(k, d, schedule)?;
    Ok(x0_hat
        .iter()
        .zip(x_k)
        .map(|(x0, xk)| a * x0 + b * xk)
        .collect())
}

/// Everything a denoiser conditions on besides the noisy window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationContext {
    pub heightmap: LocalHeightmap,
    pub target_dir: [f64; 2],
    /// The two frames preceding the window, canonical to the window anchor.
    pub prev_frames: Option<Vec<MotionFrame>>,
    pub mask_prev: bool,
}

impl GenerationContext {
    pub fn masked(&self) -> Self {
        Self {
            mask_prev: true,
            ..self.clone()
        }
    }

    pub fn conditional(&self) -> Self {
        Self {
            mask_prev: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.target_dir.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter(
                "non-finite target direction".into(),
            ));
        }
        if let Some(p) = &self.prev_frames {
            if p.len() != PREV_FRAMES {
                return Err(Error::ShapeMismatch(format!("{} previous frames", p.len())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub blend_s: f64,
    pub ddim_stride: usize,
    pub batch: usize,
    pub max_seconds: f64,
    pub fps: f64,
    pub heightmap_extent: f64,
    /// Horizontal distance at which a waypoint counts as reached.
    pub reach_radius: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            blend_s: 0.65,
            ddim_stride: 5,
            batch: 32,
            max_seconds: 10.0,
            fps: crate::motion::DEFAULT_FPS,
            heightmap_extent: crate::terrain::DEFAULT_HEIGHTMAP_EXTENT,
            reach_radius: 0.5,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.blend_s) || self.ddim_stride == 0 || self.batch == 0 {
            return Err(Error::InvalidParameter(format!(
                "blend s={}, stride={}, batch={}",
                self.blend_s, self.ddim_stride, self.batch
            )));
        }
        if !(self.fps > 0.0) || !(self.max_seconds >= 0.0) || !(self.heightmap_extent > 0.0) {
            return Err(Error::InvalidParameter(
                "fps, max_seconds or heightmap extent".into(),
            ));
        }
        Ok(())
    }
}

fn checked_denoise(
    denoiser: &dyn Denoiser,
    k: usize,
    x_k: &[f64],
    ctx: &GenerationContext,
) -> Result<Vec<f64>> {
    let out = denoiser.denoise(k, x_k, ctx)?;
    if out.len() != x_k.len() {
        return Err(Error::Denoiser(format!(
            "returned {} values for {}",
            out.len(),
            x_k.len()
        )));
    }
    if let Some(index) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(out)
}

/// `s * G(masked) + (1 - s) * G(conditional)`.
pub fn blend_denoise(
    denoiser: &dyn Denoiser,
    k: usize,
    x_k: &[f64],
    ctx: &GenerationContext,
    s: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidParameter(format!("blend s={s}")));
    }
    let masked = checked_denoise(denoiser, k, x_k, &ctx.masked())?;
    if s == 1.0 {
        return Ok(masked);
    }
    if ctx.prev_frames.is_none() {
        return Err(Error::InvalidParameter(
            "conditional branch needs previous frames".into(),
        ));
    }
    let cond = checked_denoise(denoiser, k, x_k, &ctx.conditional())?;
    Ok(masked
        .iter()
        .zip(&cond)
        .map(|(m, c)| s * m + (1.0 - s) * c)
        .collect())
}

/// Samples one window. Without previous frames only the masked branch runs;
/// with them, output frames 0 and 1 are replaced by the previous frames.
pub fn ddim_sample(
    denoiser: &dyn Denoiser,
    ctx: &GenerationContext,
    schedule: &NoiseSchedule,
    config: &GenerationConfig,
    joints: usize,
    rng: &mut impl Rng,
) -> Result<Vec<MotionFrame>> {
    config.validate()?;
    ctx.validate()?;
    let dim = WINDOW_FRAMES * MotionFrame::flat_dim(joints);
    let mut x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let s = if ctx.prev_frames.is_some() {
        config.blend_s
    } else {
        1.0
    };
    let mut k = schedule.k;
    while k > 0 {
        let d = config.ddim_stride.min(k);
        let x0 = blend_denoise(denoiser, k, &x, ctx, s)?;
        x = ddim_step(&x, &x0, k, d, schedule)?;
        k -= d;
    }
    let mut frames = unflatten_frames(&x, joints)?;
    if let Some(prev) = &ctx.prev_frames {
        frames[..PREV_FRAMES].clone_from_slice(prev);
    }
    Ok(frames)
}
