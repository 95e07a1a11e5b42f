//! Denoiser implementations and the binary record used to talk to external
//! denoiser processes.
//!
//! Record layout, little-endian f64 values:
//!
//! | offset (bytes) | field |
//! |---|---|
//! | 0 | k |
//! | 8 | mask_prev (0 or 1) |
//! | 16 | has_prev (0 or 1) |
//! | 24 | frame_dim F |
//! | 32 | frames N |
//! | 40 | target_dir (2) |
//! | 56 | heightmap (31 x 31, row-major) |
//! | 7744 | prev_frames (2F, zeros when absent) |
//! | 7744 + 16F | x (N F) |
//!
//! A response has the same layout with the clean-window prediction in `x`.

use std::process::Command;

use super::{GenerationContext, NoiseSchedule};
use crate::error::{Error, Result};
use crate::motion::{flatten_frames, MotionClip, MotionFrame, PREV_FRAMES, WINDOW_FRAMES};
use crate::terrain::HEIGHTMAP_SIZE;

/// Predicts the clean window from a noisy one.
pub trait Denoiser: Send + Sync {
    fn denoise(&self, k: usize, x_k: &[f64], ctx: &GenerationContext) -> Result<Vec<f64>>;
}

/// Always predicts the same window.
#[derive(Debug, Clone)]
pub struct ConstantDenoiser {
    pub x0: Vec<f64>,
}

impl ConstantDenoiser {
    pub fn new(x0: Vec<f64>) -> Self {
        Self { x0 }
    }
}

impl Denoiser for ConstantDenoiser {
    fn denoise(&self, _k: usize, x_k: &[f64], _ctx: &GenerationContext) -> Result<Vec<f64>> {
        if x_k.len() != self.x0.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} vs {}",
                x_k.len(),
                self.x0.len()
            )));
        }
        Ok(self.x0.clone())
    }
}

/// Returns the recorded window that best matches the context.
///
/// With unmasked previous frames, the window whose first two frames are
/// nearest to them wins. Otherwise the window whose root displacement points
/// most along the target direction wins. Ties go to the earliest window.
#[derive(Debug, Clone)]
pub struct ReplayDenoiser {
    windows: Vec<Vec<f64>>,
    heads: Vec<Vec<f64>>,
    dirs: Vec<[f64; 2]>,
}

impl ReplayDenoiser {
    pub fn from_clips(clips: &[MotionClip]) -> Result<Self> {
        let (mut windows, mut heads, mut dirs) = (Vec::new(), Vec::new(), Vec::new());
        for clip in clips {
            for start in 0..=clip.len().saturating_sub(WINDOW_FRAMES) {
                let Ok(w) = clip.window(start) else { break };
                let (a, b) = (w[1].root_pos, w[WINDOW_FRAMES - 1].root_pos);
                let d = [b[0] - a[0], b[1] - a[1]];
                let n = d[0].hypot(d[1]);
                dirs.push(if n > 0.0 {
                    [d[0] / n, d[1] / n]
                } else {
                    [0.0, 0.0]
                });
                heads.push(flatten_frames(&w[..PREV_FRAMES]));
                windows.push(flatten_frames(&w));
            }
        }
        if windows.is_empty() {
            return Err(Error::InsufficientFrames {
                needed: WINDOW_FRAMES,
                got: 0,
            });
        }
        Ok(Self {
            windows,
            heads,
            dirs,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    fn pick(&self, ctx: &GenerationContext) -> usize {
        let mut best = 0;
        match ctx.prev_frames.as_ref().filter(|_| !ctx.mask_prev) {
            Some(prev) => {
                let key = flatten_frames(prev);
                let mut best_d = f64::INFINITY;
                for (i, h) in self.heads.iter().enumerate() {
                    let d: f64 = h.iter().zip(&key).map(|(a, b)| (a - b).powi(2)).sum();
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
            }
            None => {
                let t = ctx.target_dir;
                let mut best_c = f64::NEG_INFINITY;
                for (i, d) in self.dirs.iter().enumerate() {
                    let c = d[0] * t[0] + d[1] * t[1];
                    if c > best_c {
                        best_c = c;
                        best = i;
                    }
                }
            }
        }
        best
    }
}

impl Denoiser for ReplayDenoiser {
    fn denoise(&self, _k: usize, x_k: &[f64], ctx: &GenerationContext) -> Result<Vec<f64>> {
        let w = &self.windows[self.pick(ctx)];
        if w.len() != x_k.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} vs {}",
                x_k.len(),
                w.len()
            )));
        }
        Ok(w.clone())
    }
}

/// Per-dimension Gaussian posterior mean fit to a set of windows, with a ridge
/// term `lambda / n` added to the noise variance.
#[derive(Debug, Clone)]
pub struct LinearDenoiser {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub n: usize,
    pub lambda: f64,
    pub alpha_bar: Vec<f64>,
}

impl LinearDenoiser {
    pub fn fit(windows: &[Vec<f64>], schedule: &NoiseSchedule, lambda: f64) -> Result<Self> {
        let n = windows.len();
        let dim = windows.first().map_or(0, |w| w.len());
        if n == 0 || windows.iter().any(|w| w.len() != dim) {
            return Err(Error::ShapeMismatch(
                "empty or ragged training windows".into(),
            ));
        }
        let mut mean = vec![0.0; dim];
        for w in windows {
            mean.iter_mut().zip(w).for_each(|(m, x)| *m += x / n as f64);
        }
        let mut var = vec![0.0; dim];
        for w in windows {
            var.iter_mut()
                .zip(w.iter().zip(&mean))
                .for_each(|(v, (x, m))| *v += (x - m).powi(2) / n as f64);
        }
        Ok(Self {
            mean,
            var,
            n,
            lambda,
            alpha_bar: schedule.alpha_bar.clone(),
        })
    }
}

impl Denoiser for LinearDenoiser {
    fn denoise(&self, k: usize, x_k: &[f64], ctx: &GenerationContext) -> Result<Vec<f64>> {
        if x_k.len() != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} vs {}",
                x_k.len(),
                self.mean.len()
            )));
        }
        let ab = *self
            .alpha_bar
            .get(k)
            .ok_or_else(|| Error::OutOfBounds(format!("step {k}")))?;
        let sa = ab.sqrt();
        let reg = self.lambda / self.n as f64;
        let mut out: Vec<f64> = x_k
            .iter()
            .zip(self.mean.iter().zip(&self.var))
            .map(|(x, (m, v))| {
                let den = ab * v + (1.0 - ab) + reg;
                let w = if den > 0.0 { sa * v / den } else { 0.0 };
                m + w * (x - sa * m)
            })
            .collect();
        if let Some(prev) = ctx.prev_frames.as_ref().filter(|_| !ctx.mask_prev) {
            let head = flatten_frames(prev);
            out[..head.len()].copy_from_slice(&head);
        }
        Ok(out)
    }
}

pub const RECORD_HEADER: usize = 7 + HEIGHTMAP_SIZE * HEIGHTMAP_SIZE;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserRecord {
    pub k: usize,
    pub mask_prev: bool,
    pub has_prev: bool,
    pub frame_dim: usize,
    pub frames: usize,
    pub target_dir: [f64; 2],
    pub heightmap: Vec<f64>,
    pub prev: Vec<f64>,
    pub x: Vec<f64>,
}

impl DenoiserRecord {
    pub fn from_request(k: usize, x_k: &[f64], ctx: &GenerationContext) -> Result<Self> {
        if !x_k.len().is_multiple_of(WINDOW_FRAMES) {
            return Err(Error::ShapeMismatch(format!(
                "window of {} values",
                x_k.len()
            )));
        }
        let frame_dim = x_k.len() / WINDOW_FRAMES;
        let prev = match &ctx.prev_frames {
            Some(p) => flatten_frames(p),
            None => vec![0.0; PREV_FRAMES * frame_dim],
        };
        if prev.len() != PREV_FRAMES * frame_dim {
            return Err(Error::ShapeMismatch(
                "previous frames do not match window".into(),
            ));
        }
        Ok(Self {
            k,
            mask_prev: ctx.mask_prev,
            has_prev: ctx.prev_frames.is_some(),
            frame_dim,
            frames: WINDOW_FRAMES,
            target_dir: ctx.target_dir,
            heightmap: ctx.heightmap.values.clone(),
            prev,
            x: x_k.to_vec(),
        })
    }
}

pub fn encode_record(r: &DenoiserRecord) -> Vec<u8> {
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let mut vals = vec![
        r.k as f64,
        flag(r.mask_prev),
        flag(r.has_prev),
        r.frame_dim as f64,
        r.frames as f64,
        r.target_dir[0],
        r.target_dir[1],
    ];
    vals.extend(&r.heightmap);
    vals.extend(&r.prev);
    vals.extend(&r.x);
    vals.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_record(bytes: &[u8]) -> Result<DenoiserRecord> {
    if !bytes.len().is_multiple_of(8) || bytes.len() < RECORD_HEADER * 8 {
        return Err(Error::Denoiser(format!("record of {} bytes", bytes.len())));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let count = |v: f64, what: &str| {
        if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
            Ok(v as usize)
        } else {
            Err(Error::Denoiser(format!("bad {what} field {v}")))
        }
    };
    let frame_dim = count(vals[3], "frame_dim")?;
    let frames = count(vals[4], "frames")?;
    let expect = RECORD_HEADER + PREV_FRAMES * frame_dim + frames * frame_dim;
    if vals.len() != expect {
        return Err(Error::Denoiser(format!(
            "record holds {} values, layout needs {expect}",
            vals.len()
        )));
    }
    let hm_end = RECORD_HEADER;
    let prev_end = hm_end + PREV_FRAMES * frame_dim;
    Ok(DenoiserRecord {
        k: count(vals[0], "k")?,
        mask_prev: vals[1] != 0.0,
        has_prev: vals[2] != 0.0,
        frame_dim,
        frames,
        target_dir: [vals[5], vals[6]],
        heightmap: vals[7..hm_end].to_vec(),
        prev: vals[hm_end..prev_end].to_vec(),
        x: vals[prev_end..].to_vec(),
    })
}

/// Runs `sh -c '<command> "$1" "$2"' sh <request> <response>` per call.
#[derive(Debug, Clone)]
pub struct ExecDenoiser {
    pub command: String,
}

impl ExecDenoiser {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
        }
    }
}

impl Denoiser for ExecDenoiser {
    fn denoise(&self, k: usize, x_k: &[f64], ctx: &GenerationContext) -> Result<Vec<f64>> {
        let req = DenoiserRecord::from_request(k, x_k, ctx)?;
        let dir = tempfile::tempdir()?;
        let (req_path, resp_path) = (
            dir.path().join("request.bin"),
            dir.path().join("response.bin"),
        );
        std::fs::write(&req_path, encode_record(&req))?;
        let status = Command::new("sh")
            .arg("-c")
            .arg(format!("{} \"$1\" \"$2\"", self.command))
            .arg("sh")
            .arg(&req_path)
            .arg(&resp_path)
            .status()?;
        if !status.success() {
            return Err(Error::Denoiser(format!(
                "`{}` exited with {status}",
                self.command
            )));
        }
        let resp = decode_record(&std::fs::read(&resp_path)?)?;
        if resp.frame_dim != req.frame_dim || resp.frames != req.frames {
            return Err(Error::Denoiser(
                "response shape differs from request".into(),
            ));
        }
        Ok(resp.x)
    }
}

/// Number of values in one flattened window for `joints` joints.
pub fn window_dim(joints: usize) -> usize {
    WINDOW_FRAMES * MotionFrame::flat_dim(joints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::motion::synth::{walk_clip, WalkParams};
    use crate::motion::Skeleton;
    use crate::rotmath::LocalFrame;
    use crate::terrain::{sample_local_heightmap, TerrainGrid};
    use approx::assert_abs_diff_eq;

    fn ctx() -> GenerationContext {
        let mut t = TerrainGrid::flat(12, 12, 0.4, 0.0);
        t.set_height(3, 4, 0.75);
        GenerationContext {
            heightmap: sample_local_heightmap(&t, &LocalFrame::new([2.0, 2.0, 0.0], 0.2), 12.4)
                .unwrap(),
            target_dir: [0.6, -0.8],
            prev_frames: None,
            mask_prev: false,
        }
    }

    #[test]
    fn record_round_trip_and_offsets() {
        let sk = Skeleton::reference_humanoid();
        let clip = walk_clip(
            &sk,
            &WalkParams {
                frames: 20,
                ..Default::default()
            },
        );
        let w = clip.window(2).unwrap();
        let mut c = ctx();
        c.prev_frames = Some(w[..2].to_vec());
        c.mask_prev = true;
        let x = flatten_frames(&w);
        let r = DenoiserRecord::from_request(37, &x, &c).unwrap();
        let bytes = encode_record(&r);
        let f = MotionFrame::flat_dim(sk.num_joints());
        assert_eq!(bytes.len(), 8 * (RECORD_HEADER + 2 * f + 15 * f));
        let at = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        assert_eq!(at(0), 37.0);
        assert_eq!(at(8), 1.0);
        assert_eq!(at(16), 1.0);
        assert_eq!(at(24), f as f64);
        assert_eq!(at(32), 15.0);
        assert_eq!(at(40), 0.6);
        assert_eq!(at(48), -0.8);
        assert_eq!(at(56), c.heightmap.values[0]);
        assert_eq!(at(7744), x[0]);
        assert_eq!(at(7744 + 16 * f), x[0]);
        assert_eq!(decode_record(&bytes).unwrap(), r);
        assert!(decode_record(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn exec_identity_denoiser() {
        let x: Vec<f64> = (0..15 * 4).map(|i| i as f64 * 0.25 - 3.0).collect();
        let out = ExecDenoiser::new("cp").denoise(5, &x, &ctx()).unwrap();
        assert_eq!(out, x);
        assert!(ExecDenoiser::new("false").denoise(5, &x, &ctx()).is_err());
    }

    #[test]
    fn replay_matches_previous_frames() {
        let sk = Skeleton::reference_humanoid();
        let clip = walk_clip(
            &sk,
            &WalkParams {
                frames: 60,
                ..Default::default()
            },
        );
        let rep = ReplayDenoiser::from_clips(std::slice::from_ref(&clip)).unwrap();
        assert_eq!(rep.len(), 46);
        let target = clip.window(17).unwrap();
        let mut c = ctx();
        c.prev_frames = Some(target[..2].to_vec());
        let x = vec![0.0; window_dim(sk.num_joints())];
        let out = rep.denoise(3, &x, &c).unwrap();
        let want = flatten_frames(&target);
        let err = out
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9);
        assert!(ReplayDenoiser::from_clips(&[walk_clip(
            &sk,
            &WalkParams {
                frames: 10,
                ..Default::default()
            }
        )])
        .is_err());
    }

    #[test]
    fn linear_denoiser_limits() {
        let windows: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![1.0 + (i % 5) as f64 * 0.1, -2.0])
            .collect();
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let den = LinearDenoiser::fit(&windows, &s, 0.0).unwrap();
        assert_abs_diff_eq!(den.mean[0], 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(den.var[0], 0.02, epsilon = 1e-12);
        // zero-variance dimension always predicts its mean
        assert_abs_diff_eq!(
            den.denoise(50, &[0.0, 9.0], &ctx()).unwrap()[1],
            -2.0,
            epsilon = 1e-12
        );
        // at k = 0 the prediction is the input
        let out = den.denoise(0, &[1.37, -2.0], &ctx()).unwrap();
        assert_abs_diff_eq!(out[0], 1.37, epsilon = 1e-12);
    }
}
