//! End-to-end run: terrain, navigation path, batched generation, selection,
//! kinematic correction and evaluation, with every artifact written to a run
//! directory and listed in a hashed manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{
    generate_with_seeds, make_schedule, ConstantDenoiser, Denoiser, ExecDenoiser, GenerationConfig,
    LinearDenoiser, NoiseSchedule, ReplayDenoiser, DEFAULT_BETA, DEFAULT_STEPS,
};
use crate::error::{Error, Result};
use crate::losses::{motion_metrics, selection_score, MotionMetrics, METRIC_JERK_MAX};
use crate::motion::synth::{walk_clip, WalkParams};
use crate::motion::{flatten_frames, load_skeleton, MotionClip, Skeleton, WINDOW_FRAMES};
use crate::navgraph::{astar_plan, border_endpoints, build_graph, NavParams, PathResult};
use crate::optimize::{optimize_motion, OptimizationConfig};
use crate::terrain::{
    gen_random_boxes, gen_random_walk, RandomBoxesParams, RandomWalkParams, TerrainGrid,
};

/// 64-bit seed of the named sub-stream of `master`.
pub fn stream_seed(master: u64, name: &str) -> u64 {
    let d = stream_digest(master, name);
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Generator for the named sub-stream of `master`.
pub fn named_rng(master: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(stream_digest(master, name))
}

fn stream_digest(master: u64, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    h.finalize().into()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerrainSpec {
    Flat {
        rows: usize,
        cols: usize,
        cell: f64,
        height: f64,
    },
    RandomBoxes(RandomBoxesParams),
    RandomWalk(RandomWalkParams),
    File {
        path: PathBuf,
    },
}

impl TerrainSpec {
    pub fn build(&self, rng: &mut ChaCha8Rng) -> Result<TerrainGrid> {
        let t = match self {
            Self::Flat {
                rows,
                cols,
                cell,
                height,
            } => {
                if *rows < 1 || *cols < 1 || !(*cell > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "flat terrain {rows}x{cols}, cell {cell}"
                    )));
                }
                TerrainGrid::flat(*rows, *cols, *cell, *height)
            }
            Self::RandomBoxes(p) => gen_random_boxes(p, rng)?,
            Self::RandomWalk(p) => gen_random_walk(p, rng)?,
            Self::File { path } => TerrainGrid::load(path)?,
        };
        t.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Endpoints {
    /// Random start and goal on opposite borders.
    Border,
    Cells {
        start: [usize; 2],
        goal: [usize; 2],
    },
}

/// Denoiser choice. Empty clip lists fall back to a built-in walking clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserSpec {
    Constant {
        #[serde(default)]
        clip: Option<PathBuf>,
    },
    Replay {
        #[serde(default)]
        clips: Vec<PathBuf>,
    },
    Linear {
        #[serde(default)]
        clips: Vec<PathBuf>,
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    Exec {
        command: String,
    },
}

fn default_lambda() -> f64 {
    1e-3
}

impl FromStr for DenoiserSpec {
    type Err = Error;

    /// `constant`, `replay`, `linear` or `exec:<command>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant { clip: None }),
            "replay" => Ok(Self::Replay { clips: Vec::new() }),
            "linear" => Ok(Self::Linear {
                clips: Vec::new(),
                lambda: default_lambda(),
            }),
            _ => match s.strip_prefix("exec:") {
                Some(cmd) if !cmd.trim().is_empty() => Ok(Self::Exec {
                    command: cmd.to_string(),
                }),
                _ => Err(Error::InvalidParameter(format!("unknown denoiser `{s}`"))),
            },
        }
    }
}

impl fmt::Display for DenoiserSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant { .. } => write!(f, "constant"),
            Self::Replay { .. } => write!(f, "replay"),
            Self::Linear { .. } => write!(f, "linear"),
            Self::Exec { command } => write!(f, "exec:{command}"),
        }
    }
}

/// Walking clip used when a denoiser spec names no clips.
pub fn builtin_clips(skeleton: &Skeleton) -> Vec<MotionClip> {
    vec![walk_clip(skeleton, &WalkParams::default())]
}

fn load_clips(paths: &[PathBuf], skeleton: &Skeleton) -> Result<Vec<MotionClip>> {
    if paths.is_empty() {
        return Ok(builtin_clips(skeleton));
    }
    paths
        .iter()
        .map(|p| {
            let c = MotionClip::load(p)?;
            c.validate(skeleton)?;
            Ok(c)
        })
        .collect()
}

fn all_windows(clips: &[MotionClip]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for c in clips {
        for start in 0..=c.len().saturating_sub(WINDOW_FRAMES) {
            if start + WINDOW_FRAMES <= c.len() {
                out.push(flatten_frames(&c.window(start)?));
            }
        }
    }
    Ok(out)
}

impl DenoiserSpec {
    pub fn build(
        &self,
        skeleton: &Skeleton,
        schedule: &NoiseSchedule,
    ) -> Result<Box<dyn Denoiser>> {
        Ok(match self {
            Self::Constant { clip } => {
                let clips = load_clips(clip.as_slice(), skeleton)?;
                let w = all_windows(&clips[..1])?;
                let first = w.into_iter().next().ok_or(Error::InsufficientFrames {
                    needed: WINDOW_FRAMES,
                    got: clips[0].len(),
                })?;
                Box::new(ConstantDenoiser::new(first))
            }
            Self::Replay { clips } => {
                Box::new(ReplayDenoiser::from_clips(&load_clips(clips, skeleton)?)?)
            }
            Self::Linear { clips, lambda } => {
                let w = all_windows(&load_clips(clips, skeleton)?)?;
                Box::new(LinearDenoiser::fit(&w, schedule, *lambda)?)
            }
            Self::Exec { command } => Box::new(ExecDenoiser::new(command.clone())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta: [f64; 2],
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta: DEFAULT_BETA,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta[0], self.beta[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub terrain: TerrainSpec,
    pub nav: NavParams,
    pub endpoints: Endpoints,
    pub schedule: ScheduleSpec,
    pub generation: GenerationConfig,
    pub denoiser: DenoiserSpec,
    pub optimizer: OptimizationConfig,
    /// Skeleton file; the reference humanoid when absent.
    pub skeleton: Option<PathBuf>,
    /// Run directory. Not written to `config.json` so that runs in different
    /// directories share a manifest.
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            terrain: TerrainSpec::RandomBoxes(RandomBoxesParams::default()),
            nav: NavParams::default(),
            endpoints: Endpoints::Border,
            schedule: ScheduleSpec::default(),
            generation: GenerationConfig::default(),
            denoiser: DenoiserSpec::Replay { clips: Vec::new() },
            optimizer: OptimizationConfig::default(),
            skeleton: None,
            out_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        if self.optimizer.lr <= 0.0 || !self.optimizer.lr.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "learning rate {}",
                self.optimizer.lr
            )));
        }
        if self.schedule.steps == 0 {
            return Err(Error::InvalidParameter(
                "schedule needs at least one step".into(),
            ));
        }
        Ok(())
    }

    pub fn load_skeleton(&self) -> Result<Skeleton> {
        match &self.skeleton {
            Some(p) => load_skeleton(p),
            None => Ok(Skeleton::reference_humanoid()),
        }
    }
}

/// An error tagged with the pipeline stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

trait AtStage<T> {
    fn at(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T, E: Into<Error>> AtStage<T> for std::result::Result<T, E> {
    fn at(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|e| StageError {
            stage,
            source: e.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSummary {
    pub name: String,
    pub frames: usize,
    pub windows: usize,
    pub reached_end: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub clips: Vec<ClipSummary>,
    pub best_index: usize,
    pub best_score: f64,
    pub files: Vec<FileEntry>,
    /// Hash over the seed and every file entry, config included.
    pub run_sha256: String,
}

struct RunDir {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl RunDir {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.files.push(FileEntry {
            name: name.to_string(),
            bytes: bytes.len(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let s = serde_json::to_string_pretty(value)?;
        self.write(name, s.as_bytes())
    }
}

fn metrics_header() -> &'static str {
    "clip,fwd,tpl,tcl,hjf_percent,tpl_per_frame,tcl_per_frame\n"
}

fn metrics_row(name: &str, m: &MotionMetrics) -> String {
    format!(
        "{name},{},{},{},{},{},{}\n",
        m.fwd, m.tpl, m.tcl, m.hjf_percent, m.tpl_per_frame, m.tcl_per_frame
    )
}

/// Runs every stage and returns the run directory.
///
/// On failure the artifacts of completed stages stay on disk.
pub fn cmd_pipeline(config: &PipelineConfig) -> std::result::Result<PathBuf, StageError> {
    config.validate().at("config")?;
    let root = config
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("run"));
    std::fs::create_dir_all(&root).at("config")?;
    let mut run = RunDir {
        root: root.clone(),
        files: Vec::new(),
    };
    run.write_json("config.json", config).at("config")?;
    let skeleton = config.load_skeleton().at("config")?;
    let seed = config.seed;

    let terrain = config
        .terrain
        .build(&mut named_rng(seed, "terrain"))
        .at("terrain")?;
    run.write(
        "terrain.json",
        serde_json::to_string(&terrain).at("terrain")?.as_bytes(),
    )
    .at("terrain")?;
    run.write("terrain.obj", terrain.to_obj().as_bytes())
        .at("terrain")?;

    let graph = build_graph(&terrain, &config.nav).at("navgraph")?;
    let (start, goal) = match &config.endpoints {
        Endpoints::Border => border_endpoints(&graph, &mut named_rng(seed, "path")),
        Endpoints::Cells { start, goal } => (*start, *goal),
    };
    let path = astar_plan(&graph, start, goal, stream_seed(seed, "astar")).at("path")?;
    run.write_json("path.json", &path).at("path")?;

    let schedule = config.schedule.build().at("generate")?;
    let denoiser = config.denoiser.build(&skeleton, &schedule).at("generate")?;
    let seeds: Vec<u64> = (0..config.generation.batch)
        .map(|i| stream_seed(seed, &format!("ddim[{i}]")))
        .collect();
    let generated = generate_with_seeds(
        denoiser.as_ref(),
        &terrain,
        &path,
        &skeleton,
        &schedule,
        &config.generation,
        &seeds,
    )
    .at("generate")?;

    let scores: Vec<f64> = generated
        .par_iter()
        .map(|g| selection_score(&g.clip, &skeleton, &terrain, g.reached_end))
        .collect();
    let mut clips = Vec::with_capacity(generated.len());
    for (i, (g, &score)) in generated.iter().zip(&scores).enumerate() {
        let name = format!("clips/{i:03}.json");
        let mut clip = g.clip.clone();
        clip.terrain_id = "terrain".into();
        run.write_json(&name, &clip).at("generate")?;
        clips.push(ClipSummary {
            name,
            frames: clip.len(),
            windows: g.windows,
            reached_end: g.reached_end,
            score,
        });
    }

    let (best_index, best_score) = scores
        .iter()
        .copied()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, s)| match acc {
            Some((_, b)) if b <= s => acc,
            _ => Some((i, s)),
        })
        .ok_or(Error::InvalidParameter("empty batch".into()))
        .at("select")?;
    let mut best = generated[best_index].clip.clone();
    best.terrain_id = "terrain".into();
    run.write_json("best.json", &best).at("select")?;

    let (opt, report) =
        optimize_motion(&best, &skeleton, &terrain, &config.optimizer).at("optimize")?;
    run.write_json("best_opt.json", &opt).at("optimize")?;
    run.write_json("optimize_report.json", &report)
        .at("optimize")?;

    let mut csv = metrics_header().to_string();
    for (name, clip) in [("best", &best), ("best_opt", &opt)] {
        let m = motion_metrics(clip, &skeleton, &terrain, path.end(), METRIC_JERK_MAX)
            .at("evaluate")?;
        csv += &metrics_row(name, &m);
    }
    run.write("metrics.csv", csv.as_bytes()).at("evaluate")?;

    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for f in &run.files {
        h.update(f.name.as_bytes());
        h.update([0u8]);
        h.update(f.sha256.as_bytes());
    }
    let manifest = Manifest {
        seed,
        clips,
        best_index,
        best_score,
        files: run.files.clone(),
        run_sha256: hex::encode(h.finalize()),
    };
    let s = serde_json::to_string_pretty(&manifest).at("manifest")?;
    std::fs::write(root.join("manifest.json"), s).at("manifest")?;
    Ok(root)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub clip: String,
    pub metrics: MotionMetrics,
}

fn mean_metrics(rows: &[MetricsRow]) -> MotionMetrics {
    let n = rows.len().max(1) as f64;
    let mut m = MotionMetrics {
        fwd: 0.0,
        tpl: 0.0,
        tcl: 0.0,
        hjf_percent: 0.0,
        tpl_per_frame: 0.0,
        tcl_per_frame: 0.0,
    };
    for r in rows {
        m.fwd += r.metrics.fwd / n;
        m.tpl += r.metrics.tpl / n;
        m.tcl += r.metrics.tcl / n;
        m.hjf_percent += r.metrics.hjf_percent / n;
        m.tpl_per_frame += r.metrics.tpl_per_frame / n;
        m.tcl_per_frame += r.metrics.tcl_per_frame / n;
    }
    m
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.retain(|p| p.extension().is_some_and(|e| e == "json"));
    v.sort();
    Ok(v)
}

/// Evaluates every clip in `clips_dir` against its terrain and path.
///
/// A clip pairs with `<id>.json` and `<id>.path.json` in `terrains_dir`, where
/// `<id>` is the clip's `terrain_id` or, if empty, its file stem. When
/// `<id>.path.json` is missing, `path.json` is used. Returns the per-clip rows
/// and a CSV ending in a `mean` row.
pub fn cmd_metrics(
    clips_dir: &Path,
    terrains_dir: &Path,
    skeleton: &Skeleton,
) -> Result<(Vec<MetricsRow>, String)> {
    let files = json_files(clips_dir)?;
    if files.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "no clips in {}",
            clips_dir.display()
        )));
    }
    let rows: Vec<MetricsRow> = files
        .par_iter()
        .map(|f| {
            let clip = MotionClip::load(f)?;
            clip.validate(skeleton)?;
            let stem = f
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let id = if clip.terrain_id.is_empty() {
                stem.clone()
            } else {
                clip.terrain_id.clone()
            };
            let tpath = terrains_dir.join(format!("{id}.json"));
            if !tpath.exists() {
                return Err(Error::InvalidParameter(format!(
                    "clip {stem}: no terrain {}",
                    tpath.display()
                )));
            }
            let terrain = TerrainGrid::load(&tpath)?;
            let ppath = [
                terrains_dir.join(format!("{id}.path.json")),
                terrains_dir.join("path.json"),
            ]
            .into_iter()
            .find(|p| p.exists())
            .ok_or_else(|| {
                Error::InvalidParameter(format!("clip {stem}: no path for terrain {id}"))
            })?;
            let path = PathResult::load(&ppath)?;
            let metrics = motion_metrics(&clip, skeleton, &terrain, path.end(), METRIC_JERK_MAX)?;
            Ok(MetricsRow {
                clip: stem,
                metrics,
            })
        })
        .collect::<Result<_>>()?;
    let mut csv = metrics_header().to_string();
    for r in &rows {
        csv += &metrics_row(&r.clip, &r.metrics);
    }
    csv += &metrics_row("mean", &mean_metrics(&rows));
    Ok((rows, csv))
}
