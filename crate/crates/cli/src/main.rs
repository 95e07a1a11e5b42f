use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use traverse_core::diffusion::{generate_with_seeds, GenerationConfig};
use traverse_core::losses::{motion_metrics, select_best, METRIC_JERK_MAX};
use traverse_core::motion::{MotionClip, Skeleton};
use traverse_core::navgraph::{astar_plan, border_endpoints, build_graph, PathResult};
use traverse_core::optimize::optimize_motion;
use traverse_core::pipeline::{
    cmd_metrics, cmd_pipeline, named_rng, stream_seed, DenoiserSpec, PipelineConfig, StageError,
    TerrainSpec,
};
use traverse_core::terrain::{
    augment_with_boxes, compute_noninterference_bounds, AugmentParams, HeightBounds,
    RandomBoxesParams, RandomWalkParams, TerrainGrid, DEFAULT_CELL,
};
use traverse_core::tracking::{
    positions_terminate, prioritized_sample, reward_total, sampling_probabilities,
    states_from_clip, FailureStats, TERMINATION_DISTANCE,
};
use traverse_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "traverse",
    version,
    about = "Terrain traversal motion pipeline"
)]
struct Cli {
    /// Master seed. Overrides the seed in --config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Pipeline config JSON. Supplies defaults for every subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Run on a single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum TerrainKind {
    Flat,
    Boxes,
    Walk,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a terrain grid.
    GenTerrain {
        #[arg(long, value_enum)]
        kind: Option<TerrainKind>,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
        /// Boxes or walks to place.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        cell: Option<f64>,
        /// Also write a Wavefront OBJ mesh here.
        #[arg(long)]
        obj: Option<PathBuf>,
    },
    /// Add random boxes to a terrain without touching the given clips.
    AugmentTerrain {
        #[arg(long)]
        terrain: PathBuf,
        /// Clips to keep free of penetration.
        #[arg(long)]
        clip: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        boxes: usize,
    },
    /// Plan a waypoint path with A*.
    PlanPath {
        #[arg(long)]
        terrain: PathBuf,
        /// Start cell as `i,j`; random border cell when omitted.
        #[arg(long, value_parser = parse_cell)]
        start: Option<[usize; 2]>,
        #[arg(long, value_parser = parse_cell)]
        goal: Option<[usize; 2]>,
    },
    /// Generate a batch of clips along a path.
    Generate {
        #[arg(long)]
        terrain: PathBuf,
        #[arg(long)]
        path: PathBuf,
        /// constant, replay, linear or exec:<cmd>.
        #[arg(long)]
        denoiser: Option<DenoiserSpec>,
        #[arg(long)]
        s: Option<f64>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        max_seconds: Option<f64>,
    },
    /// Kinematic correction of a clip against a terrain.
    OptimizeMotion {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        terrain: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Write the loss trace and final breakdown here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print FWD, TPL, TCL and %HJF for one clip.
    EvalMotion {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        terrain: PathBuf,
        #[arg(long)]
        path: PathBuf,
    },
    /// Per-frame tracking reward of a simulated clip against a reference.
    RewardEval {
        #[arg(long)]
        sim: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Draw clip indices from failure statistics and tabulate frequencies.
    SamplerDemo {
        /// JSON array of failure rates or of {attempts, failures, rate} records.
        #[arg(long)]
        stats: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
    },
    /// Full run: terrain, path, generation, selection, correction, metrics.
    Pipeline,
    /// Metrics CSV for a directory of clips.
    Metrics {
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        terrains: PathBuf,
    },
}

fn parse_cell(s: &str) -> std::result::Result<[usize; 2], String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected i,j, got `{s}`"))?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}"));
    Ok([p(a)?, p(b)?])
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum StatsEntry {
    Rate(f64),
    Full(FailureStats),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let core = err.chain().find_map(|e| {
        e.downcast_ref::<StageError>()
            .map(|s| &s.source)
            .or_else(|| e.downcast_ref::<Error>())
    });
    match core {
        Some(Error::NoPath { .. }) => 3,
        Some(Error::NonFinite { .. }) => 4,
        Some(
            Error::InvalidParameter(_)
            | Error::ShapeMismatch(_)
            | Error::InvalidSkeleton(_)
            | Error::OutOfBounds(_)
            | Error::InsufficientFrames { .. }
            | Error::Json(_),
        ) => 2,
        _ if err.chain().any(|e| e.is::<serde_json::Error>()) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut c = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    Ok(c)
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_terrain(p: &Path) -> Result<TerrainGrid> {
    TerrainGrid::load(p).with_context(|| format!("terrain {}", p.display()))
}

fn load_clip(p: &Path, skeleton: &Skeleton) -> Result<MotionClip> {
    let c = MotionClip::load(p).with_context(|| format!("clip {}", p.display()))?;
    c.validate(skeleton)
        .with_context(|| format!("clip {}", p.display()))?;
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    if cli.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()?;
    }
    let config = load_config(&cli)?;
    let skeleton = config.load_skeleton()?;
    let seed = config.seed;

    match &cli.command {
        Cmd::GenTerrain {
            kind,
            rows,
            cols,
            count,
            cell,
            obj,
        } => {
            let mut spec = config.terrain.clone();
            let cell = cell.unwrap_or(DEFAULT_CELL);
            if let Some(k) = kind {
                spec = match k {
                    TerrainKind::Flat => TerrainSpec::Flat {
                        rows: 16,
                        cols: 16,
                        cell,
                        height: 0.0,
                    },
                    TerrainKind::Boxes => TerrainSpec::RandomBoxes(RandomBoxesParams {
                        cell,
                        ..Default::default()
                    }),
                    TerrainKind::Walk => TerrainSpec::RandomWalk(RandomWalkParams {
                        cell,
                        ..Default::default()
                    }),
                };
            }
            match &mut spec {
                TerrainSpec::Flat {
                    rows: r, cols: c, ..
                } => {
                    *r = rows.unwrap_or(*r);
                    *c = cols.unwrap_or(*c);
                }
                TerrainSpec::RandomBoxes(p) => {
                    p.grid = [rows.unwrap_or(p.grid[0]), cols.unwrap_or(p.grid[1])];
                    p.num_boxes = count.unwrap_or(p.num_boxes);
                }
                TerrainSpec::RandomWalk(p) => {
                    p.grid = [rows.unwrap_or(p.grid[0]), cols.unwrap_or(p.grid[1])];
                    p.num_paths = count.unwrap_or(p.num_paths);
                }
                TerrainSpec::File { .. } => {}
            }
            let t = spec.build(&mut named_rng(seed, "terrain"))?;
            let out = out_path(&cli, "terrain.json");
            write(&out, serde_json::to_string(&t)?)?;
            if let Some(o) = obj {
                write(o, t.to_obj())?;
            }
            println!(
                "{}x{} terrain, heights [{}, {}] -> {}",
                t.rows,
                t.cols,
                t.min_height(),
                t.max_height(),
                out.display()
            );
        }

        Cmd::AugmentTerrain {
            terrain,
            clip,
            boxes,
        } => {
            let t = load_terrain(terrain)?;
            let mut bounds = HeightBounds::unbounded(t.rows, t.cols);
            for p in clip {
                let c = load_clip(p, &skeleton)?;
                bounds = bounds.intersect(&compute_noninterference_bounds(&c, &skeleton, &t))?;
            }
            let out_t = augment_with_boxes(
                &t,
                &bounds,
                *boxes,
                &AugmentParams::default(),
                &mut named_rng(seed, "augmentation"),
            )?;
            let out = out_path(&cli, "terrain_aug.json");
            write(&out, serde_json::to_string(&out_t)?)?;
            let changed = t
                .heights
                .iter()
                .zip(&out_t.heights)
                .filter(|(a, b)| a != b)
                .count();
            println!("{changed} cells raised -> {}", out.display());
        }

        Cmd::PlanPath {
            terrain,
            start,
            goal,
        } => {
            let t = load_terrain(terrain)?;
            let g = build_graph(&t, &config.nav)?;
            let (s, e) = match (start, goal) {
                (Some(s), Some(e)) => (*s, *e),
                (None, None) => border_endpoints(&g, &mut named_rng(seed, "path")),
                _ => {
                    return Err(Error::InvalidParameter(
                        "give both --start and --goal or neither".into(),
                    )
                    .into())
                }
            };
            let p = astar_plan(&g, s, e, stream_seed(seed, "astar"))?;
            let out = out_path(&cli, "path.json");
            p.save(&out)?;
            println!(
                "{} waypoints, {} jumps, cost {:.4} -> {}",
                p.waypoints.len(),
                p.kinds
                    .iter()
                    .filter(|k| **k == traverse_core::navgraph::EdgeKind::Jump)
                    .count(),
                p.total_cost,
                out.display()
            );
        }

        Cmd::Generate {
            terrain,
            path,
            denoiser,
            s,
            stride,
            batch,
            steps,
            max_seconds,
        } => {
            let t = load_terrain(terrain)?;
            let p = PathResult::load(path)?;
            let gen = GenerationConfig {
                blend_s: s.unwrap_or(config.generation.blend_s),
                ddim_stride: stride.unwrap_or(config.generation.ddim_stride),
                batch: batch.unwrap_or(config.generation.batch),
                max_seconds: max_seconds.unwrap_or(config.generation.max_seconds),
                ..config.generation
            };
            let mut sched_spec = config.schedule;
            if let Some(k) = steps {
                sched_spec.steps = *k;
            }
            let sched = sched_spec.build()?;
            let spec = denoiser.clone().unwrap_or_else(|| config.denoiser.clone());
            let den = spec.build(&skeleton, &sched)?;
            let seeds: Vec<u64> = (0..gen.batch)
                .map(|i| stream_seed(seed, &format!("ddim[{i}]")))
                .collect();
            let out = generate_with_seeds(den.as_ref(), &t, &p, &skeleton, &sched, &gen, &seeds)?;
            let dir = out_path(&cli, "generated");
            fs::create_dir_all(&dir)?;
            for (i, g) in out.iter().enumerate() {
                g.clip.save(&dir.join(format!("{i:03}.json")))?;
            }
            let pairs: Vec<(MotionClip, bool)> = out
                .iter()
                .map(|g| (g.clip.clone(), g.reached_end))
                .collect();
            let (best, score) =
                select_best(&pairs, &skeleton, &t).ok_or_else(|| anyhow!("empty batch"))?;
            out[best].clip.save(&dir.join("best.json"))?;
            println!(
                "{} clips, best {best:03} score {score} -> {}",
                out.len(),
                dir.display()
            );
        }

        Cmd::OptimizeMotion {
            clip,
            terrain,
            iters,
            lr,
            report,
        } => {
            let t = load_terrain(terrain)?;
            let c = load_clip(clip, &skeleton)?;
            let mut oc = config.optimizer;
            oc.iters = iters.unwrap_or(oc.iters);
            oc.lr = lr.unwrap_or(oc.lr);
            let (opt, rep) = optimize_motion(&c, &skeleton, &t, &oc)?;
            let out = out_path(&cli, "optimized.json");
            opt.save(&out)?;
            if let Some(r) = report {
                write(r, serde_json::to_string_pretty(&rep)?)?;
            }
            let f = rep.final_breakdown;
            println!(
                "pen {} contact {} jerk {} -> {}",
                f.penetration,
                f.contact,
                f.jerk,
                out.display()
            );
        }

        Cmd::EvalMotion {
            clip,
            terrain,
            path,
        } => {
            let t = load_terrain(terrain)?;
            let c = load_clip(clip, &skeleton)?;
            let p = PathResult::load(path)?;
            let m = motion_metrics(&c, &skeleton, &t, p.end(), METRIC_JERK_MAX)?;
            let s = serde_json::to_string_pretty(&m)?;
            match &cli.out {
                Some(o) => write(o, &s)?,
                None => println!("{s}"),
            }
        }

        Cmd::RewardEval { sim, reference } => {
            let a = states_from_clip(&load_clip(sim, &skeleton)?, &skeleton)?;
            let b = states_from_clip(&load_clip(reference, &skeleton)?, &skeleton)?;
            if a.len() != b.len() {
                return Err(
                    Error::ShapeMismatch(format!("{} vs {} frames", a.len(), b.len())).into(),
                );
            }
            let mut csv =
                String::from("frame,pose,pose_vel,root,root_vel,key,contact,total,terminate\n");
            for (i, (x, y)) in a.iter().zip(&b).enumerate() {
                let r = reward_total(x, y, &skeleton.joint_weights)?;
                let fx = skeleton.forward_kinematics(x.root_pos, &x.root_rot, &x.joint_rot);
                let fy = skeleton.forward_kinematics(y.root_pos, &y.root_rot, &y.joint_rot);
                let term = positions_terminate(&fx, &fy, &skeleton, TERMINATION_DISTANCE);
                csv += &format!(
                    "{i},{},{},{},{},{},{},{},{}\n",
                    r.pose,
                    r.pose_vel,
                    r.root,
                    r.root_vel,
                    r.key,
                    r.contact,
                    r.total,
                    u8::from(term)
                );
            }
            emit(&cli, &csv)?;
        }

        Cmd::SamplerDemo { stats, draws } => {
            let entries: Vec<StatsEntry> = serde_json::from_str(&fs::read_to_string(stats)?)
                .with_context(|| format!("stats {}", stats.display()))?;
            let st: Vec<FailureStats> = entries
                .into_iter()
                .map(|e| match e {
                    StatsEntry::Rate(r) => FailureStats::with_rate(r),
                    StatsEntry::Full(f) => f,
                })
                .collect();
            let probs = sampling_probabilities(&st)?;
            let mut counts = vec![0usize; st.len()];
            for i in prioritized_sample(&st, &mut named_rng(seed, "sampler"), *draws)? {
                counts[i] += 1;
            }
            let mut csv = String::from("clip,rate,weight,probability,count,frequency\n");
            for (i, s) in st.iter().enumerate() {
                csv += &format!(
                    "{i},{},{},{},{},{}\n",
                    s.rate,
                    s.weight(),
                    probs[i],
                    counts[i],
                    counts[i] as f64 / (*draws).max(1) as f64
                );
            }
            emit(&cli, &csv)?;
        }

        Cmd::Pipeline => {
            let mut c = config.clone();
            if let Some(o) = &cli.out {
                c.out_dir = Some(o.clone());
            }
            let root = cmd_pipeline(&c)?;
            let m: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(root.join("manifest.json"))?)?;
            println!(
                "{}",
                json!({"run_dir": root, "best_index": m["best_index"], "best_score": m["best_score"], "run_sha256": m["run_sha256"]})
            );
        }

        Cmd::Metrics { clips, terrains } => {
            let (_, csv) = cmd_metrics(clips, terrains, &skeleton)?;
            emit(&cli, &csv)?;
        }
    }
    Ok(())
}

fn emit(cli: &Cli, s: &str) -> Result<()> {
    match &cli.out {
        Some(o) => write(o, s),
        None => {
            print!("{s}");
            Ok(())
        }
    }
}
