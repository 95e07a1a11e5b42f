use std::path::Path;
use std::process::{Command, Output};

fn traverse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_traverse"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SMALL_RUN: &str = r#"{
    "seed": 5,
    "terrain": {"kind": "flat", "rows": 12, "cols": 5, "cell": 0.4, "height": 0.0},
    "endpoints": {"kind": "cells", "start": [0, 2], "goal": [11, 2]},
    "schedule": {"steps": 10, "beta": [0.0001, 0.02]},
    "generation": {"blend_s": 0.0, "ddim_stride": 5, "batch": 2, "max_seconds": 4.0,
                   "fps": 30.0, "heightmap_extent": 12.4, "reach_radius": 0.5},
    "optimizer": {"weights": {"w_reg": 1.0, "w_pen": 1000.0, "w_contact": 1000.0,
                              "w_jerk": 1000.0, "jerk_max": 1000.0},
                  "iters": 10, "lr": 0.001}
}"#;

#[test]
fn gen_terrain_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&traverse(
        d,
        &[
            "--seed",
            "9",
            "--out",
            "a.json",
            "gen-terrain",
            "--kind",
            "boxes",
            "--obj",
            "a.obj",
        ],
    ));
    ok(&traverse(
        d,
        &[
            "--seed",
            "9",
            "--out",
            "b.json",
            "gen-terrain",
            "--kind",
            "boxes",
        ],
    ));
    ok(&traverse(
        d,
        &[
            "--seed",
            "10",
            "--out",
            "c.json",
            "gen-terrain",
            "--kind",
            "boxes",
        ],
    ));
    let read = |n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(read("a.json"), read("b.json"));
    assert_ne!(read("a.json"), read("c.json"));
    assert!(String::from_utf8(read("a.obj")).unwrap().contains("\nf "));
}

#[test]
fn pipeline_manifests_repeat_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), SMALL_RUN).unwrap();
    ok(&traverse(
        d,
        &["--config", "cfg.json", "--out", "r1", "pipeline"],
    ));
    ok(&traverse(
        d,
        &[
            "--config",
            "cfg.json",
            "--out",
            "r2",
            "--deterministic",
            "pipeline",
        ],
    ));
    let m1 = std::fs::read(d.join("r1/manifest.json")).unwrap();
    assert_eq!(m1, std::fs::read(d.join("r2/manifest.json")).unwrap());
    let m: serde_json::Value = serde_json::from_slice(&m1).unwrap();
    assert!(m["best_score"].as_f64().unwrap() < 1e-9);
    for name in [
        "config.json",
        "terrain.json",
        "terrain.obj",
        "path.json",
        "clips/000.json",
        "best.json",
        "best_opt.json",
        "metrics.csv",
    ] {
        assert!(d.join("r1").join(name).exists(), "{name}");
    }

    let csv = ok(&traverse(
        d,
        &["metrics", "--clips", "r1/clips", "--terrains", "r1"],
    ));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "clip,fwd,tpl,tcl,hjf_percent,tpl_per_frame,tcl_per_frame"
    );
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("mean,"));

    let eval = ok(&traverse(
        d,
        &[
            "eval-motion",
            "--clip",
            "r1/best.json",
            "--terrain",
            "r1/terrain.json",
            "--path",
            "r1/path.json",
        ],
    ));
    let v: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert!(v["fwd"].as_f64().unwrap() < 0.5);
    assert!(v["tpl"].as_f64().unwrap() < 1e-12);

    let rewards = ok(&traverse(
        d,
        &[
            "reward-eval",
            "--sim",
            "r1/best.json",
            "--reference",
            "r1/best.json",
        ],
    ));
    for line in rewards.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[1..6], ["1", "1", "1", "1", "1"]);
        assert_eq!(cols[8], "0");
    }
}

#[test]
fn unreachable_goal_exits_with_no_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut heights = vec![0.0; 25];
    heights[10..15].iter_mut().for_each(|h| *h = 10.0);
    let terrain = serde_json::json!({"x0": 0.0, "y0": 0.0, "dx": 0.4, "dy": 0.4, "rows": 5, "cols": 5, "heights": heights});
    std::fs::write(d.join("wall.json"), terrain.to_string()).unwrap();
    let out = traverse(
        d,
        &[
            "plan-path",
            "--terrain",
            "wall.json",
            "--start",
            "0,0",
            "--goal",
            "4,4",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no path"));

    let cfg = format!(
        r#"{{"terrain": {{"kind": "file", "path": "{}"}}, "endpoints": {{"kind": "cells", "start": [0, 0], "goal": [4, 4]}}}}"#,
        d.join("wall.json").display()
    );
    std::fs::write(d.join("cfg.json"), cfg).unwrap();
    let out = traverse(d, &["--config", "cfg.json", "--out", "run", "pipeline"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(d.join("run/terrain.json").exists());
    assert!(!d.join("run/clips").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"generation": {"blend_s": 2.0}}"#).unwrap();
    assert_eq!(
        traverse(d, &["--config", "bad.json", "pipeline"])
            .status
            .code(),
        Some(2)
    );
    std::fs::write(d.join("bad.json"), "{ not json").unwrap();
    assert_eq!(
        traverse(d, &["--config", "bad.json", "pipeline"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        traverse(
            d,
            &[
                "generate",
                "--terrain",
                "t.json",
                "--path",
                "p.json",
                "--denoiser",
                "neural"
            ]
        )
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn sampler_demo_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("stats.json"), "[0.0, 0.0, 1.0]").unwrap();
    let csv = ok(&traverse(
        d,
        &[
            "--seed",
            "1",
            "sampler-demo",
            "--stats",
            "stats.json",
            "--draws",
            "20000",
        ],
    ));
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    assert!((rows[2][3] - 1.0 / 1.02).abs() < 1e-15);
    assert!((rows[2][5] - 1.0 / 1.02).abs() < 0.01);

    std::fs::write(
        d.join("stats.json"),
        r#"[{"attempts": 10, "failures": 10, "rate": 1.0}]"#,
    )
    .unwrap();
    let csv = ok(&traverse(
        d,
        &["sampler-demo", "--stats", "stats.json", "--draws", "10"],
    ));
    assert!(csv.lines().nth(1).unwrap().ends_with(",10,1"));
}

#[test]
fn optimize_and_augment_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), SMALL_RUN).unwrap();
    ok(&traverse(
        d,
        &["--config", "cfg.json", "--out", "run", "pipeline"],
    ));
    ok(&traverse(
        d,
        &[
            "--out",
            "opt.json",
            "optimize-motion",
            "--clip",
            "run/best.json",
            "--terrain",
            "run/terrain.json",
            "--iters",
            "5",
            "--report",
            "rep.json",
        ],
    ));
    let rep: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("rep.json")).unwrap()).unwrap();
    assert_eq!(rep["loss_trace"].as_array().unwrap().len(), 6);

    ok(&traverse(
        d,
        &[
            "--seed",
            "4",
            "--out",
            "aug.json",
            "augment-terrain",
            "--terrain",
            "run/terrain.json",
            "--clip",
            "run/best.json",
            "--boxes",
            "8",
        ],
    ));
    let tpl = |terrain: &str| {
        let eval = ok(&traverse(
            d,
            &[
                "eval-motion",
                "--clip",
                "run/best.json",
                "--terrain",
                terrain,
                "--path",
                "run/path.json",
            ],
        ));
        serde_json::from_str::<serde_json::Value>(&eval).unwrap()["tpl"]
            .as_f64()
            .unwrap()
    };
    assert!(tpl("aug.json") <= tpl("run/terrain.json"));
    assert_ne!(
        std::fs::read(d.join("aug.json")).unwrap(),
        std::fs::read(d.join("run/terrain.json")).unwrap()
    );
}
