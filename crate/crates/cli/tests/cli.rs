use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eqrl_core::agents::{initialise, AgentKind, Checkpoint, ModelConfig};
use eqrl_core::geometry::{Dataset, OccupancyMap};
use eqrl_core::objectives::{ObjectiveConfig, TrainConfig, Variant};
use tempfile::TempDir;

fn eqrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqrl"))
        .args(args)
        .env("EQRL_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = eqrl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    eqrl(args).status.code().expect("exit code")
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small trajectory-free dataset on the empty map.
fn pairs(dir: &TempDir) -> PathBuf {
    let path = p(dir, "pairs.ds");
    ok(&[
        "gen-data",
        "--map",
        "empty10",
        "--regime",
        "trajectory_free",
        "--n-traj",
        "500",
        "--seed",
        "3",
        "--out",
        s(&path),
    ]);
    path
}

#[test]
fn gen_map_preset() {
    let dir = TempDir::new().unwrap();
    let out = p(&dir, "empty.map");
    ok(&["gen-map", "--preset", "empty10", "--out", s(&out)]);
    let map = OccupancyMap::parse(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!((map.width(), map.height()), (10, 10));
    assert_eq!(map.free_cells().len(), 64);
    let again = p(&dir, "again.map");
    ok(&["gen-map", "--from", s(&out), "--out", s(&again)]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());
    assert_eq!(
        code(&["gen-map", "--preset", "nowhere", "--out", s(&again)]),
        2
    );
}

#[test]
fn gen_data_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (p(&dir, "a.ds"), p(&dir, "b.ds"));
    for out in [&a, &b] {
        ok(&[
            "gen-data",
            "--map",
            "maze9",
            "--regime",
            "stitch",
            "--n-traj",
            "20",
            "--seed",
            "7",
            "--out",
            s(out),
        ]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let data = Dataset::from_bytes(&fs::read(&a).unwrap()).unwrap();
    assert_eq!(data.trajectories.len(), 20);
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p(&dir, "a.ds.json")).unwrap()).unwrap();
    assert_eq!(side["seed"], 7);
}

#[test]
fn gen_data_without_free_cells_fails() {
    let dir = TempDir::new().unwrap();
    let map = p(&dir, "solid.map");
    fs::write(&map, "resolution=1.0\n###\n###\n###\n").unwrap();
    assert_eq!(
        code(&["gen-data", "--map", s(&map), "--out", s(&p(&dir, "x.ds"))]),
        2
    );
    assert_eq!(
        code(&[
            "gen-data",
            "--map",
            "empty10",
            "--regime",
            "sideways",
            "--out",
            s(&p(&dir, "x.ds"))
        ]),
        2
    );
}

#[test]
fn zero_steps_gives_initial_checkpoint() {
    let dir = TempDir::new().unwrap();
    let data = pairs(&dir);
    let out = p(&dir, "run");
    ok(&[
        "train",
        "--map",
        "empty10",
        "--dataset",
        s(&data),
        "--variant",
        "eik_qrl",
        "--steps",
        "0",
        "--seeds",
        "4",
        "--out",
        s(&out),
    ]);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    let ck = Checkpoint::from_bytes(&fs::read(out.join("checkpoint_seed4.bin")).unwrap()).unwrap();
    let map = OccupancyMap::preset("empty10").unwrap();
    let ds = Dataset::from_bytes(&fs::read(&data).unwrap()).unwrap();
    let train = TrainConfig {
        seed: 4,
        value_steps: 0,
        high_steps: 0,
        low_steps: 0,
        ..TrainConfig::default()
    };
    let obj = ObjectiveConfig {
        variant: Variant::EikQrl,
        ..ObjectiveConfig::default()
    };
    let init = initialise(
        &map,
        &ds,
        AgentKind::Flat,
        &ModelConfig::desk(),
        &train,
        &obj,
    )
    .unwrap();
    assert_eq!(ck.to_bytes(), init.to_bytes());
    let echo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["objective"]["variant"], "eik_qrl");
    assert_eq!(echo["seeds"], serde_json::json!([4]));
}

#[test]
fn variant_must_match_dataset() {
    let dir = TempDir::new().unwrap();
    let data = pairs(&dir);
    let run = |variant: &str| {
        code(&[
            "train",
            "--map",
            "empty10",
            "--dataset",
            s(&data),
            "--variant",
            variant,
            "--steps",
            "0",
            "--out",
            s(&p(&dir, variant)),
        ])
    };
    assert_eq!(run("eik_qrl"), 0);
    assert_eq!(run("qrl"), 2);
    assert!(!p(&dir, "qrl").exists());
    assert_eq!(
        code(&[
            "train",
            "--map",
            "empty10",
            "--steps",
            "0",
            "--out",
            s(&p(&dir, "nodata"))
        ]),
        2
    );
}

#[test]
fn seeds_and_config_file() {
    let dir = TempDir::new().unwrap();
    let data = pairs(&dir);
    let cfg = p(&dir, "run.toml");
    fs::write(
        &cfg,
        format!(
            "map = \"empty10\"\ndataset = \"{}\"\neval_every = 10\naccuracy_pairs = 50\n\n[train]\nbatch = 32\n\n[eval]\nn_goals = 1\nepisodes_per_goal = 2\nmax_steps = 20\n",
            s(&data)
        ),
    )
    .unwrap();
    let out = p(&dir, "run");
    let args = [
        "train",
        "--config",
        s(&cfg),
        "--seeds",
        "1,2,3",
        "--steps",
        "20",
        "--out",
        s(&out),
    ];
    ok(&args);
    for seed in 1..=3 {
        assert!(out.join(format!("checkpoint_seed{seed}.bin")).exists());
        assert!(out.join(format!("diagnostics_seed{seed}.csv")).exists());
    }
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let seeds: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(seeds, ["1", "1", "2", "2", "3", "3"]);
    let echo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["train"]["batch"], 32);
    assert_eq!(echo["train"]["value_steps"], 20);

    // identical inputs give identical bytes
    let first: Vec<Vec<u8>> = ["metrics.csv", "checkpoint_seed2.bin", "success_rate.svg"]
        .iter()
        .map(|f| fs::read(out.join(f)).unwrap())
        .collect();
    ok(&args);
    let second: Vec<Vec<u8>> = ["metrics.csv", "checkpoint_seed2.bin", "success_rate.svg"]
        .iter()
        .map(|f| fs::read(out.join(f)).unwrap())
        .collect();
    assert_eq!(first, second);

    fs::write(&cfg, "unknown_key = 1\n").unwrap();
    assert_eq!(
        code(&[
            "train",
            "--config",
            s(&cfg),
            "--dataset",
            s(&data),
            "--out",
            s(&out)
        ]),
        2
    );
}

#[test]
fn non_finite_training_exits_3() {
    let dir = TempDir::new().unwrap();
    let data = pairs(&dir);
    let cfg = p(&dir, "bad.toml");
    fs::write(&cfg, "map = \"empty10\"\n\n[objective]\nlambda_init = 1e308\nvariant = \"eik_qrl_lambda\"\n\n[train]\nbatch = 16\n").unwrap();
    let out = p(&dir, "bad");
    let res = eqrl(&[
        "train",
        "--config",
        s(&cfg),
        "--dataset",
        s(&data),
        "--steps",
        "5",
        "--out",
        s(&out),
    ]);
    assert_eq!(
        res.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(String::from_utf8_lossy(&res.stderr).contains("nan_seed0.json"));
    assert!(out.join("nan_seed0.json").exists());
}

#[test]
fn eval_protocol_counts() {
    let dir = TempDir::new().unwrap();
    let data = pairs(&dir);
    let run = p(&dir, "run");
    ok(&[
        "train",
        "--map",
        "empty10",
        "--dataset",
        s(&data),
        "--steps",
        "0",
        "--out",
        s(&run),
    ]);
    let ck = run.join("checkpoint_seed0.bin");
    let out = p(&dir, "eval.csv");
    let stdout = ok(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--map",
        "empty10",
        "--episodes-per-goal",
        "50",
        "--n-goals",
        "5",
        "--out",
        s(&out),
    ]);
    assert!(stdout.contains("250 episodes"), "{stdout}");
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("checkpoint_seed0,0,0,"));
    assert_eq!(
        code(&[
            "eval",
            "--checkpoint",
            s(&p(&dir, "missing.bin")),
            "--map",
            "empty10",
            "--out",
            s(&out)
        ]),
        2
    );
}

#[test]
fn oracle_field_export() {
    let dir = TempDir::new().unwrap();
    let out = p(&dir, "field.csv");
    ok(&[
        "oracle",
        "--map",
        "uwall",
        "--goal",
        "2.5,2.5",
        "--cell",
        "0.5",
        "--out",
        s(&out),
    ]);
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 20);
    assert!(csv.lines().all(|l| l.split(',').count() == 20));
    let cells: Vec<&str> = csv.lines().flat_map(|l| l.split(',')).collect();
    assert!(cells.contains(&"inf"));
    assert_eq!(cells.iter().filter(|c| **c == "0").count(), 1);
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p(&dir, "field.csv.json")).unwrap()).unwrap();
    assert_eq!(side["method"], "FastMarching");
    assert_eq!(
        code(&[
            "oracle",
            "--map",
            "uwall",
            "--goal",
            "0.5,0.5",
            "--out",
            s(&out)
        ]),
        2
    );
    assert_eq!(
        code(&[
            "oracle",
            "--map",
            "uwall",
            "--goal",
            "2.5",
            "--out",
            s(&out)
        ]),
        2
    );
}

#[test]
fn bounds_and_plot() {
    let dir = TempDir::new().unwrap();
    let (csv, svg) = (p(&dir, "b.csv"), p(&dir, "b.svg"));
    ok(&[
        "bounds",
        "--preset",
        "fig8",
        "--out",
        s(&csv),
        "--svg",
        s(&svg),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 7);
    assert_eq!(&header[..2], ["T", "k"]);
    assert_eq!(text.lines().count(), 62);
    let first = fs::read(&svg).unwrap();
    ok(&[
        "bounds",
        "--preset",
        "fig8",
        "--out",
        s(&csv),
        "--svg",
        s(&svg),
    ]);
    assert_eq!(first, fs::read(&svg).unwrap());
    assert_eq!(code(&["bounds", "--preset", "fig9", "--out", s(&csv)]), 2);

    let metrics = p(&dir, "m.csv");
    fs::write(
        &metrics,
        "run_id,seed,step,success_rate,collision_rate,spearman,rel_error,lipschitz_ratio\na,0,100,10,1,0.5,0.2,1\na,0,200,30,1,0.6,0.2,1\n",
    )
    .unwrap();
    let plot = p(&dir, "m.svg");
    ok(&[
        "plot",
        "--metrics",
        s(&metrics),
        "--metric",
        "success_rate",
        "--out",
        s(&plot),
    ]);
    let text = fs::read_to_string(&plot).unwrap();
    assert!(text.contains("<polyline") && !text.contains("<polygon"));
    assert_eq!(
        code(&[
            "plot",
            "--metrics",
            s(&metrics),
            "--metric",
            "speed",
            "--out",
            s(&plot)
        ]),
        2
    );
    fs::write(&metrics, "nonsense\n").unwrap();
    assert_eq!(
        code(&["plot", "--metrics", s(&metrics), "--out", s(&plot)]),
        2
    );
}
