//! End-to-end tests against the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_patchgen"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("patchgen_cli_{}_{}", name, std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY_CONFIG: &str = r#"{
  "seed": 7,
  "model": { "layers": 1, "dim": 16, "heads": 2, "m_side": 2, "vocab": 64, "text": true, "extent": [1, 1, 1] },
  "train": { "epochs": 1, "batch": 4, "lr": 0.002, "warmup": 0.1, "loss": "patch", "max_steps": 8 },
  "data": { "synth": { "count": 16, "grid": "2x2", "families": ["vstripes", "checker"], "periods": [2], "deltas": [16], "seed": 3 } }
}"#;

fn trained_checkpoint(dir: &Path) -> PathBuf {
    std::fs::write(dir.join("cfg.json"), TINY_CONFIG).unwrap();
    let out = run(
        &["train", "--config", "cfg.json", "--out", "ckpt/model"],
        dir,
    );
    assert!(out.status.success(), "train failed: {out:?}");
    dir.join("ckpt/model")
}

#[test]
fn plan_order_prints_the_row_major_matrix() {
    let dir = tmp("plan");
    let out = run(&["plan-order", "--grid", "3x3", "--order", "omega"], &dir);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("1 2 3\n4 5 6\n7 8 9\n"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn plan_order_renders_ring_composition_and_heatmap() {
    let dir = tmp("ring");
    let out = run(
        &[
            "plan-order",
            "--grid",
            "4x4",
            "--cond",
            "1,1,2x2",
            "--out",
            "plan/ring",
        ],
        &dir,
    );
    assert!(out.status.success());
    assert!(stdout(&out).starts_with(" 5  6  7  8\n13  1  2 15\n14  3  4 16\n 9 10 11 12\n"));
    let ppm = std::fs::read(dir.join("plan/ring.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n32 32\n255\n"));
    assert!(dir.join("plan/ring.report.json").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn bench_reports_flat_cost_in_pool_mode_and_growth_without() {
    let dir = tmp("bench");
    let pooled = run(&["bench", "--grid", "4x32", "--extent", "2,2,0"], &dir);
    assert!(pooled.status.success());
    let rows: Vec<Vec<usize>> = stdout(&pooled)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 128);
    // Patches with a full extent neighborhood share one attended count.
    let full: Vec<usize> = rows
        .iter()
        .filter(|r| {
            let (row, col) = (r[0] / 32, r[0] % 32);
            row >= 2 && (2..30).contains(&col)
        })
        .map(|r| r[2])
        .collect();
    assert!(!full.is_empty());
    assert!(full.windows(2).all(|w| w[0] == w[1]), "{full:?}");

    let free = run(
        &["bench", "--grid", "4x32", "--extent", "2,2,0", "--no-pool"],
        &dir,
    );
    let last: Vec<usize> = stdout(&free)
        .lines()
        .last()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(last[1], 127, "full context sees every previous patch");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_generate_roundtrip_is_byte_deterministic() {
    let dir = tmp("gen");
    let ckpt = trained_checkpoint(&dir);
    assert!(ckpt.with_extension("json").exists());
    assert!(dir.join("ckpt/model.report.json").exists());

    for name in ["a", "b"] {
        let out = run(
            &[
                "generate",
                "--ckpt",
                "ckpt/model",
                "--target",
                "2x3",
                "--text",
                "vstripes period2 v1 v0",
                "--seed",
                "11",
                "--sampler",
                "topk",
                "--topk",
                "3",
                "--temperature",
                "0.8",
                "--out",
                &format!("gen/{name}"),
            ],
            &dir,
        );
        assert!(out.status.success(), "{out:?}");
    }
    let a_nwit = std::fs::read(dir.join("gen/a.nwit")).unwrap();
    let b_nwit = std::fs::read(dir.join("gen/b.nwit")).unwrap();
    assert_eq!(a_nwit, b_nwit);
    assert_eq!(
        std::fs::read(dir.join("gen/a.ppm")).unwrap(),
        std::fs::read(dir.join("gen/b.ppm")).unwrap()
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("gen/a.report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 11);
    assert!(report["config_hash"].is_string());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn outpaint_preserves_the_condition_and_animate_extends_frames() {
    let dir = tmp("cond");
    let ckpt = trained_checkpoint(&dir);

    // Build a condition by generating a small canvas first.
    let out = run(
        &[
            "generate",
            "--ckpt",
            "ckpt/model",
            "--target",
            "2x2",
            "--seed",
            "2",
            "--out",
            "gen/cond",
        ],
        &dir,
    );
    assert!(out.status.success(), "{out:?}");

    let out = run(
        &[
            "outpaint",
            "--ckpt",
            "ckpt/model",
            "--cond",
            "gen/cond.nwit",
            "--place",
            "1,1",
            "--target",
            "4x4",
            "--out",
            "gen/op",
        ],
        &dir,
    );
    assert!(out.status.success(), "{out:?}");
    let cond = patchgen_core::grid::TokenGrid::read_nwit(&dir.join("gen/cond.nwit")).unwrap();
    let op = patchgen_core::grid::TokenGrid::read_nwit(&dir.join("gen/op.nwit")).unwrap();
    for r in 0..2 {
        for c in 0..2 {
            assert_eq!(
                cond.patch(patchgen_core::grid::PatchCoord::image(r, c)).unwrap(),
                op.patch(patchgen_core::grid::PatchCoord::image(1 + r, 1 + c)).unwrap()
            );
        }
    }

    let out = run(
        &[
            "animate",
            "--ckpt",
            "ckpt/model",
            "--cond",
            "gen/cond.nwit",
            "--target",
            "2x2x3",
            "--out",
            "gen/anim",
        ],
        &dir,
    );
    assert!(out.status.success(), "{out:?}");
    let anim = patchgen_core::grid::TokenGrid::read_nwit(&dir.join("gen/anim.nwit")).unwrap();
    assert_eq!(anim.dims().f, 3);
    for r in 0..2 {
        for c in 0..2 {
            assert_eq!(
                cond.patch(patchgen_core::grid::PatchCoord::image(r, c)).unwrap(),
                anim.patch(patchgen_core::grid::PatchCoord::new(r, c, 0)).unwrap()
            );
        }
    }
    assert!(dir.join("gen/anim.f2.ppm").exists());

    let _ = ckpt;
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn eval_reports_cross_entropy_for_a_dataset_directory() {
    let dir = tmp("eval");
    let ckpt = trained_checkpoint(&dir);
    let _ = ckpt;

    // Dataset directory with captions.
    std::fs::create_dir_all(dir.join("data")).unwrap();
    let dims = patchgen_core::grid::GridDims::new(2, 2, 1, 2, 64).unwrap();
    let spec = patchgen_core::codec::PatternSpec {
        family: patchgen_core::codec::PatternFamily::VStripes,
        period: 2,
        base: 4,
        delta: 16,
    };
    spec.render(&dims)
        .unwrap()
        .write_nwit(&dir.join("data/s0.nwit"))
        .unwrap();
    std::fs::write(dir.join("data/s0.txt"), "vstripes period2 v1 v0").unwrap();

    let out = run(&["eval", "--ckpt", "ckpt/model", "--data", "data"], &dir);
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("mean per-token cross-entropy"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gradcheck_exits_zero_when_all_ops_pass() {
    let dir = tmp("gc");
    let out = run(&["gradcheck", "--seed", "5", "--cases", "3"], &dir);
    assert!(out.status.success());
    assert!(stdout(&out).contains("attention"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn exit_codes_distinguish_usage_data_and_state_errors() {
    let dir = tmp("codes");
    // Unknown flag: usage error.
    let out = run(&["plan-order", "--grid", "3x3", "--nope"], &dir);
    assert_eq!(out.status.code(), Some(1));
    // Bad grid spec: usage error.
    let out = run(&["plan-order", "--grid", "3by3"], &dir);
    assert_eq!(out.status.code(), Some(1));
    // Condition outside the grid: geometry error.
    let out = run(&["plan-order", "--grid", "3x3", "--cond", "2,2,3x3"], &dir);
    assert_eq!(out.status.code(), Some(2));
    // Missing checkpoint: data error.
    let out = run(
        &["generate", "--ckpt", "nothere", "--target", "2x2", "--out", "x"],
        &dir,
    );
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_dir_all(&dir).ok();
}
