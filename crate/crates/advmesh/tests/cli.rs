//! End-to-end checks of the command-line interface: determinism, exit codes,
//! file outputs, and the debug renderer.

use std::path::Path;
use std::process::Command;

fn advmesh() -> Command {
    Command::new(env!("CARGO_BIN_EXE_advmesh"))
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn gen_scenes_is_deterministic_and_rerunnable() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let status = advmesh()
            .args(["gen-scenes", "--n", "5", "--seed", "7", "--out"])
            .arg(out)
            .args(["--image-width", "176", "--image-height", "64"])
            .status()
            .unwrap();
        assert!(status.success());
    }
    for i in 0..5 {
        let name = format!("scene_{i:04}.json");
        assert_eq!(read(&out_a.join(&name)), read(&out_b.join(&name)), "{name} differs");
    }
}

#[test]
fn gen_scenes_zero_is_ok_and_bad_dir_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let status = advmesh().args(["gen-scenes", "--n", "0", "--out"]).arg(&out).status().unwrap();
    assert!(status.success());
    assert!(out.exists());

    let status = advmesh()
        .args(["gen-scenes", "--n", "1", "--out", "/proc/definitely/not/writable"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn bad_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[attack]\nnot_a_key = true\n").unwrap();
    let status = advmesh()
        .args(["--config"])
        .arg(&cfg)
        .args(["gen-scenes", "--n", "1", "--out"])
        .arg(dir.path().join("x"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn missing_scene_dir_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let status = advmesh()
        .args(["train-detector", "--scenes"])
        .arg(dir.path().join("nonexistent"))
        .args(["--out"])
        .arg(dir.path().join("det.json"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

/// One small end-to-end pass: scenes -> short train -> short attack -> eval
/// CSV -> render-debug, checking layouts and the per-threshold row count.
#[test]
fn pipeline_layout_and_eval_rows() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    let det = dir.path().join("det.json");
    let run = dir.path().join("run");

    assert!(advmesh()
        .args(["gen-scenes", "--n", "3", "--seed", "3", "--out"])
        .arg(&scenes)
        .args(["--image-width", "176", "--image-height", "64"])
        .status()
        .unwrap()
        .success());

    assert!(advmesh()
        .args(["train-detector", "--scenes"])
        .arg(&scenes)
        .args(["--out"])
        .arg(&det)
        .args(["--epochs", "1", "--channels", "4"])
        .status()
        .unwrap()
        .success());

    assert!(advmesh()
        .args(["attack", "--scenes"])
        .arg(&scenes)
        .args(["--detector"])
        .arg(&det)
        .args(["--out"])
        .arg(&run)
        .args(["--epochs", "2"])
        .status()
        .unwrap()
        .success());

    // documented run-directory layout
    for name in ["config.toml", "loss.csv", "loss_curve.svg", "mesh_epoch_01.obj", "mesh_epoch_02.obj", "mesh_final.obj", "sample_cam0.png"] {
        assert!(run.join(name).exists(), "missing {name}");
    }
    let loss_csv = String::from_utf8(read(&run.join("loss.csv"))).unwrap();
    assert_eq!(loss_csv.lines().count(), 3, "header + 2 epochs");
    assert!(loss_csv.starts_with("epoch,loss_cls,loss_loc,loss_sim,total"));

    // eval with four thresholds emits four CSV rows
    let csv = dir.path().join("eval.csv");
    assert!(advmesh()
        .args(["eval", "--scenes"])
        .arg(&scenes)
        .args(["--detector"])
        .arg(&det)
        .args(["--mesh"])
        .arg(run.join("mesh_final.obj"))
        .args(["--thresholds", "0.2,0.3,0.5,0.7", "--out"])
        .arg(&csv)
        .status()
        .unwrap()
        .success());
    let text = String::from_utf8(read(&csv)).unwrap();
    assert_eq!(text.lines().count(), 5, "header + 4 rows: {text}");

    // render-debug writes a PNG; occlusion processing changes pixels when an
    // occluder sits in front of the mesh (checked against --no-real-occ)
    let png_occ = dir.path().join("dbg_occ.png");
    let png_no = dir.path().join("dbg_no.png");
    for (flag, out) in [(false, &png_occ), (true, &png_no)] {
        let mut cmd = advmesh();
        cmd.args(["render-debug", "--scene"])
            .arg(scenes.join("scene_0000.json"))
            .args(["--mesh"])
            .arg(run.join("mesh_final.obj"))
            .args(["--camera", "0", "--out"])
            .arg(out);
        if flag {
            cmd.arg("--no-real-occ");
        }
        assert!(cmd.status().unwrap().success());
        assert!(out.exists());
    }

    // echoed config reloads and reproduces byte-identical eval CSV
    let csv2 = dir.path().join("eval2.csv");
    assert!(advmesh()
        .args(["--config"])
        .arg(run.join("config.toml"))
        .args(["eval", "--scenes"])
        .arg(&scenes)
        .args(["--detector"])
        .arg(&det)
        .args(["--mesh"])
        .arg(run.join("mesh_final.obj"))
        .args(["--thresholds", "0.2,0.3,0.5,0.7", "--out"])
        .arg(&csv2)
        .status()
        .unwrap()
        .success());
    assert_eq!(read(&csv), read(&csv2));
}

#[test]
fn help_lists_every_subcommand() {
    let out = advmesh().arg("--help").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["gen-scenes", "train-detector", "attack", "eval", "sweep", "render-debug"] {
        assert!(text.contains(sub), "help missing {sub}: {text}");
    }
}
