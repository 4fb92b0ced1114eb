use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use modscan::io;
use modscan::pipeline::{RunReport, SweepRow};
use ndarray::Array2;
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_modscan");

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().expect("run modscan");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

/// 6×6 maze scan with 64² frames, small enough for a quick full pipeline.
fn small_scene() -> Value {
    json!({
        "version": 1,
        "seed": 5,
        "simulation": {
            "geometry": {"wavelength_m": 632.8e-9, "z_sm_m": 11.5e-3, "z_md_m": 10e-3,
                         "detector_pitch_m": 6.5e-6, "frame_px": 64},
            "probe": {"diameter_m": 0.5e-3, "defocus_m": 0.5e-3},
            "sample": {"size_px": 256,
                       "pattern": {"kind": "maze", "cells": 32, "wall_px": 2, "seed": 1, "roughness": 0.3}},
            "modulator": {"pattern": {"kind": "random", "feature_px": 2, "seed": 2}, "phase_depth_rad": std::f64::consts::PI},
            "scan": {"grid": [6, 6], "overlap": 0.4, "jitter_px": 1.0, "seed": 3}
        },
        "reconstruct": {"engine": {"iterations": 150, "support": {"margin_fraction": 0.1}}},
        "assemble": {"epie": {"sweeps": 30}}
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn report(path: &Path) -> RunReport {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn files_except_reports(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() && p.file_name().unwrap() != "report.json" {
            out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
        }
    }
    out
}

#[test]
fn bundled_optical_config_echoes_in_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ds");
    let (code, _, err) = run(&["simulate", "--config", s(&bundled("optical_a3.json")), "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["n_frames"], 144);
    assert_eq!(m["wavelength_m"], 632.8e-9);
    assert_eq!(m["z_sm_m"], 11.5e-3);
    assert_eq!(m["detector_pitch_m"], 6.5e-6);
    assert_eq!(m["far_field"], true);
    let overlap = report(&out.join("report.json")).metrics.overlap_mean.unwrap();
    assert!((overlap - 0.4).abs() < 0.05, "overlap {overlap}");
}

#[test]
fn bundled_xray_config_echoes_in_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ds");
    let (code, _, err) = run(&["simulate", "--config", s(&bundled("xray_a2.json")), "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["wavelength_m"], 1.653e-10);
    assert_eq!(m["z_sm_m"], 6.56e-3);
    assert_eq!(m["z_md_m"], 7.7);
    assert_eq!(m["aperture_diameter_m"], 4.1e-6);
}

#[test]
fn missing_key_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_scene();
    cfg["simulation"]["geometry"].as_object_mut().unwrap().remove("z_md_m");
    let config = write_config(tmp.path(), &cfg);
    let (code, _, err) = run(&["simulate", "--config", s(&config), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code, 2);
    assert!(err.contains("z_md_m"), "{err}");
    assert!(err.contains("line"), "{err}");
}

#[test]
fn unknown_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_scene();
    cfg["simulation"]["scan"]["jiter_px"] = json!(1.0);
    let config = write_config(tmp.path(), &cfg);
    let (code, _, err) = run(&["simulate", "--config", s(&config), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code, 2);
    assert!(err.contains("jiter_px"), "{err}");
}

#[test]
fn aliased_geometry_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_scene();
    cfg["simulation"]["geometry"]["z_sm_m"] = json!(5.0);
    let config = write_config(tmp.path(), &cfg);
    let (code, _, err) = run(&["simulate", "--config", s(&config), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn existing_output_needs_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_scene());
    let out = tmp.path().join("ds");
    assert_eq!(run(&["simulate", "--config", s(&config), "--out", s(&out)]).0, 0);
    let (code, _, err) = run(&["simulate", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(code, 2);
    assert!(err.contains("--overwrite"), "{err}");
    assert_eq!(run(&["simulate", "--config", s(&config), "--out", s(&out), "--overwrite"]).0, 0);
}

#[test]
fn subsampled_grid_keeps_sparse_plan_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_scene();
    cfg["simulation"]["scan"]["subsample_stride"] = json!(2);
    let config = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("ds");
    let (code, _, err) = run(&["simulate", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    let ds = io::read_dataset(&out).unwrap();
    assert_eq!(ds.n_frames(), 9);
    assert_eq!(ds.scan_grid, Some((3, 3)));
    assert_eq!(io::read_positions(out.join("truth/positions.csv")).unwrap().len(), 9);
}

#[test]
fn full_pipeline_recovers_positions_and_stages_rerun_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_scene());
    let out = tmp.path().join("run");
    let (code, stdout, err) = run(&["pipeline", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("mean position error"), "{stdout}");

    let positions = io::read_positions(out.join("positions/positions.csv")).unwrap();
    assert_eq!(positions.len(), 36);
    let top = report(&out.join("report.json"));
    let err_px = top.metrics.mean_position_error_px.unwrap();
    assert!(err_px < 0.5, "mean position error {err_px}");
    let sweep: Vec<SweepRow> = io::read_csv(out.join("evaluate/sweep.csv")).unwrap();
    assert_eq!(sweep.len(), 1);
    assert_eq!(sweep[0].n_frames, 36);
    let errors = fs::read_to_string(out.join("evaluate/errors.csv")).unwrap();
    assert!(errors.starts_with("frame,dy,dx,magnitude\n"));
    let edges = fs::read_to_string(out.join("positions/edges.csv")).unwrap();
    assert!(edges.starts_with("i,j,dy,dx,confidence,peak_ratio,accepted\n"));

    // each stage rerun on its own reproduces the pipeline's files
    let pos2 = tmp.path().join("positions2");
    let (code, _, err) = run(&[
        "positions",
        "--config",
        s(&config),
        "--recon",
        s(&out.join("recon")),
        "--truth",
        s(&out.join("dataset")),
        "--out",
        s(&pos2),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(files_except_reports(&out.join("positions")), files_except_reports(&pos2));

    let asm2 = tmp.path().join("assemble2");
    let (code, _, err) = run(&[
        "assemble",
        "--config",
        s(&config),
        "--dataset",
        s(&out.join("dataset")),
        "--recon",
        s(&out.join("recon")),
        "--positions",
        s(&pos2.join("positions.csv")),
        "--out",
        s(&asm2),
        "--threads",
        "2",
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(files_except_reports(&out.join("assemble")), files_except_reports(&asm2));
    let amp = io::read_pgm(asm2.join("amplitude.pgm")).unwrap();
    assert!(amp.len() > 64 * 64);
}

#[test]
fn reconstruction_is_independent_of_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_scene();
    cfg["reconstruct"]["engine"]["iterations"] = json!(20);
    let config = write_config(tmp.path(), &cfg);
    let ds = tmp.path().join("ds");
    assert_eq!(run(&["simulate", "--config", s(&config), "--out", s(&ds)]).0, 0);
    let mut trees = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(format!("recon_{threads}"));
        let (code, _, err) = run(&[
            "reconstruct",
            "--config",
            s(&config),
            "--dataset",
            s(&ds),
            "--out",
            s(&out),
            "--threads",
            threads,
        ]);
        assert_eq!(code, 0, "{err}");
        trees.push(files_except_reports(&out));
    }
    assert!(trees[0].len() > 36 * 2);
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn seed_flag_overrides_config_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_scene();
    cfg["simulation"]["photons"] = json!(1e5);
    let config = write_config(tmp.path(), &cfg);
    let frames = |seed: &str, name: &str| {
        let out = tmp.path().join(name);
        assert_eq!(run(&["simulate", "--config", s(&config), "--out", s(&out), "--seed", seed]).0, 0);
        fs::read(out.join("frames.bin")).unwrap()
    };
    assert_eq!(frames("9", "a"), frames("9", "b"));
    assert_ne!(frames("9", "c"), frames("10", "d"));
}

#[test]
fn blank_frames_are_reported_featureless() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_scene());
    let dense = tmp.path().join("ds");
    assert_eq!(run(&["simulate", "--config", s(&config), "--out", s(&dense)]).0, 0);
    let mut ds = io::read_dataset(&dense).unwrap();
    let shape = ds.frame_shape();
    for f in ds.frames.iter_mut() {
        *f = Array2::from_elem(shape, 1.0);
    }
    let blank = tmp.path().join("blank");
    io::write_dataset(&blank, &ds).unwrap();

    let recon = tmp.path().join("recon");
    let (code, _, err) = run(&["reconstruct", "--config", s(&config), "--dataset", s(&blank), "--out", s(&recon)]);
    assert_eq!(code, 0, "{err}");
    let out = tmp.path().join("positions");
    let (code, _, err) = run(&["positions", "--recon", s(&recon), "--out", s(&out)]);
    assert_eq!(code, 4, "{err}");
    assert!(err.contains("featureless"), "{err}");
    assert!(err.contains("components"), "{err}");
}

#[test]
fn evaluate_without_truth_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_scene());
    let dense = tmp.path().join("ds");
    assert_eq!(run(&["simulate", "--config", s(&config), "--out", s(&dense)]).0, 0);
    let mut ds = io::read_dataset(&dense).unwrap();
    ds.truth = None;
    let bare = tmp.path().join("bare");
    io::write_dataset(&bare, &ds).unwrap();
    let (code, _, err) = run(&[
        "evaluate",
        "--positions",
        s(&dense.join("truth/positions.csv")),
        "--truth",
        s(&bare),
        "--out",
        s(&tmp.path().join("eval")),
    ]);
    assert_eq!(code, 2, "{err}");

    let (code, _, err) = run(&["reconstruct", "--dataset", s(&bare), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code, 2);
    assert!(err.contains("modulator"), "{err}");
}
