//! Library-level closed loop on a small scene, plus the on-disk stage chain.

use modscan::engine::{self, DriftConfig, Engine, Priors, ReconConfig, ReconMode};
use modscan::pipeline::{self, RunConfig};
use modscan::register::{self, EdgeStrategy, RegisterConfig};
use modscan::simulate::{self, DriftModel, ModulatorKind, ProbeKind, SampleKind};
use modscan::{io, Geometry};

fn small_dataset(grid: (usize, usize)) -> simulate::ScanDataset {
    let n = 64;
    let g = Geometry::far_field(632.8e-9, 11.5e-3, 10e-3, 6.5e-6, n).unwrap();
    let pitch = g.sample_plane_pitch;
    let probe = simulate::generate_probe(&g, (n, n), ProbeKind::Aperture, 0.5e-3, 0.5e-3).unwrap();
    let sample = simulate::generate_sample(
        &SampleKind::Maze {
            cells: 32,
            wall_px: 2,
            seed: 1,
            roughness: 0.3,
        },
        (256, 256),
        pitch,
        (0.6, 1.0),
        (0.0, 0.6),
    )
    .unwrap();
    let modulator = simulate::generate_modulator(
        (n, n),
        pitch,
        ModulatorKind::Random {
            feature_px: 2,
            density: 0.5,
            seed: 2,
        },
        std::f64::consts::PI,
    )
    .unwrap();
    let step = simulate::spacing_for_overlap(0.4, simulate::power_diameter(probe.data(), 0.9));
    let plan = simulate::make_scan_plan(grid, step, 1.0, 3).unwrap();
    let mut ds =
        simulate::synthesize_dataset(&sample, &probe, &modulator, &plan, &DriftModel::none(), &g, None, 4).unwrap();
    ds.aperture_diameter = Some(0.5e-3);
    ds
}

#[test]
fn positions_recovered_from_exit_waves_alone() {
    let ds = small_dataset((4, 4));
    let mut cfg = ReconConfig::for_mode(ReconMode::Exitwave);
    cfg.iterations = 150;
    cfg.support.margin_fraction = 0.1;
    let mut state = engine::init_state(&ds, &cfg, &Priors::default()).unwrap();
    Engine::new(&ds, cfg).unwrap().run(&mut state).unwrap();
    assert!(state.last_residual().unwrap() < 1e-2);

    let drift = engine::estimate_probe_drift(&state.exit_waves, None, &DriftConfig::default()).unwrap();
    let sep = engine::separate_probe_object(&state.exit_waves, &drift.drifts, &state.support, cfg.division_epsilon)
        .unwrap();
    let rc = RegisterConfig {
        strategy: EdgeStrategy::Raster {
            cols: 4,
            diagonals: false,
        },
        ..RegisterConfig::default()
    };
    let (positions, edges) = pipeline::recover_positions(&sep.objects, &rc).unwrap();
    assert_eq!(edges.len(), 24);
    let truth = &ds.truth.as_ref().unwrap().plan.positions;
    let score = register::score_positions(&positions, truth).unwrap();
    assert!(score.mean < 0.5, "mean position error {}", score.mean);
}

#[test]
fn dataset_survives_disk_roundtrip() {
    let ds = small_dataset((2, 3));
    let tmp = tempfile::tempdir().unwrap();
    io::write_dataset(tmp.path(), &ds).unwrap();
    let back = io::read_dataset(tmp.path()).unwrap();
    assert_eq!(back.n_frames(), 6);
    assert_eq!(back.scan_grid, Some((2, 3)));
    let t = back.truth.as_ref().unwrap();
    assert_eq!(t.plan.positions, ds.truth.as_ref().unwrap().plan.positions);
    // frames are stored as f32
    for (a, b) in back.frames.iter().zip(&ds.frames) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1e-12));
        }
    }
}

#[test]
fn stages_chain_through_disk() {
    let cfg = RunConfig::from_json(
        r#"{
            "version": 1,
            "seed": 3,
            "simulation": {
                "geometry": {"wavelength_m": 632.8e-9, "z_sm_m": 11.5e-3, "z_md_m": 10e-3,
                             "detector_pitch_m": 6.5e-6, "frame_px": 64},
                "probe": {"diameter_m": 0.5e-3, "defocus_m": 0.5e-3},
                "sample": {"size_px": 256, "pattern": {"kind": "maze", "cells": 32, "wall_px": 2, "seed": 1, "roughness": 0.3}},
                "modulator": {"pattern": {"kind": "random", "feature_px": 2, "seed": 2}, "phase_depth_rad": 3.14159},
                "scan": {"grid": [4, 4], "overlap": 0.4, "jitter_px": 1.0, "seed": 3}
            },
            "reconstruct": {"engine": {"iterations": 150, "support": {"margin_fraction": 0.1}}},
            "assemble": {"epie": {"sweeps": 15}, "second_pass": false}
        }"#,
    )
    .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let report = pipeline::pipeline(&cfg, tmp.path(), false).unwrap();
    assert_eq!(report.stage, "pipeline");
    assert!(report.metrics.mean_position_error_px.unwrap() < 0.5);
    assert!(report.metrics.nrmse.unwrap().is_finite());

    let recon = pipeline::read_recon(&tmp.path().join("recon")).unwrap();
    assert_eq!(recon.objects.len(), 16);
    assert_eq!(recon.summary.scan_grid, Some([4, 4]));
    // the probe files are identical in shape to the frames
    assert_eq!(recon.probe.shape(), (64, 64));

    // a second run into the same directory needs explicit permission
    assert!(pipeline::pipeline(&cfg, tmp.path(), false).is_err());
}
