"""Smoke test for the modscan_py extension.

Build first:  cargo build --release -p modscan-python
Then run:     python3 python/smoke_test.py [path/to/libmodscan_py.so]
"""

import importlib.util
import json
import math
import os
import shutil
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.abspath(os.path.join(HERE, ".."))

CONFIG = {
    "version": 1,
    "seed": 5,
    "simulation": {
        "geometry": {"wavelength_m": 632.8e-9, "z_sm_m": 11.5e-3, "z_md_m": 10e-3,
                     "detector_pitch_m": 6.5e-6, "frame_px": 64},
        "probe": {"diameter_m": 0.5e-3, "defocus_m": 0.5e-3},
        "sample": {"size_px": 256,
                   "pattern": {"kind": "maze", "cells": 32, "wall_px": 2, "seed": 1, "roughness": 0.3}},
        "modulator": {"pattern": {"kind": "random", "feature_px": 2, "seed": 2}, "phase_depth_rad": 3.14159},
        "scan": {"grid": [4, 4], "overlap": 0.4, "jitter_px": 1.0, "seed": 3},
    },
    "reconstruct": {"engine": {"iterations": 150, "support": {"margin_fraction": 0.1}}},
    "assemble": {"epie": {"sweeps": 20}},
}


def load(path):
    # the shared object must be importable under its module name
    tmp = tempfile.mkdtemp()
    target = os.path.join(tmp, "modscan_py.so")
    shutil.copy(path, target)
    spec = importlib.util.spec_from_file_location("modscan_py", target)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    lib = sys.argv[1] if len(sys.argv) > 1 else os.path.join(ROOT, "target", "release", "libmodscan_py.so")
    m = load(lib)
    print("modscan_py", m.__version__)

    assert abs(m.spearman([1, 2, 3, 4], [2, 1, 4, 3]) - 0.6) < 1e-12
    assert m.score_positions([(0, 0), (1, 1)], [(5, 5), (6, 6)])[0] == 0.0

    try:
        m.simulate(json.dumps({"version": 1, "simulation": {}}), "/nonexistent")
    except m.ConfigError as e:
        assert "geometry" in str(e), e
    else:
        raise AssertionError("missing keys must raise ConfigError")

    with tempfile.TemporaryDirectory() as tmp:
        out = os.path.join(tmp, "run")
        report = json.loads(m.run_pipeline(json.dumps(CONFIG), out))
        err = report["metrics"]["mean_position_error_px"]
        print(f"pipeline: {report['metrics']['n_frames']} frames, mean position error {err:.3f} px")
        assert report["stage"] == "pipeline"
        assert err < 0.5, err

        positions = m.read_positions(os.path.join(out, "positions", "positions.csv"))
        assert len(positions) == 16
        h, w, pitch, values = m.read_cfield(os.path.join(out, "assemble", "object_full.cfield"))
        assert len(values) == h * w and pitch > 0
        assert all(math.isfinite(abs(v)) for v in values)

        ev = json.loads(m.evaluate(os.path.join(out, "dataset", "truth", "positions.csv"),
                                   os.path.join(out, "dataset"), os.path.join(tmp, "eval")))
        assert ev["metrics"]["mean_position_error_px"] == 0.0
    print("smoke test passed")


if __name__ == "__main__":
    main()
