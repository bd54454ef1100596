#!/usr/bin/env python3
"""Regenerate the bundled case, profile, and scenario configuration.

Run from the repository root:  python3 tools/make_bundled_data.py
"""

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from voltvar.ieee33 import build_case
from voltvar.netmodel import serialize_case

DATA = Path(__file__).resolve().parents[1] / "src" / "voltvar" / "data"

T0 = 36000  # 10:00:00
HORIZON = 121  # through 10:02:00


def write_profile(path: Path) -> None:
    t = np.arange(T0, T0 + HORIZON)
    x = t - T0
    pv = (
        0.88
        + 0.03 * np.sin(2 * np.pi * x / 180.0)
        + 0.010 * np.sin(2 * np.pi * x / 23.0 + 0.7)
        + 0.006 * np.sin(2 * np.pi * x / 7.3 + 2.9)
    )
    load = (
        1.00
        + 0.02 * np.sin(2 * np.pi * x / 240.0 + 2.1)
        + 0.003 * np.sin(2 * np.pi * x / 31.0)
        + 0.0018 * np.sin(2 * np.pi * x / 11.7 + 1.3)
    )
    with path.open("w") as fh:
        fh.write("t,pv_scale,load_scale\n")
        for ti, p, l in zip(t, pv, load):
            fh.write(f"{ti},{p:.6f},{l:.6f}\n")


def write_config(path: Path) -> None:
    config = {
        "case": "ieee33_3ph.json",
        "profile": "day_fragment.csv",
        "policy": "proposed",
        "seed": 7,
        "horizon": None,
        "noise_sigma": 0.001,
        "bounds": [0.95, 1.05],
        "pv_p_factor": 0.8,
        "events": [
            {"time": 36015, "kind": "pv_step", "magnitude": -0.4},
            {"time": 36031, "kind": "zip_switch", "magnitude": 0.0},
        ],
        "controller": {
            "alpha1": 10.0,
            "alpha2": 5.0,
            "d": 0.1,
            "v_target": 1.0,
            "window": 10,
            "beta": 0.95,
            "lambda": 3e-3,
            "dither": 0.1,
        },
        "droop": {"gamma": 5.0, "v_ref": 1.0},
        "out_of_area": [
            {"node": 28, "phase": "A", "s_rating_kva": 100.0, "p_rating_kva": 80.0},
            {"node": 31, "phase": "B", "s_rating_kva": 100.0, "p_rating_kva": 80.0},
            {"node": 33, "phase": "C", "s_rating_kva": 100.0, "p_rating_kva": 80.0},
        ],
        "solver": {"tol": 1e-8, "max_iter": 200},
        "stale": {"mismatch": 0.0, "perturbation": 1e-4},
    }
    path.write_text(json.dumps(config, indent=1))


def main() -> None:
    DATA.mkdir(parents=True, exist_ok=True)
    serialize_case(build_case(), DATA / "ieee33_3ph.json")
    write_profile(DATA / "day_fragment.csv")
    write_config(DATA / "scenario_fragment.json")
    print(f"wrote case, profile, config under {DATA}")


if __name__ == "__main__":
    main()
