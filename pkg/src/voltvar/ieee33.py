"""Reconstructed three-phase 33-node test feeder.

The standard single-phase 33-node feeder data (12.66 kV, 3715 kW / 2300 kvar
total load) is expanded to three phases: each branch impedance is placed on
the diagonal of a 3x3 matrix with a configurable mutual coupling factor, and
each load is split across the three phases with a configurable, seeded
unbalance.  ZIP coefficient triples are drawn per load from a small pool.

The expansion is a reconstruction: the original unbalanced parameters this
stands in for are not public, so the builder aims to preserve the feeder's
electrical scale rather than any exact line constants.
"""

from __future__ import annotations

import numpy as np

from .netmodel import Branch, Inverter, NetworkCase, NodePhase, ZipLoad, validate_case

V_BASE_KV = 12.66 / np.sqrt(3.0)  # per-phase, line to neutral
S_BASE_KVA = 1000.0  # per phase
Z_BASE_OHM = V_BASE_KV**2 * 1e3 / S_BASE_KVA

# from, to, R (ohm), X (ohm)
BRANCHES = [
    (1, 2, 0.0922, 0.0470),
    (2, 3, 0.4930, 0.2511),
    (3, 4, 0.3660, 0.1864),
    (4, 5, 0.3811, 0.1941),
    (5, 6, 0.8190, 0.7070),
    (6, 7, 0.1872, 0.6188),
    (7, 8, 0.7114, 0.2351),
    (8, 9, 1.0300, 0.7400),
    (9, 10, 1.0440, 0.7400),
    (10, 11, 0.1966, 0.0650),
    (11, 12, 0.3744, 0.1238),
    (12, 13, 1.4680, 1.1550),
    (13, 14, 0.5416, 0.7129),
    (14, 15, 0.5910, 0.5260),
    (15, 16, 0.7463, 0.5450),
    (16, 17, 1.2890, 1.7210),
    (17, 18, 0.7320, 0.5740),
    (2, 19, 0.1640, 0.1565),
    (19, 20, 1.5042, 1.3554),
    (20, 21, 0.4095, 0.4784),
    (21, 22, 0.7089, 0.9373),
    (3, 23, 0.4512, 0.3083),
    (23, 24, 0.8980, 0.7091),
    (24, 25, 0.8960, 0.7011),
    (6, 26, 0.2030, 0.1034),
    (26, 27, 0.2842, 0.1447),
    (27, 28, 1.0590, 0.9337),
    (28, 29, 0.8042, 0.7006),
    (29, 30, 0.5075, 0.2585),
    (30, 31, 0.9744, 0.9630),
    (31, 32, 0.3105, 0.3619),
    (32, 33, 0.3410, 0.5302),
]

# node: (kW, kvar), three-phase totals
LOADS = {
    2: (100, 60), 3: (90, 40), 4: (120, 80), 5: (60, 30), 6: (60, 20),
    7: (200, 100), 8: (200, 100), 9: (60, 20), 10: (60, 20), 11: (45, 30),
    12: (60, 35), 13: (60, 35), 14: (120, 80), 15: (60, 10), 16: (60, 20),
    17: (60, 20), 18: (90, 40), 19: (90, 40), 20: (90, 40), 21: (90, 40),
    22: (90, 40), 23: (90, 50), 24: (420, 200), 25: (420, 200), 26: (60, 25),
    27: (60, 25), 28: (60, 20), 29: (120, 70), 30: (200, 600), 31: (150, 70),
    32: (210, 100), 33: (60, 40),
}

# node -> (phases, per-channel rating kVA): the smart-inverter fleet
PV_FLEET = [
    (12, "ABC", 200.0), (13, "ABC", 200.0), (21, "AC", 200.0), (25, "BC", 200.0),
    (6, "ABC", 100.0), (14, "BC", 100.0), (20, "AC", 100.0), (24, "AB", 100.0),
    (26, "AC", 100.0),
    (17, "B", 50.0), (18, "B", 50.0), (22, "C", 50.0),
]

PCC_NODE = 4

# (a_z, a_i, a_p) triples the builder draws from, one pick per load part
ZIP_POOL = [
    (0.4, 0.3, 0.3),
    (0.2, 0.3, 0.5),
    (0.5, 0.25, 0.25),
    (0.3, 0.4, 0.3),
    (0.1, 0.2, 0.7),
]


def build_case(
    mutual_coupling: float = 0.3,
    unbalance: float = 0.1,
    seed: int = 33,
    load_scale: float = 1.0,
    impedance_jitter: float = 0.0,
) -> NetworkCase:
    """Construct the three-phase case.

    mutual_coupling: off-diagonal branch impedance as a fraction of the
        self impedance.
    unbalance: per-phase load share deviates from 1/3 by up to this
        fraction (seeded, zero-sum per node).
    impedance_jitter: optional uniform +-fraction perturbation of every
        branch impedance (used for model-mismatch studies).
    """
    rng = np.random.default_rng(seed)
    nodes = {n: "ABC" for n in range(1, 34)}

    branches = []
    for f, t, r, x in BRANCHES:
        z_self = complex(r, x) / Z_BASE_OHM
        if impedance_jitter:
            z_self *= 1.0 + impedance_jitter * rng.uniform(-1.0, 1.0)
        z = np.full((3, 3), mutual_coupling * z_self, dtype=complex)
        np.fill_diagonal(z, z_self)
        branches.append(Branch(f, t, "ABC", z))

    loads = []
    for node, (kw, kvar) in LOADS.items():
        shares = rng.uniform(-unbalance, unbalance, size=3)
        shares -= shares.mean()  # zero-sum: total load is preserved
        for ph, dev in zip("ABC", shares):
            s = complex(kw, kvar) * load_scale * (1.0 + dev) / 3.0
            loads.append(
                ZipLoad(
                    location=NodePhase(node, ph),
                    s0=s / S_BASE_KVA,
                    zip_p=ZIP_POOL[rng.integers(len(ZIP_POOL))],
                    zip_q=ZIP_POOL[rng.integers(len(ZIP_POOL))],
                )
            )

    inverters = []
    for node, phases, rating in PV_FLEET:
        for ph in phases:
            inverters.append(
                Inverter(
                    id=len(inverters),
                    location=NodePhase(node, ph),
                    s_rating=rating / S_BASE_KVA,
                )
            )

    monitored = [NodePhase(PCC_NODE, ph) for ph in "ABC"]
    monitored += sorted(inv.location for inv in inverters)

    case = NetworkCase(
        nodes=nodes,
        branches=tuple(branches),
        loads=tuple(loads),
        inverters=tuple(inverters),
        slack=1,
        v_base_kv=V_BASE_KV,
        s_base_kva=S_BASE_KVA,
        v_slack=1.0,
        monitored=tuple(monitored),
        name="ieee33_3ph",
        comment=(
            "Reconstructed three-phase expansion of the standard 33-node feeder: "
            f"mutual coupling {mutual_coupling}, load unbalance +-{unbalance}, "
            f"seed {seed}. Not the original unbalanced dataset."
        ),
    )
    report = validate_case(case)
    assert report.ok, report.problems
    return case
