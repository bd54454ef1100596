"""Network case model: topology, three-phase branch impedances, ZIP loads,
inverter placement, and validation.

A case is loaded from a single JSON document (see `load_case` for the schema)
and converted to per-unit at load time.  Once built, a `NetworkCase` is
treated as immutable and may be shared freely between solver instances.

Conventions
-----------
* Phases are labelled "A", "B", "C"; a node may carry any non-empty subset.
* Impedances in the file are in ohms, powers in kVA, voltages in kV
  (per-phase, line to neutral).  Everything downstream of `load_case` is
  per-unit on (v_base, s_base), with s_base interpreted per phase.
* Complex values in the file are encoded as `[re, im]` pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

PHASES = "ABC"


class CaseError(ValueError):
    """Raised for unparseable or invalid case files."""


@dataclass(frozen=True, order=True)
class NodePhase:
    """A single electrical channel: one phase conductor at one node."""

    node: int
    phase: str

    def __post_init__(self):
        if self.phase not in PHASES:
            raise CaseError(f"unknown phase {self.phase!r} at node {self.node}")

    def __str__(self):
        return f"{self.node}{self.phase}"


@dataclass(frozen=True)
class Branch:
    """Series element between two nodes over their shared phases.

    `z` is the complex impedance matrix (p.u. after load) over `phases`,
    square and symmetric.
    """

    from_node: int
    to_node: int
    phases: str
    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=complex)
        object.__setattr__(self, "z", z)
        z.setflags(write=False)


@dataclass(frozen=True)
class ZipLoad:
    """Voltage-dependent load: quadratic polynomial in |v| for P and Q.

    `zip_p` and `zip_q` are (a_z, a_i, a_p) triples for the constant
    impedance / current / power shares; each triple sums to one.
    `s0` is the complex power drawn at nominal voltage (p.u.).
    """

    location: NodePhase
    s0: complex
    zip_p: tuple[float, float, float]
    zip_q: tuple[float, float, float]


@dataclass(frozen=True)
class Inverter:
    """Single-phase smart inverter with an apparent-power rating (p.u.)."""

    id: int
    location: NodePhase
    s_rating: float


@dataclass(frozen=True)
class NetworkCase:
    """Immutable plant description.

    `nodes` maps node index to the string of phases present there.
    `monitored` is the ordered list of observable channels; it drives the
    layout of every measurement vector in the package.
    """

    nodes: dict[int, str]
    branches: tuple[Branch, ...]
    loads: tuple[ZipLoad, ...]
    inverters: tuple[Inverter, ...]
    slack: int
    v_base_kv: float
    s_base_kva: float
    v_slack: float
    monitored: tuple[NodePhase, ...]
    name: str = ""
    comment: str = ""

    @property
    def node_phases(self) -> tuple[NodePhase, ...]:
        """All channels in the case, sorted by (node, phase)."""
        out = []
        for node in sorted(self.nodes):
            for ph in self.nodes[node]:
                out.append(NodePhase(node, ph))
        return tuple(out)

    def has_channel(self, np_: NodePhase) -> bool:
        return np_.node in self.nodes and np_.phase in self.nodes[np_.node]


@dataclass
class ValidationReport:
    ok: bool
    problems: list[str] = field(default_factory=list)

    def __bool__(self):
        return self.ok


def validate_case(case: NetworkCase) -> ValidationReport:
    """Check every structural invariant of a case.

    Returns a report rather than raising, so callers can surface all
    problems at once.
    """
    problems: list[str] = []

    if case.slack not in case.nodes:
        problems.append(f"slack node {case.slack} does not exist")
    if case.v_slack <= 0:
        problems.append(f"slack reference must be positive, got {case.v_slack}")
    if case.v_base_kv <= 0 or case.s_base_kva <= 0:
        problems.append("bases must be positive")

    for node, phases in case.nodes.items():
        if not phases or any(p not in PHASES for p in phases):
            problems.append(f"node {node} has invalid phase set {phases!r}")
        if len(set(phases)) != len(phases):
            problems.append(f"node {node} repeats a phase: {phases!r}")

    # Branch structure: endpoints exist, z matches the shared phases and is
    # symmetric, and the branch set forms a connected radial tree.
    adjacency: dict[int, set[int]] = {n: set() for n in case.nodes}
    for br in case.branches:
        label = f"branch {br.from_node}-{br.to_node}"
        if br.from_node not in case.nodes or br.to_node not in case.nodes:
            problems.append(f"{label} references a nonexistent node")
            continue
        shared = [p for p in case.nodes[br.from_node] if p in case.nodes[br.to_node]]
        if list(br.phases) != shared:
            problems.append(
                f"{label} phases {br.phases!r} do not match shared phases {''.join(shared)!r}"
            )
        n = len(br.phases)
        if br.z.shape != (n, n):
            problems.append(f"{label} impedance matrix has shape {br.z.shape}, want {(n, n)}")
            continue
        if not np.all(np.isfinite(br.z)):
            problems.append(f"{label} impedance matrix has non-finite entries")
        elif not np.allclose(br.z, br.z.T, rtol=1e-9, atol=1e-12):
            problems.append(f"{label} impedance matrix is not symmetric")
        adjacency[br.from_node].add(br.to_node)
        adjacency[br.to_node].add(br.from_node)

    if case.slack in case.nodes:
        seen = {case.slack}
        stack = [case.slack]
        while stack:
            for nxt in adjacency[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        if seen != set(case.nodes):
            missing = sorted(set(case.nodes) - seen)
            problems.append(f"nodes unreachable from slack: {missing}")
        elif len(case.branches) != len(case.nodes) - 1:
            problems.append(
                f"network is not radial: {len(case.branches)} branches for "
                f"{len(case.nodes)} nodes"
            )

    for ld in case.loads:
        label = f"load at {ld.location}"
        if not case.has_channel(ld.location):
            problems.append(f"{label}: channel does not exist")
        for tag, triple in (("P", ld.zip_p), ("Q", ld.zip_q)):
            if any(c < 0 for c in triple):
                problems.append(f"{label}: negative {tag} ZIP coefficient {triple}")
            if abs(sum(triple) - 1.0) > 1e-9:
                problems.append(
                    f"{label}: {tag} ZIP coefficients sum to {sum(triple):.10g}, not 1"
                )

    seen_loc: set[NodePhase] = set()
    for inv in case.inverters:
        label = f"inverter {inv.id} at {inv.location}"
        if not case.has_channel(inv.location):
            problems.append(f"{label}: channel does not exist")
        if inv.s_rating <= 0:
            problems.append(f"{label}: rating must be positive, got {inv.s_rating}")
        if inv.location in seen_loc:
            problems.append(f"{label}: duplicate inverter placement")
        seen_loc.add(inv.location)

    if not case.monitored:
        problems.append("monitored channel list is empty")
    if len(set(case.monitored)) != len(case.monitored):
        problems.append("monitored channel list contains duplicates")
    for ch in case.monitored:
        if not case.has_channel(ch):
            problems.append(f"monitored channel {ch} does not exist")
    unmonitored = [str(i.location) for i in case.inverters if i.location not in case.monitored]
    if unmonitored:
        problems.append(f"inverter channels not monitored: {unmonitored}")

    return ValidationReport(ok=not problems, problems=problems)


def inverter_channels(case: NetworkCase) -> list[tuple[int, NodePhase]]:
    """Fix the ordering of the reactive-dispatch vector.

    Channels are sorted by ascending node then phase A<B<C; every
    vector-valued quantity indexed by inverter uses this order.
    """
    return sorted(((inv.id, inv.location) for inv in case.inverters), key=lambda t: t[1])


def _complex_from(pair) -> complex:
    if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
        raise CaseError(f"complex values must be [re, im] pairs, got {pair!r}")
    return complex(float(pair[0]), float(pair[1]))


def _zmatrix_from(entries, n: int) -> np.ndarray:
    z = np.empty((n, n), dtype=complex)
    if len(entries) != n:
        raise CaseError(f"impedance matrix has {len(entries)} rows, want {n}")
    for i, row in enumerate(entries):
        if len(row) != n:
            raise CaseError(f"impedance matrix row {i} has {len(row)} entries, want {n}")
        for j, pair in enumerate(row):
            z[i, j] = _complex_from(pair)
    return z


def load_case(path: str | Path) -> NetworkCase:
    """Parse a case file and convert to per-unit.

    Schema (all physical units): top-level keys `nodes`, `branches`,
    `loads`, `inverters`, `slack`, `bases`, `monitored`.

    * nodes:      [{"id": int, "phases": "ABC"}]
    * branches:   [{"from": int, "to": int, "phases": "ABC",
                    "z_ohm": [[[re, im], ...], ...]}]
    * loads:      [{"node": int, "phase": "A", "s_kva": [re, im],
                    "zip_p": [az, ai, ap], "zip_q": [az, ai, ap]}]
    * inverters:  [{"node": int, "phase": "A", "s_rating_kva": float}]
    * bases:      {"v_kv": per-phase kV, "s_kva": per-phase kVA,
                   "v_slack_pu": float}
    * monitored:  [[node, "A"], ...]

    Raises `CaseError` for malformed documents or validation failures.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise CaseError(f"cannot read case file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CaseError(f"case file {path} is not valid JSON: {exc}") from exc

    try:
        bases = doc["bases"]
        v_base = float(bases["v_kv"])
        s_base = float(bases["s_kva"])
        v_slack = float(bases.get("v_slack_pu", 1.0))
        z_base = v_base**2 * 1e3 / s_base  # ohm

        nodes = {int(n["id"]): str(n["phases"]) for n in doc["nodes"]}

        branches = []
        for b in doc["branches"]:
            phases = str(b["phases"])
            z = _zmatrix_from(b["z_ohm"], len(phases)) / z_base
            branches.append(Branch(int(b["from"]), int(b["to"]), phases, z))

        loads = []
        for ld in doc.get("loads", []):
            loads.append(
                ZipLoad(
                    location=NodePhase(int(ld["node"]), str(ld["phase"])),
                    s0=_complex_from(ld["s_kva"]) / s_base,
                    zip_p=tuple(float(c) for c in ld["zip_p"]),
                    zip_q=tuple(float(c) for c in ld["zip_q"]),
                )
            )

        inverters = []
        for k, inv in enumerate(doc.get("inverters", [])):
            inverters.append(
                Inverter(
                    id=k,
                    location=NodePhase(int(inv["node"]), str(inv["phase"])),
                    s_rating=float(inv["s_rating_kva"]) / s_base,
                )
            )

        monitored = tuple(NodePhase(int(n), str(p)) for n, p in doc["monitored"])

        case = NetworkCase(
            nodes=nodes,
            branches=tuple(branches),
            loads=tuple(loads),
            inverters=tuple(inverters),
            slack=int(doc["slack"]),
            v_base_kv=v_base,
            s_base_kva=s_base,
            v_slack=v_slack,
            monitored=monitored,
            name=str(doc.get("name", path.stem)),
            comment=str(doc.get("comment", "")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CaseError):
            raise
        raise CaseError(f"case file {path} is malformed: {exc}") from exc

    report = validate_case(case)
    if not report:
        raise CaseError(
            f"case file {path} failed validation:\n  " + "\n  ".join(report.problems)
        )
    return case


def serialize_case(case: NetworkCase, path: str | Path) -> None:
    """Write a case back to the JSON schema accepted by `load_case`."""
    z_base = case.v_base_kv**2 * 1e3 / case.s_base_kva
    s_base = case.s_base_kva

    def pair(c: complex):
        return [c.real, c.imag]

    doc = {
        "name": case.name,
        "comment": case.comment,
        "bases": {
            "v_kv": case.v_base_kv,
            "s_kva": case.s_base_kva,
            "v_slack_pu": case.v_slack,
        },
        "slack": case.slack,
        "nodes": [{"id": n, "phases": case.nodes[n]} for n in sorted(case.nodes)],
        "branches": [
            {
                "from": br.from_node,
                "to": br.to_node,
                "phases": br.phases,
                "z_ohm": [[pair(z * z_base) for z in row] for row in br.z],
            }
            for br in case.branches
        ],
        "loads": [
            {
                "node": ld.location.node,
                "phase": ld.location.phase,
                "s_kva": pair(ld.s0 * s_base),
                "zip_p": list(ld.zip_p),
                "zip_q": list(ld.zip_q),
            }
            for ld in case.loads
        ],
        "inverters": [
            {
                "node": inv.location.node,
                "phase": inv.location.phase,
                "s_rating_kva": inv.s_rating * s_base,
            }
            for inv in case.inverters
        ],
        "monitored": [[ch.node, ch.phase] for ch in case.monitored],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def subset_fleet(case: NetworkCase, nodes: set[int]) -> NetworkCase:
    """Restrict the controlled fleet to inverters at the given nodes.

    Channels of dropped inverters are also removed from the monitored list.
    Useful for reduced-order control experiments on a full plant.
    """
    kept = [inv for inv in case.inverters if inv.location.node in nodes]
    dropped = {inv.location for inv in case.inverters if inv.location.node not in nodes}
    inverters = tuple(replace(inv, id=k) for k, inv in enumerate(kept))
    monitored = tuple(ch for ch in case.monitored if ch not in dropped)
    return replace(case, inverters=inverters, monitored=monitored)
