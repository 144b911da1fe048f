"""Grid representation: buses, branches, generators and the matrices built on them.

Cases are read from a JSON document mirroring matrix-style case data::

    {"base_mva": 100,
     "buses": [{"id", "kind", "v_mag", "v_ang", "p_load", "q_load", "base_kv"}, ...],
     "branches": [{"from", "to", "r", "x", "b", "tap", "rating"}, ...],
     "generators": [{"bus", "p_set", "q_set", "v_set", "p_max", "p_min"}, ...]}

Bus entries may additionally carry fixed shunts ``gs``/``bs`` (MW/MVAr at 1 p.u.).
Powers are in MW/MVAr, impedances in per-unit on ``base_mva``, angles in radians.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .exceptions import (
    DisconnectedGraph,
    DuplicateSlack,
    MalformedCase,
    NoSlackBus,
    ZeroImpedanceBranch,
)

logger = logging.getLogger(__name__)

BUNDLED_CASES = ("ieee14", "ieee24")


class BusKind(str, enum.Enum):
    SLACK = "Slack"
    PV = "PV"
    PQ = "PQ"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    v_mag_init: float = 1.0
    v_ang_init: float = 0.0
    p_load: float = 0.0
    q_load: float = 0.0
    base_kv: float = 0.0
    gs: float = 0.0
    bs: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    rating: float = 0.0


@dataclass(frozen=True)
class Generator:
    bus: int
    p_set: float
    q_set: float = 0.0
    v_set: float = 1.0
    p_max: float = np.inf
    p_min: float = 0.0


@dataclass(frozen=True)
class NetworkCase:
    """An immutable grid model with dense 0-based bus indices.

    ``bus_ids`` keeps the original identifiers from the case file, in index
    order, so reports can translate back.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...] = ()
    base_mva: float = 100.0
    name: str = "case"
    bus_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        if not self.bus_ids:
            object.__setattr__(self, "bus_ids", tuple(range(len(self.buses))))

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def slack(self) -> int:
        for bus in self.buses:
            if bus.kind is BusKind.SLACK:
                return bus.id
        raise NoSlackBus(f"case {self.name!r} has no slack bus")

    @property
    def pv(self) -> np.ndarray:
        return np.array([b.id for b in self.buses if b.kind is BusKind.PV], dtype=int)

    @property
    def pq(self) -> np.ndarray:
        return np.array([b.id for b in self.buses if b.kind is BusKind.PQ], dtype=int)

    def gen_p(self) -> np.ndarray:
        """Scheduled generation per bus in MW."""
        out = np.zeros(self.n_buses)
        for g in self.generators:
            out[g.bus] += g.p_set
        return out

    def gen_q(self) -> np.ndarray:
        out = np.zeros(self.n_buses)
        for g in self.generators:
            out[g.bus] += g.q_set
        return out

    def load_p(self) -> np.ndarray:
        return np.array([b.p_load for b in self.buses], dtype=float)

    def load_q(self) -> np.ndarray:
        return np.array([b.q_load for b in self.buses], dtype=float)

    def voltage_setpoints(self) -> np.ndarray:
        """Initial magnitudes with generator setpoints applied at PV and slack buses."""
        v = np.array([b.v_mag_init for b in self.buses], dtype=float)
        for g in self.generators:
            if self.buses[g.bus].kind is not BusKind.PQ:
                v[g.bus] = g.v_set
        return v

    def with_injections(
        self,
        buses: Sequence[Bus] | None = None,
        generators: Sequence[Generator] | None = None,
    ) -> "NetworkCase":
        return replace(
            self,
            buses=tuple(buses) if buses is not None else self.buses,
            generators=tuple(generators) if generators is not None else self.generators,
        )

    def to_dict(self) -> dict:
        ids = self.bus_ids
        return {
            "name": self.name,
            "base_mva": self.base_mva,
            "buses": [
                {
                    "id": ids[b.id],
                    "kind": b.kind.value,
                    "v_mag": b.v_mag_init,
                    "v_ang": b.v_ang_init,
                    "p_load": b.p_load,
                    "q_load": b.q_load,
                    "gs": b.gs,
                    "bs": b.bs,
                    "base_kv": b.base_kv,
                }
                for b in self.buses
            ],
            "branches": [
                {
                    "from": ids[br.from_bus],
                    "to": ids[br.to_bus],
                    "r": br.r,
                    "x": br.x,
                    "b": br.b_charging,
                    "tap": br.tap,
                    "rating": br.rating,
                }
                for br in self.branches
            ],
            "generators": [
                {
                    "bus": ids[g.bus],
                    "p_set": g.p_set,
                    "q_set": g.q_set,
                    "v_set": g.v_set,
                    "p_max": g.p_max,
                    "p_min": g.p_min,
                }
                for g in self.generators
            ],
        }


@dataclass(frozen=True)
class AdmittanceMatrix:
    g: np.ndarray
    b: np.ndarray

    @property
    def y(self) -> np.ndarray:
        return self.g + 1j * self.b


@dataclass(frozen=True)
class RenormalizedAdjacency:
    v: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.v.shape[0]


def _field(row: dict, key: str, where: str, default=None, cast=float):
    if key not in row:
        if default is None:
            raise MalformedCase(f"{where}: missing field {key!r}")
        return default
    try:
        return cast(row[key])
    except (TypeError, ValueError) as exc:
        raise MalformedCase(f"{where}: bad value for {key!r}: {row[key]!r}") from exc


def case_from_dict(doc: dict, name: str | None = None) -> NetworkCase:
    """Build a validated :class:`NetworkCase` from a decoded case document."""
    if not isinstance(doc, dict):
        raise MalformedCase("case document must be a JSON object")
    for key in ("buses", "branches"):
        if not isinstance(doc.get(key), list):
            raise MalformedCase(f"case document needs a {key!r} array")
    base_mva = _field(doc, "base_mva", "case", default=100.0)

    raw_ids = []
    for k, row in enumerate(doc["buses"]):
        if not isinstance(row, dict):
            raise MalformedCase(f"bus #{k}: expected an object")
        raw_ids.append(_field(row, "id", f"bus #{k}", cast=int))
    if len(set(raw_ids)) != len(raw_ids):
        raise MalformedCase("duplicate bus ids")
    index = {bid: i for i, bid in enumerate(raw_ids)}

    def lookup(bid: int, where: str) -> int:
        if bid not in index:
            raise MalformedCase(f"{where}: unknown bus id {bid}")
        return index[bid]

    buses = []
    for i, row in enumerate(doc["buses"]):
        where = f"bus {raw_ids[i]}"
        try:
            kind = BusKind(row.get("kind"))
        except ValueError as exc:
            raise MalformedCase(f"{where}: unknown kind {row.get('kind')!r}") from exc
        bus = Bus(
            id=i,
            kind=kind,
            v_mag_init=_field(row, "v_mag", where, default=1.0),
            v_ang_init=_field(row, "v_ang", where, default=0.0),
            p_load=_field(row, "p_load", where, default=0.0),
            q_load=_field(row, "q_load", where, default=0.0),
            base_kv=_field(row, "base_kv", where, default=0.0),
            gs=_field(row, "gs", where, default=0.0),
            bs=_field(row, "bs", where, default=0.0),
        )
        if not bus.v_mag_init > 0:
            raise MalformedCase(f"{where}: v_mag must be positive")
        buses.append(bus)

    branches = []
    for k, row in enumerate(doc["branches"]):
        where = f"branch #{k}"
        if not isinstance(row, dict):
            raise MalformedCase(f"{where}: expected an object")
        br = Branch(
            from_bus=lookup(_field(row, "from", where, cast=int), where),
            to_bus=lookup(_field(row, "to", where, cast=int), where),
            r=_field(row, "r", where, default=0.0),
            x=_field(row, "x", where),
            b_charging=_field(row, "b", where, default=0.0),
            tap=_field(row, "tap", where, default=1.0) or 1.0,
            rating=_field(row, "rating", where, default=0.0),
        )
        if br.from_bus == br.to_bus:
            raise MalformedCase(f"{where}: from and to bus coincide")
        if br.x == 0.0:
            if br.r == 0.0:
                raise ZeroImpedanceBranch(f"{where}: r = x = 0")
            raise MalformedCase(f"{where}: x must be nonzero")
        branches.append(br)

    generators = []
    for k, row in enumerate(doc.get("generators", [])):
        where = f"generator #{k}"
        gen = Generator(
            bus=lookup(_field(row, "bus", where, cast=int), where),
            p_set=_field(row, "p_set", where, default=0.0),
            q_set=_field(row, "q_set", where, default=0.0),
            v_set=_field(row, "v_set", where, default=1.0),
            p_max=_field(row, "p_max", where, default=np.inf),
            p_min=_field(row, "p_min", where, default=0.0),
        )
        if not gen.p_min <= gen.p_set <= gen.p_max:
            # RTS-style dispatches park units below p_min; keep the data as published.
            logger.info("%s: p_set %.6g outside [%.6g, %.6g]", where, gen.p_set, gen.p_min, gen.p_max)
        generators.append(gen)

    case = NetworkCase(
        buses=tuple(buses),
        branches=tuple(branches),
        generators=tuple(generators),
        base_mva=base_mva,
        name=str(doc.get("name", name or "case")),
        bus_ids=tuple(raw_ids),
    )
    validate_case(case)
    return case


def validate_case(case: NetworkCase) -> None:
    """Check the structural invariants a solvable case must satisfy."""
    n_slack = sum(b.kind is BusKind.SLACK for b in case.buses)
    if n_slack == 0:
        raise NoSlackBus(f"case {case.name!r} has no slack bus")
    if n_slack > 1:
        raise DuplicateSlack(f"case {case.name!r} has {n_slack} slack buses")
    if case.n_buses < 2 or case.n_branches < 1:
        raise MalformedCase("a case needs at least 2 buses and 1 branch")
    n_comp, _ = connected_components(build_adjacency(case), directed=False)
    if n_comp != 1:
        raise DisconnectedGraph(f"case {case.name!r} splits into {n_comp} islands")


def parse_case(text: str, name: str | None = None) -> NetworkCase:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedCase(f"invalid JSON: {exc}") from exc
    return case_from_dict(doc, name=name)


def emit_case(case: NetworkCase) -> str:
    return json.dumps(case.to_dict(), indent=1)


def load_case(path_or_name: str | Path) -> NetworkCase:
    """Load a case file, or a bundled case by name (``"ieee14"``, ``"ieee24"``)."""
    path = Path(path_or_name)
    if path.is_file():
        return parse_case(path.read_text(), name=path.stem)
    # bare names and ``cases/<name>.json`` fall back to the copies shipped with the package
    stem = path.stem if path.suffix == ".json" else path.name
    if stem in BUNDLED_CASES and str(path.parent) in (".", "cases"):
        text = resources.files("pflab.cases").joinpath(f"{stem}.json").read_text()
        return parse_case(text, name=stem)
    raise FileNotFoundError(f"no such case file: {path_or_name}")


def branch_admittances(case: NetworkCase):
    """Per-branch pi-model terms ``(yff, yft, ytf, ytt)`` in per-unit.

    Raises :class:`ZeroImpedanceBranch` for branches with ``r = x = 0``.
    """
    r = np.array([br.r for br in case.branches], dtype=float)
    x = np.array([br.x for br in case.branches], dtype=float)
    bad = (r == 0) & (x == 0)
    if bad.any():
        raise ZeroImpedanceBranch(f"branches {np.flatnonzero(bad).tolist()} have r = x = 0")
    ys = 1.0 / (r + 1j * x)
    bc = np.array([br.b_charging for br in case.branches], dtype=float)
    tap = np.array([br.tap for br in case.branches], dtype=float)
    ytt = ys + 0.5j * bc
    yff = ytt / tap**2
    yft = -ys / tap
    ytf = -ys / tap
    return yff, yft, ytf, ytt


def build_ybus(case: NetworkCase) -> AdmittanceMatrix:
    n = case.n_buses
    f = np.array([br.from_bus for br in case.branches], dtype=int)
    t = np.array([br.to_bus for br in case.branches], dtype=int)
    yff, yft, ytf, ytt = branch_admittances(case)
    y = np.zeros((n, n), dtype=complex)
    np.add.at(y, (f, f), yff)
    np.add.at(y, (f, t), yft)
    np.add.at(y, (t, f), ytf)
    np.add.at(y, (t, t), ytt)
    ysh = np.array([b.gs + 1j * b.bs for b in case.buses]) / case.base_mva
    y[np.diag_indices(n)] += ysh
    return AdmittanceMatrix(g=y.real.copy(), b=y.imag.copy())


def build_adjacency(case: NetworkCase) -> np.ndarray:
    """Binary symmetric adjacency; parallel branches collapse to one entry."""
    n = case.n_buses
    a = np.zeros((n, n))
    for br in case.branches:
        a[br.from_bus, br.to_bus] = 1.0
        a[br.to_bus, br.from_bus] = 1.0
    return a


def renormalize_adjacency(a) -> RenormalizedAdjacency:
    """``D^-1/2 (A + I) D^-1/2`` with ``D`` the degree matrix of ``A + I``."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {a.shape}")
    a_tilde = a + np.eye(a.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    v = d_inv_sqrt[:, None] * a_tilde * d_inv_sqrt[None, :]
    return RenormalizedAdjacency(v=v)

