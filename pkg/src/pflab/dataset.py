"""Labeled sample generation by perturbing loads and dispatch around a base case."""

from __future__ import annotations

import io
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import NumericalFailure, TooManyDivergent
from .network import NetworkCase, case_from_dict
from .solvers import PFSolution, SolverConfig, solve_acpf

logger = logging.getLogger(__name__)

FEATURES = ("p_gen", "q_gen", "p_load", "q_load", "v_init")
PERTURB_LOW, PERTURB_HIGH = 0.85, 1.15
TRAIN_FRACTION = 0.8
STD_FLOOR = 1e-12
MAX_DIVERGENT_FRACTION = 0.1
FORMAT_TAG = "PFDS 1"


@dataclass(frozen=True)
class Perturbation:
    """Uniform factors applied to one sample, plus the common dispatch rescale."""

    seed: int
    load_p: np.ndarray
    load_q: np.ndarray
    gen_p: np.ndarray
    dispatch_scale: float

    def to_row(self) -> list[float]:
        return [
            float(self.seed),
            self.dispatch_scale,
            *self.load_p.tolist(),
            *self.load_q.tolist(),
            *self.gen_p.tolist(),
        ]

    @classmethod
    def from_row(cls, row, n_buses: int, n_gens: int) -> "Perturbation":
        row = np.asarray(row, dtype=float)
        n = n_buses
        return cls(
            seed=int(row[0]),
            dispatch_scale=float(row[1]),
            load_p=row[2 : 2 + n],
            load_q=row[2 + n : 2 + 2 * n],
            gen_p=row[2 + 2 * n : 2 + 2 * n + n_gens],
        )


def draw_perturbation(base: NetworkCase, rng_seed: int) -> Perturbation:
    rng = np.random.default_rng(rng_seed)
    n, n_gen = base.n_buses, len(base.generators)
    load_p = rng.uniform(PERTURB_LOW, PERTURB_HIGH, size=n)
    load_q = rng.uniform(PERTURB_LOW, PERTURB_HIGH, size=n)
    gen_p = rng.uniform(PERTURB_LOW, PERTURB_HIGH, size=n_gen)

    slack = base.slack
    dispatch = np.array([g.p_set for g in base.generators], dtype=float)
    movable = np.array([g.bus != slack for g in base.generators], dtype=bool)
    base_load = base.load_p().sum()
    new_load = (base.load_p() * load_p).sum()
    drawn = (dispatch * gen_p)[movable].sum()
    scale = 1.0
    if base_load != 0 and drawn != 0:
        ratio = dispatch[movable].sum() / base_load
        scale = ratio * new_load / drawn
    return Perturbation(
        seed=int(rng_seed), load_p=load_p, load_q=load_q, gen_p=gen_p, dispatch_scale=float(scale)
    )


def apply_perturbation(base: NetworkCase, pert: Perturbation) -> NetworkCase:
    buses = [
        replace(b, p_load=b.p_load * pert.load_p[b.id], q_load=b.q_load * pert.load_q[b.id])
        for b in base.buses
    ]
    slack = base.slack
    gens = []
    for k, g in enumerate(base.generators):
        if g.bus != slack:
            g = replace(g, p_set=g.p_set * pert.gen_p[k] * pert.dispatch_scale)
        gens.append(g)
    return base.with_injections(buses=buses, generators=gens)


def perturb_case(base: NetworkCase, rng_seed: int) -> NetworkCase:
    """Scale loads and non-slack dispatch by independent uniform factors in [0.85, 1.15].

    Non-slack dispatch is then rescaled by one common factor so it keeps the
    base case's generation-to-load ratio; the slack bus absorbs losses.
    """
    return apply_perturbation(base, draw_perturbation(base, rng_seed))


def assemble_features(case: NetworkCase) -> np.ndarray:
    """Per-bus rows ``[P_g, Q_g, P_d, Q_d, V_init]`` (MW, MVAr, MW, MVAr, p.u.)."""
    return np.column_stack(
        [
            case.gen_p(),
            case.gen_q(),
            case.load_p(),
            case.load_q(),
            case.voltage_setpoints(),
        ]
    )


def targets_from_solution(sol: PFSolution) -> np.ndarray:
    """Bus voltage magnitudes (p.u.) followed by from-end branch active flows (MW)."""
    return np.concatenate([sol.v_mag, sol.p_branch])


def prepare_base(case: NetworkCase, cfg: SolverConfig | None = None) -> NetworkCase:
    """Return ``case`` with generator outputs that are solver outcomes filled in.

    Reactive output of every generator and the slack's active output are
    taken from the solved base case, split evenly between units on a bus, so
    the feature matrix carries fixed values for quantities that are not inputs.
    """
    sol = solve_acpf(case, cfg)
    if not sol.converged:
        raise NumericalFailure(f"base case {case.name!r} does not converge")
    counts = np.zeros(case.n_buses)
    for g in case.generators:
        counts[g.bus] += 1
    slack = case.slack
    gens = []
    for g in case.generators:
        q = sol.q_gen[g.bus] / counts[g.bus]
        p = sol.p_gen[g.bus] / counts[g.bus] if g.bus == slack else g.p_set
        gens.append(replace(g, p_set=float(p), q_set=float(q)))
    return case.with_injections(generators=gens)


@dataclass
class Sample:
    x: np.ndarray
    y: np.ndarray
    meta: Perturbation


@dataclass
class Dataset:
    samples: list[Sample]
    train_idx: np.ndarray
    val_idx: np.ndarray
    case_id: str
    norm_stats: dict
    base_case: NetworkCase
    seed: int
    solver: SolverConfig = field(default_factory=SolverConfig)
    n_discarded: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def n_buses(self) -> int:
        return self.base_case.n_buses

    @property
    def n_branches(self) -> int:
        return self.base_case.n_branches

    @property
    def X(self) -> np.ndarray:
        return np.stack([s.x for s in self.samples])

    @property
    def Y(self) -> np.ndarray:
        return np.stack([s.y for s in self.samples])

    def split(self, which: str):
        idx = {"train": self.train_idx, "validation": self.val_idx}[which]
        return self.X[idx], self.Y[idx]

    def reconstruct_case(self, i: int) -> NetworkCase:
        return apply_perturbation(self.base_case, self.samples[i].meta)


def sample_seed(seed: int, attempt: int) -> int:
    return int(np.random.SeedSequence([seed, attempt]).generate_state(1)[0])


def feature_stats(x_train: np.ndarray) -> dict:
    return {"mean": x_train.mean(axis=0), "std": x_train.std(axis=0)}


def split_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(TRAIN_FRACTION * n + 0.5))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def generate(
    base: NetworkCase,
    n_samples: int,
    seed: int,
    cfg: SolverConfig | None = None,
) -> Dataset:
    """Solve ``n_samples`` perturbed cases and package features and labels.

    Perturbations whose power flow fails are discarded and redrawn. Raises
    :class:`TooManyDivergent` once failures exceed 10% of the attempts.
    """
    if n_samples < 5:
        raise ValueError("n_samples must be at least 5")
    cfg = cfg or SolverConfig()
    try:
        prepared = prepare_base(base, cfg)
    except NumericalFailure as exc:
        raise TooManyDivergent(str(exc)) from exc

    samples: list[Sample] = []
    attempt = failures = 0
    while len(samples) < n_samples:
        pert = draw_perturbation(prepared, sample_seed(seed, attempt))
        attempt += 1
        case = apply_perturbation(prepared, pert)
        try:
            sol = solve_acpf(case, cfg)
        except NumericalFailure:
            sol = None
        if sol is None or not sol.converged:
            failures += 1
            if failures > MAX_DIVERGENT_FRACTION * max(attempt, n_samples):
                raise TooManyDivergent(f"{failures} of {attempt} perturbations failed to converge")
            continue
        samples.append(Sample(x=assemble_features(case), y=targets_from_solution(sol), meta=pert))
    if failures:
        logger.info("discarded %d non-convergent perturbations", failures)

    train_idx, val_idx = split_indices(n_samples, seed)
    x_train = np.stack([samples[i].x for i in train_idx])
    return Dataset(
        samples=samples,
        train_idx=train_idx,
        val_idx=val_idx,
        case_id=base.name,
        norm_stats=feature_stats(x_train),
        base_case=prepared,
        seed=seed,
        solver=cfg,
        n_discarded=failures,
    )


def normalize(ds_or_stats, x):
    """Z-score ``x`` with the training-split statistics.

    Features whose training std is below 1e-12 are only shifted by the mean.
    """
    stats = ds_or_stats.norm_stats if isinstance(ds_or_stats, Dataset) else ds_or_stats
    mean, std = stats["mean"], stats["std"]
    return (np.asarray(x, dtype=float) - mean) / np.where(std < STD_FLOOR, 1.0, std)


def denormalize(ds_or_stats, z):
    stats = ds_or_stats.norm_stats if isinstance(ds_or_stats, Dataset) else ds_or_stats
    mean, std = stats["mean"], stats["std"]
    return np.asarray(z, dtype=float) * np.where(std < STD_FLOOR, 1.0, std) + mean


# -- .pfds files -------------------------------------------------------------


def _csv_block(rows) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in rows)


def dataset_header(ds: Dataset) -> dict:
    return {
        "format": FORMAT_TAG,
        "tool_version": __version__,
        "case_id": ds.case_id,
        "N": ds.n_buses,
        "K": ds.n_branches,
        "F": len(FEATURES),
        "n": len(ds.samples),
        "features": list(FEATURES),
        "targets": "v_mag[N] ++ p_branch_mw[K]",
        "seed": ds.seed,
        "n_discarded": ds.n_discarded,
        "split": {"train": ds.train_idx.tolist(), "validation": ds.val_idx.tolist()},
        "norm_stats": {k: np.asarray(v).tolist() for k, v in ds.norm_stats.items()},
        "solver": {
            "tolerance": ds.solver.tolerance,
            "max_iter": ds.solver.max_iter,
            "flat_start": ds.solver.flat_start,
        },
        "case": ds.base_case.to_dict(),
        **ds.extra,
    }


_HEADER_KEYS = frozenset(
    ["format", "tool_version", "case_id", "N", "K", "F", "n", "features", "targets",
     "seed", "n_discarded", "split", "norm_stats", "solver", "case"]
)


def dumps_dataset(ds: Dataset) -> str:
    out = io.StringIO()
    out.write(FORMAT_TAG + "\n")
    out.write(json.dumps(dataset_header(ds), sort_keys=True) + "\n")
    out.write("[X]\n")
    out.write(_csv_block(s.x.ravel() for s in ds.samples))
    out.write("[Y]\n")
    out.write(_csv_block(s.y for s in ds.samples))
    out.write("[META]\n")
    out.write(_csv_block(s.meta.to_row() for s in ds.samples))
    return out.getvalue()


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(ds: Dataset, path: str | Path) -> None:
    atomic_write_text(path, dumps_dataset(ds))


def _parse_block(lines: list[str]) -> np.ndarray:
    return np.array([[float(v) for v in line.split(",")] for line in lines], dtype=float)


def loads_dataset(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines or lines[0] != FORMAT_TAG:
        raise ValueError("not a .pfds dataset file")
    header = json.loads(lines[1])
    try:
        ix, iy, im = lines.index("[X]"), lines.index("[Y]"), lines.index("[META]")
    except ValueError as exc:
        raise ValueError("dataset file is missing a data block") from exc
    n, n_bus, n_feat = header["n"], header["N"], header["F"]
    xs = _parse_block(lines[ix + 1 : iy]).reshape(n, n_bus, n_feat)
    ys = _parse_block(lines[iy + 1 : im])
    metas = _parse_block(lines[im + 1 :])
    base = case_from_dict(header["case"])
    n_gen = len(base.generators)
    samples = [
        Sample(x=xs[i], y=ys[i], meta=Perturbation.from_row(metas[i], n_bus, n_gen)) for i in range(n)
    ]
    return Dataset(
        samples=samples,
        train_idx=np.array(header["split"]["train"], dtype=int),
        val_idx=np.array(header["split"]["validation"], dtype=int),
        case_id=header["case_id"],
        norm_stats={k: np.array(v, dtype=float) for k, v in header["norm_stats"].items()},
        base_case=base,
        seed=header["seed"],
        solver=SolverConfig(**header["solver"]),
        n_discarded=header["n_discarded"],
        extra={k: v for k, v in header.items() if k not in _HEADER_KEYS},
    )


def read_dataset(path: str | Path) -> Dataset:
    return loads_dataset(Path(path).read_text())
