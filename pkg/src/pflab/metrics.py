"""Accuracy statistics for power-flow predictions and the model comparison tables.

Flow statistics (R², MAX-E, MED-E, MAPE, tolerance accuracy, PRD) are computed
on branch active flows in MW, pooled over validation samples and branches.
Relative measures skip entries whose truth is within 1e-6 MW of zero; PRD skips
pairs with ``|y + yhat| <= 1e-6``. Both exclusions are counted in the report.
Voltage-magnitude errors (p.u.) are reported separately.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from ._validation import check_paired
from .exceptions import DegenerateTargets, EmptyAfterExclusion, NearCancellation

PRD_EPS = 1e-6
ZERO_TRUTH_EPS = 1e-6
DEFAULT_TOLERANCES = (0.01, 0.02, 0.03, 0.04, 0.05)


class ErrorStats(NamedTuple):
    max_e: float
    med_e: float
    mape: float


def r2_score(y, yhat) -> float:
    y, yhat = check_paired(np.ravel(y), np.ravel(yhat))
    if y.size < 2:
        raise ValueError("r2_score needs at least two values")
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise DegenerateTargets("targets have zero variance")
    return float(1.0 - np.sum((y - yhat) ** 2) / ss_tot)


def prd(y: float, yhat: float) -> float:
    """Percentage relative difference ``2|y - yhat| / |y + yhat| * 100``."""
    denom = abs(y + yhat)
    if denom <= PRD_EPS:
        raise NearCancellation(f"|y + yhat| = {denom:.3g} is too small for a relative difference")
    return 2.0 * abs(y - yhat) / denom * 100.0


def prd_values(y, yhat) -> tuple[np.ndarray, int]:
    """Vectorised :func:`prd` over all pairs; returns ``(values, n_excluded)``."""
    y, yhat = check_paired(np.ravel(y), np.ravel(yhat))
    denom = np.abs(y + yhat)
    keep = denom > PRD_EPS
    return 2.0 * np.abs(y - yhat)[keep] / denom[keep] * 100.0, int((~keep).sum())


def _relative_errors(y, yhat) -> tuple[np.ndarray, int]:
    y, yhat = check_paired(np.ravel(y), np.ravel(yhat))
    keep = np.abs(y) >= ZERO_TRUTH_EPS
    if not keep.any():
        raise EmptyAfterExclusion("every truth value is within 1e-6 of zero")
    return np.abs(y - yhat)[keep] / np.abs(y[keep]), int((~keep).sum())


def error_stats(y, yhat) -> ErrorStats:
    y, yhat = check_paired(y, yhat)
    abs_err = np.abs(y - yhat).ravel()
    rel, _ = _relative_errors(y, yhat)
    return ErrorStats(float(abs_err.max()), float(np.median(abs_err)), float(rel.mean()))


def tolerance_accuracy(y, yhat, tolerances=DEFAULT_TOLERANCES) -> dict[float, float]:
    """Percentage of predictions whose relative error is within each tolerance."""
    for tau in tolerances:
        if not 0 < tau < 1:
            raise ValueError(f"tolerance {tau} outside (0, 1)")
    rel, _ = _relative_errors(y, yhat)
    return {float(tau): float(np.mean(rel <= tau) * 100.0) for tau in tolerances}


def prd_summary(values: np.ndarray) -> dict[str, float]:
    if values.size == 0:
        raise EmptyAfterExclusion("no PRD values left after exclusions")
    return {
        "mean": float(values.mean()),
        "max": float(values.max()),
        "min": float(values.min()),
        "median": float(np.median(values)),
        "std": float(values.std()),
    }


@dataclass
class EvalReport:
    source: str
    n_samples: int
    r2: float
    max_e: float
    med_e: float
    mape: float
    tolerance_accuracy: dict
    prd_stats: dict
    n_prd_excluded: int
    n_zero_truth_excluded: int
    voltage: dict = field(default_factory=dict)
    per_target_errors: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("per_target_errors")
        out["tolerance_accuracy"] = {f"{k:g}": v for k, v in self.tolerance_accuracy.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def errors_csv(self, branch_labels=None) -> str:
        """Absolute flow errors, one row per validation sample, for histograms."""
        k = self.per_target_errors.shape[1]
        labels = branch_labels or [f"branch_{i}" for i in range(k)]
        rows = ["sample," + ",".join(labels)]
        for i, row in enumerate(self.per_target_errors):
            rows.append(f"{i}," + ",".join(repr(float(v)) for v in row))
        return "\n".join(rows) + "\n"


def build_report(source: str, y_true, y_pred, n_buses: int, tolerances=DEFAULT_TOLERANCES) -> EvalReport:
    """Aggregate every statistic from aligned ``(n_samples, N + K)`` target arrays."""
    y_true, y_pred = check_paired(y_true, y_pred)
    v_true, v_pred = y_true[:, :n_buses], y_pred[:, :n_buses]
    f_true, f_pred = y_true[:, n_buses:], y_pred[:, n_buses:]

    stats = error_stats(f_true, f_pred)
    _, n_zero = _relative_errors(f_true, f_pred)
    prd_vals, n_prd_excl = prd_values(f_true, f_pred)
    v_stats = error_stats(v_true, v_pred)
    return EvalReport(
        source=source,
        n_samples=int(y_true.shape[0]),
        r2=r2_score(f_true, f_pred),
        max_e=stats.max_e,
        med_e=stats.med_e,
        mape=stats.mape,
        tolerance_accuracy=tolerance_accuracy(f_true, f_pred, tolerances),
        prd_stats=prd_summary(prd_vals),
        n_prd_excluded=n_prd_excl,
        n_zero_truth_excluded=n_zero,
        voltage={
            "r2": r2_score(v_true, v_pred),
            "max_e": v_stats.max_e,
            "med_e": v_stats.med_e,
            "mape": v_stats.mape,
        },
        per_target_errors=np.abs(f_true - f_pred),
    )


def _source_predictions(source, ds, idx) -> tuple[str, np.ndarray]:
    from .dataset import targets_from_solution
    from .models import SurrogateRegressor
    from .solvers import solve_acpf, solve_dcpf

    if isinstance(source, SurrogateRegressor):
        return source.kind, source.predict(ds.X[idx])
    if isinstance(source, str):
        name = source.lower()
        solvers: dict[str, Callable] = {
            "dcpf": solve_dcpf,
            "acpf": lambda case: solve_acpf(case, ds.solver),
        }
        if name not in solvers:
            raise ValueError(f"unknown prediction source {source!r}")
        preds = [targets_from_solution(solvers[name](ds.reconstruct_case(i))) for i in idx]
        return name, np.array(preds)
    if callable(source):
        name = getattr(source, "__name__", "custom")
        return name, np.array([source(ds.reconstruct_case(i), ds.samples[i].x) for i in idx])
    raise TypeError(f"cannot evaluate source of type {type(source).__name__}")


def evaluate(source, ds, truth=None, tolerances=DEFAULT_TOLERANCES) -> EvalReport:
    """Run ``source`` on every validation sample of ``ds`` and score it against ACPF labels.

    ``source`` is a fitted surrogate, ``"dcpf"``/``"acpf"``, or a callable
    ``(case, x) -> targets``. ``truth`` overrides the stored validation labels.
    """
    idx = ds.val_idx
    if len(idx) == 0:
        raise EmptyAfterExclusion("validation split is empty")
    y_true = ds.Y[idx] if truth is None else np.asarray(truth, dtype=float)
    name, y_pred = _source_predictions(source, ds, idx)
    return build_report(name, y_true, y_pred, ds.n_buses, tolerances)


# -- text tables --------------------------------------------------------------


def _table(title: str, header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]

    def fmt(r: list[str]) -> str:
        return "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))

    rule = "-" * len(fmt(header))
    return "\n".join([title, rule, fmt(header), rule, *map(fmt, rows), rule]) + "\n"


def format_tables(reports: dict[str, EvalReport], system: str = "") -> str:
    """Aligned-column tables: tolerance accuracy, error statistics, PRD of flows."""
    prefix = f"{system} " if system else ""
    parts = []
    taus = sorted({t for r in reports.values() for t in r.tolerance_accuracy})
    parts.append(
        _table(
            f"{prefix}Prediction accuracy of branch flows within relative tolerance [%]",
            ["Model", *[f"{t * 100:g}%" for t in taus]],
            [[name, *[f"{r.tolerance_accuracy[t]:.2f}" for t in taus]] for name, r in reports.items()],
        )
    )
    parts.append(
        _table(
            f"{prefix}Error statistics of branch flows [MW]",
            ["Model", "R2", "MAX-E", "MED-E", "MAPE"],
            [[n, f"{r.r2:.4f}", f"{r.max_e:.4g}", f"{r.med_e:.4g}", f"{r.mape:.4g}"] for n, r in reports.items()],
        )
    )
    parts.append(
        _table(
            f"{prefix}PRD of branch active flows [%]",
            ["Model", "Mean", "Max", "Min", "Median", "Std.Dev.", "Excluded"],
            [
                [
                    n,
                    *[f"{r.prd_stats[k]:.4g}" for k in ("mean", "max", "min", "median", "std")],
                    str(r.n_prd_excluded),
                ]
                for n, r in reports.items()
            ],
        )
    )
    parts.append(
        _table(
            f"{prefix}Voltage magnitude errors [p.u.]",
            ["Model", "R2", "MAX-E", "MED-E", "MAPE"],
            [
                [n, f"{r.voltage['r2']:.4f}", f"{r.voltage['max_e']:.4g}", f"{r.voltage['med_e']:.4g}", f"{r.voltage['mape']:.4g}"]
                for n, r in reports.items()
            ],
        )
    )
    return "\n".join(parts)
