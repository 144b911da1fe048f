"""AC power flow (Newton-Raphson, polar form) and the DC power flow baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from .exceptions import SingularBprime, SingularJacobian
from .network import AdmittanceMatrix, NetworkCase, branch_admittances, build_ybus


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-8
    max_iter: int = 20
    flat_start: bool = True

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass(frozen=True)
class PFSolution:
    """Steady state of a case.

    Branch quantities are from-end unless suffixed ``_to``; powers in MW/MVAr,
    magnitudes in per-unit, angles in radians. ``p_gen``/``q_gen`` hold the
    generation each bus must supply to balance the solved state.
    """

    v_mag: np.ndarray
    v_ang: np.ndarray
    p_branch: np.ndarray
    q_branch: np.ndarray
    p_branch_to: np.ndarray
    q_branch_to: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    method: str = "acpf"

    def to_dict(self, case: NetworkCase) -> dict:
        return {
            "method": self.method,
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "max_mismatch": float(self.max_mismatch),
            "buses": [
                {
                    "id": case.bus_ids[i],
                    "v_mag": float(self.v_mag[i]),
                    "v_ang": float(self.v_ang[i]),
                    "p_gen": float(self.p_gen[i]),
                    "q_gen": float(self.q_gen[i]),
                }
                for i in range(case.n_buses)
            ],
            "branches": [
                {
                    "from": case.bus_ids[br.from_bus],
                    "to": case.bus_ids[br.to_bus],
                    "p_from": float(self.p_branch[k]),
                    "q_from": float(self.q_branch[k]),
                    "p_to": float(self.p_branch_to[k]),
                    "q_to": float(self.q_branch_to[k]),
                }
                for k, br in enumerate(case.branches)
            ],
        }


def scheduled_injections(case: NetworkCase) -> np.ndarray:
    """Net complex injection per bus in per-unit (generation minus load)."""
    return (case.gen_p() - case.load_p() + 1j * (case.gen_q() - case.load_q())) / case.base_mva


def _calc_power(ybus: AdmittanceMatrix, v: np.ndarray) -> np.ndarray:
    return v * np.conj(ybus.y @ v)


def compute_mismatch(case: NetworkCase, ybus: AdmittanceMatrix, v_mag, v_ang):
    """Scheduled minus computed nodal injections ``(dp, dq)`` in per-unit.

    Every bus gets an entry; the caller decides which ones are meaningful
    (P at PV/PQ buses, Q at PQ buses).
    """
    v_mag = np.asarray(v_mag, dtype=float)
    v_ang = np.asarray(v_ang, dtype=float)
    g, b = ybus.g, ybus.b
    dtheta = v_ang[:, None] - v_ang[None, :]
    cos, sin = np.cos(dtheta), np.sin(dtheta)
    vv = v_mag[:, None] * v_mag[None, :]
    p_calc = np.sum(vv * (g * cos + b * sin), axis=1)
    q_calc = np.sum(vv * (g * sin - b * cos), axis=1)
    s = scheduled_injections(case)
    return s.real - p_calc, s.imag - q_calc


def jacobian(ybus: AdmittanceMatrix, v_mag, v_ang, pvpq, pq) -> np.ndarray:
    """Polar Jacobian of computed injections w.r.t. ``(angles[pvpq], magnitudes[pq])``.

    Rows are P at ``pvpq`` followed by Q at ``pq``.
    """
    y = ybus.y
    v = v_mag * np.exp(1j * v_ang)
    i_bus = y @ v
    v_norm = v / v_mag
    ds_dvm = np.diag(v) @ np.conj(y * v_norm[None, :]) + np.diag(np.conj(i_bus) * v_norm)
    ds_dva = 1j * np.diag(v) @ np.conj(np.diag(i_bus) - y * v[None, :])
    j11 = ds_dva.real[np.ix_(pvpq, pvpq)]
    j12 = ds_dvm.real[np.ix_(pvpq, pq)]
    j21 = ds_dva.imag[np.ix_(pq, pvpq)]
    j22 = ds_dvm.imag[np.ix_(pq, pq)]
    return np.block([[j11, j12], [j21, j22]])


def _branch_power(case: NetworkCase, v: np.ndarray):
    yff, yft, ytf, ytt = branch_admittances(case)
    f = np.array([br.from_bus for br in case.branches], dtype=int)
    t = np.array([br.to_bus for br in case.branches], dtype=int)
    sf = v[f] * np.conj(yff * v[f] + yft * v[t]) * case.base_mva
    st = v[t] * np.conj(ytf * v[f] + ytt * v[t]) * case.base_mva
    return sf, st


def branch_flows_ac(case: NetworkCase, ybus: AdmittanceMatrix, v_mag, v_ang):
    """From-end branch flows ``(p_branch [MW], q_branch [MVAr])`` of a voltage state."""
    v = np.asarray(v_mag) * np.exp(1j * np.asarray(v_ang))
    sf, _ = _branch_power(case, v)
    return sf.real, sf.imag


def _initial_state(case: NetworkCase, flat_start: bool):
    v_mag = case.voltage_setpoints()
    if flat_start:
        v_mag[case.pq] = 1.0
        v_ang = np.zeros(case.n_buses)
    else:
        v_ang = np.array([b.v_ang_init for b in case.buses], dtype=float)
        v_ang -= v_ang[case.slack]
    return v_mag, v_ang


def solve_acpf(case: NetworkCase, cfg: SolverConfig | None = None) -> PFSolution:
    """Newton-Raphson AC power flow with single-slack balancing.

    Returns a solution with ``converged=False`` rather than raising when
    ``cfg.max_iter`` is exhausted.
    """
    cfg = cfg or SolverConfig()
    ybus = build_ybus(case)
    pv, pq = case.pv, case.pq
    pvpq = np.concatenate([pv, pq])
    n_p = len(pvpq)
    v_mag, v_ang = _initial_state(case, cfg.flat_start)

    def residual():
        dp, dq = compute_mismatch(case, ybus, v_mag, v_ang)
        return np.concatenate([dp[pvpq], dq[pq]])

    mis = residual()
    norm = np.max(np.abs(mis), initial=0.0)
    iterations = 0
    while norm > cfg.tolerance and iterations < cfg.max_iter:
        jac = jacobian(ybus, v_mag, v_ang, pvpq, pq)
        try:
            dx = np.linalg.solve(jac, mis)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(f"Jacobian factorization failed at iteration {iterations}") from exc
        if not np.all(np.isfinite(dx)):
            raise SingularJacobian(f"non-finite Newton step at iteration {iterations}")
        v_ang[pvpq] += dx[:n_p]
        v_mag[pq] += dx[n_p:]
        iterations += 1
        mis = residual()
        norm = np.max(np.abs(mis), initial=0.0)

    v = v_mag * np.exp(1j * v_ang)
    s_calc = _calc_power(ybus, v) * case.base_mva
    sf, st = _branch_power(case, v)
    return PFSolution(
        v_mag=v_mag,
        v_ang=v_ang,
        p_branch=sf.real,
        q_branch=sf.imag,
        p_branch_to=st.real,
        q_branch_to=st.imag,
        p_gen=s_calc.real + case.load_p(),
        q_gen=s_calc.imag + case.load_q(),
        converged=bool(norm <= cfg.tolerance),
        iterations=iterations,
        max_mismatch=float(norm),
    )


def build_bprime(case: NetworkCase) -> np.ndarray:
    """Susceptance matrix of the DC model built from ``1/x`` terms only."""
    n = case.n_buses
    bp = np.zeros((n, n))
    for br in case.branches:
        b = 1.0 / br.x
        i, j = br.from_bus, br.to_bus
        bp[i, i] += b
        bp[j, j] += b
        bp[i, j] -= b
        bp[j, i] -= b
    return bp


def solve_dcpf(case: NetworkCase) -> PFSolution:
    bp = build_bprime(case)
    n_comp, _ = connected_components(bp != 0, directed=False)
    if n_comp != 1:
        raise SingularBprime(f"B' is singular: network splits into {n_comp} islands")
    slack = case.slack
    keep = np.array([i for i in range(case.n_buses) if i != slack], dtype=int)
    p_inj = (case.gen_p() - case.load_p()) / case.base_mva
    theta = np.zeros(case.n_buses)
    try:
        theta[keep] = np.linalg.solve(bp[np.ix_(keep, keep)], p_inj[keep])
    except np.linalg.LinAlgError as exc:
        raise SingularBprime("B' factorization failed") from exc

    f = np.array([br.from_bus for br in case.branches], dtype=int)
    t = np.array([br.to_bus for br in case.branches], dtype=int)
    x = np.array([br.x for br in case.branches], dtype=float)
    p_branch = (theta[f] - theta[t]) / x * case.base_mva
    zeros_k = np.zeros(case.n_branches)
    return PFSolution(
        v_mag=np.ones(case.n_buses),
        v_ang=theta,
        p_branch=p_branch,
        q_branch=zeros_k,
        p_branch_to=-p_branch,
        q_branch_to=zeros_k.copy(),
        p_gen=bp @ theta * case.base_mva + case.load_p(),
        q_gen=np.zeros(case.n_buses),
        converged=True,
        iterations=1,
        max_mismatch=0.0,
        method="dcpf",
    )
