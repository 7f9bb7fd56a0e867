"""Bus admittance assembly, Newton-Raphson AC power flow, and line flows.

The admittance matrix uses the standard pi model per line plus fixed bus
shunts.  Device setpoints modify it in place of the host elements: a series
compensation replaces the host line's reactance by (x - x_tcsc), a shunt
compensation adds its susceptance to the host bus diagonal.  All internal
math is per-unit on the case base; public powers are MW/MVAr.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .facts import FactsSettings, SetpointError
from .netmodel import SystemCase


@dataclass(frozen=True)
class AdmittanceMatrix:
    n: int
    y: np.ndarray               # n x n complex, p.u.
    f: np.ndarray               # line from-bus positions
    t: np.ndarray               # line to-bus positions
    yff: np.ndarray             # per-line 2x2 branch admittance blocks
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    y_series: np.ndarray        # per-line series admittance (no shunt)
    provenance: tuple = ()


def build_ybus(case: SystemCase, facts_settings: Optional[FactsSettings] = None) -> AdmittanceMatrix:
    """Assemble the bus admittance matrix, optionally with device setpoints.

    Raises :class:`SetpointError` if a supplied setpoint leaves its
    operating interval.
    """
    n = case.n_buses()
    idx = case.bus_index
    nl = len(case.lines)
    f = np.empty(nl, dtype=int)
    t = np.empty(nl, dtype=int)
    ys = np.empty(nl, dtype=complex)
    bsh = np.empty(nl)
    provenance = []

    tcsc = case.tcsc_spec()
    x_tcsc = facts_settings.x_tcsc if facts_settings else None
    if x_tcsc is not None:
        if tcsc is None:
            raise SetpointError("case has no series-compensation device")
        if not (tcsc.x_min - 1e-12 <= x_tcsc <= tcsc.x_max + 1e-12):
            raise SetpointError(
                f"TCSC setpoint {x_tcsc} outside [{tcsc.x_min}, {tcsc.x_max}]")

    for k, ln in enumerate(case.lines):
        f[k] = idx[ln.from_bus]
        t[k] = idx[ln.to_bus]
        x = ln.x
        if x_tcsc is not None and tcsc is not None and ln.id == tcsc.location:
            x = ln.x - x_tcsc
            provenance.append((ln.id, f"series reactance {ln.x} -> {x}"))
        ys[k] = 1.0 / complex(ln.r, x)
        bsh[k] = ln.b_sh

    yff = ys + 0.5j * bsh
    ytt = ys + 0.5j * bsh
    yft = -ys
    ytf = -ys

    y = np.zeros((n, n), dtype=complex)
    np.add.at(y, (f, f), yff)
    np.add.at(y, (t, t), ytt)
    np.add.at(y, (f, t), yft)
    np.add.at(y, (t, f), ytf)

    for b in case.buses:
        if b.b_shunt:
            y[idx[b.id], idx[b.id]] += 1j * b.b_shunt

    b_stat = facts_settings.b_statcom if facts_settings else None
    if b_stat is not None:
        stat = case.statcom_spec()
        if stat is None:
            raise SetpointError("case has no shunt-compensation device")
        if not (stat.b_min - 1e-12 <= b_stat <= stat.b_max + 1e-12):
            raise SetpointError(
                f"STATCOM setpoint {b_stat} outside [{stat.b_min}, {stat.b_max}]")
        k = idx[stat.location]
        y[k, k] += 1j * b_stat
        provenance.append((stat.location, f"bus susceptance += {b_stat}"))

    return AdmittanceMatrix(n=n, y=y, f=f, t=t, yff=yff, yft=yft, ytf=ytf,
                            ytt=ytt, y_series=ys, provenance=tuple(provenance))


@dataclass(frozen=True)
class InjectionSchedule:
    """Specified net nodal injections (MW/MVAr, generation minus load).

    ``pv_voltage`` marks voltage-controlled buses: their reactive entry is
    ignored and |V| is held at the given setpoint.  The slack bus absorbs
    the residual active/reactive balance.
    """

    p_mw: np.ndarray
    q_mvar: np.ndarray
    pv_voltage: dict[int, float] = field(default_factory=dict)


@dataclass(frozen=True)
class LineFlows:
    p_from: np.ndarray
    q_from: np.ndarray
    p_to: np.ndarray
    q_to: np.ndarray


@dataclass(frozen=True)
class PowerFlowSolution:
    v: np.ndarray
    theta: np.ndarray
    p_flow: np.ndarray          # sending-end MW
    q_flow: np.ndarray          # sending-end MVAr
    flows: LineFlows
    losses: float               # total MW
    iterations: int
    max_mismatch: float         # p.u.
    converged: bool


class PowerFlowError(RuntimeError):
    pass


def bus_injections(ybus: AdmittanceMatrix, v: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Complex nodal injections S = diag(Vc) conj(Y Vc) in p.u."""
    vc = v * np.exp(1j * theta)
    return vc * np.conj(ybus.y @ vc)


def solve_ac(case: SystemCase, schedule: InjectionSchedule, tol: float = 1e-8,
             max_iter: int = 30, ybus: Optional[AdmittanceMatrix] = None,
             v0: Optional[np.ndarray] = None,
             theta0: Optional[np.ndarray] = None) -> PowerFlowSolution:
    """Newton-Raphson power flow from a flat start (or a supplied warm start).

    Convergence means max |dP|, |dQ| mismatch <= tol (p.u.) at every bus
    where the quantity is specified.  Raises :class:`PowerFlowError` on
    non-convergence or a singular Jacobian.
    """
    if ybus is None:
        ybus = build_ybus(case)
    n = ybus.n
    base = case.base_mva
    idx = case.bus_index
    slack = idx[case.slack_bus.id]

    pv = sorted(idx[b] for b in schedule.pv_voltage if idx[b] != slack)
    pq = [i for i in range(n) if i != slack and i not in pv]
    pvpq = pv + pq

    v = np.ones(n) if v0 is None else v0.astype(float).copy()
    theta = np.zeros(n) if theta0 is None else theta0.astype(float).copy()
    for b, vset in schedule.pv_voltage.items():
        v[idx[b]] = vset

    p_spec = np.asarray(schedule.p_mw, dtype=float) / base
    q_spec = np.asarray(schedule.q_mvar, dtype=float) / base

    def mismatch(vm, va):
        s = bus_injections(ybus, vm, va)
        dp = p_spec - s.real
        dq = q_spec - s.imag
        return np.concatenate([dp[pvpq], dq[pq]])

    iterations = 0
    fx = mismatch(v, theta)
    max_mis = float(np.max(np.abs(fx))) if fx.size else 0.0

    while max_mis > tol and iterations < max_iter:
        vc = v * np.exp(1j * theta)
        ibus = ybus.y @ vc
        diag_vc = np.diag(vc)
        ds_dva = 1j * diag_vc @ np.conj(np.diag(ibus) - ybus.y @ diag_vc)
        e = np.diag(vc / v)
        ds_dvm = diag_vc @ np.conj(ybus.y @ e) + np.conj(np.diag(ibus)) @ e

        j11 = ds_dva[np.ix_(pvpq, pvpq)].real
        j12 = ds_dvm[np.ix_(pvpq, pq)].real
        j21 = ds_dva[np.ix_(pq, pvpq)].imag
        j22 = ds_dvm[np.ix_(pq, pq)].imag
        jac = np.block([[j11, j12], [j21, j22]])

        try:
            dx = np.linalg.solve(jac, fx)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular Jacobian at iteration {iterations}") from exc

        theta[pvpq] += dx[: len(pvpq)]
        v[pq] += dx[len(pvpq):]
        iterations += 1
        fx = mismatch(v, theta)
        max_mis = float(np.max(np.abs(fx))) if fx.size else 0.0

    converged = max_mis <= tol
    if not converged:
        raise PowerFlowError(
            f"no convergence after {max_iter} iterations, mismatch {max_mis:.3e} p.u.")

    flows = _branch_flows(ybus, v, theta, base)
    losses = float(np.sum(flows.p_from + flows.p_to))
    return PowerFlowSolution(v=v, theta=theta, p_flow=flows.p_from,
                             q_flow=flows.q_from, flows=flows, losses=losses,
                             iterations=iterations, max_mismatch=max_mis,
                             converged=True)


def _branch_flows(ybus: AdmittanceMatrix, v: np.ndarray, theta: np.ndarray,
                  base: float) -> LineFlows:
    vc = v * np.exp(1j * theta)
    vf, vt = vc[ybus.f], vc[ybus.t]
    sf = vf * np.conj(ybus.yff * vf + ybus.yft * vt) * base
    st = vt * np.conj(ybus.ytf * vf + ybus.ytt * vt) * base
    return LineFlows(p_from=sf.real, q_from=sf.imag, p_to=st.real, q_to=st.imag)


def line_flows(sol: PowerFlowSolution, ybus: AdmittanceMatrix, base_mva: float,
               mode: str = "full_ac") -> tuple[np.ndarray, np.ndarray]:
    """Per-line sending-end (P, Q) in MW/MVAr.

    ``full_ac`` evaluates the standard pi-model flow from the solved
    voltages.  ``paper_form`` evaluates the unit-voltage closed form
    P = G (cos d - 1) + B sin d, Q = G (sin d - 1) - B cos d on the series
    admittance, kept purely as a documentation mode (see module notes on
    its anomalous sine offset).
    """
    if mode == "full_ac":
        flows = _branch_flows(ybus, sol.v, sol.theta, base_mva)
        return flows.p_from, flows.q_from
    if mode == "paper_form":
        d = sol.theta[ybus.f] - sol.theta[ybus.t]
        # Line conductance/susceptance convention: B = -Im(y) so a lossless
        # line gives P = sin(d)/x, matching the full AC sending-end flow.
        g, b = ybus.y_series.real, -ybus.y_series.imag
        p = g * (np.cos(d) - 1.0) + b * np.sin(d)
        q = g * (np.sin(d) - 1.0) - b * np.cos(d)
        return p * base_mva, q * base_mva
    raise ValueError(f"unknown flow mode {mode!r}")


def total_losses(flows: LineFlows) -> float:
    """Total series losses in MW: sum over lines of both line-end inflows."""
    return float(np.sum(flows.p_from + flows.p_to))
