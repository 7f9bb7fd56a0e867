"""Congestion management by re-dispatch under full AC network constraints.

Minimizes the cost of deviating generators and enrolled demand from their
day-ahead schedule, subject to nodal AC power balance, voltage and flow
limits, reactive capability, ramping, and optional network-controller
setpoints (series reactance, shunt susceptance) entering the admittance
model as decision variables.  Nodal marginal prices are the exact KKT
multipliers of each bus's active-power balance row.

The formulation keeps a "full" variable template; degenerate entries (the
slack angle, zero-width adjustment ranges, disabled devices) are masked out
before the solve.  All network quantities are evaluated per line so the
series compensator only touches its host line's coefficients, and first and
second derivatives are assembled analytically from the two trigonometric
primitives u = Vf Vt cos(th), w = Vf Vt sin(th).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import powerflow
from .facts import FactsSettings
from .market import ClearingResult
from .netmodel import SystemCase
from .nlp import NlpCallbacks, NlpResult, solve_nlp

FLOW_KINDS = ("pf", "pt", "qf", "qt")


class CmpError(RuntimeError):
    pass


class CmpInfeasible(CmpError):
    pass


@dataclass(frozen=True)
class CmpConfig:
    enable_facts: bool = True
    enable_dr: bool = True
    binary_strategy: str = "enumerate"   # "enumerate" | "relax_round"
    nlp_tol: float = 1e-6
    dual_source: str = "kkt"
    max_iter: int = 200


@dataclass(frozen=True)
class LmpVector:
    bus_ids: tuple[int, ...]
    values: np.ndarray          # $/MWh

    def spread(self) -> float:
        return float(np.max(self.values) - np.min(self.values))

    def mean(self) -> float:
        return float(np.mean(self.values))


@dataclass(frozen=True)
class RedispatchDecision:
    dpg_up: dict[int, float]            # genco id -> MW
    dpg_down: dict[int, float]
    dpd_up: dict[int, float]            # DR bus -> MW
    dpd_down: dict[int, float]
    x: dict[int, int]                   # DR bus -> raise-commitment bit
    y: dict[int, int]                   # DR bus -> lower-commitment bit
    tcsc_setpoint: Optional[float]      # p.u.
    statcom_setpoint: Optional[float]   # p.u.
    cost: float                         # $
    lmp: LmpVector
    flows: powerflow.LineFlows          # MW / MVAr
    losses: float                       # MW
    converged: bool
    v: np.ndarray
    theta: np.ndarray
    iterations: int
    kkt_error: float
    max_violation: float                # independent certificate, p.u.

    def total_genco_shift(self) -> float:
        return sum(self.dpg_up.values()) + sum(self.dpg_down.values())

    def total_dr_shift(self) -> float:
        return sum(self.dpd_up.values()) + sum(self.dpd_down.values())


def _series_gb(r: float, x: float) -> tuple[float, float]:
    y = 1.0 / complex(r, x)
    return y.real, y.imag


class CmpProblem(NlpCallbacks):
    """One-hour AC-constrained re-dispatch problem."""

    def __init__(self, case: SystemCase, stage1: ClearingResult,
                 config: CmpConfig,
                 p_prev: Optional[dict[int, float]] = None,
                 forbid_dr_up: Optional[set[int]] = None,
                 forbid_dr_down: Optional[set[int]] = None):
        self.case = case
        self.config = config
        base = case.base_mva
        self.base = base
        n = case.n_buses()
        self.n = n
        idx = case.bus_index
        self.slack = idx[case.slack_bus.id]

        # network constants
        nl = len(case.lines)
        self.nl = nl
        self.f = np.array([idx[ln.from_bus] for ln in case.lines])
        self.t = np.array([idx[ln.to_bus] for ln in case.lines])
        gb = np.array([_series_gb(ln.r, ln.x) for ln in case.lines])
        self.g0, self.b0 = gb[:, 0].copy(), gb[:, 1].copy()
        self.bsh2 = np.array([0.5 * ln.b_sh for ln in case.lines])
        self.bus_bsh = np.array([b.b_shunt for b in case.buses])
        self.pmax_line = np.array([ln.p_max for ln in case.lines]) / base
        self.qmax_line = np.array([ln.q_max for ln in case.lines]) / base

        tcsc = case.tcsc_spec()
        self.tcsc_line = None
        if config.enable_facts and tcsc is not None:
            self.tcsc_line = case.line_index[tcsc.location]
            host = case.lines[self.tcsc_line]
            self.host_r, self.host_x = host.r, host.x
            # Compensated reactance must stay away from zero; cap at 75%
            # series compensation.
            self.xc_lb = tcsc.x_min
            self.xc_ub = min(tcsc.x_max, 0.75 * host.x)
        stat = case.statcom_spec()
        self.stat_bus = None
        if config.enable_facts and stat is not None:
            self.stat_bus = idx[stat.location]
            self.bs_lb, self.bs_ub = stat.b_min, stat.b_max

        # participants
        self.ng = len(case.gencos)
        self.gbus = np.array([idx[g.bus] for g in case.gencos], dtype=int)
        self.pg_da = np.array([stage1.p_g[g.id] for g in case.gencos]) / base
        self.s_g = np.array([g.s_rated for g in case.gencos]) / base
        self.pmin_g = np.array([g.p_min for g in case.gencos]) / base
        self.pmax_g = np.array([g.p_max for g in case.gencos]) / base
        self.ramp_up = np.array([g.ramp_up for g in case.gencos]) / base
        self.ramp_down = np.array([g.ramp_down for g in case.gencos]) / base
        self.cost_gu = np.array([g.offer_up for g in case.gencos])
        self.cost_gd = np.array([g.offer_down for g in case.gencos])
        if p_prev is None:
            self.pg_prev = self.pg_da.copy()
        else:
            self.pg_prev = np.array([p_prev[g.id] for g in case.gencos]) / base

        self.nw = len(case.wind_producers)
        self.wbus = np.array([idx[w.bus] for w in case.wind_producers], dtype=int)
        self.pw = np.array([stage1.p_w[w.id] for w in case.wind_producers]) / base
        kappa = np.array([w.kappa_min for w in case.wind_producers])
        if self.nw:
            self.qw_band = self.pw * np.sqrt(1.0 - kappa ** 2) / kappa
        else:
            self.qw_band = np.zeros(0)

        self.pd_da = np.zeros(n)
        self.tanphi = np.zeros(n)
        for ld in case.loads:
            self.pd_da[idx[ld.bus]] += stage1.p_d[ld.id] / base
            self.tanphi[idx[ld.bus]] = ld.tan_phi

        drs = list(case.dr_resources) if config.enable_dr else []
        self.nr = len(drs)
        self.rbus = np.array([idx[dr.bus] for dr in drs], dtype=int)
        self.dr_bus_ids = tuple(dr.bus for dr in drs)
        ddu_ub, ddd_ub, cdu, cdd = [], [], [], []
        for dr in drs:
            load = case.load_at_bus[dr.bus]
            size = case.dr_effective_size(dr) / base
            up = min(load.ramp_up / base, size)
            dn = min(load.ramp_down / base, size, self.pd_da[idx[dr.bus]])
            if forbid_dr_up and dr.bus in forbid_dr_up:
                up = 0.0
            if forbid_dr_down and dr.bus in forbid_dr_down:
                dn = 0.0
            ddu_ub.append(up)
            ddd_ub.append(dn)
            cdu.append(load.offer_up)
            cdd.append(load.offer_down)
        self.ddu_ub = np.array(ddu_ub)
        self.ddd_ub = np.array(ddd_ub)
        self.cost_du = np.array(cdu)
        self.cost_dd = np.array(cdd)

        # variable template: [va(n), vm(n), qg, qw, dgu, dgd, ddu, ddd, xc, bs]
        sizes = [n, n, self.ng, self.nw, self.ng, self.ng, self.nr, self.nr,
                 1 if self.tcsc_line is not None else 0,
                 1 if self.stat_bus is not None else 0]
        offs = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        (self.o_va, self.o_vm, self.o_qg, self.o_qw, self.o_dgu, self.o_dgd,
         self.o_ddu, self.o_ddd, self.o_xc, self.o_bs) = offs[:10]
        self.nz_full = int(offs[10])

        lb = np.full(self.nz_full, -np.inf)
        ub = np.full(self.nz_full, np.inf)
        lb[self.o_va:self.o_vm] = -1.5
        ub[self.o_va:self.o_vm] = 1.5
        lb[self.o_va + self.slack] = ub[self.o_va + self.slack] = 0.0
        lb[self.o_vm:self.o_qg] = [b.v_min for b in case.buses]
        ub[self.o_vm:self.o_qg] = [b.v_max for b in case.buses]
        lb[self.o_qg:self.o_qw] = -self.s_g
        ub[self.o_qg:self.o_qw] = self.s_g
        lb[self.o_qw:self.o_dgu] = -self.qw_band
        ub[self.o_qw:self.o_dgu] = self.qw_band
        lb[self.o_dgu:self.o_dgd] = 0.0
        ub[self.o_dgu:self.o_dgd] = np.maximum(
            np.minimum(self.ramp_up, self.pmax_g - self.pg_da), 0.0)
        lb[self.o_dgd:self.o_ddu] = 0.0
        ub[self.o_dgd:self.o_ddu] = np.maximum(
            np.minimum(self.ramp_down, self.pg_da - self.pmin_g), 0.0)
        lb[self.o_ddu:self.o_ddd] = 0.0
        ub[self.o_ddu:self.o_ddd] = self.ddu_ub
        lb[self.o_ddd:self.o_xc] = 0.0
        ub[self.o_ddd:self.o_xc] = self.ddd_ub
        if self.tcsc_line is not None:
            lb[self.o_xc], ub[self.o_xc] = self.xc_lb, self.xc_ub
        if self.stat_bus is not None:
            lb[self.o_bs], ub[self.o_bs] = self.bs_lb, self.bs_ub

        self.lb_full, self.ub_full = lb, ub
        active = (ub - lb) > 1e-11
        active[self.o_va + self.slack] = False
        self.active = active
        self.lb = lb[active]
        self.ub = ub[active]

        self.z_fixed = np.zeros(self.nz_full)
        self.z_fixed[self.o_vm:self.o_qg] = 1.0
        frozen = ~active
        finite = np.isfinite(lb) & np.isfinite(ub)
        self.z_fixed[frozen & finite] = 0.5 * (lb + ub)[frozen & finite]

        grad = np.zeros(self.nz_full)
        grad[self.o_dgu:self.o_dgd] = self.cost_gu
        grad[self.o_dgd:self.o_ddu] = self.cost_gd
        grad[self.o_ddu:self.o_ddd] = self.cost_du
        grad[self.o_ddd:self.o_xc] = self.cost_dd
        self.grad_full = grad

        # inequality row plan: two-sided flow limits (finite only), then
        # genco capability circles, then genco ramp couples
        rows = []
        for code, kind in enumerate(FLOW_KINDS):
            limit = self.pmax_line if kind in ("pf", "pt") else self.qmax_line
            for k in range(nl):
                if np.isfinite(limit[k]):
                    rows.append((code, k, +1.0, limit[k]))
                    rows.append((code, k, -1.0, limit[k]))
        self.row_code = np.array([r[0] for r in rows], dtype=int)
        self.row_line = np.array([r[1] for r in rows], dtype=int)
        self.row_sign = np.array([r[2] for r in rows])
        self.row_limit = np.array([r[3] for r in rows])
        self.n_flow_rows = len(rows)
        self.ni = self.n_flow_rows + self.ng + 2 * self.ng

        # bus aggregation matrices for line-end quantities
        self.sf = np.zeros((n, nl))
        self.st = np.zeros((n, nl))
        self.sf[self.f, np.arange(nl)] = 1.0
        self.st[self.t, np.arange(nl)] = 1.0

        # constant Jacobian of the ramp rows over the full template
        jr = np.zeros((2 * self.ng, self.nz_full))
        rng = np.arange(self.ng)
        jr[rng, self.o_dgu + rng] = 1.0
        jr[rng, self.o_dgd + rng] = -1.0
        jr[self.ng + rng, self.o_dgu + rng] = -1.0
        jr[self.ng + rng, self.o_dgd + rng] = 1.0
        self.j_ramp = jr
        self.ramp_ub = np.concatenate([
            self.ramp_up + self.pg_prev - self.pg_da,
            self.ramp_down + self.pg_da - self.pg_prev,
        ])

    # ---- template helpers ---------------------------------------------------

    def expand(self, z_red: np.ndarray) -> np.ndarray:
        z = self.z_fixed.copy()
        z[self.active] = z_red
        return z

    def initial_point(self, warm: Optional[np.ndarray] = None) -> np.ndarray:
        z = self.z_fixed.copy()
        if warm is not None:
            z = warm.copy()
            z[~self.active] = self.z_fixed[~self.active]
        return z[self.active]

    def transfer_from(self, other: "CmpProblem", z_other_full: np.ndarray) -> np.ndarray:
        """Map another scenario's solution into this template (idle extras)."""
        z = self.z_fixed.copy()
        for o_self, o_other, m in (
                (self.o_va, other.o_va, self.n), (self.o_vm, other.o_vm, self.n),
                (self.o_qg, other.o_qg, self.ng), (self.o_qw, other.o_qw, self.nw),
                (self.o_dgu, other.o_dgu, self.ng), (self.o_dgd, other.o_dgd, self.ng)):
            z[o_self:o_self + m] = z_other_full[o_other:o_other + m]
        if self.nr and other.nr:
            z[self.o_ddu:self.o_ddu + self.nr] = \
                z_other_full[other.o_ddu:other.o_ddu + other.nr]
            z[self.o_ddd:self.o_ddd + self.nr] = \
                z_other_full[other.o_ddd:other.o_ddd + other.nr]
        if self.tcsc_line is not None and other.tcsc_line is not None:
            z[self.o_xc] = z_other_full[other.o_xc]
        if self.stat_bus is not None and other.stat_bus is not None:
            z[self.o_bs] = z_other_full[other.o_bs]
        return z

    # ---- state evaluation ---------------------------------------------------

    def _gb(self, z):
        g = self.g0.copy()
        b = self.b0.copy()
        d1 = d2 = (0.0, 0.0)
        if self.tcsc_line is not None:
            xc = z[self.o_xc]
            y = 1.0 / complex(self.host_r, self.host_x - xc)
            g[self.tcsc_line] = y.real
            b[self.tcsc_line] = y.imag
            dy = 1j * y * y
            d2y = -2.0 * y ** 3
            d1 = (dy.real, dy.imag)
            d2 = (d2y.real, d2y.imag)
        return g, b, d1, d2

    def _state(self, z):
        va = z[self.o_va:self.o_vm]
        vm = z[self.o_vm:self.o_qg]
        g, b, d1, d2 = self._gb(z)
        vf, vt = vm[self.f], vm[self.t]
        th = va[self.f] - va[self.t]
        u = vf * vt * np.cos(th)
        w = vf * vt * np.sin(th)
        flows = np.empty((4, self.nl))
        flows[0] = g * vf ** 2 - g * u - b * w                    # pf
        flows[1] = g * vt ** 2 - g * u + b * w                    # pt
        flows[2] = -(b + self.bsh2) * vf ** 2 - g * w + b * u     # qf
        flows[3] = -(b + self.bsh2) * vt ** 2 + g * w + b * u     # qt
        return dict(va=va, vm=vm, g=g, b=b, d1=d1, d2=d2, vf=vf, vt=vt,
                    u=u, w=w, flows=flows)

    def _injections(self, z, st):
        p = np.zeros(self.n)
        q = np.zeros(self.n)
        dgu = z[self.o_dgu:self.o_dgd]
        dgd = z[self.o_dgd:self.o_ddu]
        np.add.at(p, self.gbus, self.pg_da + dgu - dgd)
        np.add.at(q, self.gbus, z[self.o_qg:self.o_qw])
        if self.nw:
            np.add.at(p, self.wbus, self.pw)
            np.add.at(q, self.wbus, z[self.o_qw:self.o_dgu])
        pd = self.pd_da.copy()
        if self.nr:
            ddu = z[self.o_ddu:self.o_ddd]
            ddd = z[self.o_ddd:self.o_xc]
            np.add.at(pd, self.rbus, ddu - ddd)
        p -= pd
        q -= pd * self.tanphi
        if self.stat_bus is not None:
            q[self.stat_bus] += z[self.o_bs] * st["vm"][self.stat_bus] ** 2
        return p, q

    def _flow_jacobians(self, st):
        """(4, nl, nz_full) array: d(flow)/dz for pf, pt, qf, qt."""
        g, b, u, w = st["g"], st["b"], st["u"], st["w"]
        vf, vt = st["vf"], st["vt"]
        bsh2 = self.bsh2
        nl = self.nl
        jac = np.zeros((4, nl, self.nz_full))
        rng = np.arange(nl)
        cf_va, ct_va = self.o_va + self.f, self.o_va + self.t
        cf_vm, ct_vm = self.o_vm + self.f, self.o_vm + self.t

        gw_bu = g * w - b * u
        gu_bw = g * u + b * w
        # pf
        jac[0, rng, cf_va] += gw_bu
        jac[0, rng, ct_va] += -gw_bu
        jac[0, rng, cf_vm] += 2 * g * vf - (g * u + b * w) / vf
        jac[0, rng, ct_vm] += -(g * u + b * w) / vt
        # pt
        jac[1, rng, cf_va] += g * w + b * u
        jac[1, rng, ct_va] += -(g * w + b * u)
        jac[1, rng, cf_vm] += (-g * u + b * w) / vf
        jac[1, rng, ct_vm] += 2 * g * vt + (-g * u + b * w) / vt
        # qf
        jac[2, rng, cf_va] += -gu_bw
        jac[2, rng, ct_va] += gu_bw
        jac[2, rng, cf_vm] += -2 * (b + bsh2) * vf + (-g * w + b * u) / vf
        jac[2, rng, ct_vm] += (-g * w + b * u) / vt
        # qt
        jac[3, rng, cf_va] += g * u - b * w
        jac[3, rng, ct_va] += -(g * u - b * w)
        jac[3, rng, cf_vm] += (g * w + b * u) / vf
        jac[3, rng, ct_vm] += -2 * (b + bsh2) * vt + (g * w + b * u) / vt

        if self.tcsc_line is not None:
            k = self.tcsc_line
            dg, db = st["d1"]
            col = self.o_xc
            jac[0, k, col] = (vf[k] ** 2 - u[k]) * dg - w[k] * db
            jac[1, k, col] = (vt[k] ** 2 - u[k]) * dg + w[k] * db
            jac[2, k, col] = -w[k] * dg + (u[k] - vf[k] ** 2) * db
            jac[3, k, col] = w[k] * dg + (u[k] - vt[k] ** 2) * db
        return jac

    # ---- NLP callbacks --------------------------------------------------------

    def eval_fgh(self, z_red):
        z = self.expand(z_red)
        st = self._state(z)
        vm = st["vm"]
        flows = st["flows"]

        p_spec, q_spec = self._injections(z, st)
        p_net = self.sf @ flows[0] + self.st @ flows[1]
        q_net = self.sf @ flows[2] + self.st @ flows[3] - self.bus_bsh * vm ** 2
        g_eq = np.concatenate([p_spec - p_net, q_spec - q_net])

        jac = self._flow_jacobians(st)

        jg = np.zeros((2 * self.n, self.nz_full))
        jg[:self.n] -= self.sf @ jac[0] + self.st @ jac[1]
        jg[self.n:] -= self.sf @ jac[2] + self.st @ jac[3]
        rb = np.arange(self.n)
        jg[self.n + rb, self.o_vm + rb] += 2.0 * self.bus_bsh * vm
        rg = np.arange(self.ng)
        np.add.at(jg, (self.gbus, self.o_dgu + rg), 1.0)
        np.add.at(jg, (self.gbus, self.o_dgd + rg), -1.0)
        np.add.at(jg, (self.n + self.gbus, self.o_qg + rg), 1.0)
        if self.nw:
            rw = np.arange(self.nw)
            np.add.at(jg, (self.n + self.wbus, self.o_qw + rw), 1.0)
        if self.nr:
            rr = np.arange(self.nr)
            tphi = self.tanphi[self.rbus]
            np.add.at(jg, (self.rbus, self.o_ddu + rr), -1.0)
            np.add.at(jg, (self.rbus, self.o_ddd + rr), 1.0)
            np.add.at(jg, (self.n + self.rbus, self.o_ddu + rr), -tphi)
            np.add.at(jg, (self.n + self.rbus, self.o_ddd + rr), tphi)
        if self.stat_bus is not None:
            sb = self.stat_bus
            jg[self.n + sb, self.o_bs] += vm[sb] ** 2
            jg[self.n + sb, self.o_vm + sb] += 2.0 * z[self.o_bs] * vm[sb]

        # inequalities
        h_flow = self.row_sign * flows[self.row_code, self.row_line] - self.row_limit
        jh_flow = self.row_sign[:, None] * jac[self.row_code, self.row_line, :]

        pg = self.pg_da + z[self.o_dgu:self.o_dgd] - z[self.o_dgd:self.o_ddu]
        qg = z[self.o_qg:self.o_qw]
        h_circ = pg ** 2 + qg ** 2 - self.s_g ** 2
        jh_circ = np.zeros((self.ng, self.nz_full))
        jh_circ[rg, self.o_dgu + rg] = 2.0 * pg
        jh_circ[rg, self.o_dgd + rg] = -2.0 * pg
        jh_circ[rg, self.o_qg + rg] = 2.0 * qg

        h_ramp = self.j_ramp @ z - self.ramp_ub

        h = np.concatenate([h_flow, h_circ, h_ramp])
        jh = np.vstack([jh_flow, jh_circ, self.j_ramp])

        f = float(self.grad_full @ z)
        return (f, self.grad_full[self.active], g_eq, jg[:, self.active],
                h, jh[:, self.active])

    def hess_lagrangian(self, z_red, lam, mu):
        z = self.expand(z_red)
        st = self._state(z)
        vm, u, w = st["vm"], st["u"], st["w"]
        g, b = st["g"], st["b"]
        vf, vt = st["vf"], st["vt"]

        lam_p = lam[:self.n]
        lam_q = lam[self.n:]
        mu_flow = mu[:self.n_flow_rows]
        mu_circ = mu[self.n_flow_rows:self.n_flow_rows + self.ng]

        # per-line total weights of the four flow quantities
        wk = np.zeros((4, self.nl))
        np.add.at(wk, (self.row_code, self.row_line), self.row_sign * mu_flow)
        wk[0] -= lam_p[self.f]
        wk[1] -= lam_p[self.t]
        wk[2] -= lam_q[self.f]
        wk[3] -= lam_q[self.t]
        wpf, wpt, wqf, wqt = wk

        d_f = wpf * g - wqf * (b + self.bsh2)
        d_t = wpt * g - wqt * (b + self.bsh2)
        a_u = -(wpf + wpt) * g + (wqf + wqt) * b
        a_w = (wpt - wpf) * b + (wqt - wqf) * g

        uu = a_u * u + a_w * w
        rr = a_w * u - a_u * w

        h = np.zeros((self.nz_full, self.nz_full))
        ca_f, ca_t = self.o_va + self.f, self.o_va + self.t
        cm_f, cm_t = self.o_vm + self.f, self.o_vm + self.t

        def stamp(rows, cols, vals):
            np.add.at(h, (rows, cols), vals)
            np.add.at(h, (cols, rows), vals)

        np.add.at(h, (ca_f, ca_f), -uu)
        np.add.at(h, (ca_t, ca_t), -uu)
        stamp(ca_f, ca_t, uu)
        stamp(ca_f, cm_f, rr / vf)
        stamp(ca_f, cm_t, rr / vt)
        stamp(ca_t, cm_f, -rr / vf)
        stamp(ca_t, cm_t, -rr / vt)
        stamp(cm_f, cm_t, uu / (vf * vt))
        np.add.at(h, (cm_f, cm_f), 2.0 * d_f)
        np.add.at(h, (cm_t, cm_t), 2.0 * d_t)

        if self.tcsc_line is not None:
            k = self.tcsc_line
            dg, db = st["d1"]
            ddg, ddb = st["d2"]
            c_g = (wpf[k] * (vf[k] ** 2 - u[k]) + wpt[k] * (vt[k] ** 2 - u[k])
                   - wqf[k] * w[k] + wqt[k] * w[k])
            c_b = (-wpf[k] * w[k] + wqf[k] * (u[k] - vf[k] ** 2)
                   + wpt[k] * w[k] + wqt[k] * (u[k] - vt[k] ** 2))
            col = self.o_xc
            h[col, col] += c_g * ddg + c_b * ddb
            # cross terms with the host line's local variables
            dcg_dthf = (wpf[k] + wpt[k]) * w[k] + (wqt[k] - wqf[k]) * u[k]
            dcb_dthf = (wpt[k] - wpf[k]) * u[k] - (wqf[k] + wqt[k]) * w[k]
            dcg_dvf = (wpf[k] * (2 * vf[k] - u[k] / vf[k]) - wpt[k] * u[k] / vf[k]
                       + (wqt[k] - wqf[k]) * w[k] / vf[k])
            dcg_dvt = (-wpf[k] * u[k] / vt[k] + wpt[k] * (2 * vt[k] - u[k] / vt[k])
                       + (wqt[k] - wqf[k]) * w[k] / vt[k])
            dcb_dvf = ((wpt[k] - wpf[k]) * w[k] / vf[k]
                       + wqf[k] * (u[k] / vf[k] - 2 * vf[k]) + wqt[k] * u[k] / vf[k])
            dcb_dvt = ((wpt[k] - wpf[k]) * w[k] / vt[k]
                       + wqf[k] * u[k] / vt[k] + wqt[k] * (u[k] / vt[k] - 2 * vt[k]))
            pairs = [(ca_f[k], dcg_dthf * dg + dcb_dthf * db),
                     (ca_t[k], -(dcg_dthf * dg + dcb_dthf * db)),
                     (cm_f[k], dcg_dvf * dg + dcb_dvf * db),
                     (cm_t[k], dcg_dvt * dg + dcb_dvt * db)]
            for cc, val in pairs:
                h[col, cc] += val
                h[cc, col] += val

        # genco capability circles
        rg = np.arange(self.ng)
        c_dgu, c_dgd, c_qg = self.o_dgu + rg, self.o_dgd + rg, self.o_qg + rg
        np.add.at(h, (c_dgu, c_dgu), 2.0 * mu_circ)
        np.add.at(h, (c_dgd, c_dgd), 2.0 * mu_circ)
        np.add.at(h, (c_qg, c_qg), 2.0 * mu_circ)
        np.add.at(h, (c_dgu, c_dgd), -2.0 * mu_circ)
        np.add.at(h, (c_dgd, c_dgu), -2.0 * mu_circ)

        # bus shunts and the shunt compensator inside the reactive rows
        rb = np.arange(self.n)
        np.add.at(h, (self.o_vm + rb, self.o_vm + rb), 2.0 * self.bus_bsh * lam_q)
        if self.stat_bus is not None:
            sb = self.stat_bus
            lamq = lam_q[sb]
            h[self.o_bs, self.o_vm + sb] += 2.0 * lamq * vm[sb]
            h[self.o_vm + sb, self.o_bs] += 2.0 * lamq * vm[sb]
            h[self.o_vm + sb, self.o_vm + sb] += 2.0 * lamq * z[self.o_bs]

        return h[np.ix_(self.active, self.active)]

    # ---- solution recovery ---------------------------------------------------

    def cleanup_pairs(self, z_full: np.ndarray) -> np.ndarray:
        """Remove simultaneous up/down fuzz (cost never increases)."""
        z = z_full.copy()
        for o_up, o_dn, m in ((self.o_dgu, self.o_dgd, self.ng),
                              (self.o_ddu, self.o_ddd, self.nr)):
            if not m:
                continue
            up = z[o_up:o_up + m]
            dn = z[o_dn:o_dn + m]
            shift = np.minimum(up, dn)
            up -= shift
            dn -= shift
        return z


def extract_lmp(problem: CmpProblem, result: NlpResult) -> LmpVector:
    """Nodal prices: KKT multipliers of the active-balance rows, $/MWh.

    The objective is scaled by the MVA base, so the multiplier of a
    per-unit balance row is already a per-MWh price.
    """
    if not result.converged:
        raise CmpError("cannot extract prices from a non-converged solve")
    lam_p = result.lam_eq[:problem.n]
    return LmpVector(bus_ids=tuple(b.id for b in problem.case.buses),
                     values=-lam_p)


def _certificate(problem: CmpProblem, z_full: np.ndarray) -> float:
    """Re-check a decision with an independent evaluator.

    Power-flow side: nodal mismatch recomputed through the admittance-matrix
    path of :mod:`cmengine.powerflow` (a different code path than the
    per-line formulation).  Bound side: scan every operating limit.
    Returns the largest violation in p.u.
    """
    case = problem.case
    settings = FactsSettings(
        x_tcsc=float(z_full[problem.o_xc]) if problem.tcsc_line is not None else None,
        b_statcom=float(z_full[problem.o_bs]) if problem.stat_bus is not None else None,
    )
    ybus = powerflow.build_ybus(case, settings)
    vm = z_full[problem.o_vm:problem.o_qg]
    va = z_full[problem.o_va:problem.o_vm]
    st = problem._state(z_full)
    p_spec, q_spec = problem._injections(z_full, st)
    if problem.stat_bus is not None:
        # device already folded into ybus for this check
        q_spec = q_spec.copy()
        q_spec[problem.stat_bus] -= z_full[problem.o_bs] * vm[problem.stat_bus] ** 2
    s_net = powerflow.bus_injections(ybus, vm, va)
    mismatch = np.max(np.abs(p_spec + 1j * q_spec - s_net))

    viol = [float(mismatch)]
    viol.append(float(np.max(problem.lb_full - z_full, initial=0.0)))
    viol.append(float(np.max(z_full - problem.ub_full, initial=0.0)))
    flows = st["flows"]
    h_flow = problem.row_sign * flows[problem.row_code, problem.row_line] \
        - problem.row_limit
    if h_flow.size:
        viol.append(float(np.max(h_flow, initial=0.0)))
    pg = problem.pg_da + z_full[problem.o_dgu:problem.o_dgd] \
        - z_full[problem.o_dgd:problem.o_ddu]
    qg = z_full[problem.o_qg:problem.o_qw]
    viol.append(float(np.max(pg ** 2 + qg ** 2 - problem.s_g ** 2, initial=0.0)))
    return max(viol)


def _decision_from(problem: CmpProblem, result: NlpResult,
                   z_full: np.ndarray) -> RedispatchDecision:
    case = problem.case
    base = problem.base
    lmp = extract_lmp(problem, result)

    dgu = z_full[problem.o_dgu:problem.o_dgd] * base
    dgd = z_full[problem.o_dgd:problem.o_ddu] * base
    ddu = z_full[problem.o_ddu:problem.o_ddd] * base
    ddd = z_full[problem.o_ddd:problem.o_xc] * base
    tiny = problem.config.nlp_tol * base

    x_bits, y_bits = {}, {}
    mean_lmp = lmp.mean()
    for i, bus in enumerate(problem.dr_bus_ids):
        up, dn = ddu[i], ddd[i]
        if up > tiny and up >= dn:
            x_bits[bus], y_bits[bus] = 1, 0
        elif dn > tiny:
            x_bits[bus], y_bits[bus] = 0, 1
        else:
            # idle bus: commit toward raising where energy is cheap
            below = lmp.values[case.bus_index[bus]] < mean_lmp
            x_bits[bus], y_bits[bus] = (1, 0) if below else (0, 1)

    st = problem._state(z_full)
    flows = powerflow.LineFlows(p_from=st["flows"][0] * base,
                                q_from=st["flows"][2] * base,
                                p_to=st["flows"][1] * base,
                                q_to=st["flows"][3] * base)
    losses = float(np.sum(st["flows"][0] + st["flows"][1])) * base
    cost = float(problem.grad_full @ z_full) * base

    return RedispatchDecision(
        dpg_up={g.id: float(dgu[j]) for j, g in enumerate(case.gencos)},
        dpg_down={g.id: float(dgd[j]) for j, g in enumerate(case.gencos)},
        dpd_up={b: float(ddu[i]) for i, b in enumerate(problem.dr_bus_ids)},
        dpd_down={b: float(ddd[i]) for i, b in enumerate(problem.dr_bus_ids)},
        x=x_bits, y=y_bits,
        tcsc_setpoint=float(z_full[problem.o_xc]) if problem.tcsc_line is not None else None,
        statcom_setpoint=float(z_full[problem.o_bs]) if problem.stat_bus is not None else None,
        cost=cost, lmp=lmp, flows=flows, losses=losses,
        converged=result.converged,
        v=z_full[problem.o_vm:problem.o_qg].copy(),
        theta=z_full[problem.o_va:problem.o_vm].copy(),
        iterations=result.iterations, kkt_error=result.kkt_error,
        max_violation=_certificate(problem, z_full))


def _solve_problem(problem: CmpProblem,
                   warm_starts: tuple[np.ndarray, ...] = ()) -> tuple[NlpResult, np.ndarray]:
    """Run the interior-point solve, retrying across starts and barriers.

    Returns the best converged (result, cleaned full solution); raises
    :class:`CmpError` when every attempt fails.
    """
    cfg = problem.config
    attempts = [(None, 1.0)]
    attempts += [(w, 1.0) for w in warm_starts]
    attempts += [(None, 0.1), (None, 10.0)]

    best = None
    last = None
    for warm, mu0 in attempts:
        z0 = problem.initial_point(warm)
        result = solve_nlp(problem, z0, problem.lb, problem.ub,
                           tol=cfg.nlp_tol, max_iter=cfg.max_iter, mu0=mu0)
        last = result
        if result.converged:
            z_full = problem.cleanup_pairs(problem.expand(result.z))
            cost = float(problem.grad_full @ z_full)
            if best is None or cost < best[2]:
                best = (result, z_full, cost)
            if warm is None and best is not None:
                break
    if best is None:
        feas = float(np.max(np.abs(last.lam_eq))) if last is not None else float("nan")
        raise CmpError(
            f"re-dispatch solve failed: {last.message if last else 'no attempt'}; "
            f"KKT error {last.kkt_error:.3e}" if last else "re-dispatch solve failed")
    return best[0], best[1]


def solve_cmp(case: SystemCase, stage1: ClearingResult, config: CmpConfig,
              p_prev: Optional[dict[int, float]] = None,
              warm_starts: tuple[np.ndarray, ...] = ()) -> RedispatchDecision:
    """Stage-2 congestion management for one hour.

    Day-ahead schedules are fixed; the solver chooses generator and DR
    adjustments plus controller setpoints.  Commitment bits are recovered
    from the continuous relaxation: with nonnegative offer prices the
    relaxed optimum never moves a bus in both directions, so the rounded
    point is optimal for the binary problem whenever its relaxation bound
    is attained (checked; otherwise the directions are enumerated).
    """
    problem = CmpProblem(case, stage1, config, p_prev=p_prev)
    result, z_full = _solve_problem(problem, warm_starts)
    bound = result.f

    if problem.nr and config.binary_strategy == "enumerate":
        tiny = config.nlp_tol
        ddu = z_full[problem.o_ddu:problem.o_ddd]
        ddd = z_full[problem.o_ddd:problem.o_xc]
        if float(np.max(np.minimum(ddu, ddd), initial=0.0)) > tiny:
            # relaxation not complementarity-clean: branch on directions
            result, z_full = _enumerate_directions(case, stage1, config,
                                                   p_prev, bound, problem,
                                                   result, z_full)
    elif problem.nr and config.binary_strategy == "relax_round":
        lmp = extract_lmp(problem, result)
        mean_lmp = lmp.mean()
        forbid_up, forbid_down = set(), set()
        for bus in problem.dr_bus_ids:
            if lmp.values[case.bus_index[bus]] < mean_lmp:
                forbid_down.add(bus)
            else:
                forbid_up.add(bus)
        fixed = CmpProblem(case, stage1, config, p_prev=p_prev,
                           forbid_dr_up=forbid_up, forbid_dr_down=forbid_down)
        result, z_full = _solve_problem(
            fixed, (fixed.transfer_from(problem, z_full),))
        problem = fixed

    return _decision_from(problem, result, z_full)


def _enumerate_directions(case, stage1, config, p_prev, bound, problem,
                          result, z_full):
    """Direction enumeration with relaxation-bound pruning.

    Only reached when the relaxed optimum is not complementarity-clean;
    each node fixes every bus to one direction.
    """
    ddu = z_full[problem.o_ddu:problem.o_ddd]
    ddd = z_full[problem.o_ddd:problem.o_xc]
    base_assign = [up >= dn for up, dn in zip(ddu, ddd)]
    candidates = [base_assign]
    ambiguous = [i for i in range(problem.nr)
                 if min(ddu[i], ddd[i]) > config.nlp_tol]
    for i in ambiguous[:8]:   # flip the fuzziest buses one at a time
        alt = list(base_assign)
        alt[i] = not alt[i]
        candidates.append(alt)

    best = (result, z_full, float(problem.grad_full @ z_full))
    for assign in candidates:
        forbid_up = {b for i, b in enumerate(problem.dr_bus_ids) if not assign[i]}
        forbid_down = {b for i, b in enumerate(problem.dr_bus_ids) if assign[i]}
        node = CmpProblem(case, stage1, config, p_prev=p_prev,
                          forbid_dr_up=forbid_up, forbid_dr_down=forbid_down)
        try:
            res, zf = _solve_problem(node, (node.transfer_from(problem, z_full),))
        except CmpError:
            continue
        cost = float(node.grad_full @ zf)
        if cost < best[2]:
            best = (res, zf, cost)
        if cost <= bound + config.nlp_tol:
            break
    return best[0], best[1]


@dataclass(frozen=True)
class LineLoading:
    line_id: int
    loading: float       # fraction of the MW limit
    violation_mw: float


def congestion_report(flows: powerflow.LineFlows, case: SystemCase) -> list[LineLoading]:
    """Per-line loading, worst first; violation is MW above the limit."""
    out = []
    for k, ln in enumerate(case.lines):
        mag = max(abs(flows.p_from[k]), abs(flows.p_to[k]))
        if np.isfinite(ln.p_max) and ln.p_max > 0:
            out.append(LineLoading(ln.id, mag / ln.p_max, max(0.0, mag - ln.p_max)))
        else:
            out.append(LineLoading(ln.id, 0.0, 0.0))
    out.sort(key=lambda r: r.loading, reverse=True)
    return out


SCENARIOS = ("none", "dr_only", "facts_only", "joint")


@dataclass(frozen=True)
class CompareResult:
    decisions: dict[str, RedispatchDecision]
    errors: dict[str, str]
    monotone_relief: bool

    def cost(self, name: str) -> float:
        return self.decisions[name].cost


def scenario_compare(case: SystemCase, stage1: ClearingResult,
                     config: CmpConfig = CmpConfig(),
                     p_prev: Optional[dict[int, float]] = None) -> CompareResult:
    """Solve the four control scenarios from one stage-1 schedule.

    Later (better-equipped) scenarios are warm-started from earlier
    solutions mapped into their templates, which also anchors the expected
    cost ordering: a richer feasible set never needs to cost more.
    """
    toggles = {"none": (False, False), "dr_only": (False, True),
               "facts_only": (True, False), "joint": (True, True)}
    decisions: dict[str, RedispatchDecision] = {}
    errors: dict[str, str] = {}
    solutions: dict[str, tuple[CmpProblem, np.ndarray]] = {}

    for name in SCENARIOS:
        facts_on, dr_on = toggles[name]
        cfg = CmpConfig(enable_facts=facts_on, enable_dr=dr_on,
                        binary_strategy=config.binary_strategy,
                        nlp_tol=config.nlp_tol, dual_source=config.dual_source,
                        max_iter=config.max_iter)
        problem = CmpProblem(case, stage1, cfg, p_prev=p_prev)
        warm = tuple(problem.transfer_from(src_prob, src_z)
                     for src_name, (src_prob, src_z) in solutions.items())
        try:
            result, z_full = _solve_problem(problem, warm)
        except CmpError as exc:
            errors[name] = str(exc)
            continue
        solutions[name] = (problem, z_full)
        decisions[name] = _decision_from(problem, result, z_full)

    monotone = True
    tol = config.nlp_tol * case.base_mva + 1e-6
    if "joint" in decisions:
        for single in ("dr_only", "facts_only"):
            if single in decisions:
                monotone &= decisions["joint"].cost <= decisions[single].cost + tol
                if "none" in decisions:
                    monotone &= decisions[single].cost <= decisions["none"].cost + tol
    return CompareResult(decisions=decisions, errors=errors,
                         monotone_relief=monotone)
