"""Primal-dual interior-point solver for smooth constrained minimization.

Solves
    min f(z)   s.t.   g(z) = 0,   h(z) <= 0,   lb <= z <= ub

with exact first and second derivatives supplied by the caller.  The
inequality set gets slack variables with a log barrier; simple bounds are
handled directly with their own dual pair so no slack storage is wasted on
them.  The barrier parameter follows the monotone Fiacco-McCormick update.
Dense linear algebra throughout: the reduced KKT system is assembled as a
(nz + ne) square matrix, which is the right trade-off for problems up to a
few hundred variables.

The returned multipliers are exact KKT multipliers at the accepted iterate;
equality multipliers carry marginal-price information for the caller.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass
class NlpResult:
    z: np.ndarray
    f: float
    converged: bool
    iterations: int
    kkt_error: float
    lam_eq: np.ndarray       # equality multipliers
    mu_ineq: np.ndarray      # inequality multipliers (>= 0)
    z_lower: np.ndarray      # bound multipliers
    z_upper: np.ndarray
    message: str = ""


class NlpCallbacks:
    """Problem interface.  Subclass or duck-type.

    eval_fgh(z) -> (f, grad_f, g, Jg, h, Jh)
        f: float, grad_f: (nz,), g: (ne,), Jg: (ne, nz), h: (ni,), Jh: (ni, nz)
    hess_lagrangian(z, lam, mu) -> (nz, nz) symmetric
        Hessian of f + lam . g + mu . h (objective curvature included).
    """

    def eval_fgh(self, z):  # pragma: no cover - interface stub
        raise NotImplementedError

    def hess_lagrangian(self, z, lam, mu):  # pragma: no cover - interface stub
        raise NotImplementedError


def _max_step(x: np.ndarray, dx: np.ndarray, tau: float) -> float:
    """Largest alpha in (0, 1] with x + alpha dx >= (1 - tau) x, x > 0."""
    neg = dx < 0.0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * x[neg] / dx[neg])))


def solve_nlp(problem: NlpCallbacks, z0: np.ndarray, lb: np.ndarray, ub: np.ndarray,
              tol: float = 1e-6, max_iter: int = 150, mu0: float = 1.0,
              bound_push: float = 1e-2, trace: Optional[list] = None) -> NlpResult:
    nz = z0.size
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    has_lb = np.isfinite(lb)
    has_ub = np.isfinite(ub)

    # Push the start strictly inside its box.
    z = np.asarray(z0, dtype=float).copy()
    span = np.where(has_lb & has_ub, ub - lb, 1.0)
    push = np.minimum(bound_push * np.maximum(span, 1.0), 0.5 * span)
    push = np.maximum(push, 1e-8)
    z[has_lb] = np.maximum(z[has_lb], lb[has_lb] + push[has_lb])
    z[has_ub] = np.minimum(z[has_ub], ub[has_ub] - push[has_ub])

    f, df, g, jg, h, jh = problem.eval_fgh(z)
    ne, ni = g.size, h.size

    s = np.maximum(-h, 1e-2) if ni else np.zeros(0)
    mu_bar = mu0
    mu = np.full(ni, mu_bar) / s if ni else np.zeros(0)
    lam = np.zeros(ne)
    zl = np.where(has_lb, mu_bar / np.maximum(z - lb, 1e-8), 0.0)
    zu = np.where(has_ub, mu_bar / np.maximum(ub - z, 1e-8), 0.0)

    def kkt_errors():
        r_d = df + (jg.T @ lam if ne else 0.0) + (jh.T @ mu if ni else 0.0) - zl + zu
        scale = max(100.0, (np.sum(np.abs(lam)) + np.sum(np.abs(mu)) +
                            np.sum(zl) + np.sum(zu)) /
                    max(1, ne + ni + nz)) / 100.0
        e_d = float(np.max(np.abs(r_d))) / scale if nz else 0.0
        e_g = float(np.max(np.abs(g))) if ne else 0.0
        e_h = float(np.max(np.abs(h + s))) if ni else 0.0
        comp = []
        if ni:
            comp.append(np.max(np.abs(s * mu)))
        if np.any(has_lb):
            comp.append(np.max(np.abs(zl[has_lb] * (z - lb)[has_lb])))
        if np.any(has_ub):
            comp.append(np.max(np.abs(zu[has_ub] * (ub - z)[has_ub])))
        e_c = float(max(comp)) / scale if comp else 0.0
        return max(e_d, e_g, e_h), e_c, r_d

    delta = 0.0
    message = "max iterations reached"
    it = 0
    for it in range(1, max_iter + 1):
        e_feas, e_comp, r_d = kkt_errors()
        if max(e_feas, e_comp) <= tol:
            message = "converged"
            return NlpResult(z=z, f=f, converged=True, iterations=it - 1,
                             kkt_error=max(e_feas, e_comp), lam_eq=lam,
                             mu_ineq=mu, z_lower=zl, z_upper=zu, message=message)

        # Monotone barrier reduction once the current sub-problem is solved.
        while max(e_feas, e_comp) <= 10.0 * mu_bar and mu_bar > tol / 20.0:
            mu_bar = max(tol / 20.0, min(0.2 * mu_bar, mu_bar ** 1.5))

        hess = problem.hess_lagrangian(z, lam, mu)

        gap_l = np.where(has_lb, np.maximum(z - lb, 1e-14), 1.0)
        gap_u = np.where(has_ub, np.maximum(ub - z, 1e-14), 1.0)
        dl = np.where(has_lb, zl / gap_l, 0.0)
        du = np.where(has_ub, zu / gap_u, 0.0)

        m = hess + np.diag(dl + du)
        rhs_z = -r_d.copy()
        if ni:
            sig = mu / s
            m += jh.T @ (sig[:, None] * jh)
            rhs_z -= jh.T @ ((mu_bar / s) + mu * (h / s))
        rhs_z += np.where(has_lb, mu_bar / gap_l - zl, 0.0)
        rhs_z -= np.where(has_ub, mu_bar / gap_u - zu, 0.0)

        for attempt in range(12):
            reg = delta if attempt == 0 else max(delta, 1e-8) * (10.0 ** attempt)
            kkt = np.zeros((nz + ne, nz + ne))
            kkt[:nz, :nz] = m + reg * np.eye(nz)
            if ne:
                kkt[:nz, nz:] = jg.T
                kkt[nz:, :nz] = jg
                if attempt:
                    kkt[nz:, nz:] = -1e-2 * reg * np.eye(ne)
            rhs = np.concatenate([rhs_z, -g]) if ne else rhs_z
            try:
                step = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            if np.all(np.isfinite(step)):
                delta = reg if attempt else max(0.0, delta / 3.0)
                break
        else:
            message = "KKT system could not be factorized"
            break

        dz = step[:nz]
        dlam = step[nz:] if ne else np.zeros(0)

        if ni:
            ds = -(h + s) - jh @ dz
            dmu = (mu_bar - s * mu) / s - mu * ds / s
        else:
            ds = np.zeros(0)
            dmu = np.zeros(0)
        dzl = np.where(has_lb, (mu_bar - zl * gap_l) / gap_l - dl * dz, 0.0)
        dzu = np.where(has_ub, (mu_bar - zu * gap_u) / gap_u + du * dz, 0.0)

        tau = max(0.99, 1.0 - mu_bar)
        alpha_p = 1.0
        if ni:
            alpha_p = min(alpha_p, _max_step(s, ds, tau))
        if np.any(has_lb):
            alpha_p = min(alpha_p, _max_step((z - lb)[has_lb], dz[has_lb], tau))
        if np.any(has_ub):
            alpha_p = min(alpha_p, _max_step((ub - z)[has_ub], -dz[has_ub], tau))
        alpha_d = 1.0
        if ni:
            alpha_d = min(alpha_d, _max_step(mu, dmu, tau))
        if np.any(has_lb):
            alpha_d = min(alpha_d, _max_step(zl[has_lb], dzl[has_lb], tau))
        if np.any(has_ub):
            alpha_d = min(alpha_d, _max_step(zu[has_ub], dzu[has_ub], tau))

        if trace is not None:
            trace.append(dict(it=it, mu=mu_bar, e_feas=e_feas, e_comp=e_comp,
                              alpha_p=alpha_p, alpha_d=alpha_d, f=f, reg=delta))
        z = z + alpha_p * dz
        if ni:
            s = s + alpha_p * ds
            mu = np.maximum(mu + alpha_d * dmu, 1e-16)
        lam = lam + alpha_d * dlam
        zl = np.where(has_lb, np.maximum(zl + alpha_d * dzl, 1e-16), 0.0)
        zu = np.where(has_ub, np.maximum(zu + alpha_d * dzu, 1e-16), 0.0)

        f, df, g, jg, h, jh = problem.eval_fgh(z)

        dual_scale = np.sum(np.abs(lam)) + np.sum(np.abs(mu))
        if dual_scale > 1e9 and (np.max(np.abs(g)) if ne else 0.0) > 100.0 * tol:
            message = "diverging multipliers: problem locally infeasible"
            break

    e_feas, e_comp, _ = kkt_errors()
    return NlpResult(z=z, f=f, converged=False, iterations=it,
                     kkt_error=max(e_feas, e_comp), lam_eq=lam, mu_ineq=mu,
                     z_lower=zl, z_upper=zu, message=message)
