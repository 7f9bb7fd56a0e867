"""Static injection models of the two network controllers.

A series compensator is a variable capacitive reactance inserted in its host
line; its effect is carried either as an admittance change folded into the
bus admittance matrix or as equivalent power injections at the terminal
buses.  A shunt compensator is a voltage-source converter behind a coupling
impedance; the optimizer sees it as a variable susceptance at its host bus.
All functions are pure and stateless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .netmodel import FactsSpec, Line


class SetpointError(ValueError):
    """A device setpoint violates its operating interval or degenerates the model."""


@dataclass(frozen=True)
class TcscState:
    line: int
    x_tcsc: float


@dataclass(frozen=True)
class StatcomState:
    bus: int
    v_s: float
    delta_s: float
    b_stat: float


@dataclass(frozen=True)
class InjectionQuad:
    """Equivalent injected powers at the two terminal buses (p.u.)."""

    p_i: float
    q_i: float
    p_j: float
    q_j: float


def series_admittance(r: float, x: float) -> complex:
    return 1.0 / complex(r, x)


def tcsc_delta_admittance(line: Line, x_tcsc: float,
                          spec: FactsSpec | None = None) -> tuple[float, float]:
    """Admittance change (dG, dB) of a line compensated by reactance x_tcsc.

    Defined as the exact series-admittance difference
    Y(r, x - x_tcsc) - Y(r, x), which reduces to the closed-form injection
    coefficients of the static model and stays valid on lossless lines.
    """
    if spec is not None and not (spec.x_min - 1e-12 <= x_tcsc <= spec.x_max + 1e-12):
        raise SetpointError(
            f"TCSC setpoint {x_tcsc} outside [{spec.x_min}, {spec.x_max}]")
    x_comp = line.x - x_tcsc
    if abs(x_comp) < 1e-12 and line.r == 0.0:
        raise SetpointError(
            f"compensated reactance of line {line.id} degenerates to zero")
    y_new = series_admittance(line.r, x_comp)
    y_old = series_admittance(line.r, line.x)
    dy = y_new - y_old
    return dy.real, dy.imag


def tcsc_injections(v_i: float, v_j: float, delta_ij: float,
                    d_g: float, d_b: float) -> InjectionQuad:
    """Equivalent terminal injections of a series compensation (dG, dB)."""
    c, s = math.cos(delta_ij), math.sin(delta_ij)
    vv = v_i * v_j
    return InjectionQuad(
        p_i=v_i * v_i * d_g - vv * (d_g * c + d_b * s),
        q_i=-v_i * v_i * d_b - vv * (d_g * s - d_b * c),
        p_j=v_j * v_j * d_g - vv * (d_g * c - d_b * s),
        q_j=-v_j * v_j * d_b + vv * (d_g * s + d_b * c),
    )


def statcom_injections(v_i: float, state: StatcomState, r_s: float, x_s: float,
                       spec: FactsSpec | None = None,
                       delta_i: float = 0.0) -> tuple[float, float]:
    """Active/reactive power injected by the shunt converter at its bus.

    The exchange is driven by delta_is = delta_i - delta_s, the bus angle
    relative to the converter output; with zero coupling resistance and
    aligned angles the familiar Q = v_i (v_s - v_i) / x_s results.
    """
    z2 = r_s * r_s + x_s * x_s
    if z2 <= 0.0:
        raise SetpointError("coupling impedance of the shunt converter is zero")
    if spec is not None and not (spec.vs_min - 1e-12 <= state.v_s <= spec.vs_max + 1e-12):
        raise SetpointError(
            f"converter voltage {state.v_s} outside [{spec.vs_min}, {spec.vs_max}]")
    delta_is = delta_i - state.delta_s
    c, s = math.cos(delta_is), math.sin(delta_is)
    vv = v_i * state.v_s
    p = (r_s * vv * c - x_s * vv * s - r_s * v_i * v_i) / z2
    q = (r_s * vv * s + x_s * vv * c - x_s * v_i * v_i) / z2
    return p, q


def statcom_q_from_susceptance(b_stat: float, v_i: float) -> float:
    """Reactive injection of the susceptance form: Q = b * |V|^2 (p.u.)."""
    return b_stat * v_i * v_i


def clamp_setpoints(spec: FactsSpec, proposed: dict[str, float]) -> dict[str, float]:
    """Project each proposed component onto its closed operating interval."""
    intervals = {
        "TCSC": {"x_tcsc": (spec.x_min, spec.x_max)},
        "STATCOM": {"b_stat": (spec.b_min, spec.b_max),
                    "v_s": (spec.vs_min, spec.vs_max)},
    }.get(spec.kind)
    if intervals is None:
        raise SetpointError(f"unknown device kind {spec.kind!r}")
    out = {}
    for key, value in proposed.items():
        if key not in intervals:
            raise SetpointError(f"{spec.kind} has no setpoint component {key!r}")
        lo, hi = intervals[key]
        out[key] = min(max(value, lo), hi)
    return out


@dataclass(frozen=True)
class FactsSettings:
    """Concrete setpoints applied to a case's devices (None = device idle)."""

    x_tcsc: float | None = None
    b_statcom: float | None = None

    def with_tcsc(self, x: float) -> "FactsSettings":
        return replace(self, x_tcsc=x)

    def with_statcom(self, b: float) -> "FactsSettings":
        return replace(self, b_statcom=b)
