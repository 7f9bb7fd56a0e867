"""Network and market domain model.

Immutable case data types, JSON case-file I/O, validation diagnostics and
cross-reference checks.  All power quantities are MW/MVAr, impedances and
susceptances are per-unit on ``base_mva``.  Instances are frozen after
construction and safe to share between concurrent tasks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from functools import cached_property
from pathlib import Path
from typing import Optional


class CaseError(Exception):
    """Base class for case-file problems."""


class CaseParseError(CaseError):
    """The file is not valid JSON or is missing a required field."""


class CaseReferenceError(CaseError):
    """An entity refers to an id that does not exist in the case."""


class CaseInvariantError(CaseError):
    """A structural rule of the data model is violated."""

    def __init__(self, diagnostics: list["Diagnostic"]):
        self.diagnostics = diagnostics
        lines = "; ".join(str(d) for d in diagnostics)
        super().__init__(f"{len(diagnostics)} invariant violation(s): {lines}")


@dataclass(frozen=True)
class Diagnostic:
    """One validation finding: which entity, which field, which rule."""

    entity: str
    field: str
    rule: str

    def __str__(self) -> str:
        return f"{self.entity}.{self.field}: {self.rule}"


@dataclass(frozen=True)
class Bus:
    id: int
    v_min: float = 0.95
    v_max: float = 1.05
    is_slack: bool = False
    # Fixed shunt susceptance (p.u.), e.g. a reactor or capacitor bank.
    b_shunt: float = 0.0


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_sh: float = 0.0
    p_max: float = math.inf
    q_max: float = math.inf
    tcsc_host: bool = False


@dataclass(frozen=True)
class Genco:
    id: int
    bus: int
    p_min: float
    p_max: float
    s_rated: float
    alpha: float
    beta: float
    gamma: float
    ramp_up: float
    ramp_down: float
    offer_up: float
    offer_down: float

    def marginal_cost(self, p: float) -> float:
        return self.beta + 2.0 * self.gamma * p


@dataclass(frozen=True)
class SpeedDistribution:
    """Wind-speed distribution parameters (family tag plus moments)."""

    family: str  # "weibull" | "normal" | "deterministic"
    mean: float
    scale: float = 0.0
    shape: float = 0.0


@dataclass(frozen=True)
class WindProducer:
    id: int
    bus: int
    p_min: float
    p_max: float
    v_rated: float
    v_cut_in: float
    v_cut_out: float
    kappa_min: float = 0.9
    speed_dist: Optional[SpeedDistribution] = None
    offer_price: float = 0.0


@dataclass(frozen=True)
class LoadPoint:
    id: int
    bus: int
    p_base: float
    power_factor: float
    bid_price: Optional[float] = None
    offer_up: float = 0.0
    offer_down: float = 0.0
    ramp_up: float = 0.0
    ramp_down: float = 0.0
    # Reporting group: several load points may bid as one demand company.
    disco: Optional[int] = None

    @property
    def tan_phi(self) -> float:
        pf = self.power_factor
        return math.sqrt(max(1.0 - pf * pf, 0.0)) / pf


@dataclass(frozen=True)
class DrResource:
    bus: int
    size_mw: float
    incentive: float
    penalty_rate: float
    contracted_cut: float = 0.0


@dataclass(frozen=True)
class FactsSpec:
    kind: str  # "TCSC" | "STATCOM"
    location: int  # line id for TCSC, bus id for STATCOM
    x_min: float = 0.0
    x_max: float = 0.0
    b_min: float = 0.0
    b_max: float = 0.0
    vs_min: float = 0.9
    vs_max: float = 1.1
    r_s: float = 0.0
    x_s: float = 0.1


@dataclass(frozen=True)
class ElasticityMatrix:
    """Period-level demand elasticities.

    ``values[i][j]`` relates demand in period ``periods[i]`` to the price in
    period ``periods[j]``; diagonal entries are self-elasticities (negative
    under the canonical sign convention), off-diagonal cross-elasticities
    (non-negative).  ``period_hours`` maps each label to 1-based hours.
    """

    periods: tuple[str, ...]
    values: tuple[tuple[float, ...], ...]
    period_hours: dict[str, tuple[int, ...]] = field(hash=False, default_factory=dict)

    def period_of_hour(self, hour: int) -> str:
        for label, hours in self.period_hours.items():
            if hour in hours:
                return label
        raise KeyError(f"hour {hour} not covered by any period")

    def value(self, period_i: str, period_j: str) -> float:
        i = self.periods.index(period_i)
        j = self.periods.index(period_j)
        return self.values[i][j]


@dataclass(frozen=True)
class SystemCase:
    """Full network plus market data set for one study system."""

    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    gencos: tuple[Genco, ...]
    wind_producers: tuple[WindProducer, ...]
    loads: tuple[LoadPoint, ...]
    dr_resources: tuple[DrResource, ...]
    facts_specs: tuple[FactsSpec, ...]
    elasticity: Optional[ElasticityMatrix]
    load_profile: tuple[float, ...]
    dr_participation: float
    incentive: float = 0.0
    penalty_rate: float = 0.0
    meta: dict = field(hash=False, default_factory=dict)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def line_index(self) -> dict[int, int]:
        return {ln.id: i for i, ln in enumerate(self.lines)}

    @cached_property
    def slack_bus(self) -> Bus:
        slacks = [b for b in self.buses if b.is_slack]
        if len(slacks) != 1:
            raise CaseInvariantError(
                [Diagnostic("case", "buses", f"exactly one slack bus required, found {len(slacks)}")]
            )
        return slacks[0]

    @cached_property
    def load_at_bus(self) -> dict[int, LoadPoint]:
        return {ld.bus: ld for ld in self.loads}

    @cached_property
    def dr_at_bus(self) -> dict[int, DrResource]:
        return {dr.bus: dr for dr in self.dr_resources}

    def n_buses(self) -> int:
        return len(self.buses)

    def dr_effective_size(self, dr: DrResource) -> float:
        """Curtailable MW at a DR bus: the tighter of the resource size and
        the enrolled share of the host load."""
        host = self.load_at_bus.get(dr.bus)
        if host is None:
            return dr.size_mw
        return min(dr.size_mw, self.dr_participation * host.p_base)

    def tcsc_spec(self) -> Optional[FactsSpec]:
        for fs in self.facts_specs:
            if fs.kind == "TCSC":
                return fs
        return None

    def statcom_spec(self) -> Optional[FactsSpec]:
        for fs in self.facts_specs:
            if fs.kind == "STATCOM":
                return fs
        return None

    def default_bid_price(self) -> float:
        """Fill-in demand bid: 1.2x the steepest generator marginal cost, so
        all demand clears when the network is unconstrained."""
        if not self.gencos:
            return 0.0
        return 1.2 * max(g.marginal_cost(g.p_max) for g in self.gencos)


def validate_case(case: SystemCase) -> list[Diagnostic]:
    """Check every structural invariant; return one diagnostic per breach.

    An empty list means the case is internally consistent.  Dangling
    references are reported here as well so a single pass covers a case
    built by hand rather than through :func:`load_case`.
    """
    out: list[Diagnostic] = []
    bus_ids = {b.id for b in case.buses}
    line_ids = {ln.id for ln in case.lines}

    if len(bus_ids) != len(case.buses):
        out.append(Diagnostic("case", "buses", "duplicate bus ids"))
    n_slack = sum(1 for b in case.buses if b.is_slack)
    if n_slack != 1:
        out.append(Diagnostic("case", "buses", f"exactly one slack bus required, found {n_slack}"))

    for b in case.buses:
        if not (0.0 < b.v_min <= b.v_max):
            out.append(Diagnostic(f"bus {b.id}", "v_min/v_max", "requires 0 < v_min <= v_max"))

    for ln in case.lines:
        if ln.from_bus not in bus_ids:
            out.append(Diagnostic(f"line {ln.id}", "from_bus", f"unknown bus {ln.from_bus}"))
        if ln.to_bus not in bus_ids:
            out.append(Diagnostic(f"line {ln.id}", "to_bus", f"unknown bus {ln.to_bus}"))
        if ln.from_bus == ln.to_bus:
            out.append(Diagnostic(f"line {ln.id}", "from_bus/to_bus", "self-loop not allowed"))
        if ln.x == 0.0:
            out.append(Diagnostic(f"line {ln.id}", "x", "series reactance must be nonzero"))
        if not ln.p_max > 0.0:
            out.append(Diagnostic(f"line {ln.id}", "p_max", "flow limit must be positive"))

    for g in case.gencos:
        if g.bus not in bus_ids:
            out.append(Diagnostic(f"genco {g.id}", "bus", f"unknown bus {g.bus}"))
        if not (0.0 <= g.p_min <= g.p_max <= g.s_rated):
            out.append(Diagnostic(f"genco {g.id}", "p_min/p_max/s_rated",
                                  "requires 0 <= p_min <= p_max <= s_rated"))
        if g.gamma < 0.0:
            out.append(Diagnostic(f"genco {g.id}", "gamma", "quadratic cost coefficient must be >= 0"))
        if g.ramp_up < 0.0 or g.ramp_down < 0.0:
            out.append(Diagnostic(f"genco {g.id}", "ramp_up/ramp_down", "ramps must be >= 0"))

    for w in case.wind_producers:
        if w.bus not in bus_ids:
            out.append(Diagnostic(f"wind {w.id}", "bus", f"unknown bus {w.bus}"))
        if not (w.v_cut_in < w.v_rated < w.v_cut_out):
            out.append(Diagnostic(f"wind {w.id}", "v_cut_in/v_rated/v_cut_out",
                                  "requires v_cut_in < v_rated < v_cut_out"))
        if not (0.0 < w.kappa_min <= 1.0):
            out.append(Diagnostic(f"wind {w.id}", "kappa_min", "requires 0 < kappa_min <= 1"))
        if w.p_min > w.p_max:
            out.append(Diagnostic(f"wind {w.id}", "p_min/p_max", "requires p_min <= p_max"))

    seen_load_bus: set[int] = set()
    for ld in case.loads:
        if ld.bus not in bus_ids:
            out.append(Diagnostic(f"load {ld.id}", "bus", f"unknown bus {ld.bus}"))
        if ld.bus in seen_load_bus:
            out.append(Diagnostic(f"load {ld.id}", "bus", f"second load point at bus {ld.bus}"))
        seen_load_bus.add(ld.bus)
        if ld.p_base < 0.0:
            out.append(Diagnostic(f"load {ld.id}", "p_base", "base demand must be >= 0"))
        if not (0.0 < ld.power_factor <= 1.0):
            out.append(Diagnostic(f"load {ld.id}", "power_factor", "requires 0 < power_factor <= 1"))

    for dr in case.dr_resources:
        host = case.load_at_bus.get(dr.bus) if dr.bus in bus_ids else None
        if dr.bus not in bus_ids:
            out.append(Diagnostic(f"dr_resource bus {dr.bus}", "bus", f"unknown bus {dr.bus}"))
        elif host is None:
            out.append(Diagnostic(f"dr_resource bus {dr.bus}", "bus", "no load point at this bus"))
        elif not (0.0 <= dr.size_mw <= host.p_base):
            out.append(Diagnostic(f"dr_resource bus {dr.bus}", "size_mw",
                                  f"curtailable capacity must lie in [0, host load {host.p_base} MW]"))
        if dr.incentive < 0.0 or dr.penalty_rate < 0.0:
            out.append(Diagnostic(f"dr_resource bus {dr.bus}", "incentive/penalty_rate",
                                  "rates must be >= 0"))

    for fs in case.facts_specs:
        if fs.kind not in ("TCSC", "STATCOM"):
            out.append(Diagnostic(f"facts {fs.kind}", "kind", "must be TCSC or STATCOM"))
            continue
        if fs.kind == "TCSC":
            if fs.location not in line_ids:
                out.append(Diagnostic("facts TCSC", "location", f"unknown line {fs.location}"))
            if fs.x_min > fs.x_max:
                out.append(Diagnostic("facts TCSC", "x_min/x_max", "requires x_min <= x_max"))
        else:
            if fs.location not in bus_ids:
                out.append(Diagnostic("facts STATCOM", "location", f"unknown bus {fs.location}"))
            if fs.b_min > fs.b_max:
                out.append(Diagnostic("facts STATCOM", "b_min/b_max", "requires b_min <= b_max"))
            if fs.vs_min > fs.vs_max:
                out.append(Diagnostic("facts STATCOM", "vs_min/vs_max", "requires vs_min <= vs_max"))

    if case.elasticity is not None:
        em = case.elasticity
        n = len(em.periods)
        if any(len(row) != n for row in em.values) or len(em.values) != n:
            out.append(Diagnostic("elasticity", "values", "matrix dimensions must match period count"))
        else:
            for i in range(n):
                if em.values[i][i] > 0.0:
                    out.append(Diagnostic("elasticity", f"values[{i}][{i}]",
                                          "self-elasticity must be <= 0"))
                for j in range(n):
                    if i != j and em.values[i][j] < 0.0:
                        out.append(Diagnostic("elasticity", f"values[{i}][{j}]",
                                              "cross-elasticity must be >= 0"))
        if em.period_hours:
            covered = sorted(h for hours in em.period_hours.values() for h in hours)
            if covered != list(range(1, 25)):
                out.append(Diagnostic("elasticity", "period_hours",
                                      "period hours must cover 1..24 exactly once"))

    if case.load_profile and len(case.load_profile) != 24:
        out.append(Diagnostic("case", "load_profile", "must contain 24 hourly factors"))
    if not (0.0 <= case.dr_participation <= 1.0):
        out.append(Diagnostic("case", "dr_participation", "must lie in [0, 1]"))
    if case.base_mva <= 0.0:
        out.append(Diagnostic("case", "base_mva", "must be positive"))

    return out


# --------------------------------------------------------------------------
# JSON case-file format
# --------------------------------------------------------------------------

def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise CaseParseError(f"{where}: missing required field '{key}'")
    return obj[key]


def _case_from_dict(doc: dict, source: str = "<dict>") -> SystemCase:
    if not isinstance(doc, dict):
        raise CaseParseError(f"{source}: top level must be a JSON object")

    def build(cls, raw: dict, where: str):
        try:
            return cls(**raw)
        except TypeError as exc:
            raise CaseParseError(f"{source}: {where}: {exc}") from exc

    buses = tuple(build(Bus, b, f"buses[{i}]") for i, b in enumerate(_require(doc, "buses", source)))
    lines = tuple(build(Line, ln, f"lines[{i}]") for i, ln in enumerate(_require(doc, "lines", source)))
    gencos = tuple(build(Genco, g, f"gencos[{i}]") for i, g in enumerate(_require(doc, "gencos", source)))

    wind = []
    for i, w in enumerate(doc.get("wind_producers", [])):
        w = dict(w)
        if w.get("speed_dist") is not None:
            w["speed_dist"] = build(SpeedDistribution, w["speed_dist"], f"wind_producers[{i}].speed_dist")
        wind.append(build(WindProducer, w, f"wind_producers[{i}]"))

    loads = tuple(build(LoadPoint, ld, f"loads[{i}]") for i, ld in enumerate(doc.get("loads", [])))
    drs = tuple(build(DrResource, d, f"dr_resources[{i}]") for i, d in enumerate(doc.get("dr_resources", [])))
    facts = tuple(build(FactsSpec, f, f"facts[{i}]") for i, f in enumerate(doc.get("facts", [])))

    elasticity = None
    if doc.get("elasticity") is not None:
        e = doc["elasticity"]
        elasticity = ElasticityMatrix(
            periods=tuple(_require(e, "periods", f"{source}: elasticity")),
            values=tuple(tuple(row) for row in _require(e, "values", f"{source}: elasticity")),
            period_hours={k: tuple(v) for k, v in e.get("period_hours", {}).items()},
        )

    tariff = doc.get("tariff", {})
    case = SystemCase(
        name=doc.get("name", Path(source).stem if source != "<dict>" else "case"),
        base_mva=float(doc.get("base_mva", 100.0)),
        buses=buses,
        lines=lines,
        gencos=gencos,
        wind_producers=tuple(wind),
        loads=loads,
        dr_resources=drs,
        facts_specs=facts,
        elasticity=elasticity,
        load_profile=tuple(doc.get("load_profile", [])),
        dr_participation=float(doc.get("dr_participation", 0.0)),
        incentive=float(tariff.get("incentive_usd_per_mwh", 0.0)),
        penalty_rate=float(tariff.get("penalty_usd_per_mwh", 0.0)),
        meta=doc.get("meta", {}),
    )

    # Materialize derived defaults so a written case round-trips unchanged.
    if any(ld.bid_price is None for ld in loads):
        bid = case.default_bid_price()
        loads = tuple(
            ld if ld.bid_price is not None else
            LoadPoint(**{**asdict(ld), "bid_price": bid})
            for ld in loads
        )
        case = SystemCase(**{**_case_fields(case), "loads": loads})

    _check_references(case, source)
    problems = validate_case(case)
    if problems:
        raise CaseInvariantError(problems)
    return case


def _case_fields(case: SystemCase) -> dict:
    return {
        "name": case.name, "base_mva": case.base_mva, "buses": case.buses,
        "lines": case.lines, "gencos": case.gencos,
        "wind_producers": case.wind_producers, "loads": case.loads,
        "dr_resources": case.dr_resources, "facts_specs": case.facts_specs,
        "elasticity": case.elasticity, "load_profile": case.load_profile,
        "dr_participation": case.dr_participation, "incentive": case.incentive,
        "penalty_rate": case.penalty_rate, "meta": case.meta,
    }


def _check_references(case: SystemCase, source: str) -> None:
    bus_ids = {b.id for b in case.buses}
    line_ids = {ln.id for ln in case.lines}
    for ln in case.lines:
        for end in (ln.from_bus, ln.to_bus):
            if end not in bus_ids:
                raise CaseReferenceError(f"{source}: line {ln.id} references unknown bus {end}")
    for g in case.gencos:
        if g.bus not in bus_ids:
            raise CaseReferenceError(f"{source}: genco {g.id} references unknown bus {g.bus}")
    for w in case.wind_producers:
        if w.bus not in bus_ids:
            raise CaseReferenceError(f"{source}: wind producer {w.id} references unknown bus {w.bus}")
    for ld in case.loads:
        if ld.bus not in bus_ids:
            raise CaseReferenceError(f"{source}: load {ld.id} references unknown bus {ld.bus}")
    for dr in case.dr_resources:
        if dr.bus not in bus_ids:
            raise CaseReferenceError(f"{source}: DR resource references unknown bus {dr.bus}")
    for fs in case.facts_specs:
        pool = line_ids if fs.kind == "TCSC" else bus_ids
        what = "line" if fs.kind == "TCSC" else "bus"
        if fs.location not in pool:
            raise CaseReferenceError(f"{source}: {fs.kind} references unknown {what} {fs.location}")


def load_case(path: str | Path) -> SystemCase:
    """Parse, cross-reference and validate a JSON case file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CaseParseError(f"{path}: {exc}") from exc
    if not text.strip():
        raise CaseParseError(f"{path}: file is empty")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return _case_from_dict(doc, str(path))


def case_to_dict(case: SystemCase) -> dict:
    """Serialize a case back to the JSON document structure."""
    doc = {
        "name": case.name,
        "meta": case.meta,
        "base_mva": case.base_mva,
        "dr_participation": case.dr_participation,
        "tariff": {
            "incentive_usd_per_mwh": case.incentive,
            "penalty_usd_per_mwh": case.penalty_rate,
        },
        "load_profile": list(case.load_profile),
        "buses": [asdict(b) for b in case.buses],
        "lines": [asdict(ln) for ln in case.lines],
        "gencos": [asdict(g) for g in case.gencos],
        "wind_producers": [asdict(w) for w in case.wind_producers],
        "loads": [asdict(ld) for ld in case.loads],
        "dr_resources": [asdict(d) for d in case.dr_resources],
        "facts": [asdict(f) for f in case.facts_specs],
    }
    if case.elasticity is not None:
        doc["elasticity"] = {
            "periods": list(case.elasticity.periods),
            "values": [list(row) for row in case.elasticity.values],
            "period_hours": {k: list(v) for k, v in case.elasticity.period_hours.items()},
        }
    return doc


def write_case(case: SystemCase, path: str | Path) -> None:
    Path(path).write_text(json.dumps(case_to_dict(case), indent=1) + "\n")


def build_rts24() -> SystemCase:
    """Return the embedded 24-bus reliability-test-system market case."""
    from importlib.resources import files

    data = files("cmengine.data").joinpath("rts24.json")
    return _case_from_dict(json.loads(data.read_text()), "rts24.json")
