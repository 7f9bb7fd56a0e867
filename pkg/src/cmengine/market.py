"""Day-ahead clearing: welfare-maximizing single-price auction.

The first stage is network-free: elastic demand bids, generator offers with
quadratic production cost, and wind offers clear against one system-wide
balance.  The clearing price is the exact KKT multiplier of the balance
constraint, computed by an exact sweep over the piecewise-linear aggregate
supply and staircase demand curves rather than by an iterative QP solve, so
interior participants satisfy marginal-cost equality to machine precision.

Ties (several participants marginal at the clearing price) are resolved by
lowest participant id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .netmodel import SystemCase


class MarketError(RuntimeError):
    pass


class InfeasibleMarket(MarketError):
    """Participant bounds cannot balance supply and demand."""


class MalformedOffer(MarketError):
    """An offer contains non-finite or inconsistent data."""


@dataclass(frozen=True)
class DemandBid:
    id: int
    price: float          # $/MWh willingness to pay
    q_max: float          # MW
    q_min: float = 0.0
    disco: Optional[int] = None


@dataclass(frozen=True)
class GencoOffer:
    id: int
    p_min: float
    p_max: float
    alpha: float
    beta: float
    gamma: float
    offer_price: float = 0.0   # price adder; zero under marginal-cost bidding

    def marginal(self, p: float) -> float:
        return self.offer_price + self.beta + 2.0 * self.gamma * p


@dataclass(frozen=True)
class WindOffer:
    id: int
    price: float
    p_min: float
    p_max: float


@dataclass(frozen=True)
class OfferSet:
    demands: tuple[DemandBid, ...]
    gencos: tuple[GencoOffer, ...]
    winds: tuple[WindOffer, ...]
    hour: Optional[int] = None


@dataclass(frozen=True)
class ClearingResult:
    p_d: dict[int, float]      # demand id -> MW
    p_g: dict[int, float]      # genco id -> MW
    p_w: dict[int, float]      # wind id -> MW
    lambda_da: float           # $/MWh, balance dual
    welfare: float             # $
    hour: Optional[int] = None

    def total_demand(self) -> float:
        return sum(self.p_d.values())

    def total_generation(self) -> float:
        return sum(self.p_g.values()) + sum(self.p_w.values())

    def balance_residual(self) -> float:
        return self.total_demand() - self.total_generation()


def genco_cost(p: float, alpha: float, beta: float, gamma: float) -> float:
    """Quadratic production cost alpha + beta p + gamma p^2 ($/h at p MW)."""
    return alpha + beta * p + gamma * p * p


def build_offers(case: SystemCase, hour: Optional[int] = None,
                 wind_available: Optional[dict[int, float]] = None,
                 use_genco_offer_price: bool = False) -> OfferSet:
    """Assemble the hour's offer set from a case.

    ``wind_available`` caps each wind producer's offer at the realized
    available power; the offer floor shrinks with availability so a becalmed
    producer clears at zero rather than making the auction infeasible.
    Generator offer adders default to zero (marginal-cost bidding); pass
    ``use_genco_offer_price`` to price them at their upward re-dispatch
    offers instead.
    """
    scale = 1.0
    if hour is not None and case.load_profile:
        scale = case.load_profile[hour - 1]
    demands = tuple(
        DemandBid(id=ld.id, price=ld.bid_price if ld.bid_price is not None
                  else case.default_bid_price(),
                  q_max=ld.p_base * scale, disco=ld.disco)
        for ld in case.loads
    )
    gencos = tuple(
        GencoOffer(id=g.id, p_min=g.p_min, p_max=g.p_max, alpha=g.alpha,
                   beta=g.beta, gamma=g.gamma,
                   offer_price=g.offer_up if use_genco_offer_price else 0.0)
        for g in case.gencos
    )
    winds = []
    for w in case.wind_producers:
        avail = w.p_max
        if wind_available is not None and w.id in wind_available:
            avail = min(avail, max(wind_available[w.id], 0.0))
        winds.append(WindOffer(id=w.id, price=w.offer_price,
                               p_min=min(w.p_min, avail), p_max=avail))
    return OfferSet(demands=demands, gencos=gencos, winds=tuple(winds), hour=hour)


def _check_offers(offers: OfferSet) -> None:
    values = []
    for d in offers.demands:
        values += [d.price, d.q_max]
        if d.q_max < 0:
            raise MalformedOffer(f"demand {d.id}: negative quantity")
    for g in offers.gencos:
        values += [g.beta, g.gamma, g.p_min, g.p_max]
        if g.gamma < 0:
            raise MalformedOffer(f"genco {g.id}: negative quadratic coefficient")
        if not 0 <= g.p_min <= g.p_max:
            raise MalformedOffer(f"genco {g.id}: inconsistent bounds")
    for w in offers.winds:
        values += [w.price, w.p_min, w.p_max]
        if not 0 <= w.p_min <= w.p_max:
            raise MalformedOffer(f"wind {w.id}: inconsistent bounds")
    if any(not math.isfinite(v) and not (v == math.inf) for v in values):
        raise MalformedOffer("non-finite offer data")


def _clip(v, lo, hi):
    return min(max(v, lo), hi)


def clear_day_ahead(offers: OfferSet) -> ClearingResult:
    """Clear the hour; returns schedules and the exact balance dual.

    Raises :class:`InfeasibleMarket` when mandatory minimum generation
    exceeds total willing demand or maximum supply cannot cover rigid
    demand floors, and :class:`MalformedOffer` on bad input.
    """
    _check_offers(offers)

    def supply_limits(lam):
        """(min, max, slope) of aggregate supply at price lam."""
        s_min = s_max = slope = 0.0
        for g in offers.gencos:
            lo, hi = g.marginal(g.p_min), g.marginal(g.p_max)
            if g.gamma > 0.0:
                p = _clip((lam - g.beta - g.offer_price) / (2.0 * g.gamma),
                          g.p_min, g.p_max)
                s_min += p
                s_max += p
                if lo < lam < hi:
                    slope += 0.5 / g.gamma
            else:
                if lam < lo:
                    s_min += g.p_min
                    s_max += g.p_min
                elif lam > lo:
                    s_min += g.p_max
                    s_max += g.p_max
                else:
                    s_min += g.p_min
                    s_max += g.p_max
        for w in offers.winds:
            if lam < w.price:
                s_min += w.p_min
                s_max += w.p_min
            elif lam > w.price:
                s_min += w.p_max
                s_max += w.p_max
            else:
                s_min += w.p_min
                s_max += w.p_max
        return s_min, s_max, slope

    def demand_limits(lam):
        d_min = d_max = 0.0
        for d in offers.demands:
            if lam < d.price:
                d_min += d.q_max
                d_max += d.q_max
            elif lam > d.price:
                pass
            else:
                d_max += d.q_max
        return d_min, d_max

    breakpoints = set()
    for g in offers.gencos:
        breakpoints.add(g.marginal(g.p_min))
        breakpoints.add(g.marginal(g.p_max))
    for w in offers.winds:
        breakpoints.add(w.price)
    for d in offers.demands:
        if math.isfinite(d.price):
            breakpoints.add(d.price)
    points = sorted(breakpoints)

    lam_star = None
    # Crossing strictly inside an interval between breakpoints.
    intervals = []
    if points:
        intervals.append((points[0] - 1.0, points[0]))
        for a, b in zip(points, points[1:]):
            intervals.append((a, b))
        intervals.append((points[-1], points[-1] + 1.0))
    for a, b in intervals:
        mid = 0.5 * (a + b)
        s_min, s_max, slope = supply_limits(mid)
        d_min, d_max = demand_limits(mid)
        gap = s_min - d_min   # supply minus demand, both single-valued here
        if abs(gap) < 1e-12:
            lam_star = mid
            break
        if slope > 0.0:
            lam = mid - gap / slope
            if a < lam < b:
                lam_star = lam
                break
    if lam_star is None:
        # Crossing sits at a breakpoint (rationing of marginal participants).
        for lam in points:
            s_min, s_max, _ = supply_limits(lam)
            d_min, d_max = demand_limits(lam)
            if s_min <= d_max + 1e-9 and d_min <= s_max + 1e-9:
                lam_star = lam
                break
    if lam_star is None:
        raise InfeasibleMarket("supply and demand curves do not cross; "
                               "participant bounds cannot balance")

    s_min, s_max, _ = supply_limits(lam_star)
    d_min, d_max = demand_limits(lam_star)
    q_lo = max(s_min, d_min)
    q_hi = min(s_max, d_max)
    if q_lo > q_hi + 1e-9:
        raise InfeasibleMarket(
            f"no feasible traded quantity at clearing price {lam_star:.4f}")
    q_star = q_hi  # trade the most both sides allow at the clearing price

    # Allocation: inframarginal participants first, marginal ones by id.
    p_g: dict[int, float] = {}
    marginal_g = []
    supply_fixed = 0.0
    for g in offers.gencos:
        lo, hi = g.marginal(g.p_min), g.marginal(g.p_max)
        if g.gamma > 0.0:
            p = _clip((lam_star - g.beta - g.offer_price) / (2.0 * g.gamma),
                      g.p_min, g.p_max)
            p_g[g.id] = p
            supply_fixed += p
        elif lam_star > lo:
            p_g[g.id] = g.p_max
            supply_fixed += g.p_max
        elif lam_star < lo:
            p_g[g.id] = g.p_min
            supply_fixed += g.p_min
        else:
            p_g[g.id] = g.p_min
            supply_fixed += g.p_min
            marginal_g.append(("g", g.id, g.p_max - g.p_min))
    p_w: dict[int, float] = {}
    for w in offers.winds:
        if lam_star > w.price:
            p_w[w.id] = w.p_max
            supply_fixed += w.p_max
        elif lam_star < w.price:
            p_w[w.id] = w.p_min
            supply_fixed += w.p_min
        else:
            p_w[w.id] = w.p_min
            supply_fixed += w.p_min
            marginal_g.append(("w", w.id, w.p_max - w.p_min))
    residual = q_star - supply_fixed
    for kind, pid, room in sorted(marginal_g, key=lambda m: (m[0], m[1])):
        take = _clip(residual, 0.0, room)
        if kind == "g":
            p_g[pid] += take
        else:
            p_w[pid] += take
        residual -= take

    p_d: dict[int, float] = {}
    demand_fixed = 0.0
    marginal_d = []
    for d in offers.demands:
        if lam_star < d.price:
            p_d[d.id] = d.q_max
            demand_fixed += d.q_max
        elif lam_star > d.price:
            p_d[d.id] = 0.0
        else:
            p_d[d.id] = 0.0
            marginal_d.append((d.id, d.q_max))
    residual = q_star - demand_fixed
    for pid, room in sorted(marginal_d):
        take = _clip(residual, 0.0, room)
        p_d[pid] += take
        residual -= take

    result = ClearingResult(p_d=p_d, p_g=p_g, p_w=p_w, lambda_da=float(lam_star),
                            welfare=0.0, hour=offers.hour)
    return ClearingResult(p_d=p_d, p_g=p_g, p_w=p_w, lambda_da=float(lam_star),
                          welfare=social_welfare(result, offers), hour=offers.hour)


def social_welfare(result: ClearingResult, offers: OfferSet,
                   commitment_threshold: float = 1e-6) -> float:
    """Bid value of served demand minus offer revenue and production cost.

    Fixed cost alpha counts only for units producing above the commitment
    threshold.
    """
    total = 0.0
    for d in offers.demands:
        q = result.p_d.get(d.id, 0.0)
        if math.isfinite(d.price):
            total += d.price * q
    for g in offers.gencos:
        p = result.p_g.get(g.id, 0.0)
        total -= g.offer_price * p
        if p > commitment_threshold:
            total -= genco_cost(p, g.alpha, g.beta, g.gamma)
        else:
            total -= genco_cost(p, 0.0, g.beta, g.gamma)
    for w in offers.winds:
        total -= w.price * result.p_w.get(w.id, 0.0)
    return total
