"""
This file is dedicated to judging market equilibria: optimal bundles under
bang-per-buck greed, exact and approximate equilibrium verification, and the
fixed-point map over boxed allocations and floored prices whose fixed points
are equilibria.
"""

# Standard library
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Tuple

# Third-party
import pandas as pd

# First-party/Local
from influence_markets.market_core import (
    AllocationProfile,
    Bundle,
    MarketError,
    PriceVector,
    aggregate_demand,
    effective_segments,
    eval_utility,
    good_label,
    market_supply,
    segment_contribution,
)

LOG = logging.getLogger(__name__)

# Upper bound of every allocation coordinate inside the fixed-point domain.
PHI_BOX = Fraction(11, 10)

CONDITION_NAMES = {
    1: "prices normalized",
    2: "budget feasibility",
    3: "optimality",
    4: "market clearing",
}


class MalformedCandidateError(MarketError):
    """A candidate or point does not meet the preconditions of a check."""


@dataclass(frozen=True)
class EquilibriumCandidate:
    prices: PriceVector
    profile: AllocationProfile


@dataclass(frozen=True)
class OptimalBundle:
    value: Optional[Fraction]
    bundle: Optional[Bundle]
    unbounded: bool = False


@dataclass(frozen=True)
class TraderGaps:
    """How far one trader is from budget feasibility and optimality.

    optimality_gap is None when the trader's optimum is unbounded.
    """

    budget_excess: Fraction
    optimality_gap: Optional[Fraction]

    def acceptable(self, eps):
        return (
            self.budget_excess <= eps
            and self.optimality_gap is not None
            and self.optimality_gap <= eps
        )


@dataclass(frozen=True)
class ConditionResult:
    index: int
    name: str
    passed: bool
    violation: Optional[Fraction] = None
    trader: Optional[str] = None
    good: Optional[int] = None
    reason: Optional[str] = None

    def describe(self):
        status = "PASS" if self.passed else "FAIL"
        line = f"{status} condition {self.index} ({self.name})"
        details = []
        if self.violation is not None and self.violation > 0:
            details.append(f"violation {self.violation}")
        if self.trader is not None:
            details.append(f"trader {self.trader}")
        if self.good is not None:
            details.append(f"good {good_label(self.good)}")
        if self.reason:
            details.append(self.reason)
        if details:
            line += ": " + ", ".join(details)
        return line


@dataclass(frozen=True)
class VerificationReport:
    eps: Fraction
    conditions: Tuple[ConditionResult, ...]

    @property
    def verdict(self):
        return all(condition.passed for condition in self.conditions)

    def condition(self, index):
        return self.conditions[index - 1]


@dataclass(frozen=True)
class PhiConstants:
    L: int
    c: Fraction


@dataclass(frozen=True)
class PhiPoint:
    profile: AllocationProfile
    prices: Tuple[Fraction, ...]


@dataclass
class PhiTrace:
    points: List[PhiPoint] = field(default_factory=list)
    residuals: List[Fraction] = field(default_factory=list)

    @property
    def best_index(self):
        best = min(self.residuals)
        return self.residuals.index(best)

    @property
    def best_point(self):
        return self.points[self.best_index]

    @property
    def best_residual(self):
        return self.residuals[self.best_index]

    def to_frame(self):
        return pd.DataFrame(
            {
                "step": range(len(self.residuals)),
                "residual": [str(r) for r in self.residuals],
                "residual_approx": [float(r) for r in self.residuals],
            }
        )


def _dot(left, right):
    return sum((a * b for a, b in zip(left, right)), Fraction(0))


def optimal_bundle(market, trader_id, prices, profile_others, box_cap=None):
    """Greedy bang-per-buck optimum of one trader.

    Segments are filled by slope/price in descending order, free goods with
    positive slope first; ties go to the lower good index, then to the
    earlier segment. Zero-slope segments are never bought.

    Args:
        market:
            The market holding the trader.
        trader_id:
            Id of the trader.
        prices:
            Nonnegative prices, one per good.
        profile_others:
            Allocations of every influencing neighbor.
        box_cap:
            Per-good upper bound on the bundle, None for no bound.

    Returns:
        OptimalBundle: value and bundle, or unbounded=True when a free good
        has a positive-slope unbounded segment and there is no box.
    """
    prices = tuple(prices)
    if any(price < 0 for price in prices):
        raise MarketError(f"negative price in {prices}")
    trader = market.trader(trader_id)
    budget = _dot(trader.endowment, prices)
    segments = effective_segments(market, trader_id, profile_others)
    bundle = [Fraction(0)] * market.good_count

    def room(good, segment):
        space = segment.cap
        if box_cap is not None:
            left = box_cap - bundle[good]
            space = left if space is None else min(space, left)
        return space

    for good, price in enumerate(prices):
        if price != 0:
            continue
        for segment in segments[good]:
            if segment.slope <= 0:
                continue
            space = room(good, segment)
            if space is None:
                return OptimalBundle(None, None, unbounded=True)
            if space > 0:
                bundle[good] += space

    ranked = sorted(
        (
            (-segment.slope / prices[good], good, index, segment)
            for good in range(market.good_count)
            if prices[good] > 0
            for index, segment in enumerate(segments[good])
            if segment.slope > 0
        ),
        key=lambda item: item[:3],
    )
    for _, good, _, segment in ranked:
        if budget <= 0:
            break
        amount = budget / prices[good]
        space = room(good, segment)
        if space is not None:
            amount = min(amount, space)
        if amount <= 0:
            continue
        bundle[good] += amount
        budget -= amount * prices[good]
    # each good fills its segments in order, so integrating them is exact
    value = sum(
        (
            segment_contribution(pieces, amount)
            for pieces, amount in zip(segments, bundle)
        ),
        Fraction(0),
    )
    return OptimalBundle(value, tuple(bundle))


def trader_gaps(market, trader_id, prices, profile):
    """Budget excess and optimality gap of one trader at a profile."""
    trader = market.trader(trader_id)
    own = profile[trader_id]
    excess = _dot(own, prices) - _dot(trader.endowment, prices)
    best = optimal_bundle(market, trader_id, prices, profile)
    if best.unbounded:
        return TraderGaps(excess, None)
    return TraderGaps(
        excess, best.value - eval_utility(market, trader_id, profile)
    )


def locally_acceptable(market, trader_id, prices, profile, eps):
    return trader_gaps(market, trader_id, prices, profile).acceptable(eps)


def _check_candidate_shape(market, cand):
    if len(cand.prices) != market.good_count:
        raise MalformedCandidateError("price vector has the wrong length")
    if any(price < 0 for price in cand.prices):
        raise MalformedCandidateError("negative price")
    if not cand.prices.normalized:
        raise MalformedCandidateError(
            "prices must be normalized to sum 1 before verification"
        )
    for trader_id in market.ids:
        bundle = cand.profile.get(trader_id)
        if bundle is None:
            raise MalformedCandidateError(f"no allocation for {trader_id}")
        if len(bundle) != market.good_count:
            raise MalformedCandidateError(
                f"allocation of {trader_id} has the wrong length"
            )
        if any(amount < 0 for amount in bundle):
            raise MalformedCandidateError(
                f"negative allocation for {trader_id}"
            )


def verify_candidate(market, cand, eps):
    """Checks the four conditions of an eps-approximate equilibrium.

    Condition 3 compares against the optimum under the exact budget; the eps
    slack of condition 2 applies only to the trader's own bundle. An
    unbounded optimum fails condition 3 instead of raising.

    Args:
        market:
            The market.
        cand:
            EquilibriumCandidate with normalized prices.
        eps:
            Nonnegative rational tolerance.

    Returns:
        VerificationReport
    """
    _check_candidate_shape(market, cand)
    prices = tuple(cand.prices)
    profile = cand.profile

    budget_worst = (Fraction(0), None)
    optimality_worst = (Fraction(0), None)
    unbounded = None
    for trader_id in market.ids:
        gaps = trader_gaps(market, trader_id, prices, profile)
        if gaps.budget_excess > budget_worst[0]:
            budget_worst = (gaps.budget_excess, trader_id)
        if gaps.optimality_gap is None:
            if unbounded is None:
                unbounded = trader_id
        elif gaps.optimality_gap > optimality_worst[0]:
            optimality_worst = (gaps.optimality_gap, trader_id)

    supply = market_supply(market)
    demand = aggregate_demand(
        {k: profile[k] for k in market.ids}, market.good_count
    )
    clearing_worst = (Fraction(0), None)
    for good in range(market.good_count):
        gap = abs(supply[good] - demand[good])
        if gap > clearing_worst[0]:
            clearing_worst = (gap, good)

    if unbounded is not None:
        optimality = ConditionResult(
            3,
            CONDITION_NAMES[3],
            False,
            trader=unbounded,
            reason="unbounded optimum",
        )
    else:
        optimality = ConditionResult(
            3,
            CONDITION_NAMES[3],
            optimality_worst[0] <= eps,
            optimality_worst[0],
            trader=optimality_worst[1],
        )
    conditions = (
        ConditionResult(1, CONDITION_NAMES[1], True, Fraction(0)),
        ConditionResult(
            2,
            CONDITION_NAMES[2],
            budget_worst[0] <= eps,
            budget_worst[0],
            trader=budget_worst[1],
        ),
        optimality,
        ConditionResult(
            4,
            CONDITION_NAMES[4],
            clearing_worst[0] <= eps,
            clearing_worst[0],
            good=clearing_worst[1],
        ),
    )
    report = VerificationReport(Fraction(eps), conditions)
    LOG.debug("verification at eps %s: %s", eps, report.verdict)
    return report


def _ceil_log2(value):
    """Smallest L >= 0 with 2**L >= value."""
    exponent = 0
    while Fraction(2**exponent) < value:
        exponent += 1
    return exponent


def phi_constants(market):
    """Derives L and the price floor c of the fixed-point domain.

    An empty market uses m = 1 so that c stays defined.
    """
    m = max(len(market.traders), 1)
    h = market.good_count
    bounds = [Fraction(4 * m * h * h)]
    for trader in market.traders:
        utility = trader.utility
        drops = getattr(utility, "drops", None)
        for good, slope in enumerate(utility.slopes):
            gap = slope - (drops[good] if drops is not None else 0)
            if gap > 0:
                bounds.append(1 / gap)
        bounds.extend(1 / w for w in trader.endowment if w > 0)
    exponent = max(1, max(_ceil_log2(bound) for bound in bounds))
    return PhiConstants(exponent, Fraction(1, m * 2 ** (3 * m * exponent)))


def in_phi_domain(market, point, consts):
    if len(point.prices) != market.good_count:
        return False
    if sum(point.prices, Fraction(0)) != 1:
        return False
    if any(price < consts.c for price in point.prices):
        return False
    for trader_id in market.ids:
        bundle = point.profile.get(trader_id)
        if bundle is None or len(bundle) != market.good_count:
            return False
        if any(not 0 <= amount <= PHI_BOX for amount in bundle):
            return False
    return True


def uniform_point(market):
    """Start point with uniform prices and equal shares of the supply."""
    h = market.good_count
    m = max(len(market.traders), 1)
    share = tuple(min(s / m, PHI_BOX) for s in market_supply(market))
    prices = tuple(Fraction(1, h) for _ in range(h))
    return PhiPoint({k: share for k in market.ids}, prices)


def phi_step(market, point, consts):
    """Canonical selection from the fixed-point correspondence.

    Prices take the floor c everywhere and the remaining mass on the
    lowest-index good of maximal aggregate demand (uniform when all demands
    tie). Allocations are boxed optimal bundles under the old prices.
    """
    if not in_phi_domain(market, point, consts):
        raise MalformedCandidateError("point outside the fixed-point domain")
    h = market.good_count
    demand = aggregate_demand(point.profile, h)
    if all(d == demand[0] for d in demand):
        prices = tuple(Fraction(1, h) for _ in range(h))
    else:
        top = demand.index(max(demand))
        prices = [consts.c] * h
        prices[top] += 1 - h * consts.c
        prices = tuple(prices)
    profile = {
        trader_id: optimal_bundle(
            market, trader_id, point.prices, point.profile, box_cap=PHI_BOX
        ).bundle
        for trader_id in market.ids
    }
    return PhiPoint(profile, prices)


def _distance(left, right):
    gaps = [abs(a - b) for a, b in zip(left.prices, right.prices)]
    for trader_id, bundle in left.profile.items():
        other = right.profile[trader_id]
        gaps.extend(abs(a - b) for a, b in zip(bundle, other))
    return max(gaps, default=Fraction(0))


def fixed_point_residual(market, point, consts):
    """L-infinity distance between a point and its canonical image."""
    return _distance(point, phi_step(market, point, consts))


def _damp(market, old, new, damping, consts):
    def mix(a, b):
        return (1 - damping) * a + damping * b

    profile = {
        trader_id: tuple(
            min(max(mix(a, b), Fraction(0)), PHI_BOX)
            for a, b in zip(old.profile[trader_id], new.profile[trader_id])
        )
        for trader_id in market.ids
    }
    prices = tuple(
        max(mix(a, b), consts.c) for a, b in zip(old.prices, new.prices)
    )
    return PhiPoint(profile, prices)


def phi_iterate(market, start, consts, max_steps, damping):
    """Damped iteration of the canonical fixed-point map.

    Stops early on a zero residual. There is no convergence guarantee.

    Returns:
        PhiTrace: visited points, the residual of each, and the best point.
    """
    damping = Fraction(damping)
    if not 0 < damping <= 1:
        raise MarketError(f"damping must lie in (0, 1], got {damping}")
    trace = PhiTrace([start], [])
    for step in range(max_steps + 1):
        current = trace.points[-1]
        image = phi_step(market, current, consts)
        residual = _distance(current, image)
        trace.residuals.append(residual)
        LOG.debug("phi step %d residual %s", step, residual)
        if residual == 0 or step == max_steps:
            break
        trace.points.append(_damp(market, current, image, damping, consts))
    LOG.info(
        "phi iteration: %d points, best residual %s",
        len(trace.points),
        trace.best_residual,
    )
    return trace


def normalize_point(point):
    """Turns a point of the fixed-point domain into a candidate."""
    return EquilibriumCandidate(
        PriceVector(tuple(point.prices)), dict(point.profile)
    )
