"""
This file is dedicated to the domain types of exchange markets with social
influence: traders, influence utilities, allocation profiles, prices, and the
influence and economy graphs built from them.
"""

# Standard library
import logging
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from typing import Dict, List, Optional, Tuple, Union

# Third-party
import networkx as nx

LOG = logging.getLogger(__name__)

# Accepted per-good total supply, inclusive on both ends.
SUPPLY_BAND = (Fraction(1, 2), Fraction(2))
# Supply demanded of every good in strict mode.
STRICT_SUPPLY = Fraction(1)

Bundle = Tuple[Fraction, ...]
AllocationProfile = Dict[str, Bundle]


class MarketError(Exception):
    """Base class of every error raised by the toolkit."""


class MissingAllocationError(MarketError):
    """A profile lacks the allocation of a trader that is referenced."""


def as_fraction(value):
    """Coerce an int, Fraction or "p/q" string into a Fraction.

    Floats are refused so that no rounding can sneak into exact arithmetic.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool) or isinstance(value, float):
        raise MarketError(f"float literal {value!r}; write a rational")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, str):
        text = value.strip()
        if "." in text or "e" in text.lower():
            raise MarketError(f"float literal {value!r}; write a rational")
        try:
            return Fraction(text)
        except ValueError:
            raise MarketError(f"not a rational: {value!r}") from None
    raise MarketError(f"not a rational: {value!r}")


def as_bundle(values):
    return tuple(as_fraction(v) for v in values)


@dataclass(frozen=True)
class Term:
    trader: str
    good: int
    weight: Fraction


@dataclass(frozen=True)
class LinearForm:
    """Nonnegative combination of other traders' allocation variables."""

    terms: Tuple[Term, ...] = ()

    def evaluate(self, profile):
        """Evaluates the form on a profile.

        Args:
            profile:
                Mapping of trader id to bundle. It must hold every trader
                the form references.

        Returns:
            Fraction: the exact value of the form.
        """
        total = Fraction(0)
        for term in self.terms:
            if term.trader not in profile:
                raise MissingAllocationError(
                    f"profile has no allocation for {term.trader}"
                )
            total += term.weight * profile[term.trader][term.good]
        return total

    def traders(self, positive_only=True):
        return sorted(
            {
                term.trader
                for term in self.terms
                if term.weight > 0 or not positive_only
            }
        )


@dataclass(frozen=True)
class LinearInfluenceUtility:
    """Utility sum_i (c_i + f_i) * x_i of a linear-influence trader."""

    slopes: Tuple[Fraction, ...]
    forms: Tuple[LinearForm, ...]

    kind = "linear"

    @property
    def good_count(self):
        return len(self.slopes)


@dataclass(frozen=True)
class ThresholdInfluenceUtility:
    """Utility sum_i c_i * x_i + min(0, f_i - d_i * x_i).

    Per good, the threshold f_i / d_i is derived on demand and never stored.
    """

    slopes: Tuple[Fraction, ...]
    drops: Tuple[Fraction, ...]
    forms: Tuple[LinearForm, ...]

    kind = "threshold"

    @property
    def good_count(self):
        return len(self.slopes)


Utility = Union[LinearInfluenceUtility, ThresholdInfluenceUtility]


@dataclass(frozen=True)
class Trader:
    id: str
    endowment: Bundle
    utility: Utility

    def neighbors(self):
        """Ids of the traders whose allocations the utility depends on."""
        found = set()
        for form in self.utility.forms:
            found.update(form.traders())
        found.discard(self.id)
        return sorted(found)


@dataclass(frozen=True)
class Market:
    good_count: int
    traders: Tuple[Trader, ...]

    @cached_property
    def by_id(self) -> Dict[str, Trader]:
        return {trader.id: trader for trader in self.traders}

    @property
    def ids(self) -> List[str]:
        return [trader.id for trader in self.traders]

    def trader(self, trader_id):
        try:
            return self.by_id[trader_id]
        except KeyError:
            raise MarketError(f"unknown trader {trader_id}") from None

    def __len__(self):
        return len(self.traders)


@dataclass(frozen=True)
class PriceVector:
    values: Tuple[Fraction, ...]

    @property
    def normalized(self):
        return sum(self.values, Fraction(0)) == 1

    def normalize(self):
        total = sum(self.values, Fraction(0))
        if total <= 0:
            raise MarketError("cannot normalize a price vector with sum 0")
        return PriceVector(tuple(v / total for v in self.values))

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, index):
        return self.values[index]


@dataclass(frozen=True)
class Segment:
    """A linear piece of a per-good utility; cap None means unbounded."""

    slope: Fraction
    cap: Optional[Fraction] = None


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    trader: Optional[str] = None
    good: Optional[int] = None


@dataclass(frozen=True)
class ExistenceReport:
    economy_strongly_connected: bool
    per_good_nonsatiated: bool

    @property
    def holds(self):
        return self.economy_strongly_connected and self.per_good_nonsatiated


def good_label(good):
    """Human-readable name of a 0-based good index."""
    return f"G{good + 1}"


def market_supply(market):
    """Returns the per-good total endowment of the market."""
    supply = [Fraction(0)] * market.good_count
    for trader in market.traders:
        for good, amount in enumerate(trader.endowment):
            supply[good] += amount
    return tuple(supply)


def aggregate_demand(profile, good_count):
    demand = [Fraction(0)] * good_count
    for bundle in profile.values():
        for good, amount in enumerate(bundle):
            demand[good] += amount
    return tuple(demand)


def with_bundle(profile, trader_id, bundle):
    """Copy of the profile with one trader's bundle replaced."""
    updated = dict(profile)
    updated[trader_id] = tuple(bundle)
    return updated


def zero_bundle(good_count):
    return (Fraction(0),) * good_count


def linear_utility(slopes, forms=None):
    """Convenience constructor used by builders and tests.

    Args:
        slopes:
            Per-good base slopes.
        forms:
            Optional mapping of good index to a list of
            (trader, good, weight) triples.

    Returns:
        LinearInfluenceUtility
    """
    slopes = as_bundle(slopes)
    return LinearInfluenceUtility(slopes, _forms(len(slopes), forms))


def threshold_utility(slopes, drops, forms=None):
    slopes = as_bundle(slopes)
    return ThresholdInfluenceUtility(
        slopes, as_bundle(drops), _forms(len(slopes), forms)
    )


def _forms(good_count, forms):
    forms = forms or {}
    built = []
    for good in range(good_count):
        terms = tuple(
            Term(trader, int(index), as_fraction(weight))
            for trader, index, weight in forms.get(good, ())
        )
        built.append(LinearForm(terms))
    return tuple(built)


def validate_market(market, strict_supply=False):
    """Lists every violated market invariant.

    Args:
        market:
            The market to inspect.
        strict_supply:
            Require every good's supply to be exactly 1 instead of lying in
            SUPPLY_BAND.

    Returns:
        list: Diagnostic records, empty iff the market is well-formed. This
        function never raises for a malformed market.
    """
    report = []
    h = market.good_count
    if h < 1:
        report.append(Diagnostic("goods", "good count must be positive"))
        return report
    seen = set()
    for trader in market.traders:
        if trader.id in seen:
            report.append(
                Diagnostic(
                    "duplicate-trader",
                    f"duplicate trader id {trader.id}",
                    trader.id,
                )
            )
        seen.add(trader.id)
    for trader in market.traders:
        report.extend(_trader_diagnostics(market, trader))
    if report:
        # supply is meaningless until the shapes are right
        if any(d.code == "arity" for d in report):
            return report
    low, high = SUPPLY_BAND
    for good, total in enumerate(market_supply(market)):
        if strict_supply and total != STRICT_SUPPLY:
            report.append(
                Diagnostic(
                    "supply",
                    f"supply of {good_label(good)} is {total}, "
                    f"strict mode requires {STRICT_SUPPLY}",
                    good=good,
                )
            )
        elif not strict_supply and not low <= total <= high:
            report.append(
                Diagnostic(
                    "supply",
                    f"supply out of band [{low},{high}]: "
                    f"{good_label(good)} has {total}",
                    good=good,
                )
            )
    return report


def _trader_diagnostics(market, trader):
    h = market.good_count
    utility = trader.utility
    found = []

    def flag(code, message, good=None):
        found.append(Diagnostic(code, message, trader.id, good))

    if len(trader.endowment) != h:
        flag("arity", f"endowment of {trader.id} has the wrong length")
    if utility.good_count != h or len(utility.forms) != h:
        flag("arity", f"utility of {trader.id} has the wrong length")
    is_threshold = isinstance(utility, ThresholdInfluenceUtility)
    if is_threshold and len(utility.drops) != h:
        flag("arity", f"drops of {trader.id} have the wrong length")
    if found:
        return found
    for good, amount in enumerate(trader.endowment):
        if amount < 0:
            flag("endowment", "negative endowment", good)
    for good, slope in enumerate(utility.slopes):
        if not 0 <= slope <= 1:
            flag("slope", f"slope out of range: {slope}", good)
        if is_threshold:
            drop = utility.drops[good]
            if drop < 0:
                flag("drop", f"negative drop: {drop}", good)
            elif drop > slope:
                flag("drop", f"drop {drop} exceeds slope {slope}", good)
    for good, form in enumerate(utility.forms):
        keys = set()
        for term in form.terms:
            key = (term.trader, term.good)
            if not 0 <= term.weight <= 1:
                flag("weight", f"weight out of range: {term.weight}", good)
            if key in keys:
                flag("duplicate-term", f"duplicate term on {key}", good)
            keys.add(key)
            if term.trader == trader.id:
                flag("self-reference", "form references own variable", good)
            elif term.trader not in market.by_id:
                flag(
                    "dangling",
                    f"dangling trader reference {term.trader}",
                    good,
                )
            if not 0 <= term.good < h:
                flag("good-index", f"good index {term.good} out of range")
    return found


def _require(profile, trader_id):
    if trader_id not in profile:
        raise MissingAllocationError(
            f"profile has no allocation for {trader_id}"
        )
    return profile[trader_id]


def eval_utility(market, trader_id, profile):
    """Exact value of a trader's utility at a profile.

    Args:
        market:
            The market holding the trader.
        trader_id:
            Id of the trader to evaluate.
        profile:
            Mapping of trader id to bundle covering the trader and every
            neighbor its linear forms reference.

    Returns:
        Fraction: u_k(x_k, x_-k).
    """
    trader = market.trader(trader_id)
    own = _require(profile, trader_id)
    utility = trader.utility
    value = Fraction(0)
    for good, slope in enumerate(utility.slopes):
        influence = utility.forms[good].evaluate(profile)
        amount = own[good]
        if isinstance(utility, LinearInfluenceUtility):
            value += (slope + influence) * amount
        else:
            drop = utility.drops[good]
            value += slope * amount + min(
                Fraction(0), influence - drop * amount
            )
    return value


def effective_segments(market, trader_id, profile_others):
    """Per-good concave pieces of a trader's utility for fixed neighbors.

    Returns:
        tuple: one tuple of Segment per good, slopes nonincreasing.
    """
    utility = market.trader(trader_id).utility
    segments = []
    for good, slope in enumerate(utility.slopes):
        influence = utility.forms[good].evaluate(profile_others)
        if isinstance(utility, LinearInfluenceUtility):
            segments.append((Segment(slope + influence),))
            continue
        drop = utility.drops[good]
        if drop == 0:
            segments.append((Segment(slope),))
        else:
            segments.append(
                (Segment(slope, influence / drop), Segment(slope - drop))
            )
    return tuple(segments)


def segment_contribution(segments, amount):
    """Integrates segment slopes from 0 to amount."""
    value = Fraction(0)
    remaining = amount
    for segment in segments:
        if remaining <= 0:
            break
        width = remaining
        if segment.cap is not None:
            width = min(segment.cap, remaining)
        value += segment.slope * width
        remaining -= width
    return value


def build_influence_graph(market):
    """Directed graph with an edge j -> k iff u_k depends on T_j.

    Only strictly positive weights create edges. Predecessors of a node are
    its influencing neighbors N(T_k).
    """
    graph = nx.DiGraph()
    graph.add_nodes_from(sorted(market.ids))
    edges = set()
    for trader in market.traders:
        for source in trader.neighbors():
            if source in market.by_id:
                edges.add((source, trader.id))
    graph.add_edges_from(sorted(edges))
    return graph


def is_nonsatiated(utility, good):
    if isinstance(utility, LinearInfluenceUtility):
        return utility.slopes[good] > 0
    return utility.slopes[good] - utility.drops[good] > 0


def build_economy_graph(market):
    """Edge j -> k iff T_j owns some good toward which u_k is nonsatiated."""
    graph = nx.DiGraph()
    graph.add_nodes_from(sorted(market.ids))
    edges = []
    for source in market.traders:
        owned = [g for g, w in enumerate(source.endowment) if w > 0]
        for target in market.traders:
            if source.id == target.id:
                continue
            if any(is_nonsatiated(target.utility, g) for g in owned):
                edges.append((source.id, target.id))
    graph.add_edges_from(sorted(edges))
    return graph


def check_existence_conditions(market):
    """Evaluates the two sufficient conditions for an equilibrium to exist.

    An empty market is reported as not strongly connected.
    """
    graph = build_economy_graph(market)
    connected = graph.number_of_nodes() > 0 and nx.is_strongly_connected(
        graph
    )
    nonsatiated = all(
        any(is_nonsatiated(t.utility, good) for t in market.traders)
        for good in range(market.good_count)
    )
    LOG.debug(
        "existence conditions: strongly connected %s, nonsatiated %s",
        connected,
        nonsatiated,
    )
    return ExistenceReport(connected, nonsatiated)


def max_in_degree(graph):
    return max((d for _, d in graph.in_degree()), default=0)
