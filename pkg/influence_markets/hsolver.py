"""
This file is dedicated to searching approximate equilibria on a grid: price
and allocation discretization, hierarchical labelings of influence graphs,
the top-down divide-and-conquer tree search, and the exhaustive oracle that
cross-checks it.
"""

# Standard library
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from itertools import product
from multiprocessing import Pool
from typing import Dict, Mapping, Optional, Tuple

# Third-party
import networkx as nx
import pandas as pd
import sympy

# First-party/Local
from influence_markets.equilibrium import (
    EquilibriumCandidate,
    MalformedCandidateError,
    locally_acceptable,
    verify_candidate,
)
from influence_markets.market_core import (
    MarketError,
    MissingAllocationError,
    PriceVector,
    build_influence_graph,
    market_supply,
)

LOG = logging.getLogger(__name__)

# Per-good cap on allocations and on aggregate consumption.
ALLOCATION_CAP = Fraction(2)
# Enumerated (unnormalized) prices sum to a value inside this band.
PRICE_SUM_BAND = (Fraction(1), Fraction(2))
# Largest enumeration the exhaustive oracle accepts.
STATE_LIMIT = 10**7


class GridError(MarketError):
    """Invalid grid, or an enumeration larger than the configured guard."""


class LabelingError(MarketError):
    """A labeling does not describe the influence graph as a tree."""


class TreeStructureError(LabelingError):
    """A trader is influenced from outside its subtree and parent."""


@dataclass(frozen=True)
class GridSpec:
    """Discretization with step 1/N.

    The exponents a and b are informational; they record which N the
    grid was derived from with theoretical_grid_size.
    """

    N: int
    allocation_cap: Fraction = ALLOCATION_CAP
    price_sum_band: Tuple[Fraction, Fraction] = PRICE_SUM_BAND
    a: Optional[Fraction] = None
    b: Optional[Fraction] = None

    def __post_init__(self):
        if not isinstance(self.N, int) or self.N < 1:
            raise GridError(f"grid denominator must be >= 1, got {self.N}")
        for bound in (self.allocation_cap, *self.price_sum_band):
            if (Fraction(bound) * self.N).denominator != 1:
                raise GridError(f"bound {bound} is not on the 1/N grid")

    @property
    def cap_units(self):
        return int(self.allocation_cap * self.N)

    def to_units(self, values):
        units = []
        for value in values:
            scaled = Fraction(value) * self.N
            if scaled.denominator != 1:
                raise GridError(f"{value} is not a multiple of 1/{self.N}")
            units.append(int(scaled))
        return tuple(units)

    def from_units(self, units):
        return tuple(Fraction(u, self.N) for u in units)


@dataclass(frozen=True)
class PriceGrid:
    """Lexicographic stream of discrete price vectors inside the band."""

    good_count: int
    grid: GridSpec

    @property
    def _bounds(self):
        low, high = self.grid.price_sum_band
        return int(low * self.grid.N), int(high * self.grid.N)

    def units(self):
        low, high = self._bounds
        for vector in product(range(high + 1), repeat=self.good_count):
            if low <= sum(vector) <= high:
                yield vector

    def __iter__(self):
        for vector in self.units():
            yield self.grid.from_units(vector)

    @cached_property
    def count(self):
        low, high = self._bounds
        ways = Counter({0: 1})
        for _ in range(self.good_count):
            spread = Counter()
            for total, n in ways.items():
                for value in range(high - total + 1):
                    spread[total + value] += n
            ways = spread
        return sum(n for total, n in ways.items() if total >= low)

    def __len__(self):
        return self.count


@dataclass(frozen=True, eq=False)
class HierarchicalLabeling:
    """Rooted tree whose nodes label the traders of a market."""

    tree: nx.Graph
    root: str
    labels: Mapping[str, str]
    k: int

    def __post_init__(self):
        if self.root not in self.tree:
            raise LabelingError(f"root {self.root} is not a tree node")
        if not nx.is_tree(self.tree):
            raise LabelingError("labeling graph is not a tree")
        if self.k < 1:
            raise LabelingError(f"width must be positive, got {self.k}")

    @cached_property
    def _parents(self):
        parents = {self.root: None}
        parents.update(dict(nx.bfs_predecessors(self.tree, self.root)))
        return parents

    @cached_property
    def _groups(self):
        groups = {node: [] for node in self.tree.nodes}
        for trader_id, node in sorted(self.labels.items()):
            groups.setdefault(node, []).append(trader_id)
        return groups

    @cached_property
    def _depths(self):
        return nx.shortest_path_length(self.tree, self.root)

    def parent(self, node):
        return self._parents[node]

    def children(self, node):
        parent = self._parents[node]
        return sorted(n for n in self.tree.neighbors(node) if n != parent)

    def is_leaf(self, node):
        return not self.children(node)

    def group(self, node):
        return list(self._groups.get(node, ()))

    def depth(self, node):
        return self._depths[node]

    def nodes(self):
        return [self.root] + [v for _, v in nx.bfs_edges(self.tree, self.root)]


@dataclass(frozen=True)
class HierarchyCheck:
    valid: bool
    violation: Optional[str] = None


@dataclass(frozen=True)
class LeafState:
    """One reachable outcome of a leaf group.

    contributions lists, per linear form of an observer outside the group,
    the group's share of that form rounded up to 1/N; exact_contributions
    holds the same shares unrounded. States are distinct on the exact
    shares, so two states may report the same rounded summary.
    """

    total: Tuple[Fraction, ...]
    contributions: Tuple[Fraction, ...]
    witness: Dict[str, Tuple[Fraction, ...]]
    exact_contributions: Tuple[Fraction, ...] = ()


@dataclass
class SearchStats:
    expansions: Counter = field(default_factory=Counter)
    memo_hits: int = 0
    prices_tried: int = 0

    def record(self, depth):
        self.expansions[depth] += 1

    def merge(self, other):
        self.expansions.update(other.expansions)
        self.memo_hits += other.memo_hits
        self.prices_tried += other.prices_tried

    def growth_factors(self):
        depths = sorted(self.expansions)
        return [
            Fraction(self.expansions[d + 1], self.expansions[d])
            for d in depths
            if d + 1 in self.expansions
        ]

    def to_frame(self):
        depths = sorted(self.expansions)
        return pd.DataFrame(
            {
                "depth": depths,
                "expansions": [self.expansions[d] for d in depths],
            }
        )


def theoretical_grid_size(m, a, b):
    """Exact ceiling of m ** (2a + b + 3) for rational a and b."""
    exponent = 2 * Fraction(a) + Fraction(b) + 3
    if exponent <= 0:
        raise GridError(f"exponent must be positive, got {exponent}")
    if m <= 1:
        return 1
    root, exact = sympy.integer_nthroot(
        m**exponent.numerator, exponent.denominator
    )
    return int(root) if exact else int(root) + 1


def round_to_grid(cand, grid):
    """Rounds every price and allocation up to the next multiple of 1/N.

    Prices are not renormalized.
    """

    def up(value):
        return Fraction(math.ceil(value * grid.N), grid.N)

    prices = PriceVector(tuple(up(p) for p in cand.prices))
    profile = {
        trader_id: tuple(up(v) for v in bundle)
        for trader_id, bundle in cand.profile.items()
    }
    return EquilibriumCandidate(prices, profile)


def enumerate_price_grid(good_count, grid):
    if good_count < 1:
        raise GridError(f"need at least one good, got {good_count}")
    return PriceGrid(good_count, grid)


def supply_targets(market, grid, eps):
    """Discrete aggregate consumptions within eps of the supply."""
    return [
        grid.from_units(units)
        for units in _supply_target_units(market, grid, Fraction(eps))
    ]


def _supply_target_units(market, grid, eps):
    ranges = []
    for supply in market_supply(market):
        low = max(0, math.ceil((supply - eps) * grid.N))
        high = min(grid.cap_units, math.floor((supply + eps) * grid.N))
        ranges.append(range(low, high + 1))
    return list(product(*ranges))


def validate_hierarchical(graph, labeling):
    """Checks that a labeling certifies the hierarchical structure.

    Args:
        graph:
            Influence graph of the market.
        labeling:
            Candidate HierarchicalLabeling.

    Returns:
        HierarchyCheck: valid flag and the first violation found.
    """
    labels = labeling.labels
    for vertex in sorted(graph.nodes):
        if vertex not in labels:
            raise LabelingError(f"vertex {vertex} is unlabeled")
    for vertex in sorted(graph.nodes):
        if labels[vertex] not in labeling.tree:
            return HierarchyCheck(
                False,
                f"{vertex} is labeled with unknown node {labels[vertex]}",
            )
    for node in labeling.nodes():
        if labeling.is_leaf(node):
            continue
        size = len(labeling.group(node))
        if not 1 <= size <= labeling.k:
            return HierarchyCheck(
                False,
                f"non-leaf node {node} labels {size} traders, "
                f"expected 1 to {labeling.k}",
            )
    vertices = sorted(graph.nodes)
    for source in vertices:
        for target in vertices:
            if source == target:
                continue
            left, right = labels[source], labels[target]
            if left == right:
                expected = not labeling.is_leaf(left)
            else:
                expected = labeling.tree.has_edge(left, right)
            present = graph.has_edge(source, target)
            if expected and not present:
                return HierarchyCheck(
                    False, f"missing edge {source} -> {target}"
                )
            if present and not expected:
                return HierarchyCheck(
                    False, f"unexpected edge {source} -> {target}"
                )
    return HierarchyCheck(True)


def _add(left, right):
    return tuple(a + b for a, b in zip(left, right))


def _sub(left, right):
    return tuple(a - b for a, b in zip(left, right))


def _total(bundles, good_count):
    total = (0,) * good_count
    for bundle in bundles:
        total = _add(total, bundle)
    return total


def _splits(remainder, count):
    """Ways to hand a nonnegative integer vector out to count children."""
    if count == 0:
        if not any(remainder):
            yield ()
        return
    if count == 1:
        yield (remainder,)
        return
    for first in product(*(range(r + 1) for r in remainder)):
        for tail in _splits(_sub(remainder, first), count - 1):
            yield (first,) + tail


def _freeze(assignment):
    return tuple(sorted(assignment.items()))


class TreeSearch:
    """Grid search state for one normalized price vector.

    Bundles are integer vectors in units of 1/N. The memo is keyed by
    (node, own joint allocation, subtree total, frozen parent allocation).
    """

    def __init__(
        self,
        market,
        labeling,
        prices,
        eps,
        grid,
        memoize=True,
        stats=None,
    ):
        self.market = market
        self.labeling = labeling
        self.prices = tuple(prices)
        self.eps = Fraction(eps)
        self.grid = grid
        self.memoize = memoize
        self.stats = stats if stats is not None else SearchStats()
        self.memo = {}
        self._leaf_memo = {}
        self._bundles = {}
        self._neighbors = {}
        self._accepted = {}
        self._structured = set()

    def fractions(self, units):
        return self.grid.from_units(units)

    def neighbors(self, trader_id):
        if trader_id not in self._neighbors:
            self._neighbors[trader_id] = self.market.trader(
                trader_id
            ).neighbors()
        return self._neighbors[trader_id]

    def bundles(self, trader_id):
        """Discrete bundles within the trader's budget plus eps."""
        if trader_id not in self._bundles:
            trader = self.market.trader(trader_id)
            budget = self._value(trader.endowment) + self.eps
            self._bundles[trader_id] = [
                units
                for units in product(
                    range(self.grid.cap_units + 1),
                    repeat=self.market.good_count,
                )
                if self._value(self.fractions(units)) <= budget
            ]
        return self._bundles[trader_id]

    def _value(self, bundle):
        return sum(
            (a * p for a, p in zip(bundle, self.prices)), Fraction(0)
        )

    def acceptable(self, trader_id, assigned):
        needed = [trader_id] + self.neighbors(trader_id)
        missing = [other for other in needed if other not in assigned]
        if missing:
            raise MissingAllocationError(
                f"{trader_id} depends on unassigned {', '.join(missing)}"
            )
        key = (trader_id, tuple(assigned[other] for other in needed))
        if key not in self._accepted:
            profile = {
                other: self.fractions(assigned[other]) for other in needed
            }
            self._accepted[key] = locally_acceptable(
                self.market, trader_id, self.prices, profile, self.eps
            )
        return self._accepted[key]

    def joint_bundles(self, node):
        group = self.labeling.group(node)
        options = [self.bundles(trader_id) for trader_id in group]
        return [dict(zip(group, choice)) for choice in product(*options)]

    def _require_structure(self, node):
        if node in self._structured:
            return
        labeling = self.labeling
        group = labeling.group(node)
        allowed = set(group)
        parent = labeling.parent(node)
        if parent is not None:
            allowed.update(labeling.group(parent))
        for child in labeling.children(node):
            allowed.update(labeling.group(child))
        for trader_id in group:
            for other in self.neighbors(trader_id):
                if other not in allowed:
                    raise TreeStructureError(
                        f"{other} influences {trader_id} from outside node "
                        f"{node}, its children and its parent"
                    )
        if labeling.is_leaf(node):
            self._require_independent(group)
        self._structured.add(node)

    def _require_independent(self, group):
        members = set(group)
        for trader_id in group:
            for other in self.neighbors(trader_id):
                if other in members:
                    raise LabelingError(
                        f"leaf group holds the edge {other} -> {trader_id}"
                    )

    def _observers(self, group):
        members = set(group)
        found = []
        for trader in self.market.traders:
            if trader.id in members:
                continue
            for form in trader.utility.forms:
                terms = [
                    term
                    for term in form.terms
                    if term.trader in members and term.weight > 0
                ]
                if terms:
                    found.append(terms)
        return found

    def leaf_dp(self, group, parent_assignment):
        """Reachable (total, contribution) states of a leaf group.

        A state is the group total together with the exact share of every
        observer's linear form. The parent's optimality depends on the
        group only through these, so one witness per state loses nothing.

        Returns:
            list: (total units, exact contributions, witness) triples in
            first-reached order.
        """
        group = sorted(group)
        self._require_independent(group)
        observers = self._observers(group)
        h = self.market.good_count
        states = {((0,) * h, (Fraction(0),) * len(observers)): {}}
        for trader_id in group:
            options = [
                units
                for units in self.bundles(trader_id)
                if self.acceptable(
                    trader_id, {**parent_assignment, trader_id: units}
                )
            ]
            reached = {}
            for (total, exact), witness in states.items():
                for units in options:
                    combined = _add(total, units)
                    if max(combined, default=0) > self.grid.cap_units:
                        continue
                    share = self._share(observers, trader_id, units)
                    key = (combined, _add(exact, share))
                    if key not in reached:
                        reached[key] = {**witness, trader_id: units}
            states = reached
        return [
            (total, exact, witness)
            for (total, exact), witness in states.items()
        ]

    def _share(self, observers, trader_id, units):
        bundle = self.fractions(units)
        return tuple(
            sum(
                (
                    term.weight * bundle[term.good]
                    for term in terms
                    if term.trader == trader_id
                ),
                Fraction(0),
            )
            for terms in observers
        )

    def round_up(self, values):
        return tuple(math.ceil(value * self.grid.N) for value in values)

    def leaf_states(self, node, parent_assignment):
        key = (node, _freeze(parent_assignment))
        if self.memoize and key in self._leaf_memo:
            self.stats.memo_hits += 1
            return self._leaf_memo[key]
        self._require_structure(node)
        self.stats.record(self.labeling.depth(node))
        states = self.leaf_dp(self.labeling.group(node), parent_assignment)
        if self.memoize:
            self._leaf_memo[key] = states
        return states

    def check(self, node, x_joint, y, frozen):
        """Assignment of the subtree at node, or None.

        Args:
            node:
                Tree node whose subtree is searched.
            x_joint:
                Units bundle of every trader labeled by node.
            y:
                Units total the subtree must consume.
            frozen:
                Units bundles of the parent node's traders.

        Returns:
            dict: trader id to units bundle for the whole subtree, or None.
        """
        key = (node, _freeze(x_joint), y, _freeze(frozen))
        if self.memoize and key in self.memo:
            self.stats.memo_hits += 1
            return self.memo[key]
        self.stats.record(self.labeling.depth(node))
        found = self._expand(node, x_joint, y, frozen)
        if self.memoize:
            self.memo[key] = found
        return found

    def _expand(self, node, x_joint, y, frozen):
        self._require_structure(node)
        h = self.market.good_count
        rest = _sub(y, _total(x_joint.values(), h))
        if min(rest, default=0) < 0:
            return None
        children = self.labeling.children(node)
        if not children:
            if any(rest):
                return None
            assigned = {**frozen, **x_joint}
            if all(self.acceptable(v, assigned) for v in x_joint):
                return dict(x_joint)
            return None
        inner = [c for c in children if not self.labeling.is_leaf(c)]
        leaves = [c for c in children if self.labeling.is_leaf(c)]
        leaf_options = [self.leaf_states(c, x_joint) for c in leaves]
        inner_options = [self.joint_bundles(c) for c in inner]
        for inner_choice in product(*inner_options):
            inner_own = [_total(c.values(), h) for c in inner_choice]
            base = _sub(rest, _total(inner_own, h))
            if min(base, default=0) < 0:
                continue
            for leaf_choice in product(*leaf_options):
                remainder = _sub(base, _total((s[0] for s in leaf_choice), h))
                if min(remainder, default=0) < 0:
                    continue
                assigned = {**frozen, **x_joint}
                for choice in inner_choice:
                    assigned.update(choice)
                for _, _, witness in leaf_choice:
                    assigned.update(witness)
                if not all(self.acceptable(v, assigned) for v in x_joint):
                    continue
                found = self._descend(
                    inner, inner_choice, inner_own, remainder, x_joint
                )
                if found is not None:
                    found.update(x_joint)
                    for _, _, witness in leaf_choice:
                        found.update(witness)
                    return found
        return None

    def _descend(self, inner, inner_choice, inner_own, remainder, x_joint):
        for split in _splits(remainder, len(inner)):
            found = {}
            for child, choice, own, extra in zip(
                inner, inner_choice, inner_own, split
            ):
                sub = self.check(child, choice, _add(own, extra), x_joint)
                if sub is None:
                    break
                found.update(sub)
            else:
                return found
        return None


def _normalized_prices(prices):
    prices = prices if isinstance(prices, PriceVector) else PriceVector(
        tuple(Fraction(p) for p in prices)
    )
    if not prices.normalized:
        raise MalformedCandidateError("tree search needs normalized prices")
    return prices


def check_tree(
    market,
    labeling,
    node,
    prices,
    x,
    y,
    frozen,
    eps,
    grid,
    memoize=True,
    stats=None,
):
    """Searches the subtree at node for an eps-acceptable assignment.

    Args:
        market:
            The market.
        labeling:
            HierarchicalLabeling of the market's traders.
        node:
            Root of the subtree.
        prices:
            Normalized prices.
        x:
            Bundle of the node's traders: a mapping of trader id to bundle,
            or a single bundle when the node labels one trader.
        y:
            Discrete total consumption of the subtree.
        frozen:
            Bundles of the traders labeled by the node's parent.
        eps:
            Tolerance of budget feasibility and optimality.
        grid:
            GridSpec every vector lies on.

    Returns:
        dict: trader id to bundle for every subtree trader, or None.
    """
    prices = _normalized_prices(prices)
    group = labeling.group(node)
    if not isinstance(x, Mapping):
        if len(group) != 1:
            raise LabelingError(
                f"node {node} labels {len(group)} traders; pass a mapping"
            )
        x = {group[0]: x}
    search = TreeSearch(market, labeling, prices, eps, grid, memoize, stats)
    found = search.check(
        node,
        {k: grid.to_units(v) for k, v in x.items()},
        grid.to_units(y),
        {k: grid.to_units(v) for k, v in (frozen or {}).items()},
    )
    if found is None:
        return None
    return {k: grid.from_units(v) for k, v in sorted(found.items())}


def leaf_group_feasible_totals(
    market, group, parent_allocations, prices, eps, grid
):
    """Reachable consumption totals of traders sharing a leaf label.

    Every trader picks any discrete bundle that is eps-feasible and
    eps-optimal against the parent allocations. States are keyed by the
    group total and the exact contribution to each outside observer's
    linear forms; each state keeps the first witness that reached it.

    Returns:
        list: LeafState records.
    """
    prices = _normalized_prices(prices)
    search = TreeSearch(market, None, prices, eps, grid)
    parent = {
        k: grid.to_units(v) for k, v in (parent_allocations or {}).items()
    }
    return [
        LeafState(
            grid.from_units(total),
            grid.from_units(search.round_up(exact)),
            {k: grid.from_units(v) for k, v in witness.items()},
            exact,
        )
        for total, exact, witness in search.leaf_dp(group, parent)
    ]


def _candidate(search, prices, assignment):
    return EquilibriumCandidate(
        prices,
        {k: search.fractions(v) for k, v in sorted(assignment.items())},
    )


def _solve_at_price(market, labeling, grid, eps, memoize, stats, units):
    prices = PriceVector(grid.from_units(units)).normalize()
    stats.prices_tried += 1
    search = TreeSearch(market, labeling, prices, eps, grid, memoize, stats)
    root = labeling.root
    targets = _supply_target_units(market, grid, eps)
    if labeling.is_leaf(root):
        states = search.leaf_states(root, {})
        for y in targets:
            for total, _, witness in states:
                if total != y:
                    continue
                cand = _candidate(search, prices, witness)
                if verify_candidate(market, cand, eps).verdict:
                    return cand
        return None
    for y in targets:
        for x_joint in search.joint_bundles(root):
            found = search.check(root, x_joint, y, {})
            if found is None:
                continue
            cand = _candidate(search, prices, found)
            if verify_candidate(market, cand, eps).verdict:
                return cand
    return None


def _solve_slice(task):
    """Pool worker: first success inside a contiguous slice of prices."""
    market, labeling, grid, eps, memoize, offset, chunk = task
    stats = SearchStats()
    for index, units in enumerate(chunk, start=offset):
        cand = _solve_at_price(
            market, labeling, grid, eps, memoize, stats, units
        )
        if cand is not None:
            return index, cand, stats
    return None, None, stats


def solve_hierarchical(
    market, labeling, grid, eps, jobs=1, memoize=True, stats=None
):
    """Grid search for an eps-approximate equilibrium over a tree labeling.

    Prices are enumerated unnormalized and normalized before every check.
    Returning None does not certify that no equilibrium exists.

    Args:
        market:
            The market.
        labeling:
            HierarchicalLabeling that must validate against the market's
            influence graph.
        grid:
            GridSpec.
        eps:
            Tolerance of the returned candidate.
        jobs:
            Worker processes; price slices are searched independently and
            the first success in grid order wins.
        memoize:
            Cache subtree results within each price vector.
        stats:
            Optional SearchStats receiving expansion counts.

    Returns:
        EquilibriumCandidate or None.
    """
    eps = Fraction(eps)
    stats = stats if stats is not None else SearchStats()
    if not market.traders:
        LOG.warning("empty market: nothing to solve")
        return None
    verdict = validate_hierarchical(build_influence_graph(market), labeling)
    if not verdict.valid:
        raise LabelingError(f"invalid labeling: {verdict.violation}")
    price_units = list(enumerate_price_grid(market.good_count, grid).units())
    LOG.info("searching %d price vectors at N=%d", len(price_units), grid.N)
    if jobs <= 1:
        _, cand, found_stats = _solve_slice(
            (market, labeling, grid, eps, memoize, 0, price_units)
        )
        stats.merge(found_stats)
        return cand
    size = math.ceil(len(price_units) / jobs)
    tasks = [
        (
            market,
            labeling,
            grid,
            eps,
            memoize,
            start,
            price_units[start : start + size],
        )
        for start in range(0, len(price_units), size)
    ]
    with Pool(jobs) as pool:
        results = pool.map(_solve_slice, tasks)
    best = None
    for index, cand, found_stats in results:
        stats.merge(found_stats)
        if cand is not None and (best is None or index < best[0]):
            best = (index, cand)
    return None if best is None else best[1]


def solve_bruteforce(market, grid, eps, state_limit=STATE_LIMIT):
    """Exhaustive grid oracle.

    Traders are assigned depth-first in id order, bundles in lexicographic
    order, so the first candidate found equals the first of a plain
    enumeration. A partial profile is dropped as soon as a trader whose
    neighbors are all assigned fails budget feasibility or optimality.

    Raises:
        GridError: the enumeration exceeds state_limit.
    """
    eps = Fraction(eps)
    if not market.traders:
        LOG.warning("empty market: nothing to solve")
        return None
    h = market.good_count
    price_grid = enumerate_price_grid(h, grid)
    states = len(price_grid) * (grid.cap_units + 1) ** (h * len(market))
    if states > state_limit:
        raise GridError(
            f"{states} states exceed the limit of {state_limit}; "
            "lower N or raise the limit"
        )
    order = sorted(market.ids)
    position = {trader_id: i for i, trader_id in enumerate(order)}
    ready = [[] for _ in order]
    for trader_id in order:
        relevant = [trader_id] + market.trader(trader_id).neighbors()
        ready[max(position[other] for other in relevant)].append(trader_id)
    supply = market_supply(market)
    upper = tuple(
        min(grid.cap_units, math.floor((s + eps) * grid.N)) for s in supply
    )
    lower = tuple(max(0, math.ceil((s - eps) * grid.N)) for s in supply)

    for units in price_grid.units():
        prices = PriceVector(grid.from_units(units)).normalize()
        search = TreeSearch(market, None, prices, eps, grid)
        assigned = {}

        def descend(depth, total):
            if depth == len(order):
                if any(t < low for t, low in zip(total, lower)):
                    return None
                cand = _candidate(search, prices, assigned)
                if verify_candidate(market, cand, eps).verdict:
                    return cand
                return None
            trader_id = order[depth]
            for bundle in search.bundles(trader_id):
                combined = _add(total, bundle)
                if any(t > top for t, top in zip(combined, upper)):
                    continue
                assigned[trader_id] = bundle
                if all(search.acceptable(v, assigned) for v in ready[depth]):
                    found = descend(depth + 1, combined)
                    if found is not None:
                        return found
                del assigned[trader_id]
            return None

        cand = descend(0, (0,) * h)
        if cand is not None:
            LOG.info("exhaustive search found a candidate at %s", units)
            return cand
    return None
