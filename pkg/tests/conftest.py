# Standard library
from fractions import Fraction as F

# Third-party
import networkx as nx
import pytest

# First-party/Local
from influence_markets.equilibrium import EquilibriumCandidate
from influence_markets.hsolver import HierarchicalLabeling
from influence_markets.market_core import (
    Market,
    PriceVector,
    Trader,
    linear_utility,
    threshold_utility,
)

# Values random markets draw slopes, drops and endowments from.
LEVELS = (F(0), F(1, 4), F(1, 2), F(3, 4), F(1))
# Positive influence weights of random markets.
WEIGHTS = (F(1, 4), F(1, 2))


@pytest.fixture
def swap_market():
    """Two traders who each own what the other wants."""
    return Market(
        2,
        (
            Trader("T1", (F(1), F(0)), linear_utility((0, 1))),
            Trader("T2", (F(0), F(1)), linear_utility((1, 0))),
        ),
    )


@pytest.fixture
def swap_equilibrium():
    return EquilibriumCandidate(
        PriceVector((F(1, 2), F(1, 2))),
        {"T1": (F(0), F(1)), "T2": (F(1), F(0))},
    )


@pytest.fixture
def path_market():
    """Three traders influencing each other along a path a - b - c."""
    return Market(
        2,
        (
            Trader(
                "a",
                (F(1, 2), F(0)),
                linear_utility((F(1, 2), F(1, 4)), {0: [("b", 0, F(1, 4))]}),
            ),
            Trader(
                "b",
                (F(0), F(1, 2)),
                linear_utility(
                    (F(1, 4), F(1, 2)),
                    {0: [("a", 0, F(1, 4))], 1: [("c", 1, F(1, 4))]},
                ),
            ),
            Trader(
                "c",
                (F(1, 2), F(1, 2)),
                linear_utility((F(1, 2), F(1, 2)), {1: [("b", 1, F(1, 4))]}),
            ),
        ),
    )


def labeling_of(edges, root, labels, k=1):
    tree = nx.Graph()
    tree.add_nodes_from(set(labels.values()) | {root})
    tree.add_edges_from(edges)
    return HierarchicalLabeling(tree, root, labels, k)


@pytest.fixture
def make_labeling():
    return labeling_of


def binary_tree_market(depth):
    """Complete binary tree of traders, one good, root owns everything.

    Every trader values the good at 1/2 plus 1/4 per unit held by its
    parent and by each child.
    """
    tree = nx.balanced_tree(2, depth)
    names = {node: f"n{node:03d}" for node in tree.nodes}
    traders = []
    for node in sorted(tree.nodes):
        neighbours = sorted(names[other] for other in tree.neighbors(node))
        traders.append(
            Trader(
                names[node],
                (F(1) if node == 0 else F(0),),
                linear_utility(
                    (F(1, 2),),
                    {0: [(other, 0, F(1, 4)) for other in neighbours]},
                ),
            )
        )
    market = Market(1, tuple(traders))
    labeling = labeling_of(
        [(names[a], names[b]) for a, b in tree.edges],
        names[0],
        {name: name for name in names.values()},
    )
    return market, labeling


@pytest.fixture
def make_binary_tree_market():
    return binary_tree_market


def pick(rng, values):
    return values[int(rng.integers(len(values)))]


def random_market(rng, m, h):
    """Seeded market of m traders over h goods, mixing utility kinds.

    Each trader owns a positive amount of every good. Form terms reference
    other traders with positive weights, and threshold goods always have a
    positive drop, so every influence edge is one the utility feels.
    """
    ids = [f"t{i}" for i in range(m)]
    traders = []
    for trader_id in ids:
        forms = {
            good: [
                (other, int(rng.integers(h)), pick(rng, WEIGHTS))
                for other in ids
                if other != trader_id and rng.integers(2)
            ]
            for good in range(h)
        }
        if rng.integers(2):
            slopes = [pick(rng, LEVELS[1:]) for _ in range(h)]
            drops = [
                pick(rng, [d for d in LEVELS[1:] if d <= s]) for s in slopes
            ]
            utility = threshold_utility(slopes, drops, forms)
        else:
            slopes = [pick(rng, LEVELS) for _ in range(h)]
            utility = linear_utility(slopes, forms)
        endowment = tuple(pick(rng, LEVELS[1:]) for _ in range(h))
        traders.append(Trader(trader_id, endowment, utility))
    return Market(h, tuple(traders))


def random_profile(rng, market):
    return {
        trader_id: tuple(pick(rng, LEVELS) for _ in range(market.good_count))
        for trader_id in market.ids
    }


def random_prices(rng, h):
    weights = [F(int(rng.integers(1, 5))) for _ in range(h)]
    return tuple(w / sum(weights) for w in weights)


@pytest.fixture
def make_random_market():
    return random_market


@pytest.fixture
def make_random_profile():
    return random_profile


@pytest.fixture
def make_random_prices():
    return random_prices


def permutation_market(rng, h):
    """h traders; trader i owns one unit of good i and wants one good.

    The wanted goods form a random permutation, so the unit bundles of the
    wanted goods at uniform prices are an exact equilibrium.

    Returns:
        tuple: the market and that equilibrium profile.
    """
    wanted = [int(good) for good in rng.permutation(h)]
    ids = [f"t{i}" for i in range(h)]
    traders = []
    profile = {}
    for index, trader_id in enumerate(ids):
        good = wanted[index]
        slopes = [F(0)] * h
        slopes[good] = pick(rng, LEVELS[1:])
        forms = {
            good: [
                (other, int(rng.integers(h)), pick(rng, WEIGHTS))
                for other in ids
                if other != trader_id and rng.integers(2)
            ]
        }
        if rng.integers(2):
            drops = [F(0)] * h
            drops[good] = pick(rng, [d for d in LEVELS if d < slopes[good]])
            utility = threshold_utility(slopes, drops, forms)
        else:
            utility = linear_utility(slopes, forms)
        endowment = [F(0)] * h
        endowment[index] = F(1)
        traders.append(Trader(trader_id, tuple(endowment), utility))
        bundle = [F(0)] * h
        bundle[good] = F(1)
        profile[trader_id] = tuple(bundle)
    return Market(h, tuple(traders)), profile


@pytest.fixture
def make_permutation_market():
    return permutation_market
