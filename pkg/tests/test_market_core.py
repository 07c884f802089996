# Standard library
from fractions import Fraction as F

# Third-party
import numpy as np
import pytest

# First-party/Local
from influence_markets.market_core import (
    Market,
    MarketError,
    MissingAllocationError,
    PriceVector,
    Segment,
    Trader,
    aggregate_demand,
    as_fraction,
    build_economy_graph,
    build_influence_graph,
    check_existence_conditions,
    effective_segments,
    eval_utility,
    good_label,
    linear_utility,
    market_supply,
    max_in_degree,
    segment_contribution,
    threshold_utility,
    validate_market,
    with_bundle,
)


def threshold_pair():
    """A threshold trader watching a companion who owns one unit."""
    return Market(
        1,
        (
            Trader(
                "k",
                (F(1, 2),),
                threshold_utility((1,), (1,), {0: [("z", 0, 1)]}),
            ),
            Trader("z", (F(1, 2),), linear_utility((1,))),
        ),
    )


def codes(diagnostics):
    return [d.code for d in diagnostics]


@pytest.mark.parametrize(
    "value, expected",
    [("1/2", F(1, 2)), (3, F(3)), (" 2/4 ", F(1, 2)), (F(5, 7), F(5, 7))],
)
def test_as_fraction_accepts_exact_literals(value, expected):
    assert as_fraction(value) == expected


@pytest.mark.parametrize("value", [0.5, "0.5", "1e3", True, None, "x"])
def test_as_fraction_refuses_inexact_or_garbage(value):
    with pytest.raises(MarketError):
        as_fraction(value)


def test_linear_utility_adds_influence_to_slope(path_market):
    profile = {"a": (F(1), F(1)), "b": (F(2), F(0))}
    # (1/2 + 1/4 * 2) * 1 + 1/4 * 1
    assert eval_utility(path_market, "a", profile) == F(5, 4)


def test_eval_utility_requires_neighbors(path_market):
    with pytest.raises(MissingAllocationError):
        eval_utility(path_market, "a", {"a": (F(1), F(0))})


@pytest.mark.parametrize(
    "amount, expected",
    [(F(0), F(0)), (F(1, 2), F(1, 2)), (F(1), F(1)), (F(2), F(1))],
)
def test_threshold_utility_flattens_past_threshold(amount, expected):
    market = threshold_pair()
    profile = {"k": (amount,), "z": (F(1),)}
    assert eval_utility(market, "k", profile) == expected


def test_effective_segments_of_threshold_trader():
    market = threshold_pair()
    segments = effective_segments(market, "k", {"z": (F(1),)})
    assert segments == ((Segment(F(1), F(1)), Segment(F(0))),)


@pytest.mark.parametrize("amount", [F(0), F(1, 3), F(1), F(3, 2), F(2)])
def test_segments_integrate_to_the_utility(amount):
    market = threshold_pair()
    others = {"z": (F(1),)}
    segments = effective_segments(market, "k", others)[0]
    profile = with_bundle(others, "k", (amount,))
    assert segment_contribution(segments, amount) == eval_utility(
        market, "k", profile
    )


def test_validate_market_accepts_swap_market(swap_market):
    assert validate_market(swap_market) == []
    assert validate_market(swap_market, strict_supply=True) == []


def test_validate_market_reports_ranges_and_references():
    market = Market(
        2,
        (
            Trader(
                "a",
                (F(1, 2), F(1, 2)),
                linear_utility(
                    (F(3, 2), 0),
                    {0: [("a", 0, F(1, 2))], 1: [("ghost", 0, F(2))]},
                ),
            ),
            Trader("b", (F(1, 2), F(1, 2)), linear_utility((1, 1))),
        ),
    )
    found = validate_market(market)
    assert codes(found) == ["slope", "self-reference", "weight", "dangling"]
    messages = [d.message for d in found]
    assert messages[0] == "slope out of range: 3/2"
    assert messages[2] == "weight out of range: 2"
    assert messages[3] == "dangling trader reference ghost"
    assert found[0].trader == "a"


def test_validate_market_reports_supply_band():
    market = Market(
        2,
        (Trader("a", (F(3), F(1)), linear_utility((1, 1))),),
    )
    found = validate_market(market)
    assert codes(found) == ["supply"]
    assert found[0].message == "supply out of band [1/2,2]: G1 has 3"
    assert found[0].good == 0


def test_strict_supply_demands_exactly_one(path_market):
    assert validate_market(path_market, strict_supply=True) == []
    market = Market(1, (Trader("a", (F(3, 2),), linear_utility((1,))),))
    assert validate_market(market) == []
    assert codes(validate_market(market, strict_supply=True)) == ["supply"]


def test_arity_errors_suppress_supply_check():
    market = Market(
        2,
        (
            Trader("a", (F(5),), linear_utility((1, 1))),
            Trader("a", (F(1), F(1)), linear_utility((1, 1))),
        ),
    )
    assert codes(validate_market(market)) == ["duplicate-trader", "arity"]


def test_threshold_drop_may_not_exceed_slope():
    market = Market(
        1,
        (Trader("a", (F(1),), threshold_utility((F(1, 2),), (F(1),))),),
    )
    assert codes(validate_market(market)) == ["drop"]


def test_influence_graph_follows_positive_weights(path_market):
    graph = build_influence_graph(path_market)
    assert sorted(graph.edges) == [
        ("a", "b"),
        ("b", "a"),
        ("b", "c"),
        ("c", "b"),
    ]
    assert max_in_degree(graph) == 2


def test_zero_weight_creates_no_edge():
    market = Market(
        1,
        (
            Trader("a", (F(1, 2),), linear_utility((1,), {0: [("b", 0, 0)]})),
            Trader("b", (F(1, 2),), linear_utility((1,))),
        ),
    )
    assert market.trader("a").neighbors() == []
    assert list(build_influence_graph(market).edges) == []


def test_swap_market_meets_existence_conditions(swap_market):
    graph = build_economy_graph(swap_market)
    assert sorted(graph.edges) == [("T1", "T2"), ("T2", "T1")]
    assert check_existence_conditions(swap_market).holds


def test_satiated_good_breaks_existence():
    market = Market(
        2,
        (
            Trader("a", (F(1), F(0)), linear_utility((1, 0))),
            Trader("b", (F(0), F(1)), linear_utility((1, 0))),
        ),
    )
    report = check_existence_conditions(market)
    assert not report.per_good_nonsatiated
    assert not report.economy_strongly_connected
    assert not report.holds


def test_empty_market_is_not_connected():
    report = check_existence_conditions(Market(1, ()))
    assert not report.economy_strongly_connected
    assert not report.holds


def test_supply_and_demand_helpers(path_market):
    assert market_supply(path_market) == (F(1), F(1))
    profile = {"a": (F(1), F(0)), "b": (F(0), F(1, 2))}
    assert aggregate_demand(profile, 2) == (F(1), F(1, 2))
    updated = with_bundle(profile, "a", (F(0), F(0)))
    assert updated["a"] == (F(0), F(0))
    assert profile["a"] == (F(1), F(0))


def test_market_lookup_and_labels(swap_market):
    assert swap_market.trader("T2").endowment == (F(0), F(1))
    assert len(swap_market) == 2
    assert good_label(0) == "G1"
    with pytest.raises(MarketError):
        swap_market.trader("T9")


def test_price_vector_normalization():
    prices = PriceVector((F(1), F(3)))
    assert not prices.normalized
    assert tuple(prices.normalize()) == (F(1, 4), F(3, 4))
    with pytest.raises(MarketError):
        PriceVector((F(0), F(0))).normalize()


def random_instances(make_random_market, make_random_profile, seed, count):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        m = int(rng.integers(1, 4))
        h = int(rng.integers(1, 4))
        market = make_random_market(rng, m, h)
        yield rng, market, make_random_profile(rng, market)


def test_utility_never_drops_when_an_allocation_grows(
    make_random_market, make_random_profile
):
    instances = random_instances(
        make_random_market, make_random_profile, 11, 100
    )
    for rng, market, profile in instances:
        raised = market.ids[int(rng.integers(len(market)))]
        good = int(rng.integers(market.good_count))
        bundle = list(profile[raised])
        bundle[good] += F(int(rng.integers(1, 9)), 4)
        grown = with_bundle(profile, raised, tuple(bundle))
        for trader_id in market.ids:
            assert eval_utility(market, trader_id, grown) >= eval_utility(
                market, trader_id, profile
            )


def test_utility_is_concave_in_each_own_good(
    make_random_market, make_random_profile
):
    instances = random_instances(
        make_random_market, make_random_profile, 12, 100
    )
    for rng, market, profile in instances:
        trader_id = market.ids[int(rng.integers(len(market)))]
        good = int(rng.integers(market.good_count))
        low, mid, high = sorted(
            F(int(v), 8) for v in rng.choice(25, size=3, replace=False)
        )

        def value(amount):
            bundle = list(profile[trader_id])
            bundle[good] = amount
            moved = with_bundle(profile, trader_id, tuple(bundle))
            return eval_utility(market, trader_id, moved)

        left = (value(mid) - value(low)) / (mid - low)
        right = (value(high) - value(mid)) / (high - mid)
        assert left >= right


def test_segments_agree_with_the_utility_on_random_markets(
    make_random_market, make_random_profile
):
    instances = random_instances(
        make_random_market, make_random_profile, 13, 100
    )
    for _, market, profile in instances:
        for trader_id in market.ids:
            segments = effective_segments(market, trader_id, profile)
            for pieces in segments:
                slopes = [piece.slope for piece in pieces]
                assert slopes == sorted(slopes, reverse=True)
            integrated = sum(
                (
                    segment_contribution(pieces, amount)
                    for pieces, amount in zip(segments, profile[trader_id])
                ),
                F(0),
            )
            assert integrated == eval_utility(market, trader_id, profile)


def test_every_influence_edge_has_a_witness(make_random_market):
    rng = np.random.default_rng(14)
    for _ in range(50):
        market = make_random_market(rng, 3, int(rng.integers(1, 4)))
        graph = build_influence_graph(market)
        h = market.good_count
        zero = {trader_id: (F(0),) * h for trader_id in market.ids}
        for target in market.ids:
            forms = market.trader(target).utility.forms
            for source in market.ids:
                if source == target:
                    continue
                # one unit of every good for the target, nothing elsewhere
                base = with_bundle(zero, target, (F(1),) * h)
                before = eval_utility(market, target, base)
                if not graph.has_edge(source, target):
                    nudged = with_bundle(base, source, (F(1),) * h)
                    assert eval_utility(market, target, nudged) == before
                    continue
                term = next(
                    term
                    for form in forms
                    for term in form.terms
                    if term.trader == source
                )
                bundle = [F(0)] * h
                bundle[term.good] = F(1)
                nudged = with_bundle(base, source, tuple(bundle))
                assert eval_utility(market, target, nudged) > before
