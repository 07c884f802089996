"""
This file is dedicated to compiling sparse bimatrix games into markets with
social influence and back: game validation, well-supported Nash checks, an
exact support-enumeration oracle, the linear-influence market builder, the
strategy extractor, the crossing gadget, and the lift of separable
piecewise-linear markets into threshold-influence markets.
"""

# Standard library
import logging
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations, product
from typing import Dict, Optional, Tuple

# Third-party
import numpy as np
import sympy

# First-party/Local
from influence_markets.equilibrium import optimal_bundle
from influence_markets.market_core import (
    Diagnostic,
    Market,
    MarketError,
    Trader,
    as_fraction,
    build_influence_graph,
    check_existence_conditions,
    effective_segments,
    eval_utility,
    linear_utility,
    max_in_degree,
    threshold_utility,
    validate_market,
)

LOG = logging.getLogger(__name__)

# Largest number of nonzero entries per row or column of a sparse game.
SPARSE_LIMIT = 10
# Largest game the support-enumeration oracle accepts.
NASH_ORACLE_MAX_N = 6
# Uniform slope scale keeping every built slope inside [0, 1].
DEFAULT_SCALE = Fraction(1, 8)
# Largest influence in-degree a built market may have.
DEGREE_BOUND = 20
# Nonzero payoff values drawn by the sparse game generator.
PAYOFF_LEVELS = (Fraction(1), Fraction(-1), Fraction(1, 2), Fraction(-1, 2))
# Nonzero entries drawn per row by the sparse game generator.
ROW_NONZEROS = 3
# Width of the G1 interval at which a gadget copy stops bisecting.
GADGET_RESOLUTION = Fraction(1, 2**20)


class GameError(MarketError):
    """Malformed game or strategy input."""


class ReductionError(MarketError):
    """A construction or extraction cannot be carried out."""


class ExtractionError(ReductionError):
    """Rounding left nothing to normalize."""


@dataclass(frozen=True)
class BimatrixGame:
    A: Tuple[Tuple[Fraction, ...], ...]
    B: Tuple[Tuple[Fraction, ...], ...]

    @property
    def n(self):
        return len(self.A)

    @classmethod
    def from_rows(cls, A, B):
        return cls(
            tuple(tuple(as_fraction(v) for v in row) for row in A),
            tuple(tuple(as_fraction(v) for v in row) for row in B),
        )


@dataclass(frozen=True)
class MixedStrategyPair:
    x: Tuple[Fraction, ...]
    y: Tuple[Fraction, ...]


@dataclass(frozen=True)
class WsneReport:
    passed: bool
    eps: Fraction
    worst_margin: Fraction
    player: Optional[str] = None
    action: Optional[int] = None

    def describe(self):
        status = "PASS" if self.passed else "FAIL"
        line = f"{status} well-supported at eps {self.eps}"
        if self.player is not None:
            line += (
                f": {self.player} action {self.action + 1} "
                f"trails the best response by {self.worst_margin}"
            )
        return line


@dataclass(frozen=True)
class ReductionParams:
    n: int
    alpha: Fraction
    beta: Fraction
    gamma: Fraction
    scale: Fraction = DEFAULT_SCALE
    tau: Optional[Fraction] = None

    @classmethod
    def defaults(cls, n):
        return cls(
            n,
            Fraction(1, n**3),
            Fraction(1, n**10),
            Fraction(1, n**4),
            DEFAULT_SCALE,
            Fraction(1, n**12),
        )

    @classmethod
    def planar_defaults(cls, n):
        return cls(
            n,
            Fraction(1, n**9),
            Fraction(1, n**16),
            Fraction(1, n**10),
            DEFAULT_SCALE,
            Fraction(1, n**12),
        )

    @property
    def threshold(self):
        return self.tau if self.tau is not None else Fraction(1, self.n**12)


@dataclass(frozen=True)
class BuiltMarket:
    """A constructed market and the role each trader plays in it."""

    market: Market
    roles: Dict[str, str]

    def ids_with_role(self, kind):
        """Trader ids whose role starts with kind, keyed by role index."""
        found = {}
        for trader_id, role in self.roles.items():
            parts = role.split(":")
            if parts[0] == kind:
                found[tuple(int(p) for p in parts[1:])] = trader_id
        return found


@dataclass(frozen=True)
class PLMPiece:
    """u(x) = a*x up to theta, then slope b."""

    a: Fraction
    b: Fraction
    theta: Fraction


@dataclass(frozen=True)
class PLMTrader:
    id: str
    endowment: Tuple[Fraction, ...]
    pieces: Tuple[Optional[PLMPiece], ...]


@dataclass(frozen=True)
class SeparablePLMSpec:
    good_count: int
    traders: Tuple[PLMTrader, ...]


@dataclass(frozen=True)
class GadgetIds:
    s1s: str = "S1S"
    ss2: str = "SS2"
    s3s: str = "S3S"
    ss4: str = "SS4"
    s: str = "S"

    def all(self):
        return (self.s1s, self.ss2, self.s3s, self.ss4, self.s)


@dataclass(frozen=True)
class GadgetRun:
    profile: Dict[str, Tuple[Fraction, ...]]
    iterations: int
    converged: bool
    gap_12: Fraction
    gap_34: Fraction


def _require_square(game):
    n = game.n
    for name, matrix in (("A", game.A), ("B", game.B)):
        if len(matrix) != n or any(len(row) != n for row in matrix):
            raise GameError(f"matrix {name} is not {n}x{n}")


def _transpose(matrix):
    return tuple(zip(*matrix))


def validate_game(game, require_normalized=True, require_sparse=True):
    """Lists entry-range and sparsity violations of a game.

    Raises:
        GameError: the matrices are not square of equal size.
    """
    _require_square(game)
    issues = []
    for name, matrix in (("A", game.A), ("B", game.B)):
        if require_normalized:
            for i, row in enumerate(matrix):
                for j, value in enumerate(row):
                    if not -1 <= value <= 1:
                        issues.append(
                            Diagnostic(
                                "normalized",
                                f"entry ({i + 1},{j + 1}) of {name} is "
                                f"{value}, outside [-1,1]",
                            )
                        )
        if require_sparse:
            lines = (("row", matrix), ("column", _transpose(matrix)))
            for line, rows in lines:
                for index, values in enumerate(rows):
                    count = sum(1 for v in values if v != 0)
                    if count > SPARSE_LIMIT:
                        issues.append(
                            Diagnostic(
                                "sparse",
                                f"{line} {index + 1} of {name} has {count} "
                                f"nonzero entries, limit {SPARSE_LIMIT}",
                            )
                        )
    return issues


def _is_distribution(vector, n):
    return (
        len(vector) == n
        and all(v >= 0 for v in vector)
        and sum(vector, Fraction(0)) == 1
    )


def _dot(left, right):
    return sum((a * b for a, b in zip(left, right)), Fraction(0))


def row_payoffs(game, y):
    return [_dot(row, y) for row in game.A]


def column_payoffs(game, x):
    return [_dot(column, x) for column in _transpose(game.B)]


def verify_wsne(game, pair, eps):
    """Checks that every played action is within eps of a best response.

    Returns:
        WsneReport: the verdict and the worst margin over supported actions.
    """
    _require_square(game)
    n = game.n
    if not _is_distribution(pair.x, n) or not _is_distribution(pair.y, n):
        raise GameError("strategies must be probability distributions")
    eps = Fraction(eps)
    worst = (Fraction(0), None, None)
    for player, payoffs, mix in (
        ("row", row_payoffs(game, pair.y), pair.x),
        ("column", column_payoffs(game, pair.x), pair.y),
    ):
        best = max(payoffs)
        for action, payoff in enumerate(payoffs):
            if mix[action] > 0 and best - payoff > worst[0]:
                worst = (best - payoff, player, action)
    return WsneReport(worst[0] <= eps, eps, worst[0], worst[1], worst[2])


def _pure_equilibrium(game):
    n = game.n
    for i, j in product(range(n), repeat=2):
        rows = [game.A[r][j] for r in range(n)]
        columns = [game.B[i][c] for c in range(n)]
        if game.A[i][j] == max(rows) and game.B[i][j] == max(columns):
            x = tuple(Fraction(int(r == i)) for r in range(n))
            y = tuple(Fraction(int(c == j)) for c in range(n))
            return MixedStrategyPair(x, y)
    return None


def _indifferent_mix(payoff, support, against):
    """Weights on support that equalize payoff(a, s) across a in against.

    Returns None when the system has no solution.
    """
    weights = sympy.symbols(f"w0:{len(support)}")
    value = sympy.Symbol("v")
    equations = [
        sum(
            sympy.Rational(payoff(a, s).numerator, payoff(a, s).denominator)
            * weights[idx]
            for idx, s in enumerate(support)
        )
        - value
        for a in against
    ]
    equations.append(sum(weights) - 1)
    solutions = sympy.linsolve(equations, [*weights, value])
    if solutions is sympy.S.EmptySet or not len(solutions):
        return None
    solution = next(iter(solutions))
    free = {symbol: 0 for expr in solution for symbol in expr.free_symbols}
    resolved = []
    for expr in solution[:-1]:
        number = sympy.Rational(expr.subs(free))
        resolved.append(Fraction(int(number.p), int(number.q)))
    return resolved


def _spread(weights, support, n):
    vector = [Fraction(0)] * n
    for weight, index in zip(weights, support):
        vector[index] = weight
    return tuple(vector)


def nash_oracle(game):
    """Exact Nash equilibrium by support enumeration.

    Pure profiles are tried first, then support pairs in order of total
    size. Each solution of the indifference system is accepted only if it
    passes verify_wsne at eps 0.

    Raises:
        GameError: n exceeds NASH_ORACLE_MAX_N, or no equilibrium was found.
    """
    _require_square(game)
    n = game.n
    if n > NASH_ORACLE_MAX_N:
        raise GameError(
            f"oracle handles n <= {NASH_ORACLE_MAX_N}, got {n}"
        )
    pure = _pure_equilibrium(game)
    if pure is not None:
        return pure
    supports = [
        (rows, columns)
        for size_r in range(1, n + 1)
        for size_c in range(1, n + 1)
        for rows in combinations(range(n), size_r)
        for columns in combinations(range(n), size_c)
        if size_r + size_c > 2
    ]
    supports.sort(key=lambda pair: (len(pair[0]) + len(pair[1]), pair))
    for rows, columns in supports:
        LOG.debug("support pair %s x %s", rows, columns)
        y = _indifferent_mix(lambda a, s: game.A[a][s], columns, rows)
        if y is None:
            continue
        x = _indifferent_mix(lambda a, s: game.B[s][a], rows, columns)
        if x is None:
            continue
        if min(x + y) < 0:
            continue
        pair = MixedStrategyPair(_spread(x, rows, n), _spread(y, columns, n))
        if verify_wsne(game, pair, 0).passed:
            return pair
    raise GameError("no equilibrium found; the support enumeration is broken")


def cd_weights(A, i, j):
    """Splits the row difference A_i - A_j into nonnegative halves.

    Returns:
        tuple: (C, D) with C_l = max(0, A_il - A_jl)/2 and
        D_l = max(0, A_jl - A_il)/2, so that A_i - A_j = 2(C - D).
    """
    if i == j:
        raise ReductionError("cd_weights needs two distinct rows")
    C = tuple(max(Fraction(0), a - b) / 2 for a, b in zip(A[i], A[j]))
    D = tuple(max(Fraction(0), b - a) / 2 for a, b in zip(A[i], A[j]))
    for c, d, a, b in zip(C, D, A[i], A[j]):
        if not (0 <= c <= 1 and 0 <= d <= 1 and a - b == 2 * (c - d)):
            raise ReductionError(f"entries {a} and {b} are not normalized")
    return C, D


def _trader_id(kind, *indices):
    if not indices:
        return kind
    if len(indices) == 1:
        return f"{kind}{indices[0]}"
    return f"{kind}{indices[0]}_{indices[1]}"


def _role(kind, *indices):
    return ":".join([kind, *(str(i) for i in indices)])


def build_linear_market(game, params, four_goods=False):
    """Compiles a sparse normalized game into a linear-influence market.

    Every raw slope expression is multiplied by params.scale so that the
    market satisfies the [0, 1] normalization; scaling leaves optimal
    bundles unchanged.

    Args:
        game:
            BimatrixGame with n >= 3, normalized and sparse.
        params:
            ReductionParams.
        four_goods:
            Emit the four-good variant: T owns and wants all four goods,
            everyone else owns alpha of each and keeps the two-good utility.

    Returns:
        BuiltMarket: the market and its role map.
    """
    n = game.n
    if n < 3:
        raise ReductionError(f"the construction needs n >= 3, got {n}")
    issues = validate_game(game)
    if issues:
        raise GameError(issues[0].message)
    scale = params.scale
    if scale <= 0 or scale * (1 + max(params.beta, params.gamma)) > 1:
        raise ReductionError(
            f"scale {scale} cannot bring every slope into [0, 1]"
        )
    goods = 4 if four_goods else 2
    padding = (Fraction(0),) * (goods - 2)
    others = (params.alpha,) * goods
    traders = []
    roles = {}

    def add(trader_id, role, endowment, slopes, forms):
        utility = linear_utility(tuple(slopes) + padding, forms)
        if four_goods and trader_id == "T":
            utility = linear_utility((scale,) * goods)
        traders.append(Trader(trader_id, tuple(endowment), utility))
        roles[trader_id] = role

    add("T", "T", (Fraction(1),) * goods, (scale, scale), {})
    for i in range(1, n + 1):
        add(
            _trader_id("X", i),
            _role("X", i),
            others,
            (scale * (1 + params.gamma), scale),
            {1: [(_trader_id("A", i, 1), 0, scale)]},
        )
        add(
            _trader_id("Y", i),
            _role("Y", i),
            others,
            (scale * (1 + params.gamma), scale),
            {1: [(_trader_id("B", i, 1), 0, scale)]},
        )
    B_columns = _transpose(game.B)
    for i, j in product(range(1, n + 1), repeat=2):
        if i == j:
            continue
        for kind, matrix, source in (
            ("U", game.A, "Y"),
            ("V", B_columns, "X"),
        ):
            C, D = cd_weights(matrix, i - 1, j - 1)
            add(
                _trader_id(kind, i, j),
                _role(kind, i, j),
                others,
                (scale, scale * (1 + params.beta)),
                {
                    0: [
                        (_trader_id(source, ell + 1), 0, scale * d)
                        for ell, d in enumerate(D)
                        if d > 0
                    ],
                    1: [
                        (_trader_id(source, ell + 1), 0, scale * c)
                        for ell, c in enumerate(C)
                        if c > 0
                    ],
                },
            )
    for i in range(1, n + 1):
        rest = [j for j in range(1, n + 1) if j != i]
        for kind, source in (("A", "U"), ("B", "V")):
            for k in range(1, n - 1):
                if k < n - 2:
                    inputs = [
                        _trader_id(kind, i, k + 1),
                        _trader_id(source, i, rest[k - 1]),
                    ]
                else:
                    inputs = [
                        _trader_id(source, i, rest[n - 3]),
                        _trader_id(source, i, rest[n - 2]),
                    ]
                add(
                    _trader_id(kind, i, k),
                    _role(kind, i, k),
                    others,
                    (scale, scale * (1 + params.gamma)),
                    {0: [(source_id, 0, scale) for source_id in inputs]},
                )
    market = Market(goods, tuple(traders))
    _check_built(market, n)
    LOG.info("built a %d-good market with %d traders", goods, len(traders))
    return BuiltMarket(market, roles)


def expected_trader_count(n):
    return 1 + 2 * n + 2 * n * (n - 1) + 2 * n * (n - 2)


def _check_built(market, n):
    if len(market) != expected_trader_count(n):
        raise ReductionError(
            f"built {len(market)} traders, expected {expected_trader_count(n)}"
        )
    problems = validate_market(market)
    if problems:
        raise ReductionError(f"built market is malformed: {problems[0]}")
    degree = max_in_degree(build_influence_graph(market))
    if degree > DEGREE_BOUND:
        raise ReductionError(f"influence in-degree {degree} exceeds bound")
    if not check_existence_conditions(market).holds:
        raise ReductionError("built market misses the existence conditions")


def round_and_normalize(vector, tau):
    """Zeroes entries below tau and rescales the rest to sum 1.

    Raises:
        ExtractionError: every entry is below tau.
    """
    tau = Fraction(tau)
    kept = [v if v >= tau else Fraction(0) for v in vector]
    total = sum(kept, Fraction(0))
    if total == 0:
        raise ExtractionError(
            f"every entry is below {tau}; the candidate is not near an "
            "equilibrium"
        )
    return tuple(v / total for v in kept)


def extract_strategies(market, roles, cand, tau):
    """Reads the mixed strategies encoded by a candidate of a built market.

    Args:
        market:
            Market returned by build_linear_market.
        roles:
            Its role map.
        cand:
            EquilibriumCandidate of that market.
        tau:
            Rounding threshold.

    Returns:
        MixedStrategyPair
    """
    built = BuiltMarket(market, dict(roles))
    vectors = []
    for kind in ("X", "Y"):
        ids = built.ids_with_role(kind)
        n = len(ids)
        if n == 0 or sorted(ids) != [(i,) for i in range(1, n + 1)]:
            raise ReductionError(f"role map has no complete {kind} family")
        values = []
        for i in range(1, n + 1):
            trader_id = ids[(i,)]
            if trader_id not in cand.profile:
                raise ReductionError(
                    f"candidate has no allocation for {trader_id}"
                )
            values.append(cand.profile[trader_id][0])
        vectors.append(round_and_normalize(values, tau))
    return MixedStrategyPair(*vectors)


def crossing_gadget(ids=None, params=None, boundary_utilities=None):
    """Five-trader, four-good fragment that copies values across a crossing.

    S sees both incoming segment traders and both outgoing copies; each copy
    sees only S. The incoming segment traders S1S and S3S keep the utility
    the caller supplies, by default a plain linear interest in G1 and G2.

    Returns:
        BuiltMarket
    """
    ids = ids or GadgetIds()
    params = params or ReductionParams.planar_defaults(3)
    names = ids.all()
    if len(set(names)) != len(names):
        raise ReductionError(f"gadget ids collide: {names}")
    scale = params.scale
    endowment = (params.alpha,) * 4
    boundary_utilities = boundary_utilities or {}
    plain = linear_utility((scale, scale, 0, 0))
    utilities = {
        ids.s1s: boundary_utilities.get(ids.s1s, plain),
        ids.s3s: boundary_utilities.get(ids.s3s, plain),
        ids.s: linear_utility(
            (scale,) * 4,
            {
                0: [(ids.s1s, 0, scale), (ids.ss2, 1, scale)],
                1: [(ids.ss2, 0, scale), (ids.s1s, 1, scale)],
                2: [(ids.s3s, 0, scale), (ids.ss4, 1, scale)],
                3: [(ids.ss4, 0, scale), (ids.s3s, 1, scale)],
            },
        ),
        ids.ss2: linear_utility(
            (scale, scale, 0, 0),
            {0: [(ids.s, 0, scale)], 1: [(ids.s, 1, scale)]},
        ),
        ids.ss4: linear_utility(
            (scale, scale, 0, 0),
            {0: [(ids.s, 2, scale)], 1: [(ids.s, 3, scale)]},
        ),
    }
    traders = tuple(
        Trader(name, endowment, utilities[name]) for name in names
    )
    roles = {
        ids.s1s: "gadget:S1S",
        ids.ss2: "gadget:SS2",
        ids.s3s: "gadget:S3S",
        ids.ss4: "gadget:SS4",
        ids.s: "gadget:S",
    }
    return BuiltMarket(Market(4, traders), roles)


def _budget(market, trader_id, prices):
    endowment = market.trader(trader_id).endowment
    return sum((w * p for w, p in zip(endowment, prices)), Fraction(0))


def gadget_boundary(market, trader_id, prices, amount):
    """Bundle spending a trader's whole budget on G1 and G2.

    The trader holds amount of G1 and buys G2 with the rest of its budget.

    Raises:
        ReductionError: a price of G1 or G2 is not positive, or amount is
        outside [0, budget / price of G1].
    """
    prices = tuple(prices)
    if prices[0] <= 0 or prices[1] <= 0:
        raise ReductionError("G1 and G2 need positive prices")
    budget = _budget(market, trader_id, prices)
    amount = Fraction(amount)
    if not 0 <= amount <= budget / prices[0]:
        raise ReductionError(
            f"{trader_id} cannot hold {amount} of G1 on budget {budget}"
        )
    rest = (budget - prices[0] * amount) / prices[1]
    padding = (Fraction(0),) * (market.good_count - 2)
    return (amount, rest) + padding


def _even_best_response(market, trader_id, prices):
    """Best response of a linear trader, split evenly across tied goods."""
    if market.trader(trader_id).utility.kind != "linear":
        raise ReductionError(f"{trader_id} needs a linear utility")
    if any(p <= 0 for p in prices):
        raise ReductionError("the gadget needs positive prices")

    def reply(profile):
        segments = effective_segments(market, trader_id, profile)
        ratios = [pieces[0].slope / p for pieces, p in zip(segments, prices)]
        top = max(ratios)
        budget = _budget(market, trader_id, prices)
        if top <= 0:
            return (Fraction(0),) * len(prices)
        tied = [good for good, ratio in enumerate(ratios) if ratio == top]
        return tuple(
            budget / (len(tied) * p) if good in tied else Fraction(0)
            for good, p in enumerate(prices)
        )

    return reply


@dataclass
class _Bracket:
    """G1 holdings known to lie below and above a copy's target."""

    top: Fraction
    low: Optional[Fraction] = None
    high: Optional[Fraction] = None

    def settled(self, resolution):
        return (
            self.low is not None
            and self.high is not None
            and self.high - self.low <= resolution
        )

    def step(self, amount, upward):
        if upward:
            self.low = amount
            return self.top if self.high is None else (amount + self.high) / 2
        self.high = amount
        return Fraction(0) if self.low is None else (self.low + amount) / 2


def iterate_gadget_best_responses(
    market,
    ids,
    prices,
    boundary,
    max_iter=100,
    resolution=GADGET_RESOLUTION,
):
    """Damped best responses of S, SS2 and SS4 at frozen prices.

    Every sweep S plays an exact best response, spending its budget evenly
    across tied goods. SS2 and SS4 always spend their budget on G1 and G2
    and move only while their bundle is not optimal: full best responses
    until the direction first reverses, then bisection between the last
    holdings on either side. A copy stops once that interval is at most
    resolution wide. A sweep that changes nothing ends the run as
    converged.

    Args:
        market:
            Market built by crossing_gadget.
        ids:
            GadgetIds of that market.
        prices:
            Frozen prices, all positive.
        boundary:
            Bundles of S1S and S3S, kept fixed.
        max_iter:
            Largest number of sweeps.
        resolution:
            Width below which a copy stops bisecting.

    Returns:
        GadgetRun
    """
    ids = ids or GadgetIds()
    prices = tuple(Fraction(p) for p in prices)
    reply = _even_best_response(market, ids.s, prices)
    copies = (ids.ss2, ids.ss4)
    profile = {
        ids.s1s: tuple(boundary[ids.s1s]),
        ids.s3s: tuple(boundary[ids.s3s]),
        ids.s: (Fraction(0),) * market.good_count,
    }
    brackets = {}
    for copy in copies:
        profile[copy] = gadget_boundary(market, copy, prices, 0)
        brackets[copy] = _Bracket(_budget(market, copy, prices) / prices[0])

    def run(iterations, converged):
        return GadgetRun(
            dict(profile),
            iterations,
            converged,
            abs(profile[ids.ss2][0] - profile[ids.s1s][0]),
            abs(profile[ids.ss4][0] - profile[ids.s3s][0]),
        )

    for sweep in range(1, max_iter + 1):
        changed = False
        bundle = reply(profile)
        if bundle != profile[ids.s]:
            profile[ids.s] = bundle
            changed = True
        for copy in copies:
            if brackets[copy].settled(resolution):
                continue
            best = optimal_bundle(market, copy, prices, profile)
            if best.value == eval_utility(market, copy, profile):
                continue
            amount = profile[copy][0]
            moved = brackets[copy].step(amount, best.bundle[0] > amount)
            profile[copy] = gadget_boundary(market, copy, prices, moved)
            changed = True
        if not changed:
            LOG.debug("gadget settled after %d sweeps", sweep)
            return run(sweep, True)
    return run(max_iter, False)


def validate_plm_spec(spec, n):
    """Reasons a separable piecewise-linear market cannot be lifted."""
    issues = []
    bound = Fraction(1, n**4)
    for trader in spec.traders:
        if len(trader.endowment) != spec.good_count:
            issues.append(f"endowment of {trader.id} has the wrong length")
        if len(trader.pieces) != spec.good_count:
            issues.append(f"pieces of {trader.id} have the wrong length")
        for good, piece in enumerate(trader.pieces):
            if piece is None:
                continue
            if piece.b <= 0 or piece.a < piece.b:
                issues.append(
                    f"{trader.id} good {good + 1}: need a >= b > 0, "
                    f"got a={piece.a}, b={piece.b}"
                )
            if not 0 <= piece.theta <= bound:
                issues.append(
                    f"{trader.id} good {good + 1}: theta {piece.theta} "
                    f"outside [0, {bound}]"
                )
    return issues


def separable_value(trader, bundle):
    """Value of a separable piecewise-linear utility at a bundle."""
    value = Fraction(0)
    for piece, amount in zip(trader.pieces, bundle):
        if piece is None:
            continue
        if amount <= piece.theta:
            value += piece.a * amount
        else:
            value += piece.a * piece.theta + piece.b * (amount - piece.theta)
    return value


def lift_scale(roles, trader_id):
    """Factor the lifted trader's utility was multiplied by."""
    return Fraction(roles[trader_id].split(":")[2])


def threshold_lift(spec, n):
    """Rebuilds a separable market with threshold-influence utilities.

    Every trader T becomes T* with the same endowment plus one companion
    per good T cares about. A companion owns 1/n^4 of its good and wants
    only that good; T*'s threshold on the good equals theta exactly when
    the companion holds its endowment. Traders with some a > 1 are scaled
    by 1/max(a); the factor is recorded in the role map.

    Returns:
        BuiltMarket
    """
    issues = validate_plm_spec(spec, n)
    if issues:
        raise ReductionError(issues[0])
    h = spec.good_count
    pin = Fraction(1, n**4)
    traders = []
    roles = {}
    for original in spec.traders:
        goods = [g for g, piece in enumerate(original.pieces) if piece]
        top = max((original.pieces[g].a for g in goods), default=Fraction(1))
        scale = 1 / top if top > 1 else Fraction(1)
        lifted = f"{original.id}*"
        slopes = [Fraction(0)] * h
        drops = [Fraction(0)] * h
        forms = {}
        companions = []
        for good in goods:
            piece = original.pieces[good]
            slopes[good] = piece.a * scale
            drops[good] = (piece.a - piece.b) * scale
            companion = f"{original.id}*{good + 1}"
            weight = piece.theta * drops[good] * n**4
            if weight > 0:
                forms[good] = [(companion, good, weight)]
            unit = tuple(Fraction(int(g == good)) for g in range(h))
            companions.append(
                Trader(
                    companion,
                    tuple(pin * u for u in unit),
                    linear_utility(unit),
                )
            )
            roles[companion] = f"companion:{original.id}:{good + 1}"
        traders.append(
            Trader(
                lifted,
                tuple(original.endowment),
                threshold_utility(slopes, drops, forms),
            )
        )
        roles[lifted] = f"lift:{original.id}:{scale}"
        traders.extend(companions)
    market = Market(h, tuple(traders))
    graph = build_influence_graph(market)
    for target in graph.nodes:
        if graph.in_degree(target) and graph.out_degree(target):
            raise ReductionError("lifted influence graph is not a star forest")
    return BuiltMarket(market, roles)


def pinned_profile(built, lifted_id, bundle):
    """Profile holding bundle for a lifted trader and endowments elsewhere."""
    profile = {t.id: t.endowment for t in built.market.traders}
    profile[lifted_id] = tuple(bundle)
    return profile


def gen_sparse_game(n, seed):
    """Random normalized sparse game, deterministic in seed.

    Each row of A and of B gets between one and three nonzero entries drawn
    from PAYOFF_LEVELS, never pushing a column past SPARSE_LIMIT.
    """
    if n < 1:
        raise GameError(f"n must be positive, got {n}")
    rng = np.random.default_rng(seed)

    def matrix():
        rows = [[Fraction(0)] * n for _ in range(n)]
        column_counts = [0] * n
        for i in range(n):
            open_columns = [
                j for j in range(n) if column_counts[j] < SPARSE_LIMIT
            ]
            if not open_columns:
                continue
            count = int(
                rng.integers(1, min(ROW_NONZEROS, len(open_columns)) + 1)
            )
            chosen = rng.choice(open_columns, size=count, replace=False)
            for j in sorted(int(c) for c in chosen):
                level = int(rng.integers(len(PAYOFF_LEVELS)))
                rows[i][j] = PAYOFF_LEVELS[level]
                column_counts[j] += 1
        return tuple(tuple(row) for row in rows)

    return BimatrixGame(matrix(), matrix())
