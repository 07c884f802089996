"""
This file is dedicated to the file formats and the command line: exact JSON
instance documents, report emission, and one thin subcommand per operation
of the toolkit.
"""

# Standard library
import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Optional

# Third-party
import networkx as nx

# First-party/Local
from influence_markets.equilibrium import (
    ConditionResult,
    EquilibriumCandidate,
    VerificationReport,
    normalize_point,
    phi_constants,
    phi_iterate,
    uniform_point,
    verify_candidate,
)
from influence_markets.hsolver import (
    STATE_LIMIT,
    GridSpec,
    HierarchicalLabeling,
    SearchStats,
    solve_bruteforce,
    solve_hierarchical,
)
from influence_markets.market_core import (
    Market,
    MarketError,
    PriceVector,
    ThresholdInfluenceUtility,
    Trader,
    as_fraction,
    check_existence_conditions,
    linear_utility,
    threshold_utility,
    validate_market,
)
from influence_markets.reduction import (
    BimatrixGame,
    GadgetIds,
    MixedStrategyPair,
    PLMPiece,
    PLMTrader,
    ReductionParams,
    SeparablePLMSpec,
    WsneReport,
    build_linear_market,
    crossing_gadget,
    extract_strategies,
    gadget_boundary,
    gen_sparse_game,
    iterate_gadget_best_responses,
    nash_oracle,
    threshold_lift,
    verify_wsne,
)

LOG = logging.getLogger(__name__)

# Version written into and demanded from every document.
FORMAT_VERSION = 1
# Kinds of documents the toolkit reads and writes.
KINDS = (
    "market",
    "game",
    "candidate",
    "labeling",
    "plm-spec",
    "strategies",
    "report",
)
# Report formats accepted by --format.
REPORT_FORMATS = ("text", "jsonl")
LOG_FORMAT = "%(levelname)s %(message)s"
# Defaults of the phi-iterate subcommand.
PHI_STEPS = 200
PHI_DAMPING = Fraction(1, 2)


class DocumentError(MarketError):
    """A document cannot be parsed into an instance."""


@dataclass(frozen=True)
class InstanceDocument:
    kind: str
    payload: Any
    roles: Optional[Dict[str, str]] = None
    version: int = FORMAT_VERSION


def _float_literal(literal):
    try:
        hint = f"write {Fraction(literal)}"
    except (ValueError, ZeroDivisionError):
        hint = "write a rational p/q"
    raise DocumentError(f"float literal {literal}; {hint}")


def _rational(value, where):
    if isinstance(value, str) and any(c in value for c in ".eE"):
        _float_literal(value.strip())
    try:
        return as_fraction(value)
    except MarketError as e:
        raise DocumentError(f"{where}: {e}") from None


def _rationals(values, where):
    if not isinstance(values, list):
        raise DocumentError(f"{where}: expected a list")
    return tuple(_rational(v, where) for v in values)


def _field(obj, key, where):
    if not isinstance(obj, dict):
        raise DocumentError(f"{where}: expected an object")
    if key not in obj:
        raise DocumentError(f"{where}: missing field {key!r}")
    return obj[key]


def _text(value):
    return str(Fraction(value))


def _texts(values):
    return [_text(v) for v in values]


def _decode_utility(obj, where):
    kind = _field(obj, "kind", where)
    slopes = _rationals(_field(obj, "slopes", where), f"{where}.slopes")
    forms = {}
    for good, form in enumerate(obj.get("forms", [])):
        forms[good] = [
            (
                str(_field(term, "trader", f"{where}.forms")),
                int(_field(term, "good", f"{where}.forms")),
                _rational(
                    _field(term, "weight", f"{where}.forms"),
                    f"{where}.forms",
                ),
            )
            for term in form
        ]
    if kind == "linear":
        return linear_utility(slopes, forms)
    if kind == "threshold":
        drops = _rationals(_field(obj, "drops", where), f"{where}.drops")
        return threshold_utility(slopes, drops, forms)
    raise DocumentError(f"{where}: unknown utility kind {kind!r}")


def _encode_utility(utility):
    encoded = {
        "kind": utility.kind,
        "slopes": _texts(utility.slopes),
        "forms": [
            [
                {
                    "trader": term.trader,
                    "good": term.good,
                    "weight": _text(term.weight),
                }
                for term in form.terms
            ]
            for form in utility.forms
        ],
    }
    if isinstance(utility, ThresholdInfluenceUtility):
        encoded["drops"] = _texts(utility.drops)
    return encoded


def _decode_market(payload):
    goods = int(_field(payload, "goods", "market"))
    traders = []
    for index, obj in enumerate(_field(payload, "traders", "market")):
        where = f"market.traders[{index}]"
        traders.append(
            Trader(
                str(_field(obj, "id", where)),
                _rationals(_field(obj, "endowment", where), where),
                _decode_utility(_field(obj, "utility", where), where),
            )
        )
    return Market(goods, tuple(traders))


def _encode_market(market):
    return {
        "goods": market.good_count,
        "traders": [
            {
                "id": trader.id,
                "endowment": _texts(trader.endowment),
                "utility": _encode_utility(trader.utility),
            }
            for trader in market.traders
        ],
    }


def _decode_game(payload):
    matrices = []
    for name in ("A", "B"):
        rows = _field(payload, name, "game")
        matrices.append(
            tuple(_rationals(row, f"game.{name}") for row in rows)
        )
    return BimatrixGame(*matrices)


def _encode_game(game):
    return {
        "A": [_texts(row) for row in game.A],
        "B": [_texts(row) for row in game.B],
    }


def _decode_candidate(payload):
    prices = _rationals(_field(payload, "prices", "candidate"), "prices")
    allocations = _field(payload, "allocations", "candidate")
    return EquilibriumCandidate(
        PriceVector(prices),
        {
            str(k): _rationals(v, f"allocations.{k}")
            for k, v in allocations.items()
        },
    )


def _encode_candidate(cand):
    return {
        "prices": _texts(cand.prices),
        "allocations": {k: _texts(v) for k, v in cand.profile.items()},
    }


def _decode_labeling(payload):
    tree = nx.Graph()
    tree.add_nodes_from(str(n) for n in _field(payload, "nodes", "labeling"))
    tree.add_edges_from(
        (str(a), str(b)) for a, b in _field(payload, "edges", "labeling")
    )
    labels = _field(payload, "labels", "labeling")
    return HierarchicalLabeling(
        tree,
        str(_field(payload, "root", "labeling")),
        {str(k): str(v) for k, v in labels.items()},
        int(_field(payload, "k", "labeling")),
    )


def _encode_labeling(labeling):
    return {
        "k": labeling.k,
        "root": labeling.root,
        "nodes": sorted(labeling.tree.nodes),
        "edges": sorted(sorted(edge) for edge in labeling.tree.edges),
        "labels": dict(labeling.labels),
    }


def _decode_plm(payload):
    goods = int(_field(payload, "goods", "plm-spec"))
    traders = []
    for index, obj in enumerate(_field(payload, "traders", "plm-spec")):
        where = f"plm-spec.traders[{index}]"
        pieces = []
        for piece in _field(obj, "pieces", where):
            if piece is None:
                pieces.append(None)
                continue
            pieces.append(
                PLMPiece(
                    *(
                        _rational(_field(piece, key, where), where)
                        for key in ("a", "b", "theta")
                    )
                )
            )
        traders.append(
            PLMTrader(
                str(_field(obj, "id", where)),
                _rationals(_field(obj, "endowment", where), where),
                tuple(pieces),
            )
        )
    return SeparablePLMSpec(goods, tuple(traders))


def _encode_plm(spec):
    return {
        "goods": spec.good_count,
        "traders": [
            {
                "id": trader.id,
                "endowment": _texts(trader.endowment),
                "pieces": [
                    None
                    if piece is None
                    else {
                        "a": _text(piece.a),
                        "b": _text(piece.b),
                        "theta": _text(piece.theta),
                    }
                    for piece in trader.pieces
                ],
            }
            for trader in spec.traders
        ],
    }


def _decode_strategies(payload):
    return MixedStrategyPair(
        _rationals(_field(payload, "x", "strategies"), "x"),
        _rationals(_field(payload, "y", "strategies"), "y"),
    )


def _encode_strategies(pair):
    return {"x": _texts(pair.x), "y": _texts(pair.y)}


def _condition_record(condition):
    return {
        "index": condition.index,
        "name": condition.name,
        "passed": condition.passed,
        "violation": (
            None if condition.violation is None else _text(condition.violation)
        ),
        "trader": condition.trader,
        "good": condition.good,
        "reason": condition.reason,
    }


def _condition_from_record(record):
    violation = record.get("violation")
    return ConditionResult(
        int(_field(record, "index", "condition")),
        str(_field(record, "name", "condition")),
        bool(_field(record, "passed", "condition")),
        None if violation is None else _rational(violation, "violation"),
        record.get("trader"),
        record.get("good"),
        record.get("reason"),
    )


def _decode_report(payload):
    return VerificationReport(
        _rational(_field(payload, "eps", "report"), "eps"),
        tuple(
            _condition_from_record(record)
            for record in _field(payload, "conditions", "report")
        ),
    )


def _encode_report(report):
    return {
        "eps": _text(report.eps),
        "verdict": report.verdict,
        "conditions": [_condition_record(c) for c in report.conditions],
    }


CODECS = {
    "market": (_decode_market, _encode_market),
    "game": (_decode_game, _encode_game),
    "candidate": (_decode_candidate, _encode_candidate),
    "labeling": (_decode_labeling, _encode_labeling),
    "plm-spec": (_decode_plm, _encode_plm),
    "strategies": (_decode_strategies, _encode_strategies),
    "report": (_decode_report, _encode_report),
}


def _loads(text):
    try:
        return json.loads(
            text,
            parse_float=_float_literal,
            parse_constant=_float_literal,
        )
    except json.JSONDecodeError as e:
        raise DocumentError(
            f"syntax error at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from None


def parse_instance(text):
    """Parses a JSON document into domain objects.

    Rationals are strings "p/q" or integer literals; float literals are
    refused so that nothing is rounded on the way in.

    Returns:
        InstanceDocument
    """
    raw = _loads(text)
    version = _field(raw, "version", "document")
    if version != FORMAT_VERSION:
        raise DocumentError(
            f"version mismatch: expected {FORMAT_VERSION}, got {version}"
        )
    kind = _field(raw, "kind", "document")
    if kind not in KINDS:
        raise DocumentError(f"unknown kind {kind!r}")
    payload = _field(raw, "payload", "document")
    roles = raw.get("roles")
    decode, _ = CODECS[kind]
    try:
        decoded = decode(payload)
    except (TypeError, ValueError, AttributeError) as e:
        raise DocumentError(f"malformed {kind} payload: {e}") from None
    return InstanceDocument(
        kind,
        decoded,
        None if roles is None else {str(k): str(v) for k, v in roles.items()},
        version,
    )


def emit_instance(doc):
    """Canonical JSON text of a document, ending in a newline."""
    _, encode = CODECS[doc.kind]
    raw = {
        "kind": doc.kind,
        "payload": encode(doc.payload),
        "version": doc.version,
    }
    if doc.roles is not None:
        raw["roles"] = dict(doc.roles)
    return json.dumps(raw, sort_keys=True, indent=2) + "\n"


def _diagnostic_line(diagnostic):
    return f"ERROR {diagnostic.code}: {diagnostic.message}"


def emit_report(report, fmt="text"):
    """Renders a verification, WSNE or diagnostics report.

    Args:
        report:
            VerificationReport, WsneReport, or a list of Diagnostic.
        fmt:
            "text" for human-readable lines, "jsonl" for one JSON record
            per line.

    Returns:
        str: the rendered report, ending in a newline.
    """
    if fmt not in REPORT_FORMATS:
        raise DocumentError(f"unknown report format {fmt!r}")
    if isinstance(report, VerificationReport):
        if fmt == "text":
            lines = [c.describe() for c in report.conditions]
            verdict = "PASS" if report.verdict else "FAIL"
            lines.append(f"VERDICT {verdict} at eps {report.eps}")
        else:
            lines = [
                json.dumps(
                    {"record": "condition", **_condition_record(c)},
                    sort_keys=True,
                )
                for c in report.conditions
            ]
            lines.append(
                json.dumps(
                    {
                        "record": "verdict",
                        "eps": _text(report.eps),
                        "passed": report.verdict,
                    },
                    sort_keys=True,
                )
            )
    elif isinstance(report, WsneReport):
        if fmt == "text":
            lines = [report.describe()]
        else:
            lines = [
                json.dumps(
                    {
                        "record": "wsne",
                        "passed": report.passed,
                        "eps": _text(report.eps),
                        "worst_margin": _text(report.worst_margin),
                        "player": report.player,
                        "action": report.action,
                    },
                    sort_keys=True,
                )
            ]
    else:
        diagnostics = list(report)
        if fmt == "text":
            lines = [_diagnostic_line(d) for d in diagnostics]
            lines = lines or ["OK no violations"]
        else:
            lines = [
                json.dumps(
                    {"record": "diagnostic", **dataclasses.asdict(d)},
                    sort_keys=True,
                )
                for d in diagnostics
            ]
    return "".join(line + "\n" for line in lines)


def parse_report(text):
    """Reads back the jsonl rendering of a VerificationReport."""
    conditions = []
    eps = None
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line, parse_float=_float_literal)
        except json.JSONDecodeError as e:
            raise DocumentError(
                f"syntax error at line {number}, column {e.colno}: {e.msg}"
            ) from None
        kind = _field(record, "record", f"line {number}")
        if kind == "condition":
            conditions.append(_condition_from_record(record))
        elif kind == "verdict":
            eps = _rational(_field(record, "eps", "verdict"), "eps")
        else:
            raise DocumentError(f"line {number}: unexpected record {kind!r}")
    if eps is None:
        raise DocumentError("report has no verdict record")
    return VerificationReport(eps, tuple(conditions))


def exit_code(report):
    """0 when the report passes, 1 otherwise."""
    if isinstance(report, VerificationReport):
        return 0 if report.verdict else 1
    if isinstance(report, WsneReport):
        return 0 if report.passed else 1
    return 0 if not list(report) else 1


def _rational_arg(text):
    try:
        return as_fraction(text)
    except MarketError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _read(path):
    if path == "-":
        return sys.stdin.read()
    return Path(path).read_text(encoding="utf-8")


def _load(path, kind):
    doc = parse_instance(_read(path))
    if doc.kind != kind:
        raise DocumentError(
            f"{path}: expected a {kind} document, got {doc.kind}"
        )
    return doc


def _write(args, text):
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _report(args, report):
    _write(args, emit_report(report, args.format))
    return exit_code(report)


def _write_doc(args, kind, payload, roles=None):
    _write(args, emit_instance(InstanceDocument(kind, payload, roles)))
    return 0


def cmd_validate(args):
    market = _load(args.market, "market").payload
    diagnostics = validate_market(market, strict_supply=args.strict_supply)
    if not diagnostics:
        existence = check_existence_conditions(market)
        LOG.info(
            "economy graph strongly connected: %s; every good wanted: %s",
            existence.economy_strongly_connected,
            existence.per_good_nonsatiated,
        )
    return _report(args, diagnostics)


def cmd_verify(args):
    market = _load(args.market, "market").payload
    cand = _load(args.candidate, "candidate").payload
    return _report(args, verify_candidate(market, cand, args.eps))


def _found(args, cand):
    if cand is None:
        LOG.info("no candidate found")
        return 1
    return _write_doc(args, "candidate", cand)


def cmd_solve_brute(args):
    market = _load(args.market, "market").payload
    cand = solve_bruteforce(
        market, GridSpec(args.grid), args.eps, state_limit=args.state_limit
    )
    return _found(args, cand)


def cmd_solve_tree(args):
    market = _load(args.market, "market").payload
    labeling = _load(args.labeling, "labeling").payload
    stats = SearchStats()
    cand = solve_hierarchical(
        market,
        labeling,
        GridSpec(args.grid),
        args.eps,
        jobs=args.jobs,
        memoize=not args.no_memo,
        stats=stats,
    )
    LOG.info(
        "price vectors tried: %d; memo hits: %d",
        stats.prices_tried,
        stats.memo_hits,
    )
    if args.stats:
        stats.to_frame().to_csv(sys.stderr, index=False)
    return _found(args, cand)


def cmd_reduce(args):
    game = _load(args.game, "game").payload
    if args.planar_defaults:
        params = ReductionParams.planar_defaults(game.n)
    else:
        params = ReductionParams.defaults(game.n)
    overrides = {
        name: getattr(args, name)
        for name in ("alpha", "beta", "gamma", "scale")
        if getattr(args, name) is not None
    }
    params = dataclasses.replace(params, **overrides)
    built = build_linear_market(game, params, args.four_goods)
    return _write_doc(args, "market", built.market, built.roles)


def cmd_extract(args):
    doc = _load(args.market, "market")
    if not doc.roles:
        raise DocumentError(f"{args.market}: market has no role map")
    cand = _load(args.candidate, "candidate").payload
    n = sum(1 for role in doc.roles.values() if role.startswith("X:"))
    tau = args.tau if args.tau is not None else Fraction(1, max(n, 1) ** 12)
    pair = extract_strategies(doc.payload, doc.roles, cand, tau)
    return _write_doc(args, "strategies", pair)


def cmd_lift(args):
    spec = _load(args.spec, "plm-spec").payload
    built = threshold_lift(spec, args.n)
    return _write_doc(args, "market", built.market, built.roles)


def cmd_gadget(args):
    params = ReductionParams.planar_defaults(3)
    overrides = {
        name: getattr(args, name)
        for name in ("alpha", "scale")
        if getattr(args, name) is not None
    }
    params = dataclasses.replace(params, **overrides)
    ids = GadgetIds()
    built = crossing_gadget(ids, params)
    if args.boundary is None:
        return _write_doc(args, "market", built.market, built.roles)
    first, third = args.boundary
    prices = (Fraction(1, 4),) * 4
    run = iterate_gadget_best_responses(
        built.market,
        ids,
        prices,
        {
            ids.s1s: gadget_boundary(built.market, ids.s1s, prices, first),
            ids.s3s: gadget_boundary(built.market, ids.s3s, prices, third),
        },
        max_iter=args.max_iter,
    )
    LOG.info(
        "gadget run: %d sweeps, converged %s, gaps %s and %s",
        run.iterations,
        run.converged,
        run.gap_12,
        run.gap_34,
    )
    _write_doc(args, "market", built.market, built.roles)
    return 0 if run.converged else 1


def cmd_gen_game(args):
    return _write_doc(args, "game", gen_sparse_game(args.n, args.seed))


def cmd_nash_oracle(args):
    game = _load(args.game, "game").payload
    return _write_doc(args, "strategies", nash_oracle(game))


def cmd_verify_wsne(args):
    game = _load(args.game, "game").payload
    pair = _load(args.strategies, "strategies").payload
    return _report(args, verify_wsne(game, pair, args.eps))


def cmd_phi_iterate(args):
    market = _load(args.market, "market").payload
    consts = phi_constants(market)
    start = uniform_point(market)
    trace = phi_iterate(market, start, consts, args.steps, args.damping)
    if args.trace:
        trace.to_frame().to_csv(args.trace, index=False)
    LOG.info("best residual %s", trace.best_residual)
    return _write_doc(args, "candidate", normalize_point(trace.best_point))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="influence-markets",
        description="Exact tools for exchange markets with social influence",
    )
    parser.add_argument(
        "--verbose", action="store_true", help="log at DEBUG level"
    )
    parser.add_argument(
        "--format",
        choices=REPORT_FORMATS,
        default="text",
        help="report format",
    )
    parser.add_argument("-o", "--output", help="write output to this file")
    commands = parser.add_subparsers(dest="command", required=True)

    command = commands.add_parser("validate", help="check market invariants")
    command.add_argument("market")
    command.add_argument("--strict-supply", action="store_true")
    command.set_defaults(handler=cmd_validate)

    command = commands.add_parser("verify", help="verify a candidate")
    command.add_argument("market")
    command.add_argument("candidate")
    command.add_argument("--eps", type=_rational_arg, default=Fraction(0))
    command.set_defaults(handler=cmd_verify)

    command = commands.add_parser("solve-brute", help="exhaustive search")
    command.add_argument("market")
    command.add_argument("--grid", type=int, required=True)
    command.add_argument("--eps", type=_rational_arg, required=True)
    command.add_argument("--state-limit", type=int, default=STATE_LIMIT)
    command.set_defaults(handler=cmd_solve_brute)

    command = commands.add_parser("solve-tree", help="tree search")
    command.add_argument("market")
    command.add_argument("--labeling", required=True)
    command.add_argument("--grid", type=int, required=True)
    command.add_argument("--eps", type=_rational_arg, required=True)
    command.add_argument("--jobs", type=int, default=1)
    command.add_argument("--no-memo", action="store_true")
    command.add_argument(
        "--stats", action="store_true", help="expansions per depth as CSV"
    )
    command.set_defaults(handler=cmd_solve_tree)

    command = commands.add_parser("reduce", help="game to market")
    command.add_argument("game")
    for name in ("alpha", "beta", "gamma", "scale"):
        command.add_argument(f"--{name}", type=_rational_arg)
    command.add_argument(
        "--planar-defaults",
        action="store_true",
        help="parameters sized for the crossing gadget",
    )
    command.add_argument(
        "--four-goods", action="store_true", help="four-good variant"
    )
    command.set_defaults(handler=cmd_reduce)

    command = commands.add_parser("extract", help="market candidate to game")
    command.add_argument("market")
    command.add_argument("candidate")
    command.add_argument("--tau", type=_rational_arg)
    command.set_defaults(handler=cmd_extract)

    command = commands.add_parser("lift", help="separable PLM to threshold")
    command.add_argument("spec")
    command.add_argument("--n", type=int, default=3)
    command.set_defaults(handler=cmd_lift)

    command = commands.add_parser("gadget", help="crossing gadget market")
    command.add_argument("--alpha", type=_rational_arg)
    command.add_argument("--scale", type=_rational_arg)
    command.add_argument(
        "--boundary",
        nargs=2,
        type=_rational_arg,
        metavar=("S11", "S31"),
        help="run best responses with these frozen G1 allocations",
    )
    command.add_argument("--max-iter", type=int, default=100)
    command.set_defaults(handler=cmd_gadget)

    command = commands.add_parser("gen-game", help="random sparse game")
    command.add_argument("--n", type=int, required=True)
    command.add_argument("--seed", type=int, required=True)
    command.set_defaults(handler=cmd_gen_game)

    command = commands.add_parser("nash-oracle", help="exact equilibrium")
    command.add_argument("game")
    command.set_defaults(handler=cmd_nash_oracle)

    command = commands.add_parser("verify-wsne", help="check strategies")
    command.add_argument("game")
    command.add_argument("strategies")
    command.add_argument("--eps", type=_rational_arg, default=Fraction(0))
    command.set_defaults(handler=cmd_verify_wsne)

    command = commands.add_parser("phi-iterate", help="fixed-point iteration")
    command.add_argument("market")
    command.add_argument("--steps", type=int, default=PHI_STEPS)
    command.add_argument(
        "--damping", type=_rational_arg, default=PHI_DAMPING
    )
    command.add_argument("--trace", help="write residuals as CSV")
    command.set_defaults(handler=cmd_phi_iterate)
    return parser


def main(argv=None):
    """Entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        format=LOG_FORMAT,
        level=logging.DEBUG if args.verbose else logging.INFO,
        force=True,
    )
    try:
        return args.handler(args)
    except KeyboardInterrupt:
        LOG.info("Halted via KeyboardInterrupt.")
        return 130
    except MarketError as e:
        LOG.error("%s", e)
        return 2
    except Exception:
        LOG.exception("Unhandled exception")
        return 1


if __name__ == "__main__":
    sys.exit(main())
