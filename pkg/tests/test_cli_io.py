# Standard library
import json
from fractions import Fraction as F

# Third-party
import networkx as nx
import pandas as pd
import pytest

# First-party/Local
from influence_markets.cli_io import (
    DocumentError,
    InstanceDocument,
    emit_instance,
    emit_report,
    exit_code,
    main,
    parse_instance,
    parse_report,
)
from influence_markets.equilibrium import (
    EquilibriumCandidate,
    verify_candidate,
)
from influence_markets.hsolver import HierarchicalLabeling
from influence_markets.market_core import (
    Diagnostic,
    Market,
    PriceVector,
    Trader,
    linear_utility,
    threshold_utility,
)
from influence_markets.reduction import (
    BimatrixGame,
    MixedStrategyPair,
    PLMPiece,
    PLMTrader,
    SeparablePLMSpec,
    gen_sparse_game,
    verify_wsne,
)

CANDIDATE_TEXT = """\
{
  "kind": "candidate",
  "payload": {
    "allocations": {
      "T1": [
        "0",
        "1"
      ],
      "T2": [
        "1",
        "0"
      ]
    },
    "prices": [
      "1/2",
      "1/2"
    ]
  },
  "version": 1
}
"""

SMALL_GAME = BimatrixGame.from_rows(
    [[1, 0, "-1/2"], [0, 1, 0], ["1/2", 0, 1]],
    [[0, 1, 0], [1, 0, "1/2"], [0, "-1", 1]],
)
PENNIES = BimatrixGame.from_rows([[1, -1], [-1, 1]], [[-1, 1], [1, -1]])


def write_doc(path, kind, payload, roles=None):
    path.write_text(emit_instance(InstanceDocument(kind, payload, roles)))
    return str(path)


def one_node(labels):
    tree = nx.Graph()
    tree.add_node("r")
    return HierarchicalLabeling(tree, "r", {k: "r" for k in labels}, 1)


def test_candidate_document_is_canonical(swap_equilibrium):
    doc = parse_instance(CANDIDATE_TEXT)
    assert doc.kind == "candidate"
    assert doc.payload == swap_equilibrium
    assert emit_instance(doc) == CANDIDATE_TEXT


def test_market_document_survives_a_round_trip(path_market):
    threshold = Market(
        1,
        (
            Trader(
                "k",
                (F(1, 2),),
                threshold_utility((1,), (F(1, 2),), {0: [("z", 0, 1)]}),
            ),
            Trader("z", (F(1, 2),), linear_utility((1,))),
        ),
    )
    for market in (path_market, threshold):
        doc = InstanceDocument("market", market, {"a": "role:1"})
        again = parse_instance(emit_instance(doc))
        assert again == doc


def test_other_kinds_survive_a_round_trip():
    spec = SeparablePLMSpec(
        2,
        (
            PLMTrader(
                "T",
                (F(1, 2), F(1, 2)),
                (PLMPiece(F(1, 2), F(1, 4), F(1, 81)), None),
            ),
        ),
    )
    pair = MixedStrategyPair((F(1, 3), F(2, 3)), (F(1), F(0)))
    for kind, payload in (
        ("game", SMALL_GAME),
        ("plm-spec", spec),
        ("strategies", pair),
    ):
        doc = InstanceDocument(kind, payload)
        assert parse_instance(emit_instance(doc)) == doc


def test_labeling_document_keeps_the_tree():
    tree_text = emit_instance(
        InstanceDocument("labeling", one_node(["T1", "T2"]))
    )
    labeling = parse_instance(tree_text).payload
    assert labeling.root == "r"
    assert dict(labeling.labels) == {"T1": "r", "T2": "r"}
    assert list(labeling.tree.nodes) == ["r"]


@pytest.mark.parametrize("literal", ["0.5", "5e-1"])
def test_float_literals_are_refused(literal):
    text = CANDIDATE_TEXT.replace('"1/2"', literal, 1)
    with pytest.raises(DocumentError) as caught:
        parse_instance(text)
    assert str(caught.value) == f"float literal {literal}; write 1/2"


def test_float_strings_are_refused():
    text = CANDIDATE_TEXT.replace('"1/2"', '"0.5"', 1)
    with pytest.raises(DocumentError, match="float literal 0.5; write 1/2"):
        parse_instance(text)


@pytest.mark.parametrize(
    "text, message",
    [
        ("{", "syntax error at line 1, column 2"),
        ('{"kind": "market", "version": 2, "payload": {}}', "version"),
        ('{"kind": "widget", "version": 1, "payload": {}}', "unknown kind"),
        ('{"kind": "market", "version": 1}', "missing field 'payload'"),
        (
            '{"kind": "market", "version": 1, "payload": {"goods": 1}}',
            "missing field 'traders'",
        ),
    ],
)
def test_document_errors(text, message):
    with pytest.raises(DocumentError) as caught:
        parse_instance(text)
    assert message in str(caught.value)


def test_text_report(swap_market, swap_equilibrium):
    report = verify_candidate(swap_market, swap_equilibrium, 0)
    assert emit_report(report) == (
        "PASS condition 1 (prices normalized)\n"
        "PASS condition 2 (budget feasibility)\n"
        "PASS condition 3 (optimality)\n"
        "PASS condition 4 (market clearing)\n"
        "VERDICT PASS at eps 0\n"
    )
    assert exit_code(report) == 0


def test_jsonl_report_reads_back(swap_market, swap_equilibrium):
    profile = dict(swap_equilibrium.profile)
    profile["T2"] = (F(1), F(1, 10))
    cand = EquilibriumCandidate(swap_equilibrium.prices, profile)
    report = verify_candidate(swap_market, cand, F(1, 20))
    text = emit_report(report, "jsonl")
    records = [json.loads(line) for line in text.splitlines()]
    assert [r["record"] for r in records] == ["condition"] * 4 + ["verdict"]
    assert records[-1] == {"eps": "1/20", "passed": False, "record": "verdict"}
    assert parse_report(text) == report
    assert exit_code(report) == 1


def test_parse_report_needs_a_verdict():
    with pytest.raises(DocumentError):
        parse_report('{"record": "other"}\n')
    with pytest.raises(DocumentError):
        parse_report("")


def test_diagnostics_report():
    assert emit_report([]) == "OK no violations\n"
    assert exit_code([]) == 0
    found = [Diagnostic("supply", "supply out of band", good=0)]
    assert emit_report(found) == "ERROR supply: supply out of band\n"
    record = json.loads(emit_report(found, "jsonl"))
    assert record == {
        "code": "supply",
        "good": 0,
        "message": "supply out of band",
        "record": "diagnostic",
        "trader": None,
    }
    assert exit_code(found) == 1


def test_wsne_report():
    half = (F(1, 2), F(1, 2))
    report = verify_wsne(PENNIES, MixedStrategyPair(half, half), 0)
    assert emit_report(report) == "PASS well-supported at eps 0\n"
    record = json.loads(emit_report(report, "jsonl"))
    assert record["record"] == "wsne"
    assert record["worst_margin"] == "0"


def test_unknown_report_format():
    with pytest.raises(DocumentError):
        emit_report([], "xml")


def test_cli_validate(tmp_path, capsys, swap_market):
    market = write_doc(tmp_path / "m.json", "market", swap_market)
    assert main(["validate", market]) == 0
    assert capsys.readouterr().out == "OK no violations\n"
    crowded = Market(1, (Trader("a", (F(3),), linear_utility((1,))),))
    market = write_doc(tmp_path / "c.json", "market", crowded)
    assert main(["validate", market]) == 1
    assert capsys.readouterr().out.startswith("ERROR supply:")


def test_cli_verify(tmp_path, capsys, swap_market, swap_equilibrium):
    market = write_doc(tmp_path / "m.json", "market", swap_market)
    cand = tmp_path / "c.json"
    cand.write_text(CANDIDATE_TEXT)
    assert main(["verify", market, str(cand)]) == 0
    assert capsys.readouterr().out.endswith("VERDICT PASS at eps 0\n")

    skewed = EquilibriumCandidate(
        PriceVector((F(3, 4), F(1, 4))), swap_equilibrium.profile
    )
    skewed_path = write_doc(tmp_path / "s.json", "candidate", skewed)
    assert main(["--format", "jsonl", "verify", market, skewed_path]) == 1
    last = capsys.readouterr().out.splitlines()[-1]
    assert json.loads(last)["passed"] is False


def test_cli_error_exit_codes(tmp_path, capsys, swap_market):
    market = write_doc(tmp_path / "m.json", "market", swap_market)
    unnormalized = EquilibriumCandidate(
        PriceVector((F(1), F(1))), {"T1": (F(0), F(1)), "T2": (F(1), F(0))}
    )
    cand = write_doc(tmp_path / "u.json", "candidate", unnormalized)
    assert main(["verify", market, cand]) == 2
    floats = tmp_path / "f.json"
    floats.write_text(CANDIDATE_TEXT.replace('"1/2"', "0.5"))
    assert main(["verify", market, str(floats)]) == 2
    # a candidate where a market is expected
    assert main(["validate", cand]) == 2
    assert main(["validate", str(tmp_path / "missing.json")]) == 1
    assert "float literal 0.5" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["verify", market, cand, "--eps", "0.5"])


def test_cli_solvers(tmp_path, capsys, swap_market, swap_equilibrium):
    market = write_doc(tmp_path / "m.json", "market", swap_market)
    labeling = write_doc(
        tmp_path / "l.json", "labeling", one_node(["T1", "T2"])
    )
    assert main(["solve-brute", market, "--grid", "2", "--eps", "0"]) == 0
    out = capsys.readouterr().out
    assert parse_instance(out).payload == swap_equilibrium

    args = ["solve-tree", market, "--labeling", labeling, "--grid", "2"]
    assert main(args + ["--eps", "0", "--stats"]) == 0
    captured = capsys.readouterr()
    assert parse_instance(captured.out).payload == swap_equilibrium
    assert "depth,expansions" in captured.err


def test_cli_solver_without_candidate(tmp_path, capsys):
    off_grid = Market(
        2,
        (
            Trader("T1", (F(2, 3), F(0)), linear_utility((0, 1))),
            Trader("T2", (F(0), F(1)), linear_utility((1, 0))),
        ),
    )
    market = write_doc(tmp_path / "m.json", "market", off_grid)
    assert main(["solve-brute", market, "--grid", "2", "--eps", "0"]) == 1
    captured = capsys.readouterr()
    assert captured.out == ""
    assert "no candidate found" in captured.err


def test_cli_reduce_then_extract(tmp_path, capsys):
    game = write_doc(tmp_path / "g.json", "game", SMALL_GAME)
    built = tmp_path / "market.json"
    assert main(["-o", str(built), "reduce", game]) == 0
    doc = parse_instance(built.read_text())
    assert len(doc.payload) == 25
    assert doc.roles["X1"] == "X:1"

    profile = {
        "X1": (F(1, 5), F(0)),
        "X2": (F(1, 10**7), F(0)),
        "X3": (F(3, 5), F(0)),
        "Y1": (F(1, 2), F(0)),
        "Y2": (F(1, 2), F(0)),
        "Y3": (F(0), F(0)),
    }
    cand = write_doc(
        tmp_path / "c.json",
        "candidate",
        EquilibriumCandidate(PriceVector((F(1, 2), F(1, 2))), profile),
    )
    assert main(["extract", str(built), cand]) == 0
    pair = parse_instance(capsys.readouterr().out).payload
    assert pair == MixedStrategyPair(
        (F(1, 4), F(0), F(3, 4)), (F(1, 2), F(1, 2), F(0))
    )


def test_cli_extract_needs_roles(tmp_path, swap_market):
    market = write_doc(tmp_path / "m.json", "market", swap_market)
    cand = tmp_path / "c.json"
    cand.write_text(CANDIDATE_TEXT)
    assert main(["extract", market, str(cand)]) == 2


def test_cli_reduce_parameters_and_shape_are_separate(tmp_path, capsys):
    game = write_doc(tmp_path / "g.json", "game", SMALL_GAME)
    assert main(["reduce", game, "--planar-defaults"]) == 0
    market = parse_instance(capsys.readouterr().out).payload
    assert market.good_count == 2
    assert market.trader("X1").endowment == (F(1, 3**9), F(1, 3**9))

    assert main(["reduce", game, "--four-goods"]) == 0
    market = parse_instance(capsys.readouterr().out).payload
    assert market.good_count == 4
    assert market.trader("X1").endowment == (F(1, 27),) * 4

    assert main(["reduce", game, "--planar-defaults", "--four-goods"]) == 0
    market = parse_instance(capsys.readouterr().out).payload
    assert market.good_count == 4
    assert market.trader("X1").endowment == (F(1, 3**9),) * 4


def test_cli_games(tmp_path, capsys):
    assert main(["gen-game", "--n", "4", "--seed", "3"]) == 0
    doc = parse_instance(capsys.readouterr().out)
    assert doc.payload == gen_sparse_game(4, 3)

    game = write_doc(tmp_path / "g.json", "game", PENNIES)
    assert main(["nash-oracle", game]) == 0
    out = capsys.readouterr().out
    half = (F(1, 2), F(1, 2))
    assert parse_instance(out).payload == MixedStrategyPair(half, half)

    strategies = tmp_path / "s.json"
    strategies.write_text(out)
    assert main(["verify-wsne", game, str(strategies)]) == 0
    pure = write_doc(
        tmp_path / "p.json",
        "strategies",
        MixedStrategyPair((F(1), F(0)), (F(1), F(0))),
    )
    assert main(["verify-wsne", game, pure, "--eps", "1"]) == 1
    assert main(["verify-wsne", game, pure, "--eps", "2"]) == 0


def test_cli_lift(tmp_path, capsys):
    spec = SeparablePLMSpec(
        1,
        (PLMTrader("T", (F(1),), (PLMPiece(F(1, 2), F(1, 4), F(1, 81)),)),),
    )
    path = write_doc(tmp_path / "p.json", "plm-spec", spec)
    assert main(["lift", path]) == 0
    doc = parse_instance(capsys.readouterr().out)
    assert doc.payload.ids == ["T*", "T*1"]
    assert doc.roles == {"T*": "lift:T:1", "T*1": "companion:T:1"}
    assert main(["lift", path, "--n", "2"]) == 0


@pytest.mark.parametrize(
    "extra, expected",
    [
        (["--boundary", "1/8", "0"], 0),
        (["--boundary", "0", "0"], 0),
        (["--boundary", "1/12", "1/20", "--max-iter", "3"], 1),
    ],
)
def test_cli_gadget(capsys, extra, expected):
    args = ["gadget", "--alpha", "1/16", "--scale", "1/8"]
    assert main(args + extra) == expected
    doc = parse_instance(capsys.readouterr().out)
    assert doc.roles["S"] == "gadget:S"


def test_cli_gadget_rejects_unaffordable_boundary(capsys):
    args = ["gadget", "--alpha", "1/16", "--scale", "1/8"]
    args += ["--boundary", "1/2", "0"]
    assert main(args) == 2
    assert capsys.readouterr().out == ""


def test_cli_phi_iterate(tmp_path, capsys, swap_market):
    market = write_doc(tmp_path / "m.json", "market", swap_market)
    trace = tmp_path / "trace.csv"
    args = ["phi-iterate", market, "--steps", "8", "--trace", str(trace)]
    assert main(args) == 0
    cand = parse_instance(capsys.readouterr().out).payload
    assert verify_candidate(swap_market, cand, F(1, 10)).verdict
    frame = pd.read_csv(trace)
    assert list(frame["step"]) == list(range(9))
