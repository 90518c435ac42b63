import json

import numpy as np
import pytest

from diffrl.babverify import (
    SAFE, TIMEOUT, UNKNOWN, UNSAFE, Budget, Counterexample, Verdict, falsify,
    verify_query,
)
from diffrl.encoder import generate_queries
from diffrl.orchestrator import (
    ENGINE_ERROR, NO_RESULT, UNCERTIFIED, Conflict, EngineContract, ExternalEngine, NativeEngine,
    QueryOutcome, ResultFormatError, StructuralError, aggregate_property, certify_counterexample,
    certify_exported, dispatch, export_query, import_result, load_counterexample,
    load_exported_query, merge_engine_verdicts, parse_engines, report_csv, report_dict,
    verify_property, write_result,
)
from diffrl.propspec import VALUES, Box, make_robustness
from diffrl.tensornet import AffineLayer, Discrete, Network, Relu, forward, load_network
from diffrl.zoo import ZooSpec, build, preset_properties

from conftest import random_net


def cex_verdict(engine="a"):
    cex = Counterexample(np.zeros(1), np.zeros(1), np.zeros(2), np.zeros(2), "q", (0, 1))
    return Verdict(UNSAFE, counterexample=cex, engine=engine)


class AlwaysTimeout(EngineContract):
    name = "slow"

    def verify(self, query, budget, seed=0):
        return Verdict(UNKNOWN, TIMEOUT, engine=self.name)


class Crashing(EngineContract):
    name = "crashy"

    def verify(self, query, budget, seed=0):
        raise RuntimeError("segfault in solver")


class Liar(EngineContract):
    """Claims every query is unsafe with a made-up point."""
    name = "liar"

    def verify(self, query, budget, seed=0):
        n = query.n
        cex = Counterexample(np.full(n, 99.0), np.zeros(n), np.zeros(1), np.zeros(1), query.id)
        return Verdict(UNSAFE, counterexample=cex, engine=self.name)


# -- merge / aggregate truth tables ---------------------------------------------

@pytest.mark.parametrize("statuses,expected", [
    ((SAFE, UNKNOWN), SAFE),
    ((UNKNOWN, SAFE), SAFE),
    ((UNKNOWN, UNSAFE), UNSAFE),
    ((UNSAFE, UNKNOWN), UNSAFE),
    ((UNKNOWN, UNKNOWN), UNKNOWN),
    ((SAFE,), SAFE),
    ((SAFE, SAFE), SAFE),
    ((UNSAFE, UNSAFE), UNSAFE),
])
def test_merge_truth_table(statuses, expected):
    vs = [cex_verdict(f"e{i}") if s == UNSAFE else Verdict(s, engine=f"e{i}") for i, s in enumerate(statuses)]
    assert merge_engine_verdicts(vs).status == expected


def test_merge_keeps_first_counterexample():
    a, b = cex_verdict("a"), cex_verdict("b")
    assert merge_engine_verdicts([Verdict(UNKNOWN), a, b]).engine == "a"


def test_merge_conflict():
    with pytest.raises(Conflict) as err:
        merge_engine_verdicts([Verdict(SAFE, engine="x"), cex_verdict("y")], "q7")
    d = err.value.to_dict()
    assert d["query_id"] == "q7" and d["safe"]["engine"] == "x" and "counterexample" in d["unsafe"]
    with pytest.raises(ValueError):
        merge_engine_verdicts([])


def outcomes(statuses):
    out = []
    for i, s in enumerate(statuses):
        v = cex_verdict() if s == UNSAFE else Verdict(s)
        out.append(QueryOutcome(f"q{i}", [v], v))
    return out


@pytest.mark.parametrize("statuses,agg,counts", [
    ([SAFE] * 6, "safe", (6, 0, 0)),
    ([SAFE] * 104 + [UNSAFE], "violated", (104, 1, 0)),
    ([SAFE, UNKNOWN, SAFE], "unknown", (2, 0, 1)),
    ([UNKNOWN, UNSAFE, SAFE], "violated", (1, 1, 1)),
    ([], "safe", (0, 0, 0)),
])
def test_aggregate_truth_table(statuses, agg, counts):
    r = aggregate_property("p", 100, outcomes(statuses), [f"q{i}" for i in range(len(statuses))])
    assert r.aggregate == agg and r.counts == counts
    assert sum(r.counts) == len(statuses)
    assert len(r.counterexamples) == counts[1]


def test_aggregate_structural_errors():
    with pytest.raises(StructuralError):
        aggregate_property("p", 100, outcomes([SAFE]), ["q0", "q1"])
    with pytest.raises(StructuralError):
        aggregate_property("p", 100, outcomes([SAFE, SAFE]), ["q0"])


def test_adding_engines_is_monotone(rng):
    # once a query is decided, extra Unknown engines never flip it
    for s in (SAFE, UNSAFE):
        base = [cex_verdict() if s == UNSAFE else Verdict(s)]
        for extra in range(3):
            assert merge_engine_verdicts(base + [Verdict(UNKNOWN)] * extra).status == s


# -- dispatch ---------------------------------------------------------------------

def pensieve_queries(cov=100):
    spec = ZooSpec("pensieve", hidden=4, seed=1)
    net = build(spec)
    return net, generate_queries(net, preset_properties(spec, coverage_pct=cov)[0])


def test_dispatch_shapes_and_errors():
    _, qs = pensieve_queries()
    assert len(qs) == 6
    table = dispatch(qs, [NativeEngine()], Budget(60, 200))
    assert len(table) == 6 and all(len(r) == 1 and isinstance(r[0], Verdict) for r in table)
    with pytest.raises(ValueError):
        dispatch(qs, [])


def test_dispatch_timeouts_and_crashes():
    _, qs = pensieve_queries()
    table = dispatch(qs, [AlwaysTimeout(), Crashing(), NativeEngine()], Budget(60, 100))
    for row in table:
        assert (row[0].status, row[0].reason) == (UNKNOWN, TIMEOUT)
        assert (row[1].status, row[1].reason) == (UNKNOWN, ENGINE_ERROR)
        assert "segfault" in row[1].notes[0]
        assert row[2].engine == "native"


def test_dispatch_demotes_uncertified_claims():
    _, qs = pensieve_queries()
    table = dispatch(qs[:2], [Liar()], Budget(60, 10))
    for row in table:
        assert (row[0].status, row[0].reason) == (UNKNOWN, UNCERTIFIED)
        assert "above upper bound" in row[0].notes[-1]


def test_dispatch_parallel_matches_sequential(monkeypatch):
    _, qs = pensieve_queries(60)
    seq = dispatch(qs, [NativeEngine()], Budget(60, 300), workers=1, seed=5)
    monkeypatch.setenv("DIFFRL_THREADS", "2")
    par = dispatch(qs, [NativeEngine()], Budget(60, 300), workers=2, seed=5)
    assert [r[0].to_dict(timing=False) for r in seq] == [r[0].to_dict(timing=False) for r in par]


def test_parse_engines(tmp_path):
    es = parse_engines(f"native,external:{tmp_path}")
    assert [e.capability for e in es] == ["native", "external-export"]
    with pytest.raises(ValueError):
        parse_engines("gurobi")
    with pytest.raises(ValueError):
        parse_engines("")


# -- certification -----------------------------------------------------------------

def robust_queries(rng, eps=0.3):
    net = random_net(rng, 2, [8], 3, scale=3.0)
    return net, generate_queries(net, make_robustness(Box.uniform(2, 0, 1), eps, 1))


def test_falsified_point_is_accepted(rng):
    found = 0
    for _ in range(10):
        net, qs = robust_queries(rng)
        for q in qs:
            cex = falsify(q, 2000, 30, seed=1)
            if cex is not None:
                found += 1
                assert certify_counterexample(net, q, cex).accepted
    assert found > 0


def test_out_of_box_point_is_rejected(rng):
    net, qs = robust_queries(rng)
    q = qs[0]
    cex = Counterexample(np.array([1.001, 0.5]), np.zeros(2), np.zeros(3), np.zeros(3), q.id)
    c = certify_counterexample(net, q, cex, tol=1e-6)
    assert not c.accepted and "x[0]" in c.diagnostic and "upper bound" in c.diagnostic


def cmars_step_net(t=0.5):
    """CMARS-shaped (19 inputs, two FC(32)+ReLU, 30 actions) net that jumps from 3 to 29 units at x0 = t."""
    w1 = np.zeros((32, 19))
    w1[0, 0] = 1e4
    b1 = np.zeros(32)
    b1[0] = -1e4 * t
    w2 = np.eye(32)
    w3 = np.zeros((30, 32))
    w3[29, 0] = 1.0
    b3 = np.full(30, -1.0)
    b3[3] = 1.0
    return Network("cmars_step", 19, (AffineLayer(w1, b1), Relu(), AffineLayer(w2, np.zeros(32)), Relu(),
                                      AffineLayer(w3, b3)), Discrete(tuple(float(i) for i in range(30))))


def test_cmars_large_shift_fixture():
    net = cmars_step_net()
    p = make_robustness(Box.uniform(19, 0, 1), 0.001, 16, units=VALUES)
    q = next(q for q in generate_queries(net, p) if (q.pair.i1, q.pair.i2) == (3, 29))
    x = np.full(19, 0.2)
    x[0] = 0.4995
    s = np.zeros(19)
    s[0] = 0.001
    l1, l2 = forward(net, x), forward(net, x + s)
    assert int(np.argmax(l1)) == 3 and int(np.argmax(l2)) == 29
    cex = Counterexample(x, s, l1, l2, q.id, (3, 29))
    assert certify_counterexample(net, q, cex).accepted
    s_small = s * 0.2  # x + s stays below the step, so the pair is not reproduced
    bad = Counterexample(x, s_small, l1, l2, q.id, (3, 29))
    c = certify_counterexample(net, q, bad)
    assert not c.accepted and "copy 2" in c.diagnostic
    v = verify_query(q, Budget(60, 5000))
    assert v.status == UNSAFE and certify_counterexample(net, q, v.counterexample).accepted


# -- export / import -------------------------------------------------------------

def test_export_bundle_contents(tmp_path, rng):
    net, qs = robust_queries(rng)
    q = qs[0]
    path = export_query(q, tmp_path)
    lines = path.read_text().splitlines()
    assert lines[0] == "diffq 1"
    assert sum(l.startswith("input ") for l in lines) == 4
    assert sum(l.startswith("lin ") for l in lines) == 4
    eq = load_exported_query(path)
    flat = load_network(eq.net_path)
    assert flat.input_width == 4 and flat.output_width == 6
    lo, hi = q.input_box()
    np.testing.assert_array_equal(eq.lo, lo)
    np.testing.assert_array_equal(eq.out_rows, q.output_rows)


def test_result_files(tmp_path, rng):
    net, qs = robust_queries(rng)
    q = qs[0]
    (tmp_path / "u").write_text("unsat\n")
    assert import_result(tmp_path / "u", q).status == SAFE
    (tmp_path / "t").write_text("timeout\n")
    v = import_result(tmp_path / "t", q)
    assert (v.status, v.reason) == (UNKNOWN, TIMEOUT)
    (tmp_path / "s").write_text("sat\nx 0 5.0\nx 1 0.5\nx 2 0\nx 3 0\n")
    v = import_result(tmp_path / "s", q)
    assert (v.status, v.reason) == (UNKNOWN, UNCERTIFIED)
    for bad in ("", "maybe\n", "sat\nx 0 1\n x 2 1\n", "sat\ny 0 1\n", "unsat\nx 0 1\n", "sat\nx 0 1\n"):
        (tmp_path / "b").write_text(bad)
        with pytest.raises(ResultFormatError):
            import_result(tmp_path / "b", q)


def test_round_trip_reproduces_verdicts(tmp_path, rng):
    seen = set()
    for _ in range(6):
        net, qs = robust_queries(rng, eps=0.2)
        for q in qs:
            v = verify_query(q, Budget(60, 3000))
            path = export_query(q, tmp_path)
            write_result(v, path.with_suffix(".result"))
            back = import_result(path.with_suffix(".result"), q)
            assert back.status == v.status
            seen.add(v.status)
            if v.status == UNSAFE:
                z = np.concatenate([v.counterexample.x, v.counterexample.s])
                assert certify_exported(net, load_exported_query(path), z).accepted
    assert {SAFE, UNSAFE} <= seen


def test_external_engine(tmp_path, rng):
    net, qs = robust_queries(rng)
    q = qs[0]
    ext = ExternalEngine(str(tmp_path))
    v = ext.verify(q, Budget())
    assert (v.status, v.reason) == (UNKNOWN, NO_RESULT)
    path = export_query(q, tmp_path)
    path.with_suffix(".result").write_text("unsat\n")
    assert ext.verify(q, Budget()).status == SAFE


def test_load_counterexample_formats(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"x": [0.1, 0.2], "s": [0.0, 0.01]}))
    np.testing.assert_array_equal(load_counterexample(tmp_path / "c.json"), [0.1, 0.2, 0.0, 0.01])
    (tmp_path / "c.result").write_text("sat\nx 0 1\nx 1 2\n")
    np.testing.assert_array_equal(load_counterexample(tmp_path / "c.result"), [1.0, 2.0])


# -- reports -------------------------------------------------------------------------

def test_report_and_csv():
    spec = ZooSpec("pensieve", hidden=4, seed=1)
    net = build(spec)
    prop = preset_properties(spec, coverage_pct=60)[0]
    res = verify_property(net, prop, [NativeEngine()], Budget(60, 300))
    doc = report_dict(res, "m.json", timing=False)
    assert set(doc) >= {"tool_version", "model", "property", "coverage", "queries", "counts", "aggregate"}
    assert doc["counts"]["total"] == len(doc["queries"]) == 6
    assert doc["counts"]["safe"] + doc["counts"]["unsafe"] + doc["counts"]["unknown"] == 6
    assert all(q["time_s"] == 0.0 for q in doc["queries"])
    again = report_dict(verify_property(net, prop, [NativeEngine()], Budget(60, 300)), "m.json", timing=False)
    assert json.dumps(doc) == json.dumps(again)
    rows = report_csv([doc]).splitlines()
    assert len(rows) == 7 and rows[0].startswith("property,coverage,query_id")
