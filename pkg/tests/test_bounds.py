import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffrl.bounds import (
    QueryBounder, ReluState, backward_linear_bounds, interval_bounds, output_bounds,
    propagate_linear, relu_relaxation, stable_relu_mask, tighten_with_output_constraints,
)
from diffrl.encoder import flatten_coupled, generate_queries
from diffrl.propspec import Box, make_monotonicity, make_robustness
from diffrl.tensornet import AffineLayer, Discrete, Network, Relu, forward_batch
from diffrl.zoo import ZooSpec, build

from conftest import grid_witnesses, random_net


def test_interval_examples():
    net = Network("r", 1, (AffineLayer([[1.0]], [0.0]), Relu(), AffineLayer([[1.0]], [0.0])),
                  Discrete((0.0,)))
    b = interval_bounds(net, Box([-1.0], [2.0]))
    assert (b[1].lo[0], b[1].hi[0]) == (0.0, 2.0)
    aff = Network("a", 2, (AffineLayer([[1.0, -1.0]], [0.0]),), Discrete((0.0,)))
    b = interval_bounds(aff, Box.uniform(2, 0, 1))
    assert (b[0].lo[0], b[0].hi[0]) == (-1.0, 1.0)
    with pytest.raises(ValueError):
        interval_bounds(aff, Box.uniform(3, 0, 1))


def test_affine_network_is_exact(rng):
    w1, w2 = rng.normal(size=(3, 2)), rng.normal(size=(2, 3))
    net = Network("a", 2, (AffineLayer(w1, np.zeros(3)), AffineLayer(w2, [0.5, -0.5])), Discrete((0.0, 1.0)))
    lo, hi = np.array([-1.0, 0.0]), np.array([0.5, 2.0])
    lb = backward_linear_bounds(net, (lo, hi))
    np.testing.assert_allclose(lb.lower_coeffs, w2 @ w1, atol=1e-12)
    np.testing.assert_allclose(lb.upper_coeffs, w2 @ w1, atol=1e-12)
    W = w2 @ w1
    exact_hi = np.where(W > 0, W * hi, W * lo).sum(1) + [0.5, -0.5]
    exact_lo = np.where(W > 0, W * lo, W * hi).sum(1) + [0.5, -0.5]
    olo, ohi = output_bounds(net, (lo, hi))
    np.testing.assert_allclose(olo, exact_lo, atol=1e-12)
    np.testing.assert_allclose(ohi, exact_hi, atol=1e-12)


def test_triangle_relaxation():
    r = relu_relaxation(-1.0, 1.0)
    assert r["upper_slope"] == 0.5 and r["upper_offset"] == 0.5
    assert r["lower_slope"] == 1.0  # u >= -l: identity has the smaller area
    assert relu_relaxation(-2.0, 1.0)["lower_slope"] == 0.0
    assert relu_relaxation(0.5, 2.0) == {"upper_slope": 1.0, "upper_offset": 0.0,
                                         "lower_slope": 1.0, "lower_offset": 0.0}
    assert relu_relaxation(-3.0, -1.0)["upper_slope"] == 0.0
    # pointwise check on a grid
    for l, u in ((-1.0, 1.0), (-0.3, 2.0), (-4.0, 0.5)):
        r = relu_relaxation(l, u)
        z = np.linspace(l, u, 1001)
        assert np.all(r["lower_slope"] * z <= np.maximum(z, 0) + 1e-15)
        assert np.all(np.maximum(z, 0) <= r["upper_slope"] * z + r["upper_offset"] + 1e-12)


def test_relu_states():
    net = Network("s", 1, (AffineLayer([[1.0], [1.0], [1.0]], [0.0, -6.0, -1.0]), Relu(),
                           AffineLayer(np.ones((1, 3)), [0.0])), Discrete((0.0,)))
    states = stable_relu_mask(net, Box([0.2], [3.0]))[0]
    assert list(states) == [ReluState.ACTIVE, ReluState.INACTIVE, ReluState.UNSTABLE]


def _sound(net, lo, hi, samples, rng):
    xs = rng.uniform(lo, hi, size=(samples, lo.shape[0]))
    ys = forward_batch(net, xs)
    olo, ohi = output_bounds(net, (lo, hi))
    slack = 1e-9 * (1 + np.abs(ys))
    assert np.all(ys >= olo - slack) and np.all(ys <= ohi + slack)
    lb = backward_linear_bounds(net, (lo, hi))
    assert np.all(ys >= xs @ lb.lower_coeffs.T + lb.lower_offset - slack)
    assert np.all(ys <= xs @ lb.upper_coeffs.T + lb.upper_offset + slack)
    layers = interval_bounds(net, (lo, hi))
    assert np.all(ys >= layers[-1].lo - slack) and np.all(ys <= layers[-1].hi + slack)
    # never looser than pure intervals
    assert np.all(olo >= layers[-1].lo - 1e-12) and np.all(ohi <= layers[-1].hi + 1e-12)


def test_sampling_soundness_random_nets(rng):
    for _ in range(30):
        n = int(rng.integers(1, 5))
        net = random_net(rng, n, [int(rng.integers(2, 9)) for _ in range(int(rng.integers(1, 4)))],
                         int(rng.integers(1, 4)))
        lo = rng.uniform(-1, 1, n)
        hi = lo + rng.uniform(0, 1, n)
        _sound(net, lo, hi, 10_000, rng)


def test_sampling_soundness_split_network(rng):
    net = build(ZooSpec("pensieve", hidden=8, seed=2))
    lo = np.zeros(25)
    hi = np.ones(25)
    lo[19:] = 1.0
    _sound(net, lo, hi, 100_000, rng)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
def test_hypothesis_soundness(seed, a, w):
    r = np.random.default_rng(seed)
    net = random_net(r, 2, [5, 4], 3)
    lo = np.array([a - 0.5, -a])
    _sound(net, lo, lo + w, 2000, r)


def test_degenerate_box_is_exact(rng):
    net = random_net(rng, 3, [6, 6], 2)
    x = rng.normal(size=3)
    olo, ohi = output_bounds(net, (x, x))
    y = forward_batch(net, x[None])[0]
    np.testing.assert_allclose(olo, y, atol=1e-12)
    np.testing.assert_allclose(ohi, y, atol=1e-12)


def test_propagate_linear():
    lo, hi = np.zeros((1, 2)), np.ones((1, 2))
    A = np.array([[1.0, 1.0]])
    nlo, nhi, empty = propagate_linear(A, np.array([1.5]), lo, hi)
    assert not empty[0]
    np.testing.assert_allclose(nlo[0], [0.5, 0.5], atol=1e-9)
    _, _, empty = propagate_linear(A, np.array([2.5]), lo, hi)
    assert empty[0]
    # sound: every feasible sample stays inside the shrunken box
    rng = np.random.default_rng(0)
    for _ in range(50):
        A = rng.normal(size=(3, 4))
        b = rng.normal(size=3) - 1
        lo, hi = -np.ones((1, 4)), np.ones((1, 4))
        nlo, nhi, empty = propagate_linear(A, b, lo, hi)
        z = rng.uniform(-1, 1, size=(20_000, 4))
        feas = z[np.all(z @ A.T >= b, axis=1)]
        if feas.size:
            assert not empty[0]
            assert np.all(feas >= nlo[0] - 1e-12) and np.all(feas <= nhi[0] + 1e-12)


def _queries(rng, n_nets=40):
    for _ in range(n_nets):
        net = random_net(rng, 2, [6], 3, scale=2.0)
        dom = Box(rng.uniform(-1, 0, 2), rng.uniform(0, 1, 2))
        for p in (make_robustness(dom, 0.2, 1), make_monotonicity(dom, [0], 1, 0.2, 1)):
            yield from generate_queries(net, p)


def test_tightening_never_contradicts_grid(rng):
    checked = 0
    for q in _queries(rng):
        wit = grid_witnesses(q, per_dim=9)
        res = tighten_with_output_constraints(q)
        if wit.size:
            checked += 1
            assert not res.infeasible, q.id
            assert np.all(wit >= res.lo - 1e-9) and np.all(wit <= res.hi + 1e-9)
            n = q.n
            y = np.concatenate([forward_batch(q.net, wit[:, :n]), forward_batch(q.net, wit[:, :n] + wit[:, n:])], 1)
            assert np.all(y >= res.out_lo - 1e-9) and np.all(y <= res.out_hi + 1e-9)
    assert checked > 10


def test_tightening_never_widens(rng):
    for q in list(_queries(rng, 10)):
        lo, hi = q.input_box()
        res = tighten_with_output_constraints(q)
        if res.infeasible:
            continue
        assert np.all(res.lo >= lo) and np.all(res.hi <= hi)
        plain_lo, plain_hi = output_bounds(flatten_coupled(q.system), (lo, hi))
        assert np.all(res.out_lo >= plain_lo - 1e-9) and np.all(res.out_hi <= plain_hi + 1e-9)


def test_constant_network_is_pruned_at_root():
    net = Network("c", 2, (AffineLayer(np.zeros((3, 2)), [0.0, 1.0, 0.5]),), Discrete((0.0, 1.0, 2.0)))
    p = make_robustness(Box.uniform(2, 0, 1), 0.1, 1)
    for q in generate_queries(net, p):
        assert tighten_with_output_constraints(q).infeasible


def test_batched_bounder_matches_single(rng):
    q = next(iter(_queries(rng, 1)))
    qb = QueryBounder(q)
    lo, hi = q.input_box()
    mids = lo + 0.5 * (hi - lo)
    los = np.stack([lo, mids])
    his = np.stack([mids, hi])
    batch = qb.bound(los, his)
    for i in range(2):
        single = qb.bound(los[i:i + 1], his[i:i + 1])
        assert batch.infeasible[i] == single.infeasible[0]
        np.testing.assert_allclose(batch.row_upper[i], single.row_upper[0], atol=1e-12)
