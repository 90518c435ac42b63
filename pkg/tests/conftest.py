import itertools

import numpy as np
import pytest

from diffrl.tensornet import AffineLayer, ContinuousMean, Discrete, Network, Relu


def random_net(rng, n_in, hidden, n_out, continuous=False, nonneg=False, scale=1.0):
    """Dense ReLU network with the given hidden widths."""
    widths = [n_in] + list(hidden) + [n_out]
    layers = []
    for k, (a, b) in enumerate(zip(widths, widths[1:])):
        w = rng.normal(0, scale, size=(b, a))
        bias = rng.normal(0, 0.5 * scale, size=b)
        if nonneg:
            w = np.abs(w)
        layers.append(AffineLayer(w, bias))
        if k < len(widths) - 2:
            layers.append(Relu())
    dec = ContinuousMean(0, 0.5) if continuous else Discrete(tuple(float(i) for i in range(n_out)))
    return Network("rand", n_in, tuple(layers), dec)


def reference_forward(net, x):
    """Loop-based forward pass used as an oracle for the vectorised one."""
    v = [float(t) for t in x]
    for layer in net.layers:
        if isinstance(layer, Relu):
            v = [max(t, 0.0) for t in v]
            continue
        if isinstance(layer, AffineLayer):
            parts = [(0, len(v), layer)]
        else:
            parts = [(s.offset, s.length, s.affine) for s in layer.segments]
        out = []
        for off, length, aff in parts:
            seg = v[off:off + length]
            for i in range(aff.weights.shape[0]):
                acc = float(aff.bias[i])
                for j, t in enumerate(seg):
                    acc += float(aff.weights[i, j]) * t
                out.append(acc)
        v = out
    return np.array(v)


def grid_points(lo, hi, per_dim):
    axes = [np.linspace(a, b, per_dim) if b > a else np.array([a]) for a, b in zip(lo, hi)]
    return np.array(list(itertools.product(*axes)))


def grid_witnesses(query, per_dim=15):
    """Grid points of the query box that satisfy every query constraint exactly."""
    from diffrl.babverify import _Objective
    lo, hi = query.input_box()
    z = grid_points(lo, hi, per_dim)
    g = _Objective(query)(z)
    return z[g >= 0]


def steep_net():
    """Two inputs, three actions, steep boundaries near x0 = 0.5: easy robustness violations."""
    w1 = np.array([[20.0, 0.0], [-20.0, 0.0], [0.0, 1.0]])
    b1 = np.array([-10.0, 10.0, 0.0])
    w2 = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.1], [1.0, 0.0, 0.0]])
    return Network("steep", 2, (AffineLayer(w1, b1), Relu(), AffineLayer(w2, np.zeros(3))),
                   Discrete((0.0, 1.0, 2.0)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
