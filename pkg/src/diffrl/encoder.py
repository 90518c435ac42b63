"""Two-copy encoding of a property and its exact decomposition into feasibility queries."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .propspec import (
    LEVELS, Box, ComparisonSpec, LinearInputConstraint, PropertyError, PropertySpec,
    apply_coverage, clamp_constraints,
)
from .tensornet import (
    AffineLayer, Discrete, Network, Relu, Segment, SplitEmbedConcat, forward,
)


@dataclass(frozen=True)
class InvalidPair:
    i1: int
    i2: int

    def label(self) -> str:
        return f"{self.i1}-{self.i2}"


@dataclass(frozen=True, eq=False)
class CoupledSystem:
    """Copy 1 reads ``x``; copy 2 reads ``x + s``; both share ``net``'s weights."""

    net: Network

    @property
    def n(self) -> int:
        return self.net.input_width

    @property
    def m(self) -> int:
        return self.net.output_width

    def evaluate(self, x, s) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        s = np.asarray(s, dtype=np.float64)
        return forward(self.net, x), forward(self.net, x + s)


@dataclass(frozen=True)
class MeanConstraint:
    """Continuous-mode output condition: copy-1 mean in ``anchor``; copy-2 mean ``relation rhs``."""

    mean_index: int
    anchor: tuple[float, float]
    relation: str
    rhs: float
    direction: str


@dataclass(frozen=True, eq=False)
class Query:
    id: str
    system: CoupledSystem
    x_box: Box
    s_box: Box
    extra: tuple[LinearInputConstraint, ...] = ()
    pair: Optional[InvalidPair] = None
    mean: Optional[MeanConstraint] = None
    metric: str = LEVELS
    property_name: str = ""
    variant: int = 0
    output_rows: np.ndarray = field(init=False, repr=False)
    output_rhs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.system.n
        if len(self.x_box) != n or len(self.s_box) != n:
            raise PropertyError(f"query {self.id}: box widths do not match input width {n}")
        if any(c.width != n for c in self.extra):
            raise PropertyError(f"query {self.id}: constraint width mismatch")
        if (self.pair is None) == (self.mean is None):
            raise PropertyError(f"query {self.id}: need exactly one of pair / mean constraint")
        rows, rhs = _output_constraints(self)
        rows.setflags(write=False)
        rhs.setflags(write=False)
        object.__setattr__(self, "extra", tuple(self.extra))
        object.__setattr__(self, "output_rows", rows)
        object.__setattr__(self, "output_rhs", rhs)

    @property
    def net(self) -> Network:
        return self.system.net

    @property
    def n(self) -> int:
        return self.system.n

    def input_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounds of the stacked (x, s) input of the flattened network."""
        return (np.concatenate([self.x_box.lo, self.s_box.lo]),
                np.concatenate([self.x_box.hi, self.s_box.hi]))

    def input_constraints(self) -> tuple[np.ndarray, np.ndarray]:
        """Extra constraints as ``A z >= b`` over the stacked (x, s) vector."""
        if not self.extra:
            return np.zeros((0, 2 * self.n)), np.zeros(0)
        pairs = [c.as_geq() for c in self.extra]
        return np.stack([a for a, _ in pairs]), np.array([b for _, b in pairs])

    def output_margins(self, y: np.ndarray) -> np.ndarray:
        """``rows . y - rhs`` for flattened outputs ``y`` (1-d or batched 2-d)."""
        return y @ self.output_rows.T - self.output_rhs


def _output_constraints(q: Query) -> tuple[np.ndarray, np.ndarray]:
    m = q.system.m
    rows, rhs = [], []
    if q.pair is not None:
        for copy, target in ((0, q.pair.i1), (1, q.pair.i2)):
            for t in range(m):
                if t == target:
                    continue
                r = np.zeros(2 * m)
                r[copy * m + target] = 1.0
                r[copy * m + t] = -1.0
                rows.append(r)
                rhs.append(0.0)
    else:
        mc = q.mean
        lo, hi = mc.anchor
        k1, k2 = mc.mean_index, m + mc.mean_index
        if np.isfinite(lo):
            r = np.zeros(2 * m)
            r[k1] = 1.0
            rows.append(r)
            rhs.append(lo)
        if np.isfinite(hi):
            r = np.zeros(2 * m)
            r[k1] = -1.0
            rows.append(r)
            rhs.append(-hi)
        r = np.zeros(2 * m)
        r[k2] = 1.0 if mc.relation == ">=" else -1.0
        rows.append(r)
        rhs.append(mc.rhs if mc.relation == ">=" else -mc.rhs)
    if not rows:
        return np.zeros((0, 2 * m)), np.zeros(0)
    return np.array(rows), np.array(rhs, dtype=np.float64)


def action_scale(decoder: Discrete, comparison: ComparisonSpec) -> np.ndarray:
    if comparison.units == LEVELS:
        return np.arange(len(decoder.action_values), dtype=np.float64)
    return np.asarray(decoder.action_values, dtype=np.float64)


def enumerate_invalid_pairs(decoder: Discrete, comparison: ComparisonSpec) -> list[InvalidPair]:
    """All (copy-1 index, copy-2 index) pairs whose actions violate ``comparison``.

    The diagonal is excluded: both copies choosing the same action never counts as a
    violation, even with ``d = 0`` under the at-least rule.
    """
    if not isinstance(decoder, Discrete):
        raise PropertyError("invalid pairs are defined for discrete decoders only")
    a = action_scale(decoder, comparison)
    return [InvalidPair(i, j) for i in range(len(a)) for j in range(len(a))
            if i != j and comparison.violates(a[i], a[j])]


def _variants(prop: PropertySpec):
    if not prop.disjunctions:
        yield ()
        return
    yield from itertools.product(*prop.disjunctions)


def generate_queries(net: Network, prop: PropertySpec) -> list[Query]:
    prop.check_width(net.input_width)
    if prop.is_continuous == net.is_discrete:
        raise PropertyError(
            f"property {prop.name!r} is {'continuous' if prop.is_continuous else 'discrete'} "
            f"but network {net.name!r} has a {type(net.decoder).__name__} decoder")
    system = CoupledSystem(net)
    if not (np.any(prop.slack.lo) or np.any(prop.slack.hi)):
        # both copies read the same input and decode the same action (lowest index on
        # ties), so nothing can be violated; the non-strict argmax encoding would
        # otherwise admit points on tie surfaces
        return []
    x_box = apply_coverage(prop.domain, prop.coverage_pct)
    base = list(prop.extra_constraints)
    if prop.clamp_perturbed:
        base += clamp_constraints(x_box)
    queries = []
    variants = list(_variants(prop))
    if prop.comparison is not None:
        pairs = enumerate_invalid_pairs(net.decoder, prop.comparison)
        for pair in pairs:
            for v, extra in enumerate(variants):
                queries.append(Query(f"{prop.name}/{pair.label()}/v{v}", system, x_box, prop.slack,
                                     tuple(base) + tuple(extra), pair=pair,
                                     metric=prop.comparison.units, property_name=prop.name,
                                     variant=v))
    else:
        idx = net.decoder.mean_index
        for direction in prop.anchor.directions:
            anchor, rel, rhs = prop.anchor.bounds_for(direction)
            mc = MeanConstraint(idx, anchor, rel, rhs, direction)
            for v, extra in enumerate(variants):
                queries.append(Query(f"{prop.name}/{direction}/v{v}", system, x_box, prop.slack,
                                     tuple(base) + tuple(extra), mean=mc, metric="mean",
                                     property_name=prop.name, variant=v))
    return queries


def flatten_coupled(system: CoupledSystem) -> Network:
    """One network over the stacked input (x, s) whose outputs are [copy-1 logits; copy-2 logits]."""
    net = system.net
    n = net.input_width
    eye = np.eye(n)
    lift = AffineLayer(np.block([[eye, np.zeros((n, n))], [eye, eye]]), np.zeros(2 * n))
    layers: list = [lift]
    width = n
    for layer in net.layers:
        if isinstance(layer, Relu):
            layers.append(Relu())
        elif isinstance(layer, AffineLayer):
            layers.append(SplitEmbedConcat((Segment(0, width, layer), Segment(width, width, layer))))
        else:
            segs = list(layer.segments) + [Segment(width + s.offset, s.length, s.affine)
                                            for s in layer.segments]
            layers.append(SplitEmbedConcat(tuple(segs)))
        if not isinstance(layer, Relu):
            width = layer.out_width
    # final layer must be affine for a valid Network; append an exact identity
    out = 2 * net.output_width
    layers.append(AffineLayer(np.eye(out), np.zeros(out)))
    return Network(f"{net.name}__coupled", 2 * n, tuple(layers),
                   Discrete(tuple(range(out))))


CERT_TOL = 1e-9


def replay_check(net: Network, query: Query, x, s, tol: float = CERT_TOL
                 ) -> tuple[bool, str, np.ndarray, np.ndarray]:
    """Concrete replay of a candidate (x, s) through both copies of ``net``.

    Returns (accepted, diagnostic, copy-1 logits, copy-2 logits). The diagnostic names
    the first failed check, or is empty on acceptance.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    empty = np.zeros(0)
    n = query.n
    if x.shape != (n,) or s.shape != (n,):
        return False, f"point has widths {x.shape[0]}/{s.shape[0]}, expected {n}", empty, empty
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(s))):
        return False, "point has non-finite entries", empty, empty
    for name, v, box in (("x", x, query.x_box), ("s", s, query.s_box)):
        below = np.flatnonzero(v < box.lo - tol)
        above = np.flatnonzero(v > box.hi + tol)
        if below.size:
            k = below[0]
            return False, f"{name}[{k}]={v[k]!r} below lower bound {box.lo[k]!r}", empty, empty
        if above.size:
            k = above[0]
            return False, f"{name}[{k}]={v[k]!r} above upper bound {box.hi[k]!r}", empty, empty
    for j, c in enumerate(query.extra):
        val = c.slack_value(x, s)
        if val < -tol:
            return False, f"input constraint {j} violated by {-val:.3g}", empty, empty
    l1, l2 = forward(net, x), forward(net, x + s)
    if query.pair is not None:
        for copy, logits, target in ((1, l1, query.pair.i1), (2, l2, query.pair.i2)):
            top = float(np.max(logits))
            if logits[target] < top - tol:
                return (False, f"copy {copy}: logit {target} is {top - logits[target]:.3g} "
                               f"below the maximum (argmax {int(np.argmax(logits))})", l1, l2)
    else:
        mc = query.mean
        k = mc.mean_index
        lo, hi = mc.anchor
        if l1[k] < lo - tol or l1[k] > hi + tol:
            return False, f"copy 1 mean {l1[k]!r} outside anchor [{lo}, {hi}]", l1, l2
        ok = l2[k] <= mc.rhs + tol if mc.relation == "<=" else l2[k] >= mc.rhs - tol
        if not ok:
            return False, f"copy 2 mean {l2[k]!r} fails {mc.relation} {mc.rhs}", l1, l2
    return True, "", l1, l2
