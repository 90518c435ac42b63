"""Sound output bounds over input boxes: interval propagation and backward linear bounds.

Everything here works on a batch of boxes at once; ``lo``/``hi`` arrays carry a leading
batch axis internally. The public single-box helpers wrap the batched core.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .propspec import Box
from .tensornet import Network, Relu, SplitEmbedConcat

# relative slack applied when a bound is derived by division / cancellation
_REL = 1e-12


class ReluState(enum.IntEnum):
    INACTIVE = -1
    UNSTABLE = 0
    ACTIVE = 1


@dataclass(frozen=True)
class BoxBounds:
    lo: np.ndarray
    hi: np.ndarray
    layer_index: int

    @property
    def per_neuron(self):
        return list(zip(self.lo.tolist(), self.hi.tolist()))


@dataclass(frozen=True)
class LinearBound:
    """``lower_coeffs @ z + lower_offset <= out(z) <= upper_coeffs @ z + upper_offset``."""

    lower_coeffs: np.ndarray
    lower_offset: np.ndarray
    upper_coeffs: np.ndarray
    upper_offset: np.ndarray

    def concretize(self, lo, hi) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(lo, float)
        hi = np.asarray(hi, float)
        return (_min_affine(self.lower_coeffs, self.lower_offset, lo, hi),
                _max_affine(self.upper_coeffs, self.upper_offset, lo, hi))


def _max_affine(a, c, lo, hi):
    """max over the box of ``a @ z + c`` (broadcast over leading axes)."""
    return (np.maximum(a, 0) * hi[..., None, :]).sum(-1) + \
        (np.minimum(a, 0) * lo[..., None, :]).sum(-1) + c


def _min_affine(a, c, lo, hi):
    return (np.maximum(a, 0) * lo[..., None, :]).sum(-1) + \
        (np.minimum(a, 0) * hi[..., None, :]).sum(-1) + c


class BoundProgram:
    """Dense affine/ReLU program equivalent to a network.

    Split-embed-concat layers become block-diagonal matrices and runs of consecutive
    affine layers are composed into one.
    """

    def __init__(self, net: Network):
        ops: list = []
        for layer in net.layers:
            if isinstance(layer, Relu):
                ops.append(None)
                continue
            aff = layer.dense() if isinstance(layer, SplitEmbedConcat) else layer
            w, b = np.array(aff.weights), np.array(aff.bias)
            if ops and ops[-1] is not None:
                w0, b0 = ops[-1]
                ops[-1] = (w @ w0, w @ b0 + b)
            else:
                ops.append((w, b))
        self.ops = ops
        self.input_width = net.input_width
        self.output_width = net.output_width
        self.relu_positions = [k for k, op in enumerate(ops) if op is None]

    @classmethod
    def of(cls, net: Network) -> "BoundProgram":
        # networks are immutable, so the program is cached on the instance
        prog = net.__dict__.get("_bound_program")
        if prog is None:
            prog = cls(net)
            object.__setattr__(net, "_bound_program", prog)
        return prog

    # -- interval propagation ---------------------------------------------------

    def interval(self, lo: np.ndarray, hi: np.ndarray, pre=None):
        """Per-op interval bounds. Returns list of (lo, hi) after each op.

        ``pre`` optionally supplies tighter pre-activation bounds (one per ReLU) to
        intersect with along the way.
        """
        out = []
        relu_k = 0
        for op in self.ops:
            if op is None:
                if pre is not None:
                    lo = np.maximum(lo, pre[relu_k][0])
                    hi = np.minimum(hi, pre[relu_k][1])
                lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
                relu_k += 1
            else:
                w, b = op
                wp, wn = np.maximum(w, 0), np.minimum(w, 0)
                lo, hi = lo @ wp.T + hi @ wn.T + b, hi @ wp.T + lo @ wn.T + b
            out.append((lo, hi))
        return out

    # -- backward linear propagation -------------------------------------------

    def backward(self, C: np.ndarray, pre: Sequence, end: Optional[int] = None,
                 upper: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Linear envelope of ``C @ (value after op end-1)`` in terms of the input.

        Returns ``(A, c)`` with shapes (B, r, n) and (B, r): an upper envelope when
        ``upper`` is true, else a lower one. ``pre`` holds the (lo, hi) pre-activation
        bounds for every ReLU before ``end``.
        """
        end = len(self.ops) if end is None else end
        B = pre[0][0].shape[0] if pre else None
        lam = C if C.ndim == 3 else C[None]
        const = np.zeros(lam.shape[:2])
        relu_k = sum(1 for p in self.relu_positions if p < end)
        for k in range(end - 1, -1, -1):
            op = self.ops[k]
            if op is None:
                relu_k -= 1
                l, u = pre[relu_k]
                su, iu, sl = _relaxation(l, u)
                pos, neg = np.maximum(lam, 0), np.minimum(lam, 0)
                if upper:
                    const = const + (pos * iu[:, None, :]).sum(-1)
                    lam = pos * su[:, None, :] + neg * sl[:, None, :]
                else:
                    const = const + (neg * iu[:, None, :]).sum(-1)
                    lam = neg * su[:, None, :] + pos * sl[:, None, :]
            else:
                w, b = op
                const = const + lam @ b
                lam = lam @ w
        if B is not None and lam.shape[0] != B:
            lam = np.broadcast_to(lam, (B,) + lam.shape[1:])
            const = np.broadcast_to(const, (B,) + const.shape[1:])
        return lam, const

    def preactivation_bounds(self, lo: np.ndarray, hi: np.ndarray, linear: bool = True):
        """Bounds on every ReLU input, interval bounds intersected with linear ones."""
        pre = []
        ibp_lo, ibp_hi = lo, hi
        prev = 0
        for p in self.relu_positions:
            seg = self.interval_segment(ibp_lo, ibp_hi, prev, p, pre)
            l, u = seg
            if linear and pre:
                # ops before the first ReLU are affine only, so IBP is already exact there
                w, b = self.ops[p - 1]
                h = w.shape[0]
                eye = np.eye(h)
                au, cu = self.backward(eye, pre, end=p, upper=True)
                al, cl = self.backward(eye, pre, end=p, upper=False)
                u = np.minimum(u, _max_affine(au, cu, lo, hi))
                l = np.maximum(l, _min_affine(al, cl, lo, hi))
            # guard against crossing from rounding on near-degenerate boxes
            l, u = np.minimum(l, u), np.maximum(l, u)
            pre.append((l, u))
            ibp_lo, ibp_hi = np.maximum(l, 0.0), np.maximum(u, 0.0)
            prev = p + 1
        return pre

    def interval_segment(self, lo, hi, start, stop, pre):
        for op in self.ops[start:stop]:
            w, b = op
            wp, wn = np.maximum(w, 0), np.minimum(w, 0)
            lo, hi = lo @ wp.T + hi @ wn.T + b, hi @ wp.T + lo @ wn.T + b
        return lo, hi

    def output_envelopes(self, C: np.ndarray, lo: np.ndarray, hi: np.ndarray, pre=None,
                         lower: bool = True):
        """Upper (and optionally lower) envelopes of ``C @ output`` over boxes ``lo/hi``."""
        if pre is None:
            pre = self.preactivation_bounds(lo, hi)
        B = lo.shape[0]
        au, cu = self.backward(C, pre, upper=True)
        au = np.broadcast_to(au, (B,) + au.shape[1:])
        cu = np.broadcast_to(cu, (B,) + cu.shape[1:])
        if not lower:
            return au, cu, None, None, pre
        al, cl = self.backward(C, pre, upper=False)
        al = np.broadcast_to(al, (B,) + al.shape[1:])
        cl = np.broadcast_to(cl, (B,) + cl.shape[1:])
        return au, cu, al, cl, pre


def _relaxation(l, u):
    """Triangle relaxation of ReLU on [l, u].

    Returns (upper slope, upper intercept, lower slope); the lower envelope passes
    through the origin with slope 0 or 1, whichever leaves the smaller area.
    """
    active = l >= 0
    inactive = u <= 0
    unstable = ~(active | inactive)
    denom = np.where(unstable, u - l, 1.0)
    su = np.where(active, 1.0, np.where(unstable, u / denom, 0.0))
    iu = np.where(unstable, -u * l / denom, 0.0)
    sl = np.where(active, 1.0, np.where(unstable, (u >= -l).astype(float), 0.0))
    return su, iu, sl


def relu_relaxation(l: float, u: float) -> dict:
    """Scalar view of the triangle relaxation, for inspection and tests."""
    su, iu, sl = _relaxation(np.array([l], float), np.array([u], float))
    return {"upper_slope": float(su[0]), "upper_offset": float(iu[0]),
            "lower_slope": float(sl[0]), "lower_offset": 0.0}


# -- box helpers --------------------------------------------------------------

BoxLike = Union[Box, tuple]


def _as_box(box: BoxLike, width: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(box, Box):
        lo, hi = box.lo, box.hi
    else:
        lo, hi = (np.asarray(v, dtype=np.float64) for v in box)
    if lo.shape != (width,) or hi.shape != (width,):
        raise ValueError(f"box has width {lo.shape}, network expects {width}")
    return lo[None, :].astype(float), hi[None, :].astype(float)


def interval_bounds(net: Network, box: BoxLike) -> list[BoxBounds]:
    """Interval bounds on every layer's output, layer indices as in ``net.layers``."""
    lo, hi = _as_box(box, net.input_width)
    out = []
    for k, layer in enumerate(net.layers):
        if isinstance(layer, Relu):
            lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
        else:
            aff = layer.dense() if isinstance(layer, SplitEmbedConcat) else layer
            wp, wn = np.maximum(aff.weights, 0), np.minimum(aff.weights, 0)
            lo, hi = lo @ wp.T + hi @ wn.T + aff.bias, hi @ wp.T + lo @ wn.T + aff.bias
        out.append(BoxBounds(lo[0].copy(), hi[0].copy(), k))
    return out


def backward_linear_bounds(net: Network, box: BoxLike, relu_relaxation: str = "triangle"
                           ) -> LinearBound:
    """Affine lower/upper envelopes of every output over ``box``."""
    if relu_relaxation != "triangle":
        raise ValueError(f"unsupported relaxation {relu_relaxation!r}")
    prog = BoundProgram.of(net)
    lo, hi = _as_box(box, net.input_width)
    eye = np.eye(prog.output_width)
    au, cu, al, cl, _ = prog.output_envelopes(eye, lo, hi)
    return LinearBound(al[0].copy(), cl[0].copy(), au[0].copy(), cu[0].copy())


def output_bounds(net: Network, box: BoxLike) -> tuple[np.ndarray, np.ndarray]:
    """Scalar output bounds: linear envelopes concretized and intersected with intervals."""
    prog = BoundProgram.of(net)
    lo, hi = _as_box(box, net.input_width)
    pre = prog.preactivation_bounds(lo, hi)
    ilo, ihi = prog.interval(lo, hi, pre)[-1]
    eye = np.eye(prog.output_width)
    au, cu, al, cl, _ = prog.output_envelopes(eye, lo, hi, pre)
    return (np.maximum(ilo, _min_affine(al, cl, lo, hi))[0],
            np.minimum(ihi, _max_affine(au, cu, lo, hi))[0])


def stable_relu_mask(net: Network, box: BoxLike) -> list[np.ndarray]:
    """ReluState per neuron, one array per ReLU layer of the dense program."""
    prog = BoundProgram.of(net)
    lo, hi = _as_box(box, net.input_width)
    return [relu_states(l[0], u[0]) for l, u in prog.preactivation_bounds(lo, hi)]


def relu_states(l: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.where(l >= 0, ReluState.ACTIVE,
                    np.where(u <= 0, ReluState.INACTIVE, ReluState.UNSTABLE)).astype(int)


# -- constraint propagation -----------------------------------------------------

def propagate_linear(A: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                     tol: float = 0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shrink boxes to the hull of ``{z in box : A z >= b - tol}`` one constraint at a time.

    ``A`` is (B, r, n) or (r, n), ``b`` is (B, r) or (r,). Returns new ``lo``, ``hi`` and
    a (B,) mask of boxes proven empty. Each bound is relaxed outward by a small
    relative amount so rounding can never cut off a point that satisfies the system.
    """
    lo = lo.copy()
    hi = hi.copy()
    B = lo.shape[0]
    A = np.broadcast_to(A, (B,) + A.shape[-2:])
    b = np.broadcast_to(b, (B, A.shape[1]))
    empty = np.zeros(B, dtype=bool)
    for k in range(A.shape[1]):
        a = A[:, k, :]
        terms = np.maximum(a * lo, a * hi)
        total = terms.sum(-1)
        scale = np.abs(terms).sum(-1) + np.abs(b[:, k]) + 1.0
        empty |= total < b[:, k] - tol - _REL * scale
        resid = (b[:, k] - tol)[:, None] - (total[:, None] - terms)
        slackness = (_REL * scale)[:, None]
        significant = np.abs(a) > 1e-12
        safe_a = np.where(significant, a, 1.0)
        bound = resid / safe_a
        bslack = slackness / np.abs(safe_a)
        posm = significant & (a > 0)
        negm = significant & (a < 0)
        lo = np.where(posm, np.maximum(lo, bound - bslack), lo)
        hi = np.where(negm, np.minimum(hi, bound + bslack), hi)
    empty |= np.any(lo > hi, axis=-1)
    hi = np.where(empty[:, None], hi, np.maximum(hi, lo))
    return lo, hi, empty


@dataclass
class TightenResult:
    infeasible: bool
    lo: np.ndarray          # tightened input box (stacked x, s)
    hi: np.ndarray
    out_lo: np.ndarray      # tightened flattened-output bounds
    out_hi: np.ndarray
    row_upper: np.ndarray   # upper bound of each query row minus its rhs


@dataclass
class QueryBoundResult:
    lo: np.ndarray
    hi: np.ndarray
    infeasible: np.ndarray
    row_upper: np.ndarray
    out_lo: Optional[np.ndarray] = None
    out_hi: Optional[np.ndarray] = None
    # |envelope coefficients| of the constraint row closest to pruning each box
    sensitivity: Optional[np.ndarray] = None

    @property
    def score(self) -> np.ndarray:
        """Upper bound on the worst constraint margin; positive means possibly feasible."""
        if self.row_upper.shape[1] == 0:
            return np.full(self.row_upper.shape[0], np.inf)
        return self.row_upper.min(axis=1)


class QueryBounder:
    """Bounds the constraint rows of one query over batches of (x, s) boxes."""

    def __init__(self, query, tol: float = 1e-9):
        from .encoder import flatten_coupled
        system = query.system
        flat = system.__dict__.get("_flat")
        if flat is None:
            flat = flatten_coupled(system)
            object.__setattr__(system, "_flat", flat)
        self.prog = BoundProgram.of(flat)
        rows, rhs = query.output_rows, query.output_rhs
        crow, crhs = combined_rows(query)
        self.rows = np.vstack([rows, crow]) if len(crow) else rows
        self.rhs = np.concatenate([rhs, crhs]) if len(crow) else rhs
        self.n_query_rows = rows.shape[0]
        self.in_A, self.in_b = query.input_constraints()
        self.tol = tol

    def _inputs(self, lo, hi, empty):
        if self.in_A.shape[0]:
            lo, hi, e = propagate_linear(self.in_A, self.in_b, lo, hi, self.tol)
            empty = empty | e
        return lo, hi, empty

    def bound(self, lo: np.ndarray, hi: np.ndarray, iters: int = 2,
              want_outputs: bool = False, dual_steps: int = 20) -> QueryBoundResult:
        empty = np.zeros(lo.shape[0], dtype=bool)
        lo, hi, empty = self._inputs(lo, hi, empty)
        prog = self.prog
        for it in range(iters):
            pre = prog.preactivation_bounds(lo, hi)
            au, cu = prog.backward(self.rows, pre, upper=True)
            ilo, ihi = prog.interval(lo, hi, pre)[-1]
            row_ub = np.minimum(_max_affine(au, cu, lo, hi),
                                _max_affine(self.rows, 0.0, ilo, ihi)) - self.rhs
            A, rhs = au, np.broadcast_to(self.rhs - cu, row_ub.shape)
            if dual_steps and self.rows.shape[0] > 1:
                lam = dual_weights(au, cu - self.rhs, lo, hi, dual_steps)
                C = lam @ self.rows
                ac, cc = prog.backward(C[:, None, :], pre, upper=True)
                lam_rhs = lam @ self.rhs
                comb_ub = _max_affine(ac, cc, lo, hi)[:, 0] - lam_rhs
                row_ub = np.concatenate([row_ub, comb_ub[:, None]], axis=1)
                A = np.concatenate([A, ac], axis=1)
                rhs = np.concatenate([rhs, (lam_rhs - cc[:, 0])[:, None]], axis=1)
            empty |= np.any(row_ub < -self.tol, axis=1)
            if it == iters - 1 or np.all(empty):
                break
            nlo, nhi, e = propagate_linear(A, rhs, lo, hi, self.tol)
            nlo, nhi, e = self._inputs(nlo, nhi, empty | e)
            shrink = np.max((nlo - lo) + (hi - nhi), axis=1, initial=0.0)
            width = np.max(hi - lo, axis=1, initial=0.0)
            lo, hi, empty = nlo, nhi, e
            if np.all(empty | (shrink <= 1e-3 * width)):
                break
        k = np.argmin(row_ub, axis=1)
        sens = np.abs(A[np.arange(A.shape[0]), k])
        res = QueryBoundResult(lo, hi, empty, row_ub, sensitivity=sens)
        if want_outputs:
            eye = np.eye(prog.output_width)
            pre = prog.preactivation_bounds(lo, hi)
            ilo, ihi = prog.interval(lo, hi, pre)[-1]
            au, cu, al, cl, _ = prog.output_envelopes(eye, lo, hi, pre)
            olo = np.maximum(ilo, _min_affine(al, cl, lo, hi))
            ohi = np.minimum(ihi, _max_affine(au, cu, lo, hi))
            olo, ohi, e = propagate_linear(self.rows[:self.n_query_rows],
                                           self.rhs[:self.n_query_rows], olo, ohi, self.tol)
            res.out_lo, res.out_hi = olo, ohi
            res.infeasible = empty | e
        return res


def dual_weights(A: np.ndarray, c: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                 steps: int = 20) -> np.ndarray:
    """Simplex weights ``w`` approximately minimising ``max_box sum_k w_k (A_k z + c_k)``.

    Any non-negative ``w`` yields a valid combined constraint, so the search only
    affects tightness. Exponentiated-gradient steps; the best iterate is returned.
    """
    B, r, _ = A.shape
    logw = np.full((B, r), -np.log(r))
    w = np.exp(logw)
    best_w = w.copy()
    best = np.full(B, np.inf)
    scale = np.abs(A).sum(-1).max(-1) * np.max(hi - lo, axis=-1) + np.abs(c).max(-1) + 1e-12
    eta = 2.0 / scale[:, None]
    for t in range(steps):
        a = np.einsum("br,brn->bn", w, A)
        zs = np.where(a > 0, hi, lo)
        val = (a * zs).sum(-1) + (w * c).sum(-1)
        better = val < best
        best = np.where(better, val, best)
        best_w[better] = w[better]
        g = np.nan_to_num(np.einsum("brn,bn->br", A, zs) + c, posinf=1e300, neginf=-1e300)
        logw = logw - np.clip(eta * (g - g.mean(-1, keepdims=True)), -700, 700) / np.sqrt(t + 1.0)
        logw -= logw.max(-1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(-1, keepdims=True)
    return best_w


def combined_rows(query) -> tuple[np.ndarray, np.ndarray]:
    """Implied constraints that relate the two copies directly.

    For an argmax pair (i1, i2) the sum of ``L1[i1] >= L1[i2]`` and ``L2[i2] >= L2[i1]``
    compares the same logits across copies; for the continuous case the anchor and the
    copy-2 bound add up to a bound on the mean difference.
    """
    m = query.system.m
    if query.pair is not None:
        i1, i2 = query.pair.i1, query.pair.i2
        if i1 == i2:
            return np.zeros((0, 2 * m)), np.zeros(0)
        r = np.zeros(2 * m)
        r[i1] += 1.0
        r[i2] -= 1.0
        r[m + i2] += 1.0
        r[m + i1] -= 1.0
        return r[None], np.zeros(1)
    mc = query.mean
    lo, hi = mc.anchor
    k1, k2 = mc.mean_index, m + mc.mean_index
    r = np.zeros(2 * m)
    if mc.relation == "<=" and np.isfinite(lo):
        r[k1], r[k2] = 1.0, -1.0
        return r[None], np.array([lo - mc.rhs])
    if mc.relation == ">=" and np.isfinite(hi):
        r[k1], r[k2] = -1.0, 1.0
        return r[None], np.array([mc.rhs - hi])
    return np.zeros((0, 2 * m)), np.zeros(0)


def tighten_with_output_constraints(query, lo=None, hi=None, iters: int = 3,
                                    tol: float = 1e-9) -> TightenResult:
    """Bounds on the coupled outputs restricted to the query's constraint set.

    Alternates linear envelopes of every constraint row over the current box with
    propagation of ``envelope >= rhs`` back onto the input box, then bounds the outputs
    on the final box and propagates the output constraints among them.
    """
    qb = QueryBounder(query, tol=tol)
    if lo is None:
        lo, hi = query.input_box()
    res = qb.bound(np.asarray(lo, float)[None], np.asarray(hi, float)[None], iters=iters,
                   want_outputs=True)
    return TightenResult(bool(res.infeasible[0]), res.lo[0], res.hi[0], res.out_lo[0],
                         res.out_hi[0], res.row_upper[0, :qb.n_query_rows])
