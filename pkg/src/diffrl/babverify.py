"""Native complete verifier: input-domain branch and bound with falsification."""
from __future__ import annotations

import heapq
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bounds import QueryBounder
from .encoder import CERT_TOL, Query, replay_check
from .tensornet import forward_batch

log = logging.getLogger(__name__)

SAFE = "safe"
UNSAFE = "unsafe"
UNKNOWN = "unknown"

TIMEOUT = "timeout"
BUDGET_EXHAUSTED = "budget_exhausted"

DEFAULT_TIMEOUT_S = 600.0


@dataclass(frozen=True)
class Budget:
    timeout_s: float = DEFAULT_TIMEOUT_S
    max_subdomains: Optional[int] = 20_000


@dataclass
class Counterexample:
    x: np.ndarray
    s: np.ndarray
    logits1: np.ndarray
    logits2: np.ndarray
    query_id: str
    achieved: tuple = ()

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "x": self.x.tolist(), "s": self.s.tolist(),
                "logits1": self.logits1.tolist(), "logits2": self.logits2.tolist(),
                "achieved": list(self.achieved)}

    @classmethod
    def from_dict(cls, d: dict) -> "Counterexample":
        return cls(np.asarray(d["x"], float), np.asarray(d["s"], float),
                   np.asarray(d.get("logits1", []), float), np.asarray(d.get("logits2", []), float),
                   d.get("query_id", ""), tuple(d.get("achieved", ())))


@dataclass
class Verdict:
    status: str
    reason: str = ""
    counterexample: Optional[Counterexample] = None
    wall_time: float = 0.0
    subdomains_explored: int = 0
    engine: str = "native"
    notes: list = field(default_factory=list)

    def __post_init__(self):
        if self.status not in (SAFE, UNSAFE, UNKNOWN):
            raise ValueError(f"unknown status {self.status!r}")
        if self.status == UNSAFE and self.counterexample is None:
            raise ValueError("an unsafe verdict must carry a counterexample")

    @property
    def is_safe(self):
        return self.status == SAFE

    @property
    def is_unsafe(self):
        return self.status == UNSAFE

    def to_dict(self, timing: bool = True) -> dict:
        d = {"status": self.status, "engine": self.engine}
        if self.reason:
            d["reason"] = self.reason
        d["time_s"] = round(self.wall_time, 6) if timing else 0.0
        d["subdomains"] = self.subdomains_explored
        if self.notes:
            d["notes"] = list(self.notes)
        if self.counterexample is not None:
            d["counterexample"] = self.counterexample.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Verdict":
        cex = d.get("counterexample")
        return cls(d["status"], d.get("reason", ""),
                   Counterexample.from_dict(cex) if cex else None,
                   float(d.get("time_s", 0.0)), int(d.get("subdomains", 0)),
                   d.get("engine", "native"), list(d.get("notes", [])))


@dataclass
class SubDomain:
    lo: np.ndarray        # stacked (x, s) lower bounds
    hi: np.ndarray
    depth: int = 0
    score: float = np.inf

    @property
    def n(self) -> int:
        return self.lo.shape[0] // 2

    @property
    def x_box(self):
        return self.lo[:self.n], self.hi[:self.n]

    @property
    def s_box(self):
        return self.lo[self.n:], self.hi[self.n:]


class DegenerateDomain(ValueError):
    """Every interval of the subdomain is a single point."""


def branch(sub: SubDomain, root_width: Optional[np.ndarray] = None,
           s_threshold: float = 1e-4, weights: Optional[np.ndarray] = None
           ) -> tuple[SubDomain, SubDomain]:
    """Bisect the widest x interval (lowest index on ties).

    Slack dimensions are split only once every x interval is narrower than
    ``s_threshold`` times its root width (or once all x intervals are points).
    """
    n = sub.n
    w = sub.hi - sub.lo
    wx, ws = w[:n], w[n:]
    if root_width is not None:
        x_done = np.all(wx < s_threshold * root_width[:n]) or not np.any(wx > 0)
    else:
        x_done = not np.any(wx > 0)
    if weights is not None and np.any(weights * w > 0):
        k = int(np.argmax(weights * w))
    elif not x_done:
        k = int(np.argmax(wx))
    elif np.any(ws > 0):
        k = n + int(np.argmax(ws))
    elif np.any(wx > 0):
        k = int(np.argmax(wx))
    else:
        raise DegenerateDomain("all intervals are degenerate")
    mid = sub.lo[k] + 0.5 * (sub.hi[k] - sub.lo[k])
    left_hi = sub.hi.copy()
    left_hi[k] = mid
    right_lo = sub.lo.copy()
    right_lo[k] = mid
    return (SubDomain(sub.lo.copy(), left_hi, sub.depth + 1, sub.score),
            SubDomain(right_lo, sub.hi.copy(), sub.depth + 1, sub.score))


# -- falsification ------------------------------------------------------------

class _Objective:
    """Worst-case constraint margin of a batch of stacked (x, s) points."""

    def __init__(self, query: Query):
        self.q = query
        self.n = query.n
        self.in_A, self.in_b = query.input_constraints()

    def __call__(self, z: np.ndarray) -> np.ndarray:
        n = self.n
        x, s = z[:, :n], z[:, n:]
        net = self.q.net
        y = np.concatenate([forward_batch(net, x), forward_batch(net, x + s)], axis=1)
        g = self.q.output_margins(y)
        if self.in_A.shape[0]:
            g = np.concatenate([g, z @ self.in_A.T - self.in_b], axis=1)
        if g.shape[1] == 0:
            return np.zeros(z.shape[0])
        return g.min(axis=1)


def _certified(query: Query, z: np.ndarray, tol: float) -> Optional[Counterexample]:
    n = query.n
    x, s = z[:n].copy(), z[n:].copy()
    ok, _, l1, l2 = replay_check(query.net, query, x, s, tol)
    if not ok:
        return None
    if query.pair is not None:
        achieved = (query.pair.i1, query.pair.i2)
    else:
        k = query.mean.mean_index
        achieved = (float(l1[k]), float(l2[k]))
    return Counterexample(x, s, l1, l2, query.id, achieved)


def falsify(query: Query, samples: int = 1000, descent_steps: int = 50, seed: int = 0,
            lo: Optional[np.ndarray] = None, hi: Optional[np.ndarray] = None,
            starts: int = 4, tol: float = CERT_TOL) -> Optional[Counterexample]:
    """Search for a point satisfying every query constraint.

    Uniform sampling in the (x, s) box, then greedy coordinate moves with step halving
    from the best samples. Only replay-certified points are returned.
    """
    rng = np.random.default_rng(seed)
    if lo is None:
        lo, hi = query.input_box()
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    obj = _Objective(query)
    dim = lo.shape[0]
    pts = rng.uniform(lo, hi, size=(max(samples, 1), dim))
    pts[0] = 0.5 * (lo + hi)
    vals = obj(pts)
    order = np.argsort(-vals, kind="stable")
    for idx in order:
        if vals[idx] < -tol:
            break
        cex = _certified(query, pts[idx], tol)
        if cex is not None:
            return cex
    width = hi - lo
    movable = np.flatnonzero(width > 0)
    if descent_steps <= 0 or movable.size == 0:
        return None
    eye = np.eye(dim)[movable]
    for idx in order[:starts]:
        z, best = pts[idx].copy(), vals[idx]
        step = 0.25 * width[movable]
        for _ in range(descent_steps):
            cand = np.concatenate([z + eye * step[:, None], z - eye * step[:, None]])
            np.clip(cand, lo, hi, out=cand)
            cv = obj(cand)
            j = int(np.argmax(cv))
            if cv[j] > best:
                z, best = cand[j], cv[j]
                if best >= -tol:
                    cex = _certified(query, z, tol)
                    if cex is not None:
                        return cex
            else:
                step = step * 0.5
                if np.all(step < 1e-12 * np.maximum(width[movable], 1.0)):
                    break
    return None


# -- branch and bound -----------------------------------------------------------

@dataclass
class BabConfig:
    batch_size: int = 32
    bound_iters: int = 2
    root_samples: int = 2000
    root_descent: int = 60
    local_samples: int = 64
    local_descent: int = 12
    falsify_every: int = 8
    s_threshold: float = 1e-4
    split: str = "widest"
    closure_width: float = 1e-9
    tol: float = CERT_TOL


def verify_query(query: Query, budget: Budget = Budget(), seed: int = 0,
                 config: Optional[BabConfig] = None, engine: str = "native") -> Verdict:
    """Decide one query: Safe when every subdomain is pruned, Unsafe with a certified point."""
    cfg = config or BabConfig()
    t0 = time.monotonic()
    deadline = t0 + budget.timeout_s
    explored = 0
    notes: list = []

    def done(status, reason="", cex=None):
        return Verdict(status, reason, cex, time.monotonic() - t0, explored, engine, notes)

    if budget.timeout_s <= 0:
        return done(UNKNOWN, TIMEOUT)
    limit = budget.max_subdomains
    if limit is not None and limit <= 0:
        return done(UNKNOWN, BUDGET_EXHAUSTED)

    bounder = QueryBounder(query, tol=cfg.tol)
    lo0, hi0 = query.input_box()
    root_width = hi0 - lo0

    cex = falsify(query, cfg.root_samples, cfg.root_descent, seed, lo0, hi0, tol=cfg.tol)
    if cex is not None:
        return done(UNSAFE, cex=cex)

    heap: list = []
    counter = 0
    heapq.heappush(heap, (-np.inf, counter, SubDomain(lo0.copy(), hi0.copy())))
    rounds = 0
    while heap:
        if time.monotonic() >= deadline:
            return done(UNKNOWN, TIMEOUT)
        take = cfg.batch_size
        if limit is not None:
            take = min(take, limit - explored)
            if take <= 0:
                return done(UNKNOWN, BUDGET_EXHAUSTED)
        batch = [heapq.heappop(heap)[2] for _ in range(min(take, len(heap)))]
        explored += len(batch)
        lo = np.stack([d.lo for d in batch])
        hi = np.stack([d.hi for d in batch])
        res = bounder.bound(lo, hi, iters=cfg.bound_iters)
        live = np.flatnonzero(~res.infeasible)
        if live.size == 0:
            continue
        # cheap probe: centre of every surviving tightened box
        centres = 0.5 * (res.lo[live] + res.hi[live])
        g = _Objective(query)(centres)
        for j in np.flatnonzero(g >= -cfg.tol):
            cex = _certified(query, centres[j], cfg.tol)
            if cex is not None:
                return done(UNSAFE, cex=cex)
        rounds += 1
        if cfg.falsify_every and rounds % cfg.falsify_every == 0:
            best = live[int(np.argmax(res.score[live]))]
            cex = falsify(query, cfg.local_samples, cfg.local_descent, seed + rounds,
                          res.lo[best], res.hi[best], starts=1, tol=cfg.tol)
            if cex is not None:
                return done(UNSAFE, cex=cex)
        for i in live:
            sub = SubDomain(res.lo[i], res.hi[i], batch[i].depth, float(res.score[i]))
            width = sub.hi - sub.lo
            if np.all(width < cfg.closure_width):
                z = 0.5 * (sub.lo + sub.hi)
                cex = _certified(query, z, cfg.tol)
                if cex is not None:
                    return done(UNSAFE, cex=cex)
                if "tolerance-closure" not in notes:
                    notes.append("tolerance-closure")
                continue
            wts = res.sensitivity[i] if cfg.split == "sensitivity" else None
            for child in branch(sub, root_width, cfg.s_threshold, wts):
                counter += 1
                heapq.heappush(heap, (-child.score, counter, child))
    return done(SAFE)
