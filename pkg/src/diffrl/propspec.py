"""Symbolic property declarations: input domains, slack boxes, comparisons and coverage."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Optional, Sequence, Union

import numpy as np

AT_LEAST = "at_least"
STRICT = "strict"
LEVELS = "levels"
VALUES = "values"


class PropertyError(ValueError):
    pass


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise PropertyError(f"interval [{lo}, {hi}] is not finite")
        if lo > hi:
            raise PropertyError(f"interval [{lo}, {hi}] has lo > hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def __iter__(self):
        yield self.lo
        yield self.hi


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box stored as two read-only float arrays.

    Used both for the state domain X and for the slack box S.
    """

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lo, dtype=np.float64).reshape(-1)
        hi = np.array(self.hi, dtype=np.float64).reshape(-1)
        if lo.shape != hi.shape:
            raise PropertyError(f"box bounds have shapes {lo.shape} and {hi.shape}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise PropertyError("box bounds must be finite")
        bad = np.flatnonzero(lo > hi)
        if bad.size:
            raise PropertyError(f"box feature {bad[0]}: lo {lo[bad[0]]} > hi {hi[bad[0]]}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_intervals(cls, intervals: Iterable[Union[Interval, Sequence[float]]]) -> "Box":
        pairs = [tuple(iv) for iv in intervals]
        for k, (a, b) in enumerate(pairs):
            Interval(a, b)  # validates
        lo = [a for a, _ in pairs]
        hi = [b for _, b in pairs]
        return cls(lo, hi)

    @classmethod
    def uniform(cls, n: int, lo: float, hi: float) -> "Box":
        return cls(np.full(n, lo), np.full(n, hi))

    @property
    def per_feature(self) -> list[Interval]:
        return [Interval(a, b) for a, b in zip(self.lo, self.hi)]

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def __len__(self):
        return self.lo.shape[0]

    def contains(self, v, tol: float = 0.0) -> bool:
        v = np.asarray(v, dtype=np.float64)
        return bool(np.all(v >= self.lo - tol) and np.all(v <= self.hi + tol))

    def to_list(self) -> list[list[float]]:
        return [[float(a), float(b)] for a, b in zip(self.lo, self.hi)]

    def __eq__(self, other):
        if not isinstance(other, Box):
            return NotImplemented
        return np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)

    __hash__ = None


InputDomain = Box
SlackSpec = Box


@dataclass(frozen=True, eq=False)
class LinearInputConstraint:
    """``coeffs_x . x + coeffs_s . s  <relation>  rhs``."""

    coeffs_x: np.ndarray
    coeffs_s: np.ndarray
    relation: str
    rhs: float

    def __post_init__(self):
        cx = np.array(self.coeffs_x, dtype=np.float64).reshape(-1)
        cs = np.array(self.coeffs_s, dtype=np.float64).reshape(-1)
        if cx.shape != cs.shape:
            raise PropertyError("constraint coefficient vectors differ in length")
        if self.relation not in ("<=", ">="):
            raise PropertyError(f"unknown relation {self.relation!r}")
        if not (np.all(np.isfinite(cx)) and np.all(np.isfinite(cs)) and math.isfinite(self.rhs)):
            raise PropertyError("constraint has non-finite entries")
        cx.setflags(write=False)
        cs.setflags(write=False)
        object.__setattr__(self, "coeffs_x", cx)
        object.__setattr__(self, "coeffs_s", cs)
        object.__setattr__(self, "rhs", float(self.rhs))

    @property
    def width(self) -> int:
        return self.coeffs_x.shape[0]

    def as_geq(self) -> tuple[np.ndarray, float]:
        """Coefficients over the stacked (x, s) vector and rhs of the equivalent ``a.z >= b``."""
        a = np.concatenate([self.coeffs_x, self.coeffs_s])
        if self.relation == ">=":
            return a, self.rhs
        return -a, -self.rhs

    def slack_value(self, x, s) -> float:
        """Signed satisfaction margin; non-negative when the constraint holds."""
        a, b = self.as_geq()
        return float(a @ np.concatenate([np.asarray(x, float), np.asarray(s, float)]) - b)

    def to_dict(self) -> dict:
        return {"coeffs_x": self.coeffs_x.tolist(), "coeffs_s": self.coeffs_s.tolist(),
                "relation": self.relation, "rhs": self.rhs}


@dataclass(frozen=True)
class ComparisonSpec:
    """How two selected actions are compared.

    ``kind="abs_diff"`` flags ``|a2 - a1| ⋈ d``. ``kind="directional"`` flags movement
    against the expected direction: with ``sign=+1`` the second action must not fall
    below the first (violation ``a1 - a2 ⋈ d``); ``sign=-1`` is the mirror image.
    ``⋈`` is ``>=`` for ``violation_rule="at_least"`` and ``>`` for ``"strict"``.
    """

    kind: str
    threshold_d: float
    sign: int = 1
    violation_rule: str = AT_LEAST
    units: str = LEVELS

    def __post_init__(self):
        if self.kind not in ("abs_diff", "directional"):
            raise PropertyError(f"unknown comparison kind {self.kind!r}")
        if self.sign not in (1, -1):
            raise PropertyError("sign must be +1 or -1")
        if not (self.threshold_d >= 0 and math.isfinite(self.threshold_d)):
            raise PropertyError("threshold d must be finite and non-negative")
        if self.violation_rule not in (AT_LEAST, STRICT):
            raise PropertyError(f"unknown violation rule {self.violation_rule!r}")
        if self.units not in (LEVELS, VALUES):
            raise PropertyError(f"unknown units {self.units!r}")

    def distance(self, a1: float, a2: float) -> float:
        if self.kind == "abs_diff":
            return abs(a2 - a1)
        return self.sign * (a1 - a2)

    def violates(self, a1: float, a2: float) -> bool:
        f = self.distance(a1, a2)
        if self.violation_rule == AT_LEAST:
            return f >= self.threshold_d
        return f > self.threshold_d


@dataclass(frozen=True)
class ContinuousAnchor:
    """Sign-reversal check on the mean output of a continuous-action policy.

    For the ``"down"`` direction the first copy's mean is confined to ``mean_bound`` and
    the second copy's mean must fall to ``mean_bound[0] - separation_d`` or below.
    ``"up"`` is the mirrored case (bound negated, inequality flipped).
    """

    mean_bound: tuple[float, float]
    separation_d: float
    directions: tuple[str, ...] = ("down",)

    def __post_init__(self):
        lo, hi = (float(v) for v in self.mean_bound)
        if math.isnan(lo) or math.isnan(hi) or lo > hi or lo == math.inf or hi == -math.inf:
            raise PropertyError(f"bad mean bound [{lo}, {hi}]")
        if not (self.separation_d > 0 and math.isfinite(self.separation_d)):
            raise PropertyError("separation_d must be positive")
        dirs = tuple(self.directions)
        if not dirs or any(d not in ("down", "up") for d in dirs) or len(set(dirs)) != len(dirs):
            raise PropertyError(f"bad directions {dirs!r}")
        object.__setattr__(self, "mean_bound", (lo, hi))
        object.__setattr__(self, "directions", dirs)

    def bounds_for(self, direction: str) -> tuple[tuple[float, float], str, float]:
        """(copy-1 mean interval, relation on copy-2 mean, rhs) for one direction."""
        lo, hi = self.mean_bound
        if direction == "down":
            return (lo, hi), "<=", lo - self.separation_d
        return (-hi, -lo), ">=", -lo + self.separation_d


@dataclass(frozen=True, eq=False)
class PropertySpec:
    name: str
    domain: Box
    slack: Box
    comparison: Optional[ComparisonSpec] = None
    anchor: Optional[ContinuousAnchor] = None
    extra_constraints: tuple[LinearInputConstraint, ...] = ()
    # each inner tuple is one disjunction; queries are emitted per disjunct combination
    disjunctions: tuple[tuple[LinearInputConstraint, ...], ...] = ()
    coverage_pct: float = 100.0
    clamp_perturbed: bool = False
    kind: str = "custom"

    def __post_init__(self):
        if (self.comparison is None) == (self.anchor is None):
            raise PropertyError("exactly one of comparison / anchor must be given")
        if len(self.domain) != len(self.slack):
            raise PropertyError(
                f"domain has {len(self.domain)} features, slack has {len(self.slack)}")
        if not (0 < self.coverage_pct <= 100):
            raise PropertyError(f"coverage {self.coverage_pct} outside (0, 100]")
        object.__setattr__(self, "extra_constraints", tuple(self.extra_constraints))
        object.__setattr__(self, "disjunctions", tuple(tuple(d) for d in self.disjunctions))
        n = len(self.domain)
        for c in self.all_constraints():
            if c.width != n:
                raise PropertyError(f"constraint width {c.width} != input width {n}")
        if any(len(d) == 0 for d in self.disjunctions):
            raise PropertyError("empty disjunction")
        if self.kind not in PROPERTY_KINDS:
            raise PropertyError(f"unknown property kind {self.kind!r}")

    def all_constraints(self):
        yield from self.extra_constraints
        for d in self.disjunctions:
            yield from d

    @property
    def width(self) -> int:
        return len(self.domain)

    @property
    def is_continuous(self) -> bool:
        return self.anchor is not None

    def with_options(self, **kw) -> "PropertySpec":
        """Copy with some fields replaced (coverage, rule, clamping ...)."""
        rule = kw.pop("violation_rule", None)
        p = replace(self, **kw)
        if rule is not None and p.comparison is not None:
            p = replace(p, comparison=replace(p.comparison, violation_rule=rule))
        return p

    def check_width(self, input_width: int) -> None:
        if self.width != input_width:
            raise PropertyError(
                f"property {self.name!r} has {self.width} features, network expects {input_width}")


PROPERTY_KINDS = ("robustness", "monotonicity", "continuous_anchor", "custom")


def make_robustness(domain: Box, epsilon: float, d: float, *, name: str = "robustness",
                    units: str = LEVELS, violation_rule: str = AT_LEAST,
                    frozen: Sequence[int] = ()) -> PropertySpec:
    """Two-sided L-infinity perturbation of every feature must not move the action by d."""
    if not epsilon > 0:
        raise PropertyError("epsilon must be positive")
    n = len(domain)
    hi = np.full(n, float(epsilon))
    hi[list(frozen)] = 0.0
    return PropertySpec(name, domain, Box(-hi, hi),
                        comparison=ComparisonSpec("abs_diff", d, violation_rule=violation_rule,
                                                  units=units),
                        kind="robustness")


def make_monotonicity(domain: Box, feature_indices: Iterable[int], direction: int,
                      epsilon: float, d: float, *, trend: str = "increasing",
                      name: str = "monotonicity", units: str = LEVELS,
                      violation_rule: str = AT_LEAST) -> PropertySpec:
    """One-sided perturbation of the listed features.

    ``direction`` is the sign of the feature change. ``trend`` states whether the policy
    should be increasing or decreasing in those features; the expected sign of the
    action change is ``direction`` for an increasing policy and ``-direction`` otherwise.
    """
    idx = sorted(set(int(i) for i in feature_indices))
    if not idx:
        raise PropertyError("monotonicity needs at least one feature")
    if not epsilon > 0:
        raise PropertyError("epsilon must be positive")
    if direction not in (1, -1):
        raise PropertyError("direction must be +1 or -1")
    if trend not in ("increasing", "decreasing"):
        raise PropertyError(f"unknown trend {trend!r}")
    n = len(domain)
    if idx[0] < 0 or idx[-1] >= n:
        raise PropertyError(f"feature index out of range for width {n}")
    lo = np.zeros(n)
    hi = np.zeros(n)
    if direction > 0:
        hi[idx] = epsilon
    else:
        lo[idx] = -epsilon
    sign = direction if trend == "increasing" else -direction
    return PropertySpec(name, domain, Box(lo, hi),
                        comparison=ComparisonSpec("directional", d, sign=sign,
                                                  violation_rule=violation_rule, units=units),
                        kind="monotonicity")


def make_continuous(domain: Box, slack: Box, mu: float, *, directions=("down",),
                    name: str = "continuous") -> PropertySpec:
    """Anchor the first copy's mean at >= mu and flag a second-copy mean <= -mu."""
    anchor = ContinuousAnchor((mu, math.inf), 2.0 * mu, tuple(directions))
    return PropertySpec(name, domain, slack, anchor=anchor, kind="continuous_anchor")


def apply_coverage(domain: Box, coverage_pct: float) -> Box:
    """Shrink every feature range about its centre to ``coverage_pct`` percent of its width."""
    if not (0 < coverage_pct <= 100):
        raise PropertyError(f"coverage {coverage_pct} outside (0, 100]")
    if coverage_pct == 100:
        return domain
    m = (100.0 - coverage_pct) / 200.0
    w = domain.hi - domain.lo
    return Box(domain.lo + m * w, domain.hi - m * w)


def temporal_trend_disjunction(indices: Sequence[int], width: int
                               ) -> tuple[LinearInputConstraint, ...]:
    """Negation of a strictly rising history ``x[i0] < x[i1] < ...`` as a disjunction.

    Returns one constraint ``x[i_k] >= x[i_{k+1}]`` per consecutive pair.
    """
    out = []
    for a, b in zip(indices, indices[1:]):
        cx = np.zeros(width)
        cx[a], cx[b] = 1.0, -1.0
        out.append(LinearInputConstraint(cx, np.zeros(width), ">=", 0.0))
    return tuple(out)


def clamp_constraints(domain: Box) -> list[LinearInputConstraint]:
    """``lo <= x + s <= hi`` as linear input constraints."""
    n = len(domain)
    out = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        out.append(LinearInputConstraint(e, e, ">=", float(domain.lo[i])))
        out.append(LinearInputConstraint(e, e, "<=", float(domain.hi[i])))
    return out


_STD = NormalDist()


def normal_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def sign_flip_probability(mu: float, sigma: float) -> float:
    """Probability that copy 1 samples a positive action and copy 2 a negative one.

    Evaluated at the boundary means (mu, -mu) with shared fixed standard deviation.
    """
    if not sigma > 0:
        raise PropertyError("sigma must be positive")
    return normal_cdf(mu / sigma) ** 2


def mu_for_confidence(q: float, sigma: float) -> float:
    """Anchor magnitude whose boundary sign-flip probability equals ``q``."""
    if not (0 < q < 1):
        raise PropertyError("q must lie in (0, 1)")
    if not sigma > 0:
        raise PropertyError("sigma must be positive")
    return sigma * _STD.inv_cdf(math.sqrt(q))


# -- property files ------------------------------------------------------------

def _constraint_from(d: dict) -> LinearInputConstraint:
    return LinearInputConstraint(d["coeffs_x"], d["coeffs_s"], d["relation"], d["rhs"])


def property_to_dict(p: PropertySpec) -> dict:
    doc: dict = {"name": p.name, "kind": p.kind, "domain": p.domain.to_list(),
                 "slack": p.slack.to_list()}
    if p.comparison is not None:
        c = p.comparison
        doc["comparison"] = {"kind": c.kind, "threshold": c.threshold_d, "sign": c.sign,
                             "violation_rule": c.violation_rule, "units": c.units}
    else:
        a = p.anchor
        lo, hi = a.mean_bound
        doc["anchor"] = {"mean_bound": [lo if math.isfinite(lo) else None,
                                        hi if math.isfinite(hi) else None],
                         "separation": a.separation_d, "directions": list(a.directions)}
    doc["extra_constraints"] = [c.to_dict() for c in p.extra_constraints]
    doc["disjunctions"] = [[c.to_dict() for c in d] for d in p.disjunctions]
    doc["coverage_pct"] = p.coverage_pct
    doc["clamp_perturbed"] = p.clamp_perturbed
    return doc


def property_from_dict(doc: dict) -> PropertySpec:
    try:
        kind = doc.get("kind", "custom")
        comparison = anchor = None
        if "comparison" in doc:
            c = doc["comparison"]
            comparison = ComparisonSpec(c["kind"], float(c["threshold"]), int(c.get("sign", 1)),
                                        c.get("violation_rule", AT_LEAST), c.get("units", LEVELS))
        if "anchor" in doc:
            a = doc["anchor"]
            lo, hi = a["mean_bound"]
            anchor = ContinuousAnchor((-math.inf if lo is None else lo,
                                       math.inf if hi is None else hi),
                                      float(a["separation"]), tuple(a.get("directions", ["down"])))
        p = PropertySpec(
            name=str(doc["name"]),
            domain=Box.from_intervals(doc["domain"]),
            slack=Box.from_intervals(doc["slack"]),
            comparison=comparison, anchor=anchor,
            extra_constraints=tuple(_constraint_from(c) for c in doc.get("extra_constraints", [])),
            disjunctions=tuple(tuple(_constraint_from(c) for c in d)
                               for d in doc.get("disjunctions", [])),
            coverage_pct=float(doc.get("coverage_pct", 100.0)),
            clamp_perturbed=bool(doc.get("clamp_perturbed", False)),
            kind=kind)
    except (KeyError, TypeError) as e:
        raise PropertyError(f"malformed property document: {e!r}") from None
    _check_kind(p)
    return p


def _check_kind(p: PropertySpec) -> None:
    if p.kind == "robustness":
        if p.comparison is None or p.comparison.kind != "abs_diff":
            raise PropertyError("robustness property needs an abs_diff comparison")
        if not np.array_equal(p.slack.lo, -p.slack.hi):
            raise PropertyError("robustness slack must be symmetric")
    elif p.kind == "monotonicity":
        if p.comparison is None or p.comparison.kind != "directional":
            raise PropertyError("monotonicity property needs a directional comparison")
        if not np.all((p.slack.lo == 0) | (p.slack.hi == 0)):
            raise PropertyError("monotonicity slack must have a zero endpoint per feature")
    elif p.kind == "continuous_anchor" and p.anchor is None:
        raise PropertyError("continuous_anchor property needs an anchor")


def load_property(path: Union[str, os.PathLike]) -> PropertySpec:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise PropertyError(f"malformed JSON in {path}: {e}") from None
    return property_from_dict(doc)


def save_property(p: PropertySpec, path: Union[str, os.PathLike]) -> None:
    from .tensornet import atomic_write_text
    atomic_write_text(path, json.dumps(property_to_dict(p), indent=1))
