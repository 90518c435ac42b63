"""Seeded stand-ins for the three case-study policy architectures, plus property presets.

Feature layouts
---------------
Pensieve (25 inputs): 0 last bitrate, 1-8 throughput history, 9-16 download-time
history, 17 buffer level, 18 remaining chunks, 19-24 available-bitrate flags.

CMARS (19 inputs): 0 SLA violation ratio, 1 target-slice SNR, 2 available radio
resources, 3-18 aggregated demand statistics of the other slices.

Aurora (3k inputs): step-major history, step t occupies ``3t .. 3t+2`` as
(latency ratio, ack ratio, latency gradient).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .propspec import (
    VALUES, Box, PropertySpec, make_continuous, make_monotonicity, make_robustness,
)
from .tensornet import AffineLayer, ContinuousMean, Discrete, Network, Relu, Segment, SplitEmbedConcat

PENSIEVE_BITRATES = (300.0, 750.0, 1200.0, 1850.0, 2850.0, 4300.0)
PENSIEVE_SPLIT = (1, 8, 8, 1, 1, 6)
PENSIEVE_THROUGHPUT = tuple(range(1, 9))
PENSIEVE_BUFFER = 17
PENSIEVE_AVAILABILITY = tuple(range(19, 25))

CMARS_INPUTS = 19
CMARS_HIDDEN = 32
CMARS_SNR = 1
CMARS_DEMAND = tuple(range(3, 19))

AURORA_SIGMA = 0.5
AURORA_FEATURES = 3
AURORA_LATENCY, AURORA_ACK, AURORA_GRADIENT = 0, 1, 2

EPSILON = 0.01
COVERAGE_LEVELS = (60.0, 70.0, 80.0, 90.0, 100.0)


class ZooError(ValueError):
    pass


@dataclass(frozen=True)
class ZooSpec:
    family: str
    seed: int = 0
    hidden: int = 128          # Pensieve H / Aurora hidden width
    depth: int = 2             # CMARS hidden layers
    actions: int = 15          # CMARS M
    history: int = 3           # Aurora k

    def __post_init__(self):
        if self.family not in ("pensieve", "cmars", "aurora"):
            raise ZooError(f"unknown family {self.family!r}")
        if self.family == "cmars":
            if self.depth not in (2, 3):
                raise ZooError("CMARS depth must be 2 or 3")
            if self.actions not in (15, 30):
                raise ZooError("CMARS action count must be 15 or 30")
        if self.hidden <= 0 or self.history <= 0:
            raise ZooError("hidden width and history length must be positive")

    @property
    def label(self) -> str:
        if self.family == "pensieve":
            return f"pensieve_h{self.hidden}_s{self.seed}"
        if self.family == "cmars":
            return f"cmars_d{self.depth}_m{self.actions}_s{self.seed}"
        return f"aurora_k{self.history}_h{self.hidden}_s{self.seed}"


def _fc(rng: np.random.Generator, n_in: int, n_out: int) -> AffineLayer:
    bound = 1.0 / np.sqrt(n_in)
    return AffineLayer(rng.uniform(-bound, bound, size=(n_out, n_in)),
                       rng.uniform(-bound, bound, size=n_out))


def build(spec: ZooSpec) -> Network:
    rng = np.random.default_rng(spec.seed)
    if spec.family == "pensieve":
        h = spec.hidden
        segs, off = [], 0
        for length in PENSIEVE_SPLIT:
            segs.append(Segment(off, length, _fc(rng, length, h)))
            off += length
        layers = [SplitEmbedConcat(tuple(segs)), Relu(), _fc(rng, h * len(PENSIEVE_SPLIT), h),
                  Relu(), _fc(rng, h, len(PENSIEVE_BITRATES))]
        return Network(spec.label, off, tuple(layers), Discrete(PENSIEVE_BITRATES))
    if spec.family == "cmars":
        layers, width = [], CMARS_INPUTS
        for _ in range(spec.depth):
            layers += [_fc(rng, width, CMARS_HIDDEN), Relu()]
            width = CMARS_HIDDEN
        layers.append(_fc(rng, width, spec.actions))
        return Network(spec.label, CMARS_INPUTS, tuple(layers),
                       Discrete(tuple(float(a) for a in range(spec.actions))))
    n = AURORA_FEATURES * spec.history
    h = spec.hidden
    # the third hidden layer has no activation; it feeds the output layer directly
    layers = [_fc(rng, n, h), Relu(), _fc(rng, h, h), Relu(), _fc(rng, h, h), _fc(rng, h, 1)]
    return Network(spec.label, n, tuple(layers), ContinuousMean(0, AURORA_SIGMA))


def parameter_count(spec: ZooSpec) -> int:
    """Closed-form parameter count, independent of ``build``."""
    if spec.family == "pensieve":
        h, k = spec.hidden, len(PENSIEVE_SPLIT)
        return sum(PENSIEVE_SPLIT) * h + k * h + (k * h) * h + h + h * 6 + 6
    if spec.family == "cmars":
        widths = [CMARS_INPUTS] + [CMARS_HIDDEN] * spec.depth + [spec.actions]
    else:
        widths = [AURORA_FEATURES * spec.history] + [spec.hidden] * 3 + [1]
    return sum(a * b + b for a, b in zip(widths, widths[1:]))


def default_domain(spec: ZooSpec) -> Box:
    if spec.family == "pensieve":
        lo, hi = np.zeros(25), np.ones(25)
        lo[list(PENSIEVE_AVAILABILITY)] = 1.0
        return Box(lo, hi)
    if spec.family == "cmars":
        return Box.uniform(CMARS_INPUTS, 0.0, 1.0)
    return Box.uniform(AURORA_FEATURES * spec.history, 0.0, 1.0)


def preset_properties(spec: ZooSpec, epsilon: float = EPSILON,
                      coverage_pct: float = 100.0) -> list[PropertySpec]:
    dom = default_domain(spec)
    if spec.family == "pensieve":
        d = 3.0
        props = [
            make_monotonicity(dom, PENSIEVE_THROUGHPUT, +1, epsilon, d,
                              name="capacity_utilization"),
            make_monotonicity(dom, [PENSIEVE_BUFFER], +1, epsilon, d,
                              name="rebuffering_avoidance"),
            make_robustness(dom, epsilon, d, name="robustness", frozen=PENSIEVE_AVAILABILITY),
        ]
    elif spec.family == "cmars":
        d = 8.0 if spec.actions == 15 else 16.0
        props = [
            make_monotonicity(dom, CMARS_DEMAND, +1, epsilon, d, trend="decreasing",
                              name="contention_aware_allocation", units=VALUES),
            make_monotonicity(dom, [CMARS_SNR], -1, epsilon, d, trend="decreasing",
                              name="channel_compensation", units=VALUES),
            make_robustness(dom, epsilon, d, name="robustness", units=VALUES),
        ]
    else:
        mu = AURORA_SIGMA / 2
        k = spec.history
        n = AURORA_FEATURES * k
        ack = [AURORA_FEATURES * t + AURORA_ACK for t in range(k)]
        lat = [AURORA_FEATURES * t + AURORA_LATENCY for t in range(k)]
        up = np.zeros(n)
        up[ack] = epsilon
        down = np.zeros(n)
        down[lat] = -epsilon
        props = [
            make_continuous(dom, Box(np.zeros(n), up), mu, name="ack_driven_capacity_utilization"),
            make_continuous(dom, Box(down, np.zeros(n)), mu,
                            name="latency_aware_capacity_utilization"),
            make_continuous(dom, Box.uniform(n, -epsilon, epsilon), mu, directions=("down", "up"),
                            name="robustness"),
        ]
    return [p.with_options(coverage_pct=coverage_pct) for p in props]
