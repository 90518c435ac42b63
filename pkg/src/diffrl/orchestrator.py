"""Engine dispatch, counterexample certification, verdict merging and reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import __version__
from .babverify import (
    SAFE, TIMEOUT, UNKNOWN, UNSAFE, BabConfig, Budget, Counterexample, Verdict, verify_query,
)
from .encoder import CERT_TOL, Query, flatten_coupled, generate_queries, replay_check
from .propspec import PropertySpec
from .tensornet import Network, atomic_write_text, forward, save_network

log = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

NATIVE = "native"
EXTERNAL_EXPORT = "external-export"

UNCERTIFIED = "uncertified"
NO_RESULT = "no_result"
ENGINE_ERROR = "engine_error"

SAFE_AGG, VIOLATED, UNKNOWN_AGG = "safe", "violated", "unknown"

REPORT_SCHEMA = 1


class StructuralError(ValueError):
    """A property result is missing queries or has unexpected ones."""


class ResultFormatError(ValueError):
    pass


class Conflict(RuntimeError):
    """One engine proved a query infeasible while another produced a certified point."""

    def __init__(self, query_id: str, safe: Verdict, unsafe: Verdict):
        super().__init__(f"query {query_id}: {safe.engine} reports safe but {unsafe.engine} "
                         "produced a certified counterexample")
        self.query_id = query_id
        self.safe = safe
        self.unsafe = unsafe

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "safe": self.safe.to_dict(),
                "unsafe": self.unsafe.to_dict()}


# -- engines ---------------------------------------------------------------------

class EngineContract:
    name: str = "engine"
    capability: str = NATIVE

    def verify(self, query: Query, budget: Budget, seed: int = 0) -> Verdict:
        raise NotImplementedError


@dataclass
class NativeEngine(EngineContract):
    name: str = NATIVE
    config: BabConfig = field(default_factory=BabConfig)
    capability: str = NATIVE

    def verify(self, query: Query, budget: Budget, seed: int = 0) -> Verdict:
        return verify_query(query, budget, seed=seed, config=self.config, engine=self.name)


@dataclass
class ExternalEngine(EngineContract):
    """Stand-in for an out-of-process solver.

    ``verify`` exports the query bundle into ``workdir`` and imports
    ``<slug>.result`` if someone (a solver run, a script) has produced it. Without a
    result file the verdict is Unknown.
    """

    workdir: str = "."
    name: str = "external"
    capability: str = EXTERNAL_EXPORT

    def verify(self, query: Query, budget: Budget, seed: int = 0) -> Verdict:
        t0 = time.monotonic()
        qfile = export_query(query, self.workdir)
        res = qfile.with_suffix(".result")
        if not res.exists():
            return Verdict(UNKNOWN, NO_RESULT, wall_time=time.monotonic() - t0, engine=self.name)
        v = import_result(res, query, engine=self.name)
        v.wall_time = time.monotonic() - t0
        return v


def parse_engines(spec: Union[str, Sequence[str]], config: Optional[BabConfig] = None
                  ) -> list[EngineContract]:
    """``"native,external:/dir"`` -> engine objects."""
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    engines: list[EngineContract] = []
    for item in (i.strip() for i in items):
        if not item:
            continue
        if item == NATIVE:
            engines.append(NativeEngine(config=config or BabConfig()))
        elif item.startswith("external:"):
            d = item.split(":", 1)[1] or "."
            engines.append(ExternalEngine(d, name=f"external:{d}"))
        else:
            raise ValueError(f"unknown engine {item!r} (expected 'native' or 'external:<dir>')")
    if not engines:
        raise ValueError("at least one engine is required")
    return engines


# -- dispatch --------------------------------------------------------------------

def worker_count(requested: Optional[int] = None) -> int:
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("DIFFRL_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            log.warning("ignoring non-integer DIFFRL_THREADS=%r", cap)
    return max(1, n)


def _run_one(engine: EngineContract, query: Query, budget: Budget, seed: int) -> Verdict:
    t0 = time.monotonic()
    try:
        v = engine.verify(query, budget, seed)
    except Exception as exc:  # an engine failure must not abort the batch
        log.warning("engine %s failed on %s: %s", engine.name, query.id, exc)
        return Verdict(UNKNOWN, ENGINE_ERROR, wall_time=time.monotonic() - t0,
                       engine=engine.name, notes=[f"{type(exc).__name__}: {exc}"])
    if not isinstance(v, Verdict):
        return Verdict(UNKNOWN, ENGINE_ERROR, wall_time=time.monotonic() - t0,
                       engine=engine.name, notes=["engine returned a non-verdict"])
    v.engine = engine.name
    return v


def dispatch(queries: Sequence[Query], engines: Sequence[EngineContract], budget: Budget = Budget(),
             workers: Optional[int] = None, seed: int = 0, certify: bool = True
             ) -> list[list[Verdict]]:
    """Run every engine on every query; ``result[q][e]`` is engine ``e``'s verdict on query ``q``.

    Query ``i`` uses seed ``seed + i`` whatever the worker count, so verdicts do not
    depend on scheduling. Unsafe verdicts are re-certified here unless ``certify`` is off.
    """
    if not engines:
        raise ValueError("dispatch needs at least one engine")
    tasks = [(qi, ei) for qi in range(len(queries)) for ei in range(len(engines))]
    out: list[list[Optional[Verdict]]] = [[None] * len(engines) for _ in queries]
    n = min(worker_count(workers), max(1, len(tasks)))
    if n == 1:
        for qi, ei in tasks:
            out[qi][ei] = _run_one(engines[ei], queries[qi], budget, seed + qi)
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            futs = {(qi, ei): pool.submit(_run_one, engines[ei], queries[qi], budget, seed + qi)
                    for qi, ei in tasks}
            for (qi, ei), fut in futs.items():
                try:
                    out[qi][ei] = fut.result()
                except (BrokenProcessPool, Exception) as exc:
                    out[qi][ei] = Verdict(UNKNOWN, ENGINE_ERROR, engine=engines[ei].name,
                                          notes=[f"{type(exc).__name__}: {exc}"])
    if certify:
        for qi, row in enumerate(out):
            out[qi] = [certify_verdict(queries[qi], v) for v in row]
    return out  # type: ignore[return-value]


# -- certification ---------------------------------------------------------------

@dataclass(frozen=True)
class Certification:
    accepted: bool
    diagnostic: str = ""

    def __bool__(self):
        return self.accepted


def certify_counterexample(net: Network, query: Query, cex: Counterexample,
                           tol: float = CERT_TOL) -> Certification:
    ok, diag, _, _ = replay_check(net, query, cex.x, cex.s, tol)
    return Certification(ok, diag)


def certify_verdict(query: Query, v: Verdict, tol: float = CERT_TOL) -> Verdict:
    """Demote an Unsafe verdict whose counterexample does not replay to Unknown."""
    if v.status != UNSAFE:
        return v
    c = certify_counterexample(query.net, query, v.counterexample, tol)
    if c.accepted:
        return v
    return Verdict(UNKNOWN, UNCERTIFIED, None, v.wall_time, v.subdomains_explored, v.engine,
                   list(v.notes) + [c.diagnostic])


# -- merging and aggregation ---------------------------------------------------------

def merge_engine_verdicts(verdicts: Sequence[Verdict], query_id: str = "") -> Verdict:
    """Certified Unsafe beats Safe beats Unknown; Safe together with Unsafe is a Conflict.

    Inputs are expected to be certified already (``dispatch`` does this).
    """
    if not verdicts:
        raise ValueError("merge needs at least one verdict")
    unsafe = [v for v in verdicts if v.status == UNSAFE]
    safe = [v for v in verdicts if v.status == SAFE]
    total = sum(v.wall_time for v in verdicts)
    if unsafe and safe:
        raise Conflict(query_id, safe[0], unsafe[0])
    if unsafe:
        u = unsafe[0]
        return Verdict(UNSAFE, "", u.counterexample, total, u.subdomains_explored, u.engine)
    if safe:
        s = safe[0]
        return Verdict(SAFE, "", None, total, s.subdomains_explored, s.engine)
    reasons = sorted({v.reason for v in verdicts if v.reason})
    return Verdict(UNKNOWN, ",".join(reasons), None, total,
                   max(v.subdomains_explored for v in verdicts), "+".join(v.engine for v in verdicts))


@dataclass
class QueryOutcome:
    query_id: str
    engine_verdicts: list
    merged: Verdict


@dataclass
class PropertyResult:
    property_name: str
    coverage_pct: float
    per_query: list
    aggregate: str
    counts: tuple

    @property
    def counterexamples(self) -> list:
        return [o.merged.counterexample for o in self.per_query if o.merged.status == UNSAFE]


def aggregate_property(property_name: str, coverage_pct: float, outcomes: Sequence[QueryOutcome],
                       expected_ids: Optional[Sequence[str]] = None) -> PropertyResult:
    """Fold merged verdicts: Violated iff any Unsafe, Safe iff all Safe, otherwise Unknown."""
    ids = [o.query_id for o in outcomes]
    if len(set(ids)) != len(ids):
        raise StructuralError(f"{property_name}: duplicate query ids")
    if expected_ids is not None:
        missing = sorted(set(expected_ids) - set(ids))
        extra = sorted(set(ids) - set(expected_ids))
        if missing:
            raise StructuralError(f"{property_name}: missing results for {missing}")
        if extra:
            raise StructuralError(f"{property_name}: unexpected results for {extra}")
    n_safe = sum(o.merged.status == SAFE for o in outcomes)
    n_unsafe = sum(o.merged.status == UNSAFE for o in outcomes)
    n_unknown = len(outcomes) - n_safe - n_unsafe
    if n_unsafe:
        agg = VIOLATED
    elif n_unknown:
        agg = UNKNOWN_AGG
    else:
        agg = SAFE_AGG
    return PropertyResult(property_name, coverage_pct, list(outcomes), agg,
                          (n_safe, n_unsafe, n_unknown))


def verify_property(net: Network, prop: PropertySpec, engines: Sequence[EngineContract],
                    budget: Budget = Budget(), workers: Optional[int] = None, seed: int = 0
                    ) -> PropertyResult:
    """Decompose, dispatch, certify, merge and aggregate one property."""
    queries = generate_queries(net, prop)
    table = dispatch(queries, engines, budget, workers, seed)
    outcomes = [QueryOutcome(q.id, row, merge_engine_verdicts(row, q.id))
                for q, row in zip(queries, table)]
    return aggregate_property(prop.name, prop.coverage_pct, outcomes, [q.id for q in queries])


# -- reports -----------------------------------------------------------------------

def report_dict(result: PropertyResult, model: str, timing: bool = True) -> dict:
    rows = []
    for o in result.per_query:
        row = {"id": o.query_id,
               "engine_verdicts": {v.engine: v.to_dict(timing) for v in o.engine_verdicts},
               "merged": {"status": o.merged.status, "reason": o.merged.reason,
                          "engine": o.merged.engine},
               "time_s": round(o.merged.wall_time, 6) if timing else 0.0}
        if o.merged.counterexample is not None:
            row["counterexample"] = o.merged.counterexample.to_dict()
        rows.append(row)
    s, u, k = result.counts
    return {"schema": REPORT_SCHEMA, "tool_version": __version__, "model": model,
            "property": result.property_name, "coverage": result.coverage_pct,
            "queries": rows, "counts": {"safe": s, "unsafe": u, "unknown": k, "total": s + u + k},
            "aggregate": result.aggregate}


def dumps_report(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=False, allow_nan=False) + "\n"


def write_report(doc, path: PathLike) -> None:
    atomic_write_text(path, dumps_report(doc))


CSV_FIELDS = ("property", "coverage", "query_id", "merged", "reason", "engine", "time_s",
              "counterexample_x", "counterexample_s")


def report_csv(docs: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for doc in docs:
        for q in doc["queries"]:
            cex = q.get("counterexample")
            w.writerow([doc["property"], doc["coverage"], q["id"], q["merged"]["status"],
                        q["merged"]["reason"], q["merged"]["engine"], q["time_s"],
                        " ".join(repr(v) for v in cex["x"]) if cex else "",
                        " ".join(repr(v) for v in cex["s"]) if cex else ""])
    return buf.getvalue()


def write_csv(docs: Sequence[dict], path: PathLike) -> None:
    atomic_write_text(path, report_csv(docs))


# -- external query bundles ------------------------------------------------------------

def query_slug(query_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", query_id)


def _num(v: float) -> str:
    return repr(float(v))


def export_query(query: Query, directory: PathLike) -> Path:
    """Write ``<slug>.net.json`` (flattened coupled network) and ``<slug>.diffq``.

    The constraint file lists the box of every flattened input (x first, then s),
    the network path relative to the file, one ``lin`` row per output conjunct and
    one ``linin`` row per extra input constraint. Returns the constraint file path.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    slug = query_slug(query.id)
    net_path = d / f"{slug}.net.json"
    save_network(flatten_coupled(query.system), net_path)
    lo, hi = query.input_box()
    lines = ["diffq 1", f"# query {query.id}", f"net {net_path.name}"]
    lines += [f"input {k} {_num(a)} {_num(b)}" for k, (a, b) in enumerate(zip(lo, hi))]
    for row, rhs in zip(query.output_rows, query.output_rhs):
        lines.append("lin " + " ".join(_num(c) for c in row) + f" >= {_num(rhs)}")
    A, b = query.input_constraints()
    for row, rhs in zip(A, b):
        lines.append("linin " + " ".join(_num(c) for c in row) + f" >= {_num(rhs)}")
    path = d / f"{slug}.diffq"
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path


@dataclass
class ExportedQuery:
    query_id: str
    net_path: Path
    lo: np.ndarray
    hi: np.ndarray
    out_rows: np.ndarray       # rows . y >= rhs
    out_rhs: np.ndarray
    in_rows: np.ndarray        # rows . z >= rhs
    in_rhs: np.ndarray


def _parse_row(parts: list[str], where: str) -> tuple[np.ndarray, float]:
    if len(parts) < 3 or parts[-2] not in (">=", "<="):
        raise ResultFormatError(f"{where}: expected '<coeffs> <relop> <rhs>'")
    try:
        c = np.array([float(p) for p in parts[:-2]])
        rhs = float(parts[-1])
    except ValueError as exc:
        raise ResultFormatError(f"{where}: {exc}") from None
    if parts[-2] == "<=":
        c, rhs = -c, -rhs
    return c, rhs


def load_exported_query(path: PathLike) -> ExportedQuery:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "diffq 1":
        raise ResultFormatError(f"{path}: missing 'diffq 1' header")
    qid, net, inputs, outs, ins = "", None, {}, [], []
    for no, raw in enumerate(lines[1:], start=2):
        where = f"{path}:{no}"
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("# query "):
                qid = line[len("# query "):]
            continue
        head, *rest = line.split()
        if head == "net":
            net = path.parent / " ".join(rest)
        elif head == "input":
            if len(rest) != 3:
                raise ResultFormatError(f"{where}: expected 'input <k> <lo> <hi>'")
            inputs[int(rest[0])] = (float(rest[1]), float(rest[2]))
        elif head == "lin":
            outs.append(_parse_row(rest, where))
        elif head == "linin":
            ins.append(_parse_row(rest, where))
        else:
            raise ResultFormatError(f"{where}: unknown directive {head!r}")
    if net is None:
        raise ResultFormatError(f"{path}: no 'net' line")
    if sorted(inputs) != list(range(len(inputs))):
        raise ResultFormatError(f"{path}: input indices are not 0..k-1")
    lo = np.array([inputs[k][0] for k in range(len(inputs))])
    hi = np.array([inputs[k][1] for k in range(len(inputs))])

    def stack(rows, width):
        if not rows:
            return np.zeros((0, width)), np.zeros(0)
        return np.stack([r for r, _ in rows]), np.array([b for _, b in rows])

    orows, orhs = stack(outs, len(outs[0][0]) if outs else 0)
    irows, irhs = stack(ins, len(lo))
    return ExportedQuery(qid, net, lo, hi, orows, orhs, irows, irhs)


def certify_exported(model: Network, eq: ExportedQuery, z, tol: float = CERT_TOL) -> Certification:
    """Replay a stacked (x, s) point against an exported query using the original model."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    n = model.input_width
    if z.shape != (2 * n,) or eq.lo.shape != (2 * n,):
        return Certification(False, f"point width {z.shape[0]} does not match 2 x {n} inputs")
    if not np.all(np.isfinite(z)):
        return Certification(False, "point has non-finite entries")
    for k in range(2 * n):
        if z[k] < eq.lo[k] - tol or z[k] > eq.hi[k] + tol:
            return Certification(False, f"input {k}={z[k]!r} outside [{eq.lo[k]!r}, {eq.hi[k]!r}]")
    for j, (r, b) in enumerate(zip(eq.in_rows, eq.in_rhs)):
        if r @ z - b < -tol:
            return Certification(False, f"input constraint {j} violated by {b - r @ z:.3g}")
    y = np.concatenate([forward(model, z[:n]), forward(model, z[:n] + z[n:])])
    if eq.out_rows.shape[1] not in (0, y.shape[0]):
        return Certification(False, "output constraint width does not match the model")
    for j, (r, b) in enumerate(zip(eq.out_rows, eq.out_rhs)):
        if r @ y - b < -tol:
            return Certification(False, f"output constraint {j} violated by {b - r @ y:.3g}")
    return Certification(True)


def write_result(verdict: Verdict, path: PathLike) -> None:
    """Serialize a verdict in the external result-file format."""
    if verdict.status == SAFE:
        text = "unsat\n"
    elif verdict.status == UNSAFE:
        z = np.concatenate([verdict.counterexample.x, verdict.counterexample.s])
        text = "sat\n" + "".join(f"x {k} {_num(v)}\n" for k, v in enumerate(z))
    else:
        text = "timeout\n"
    atomic_write_text(path, text)


def read_result(path: PathLike) -> tuple[str, Optional[np.ndarray]]:
    """Parse a result file into (``sat``|``unsat``|``timeout``, assignment or None)."""
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0] not in ("sat", "unsat", "timeout"):
        raise ResultFormatError(f"{path}: first line must be sat, unsat or timeout")
    if lines[0] != "sat":
        if len(lines) > 1:
            raise ResultFormatError(f"{path}: unexpected lines after {lines[0]!r}")
        return lines[0], None
    vals = {}
    for no, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if len(parts) != 3 or parts[0] != "x":
            raise ResultFormatError(f"{path}:{no}: expected 'x <k> <value>'")
        try:
            k, v = int(parts[1]), float(parts[2])
        except ValueError as exc:
            raise ResultFormatError(f"{path}:{no}: {exc}") from None
        if k in vals:
            raise ResultFormatError(f"{path}:{no}: input {k} assigned twice")
        vals[k] = v
    if sorted(vals) != list(range(len(vals))) or not vals:
        raise ResultFormatError(f"{path}: assignment must cover inputs 0..k-1")
    return "sat", np.array([vals[k] for k in range(len(vals))])


def import_result(path: PathLike, query: Query, engine: str = "external",
                  tol: float = CERT_TOL) -> Verdict:
    """Result file -> Verdict; ``sat`` assignments must pass replay certification."""
    status, z = read_result(path)
    if status == "unsat":
        return Verdict(SAFE, engine=engine)
    if status == "timeout":
        return Verdict(UNKNOWN, TIMEOUT, engine=engine)
    n = query.n
    if z.shape[0] != 2 * n:
        raise ResultFormatError(f"{path}: assignment has {z.shape[0]} inputs, expected {2 * n}")
    x, s = z[:n], z[n:]
    ok, diag, l1, l2 = replay_check(query.net, query, x, s, tol)
    if not ok:
        return Verdict(UNKNOWN, UNCERTIFIED, engine=engine, notes=[diag])
    if query.pair is not None:
        achieved = (query.pair.i1, query.pair.i2)
    else:
        k = query.mean.mean_index
        achieved = (float(l1[k]), float(l2[k]))
    return Verdict(UNSAFE, counterexample=Counterexample(x, s, l1, l2, query.id, achieved),
                   engine=engine)


def load_counterexample(path: PathLike) -> np.ndarray:
    """Stacked (x, s) point from a JSON counterexample or a ``sat`` result file."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("sat"):
        return read_result(path)[1]
    doc = json.loads(text)
    if "counterexample" in doc:
        doc = doc["counterexample"]
    return np.concatenate([np.asarray(doc["x"], float), np.asarray(doc["s"], float)])

