"""Command-line driver: ``diffrl {zoo,decompose,verify,sweep,certify}``.

Exit codes: 0 every property safe, 1 some property violated, 2 some property unknown
and none violated, 3 usage or input error, 4 engine conflict.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .babverify import Budget, BabConfig
from .encoder import generate_queries
from .orchestrator import (
    SAFE_AGG, VIOLATED, Conflict, ExportedQuery, ResultFormatError, certify_exported, export_query,
    load_counterexample, load_exported_query, parse_engines, report_dict, verify_property,
    write_csv, write_report,
)
from .propspec import AT_LEAST, STRICT, PropertyError, PropertySpec, load_property
from .tensornet import Discrete, Network, NetworkFormatError, load_network, save_network
from .zoo import ZooError, ZooSpec, build, preset_properties

log = logging.getLogger("diffrl")

EXIT_SAFE, EXIT_VIOLATED, EXIT_UNKNOWN, EXIT_ERROR, EXIT_CONFLICT = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _coverages(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad coverage list {text!r}") from None
    if not vals:
        raise UsageError("empty coverage list")
    return vals


def infer_zoo_spec(net: Network) -> ZooSpec:
    """Recover the preset family from a network's interface shape."""
    if isinstance(net.decoder, Discrete):
        if net.input_width == 25 and net.output_width == 6:
            return ZooSpec("pensieve")
        if net.input_width == 19 and net.output_width in (15, 30):
            return ZooSpec("cmars", actions=net.output_width)
    elif net.input_width % 3 == 0:
        return ZooSpec("aurora", history=net.input_width // 3)
    raise UsageError(f"no preset matches model {net.name!r} "
                     f"({net.input_width} inputs, {net.output_width} outputs)")


def resolve_properties(args, net: Network, coverage: float) -> list[PropertySpec]:
    if args.property:
        props = [load_property(p) for p in args.property]
    else:
        family, _, only = args.preset.partition(":")
        spec = infer_zoo_spec(net)
        if spec.family != family:
            raise UsageError(f"preset {family!r} does not fit this model (looks like {spec.family})")
        props = preset_properties(spec)
        if only:
            props = [p for p in props if p.name == only]
            if not props:
                raise UsageError(f"preset {family!r} has no property {only!r}")
    rule = {"at-least": AT_LEAST, "strict": STRICT}[args.violation_rule] if args.violation_rule else None
    out = []
    for p in props:
        kw = {"coverage_pct": coverage}
        if args.clamp_perturbed:
            kw["clamp_perturbed"] = True
        if rule is not None:
            kw["violation_rule"] = rule
        out.append(p.with_options(**kw))
    return out


def _budget(args) -> Budget:
    return Budget(args.timeout, args.max_subdomains if args.max_subdomains > 0 else None)


def _exit_for(aggregates: Sequence[str]) -> int:
    if any(a == VIOLATED for a in aggregates):
        return EXIT_VIOLATED
    if all(a == SAFE_AGG for a in aggregates):
        return EXIT_SAFE
    return EXIT_UNKNOWN


def _run_coverage(args, net: Network, coverage: float) -> tuple[dict, list[dict]]:
    engines = parse_engines(args.engines, BabConfig())
    docs = []
    for prop in resolve_properties(args, net, coverage):
        res = verify_property(net, prop, engines, _budget(args), args.workers, args.seed)
        doc = report_dict(res, args.model, timing=not args.deterministic)
        docs.append(doc)
        s, u, k = res.counts
        if s + u + k == 0:
            print(f"{prop.name}: property holds vacuously: no invalid output pair exists")
        print(f"{prop.name} @ {coverage:g}%: {res.aggregate} "
              f"(safe {s}, unsafe {u}, unknown {k}, total {s + u + k})")
    return {"schema": 1, "tool_version": __version__, "reports": docs}, docs


def cmd_verify(args) -> int:
    covs = _coverages(args.coverage)
    if len(covs) != 1:
        raise UsageError("verify takes a single coverage; use sweep for several")
    net = load_network(args.model)
    bundle, docs = _run_coverage(args, net, covs[0])
    if args.out:
        write_report(bundle, args.out)
    if args.csv:
        write_csv(docs, args.csv)
    return _exit_for([d["aggregate"] for d in docs])


def _check_nesting(net: Network, args, all_docs: dict) -> list[str]:
    """Every counterexample found at a smaller coverage must replay at every larger one."""
    problems = []
    covs = sorted(all_docs)
    for i, c in enumerate(covs):
        for doc in all_docs[c]:
            for row in doc["queries"]:
                cex = row.get("counterexample")
                if cex is None:
                    continue
                z = np.concatenate([np.asarray(cex["x"]), np.asarray(cex["s"])])
                for big in covs[i + 1:]:
                    prop = next(p for p in resolve_properties(args, net, big) if p.name == doc["property"])
                    q = next(q for q in generate_queries(net, prop) if q.id == row["id"])
                    lo, hi = q.input_box()
                    A, b = q.input_constraints()
                    eq = ExportedQuery(q.id, Path(), lo, hi, q.output_rows, q.output_rhs, A, b)
                    c_ok = certify_exported(net, eq, z)
                    if not c_ok:
                        problems.append(f"{row['id']} from {c:g}% fails at {big:g}%: {c_ok.diagnostic}")
    return problems


def cmd_sweep(args) -> int:
    covs = _coverages(args.coverage)
    net = load_network(args.model)
    out = Path(args.out) if args.out else None
    all_docs, aggs, csv_docs = {}, [], []
    for c in covs:
        bundle, docs = _run_coverage(args, net, c)
        all_docs[c] = docs
        aggs += [d["aggregate"] for d in docs]
        csv_docs += docs
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            write_report(bundle, out / f"report_cov{c:g}.json")
    if args.csv:
        write_csv(csv_docs, args.csv)
    problems = _check_nesting(net, args, all_docs)
    for p in problems:
        print(f"nesting inconsistency: {p}", file=sys.stderr)
    if problems:
        return EXIT_ERROR
    return _exit_for(aggs)


def cmd_decompose(args) -> int:
    net = load_network(args.model)
    covs = _coverages(args.coverage)
    if len(covs) != 1:
        raise UsageError("decompose takes a single coverage")
    listing, total = [], 0
    for prop in resolve_properties(args, net, covs[0]):
        queries = generate_queries(net, prop)
        total += len(queries)
        print(f"{prop.name}: {len(queries)} queries")
        for q in queries:
            if q.pair is not None:
                acts = net.decoder.action_values
                desc = f"{acts[q.pair.i1]:g} -> {acts[q.pair.i2]:g}"
            else:
                desc = f"mean {q.mean.direction}"
            print(f"  {q.id}  {desc}")
            listing.append({"id": q.id, "property": prop.name, "describe": desc})
            if args.export:
                export_query(q, args.export)
    if args.out:
        write_report({"schema": 1, "tool_version": __version__, "queries": listing}, args.out)
    if total == 0:
        print("property holds vacuously: no invalid output pair exists")
    return EXIT_SAFE


def cmd_zoo(args) -> int:
    spec = ZooSpec(args.family, args.seed, hidden=args.hidden, depth=args.depth,
                   actions=args.actions, history=args.history)
    net = build(spec)
    save_network(net, args.out)
    print(f"wrote {spec.label} ({net.parameter_count()} parameters) to {args.out}")
    return 0


def cmd_certify(args) -> int:
    net = load_network(args.model)
    eq = load_exported_query(args.query)
    z = load_counterexample(args.cex)
    c = certify_exported(net, eq, z, args.tol)
    if c.accepted:
        print("accepted")
        return 0
    print(f"rejected: {c.diagnostic}")
    return 1


def _add_run_flags(p: argparse.ArgumentParser, solving: bool = True) -> None:
    p.add_argument("--model", required=True, help="network file (JSON)")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--property", action="append", help="property file (repeatable)")
    g.add_argument("--preset", help="family preset, e.g. pensieve or cmars:robustness")
    p.add_argument("--coverage", default="100", help="percent, comma-separated for sweep")
    p.add_argument("--clamp-perturbed", action="store_true",
                   help="keep x + s inside the operational domain")
    p.add_argument("--violation-rule", choices=("at-least", "strict"))
    p.add_argument("--out")
    if solving:
        p.add_argument("--engines", default="native", help="native,external:<dir>")
        p.add_argument("--timeout", type=float, default=600.0, help="seconds per query and engine")
        p.add_argument("--max-subdomains", type=int, default=Budget().max_subdomains,
                       help="native branch-and-bound budget per query (0 = unlimited)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=None, help="parallel workers (DIFFRL_THREADS caps)")
        p.add_argument("--csv")
        p.add_argument("--deterministic", action="store_true",
                       help="write zero timings so reports are byte-stable")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffrl", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"diffrl {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="verify properties at one coverage level")
    _add_run_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="verify at several coverage levels, one report each")
    _add_run_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("decompose", help="list the feasibility queries without solving")
    _add_run_flags(p, solving=False)
    p.add_argument("--export", help="also write query bundles into this directory")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("zoo", help="build a seeded case-study network")
    p.add_argument("family", choices=("pensieve", "cmars", "aurora"))
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--actions", type=int, default=15)
    p.add_argument("--history", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_zoo)

    p = sub.add_parser("certify", help="replay a counterexample against an exported query")
    p.add_argument("--model", required=True)
    p.add_argument("--query", required=True, help=".diffq constraint file")
    p.add_argument("--cex", required=True, help="counterexample JSON or sat result file")
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_certify)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Conflict as exc:
        dump = Path(getattr(args, "out", None) or ".").with_suffix(".conflict.json")
        write_report(exc.to_dict(), dump)
        print(f"error: {exc} (artifacts in {dump})", file=sys.stderr)
        return EXIT_CONFLICT
    except (UsageError, PropertyError, NetworkFormatError, ResultFormatError, ZooError,
            ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
