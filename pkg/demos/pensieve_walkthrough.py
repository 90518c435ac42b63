"""Decompose and verify the Pensieve properties on a small randomly initialised policy."""
import sys

from diffrl.babverify import Budget
from diffrl.encoder import generate_queries
from diffrl.orchestrator import NativeEngine, verify_property
from diffrl.zoo import PENSIEVE_BITRATES, ZooSpec, build, preset_properties

coverage = float(sys.argv[1]) if len(sys.argv) > 1 else 60.0
spec = ZooSpec("pensieve", hidden=8, seed=1)
net = build(spec)
print(f"{net.name}: {net.parameter_count()} parameters")

for prop in preset_properties(spec, coverage_pct=coverage):
    queries = generate_queries(net, prop)
    pairs = sorted({(q.pair.i1, q.pair.i2) for q in queries})
    print(f"\n{prop.name} @ {coverage:g}%: {len(queries)} queries")
    for i1, i2 in pairs:
        print(f"  {PENSIEVE_BITRATES[i1]:g} -> {PENSIEVE_BITRATES[i2]:g} kbps")
    res = verify_property(net, prop, [NativeEngine()], Budget(120, 3000), workers=1, seed=0)
    print(f"  aggregate {res.aggregate}, safe/unsafe/unknown = {res.counts}")
    for cex in res.counterexamples[:1]:
        print(f"  witness {cex.query_id}: actions {cex.achieved}")
