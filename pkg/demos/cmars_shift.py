"""How the CMARS verdicts move as the input region grows from 60% to 100% coverage."""
from diffrl.babverify import Budget
from diffrl.orchestrator import NativeEngine, verify_property
from diffrl.zoo import COVERAGE_LEVELS, ZooSpec, build, preset_properties

spec = ZooSpec("cmars", depth=2, actions=15, seed=0)
net = build(spec)
engine = NativeEngine()

print(f"{'property':32s} " + " ".join(f"{c:>6g}%" for c in COVERAGE_LEVELS))
for k, name in enumerate(p.name for p in preset_properties(spec)):
    cells = []
    for cov in COVERAGE_LEVELS:
        prop = preset_properties(spec, coverage_pct=cov)[k]
        res = verify_property(net, prop, [engine], Budget(30, 500), seed=0)
        cells.append(f"{res.counts[1]:>3d}/{sum(res.counts):<3d}")
    print(f"{name:32s} " + " ".join(cells))
print("\ncells are unsafe/total queries; a small budget leaves the rest Safe or Unknown")
