"""Continuous-action properties: the mean-separation anchor and the sign-flip probability it implies."""
from diffrl.babverify import Budget
from diffrl.orchestrator import NativeEngine, verify_property
from diffrl.propspec import mu_for_confidence, sign_flip_probability
from diffrl.zoo import AURORA_SIGMA, ZooSpec, build, preset_properties

mu = AURORA_SIGMA / 2
print(f"sigma={AURORA_SIGMA}, mu={mu}: P(both samples flip sign) = {sign_flip_probability(mu, AURORA_SIGMA):.5f}")
for q in (0.3, 0.4, 0.45):
    print(f"  mu for P={q}: {mu_for_confidence(q, AURORA_SIGMA):.4f}")

spec = ZooSpec("aurora", history=3, hidden=16, seed=0)
net = build(spec)
for prop in preset_properties(spec, coverage_pct=80):
    res = verify_property(net, prop, [NativeEngine()], Budget(60, 2000), seed=0)
    print(f"{prop.name}: {res.aggregate} {res.counts}")
    for cex in res.counterexamples[:1]:
        print(f"  means {cex.logits1[0]:+.4f} -> {cex.logits2[0]:+.4f}")
