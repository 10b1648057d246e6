"""
Scaffold, specialize, reconcile
===============================

Runs the three training paradigms on the seed-0 synthetic suite with the
same gradient-step budget and prints per-stage accuracies.
"""

from ssrkit.toy import DOMAINS, SsrConfig, run_paradigm
from ssrkit.toy.pipeline import transfer_routes

cfg = SsrConfig()


def table(result):
    print(f"\n[{result.paradigm}]  total steps {result.total_steps}")
    print(f"{'stage':<10}" + "".join(f"{d:>10}" for d in DOMAINS))
    for stage in result.models:
        print(f"{stage:<10}" + "".join(f"{100 * result.accuracy(stage, d):>10.1f}" for d in DOMAINS))


results = {p: run_paradigm(p, cfg) for p in ("ssr", "sequential", "joint")}
for r in results.values():
    table(r)

# %%
# Forgetting: how much spatial accuracy each paradigm keeps.
ssr, seq = results["ssr"], results["sequential"]
expert = ssr.accuracy("spatial", "spatial")
print("\nspatial expert %.1f | after reconcile %.1f | after sequential uav stage %.1f" % (
    100 * expert, 100 * ssr.accuracy("merge", "spatial"), 100 * seq.accuracy("uav", "spatial")))

# %%
# Does a spatial scaffold help the downstream domains?
routes = transfer_routes(cfg)
for m in ("ad", "uav", "embodied"):
    print(f"{m:<9} from base {100 * routes[f'base->{m}']:.1f}   from spatial {100 * routes[f'spatial->{m}']:.1f}")
print("base model on embodied: %.1f" % (100 * routes["base"]["embodied"]))
