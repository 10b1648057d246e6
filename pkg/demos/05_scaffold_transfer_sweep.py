"""
Scaffold transfer under geometric shift
=======================================

A probe trained on decoded scaffold geometry is evaluated while the
observation channel rotates away from the scaffold one (delta) and while the
decoder is perturbed (eps_g).
"""

from ssrkit.interference import scaffold_transfer_experiment

rep = scaffold_transfer_experiment(seed=0)
print(rep.summary())
print("\n delta   risk")
for d, r in zip(rep.deltas, rep.risks):
    print(f"{d:6.2f}  {r:.4f}  " + "#" * int(60 * r))
print("\n eps_g   risk    excess   2*L*eps")
for e, r, x in zip(rep.eps_g, rep.eps_risks, rep.eps_excess):
    print(f"{e:6.2f}  {r:.4f}  {x:+.4f}  {2 * rep.lipschitz_probe * e:.4f}")
