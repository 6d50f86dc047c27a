"""Relation matrices and their spectra on a small residual network.

Walks through one sample: its layer states, the inner-product relation
matrix between them, the singular values the alignment loss matches, and
how far those singular values can move when the matrix is perturbed.
"""

import numpy as np

from relcil.backbone import Backbone, BackboneConfig
from relcil.numerics import singular_values
from relcil.relation import relation_matrix, sv_align_loss, weyl_check, weyl_sweep

np.set_printoptions(precision=3, suppress=True)

cfg = BackboneConfig(input_dim=4, width=8, layers=4, rank=2)
bb = Backbone(cfg, seed=1)
x = np.random.default_rng(0).normal(size=4)

trace = bb.forward(x, horizon=0)
print("layer-state norms z^0..z^L:", np.linalg.norm(trace.z, axis=1))

r_old = relation_matrix(trace, "inner")
print("\nrelation matrix (layers 1..L):\n", r_old.entries)
print("singular values:", singular_values(r_old.entries))

# one task adapter with a nonzero B changes every layer after the first
bb.add_task_adapter(1)
bb.adapters[0].B = np.random.default_rng(1).normal(scale=0.4, size=bb.adapters[0].B.shape)
bb.invalidate()
r_new = relation_matrix(bb.forward(x, horizon=1), "inner")
print("\nafter the adapter, singular values:", singular_values(r_new.entries))
print("alignment loss between the two:", sv_align_loss(r_old, r_new))

# a symmetric perturbation moves each singular value by at most ||E||_F
E = r_new.entries - r_old.entries
rep = weyl_check(r_old.entries, E)
print(f"\nlargest singular-value shift {rep.max_gap:.4f} <= ||E||_F {rep.perturbation_norm:.4f}: {rep.holds}")

sweep = weyl_sweep(2000)
print(f"random sweep: {sweep.violations} violations in {sweep.cases} pairs")
