"""Balanced assignment of embeddings to prototypes with Sinkhorn.

Six unit vectors are matched to three prototypes. Every prototype must
receive the same share of mass, so a prototype that is the nearest
neighbour of most points cannot absorb all of them. Lowering epsilon
sharpens the plan toward a hard balanced assignment.
"""

import numpy as np

from fedali import transport

rng = np.random.default_rng(1)
x = rng.standard_normal((6, 4))
protos = rng.standard_normal((3, 4))

def unit(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


nearest = np.argmax(unit(x) @ unit(protos).T, axis=1)
print("nearest prototype per point:", nearest, "counts", np.bincount(nearest, minlength=3))

for eps in (0.5, 0.05, 0.01):
    plan = transport.transport_plan(x, protos, epsilon=eps, iterations=500)
    assign = transport.hard_assign(plan)
    print(f"\neps={eps}: assignment {assign}, counts {np.bincount(assign, minlength=3)}")
    print(np.array2string(plan.matrix * 6, precision=2, suppress_small=True))

plan = transport.transport_plan(x, protos, epsilon=0.05, iterations=3)
print("\nafter 3 iterations (the layer default):")
print("  row sums x6:", np.round(plan.matrix.sum(1) * 6, 3))
print("  col sums x3:", np.round(plan.matrix.sum(0) * 3, 3))
