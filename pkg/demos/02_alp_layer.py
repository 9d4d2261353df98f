"""One ALP layer in isolation.

A batch of tokens is aligned against a local and a global bank. We look at
how the blend weight beta moves the output away from plain token
normalisation, and at how the local bank drifts toward the data under the
moving-average update.
"""

import numpy as np

from fedali.alp import AlpConfig, PrototypeBank, alp_forward_train, init_bank
from fedali.numerics import Tensor

rng = np.random.default_rng(0)
B, Z, d, G = 4, 8, 16, 6
x = rng.standard_normal((B, Z, d)) + 2.0 * rng.standard_normal(d)  # shared offset
local = init_bank(G, d, rng, "local")
glob = init_bank(G, d, rng, "global")
glu = (Tensor(rng.standard_normal((d, 2 * d)) * 0.2), Tensor(np.zeros(2 * d)))

plain = x / np.linalg.norm(x, axis=-1, keepdims=True)
for beta in (0.0, 0.2, 0.5, 1.0):
    out, _ = alp_forward_train(Tensor(x), local, glob, glu, AlpConfig(G=G, beta=beta))
    cos = np.sum(out.data * plain, axis=-1).mean()
    print(f"beta={beta:.1f}: mean cosine to normalised input {cos:.3f}")

mean_dir = x.reshape(-1, d).mean(0)
mean_dir /= np.linalg.norm(mean_dir)
bank = local
cfg = AlpConfig(G=G, gamma=0.9)
print("\nlocal bank alignment with the data mean direction:")
for step in range(0, 31):
    if step % 10 == 0:
        v = bank.vectors / np.linalg.norm(bank.vectors, axis=1, keepdims=True)
        print(f"  step {step:2d}: mean cosine {float((v @ mean_dir).mean()):.3f}")
    _, bank = alp_forward_train(Tensor(x), bank, glob, glu, cfg)
