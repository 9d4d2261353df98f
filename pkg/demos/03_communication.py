"""Bytes exchanged per client per round for each strategy.

Prototype banks and the GLU weights make FedAli rounds heavier than FedAvg
rounds; FedPer saves a little by keeping the classifier head at home.
"""

from fedali.federation import comm_cost
from fedali.model import DESK, FULL_SCALE

for title, cfg in (("desk model", DESK), ("full-scale model", FULL_SCALE)):
    base = comm_cost("fedavg", cfg.plain()).total
    print(f"\n{title}")
    print(f"  {'strategy':<10}{'upload':>14}{'download':>14}{'vs fedavg':>11}")
    for name in ("fedavg", "fedprox", "fedper", "fedali", "local"):
        c = comm_cost(name, cfg if name == "fedali" else cfg.plain())
        print(f"  {name:<10}{c.up:>14,}{c.down:>14,}{c.total / base:>10.3f}x")
