"""Exact rank-R adapters between two small formal-mode models.

Two unrelated random models are generated. Low-rank updates are built block
by block so the adapted frozen model computes exactly the target function.
"""
from outlierfree.lora import (
    check_nonsingularity,
    construct_adapters,
    functionality_gap,
    random_formal_pair,
    verify_theorem,
)
from outlierfree.tensor_core import make_rng, numerical_rank

rng = make_rng(0)
frozen, target = random_formal_pair(rng, dim=4, heads=2, layers=2)
gap = functionality_gap(frozen, target)
print("per-block gaps", gap.gaps, "-> rank needed", gap.required_rank)

for R in (1, 2, 4):
    if R < gap.required_rank:
        print(f"R={R}: below the required rank, no exact construction")
        continue
    if not check_nonsingularity(frozen, target, R).passed:
        print(f"R={R}: non-singularity fails for this pair")
        continue
    ads = construct_adapters(frozen, target, R)
    dev = verify_theorem(frozen, target, ads, trials=20, rng=rng)
    ranks = sorted({numerical_rank(a.delta()) for a in ads.adapters.values()})
    print(f"R={R}: max output deviation {dev:.2e}, adapter ranks {ranks}")
