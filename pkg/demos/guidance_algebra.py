"""How the dual-scale guidance and the multi-reference ensemble combine branches.

A stub denoiser returns a constant per branch, so every guided prediction can be
checked by hand:

    eps = (1 - s_i) * eps(z, -, -) + (s_i - s_c) * eps(z, lq, -) + s_c * eps(z, lq, c)

With several references only the conditional branch is averaged.

    python demos/guidance_algebra.py
"""

import torch

from refface.encoders import CompositeContext
from refface.sampler import ReferenceSet, cfg_epsilon, multi_ref_epsilon

UNCOND, LQ_ONLY = 0.0, 1.0


def stub(z_t, z_lq, ctx, t):
    if ctx is None:
        return torch.full_like(z_t, UNCOND if z_lq is None else LQ_ONLY)
    # The conditional branch echoes the reference's first token value.
    return ctx.tokens[:, :1, :1].reshape(-1, 1, 1, 1).expand_as(z_t).clone()


def reference(value):
    return CompositeContext(torch.full((1, 2, 1), value), torch.ones(1, 2, dtype=torch.bool))


z = torch.zeros(1, 3, 2, 2)
print("single reference with conditional value 2.0")
print(f"{'s_i':>5} {'s_c':>5} {'guided':>8} {'by hand':>8}")
for s_i, s_c in [(1.0, 1.0), (1.0, 0.0), (1.2, 1.2), (1.5, 1.0), (2.0, 0.0)]:
    out = cfg_epsilon(stub, z, z, reference(2.0), 1, s_i, s_c)[0, 0, 0, 0].item()
    hand = (1 - s_i) * UNCOND + (s_i - s_c) * LQ_ONLY + s_c * 2.0
    print(f"{s_i:5.1f} {s_c:5.1f} {out:8.3f} {hand:8.3f}")

values = [2.0, 4.0, -1.0]
refs = ReferenceSet([reference(v) for v in values])
out = multi_ref_epsilon(stub, z, z, refs, 1, 1.2, 1.2)[0, 0, 0, 0].item()
print(f"\nthree references {values}: guided {out:.3f}, "
      f"by hand {(1 - 1.2) * UNCOND + 1.2 * sum(values) / len(values):.3f}")

shuffled = ReferenceSet([reference(v) for v in reversed(values)])
same = torch.equal(multi_ref_epsilon(stub, z, z, shuffled, 1, 1.2, 1.2), multi_ref_epsilon(stub, z, z, refs, 1, 1.2, 1.2))
print(f"reference order changes nothing (bitwise): {same}")
