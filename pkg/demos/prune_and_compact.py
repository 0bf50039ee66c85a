"""
From gates to a smaller model
=============================

Closed gates remove whole heads, hidden units, channels or ranks; open
fractional gates are folded into the next layer's weights.
"""

import numpy as np
from kdprune.config import ModelConfig
from kdprune.models.conformer import CascadedEncoder
from kdprune.models.groups import build_prune_groups, factorize_encoder, prunable_census
from kdprune.pipeline.report import census_and_flops
from kdprune.pipeline.surgeon import surgeon
from kdprune.tensor import Tensor

cfg = ModelConfig()
rng = np.random.default_rng(1)

for method in ("l0", "lrf"):
    enc = CascadedEncoder(cfg, seed=0)
    if method == "lrf":
        enc = factorize_encoder(enc)
    groups = build_prune_groups(enc, method)

    # a gate snapshot: close about half of every owner's groups
    z = {}
    for g in groups:
        z.setdefault(g.owner, []).append(0.0 if rng.random() < 0.5 else rng.uniform(0.3, 1.0))
    z = {k: np.array(v) for k, v in z.items()}

    compact = surgeon(enc, z)
    x = rng.normal(size=(2, 12, cfg.input_dim))
    masked = enc(x, None, {k: Tensor(v) for k, v in z.items()}).noncausal.data
    pruned = compact(x).noncausal.data
    print(method, "groups:", len(groups), "max |masked - compact|:", np.abs(masked - pruned).max())
    print("   prunable params", prunable_census(enc), "->", prunable_census(compact))
    print("   MFLOPs at T=100", round(census_and_flops(enc)["mflops"], 3), "->",
          round(census_and_flops(compact)["mflops"], 3))
