"""
Hard Concrete gates and the sparsity they imply
===============================================

A gate sample is a stretched, clamped sigmoid of logistic noise, so it lands
on exactly 0 or exactly 1 with positive probability.
"""

# the package stores one log_alpha per prune group
import numpy as np
from kdprune.gates import GateSet, hard_concrete_prob_nonzero
from kdprune.tensor import CounterRNG, Tensor

# probability that a gate is open, in closed form
la = np.array([-2.0, 0.0, 2.0])
print("P(z > 0):", hard_concrete_prob_nonzero(Tensor(la)).data.round(4))

# compare with samples drawn through the package's counter-based RNG
gs = GateSet({"demo": 1_000_000}, init_log_alpha=0.0).train()
z = gs.sample(CounterRNG(0), step=1)["demo"].data
print("sampled P(z > 0) at log_alpha=0:", (z > 0).mean().round(4))
print("mass at exactly 0 and 1:", (z == 0).mean().round(3), (z == 1).mean().round(3))

# expected sparsity weights each group's closing probability by its size
gs = GateSet({"heads": 4, "ffn": 8}, counts={"heads": np.full(4, 1024.0), "ffn": np.full(8, 64.0)})
gs.log_alpha["heads"].data = np.array([3.0, 3.0, -3.0, -3.0])
print("expected sparsity:", round(float(gs.expected_sparsity().data), 4))

# at evaluation time the gate is deterministic
print("eval gates:", gs.eval().deterministic()["heads"].data)
