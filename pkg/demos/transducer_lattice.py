"""
The transducer lattice by hand
==============================

Every alignment of T frames and U labels is a monotone path through a
T x (U+1) grid that ends with a blank.  The loss sums over all of them.
"""

import itertools

import numpy as np
from scipy.special import log_softmax, logsumexp
from kdprune.models.transducer import build_lattice, rnnt_nll
from kdprune.tensor import Tensor

# a small random lattice: 3 frames, 2 labels, vocabulary of 3 plus blank
rng = np.random.default_rng(0)
lp = log_softmax(rng.normal(size=(3, 3, 4)), axis=-1)
y = [2, 0]

# enumerate alignments: choose which of the first T+U-1 slots carry labels
paths = []
for slots in itertools.combinations(range(4), 2):
    t = u = 0
    total = 0.0
    for k in range(5):
        if k in slots:
            total += lp[t, u, y[u]]
            u += 1
        else:
            total += lp[t, u, 3]
            t += 1
    paths.append(total)
print(len(paths), "alignments, brute-force NLL:", -logsumexp(paths))

# the forward recursion gives the same number
print("lattice NLL:", float(rnnt_nll(Tensor(lp), y).data))

# alpha and beta tables agree on the total
lat = build_lattice(lp, y)
print("alpha total:", lat.log_likelihood_alpha(), "beta total:", lat.log_likelihood_beta())

# uniform emissions with T=2, U=1: two alignments of (1/3)^3 each
u = np.full((2, 2, 3), np.log(1 / 3))
print("uniform case:", float(rnnt_nll(Tensor(u), [0]).data), "= log 13.5 =", np.log(13.5))
