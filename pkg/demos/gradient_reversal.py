"""
Gradient reversal in the autodiff graph
=======================================

A reversal layer is the identity going forward and multiplies the incoming
gradient by a negative factor going back.  The parameters below it therefore
receive exactly the negated gradient of the discriminator loss, while the
discriminator itself is trained normally.
"""

import numpy as np

from spkmtl import graph as G
from spkmtl.objectives import grl_adaptive, grl_standard

rng = np.random.default_rng(1)
x = rng.normal(size=(4, 3))
w_below = rng.normal(size=(3, 3))
w_above = rng.normal(size=(3, 2))


def loss_with(reversal):
    below = G.param(w_below, "below")
    above = G.param(w_above, "above")
    hidden = G.tanh(G.matmul(x, below))
    out = G.matmul(reversal(hidden), above)
    return G.backward(G.mean(out * out))


plain = loss_with(G.identity)
standard = loss_with(lambda h: grl_standard(h, 1.0))
adaptive = loss_with(lambda h: grl_adaptive(h, batch_mean_p2=0.25, beta_adapt=1.0))

print("above, unchanged:      ", np.array_equal(standard["above"], plain["above"]))
print("below, exactly negated:", np.array_equal(standard["below"], -plain["below"]))
print("below, scaled by -0.25:", np.allclose(adaptive["below"], -0.25 * plain["below"]))

# a finite-difference check refuses graphs whose backward is not a derivative
try:
    G.finite_diff_check(lambda p: G.sum(grl_standard(p["w"])), {"w": w_below})
except G.GraphError as exc:
    print("finite differences:", exc)
