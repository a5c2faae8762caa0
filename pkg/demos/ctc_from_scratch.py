"""
CTC loss against brute-force enumeration
========================================

Computes the CTC negative log-likelihood of a short label sequence with the
forward-backward recursion, checks it against summing every alignment
explicitly, then decodes the frame posteriors greedily.
"""

import numpy as np

from spkmtl.ctc import collapse, ctc_bruteforce, ctc_loss, greedy_decode

rng = np.random.default_rng(0)

# 6 frames, 2 content symbols plus blank (the last column)
logits = rng.normal(size=(6, 3))
log_probs = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
labels = [0, 1]

loss, grad = ctc_loss(log_probs, labels)
print(f"dynamic programming: {loss:.12f}")
print(f"enumeration:         {ctc_bruteforce(log_probs, labels):.12f}")

# the gradient w.r.t. log-probs is minus the expected occupancy of each cell,
# so every frame's row sums to -1
print("row sums of the gradient:", np.round(grad.sum(axis=1), 12))

# alignments collapse by merging repeats and dropping blanks
print("collapse([0, 0, 2, 1, 1, 2]) ->", collapse([0, 0, 2, 1, 1, 2], blank=2))
print("greedy hypothesis:", greedy_decode(log_probs, len(log_probs)))
