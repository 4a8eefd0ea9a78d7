"""Differentiable model components (float64, CPU).

Submodules:

* ``blocks`` — deterministic initializers, residual block, convolutional GRU.
* ``encoder`` — quarter-resolution feature/context encoder.
* ``cost`` — correlation cost volume, pooled pyramid level, lookup, initial
  disparity.
* ``upsample`` — x4 disparity upsampling (bilinear or learned convex mask).
* ``units`` — recurrent update units (unbounded residual and bounded
  stepwise).
* ``network`` — the assembled refinement model and its per-step trace.
* ``edges`` — edge estimator, edge ground truth, soft edges, pseudo-labels.
"""

from . import blocks, cost, edges, encoder, network, units, upsample  # noqa: F401
