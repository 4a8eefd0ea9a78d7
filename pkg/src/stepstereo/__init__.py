"""Stepwise disparity refinement for rectified stereo pairs.

The model regresses disparity through a sequence of bounded update steps:
a shared recurrent unit proposes a correction at each step, and a gated
tanh keeps every correction's magnitude strictly below 1.5x a configured
bound.  Training decomposes large disparity errors into per-step clipped
target segments, weighted to counter the long tail of near-zero residuals.
A companion edge estimator supports fine-tuning on sparse ground truth by
supplying dense background pseudo-labels.

Layout:

- :mod:`stepstereo.fieldops` — clipping, balanced losses, image-field ops
- :mod:`stepstereo.scenes` — synthetic stereo scene generator and datasets
- :mod:`stepstereo.model` — encoder, cost volume, update units, upsampling,
  edge estimator
- :mod:`stepstereo.losses` — per-step targets and the assembled loss
- :mod:`stepstereo.train` / :mod:`stepstereo.adapt` — pre-training and
  pseudo-label fine-tuning loops
- :mod:`stepstereo.metrics` — evaluation metrics and region-split reports
- :mod:`stepstereo.gradcheck` — finite-difference gradient validation
- :mod:`stepstereo.cli` — the ``stepstereo`` command
"""

from .errors import AcceptanceFailure, ContractViolation

__version__ = "0.1.0"

__all__ = ["AcceptanceFailure", "ContractViolation", "__version__"]
