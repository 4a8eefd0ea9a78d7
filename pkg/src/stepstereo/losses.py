"""Step targets and the full training loss.

The training signal decomposes a (possibly large) disparity error into a
sequence of bounded per-step targets:

* at full resolution the target for step k moves from the previous estimate
  toward the ground truth by at most ``6m`` (four times the quarter-
  resolution step ceiling of ``1.5m``);
* at quarter resolution the target update is the remaining error to the
  (bilinearly) quarter-sampled ground truth over 4, clipped to ``+-1.5m``.

Both targets are built from the *detached* previous estimate, matching the
update units' own detach convention.  Iterating the quarter target alone
telescopes to the downsampled ground truth in exactly
``ceil(|initial error| / (1.5 m))`` steps, because the clip magnitude never
exceeds the remaining error.

The total loss is::

    total = mean smooth-L1 of the initial estimate           (unbalanced)
          + sum_k gamma^(N-k) * mean cb_smooth_l1(delta_k - delta_target_k)
          + sum_k gamma^(N-k) * mean cb_l1(d_full_k - full_target_k)

with means over valid ground-truth pixels only.  The delta term covers only
stepwise (bounded) steps and can be disabled; full-resolution targets for
unbounded residual steps are the raw ground truth (infinite clip).
"""

from dataclasses import dataclass

import torch

from .errors import ContractViolation
from .fieldops import (
    _resize_values,
    cb_l1,
    cb_smooth_l1,
    clip_symmetric,
    masked_mean,
)


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters: decay gamma, balance exponent h, term switches."""

    gamma: float = 0.9
    h: float = 0.5
    supervise_clips: bool = True
    n_steps: int = 15

    def validate(self):
        if not (0.0 < self.gamma < 1.0):
            raise ContractViolation(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.h < 0:
            raise ContractViolation(f"h must be >= 0, got {self.h}")
        if self.n_steps < 1:
            raise ContractViolation("n_steps must be >= 1")


def loss_weights(gamma, n_steps):
    """Per-step weights (gamma^(N-1), ..., gamma, 1): the last step weighs 1."""
    return [gamma ** (n_steps - k) for k in range(1, n_steps + 1)]


def quarter_ground_truth(d_gt, valid):
    """Quarter-sample the ground truth for the delta targets.

    Values are bilinearly resampled to (H/4, W/4) and divided by 4 (the
    disparity rescale between resolutions).  A quarter pixel is valid only
    if all four full-resolution pixels under its sampling footprint are
    valid, so targets never interpolate across a validity boundary.
    Requires H and W divisible by 4.
    """
    h, w = d_gt.shape[-2], d_gt.shape[-1]
    if h % 4 or w % 4:
        raise ContractViolation("quarter targets require H and W divisible by 4")
    g = _resize_values(d_gt, (h // 4, w // 4)) / 4.0
    # With the align-corners-false convention at scale 1/4, output pixel q
    # samples input positions 4q + 1.5, i.e. exactly input pixels 4q+1, 4q+2.
    v = valid
    v = v[..., 1::4, :] & v[..., 2::4, :]
    v = v[..., :, 1::4] & v[..., :, 2::4]
    return g, v


def segment_target_full(d_gt, d_prev_full, m):
    """Full-resolution moving target: previous estimate plus a +-6m step."""
    prev = d_prev_full.detach()
    return prev + clip_symmetric(d_gt - prev, 6.0 * float(m))


def segment_target_quarter(gt_quarter, d_prev_quarter, m):
    """Quarter-resolution update target: remaining error clipped to +-1.5m.

    ``gt_quarter`` is the already quarter-sampled ground truth over 4 (see
    :func:`quarter_ground_truth`).
    """
    return clip_symmetric(gt_quarter - d_prev_quarter.detach(), 1.5 * float(m))


@dataclass
class LossBreakdown:
    """Scalar total plus the three component sums (all torch scalars)."""

    total: torch.Tensor
    loss_init: torch.Tensor
    loss_delta: torch.Tensor
    loss_full: torch.Tensor


def assemble_loss(trace, d_gt, valid, cfg):
    """Total training loss for one refinement trace against dense/sparse gt.

    ``d_gt`` is (B, 1, H, W) float64, ``valid`` a boolean tensor of the same
    shape with at least one True pixel.  The trace must contain exactly
    ``cfg.n_steps`` steps, produced with the same bound(s) m as the targets
    use here.
    """
    cfg.validate()
    if len(trace.steps) != cfg.n_steps:
        raise ContractViolation(
            f"trace has {len(trace.steps)} steps but the loss expects {cfg.n_steps}"
        )
    if d_gt.shape != trace.d_init_full.shape:
        raise ContractViolation("ground truth shape must match the predictions")
    if valid.shape != d_gt.shape:
        raise ContractViolation("validity mask shape must match the ground truth")

    gt_quarter, valid_quarter = quarter_ground_truth(d_gt, valid)

    loss_init = masked_mean(cb_smooth_l1(trace.d_init_full - d_gt, 0.0), valid)
    loss_delta = torch.zeros((), dtype=d_gt.dtype)
    loss_full = torch.zeros((), dtype=d_gt.dtype)

    prev_full = trace.d_init_full
    prev_quarter = trace.d_init_quarter
    weights = loss_weights(cfg.gamma, cfg.n_steps)
    for step, weight in zip(trace.steps, weights):
        if step.is_stepwise:
            target_full = segment_target_full(d_gt, prev_full, step.m)
            if cfg.supervise_clips:
                target_delta = segment_target_quarter(gt_quarter, prev_quarter, step.m)
                loss_delta = loss_delta + weight * masked_mean(
                    cb_smooth_l1(step.delta - target_delta, cfg.h), valid_quarter
                )
        else:
            target_full = d_gt
        loss_full = loss_full + weight * masked_mean(
            cb_l1(step.d_full - target_full, cfg.h), valid
        )
        prev_full = step.d_full
        prev_quarter = step.d_quarter

    total = loss_init + loss_delta + loss_full
    return LossBreakdown(
        total=total, loss_init=loss_init, loss_delta=loss_delta, loss_full=loss_full
    )
