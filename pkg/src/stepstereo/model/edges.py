"""Edge estimation, edge ground truth, soft edges, and pseudo-labels.

The estimator maps a full-resolution disparity map (plus the RGB view) to an
edge probability map: a residual block lifts the disparity to 29 channels,
a second residual block fuses those with the image into 16 channels, and a
1x1 conv + sigmoid produces values in (0, 1).

Two details make this head trainable in practice.  The disparity is
standardized per sample before the first block — edges are a property of
local contrast, not of the absolute disparity level, and standardizing also
keeps the features stable when the disparity range shifts between domains.
And the head starts from a negative bias so the initial output matches a
low edge base rate instead of 0.5; with a mean-seeking regression loss and
mostly-background targets, starting at the base rate avoids the early
collapse where the sigmoid saturates toward all-zero and stops learning.

Ground-truth edges are Prewitt gradient magnitudes of the true disparity
thresholded at 5; the differentiable relaxation passes the same magnitude
through ``sigmoid(10 * (magnitude - 5))`` instead, so the two agree in the
hard limit wherever the magnitude is not exactly 5.

Background pseudo-labels keep the pixels whose predicted edge probability
falls below a threshold ``t``: those are the locations (and values) treated
as reliable non-edge supervision during fine-tuning.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from ..errors import ContractViolation
from ..fieldops import masked_mean, prewitt_magnitude, smooth_l1
from .blocks import ResidualBlock, conv1x1, fan_in_uniform_

EDGE_FEATURE_CHANNELS = 29
EDGE_REFINE_CHANNELS = 16
EDGE_GT_THRESHOLD = 5.0
SOFT_EDGE_SHARPNESS = 10.0
# sigmoid(-2.9) ~ 0.05: start predictions near a sparse-edge base rate.
EDGE_HEAD_BIAS = -2.9
# Floor for the per-sample disparity std so flat maps standardize to zero.
EDGE_STD_FLOOR = 1e-6


@dataclass
class PseudoLabel:
    """Sub-threshold edge predictions kept as background supervision."""

    values: torch.Tensor  # (H, W) or (B, 1, H, W) float64 edge probabilities
    valid: torch.Tensor  # bool, same shape: values < t
    t: float


class EdgeEstimator(nn.Module):
    """Disparity (+ RGB) -> edge probability map, full resolution."""

    def __init__(self, use_disparity=True):
        super().__init__()
        self.use_disparity = bool(use_disparity)
        self.disp_block = ResidualBlock(1, EDGE_FEATURE_CHANNELS)
        self.fuse_block = ResidualBlock(EDGE_FEATURE_CHANNELS + 3, EDGE_REFINE_CHANNELS)
        self.head = conv1x1(EDGE_REFINE_CHANNELS, 1)

    def init_parameters(self, generator):
        self.disp_block.init_parameters(generator)
        self.fuse_block.init_parameters(generator)
        fan_in_uniform_(self.head, generator)
        with torch.no_grad():
            self.head.bias.fill_(EDGE_HEAD_BIAS)

    def to_meta(self):
        return {"edge.use_disparity": self.use_disparity}

    @staticmethod
    def from_meta(meta):
        return EdgeEstimator(use_disparity=meta.get("edge.use_disparity", True))

    def forward(self, d_full, rgb):
        """(B, 1, H, W) disparity and (B, 3, H, W) image -> (B, 1, H, W) edges."""
        if d_full.shape[-2:] != rgb.shape[-2:]:
            raise ContractViolation("disparity and image sizes must match")
        if not self.use_disparity:
            d_full = torch.zeros_like(d_full)
        mean = d_full.mean(dim=(-2, -1), keepdim=True)
        std = d_full.std(dim=(-2, -1), keepdim=True, correction=0)
        f_edge = self.disp_block((d_full - mean) / std.clamp(min=EDGE_STD_FLOOR))
        f_refine = self.fuse_block(torch.cat([f_edge, rgb], dim=1))
        return torch.sigmoid(self.head(f_refine))


def edge_gt_extract(d_gt):
    """Binary ground-truth edges: Prewitt magnitude of a dense disparity > 5."""
    if not torch.is_tensor(d_gt):
        d_gt = torch.as_tensor(d_gt, dtype=torch.float64)
    mag = prewitt_magnitude(d_gt)
    return (mag > EDGE_GT_THRESHOLD).to(torch.float64)


def soft_edge_of_disparity(d_pred):
    """Differentiable edge map: sigmoid(10 * (Prewitt magnitude - 5))."""
    mag = prewitt_magnitude(d_pred)
    return torch.sigmoid(SOFT_EDGE_SHARPNESS * (mag - EDGE_GT_THRESHOLD))


def pseudo_label_select(edge_pred, t):
    """Keep pixels with predicted edge probability strictly below ``t``.

    Valid sets are monotone in ``t``: a larger threshold keeps a superset.
    """
    t = float(t)
    if not (0.0 < t <= 1.0):
        raise ContractViolation(f"pseudo-label threshold must lie in (0, 1], got {t}")
    if not torch.is_tensor(edge_pred):
        edge_pred = torch.as_tensor(edge_pred, dtype=torch.float64)
    return PseudoLabel(values=edge_pred.clone(), valid=edge_pred < t, t=t)


def edge_loss(edge_a, edge_b, valid=None):
    """Mean smooth-L1 between two edge maps over the valid pixels.

    Returns ``(loss, n_valid)``; with zero valid pixels the loss is defined
    as 0.0 and ``n_valid == 0`` serves as the warning flag (the returned
    tensor is detached from any graph in that case).
    """
    if not torch.is_tensor(edge_a):
        edge_a = torch.as_tensor(edge_a, dtype=torch.float64)
    if not torch.is_tensor(edge_b):
        edge_b = torch.as_tensor(edge_b, dtype=torch.float64)
    if edge_a.shape != edge_b.shape:
        raise ContractViolation("edge maps must share a shape")
    if valid is None:
        valid = torch.ones_like(edge_a, dtype=torch.bool)
    if valid.shape != edge_a.shape:
        raise ContractViolation("validity mask must match the edge map shape")
    n_valid = int(valid.sum().item())
    if n_valid == 0:
        return torch.zeros((), dtype=edge_a.dtype), 0
    return masked_mean(smooth_l1(edge_a - edge_b), valid), n_valid
