"""Correlation cost volume, pooled pyramid level, lookup, initial disparity.

The volume holds, per quarter-resolution pixel, the cosine similarity between
the left feature vector and the right feature vector shifted by each integer
candidate disparity; candidates that would read outside the right frame are
exactly zero.  A second level halves the disparity axis by average pooling.
The lookup gathers both levels at nine integer offsets around the current
estimate (linear interpolation along the disparity axis, clamped at the
ends), producing the 18-channel guidance features consumed by the update
units — channel order is level-major, offset ascending.
"""

from dataclasses import dataclass

import torch

from ..errors import ContractViolation

LOOKUP_RADIUS = 4
LOOKUP_CHANNELS = 2 * (2 * LOOKUP_RADIUS + 1)


@dataclass
class CostVolume:
    """Full and disparity-pooled matching costs, both (B, D, H, W)-shaped."""

    cost: torch.Tensor
    pooled: torch.Tensor

    @property
    def d_levels(self):
        return self.cost.shape[1]


def build_cost_volume(f_left, f_right, d_levels):
    """Cosine-similarity volume over integer disparity candidates.

    cost[b, d, y, x] = <left(b,:,y,x), right(b,:,y,x-d)> after per-pixel L2
    normalization, and exactly 0 where x - d < 0.
    """
    if d_levels < 2:
        raise ContractViolation(f"d_levels must be >= 2, got {d_levels}")
    if f_left.shape != f_right.shape:
        raise ContractViolation("feature maps must share a shape")
    b, c, h, w = f_left.shape
    if d_levels > w:
        raise ContractViolation(
            f"d_levels {d_levels} exceeds the quarter-resolution width {w}"
        )
    nl = f_left / f_left.norm(dim=1, keepdim=True).clamp(min=1e-12)
    nr = f_right / f_right.norm(dim=1, keepdim=True).clamp(min=1e-12)
    planes = []
    for d in range(d_levels):
        plane = torch.zeros(b, h, w, dtype=f_left.dtype)
        if d == 0:
            plane = (nl * nr).sum(dim=1)
        else:
            plane[:, :, d:] = (nl[:, :, :, d:] * nr[:, :, :, :-d]).sum(dim=1)
        planes.append(plane)
    cost = torch.stack(planes, dim=1)

    flat = cost.permute(0, 2, 3, 1).reshape(b * h * w, 1, d_levels)
    pooled = torch.nn.functional.avg_pool1d(flat, kernel_size=2, stride=2)
    pooled = pooled.reshape(b, h, w, -1).permute(0, 3, 1, 2)
    return CostVolume(cost=cost, pooled=pooled)


def _sample_disparity_axis(volume, positions):
    """Linear interpolation of (B, D, H, W) along D at (B, 1, H, W) positions.

    Positions are clamped to [0, D-1], so samples beyond either end repeat
    the end plane.
    """
    d_levels = volume.shape[1]
    pos = positions.clamp(min=0.0, max=float(d_levels - 1))
    if d_levels == 1:
        return volume + 0.0 * pos  # single plane everywhere; zero gradient to pos
    i0 = pos.floor().clamp(max=float(d_levels - 2))
    frac = pos - i0
    idx = i0.long()
    v0 = torch.gather(volume, 1, idx)
    v1 = torch.gather(volume, 1, idx + 1)
    return v0 + frac * (v1 - v0)


def lookup(volume, d_quarter):
    """18-channel guidance features around the current disparity estimate.

    Channels 0..8 sample the full level at d + r, channels 9..17 sample the
    pooled level at d/2 + r, for r = -4..4 ascending.  Differentiable with
    respect to both the volume and the disparity.
    """
    if d_quarter.ndim != 4 or d_quarter.shape[1] != 1:
        raise ContractViolation("lookup expects a (B, 1, H, W) disparity field")
    channels = []
    for r in range(-LOOKUP_RADIUS, LOOKUP_RADIUS + 1):
        channels.append(_sample_disparity_axis(volume.cost, d_quarter + float(r)))
    for r in range(-LOOKUP_RADIUS, LOOKUP_RADIUS + 1):
        channels.append(_sample_disparity_axis(volume.pooled, d_quarter / 2.0 + float(r)))
    return torch.cat(channels, dim=1)


def initial_disparity(volume, temperature):
    """Temperature soft-argmax over the cost volume's disparity axis."""
    temperature = float(temperature)
    if not temperature > 0.0:
        raise ContractViolation(f"temperature must be positive, got {temperature}")
    weights = torch.softmax(volume.cost / temperature, dim=1)
    levels = torch.arange(volume.d_levels, dtype=volume.cost.dtype).view(1, -1, 1, 1)
    return (weights * levels).sum(dim=1, keepdim=True)
