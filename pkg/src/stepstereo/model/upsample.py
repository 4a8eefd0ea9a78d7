"""x4 disparity upsampling: values are scaled by 4, then spatially enlarged.

Two modes share the same bilinear base map ``B = bilinear_x4(4 * d)``:

* ``bilinear`` returns ``B`` directly.
* ``convex`` returns, at every full-resolution pixel, a convex combination of
  the 3x3 neighbourhood of ``B`` (replicate-padded).  The nine weights per
  pixel come from a small head on the quarter-resolution feature map, pixel-
  shuffled to full resolution and soft-maxed.  The head's final conv is
  zero-initialized, so the initial weights are uniform and the initial output
  is exactly the 3x3 box-filtered bilinear map.  Convexity keeps the output
  inside ``4 * [min(d), max(d)]`` for any parameters.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import conv1x1, conv3x3, fan_in_uniform_, relu, zero_init_

UPSAMPLE_FACTOR = 4


def bilinear_x4(d_quarter):
    """(B, 1, H, W) quarter disparity -> (B, 1, 4H, 4W) full-resolution values."""
    h, w = d_quarter.shape[-2], d_quarter.shape[-1]
    return F.interpolate(
        4.0 * d_quarter,
        size=(UPSAMPLE_FACTOR * h, UPSAMPLE_FACTOR * w),
        mode="bilinear",
        align_corners=False,
    )


class DisparityUpsampler(nn.Module):
    """Maps quarter-resolution disparity to full resolution (see module doc)."""

    def __init__(self, feat_channels=16, mode="convex", head_channels=32):
        super().__init__()
        if mode not in ("bilinear", "convex"):
            raise ValueError(f"unknown upsampling mode {mode!r}")
        self.mode = mode
        if mode == "convex":
            self.head1 = conv3x3(feat_channels, head_channels)
            self.head2 = conv1x1(head_channels, 9 * UPSAMPLE_FACTOR ** 2)
        else:
            self.head1 = None
            self.head2 = None

    def init_parameters(self, generator):
        if self.mode == "convex":
            fan_in_uniform_(self.head1, generator)
            zero_init_(self.head2)

    def prepare(self, f_left):
        """Per-pixel convex weights from the feature map (None for bilinear).

        The weights depend only on the features, so a refinement loop that
        upsamples many estimates of the same image computes them once.
        """
        if self.mode == "bilinear":
            return None
        logits = self.head2(relu(self.head1(f_left)))
        logits = F.pixel_shuffle(logits, UPSAMPLE_FACTOR)  # (B, 9, 4H, 4W)
        return torch.softmax(logits, dim=1)

    def apply(self, d_quarter, weights):
        base = bilinear_x4(d_quarter)
        if weights is None:
            return base
        b, _, h4, w4 = base.shape
        neighbours = F.unfold(F.pad(base, (1, 1, 1, 1), mode="replicate"), kernel_size=3)
        neighbours = neighbours.reshape(b, 9, h4, w4)
        return (weights * neighbours).sum(dim=1, keepdim=True)

    def forward(self, d_quarter, f_left):
        return self.apply(d_quarter, self.prepare(f_left))
