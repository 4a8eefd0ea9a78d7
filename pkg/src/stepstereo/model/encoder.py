"""Quarter-resolution image encoder (shared by features and context).

Layer stack: two stride-2 3x3 convs (ReLU after the first) followed by one
pre-activation residual block.  The receptive field works out to 23 input
pixels (radius 11): rf = 3 after conv1 (jump 2), 7 after conv2 (jump 4),
then +8 per residual conv.  Inputs are replicate-padded on the bottom/right
to multiples of 4; callers crop full-resolution outputs back with the
returned original size.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import ResidualBlock, fan_in_uniform_, relu

RECEPTIVE_RADIUS = 11  # input pixels to either side that can reach one feature


def pad_to_multiple_of_4(img):
    """Replicate-pad (B, C, H, W) on the bottom/right to H, W % 4 == 0."""
    h, w = img.shape[-2], img.shape[-1]
    pad_h = (-h) % 4
    pad_w = (-w) % 4
    if pad_h or pad_w:
        img = F.pad(img, (0, pad_w, 0, pad_h), mode="replicate")
    return img, (h, w)


class FeatureEncoder(nn.Module):
    """RGB image -> (C, H/4, W/4) feature map."""

    def __init__(self, out_channels=16):
        super().__init__()
        self.conv1 = nn.Conv2d(3, out_channels, 3, stride=2, padding=1).double()
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1).double()
        self.res = ResidualBlock(out_channels, out_channels)

    def init_parameters(self, generator):
        fan_in_uniform_(self.conv1, generator)
        fan_in_uniform_(self.conv2, generator)
        self.res.init_parameters(generator)

    def forward(self, img):
        x = relu(self.conv1(img))
        x = self.conv2(x)
        return self.res(x)
