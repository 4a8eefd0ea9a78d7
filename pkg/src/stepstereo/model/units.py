"""Recurrent update units: the unbounded residual unit and the bounded
stepwise unit.

Both share the same core: a convolutional GRU whose input is the
concatenation of the 18-channel cost lookup, the (detached) current
disparity, and the context features, followed by a two-conv head
``delta_ori = conv3x3(relu(conv3x3(h)))`` with a zero-initialized final
layer (so the first update is exactly zero).

The stepwise unit additionally squashes the raw head output through
``tanh(delta_ori / m) * m * (1 + 0.5 * w)`` with a per-pixel gate
``w = sigmoid(conv1x1(ResBlock(lookup)))`` in (0, 1); the update magnitude is
therefore *strictly* below ``1.5 * m`` for every input and every parameter
setting.  That bound is the architectural contract the rest of the package
(step targets, balanced losses, saturation logging) is built around.

Any module with the same ``forward(hidden, d_quarter, guidance, context)``
signature returning ``(hidden, delta, gate_or_None)`` can be slotted into
the refinement schedule in its place.
"""

import math

import torch
import torch.nn as nn

from ..errors import ContractViolation
from .blocks import (
    ConvGRU,
    ResidualBlock,
    conv1x1,
    conv3x3,
    fan_in_uniform_,
    relu,
    zero_init_,
)
from .cost import LOOKUP_CHANNELS

GATE_CHANNELS = 8  # width of the gate head between the lookup and the 1x1 conv


class _UnitCore(nn.Module):
    """Shared GRU core plus the two-conv residual-disparity head."""

    def __init__(self, hidden_channels, context_channels):
        super().__init__()
        input_ch = LOOKUP_CHANNELS + 1 + context_channels
        self.gru = ConvGRU(hidden_channels, input_ch)
        self.head1 = conv3x3(hidden_channels, hidden_channels)
        self.head2 = conv3x3(hidden_channels, 1)

    def init_parameters(self, generator):
        self.gru.init_parameters(generator)
        fan_in_uniform_(self.head1, generator)
        zero_init_(self.head2)

    def step(self, hidden, d_quarter, guidance, context):
        x = torch.cat([guidance, d_quarter, context], dim=1)
        hidden = self.gru(hidden, x)
        delta_ori = self.head2(relu(self.head1(hidden)))
        return hidden, delta_ori


class GruResidualUnit(nn.Module):
    """Baseline unit: the raw head output is the (unbounded) disparity update."""

    def __init__(self, hidden_channels=32, context_channels=16):
        super().__init__()
        self.core = _UnitCore(hidden_channels, context_channels)

    def init_parameters(self, generator):
        self.core.init_parameters(generator)

    def forward(self, hidden, d_quarter, guidance, context):
        hidden, delta_ori = self.core.step(hidden, d_quarter, guidance, context)
        return hidden, delta_ori, None


class StepwiseUnit(nn.Module):
    """Bounded unit: emits updates with |delta| strictly below 1.5 * m."""

    def __init__(self, m, hidden_channels=32, context_channels=16):
        super().__init__()
        m = float(m)
        if not m > 0.0:
            raise ContractViolation(f"stepwise bound m must be positive, got {m}")
        self.m = m
        self.core = _UnitCore(hidden_channels, context_channels)
        self.gate_res = ResidualBlock(LOOKUP_CHANNELS, GATE_CHANNELS)
        self.gate_out = conv1x1(GATE_CHANNELS, 1)

    def init_parameters(self, generator):
        self.core.init_parameters(generator)
        self.gate_res.init_parameters(generator)
        zero_init_(self.gate_out)  # gate starts at sigmoid(0) = 0.5 everywhere

    def forward(self, hidden, d_quarter, guidance, context):
        hidden, delta_ori = self.core.step(hidden, d_quarter, guidance, context)
        gate = torch.sigmoid(self.gate_out(self.gate_res(guidance)))
        delta = torch.tanh(delta_ori / self.m) * self.m * (1.0 + 0.5 * gate)
        # tanh/sigmoid round to exactly 1.0 once saturated, which would let the
        # product attain the (mathematically open) bound; keep it strict in
        # float64 by nudging those values to the nearest representable inside.
        limit = math.nextafter(1.5 * self.m, 0.0)
        return hidden, delta.clamp(min=-limit, max=limit), gate
