"""Shared building blocks and the package-wide initialization scheme.

Initialization is explicit and generator-driven so that a model seed fully
determines every parameter:

* recurrent (GRU gate) conv weights: orthogonal rows;
* all other conv weights: uniform in ``+-1/sqrt(fan_in)``;
* all biases: zero;
* designated output heads: zero weights, so the module's initial output is
  exactly its neutral value (zero residual, 0.5 probability, uniform mask).

Everything is float64.
"""

from contextlib import contextmanager

import torch
import torch.nn as nn

_RELU_SIGNS = None


@contextmanager
def relu_sign_trace(record):
    """Record the sign pattern (input > 0) of every ReLU evaluated inside.

    Finite-difference probes compare the patterns at nearby points: equal
    patterns witness that the probe segment crossed no ReLU kink, so the
    function is smooth there and central differences are trustworthy.
    """
    global _RELU_SIGNS
    previous = _RELU_SIGNS
    _RELU_SIGNS = record
    try:
        yield record
    finally:
        _RELU_SIGNS = previous


def relu(x):
    """ReLU routed through one site so smoothness probes can witness kinks."""
    if _RELU_SIGNS is not None:
        _RELU_SIGNS.append(x.detach() > 0)
    return torch.relu(x)


def conv3x3(in_ch, out_ch):
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1).double()


def conv1x1(in_ch, out_ch):
    return nn.Conv2d(in_ch, out_ch, kernel_size=1).double()


def zero_init_(conv):
    """Zero a head's weight and bias so its initial output is exactly zero."""
    with torch.no_grad():
        conv.weight.zero_()
        if conv.bias is not None:
            conv.bias.zero_()


def fan_in_uniform_(conv, generator):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias."""
    with torch.no_grad():
        fan_in = conv.weight.shape[1] * conv.weight.shape[2] * conv.weight.shape[3]
        bound = fan_in ** -0.5
        conv.weight.uniform_(-bound, bound, generator=generator)
        if conv.bias is not None:
            conv.bias.zero_()


def orthogonal_(conv, generator):
    """Orthogonal rows for a conv weight viewed as (out, in*kh*kw), zero bias."""
    with torch.no_grad():
        w = conv.weight
        rows = w.shape[0]
        cols = w.numel() // rows
        n = max(rows, cols)
        a = torch.randn(n, min(rows, cols), generator=generator, dtype=torch.float64)
        q, r = torch.linalg.qr(a)
        q = q * torch.sign(torch.diagonal(r))
        if rows < cols:
            q = q.t()
        w.view(rows, cols).copy_(q[:rows, :cols])
        if conv.bias is not None:
            conv.bias.zero_()


class ResidualBlock(nn.Module):
    """Pre-activation residual block: x + conv(relu(conv(relu(x)))).

    The skip is the identity when the channel counts match and a 1x1
    projection otherwise.
    """

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = conv3x3(in_ch, out_ch)
        self.conv2 = conv3x3(out_ch, out_ch)
        self.skip = None if in_ch == out_ch else conv1x1(in_ch, out_ch)

    def init_parameters(self, generator):
        fan_in_uniform_(self.conv1, generator)
        fan_in_uniform_(self.conv2, generator)
        if self.skip is not None:
            fan_in_uniform_(self.skip, generator)

    def forward(self, x):
        y = self.conv1(relu(x))
        y = self.conv2(relu(y))
        shortcut = x if self.skip is None else self.skip(x)
        return shortcut + y


class ConvGRU(nn.Module):
    """Convolutional gated recurrent cell over (hidden, input) feature maps."""

    def __init__(self, hidden_ch, input_ch):
        super().__init__()
        self.convz = conv3x3(hidden_ch + input_ch, hidden_ch)
        self.convr = conv3x3(hidden_ch + input_ch, hidden_ch)
        self.convq = conv3x3(hidden_ch + input_ch, hidden_ch)

    def init_parameters(self, generator):
        orthogonal_(self.convz, generator)
        orthogonal_(self.convr, generator)
        orthogonal_(self.convq, generator)

    def forward(self, h, x):
        hx = torch.cat([h, x], dim=1)
        z = torch.sigmoid(self.convz(hx))
        r = torch.sigmoid(self.convr(hx))
        q = torch.tanh(self.convq(torch.cat([r * h, x], dim=1)))
        return (1.0 - z) * h + z * q
