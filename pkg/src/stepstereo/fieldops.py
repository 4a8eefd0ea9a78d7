"""Field-level math shared by every other module.

All operations act on ``torch.Tensor`` fields (float64 throughout the
package) and are pure functions.  The gradient conventions at non-smooth
points are fixed here, once, so that losses, update units, and the
finite-difference checks all agree on them:

* ``clip_symmetric`` passes gradient 1 strictly inside the bound and 0 at or
  beyond it (straight-through inside, hard stop at saturation).
* ``balanced_weight`` is held constant (gradient 0) once ``|x|`` is small
  enough to hit the 1.5 ceiling; this also keeps the weight finite at
  ``x = 0``.
* ``|x|`` uses subgradient 0 at ``x = 0``.

Finite-difference checks must therefore avoid the measure-zero kink sets
(``|x| = 0``, clip saturation boundaries, the quadratic/linear switch of the
smooth losses); everywhere else the analytic gradients are exact.
"""

import torch
import torch.nn.functional as F

from .errors import ContractViolation

# Prewitt derivative kernel (x direction); the y kernel is its transpose.
PREWITT_KERNEL_X = (
    (-1.0, 0.0, 1.0),
    (-1.0, 0.0, 1.0),
    (-1.0, 0.0, 1.0),
)


class _ClipSymmetric(torch.autograd.Function):
    """Clamp to [-bound, bound] with gradient 1 strictly inside, 0 at/beyond."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x.abs() < bound)
        return x.clamp(min=-bound, max=bound)

    @staticmethod
    def backward(ctx, grad_output):
        (inside,) = ctx.saved_tensors
        return grad_output * inside, None


def clip_symmetric(x, bound):
    """Clamp every element of ``x`` to the closed interval [-bound, bound].

    ``bound`` must be strictly positive.  Elements already inside the
    interval pass through unchanged (bit-exactly).
    """
    bound = float(bound)
    if not bound > 0.0:
        raise ContractViolation(f"clip bound must be positive, got {bound}")
    if not torch.is_tensor(x):
        x = torch.as_tensor(x, dtype=torch.float64)
    return _ClipSymmetric.apply(x, bound)


def balanced_weight(x, h):
    """Per-element loss weight ``clip_0^1.5(|x|^-h)``.

    Small residuals are up-weighted (ceiling 1.5), large residuals are
    down-weighted; ``h = 0`` degenerates to a constant weight of 1.  The
    value at ``x = 0`` is the continuous limit 1.5.  The ceiling is realised
    by clamping ``|x|`` from below at ``1.5**(-1/h)`` before the power, which
    keeps the weight finite and its gradient zero throughout the saturated
    region.
    """
    h = float(h)
    if h < 0.0:
        raise ContractViolation(f"balance exponent h must be >= 0, got {h}")
    if not torch.is_tensor(x):
        x = torch.as_tensor(x, dtype=torch.float64)
    if h == 0.0:
        return torch.ones_like(x)
    floor = 1.5 ** (-1.0 / h)
    return x.abs().clamp(min=floor) ** (-h)


def cb_l1(x, h):
    """Balanced L1: ``balanced_weight(x, h) * |x|`` elementwise."""
    if not torch.is_tensor(x):
        x = torch.as_tensor(x, dtype=torch.float64)
    return balanced_weight(x, h) * x.abs()


def cb_smooth_l1(x, h):
    """Balanced smooth-L1: ``w * 0.5 x**2`` for ``|x| < 1``, ``w * |x|`` otherwise.

    The two branches are scaled by the same :func:`balanced_weight`; with
    ``h = 0`` this is the plain unshifted piecewise loss (quadratic inside the
    unit interval, absolute value outside).
    """
    if not torch.is_tensor(x):
        x = torch.as_tensor(x, dtype=torch.float64)
    mag = x.abs()
    core = torch.where(mag < 1.0, 0.5 * x * x, mag)
    return balanced_weight(x, h) * core


def smooth_l1(x):
    """Standard (shifted) smooth-L1: ``0.5 x**2`` for ``|x| < 1``, ``|x| - 0.5`` otherwise.

    This is the continuous Huber-style variant used by the edge losses; the
    balanced losses above use the unshifted piecewise form instead.  The two
    coincide on ``|x| <= 1``.
    """
    if not torch.is_tensor(x):
        x = torch.as_tensor(x, dtype=torch.float64)
    mag = x.abs()
    return torch.where(mag < 1.0, 0.5 * x * x, mag - 0.5)


def _as_batched_2d(field):
    """View a (..., H, W) tensor as (N, 1, H, W), returning the lead shape."""
    if field.ndim < 2:
        raise ContractViolation("field operations need at least a 2-D tensor")
    lead = field.shape[:-2]
    h, w = field.shape[-2], field.shape[-1]
    return field.reshape(-1, 1, h, w), lead


def prewitt_magnitude(d):
    """L2 magnitude of the 3x3 Prewitt gradient with replicate padding.

    Accepts any ``(..., H, W)`` tensor with ``H, W >= 3``; the result has the
    same shape.  Differentiable wherever the magnitude is nonzero.
    """
    if not torch.is_tensor(d):
        d = torch.as_tensor(d, dtype=torch.float64)
    if d.ndim < 2 or d.shape[-2] < 3 or d.shape[-1] < 3:
        raise ContractViolation("prewitt_magnitude needs a field of at least 3x3")
    x, lead = _as_batched_2d(d)
    kx = torch.tensor(PREWITT_KERNEL_X, dtype=x.dtype).view(1, 1, 3, 3)
    ky = kx.transpose(-1, -2)
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    gx = F.conv2d(padded, kx)
    gy = F.conv2d(padded, ky)
    mag = torch.sqrt(gx * gx + gy * gy)
    return mag.reshape(*lead, d.shape[-2], d.shape[-1])


def _resize_values(field, out_hw):
    """Bilinear resample of a (..., H, W) tensor to an explicit output size."""
    x, lead = _as_batched_2d(field)
    out = F.interpolate(x, size=out_hw, mode="bilinear", align_corners=False)
    return out.reshape(*lead, out_hw[0], out_hw[1])


def _resize_mask(mask, out_hw):
    """Nearest-neighbour resample of a boolean (..., H, W) mask."""
    x, lead = _as_batched_2d(mask.to(torch.float64))
    out = F.interpolate(x, size=out_hw, mode="nearest")
    return (out > 0.5).reshape(*lead, out_hw[0], out_hw[1])


def resize_bilinear(values, scale, valid=None):
    """Rescale a field spatially by a positive factor.

    Values are bilinearly interpolated (align-corners-false convention) and
    are *not* rescaled in magnitude — converting disparities between
    resolutions is the caller's responsibility.  The optional validity mask
    is resampled by nearest neighbour.  Output dimensions ``floor(dim*scale)``
    must be at least 1.
    """
    scale = float(scale)
    if not scale > 0.0:
        raise ContractViolation(f"resize scale must be positive, got {scale}")
    if not torch.is_tensor(values):
        values = torch.as_tensor(values, dtype=torch.float64)
    h, w = values.shape[-2], values.shape[-1]
    out_h, out_w = int(h * scale), int(w * scale)
    if out_h < 1 or out_w < 1:
        raise ContractViolation(
            f"resize of {h}x{w} by {scale} yields degenerate size {out_h}x{out_w}"
        )
    out_values = _resize_values(values, (out_h, out_w))
    if valid is None:
        return out_values
    if not torch.is_tensor(valid):
        valid = torch.as_tensor(valid)
    if valid.shape != values.shape:
        raise ContractViolation("validity mask shape must match values shape")
    return out_values, _resize_mask(valid, (out_h, out_w))


def masked_mean(values, valid):
    """Mean of ``values`` over the True entries of ``valid``.

    Rejects an all-False mask: every loss term in this package is defined as
    a mean over labelled pixels and has no meaningful empty-mask value.
    """
    if valid.shape != values.shape:
        raise ContractViolation("masked_mean: mask shape must match values shape")
    mask = valid.to(values.dtype)
    count = mask.sum()
    if count.item() == 0:
        raise ContractViolation("masked_mean over an empty mask")
    return (values * mask).sum() / count
