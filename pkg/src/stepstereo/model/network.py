"""The assembled refinement network and its per-step trace.

One forward pass encodes both views, builds the cost volume, reads an
initial disparity off it by temperature soft-argmax, and then runs the
update schedule: per step, look the volume up around the current (detached)
estimate, apply the step's unit, accumulate the update, clamp at zero
(disparities are non-negative), and upsample to full resolution.  Every
intermediate full-resolution map is returned so the loss can supervise the
whole sequence.

The incoming disparity is detached at each step — gradients reach a step
only through its own update (and the recurrent hidden state), never through
the accumulated estimate.

Schedules list unit kinds per step; unbounded residual units must strictly
precede bounded stepwise units (the two trainable unit instances are shared
across their steps, as usual for recurrent refinement).
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from ..errors import ContractViolation
from .cost import build_cost_volume, initial_disparity, lookup
from .encoder import FeatureEncoder, pad_to_multiple_of_4
from .units import GruResidualUnit, StepwiseUnit
from .upsample import DisparityUpsampler

KIND_GRU = "gru_residual"
KIND_STEPWISE = "stepwise"


@dataclass(frozen=True)
class UpdateUnitConfig:
    """One schedule entry: unit kind, bound m (stepwise only), hidden width."""

    kind: str
    m: float = None
    hidden_channels: int = 32

    def validate(self):
        if self.kind not in (KIND_GRU, KIND_STEPWISE):
            raise ContractViolation(f"unknown update unit kind {self.kind!r}")
        if self.kind == KIND_STEPWISE:
            if self.m is None or not float(self.m) > 0.0:
                raise ContractViolation("stepwise units need a positive bound m")


def make_schedule(num_gru, num_sru, m, hidden_channels=32):
    """num_gru unbounded steps followed by num_sru bounded steps."""
    if num_gru < 0 or num_sru < 0:
        raise ContractViolation("unit counts must be non-negative")
    schedule = [UpdateUnitConfig(KIND_GRU, None, hidden_channels)] * num_gru
    schedule += [UpdateUnitConfig(KIND_STEPWISE, float(m), hidden_channels)] * num_sru
    return schedule


def validate_schedule(schedule):
    """Reject empty schedules and any stepwise->residual interleaving."""
    if len(schedule) == 0:
        raise ContractViolation("refinement schedule must not be empty")
    seen_stepwise = False
    for cfg in schedule:
        cfg.validate()
        if cfg.kind == KIND_STEPWISE:
            seen_stepwise = True
        elif seen_stepwise:
            raise ContractViolation(
                "residual units must strictly precede stepwise units"
            )
    hidden = {cfg.hidden_channels for cfg in schedule}
    if len(hidden) != 1:
        raise ContractViolation("all schedule entries must share hidden_channels")
    ms = {float(cfg.m) for cfg in schedule if cfg.kind == KIND_STEPWISE}
    if len(ms) > 1:
        raise ContractViolation("all stepwise entries must share the bound m")


@dataclass
class StepTrace:
    """Outputs of one refinement step (quarter and full resolution)."""

    delta: torch.Tensor  # (B, 1, H/4, W/4) this step's update (pre-clamp)
    d_quarter: torch.Tensor  # (B, 1, H/4, W/4) state after the step
    d_full: torch.Tensor  # (B, 1, H, W) upsampled disparity
    gate: torch.Tensor  # (B, 1, H/4, W/4) stepwise gate, or None
    is_stepwise: bool
    m: float  # bound of this step's unit, or None


@dataclass
class RefinementTrace:
    """Initial estimate plus every refinement step, in order."""

    d_init_quarter: torch.Tensor
    d_init_full: torch.Tensor
    steps: list

    @property
    def final_full(self):
        return self.steps[-1].d_full if self.steps else self.d_init_full

    @property
    def final_quarter(self):
        return self.steps[-1].d_quarter if self.steps else self.d_init_quarter


def clip_saturation_fraction(trace):
    """Fraction of stepwise update pixels with |delta| > 0.99 * 1.5m."""
    total = 0
    saturated = 0
    for step in trace.steps:
        if not step.is_stepwise:
            continue
        total += step.delta.numel()
        saturated += int((step.delta.abs() > 0.99 * 1.5 * step.m).sum().item())
    return saturated / total if total else 0.0


class StereoModel(nn.Module):
    """Feature encoders + cost volume + recurrent refinement + upsampling."""

    def __init__(
        self,
        feat_channels=16,
        hidden_channels=32,
        d_levels=7,
        temperature=1.0,
        num_gru=0,
        num_sru=15,
        m=2.0,
        upsample_mode="convex",
        seed=0,
    ):
        super().__init__()
        self.schedule = make_schedule(num_gru, num_sru, m, hidden_channels)
        validate_schedule(self.schedule)
        self.hparams = {
            "feat_channels": feat_channels,
            "hidden_channels": hidden_channels,
            "d_levels": d_levels,
            "temperature": temperature,
            "num_gru": num_gru,
            "num_sru": num_sru,
            "m": float(m) if num_sru else None,
            "upsample_mode": upsample_mode,
            "seed": seed,
        }
        self.d_levels = d_levels
        self.temperature = float(temperature)
        self.fnet = FeatureEncoder(feat_channels)
        self.cnet = FeatureEncoder(feat_channels)
        self.gru_unit = (
            GruResidualUnit(hidden_channels, feat_channels) if num_gru else None
        )
        self.sru_unit = (
            StepwiseUnit(m, hidden_channels, feat_channels) if num_sru else None
        )
        self.upsampler = DisparityUpsampler(feat_channels, upsample_mode)
        self.hidden_channels = hidden_channels

        generator = torch.Generator().manual_seed(int(seed))
        self.fnet.init_parameters(generator)
        self.cnet.init_parameters(generator)
        if self.gru_unit is not None:
            self.gru_unit.init_parameters(generator)
        if self.sru_unit is not None:
            self.sru_unit.init_parameters(generator)
        self.upsampler.init_parameters(generator)

    def to_meta(self):
        return {f"model.{k}": v for k, v in self.hparams.items()}

    @staticmethod
    def from_meta(meta):
        kwargs = {
            k.split(".", 1)[1]: v for k, v in meta.items() if k.startswith("model.")
        }
        if kwargs.get("m") is None:
            kwargs.pop("m", None)
        return StereoModel(**kwargs)

    def forward(self, left, right):
        """Run the full pipeline; returns a :class:`RefinementTrace`.

        ``left``/``right`` are (B, 3, H, W) float64 images in [0, 1]; sizes
        that are not multiples of 4 are replicate-padded internally and all
        full-resolution outputs are cropped back to (H, W).
        """
        left_p, (h, w) = pad_to_multiple_of_4(left)
        right_p, _ = pad_to_multiple_of_4(right)
        f_left = self.fnet(left_p)
        f_right = self.fnet(right_p)
        context = self.cnet(left_p)
        volume = build_cost_volume(f_left, f_right, self.d_levels)

        up_weights = self.upsampler.prepare(f_left)

        def up(d_quarter):
            return self.upsampler.apply(d_quarter, up_weights)[:, :, :h, :w]

        d = initial_disparity(volume, self.temperature)
        trace = RefinementTrace(d_init_quarter=d, d_init_full=up(d), steps=[])
        hidden = torch.zeros(
            left.shape[0],
            self.hidden_channels,
            f_left.shape[-2],
            f_left.shape[-1],
            dtype=left.dtype,
        )
        for cfg in self.schedule:
            unit = self.sru_unit if cfg.kind == KIND_STEPWISE else self.gru_unit
            d_detached = d.detach()
            guidance = lookup(volume, d_detached)
            hidden, delta, gate = unit(hidden, d_detached, guidance, context)
            d = (d_detached + delta).clamp(min=0.0)
            trace.steps.append(
                StepTrace(
                    delta=delta,
                    d_quarter=d,
                    d_full=up(d),
                    gate=gate,
                    is_stepwise=cfg.kind == KIND_STEPWISE,
                    m=cfg.m,
                )
            )
        return trace
