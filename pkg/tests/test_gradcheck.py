import math

import pytest
import torch

from stepstereo.gradcheck import (
    OPERATIONS,
    check_operation,
    directional_relative_error,
    run_all,
)
from stepstereo.model.blocks import relu


class _WrongGrad(torch.autograd.Function):
    """Forward x**2 with a deliberately wrong backward (3x instead of 2x)."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * 3.0 * x


class TestDirectionalProbe:
    def test_correct_gradient_matches_finite_differences(self, torch_gen):
        x = (torch.randn(6, generator=torch_gen, dtype=torch.float64) + 2.0)
        x.requires_grad_()
        rel = directional_relative_error(
            lambda: (x * x).sum(), [x], torch.Generator().manual_seed(5)
        )
        assert rel is not None and rel < 1e-6

    def test_wrong_gradient_is_detected(self, torch_gen):
        x = (torch.randn(6, generator=torch_gen, dtype=torch.float64) + 2.0)
        x.requires_grad_()
        rel = directional_relative_error(
            lambda: _WrongGrad.apply(x).sum(), [x], torch.Generator().manual_seed(5)
        )
        assert rel is not None and rel > 0.1

    def test_probe_across_relu_kink_is_excluded(self):
        # the probe step is 1e-3, so an input this close to zero guarantees
        # the two evaluation points fall on different sides of the kink
        x = torch.tensor([1e-6], dtype=torch.float64, requires_grad=True)
        rel = directional_relative_error(
            lambda: relu(x).sum(), [x], torch.Generator().manual_seed(5)
        )
        assert rel is None

    def test_probe_away_from_relu_kink_is_kept(self):
        x = torch.tensor([0.7], dtype=torch.float64, requires_grad=True)
        rel = directional_relative_error(
            lambda: relu(x).sum(), [x], torch.Generator().manual_seed(5)
        )
        assert rel is not None and rel < 1e-9


class TestOperationSweep:
    def test_registry_lists_every_checked_operation(self):
        assert set(OPERATIONS) == {
            "encode_features",
            "build_cost_volume",
            "lookup",
            "initial_disparity",
            "stepwise_update",
            "upsample_disparity",
            "edge_estimate",
            "soft_edge_of_disparity",
            "cb_l1",
            "cb_smooth_l1",
            "composed_refinement_step",
        }

    @pytest.mark.parametrize("name", ["cb_l1", "lookup", "edge_estimate"])
    def test_single_operation_passes(self, name):
        result = check_operation(name, instances=3)
        assert result.passed
        assert result.instances == 3
        assert math.isfinite(result.max_rel_err)

    def test_run_all_covers_the_registry(self):
        results = run_all(instances=2)
        assert [r.name for r in results] == list(OPERATIONS)
        assert all(r.passed for r in results)
