import math

import pytest
import torch

from stepstereo.errors import ContractViolation
from stepstereo.fieldops import (
    balanced_weight,
    cb_l1,
    cb_smooth_l1,
    clip_symmetric,
    masked_mean,
    prewitt_magnitude,
    resize_bilinear,
    smooth_l1,
)


def t(*values):
    return torch.tensor(values, dtype=torch.float64)


class TestClipSymmetric:
    def test_values(self):
        x = t(-5.0, -2.0, -0.5, 0.0, 0.5, 2.0, 5.0)
        out = clip_symmetric(x, 2.0)
        assert torch.equal(out, t(-2.0, -2.0, -0.5, 0.0, 0.5, 2.0, 2.0))

    def test_bound_must_be_positive(self):
        with pytest.raises(ContractViolation):
            clip_symmetric(t(1.0), 0.0)
        with pytest.raises(ContractViolation):
            clip_symmetric(t(1.0), -3.0)

    def test_gradient_inside_one_outside_zero(self):
        x = t(-5.0, -2.0, -1.9999, 0.0, 1.0, 2.0, 7.0).requires_grad_()
        (grad,) = torch.autograd.grad(clip_symmetric(x, 2.0).sum(), x)
        # Strictly inside: 1.  At the bound and beyond: 0.
        assert torch.equal(grad, t(0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0))


class TestBalancedWeight:
    def test_h_zero_is_all_ones(self):
        x = t(-3.0, 0.0, 0.1, 100.0)
        assert torch.equal(balanced_weight(x, 0.0), torch.ones_like(x))

    def test_negative_h_rejected(self):
        with pytest.raises(ContractViolation):
            balanced_weight(t(1.0), -0.5)

    def test_power_law_above_ceiling_region(self):
        # |x|^(-h) wherever that stays below the ceiling of 1.5
        x = t(1.0, 4.0, 9.0)
        w = balanced_weight(x, 0.5)
        assert torch.allclose(w, t(1.0, 0.5, 1.0 / 3.0), rtol=0, atol=1e-15)

    def test_ceiling_value_and_region(self):
        h = 0.5
        floor = 1.5 ** (-1.0 / h)  # below this |x|, the weight is capped
        x = t(0.0, floor / 2, floor, 2 * floor)
        w = balanced_weight(x, h)
        assert w[0] == 1.5 and w[1] == 1.5
        assert math.isclose(float(w[2]), 1.5, rel_tol=1e-15)
        assert float(w[3]) < 1.5

    def test_weights_in_range(self):
        x = torch.linspace(-50, 50, 1001, dtype=torch.float64)
        for h in (0.1, 0.5, 1.0, 2.0):
            w = balanced_weight(x, h)
            assert float(w.max()) <= 1.5 and float(w.min()) > 0.0

    def test_no_gradient_in_capped_region(self):
        x = t(0.1).requires_grad_()  # well below the h=0.5 ceiling point
        (grad,) = torch.autograd.grad(cb_l1(x, 0.5).sum(), x)
        # capped weight acts as the constant 1.5 -> d/dx (1.5 * |x|) = 1.5
        assert float(grad) == 1.5


class TestBalancedLosses:
    def test_cb_l1_spec_point(self):
        assert float(cb_l1(t(4.0), 0.5)) == 2.0  # 4^(-0.5) * 4
        assert float(cb_l1(t(0.0), 0.5)) == 0.0

    def test_cb_smooth_l1_quadratic_point(self):
        # |x| = 0.5: weight sqrt(2), core 0.5 * 0.25
        expected = math.sqrt(2.0) / 8.0
        assert math.isclose(float(cb_smooth_l1(t(0.5), 0.5)), expected, rel_tol=1e-15)

    def test_cb_smooth_l1_linear_point(self):
        assert float(cb_smooth_l1(t(4.0), 0.5)) == 2.0  # 0.5 * 4

    def test_h_zero_equals_plain_losses(self):
        x = torch.linspace(-6, 6, 4001, dtype=torch.float64)
        assert torch.equal(cb_l1(x, 0.0), x.abs())
        plain = torch.where(x.abs() < 1.0, 0.5 * x * x, x.abs())
        assert float((cb_smooth_l1(x, 0.0) - plain).abs().max()) < 1e-15

    def test_zero_residual_gradient_is_zero(self):
        x = t(0.0).requires_grad_()
        (grad,) = torch.autograd.grad(cb_l1(x, 0.5).sum(), x)
        assert float(grad) == 0.0
        x = t(0.0).requires_grad_()
        (grad,) = torch.autograd.grad(cb_smooth_l1(x, 0.5).sum(), x)
        assert float(grad) == 0.0

    def test_nonnegative(self):
        x = torch.linspace(-9, 9, 999, dtype=torch.float64)
        for h in (0.0, 0.5, 1.0):
            assert float(cb_l1(x, h).min()) >= 0.0
            assert float(cb_smooth_l1(x, h).min()) >= 0.0


class TestSmoothL1:
    def test_branches(self):
        # shifted form: quadratic below 1, |x| - 0.5 above
        assert float(smooth_l1(t(0.5))) == 0.125
        assert float(smooth_l1(t(4.0))) == 3.5
        assert float(smooth_l1(t(-4.0))) == 3.5
        assert float(smooth_l1(t(0.0))) == 0.0

    def test_continuous_at_switch(self):
        eps = 1e-9
        below = float(smooth_l1(t(1.0 - eps)))
        above = float(smooth_l1(t(1.0 + eps)))
        assert abs(below - above) < 1e-8


class TestPrewittMagnitude:
    def test_constant_field_is_zero(self):
        d = torch.full((8, 10), 7.0, dtype=torch.float64)
        assert torch.equal(prewitt_magnitude(d), torch.zeros(8, 10, dtype=torch.float64))

    def test_vertical_step_of_two(self):
        # columns 0..2 at 0, columns 3..5 at 2: flanking columns see 3*(2-0)=6
        d = torch.zeros(5, 6, dtype=torch.float64)
        d[:, 3:] = 2.0
        mag = prewitt_magnitude(d)
        assert torch.all(mag[:, 2] == 6.0) and torch.all(mag[:, 3] == 6.0)
        assert torch.all(mag[:, :2] == 0.0) and torch.all(mag[:, 4:] == 0.0)

    def test_vertical_step_of_one(self):
        d = torch.zeros(5, 6, dtype=torch.float64)
        d[:, 3:] = 1.0
        mag = prewitt_magnitude(d)
        assert float(mag.max()) == 3.0

    def test_horizontal_step(self):
        d = torch.zeros(6, 5, dtype=torch.float64)
        d[3:, :] = 2.0
        mag = prewitt_magnitude(d)
        assert torch.all(mag[2, :] == 6.0) and torch.all(mag[3, :] == 6.0)

    def test_replicate_padding_at_border(self):
        # A ramp has constant gradient; replicate padding halves the response
        # at the first/last column but must not invent spurious structure.
        d = torch.arange(7, dtype=torch.float64).repeat(5, 1)
        mag = prewitt_magnitude(d)
        assert torch.all(mag[:, 1:-1] == 6.0)
        assert torch.all(mag[:, 0] == 3.0) and torch.all(mag[:, -1] == 3.0)

    def test_small_input_rejected(self):
        with pytest.raises(ContractViolation):
            prewitt_magnitude(torch.zeros(2, 5, dtype=torch.float64))

    def test_batched_shapes(self):
        d = torch.zeros(2, 1, 6, 6, dtype=torch.float64)
        assert prewitt_magnitude(d).shape == (2, 1, 6, 6)


class TestResizeBilinear:
    def test_constant_preserved(self):
        field = torch.full((8, 12), 3.25, dtype=torch.float64)
        for scale in (0.25, 0.5, 2.0):
            out = resize_bilinear(field, scale)
            assert out.shape == (int(8 * scale), int(12 * scale))
            assert torch.allclose(out, torch.full_like(out, 3.25))

    def test_identity_scale(self):
        field = torch.rand(6, 9, dtype=torch.float64)
        assert torch.allclose(resize_bilinear(field, 1.0), field)

    def test_mask_resize(self):
        field = torch.rand(8, 8, dtype=torch.float64)
        valid = torch.zeros(8, 8, dtype=torch.bool)
        valid[:, :4] = True
        out, mask = resize_bilinear(field, 0.5, valid=valid)
        assert mask.dtype == torch.bool and mask.shape == (4, 4)
        assert bool(mask[:, :2].all()) and not bool(mask[:, 2:].any())

    def test_degenerate_output_rejected(self):
        with pytest.raises(ContractViolation):
            resize_bilinear(torch.rand(4, 4, dtype=torch.float64), 0.1)


class TestMaskedMean:
    def test_mean_over_mask(self):
        values = t(1.0, 2.0, 3.0, 100.0)
        valid = torch.tensor([True, True, True, False])
        assert float(masked_mean(values, valid)) == 2.0

    def test_empty_mask_rejected(self):
        with pytest.raises(ContractViolation):
            masked_mean(t(1.0), torch.tensor([False]))
