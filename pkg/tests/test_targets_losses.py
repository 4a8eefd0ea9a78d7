import math

import pytest
import torch

from stepstereo.errors import ContractViolation
from stepstereo.fieldops import cb_l1, cb_smooth_l1, masked_mean
from stepstereo.losses import (
    LossConfig,
    assemble_loss,
    loss_weights,
    quarter_ground_truth,
    segment_target_full,
    segment_target_quarter,
)
from stepstereo.model.network import StepTrace, RefinementTrace


def full(shape, value):
    return torch.full(shape, float(value), dtype=torch.float64)


def make_trace(d_init_quarter, d_init_full, steps):
    return RefinementTrace(
        d_init_quarter=d_init_quarter, d_init_full=d_init_full, steps=steps
    )


def make_step(delta, d_quarter, d_full, is_stepwise=True, m=2.0):
    return StepTrace(
        delta=delta,
        d_quarter=d_quarter,
        d_full=d_full,
        gate=None,
        is_stepwise=is_stepwise,
        m=m if is_stepwise else None,
    )


class TestLossWeights:
    def test_decay_sequence(self):
        w = loss_weights(0.9, 15)
        assert len(w) == 15
        assert w[-1] == 1.0
        for k in range(15):
            assert abs(w[k] - 0.9 ** (14 - k)) < 1e-15
        assert w == sorted(w)


class TestQuarterGroundTruth:
    def test_linear_ramp_values(self):
        cols = torch.arange(8, dtype=torch.float64)
        d_gt = cols.view(1, 1, 1, 8).expand(1, 1, 8, 8)
        valid = torch.ones(1, 1, 8, 8, dtype=torch.bool)
        g, v = quarter_ground_truth(d_gt, valid)
        assert g.shape == (1, 1, 2, 2) and v.all()
        # sampling positions 4q + 1.5 on the ramp, then divided by 4
        expected = torch.tensor([[1.5 / 4.0, 5.5 / 4.0]], dtype=torch.float64)
        assert torch.allclose(g[0, 0], expected.expand(2, 2), atol=1e-12)

    def test_validity_footprint(self):
        d_gt = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
        valid = torch.ones(1, 1, 8, 8, dtype=torch.bool)
        valid[0, 0, 1, 5] = False  # row 1 in {1,2}, col 5 in {5,6}
        _, v = quarter_ground_truth(d_gt, valid)
        assert not v[0, 0, 0, 1]
        assert v.sum() == 3

        valid = torch.ones(1, 1, 8, 8, dtype=torch.bool)
        valid[0, 0, 0, 0] = False  # row 0 and col 0 are outside every footprint
        valid[0, 0, 3, 3] = False
        valid[0, 0, 4, 7] = False
        _, v = quarter_ground_truth(d_gt, valid)
        assert v.all()

    def test_requires_divisible_size(self):
        d_gt = torch.zeros(1, 1, 6, 8, dtype=torch.float64)
        with pytest.raises(ContractViolation):
            quarter_ground_truth(d_gt, torch.ones_like(d_gt, dtype=torch.bool))


class TestSegmentTargets:
    def test_quarter_clips_remaining_error(self):
        gt_q = full((1, 1, 2, 2), 8.0)
        prev = full((1, 1, 2, 2), 1.0)
        target = segment_target_quarter(gt_q, prev, m=2.0)
        assert torch.equal(target, full((1, 1, 2, 2), 3.0))

    def test_quarter_small_error_passes_through(self):
        gt_q = full((1, 1, 2, 2), 2.0)
        prev = full((1, 1, 2, 2), 1.2)
        target = segment_target_quarter(gt_q, prev, m=2.0)
        assert torch.allclose(target, full((1, 1, 2, 2), 0.8))

    def test_quarter_bound(self, torch_gen):
        gt_q = torch.randn(1, 1, 5, 5, generator=torch_gen, dtype=torch.float64) * 50
        prev = torch.randn(1, 1, 5, 5, generator=torch_gen, dtype=torch.float64) * 50
        for m in (0.5, 2.0):
            assert segment_target_quarter(gt_q, prev, m).abs().max() <= 1.5 * m

    def test_full_moves_toward_gt_bounded(self):
        d_gt = full((1, 1, 4, 4), 40.0)
        prev = full((1, 1, 4, 4), 2.0)
        target = segment_target_full(d_gt, prev, m=2.0)
        assert torch.equal(target, full((1, 1, 4, 4), 14.0))  # 2 + 6*2

    def test_full_detaches_previous(self):
        prev = full((1, 1, 2, 2), 1.0).requires_grad_(True)
        target = segment_target_full(full((1, 1, 2, 2), 3.0), prev, m=2.0)
        assert not target.requires_grad

    def test_telescoping_step_count(self):
        for gt, d0, m in ((10.0, 0.0, 2.0), (-3.0, 4.0, 1.0), (7.25, 0.5, 0.5)):
            gt_q = full((1, 1, 1, 1), gt)
            d = full((1, 1, 1, 1), d0)
            expected = math.ceil(abs(gt - d0) / (1.5 * m)) if gt != d0 else 0
            steps = 0
            while not torch.equal(d, gt_q):
                d = d + segment_target_quarter(gt_q, d, m)
                steps += 1
                assert steps < 1000
            assert steps == expected


class TestAssembleLoss:
    def _perfect_trace(self, c=8.0):
        d_gt = full((1, 1, 8, 8), c)
        valid = torch.ones(1, 1, 8, 8, dtype=torch.bool)
        q = full((1, 1, 2, 2), c / 4.0)
        step = make_step(torch.zeros_like(q), q, d_gt.clone())
        trace = make_trace(q, d_gt.clone(), [step])
        return trace, d_gt, valid

    def test_perfect_prediction_zero_loss(self):
        trace, d_gt, valid = self._perfect_trace()
        cfg = LossConfig(n_steps=1)
        out = assemble_loss(trace, d_gt, valid, cfg)
        assert float(out.total) == 0.0
        assert float(out.loss_init) == 0.0
        assert float(out.loss_delta) == 0.0
        assert float(out.loss_full) == 0.0

    def test_supervise_clips_off_zeroes_delta_term(self):
        trace, d_gt, valid = self._perfect_trace()
        trace.steps[0] = make_step(
            full((1, 1, 2, 2), 1.0), trace.steps[0].d_quarter, trace.steps[0].d_full
        )
        on = assemble_loss(trace, d_gt, valid, LossConfig(n_steps=1))
        off = assemble_loss(
            trace, d_gt, valid, LossConfig(n_steps=1, supervise_clips=False)
        )
        assert float(on.loss_delta) > 0.0
        assert float(off.loss_delta) == 0.0
        assert float(off.total) == float(off.loss_init) + float(off.loss_full)

    def test_residual_step_targets_raw_gt(self):
        d_gt = full((1, 1, 8, 8), 10.0)
        valid = torch.ones(1, 1, 8, 8, dtype=torch.bool)
        q = full((1, 1, 2, 2), 0.0)
        d_full = full((1, 1, 8, 8), 4.0)
        step = make_step(q.clone(), q, d_full, is_stepwise=False)
        trace = make_trace(q, full((1, 1, 8, 8), 0.0), [step])
        cfg = LossConfig(h=0.5, n_steps=1)
        out = assemble_loss(trace, d_gt, valid, cfg)
        expected_full = masked_mean(cb_l1(d_full - d_gt, 0.5), valid)
        assert torch.allclose(out.loss_full, expected_full, atol=1e-15)
        assert float(out.loss_delta) == 0.0  # no stepwise step

    def test_decay_weighting_over_steps(self):
        d_gt = full((1, 1, 8, 8), 0.0)
        valid = torch.ones(1, 1, 8, 8, dtype=torch.bool)
        q = full((1, 1, 2, 2), 0.0)
        d1 = full((1, 1, 8, 8), 1.0)
        d2 = full((1, 1, 8, 8), 0.25)
        steps = [
            make_step(torch.zeros_like(q), q, d1),
            make_step(torch.zeros_like(q), q, d2),
        ]
        trace = make_trace(q, full((1, 1, 8, 8), 0.0), steps)
        cfg = LossConfig(gamma=0.9, h=0.5, n_steps=2, supervise_clips=False)
        out = assemble_loss(trace, d_gt, valid, cfg)
        term1 = masked_mean(cb_l1(d1 - d_gt, 0.5), valid)
        term2 = masked_mean(cb_l1(d2 - d_gt, 0.5), valid)
        assert torch.allclose(out.loss_full, 0.9 * term1 + term2, atol=1e-15)

    def test_init_term_is_unbalanced(self):
        d_gt = full((1, 1, 8, 8), 0.0)
        valid = torch.ones(1, 1, 8, 8, dtype=torch.bool)
        q = full((1, 1, 2, 2), 0.0)
        init_full = full((1, 1, 8, 8), 0.5)
        step = make_step(torch.zeros_like(q), q, d_gt.clone())
        trace = make_trace(q, init_full, [step])
        out = assemble_loss(trace, d_gt, valid, LossConfig(n_steps=1))
        expected = masked_mean(cb_smooth_l1(init_full - d_gt, 0.0), valid)
        assert torch.allclose(out.loss_init, expected, atol=1e-15)
        assert abs(float(out.loss_init) - 0.125) < 1e-15  # plain quadratic branch

    def test_step_count_mismatch_rejected(self):
        trace, d_gt, valid = self._perfect_trace()
        with pytest.raises(ContractViolation):
            assemble_loss(trace, d_gt, valid, LossConfig(n_steps=2))

    def test_shape_mismatches_rejected(self):
        trace, d_gt, valid = self._perfect_trace()
        with pytest.raises(ContractViolation):
            assemble_loss(trace, d_gt[:, :, :4, :], valid[:, :, :4, :], LossConfig(n_steps=1))
        with pytest.raises(ContractViolation):
            assemble_loss(trace, d_gt, valid[:, :, :4, :], LossConfig(n_steps=1))

    def test_config_validation(self):
        for bad in (
            LossConfig(gamma=0.0),
            LossConfig(gamma=1.0),
            LossConfig(h=-0.1),
            LossConfig(n_steps=0),
        ):
            with pytest.raises(ContractViolation):
                bad.validate()
