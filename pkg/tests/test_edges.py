import math

import pytest
import torch

from stepstereo.errors import ContractViolation
from stepstereo.fieldops import prewitt_magnitude
from stepstereo.model.edges import (
    EDGE_GT_THRESHOLD,
    SOFT_EDGE_SHARPNESS,
    EdgeEstimator,
    edge_gt_extract,
    edge_loss,
    pseudo_label_select,
    soft_edge_of_disparity,
)


def estimator_inputs(gen, b=2, h=12, w=16):
    d = torch.rand(b, 1, h, w, generator=gen, dtype=torch.float64) * 6.0
    rgb = torch.rand(b, 3, h, w, generator=gen, dtype=torch.float64)
    return d, rgb


class TestEdgeEstimator:
    def test_output_in_open_unit_interval(self, torch_gen):
        est = EdgeEstimator()
        est.init_parameters(torch_gen)
        d, rgb = estimator_inputs(torch_gen)
        with torch.no_grad():
            out = est(d, rgb)
        assert out.shape == (2, 1, 12, 16)
        assert float(out.min()) > 0.0 and float(out.max()) < 1.0

    def test_initial_output_near_sparse_base_rate(self, torch_gen):
        est = EdgeEstimator()
        est.init_parameters(torch_gen)
        d, rgb = estimator_inputs(torch_gen)
        with torch.no_grad():
            out = est(d, rgb)
        # fresh estimators start low (few pixels are edges) but not constant:
        # the head must pass gradients to the backbone from step one.
        assert float(out.mean()) < 0.15
        assert float(out.std()) > 0.0

    def test_prediction_invariant_to_affine_disparity_rescale(self, torch_gen):
        est = EdgeEstimator()
        est.init_parameters(torch_gen)
        d, rgb = estimator_inputs(torch_gen)
        with torch.no_grad():
            base = est(d, rgb)
            shifted = est(3.5 * d + 10.0, rgb)
        assert torch.allclose(base, shifted, atol=1e-10, rtol=0.0)

    def test_flat_disparity_is_finite(self, torch_gen):
        est = EdgeEstimator()
        est.init_parameters(torch_gen)
        d, rgb = estimator_inputs(torch_gen)
        with torch.no_grad():
            out = est(torch.full_like(d, 4.0), rgb)
        assert torch.isfinite(out).all()

    def test_size_mismatch_rejected(self, torch_gen):
        est = EdgeEstimator()
        est.init_parameters(torch_gen)
        d = torch.rand(1, 1, 8, 8, dtype=torch.float64)
        rgb = torch.rand(1, 3, 8, 10, dtype=torch.float64)
        with pytest.raises(ContractViolation):
            est(d, rgb)

    def test_image_only_variant_ignores_disparity(self, torch_gen):
        est = EdgeEstimator(use_disparity=False)
        est.init_parameters(torch_gen)
        d, rgb = estimator_inputs(torch_gen)
        with torch.no_grad():
            a = est(d, rgb)
            b = est(d * 7.0 + 3.0, rgb)
        assert torch.equal(a, b)

    def test_meta_round_trip(self):
        est = EdgeEstimator(use_disparity=False)
        again = EdgeEstimator.from_meta(est.to_meta())
        assert again.use_disparity is False
        assert EdgeEstimator.from_meta(EdgeEstimator().to_meta()).use_disparity


class TestEdgeGroundTruth:
    def test_constant_disparity_has_no_edges(self):
        gt = torch.full((10, 12), 7.0, dtype=torch.float64)
        assert torch.equal(edge_gt_extract(gt), torch.zeros(10, 12, dtype=torch.float64))

    def test_step_of_two_marks_adjacent_columns(self):
        gt = torch.zeros(8, 10, dtype=torch.float64)
        gt[:, 5:] = 2.0  # step between columns 4 and 5: |gx| = 3*2 = 6 > 5
        edges = edge_gt_extract(gt)
        expected = torch.zeros(8, 10, dtype=torch.float64)
        expected[:, 4:6] = 1.0
        assert torch.equal(edges, expected)

    def test_step_of_one_is_below_threshold(self):
        gt = torch.zeros(8, 10, dtype=torch.float64)
        gt[:, 5:] = 1.0  # |gx| = 3 < 5 everywhere
        assert torch.equal(edge_gt_extract(gt), torch.zeros_like(gt))

    def test_matches_thresholded_prewitt_magnitude(self, torch_gen):
        gt = torch.randint(0, 6, (9, 11), generator=torch_gen).to(torch.float64)
        expected = (prewitt_magnitude(gt) > EDGE_GT_THRESHOLD).to(torch.float64)
        assert torch.equal(edge_gt_extract(gt), expected)

    def test_accepts_numpy_and_batches(self, rng):
        arr = rng.integers(0, 5, size=(2, 1, 8, 8)).astype(float)
        out = edge_gt_extract(arr)
        assert out.shape == (2, 1, 8, 8)
        assert set(out.unique().tolist()) <= {0.0, 1.0}


class TestSoftEdges:
    def test_matches_sigmoid_of_sharpened_magnitude(self, torch_gen):
        d = torch.randn(7, 9, generator=torch_gen, dtype=torch.float64) * 3.0
        mag = prewitt_magnitude(d)
        expected = torch.sigmoid(SOFT_EDGE_SHARPNESS * (mag - EDGE_GT_THRESHOLD))
        assert torch.equal(soft_edge_of_disparity(d), expected)

    def test_scalar_oracle_on_known_step(self):
        d = torch.zeros(6, 8, dtype=torch.float64)
        d[:, 4:] = 2.0  # magnitude 6 on the step columns, 0 elsewhere
        soft = soft_edge_of_disparity(d)
        on_edge = 1.0 / (1.0 + math.exp(-10.0 * (6.0 - 5.0)))
        off_edge = 1.0 / (1.0 + math.exp(-10.0 * (0.0 - 5.0)))
        assert torch.allclose(soft[2, 4], torch.tensor(on_edge, dtype=torch.float64))
        assert torch.allclose(soft[2, 0], torch.tensor(off_edge, dtype=torch.float64))

    def test_agrees_with_hard_edges_away_from_threshold(self, torch_gen):
        d = torch.randint(0, 8, (10, 12), generator=torch_gen).to(torch.float64) * 2.0
        mag = prewitt_magnitude(d)
        clear = (mag - EDGE_GT_THRESHOLD).abs() > 1.0
        soft_binary = (soft_edge_of_disparity(d) > 0.5).to(torch.float64)
        hard = edge_gt_extract(d)
        assert torch.equal(soft_binary[clear], hard[clear])

    def test_differentiable_where_magnitude_is_nonzero(self):
        # gradients are defined away from zero magnitude (a flat region's
        # sqrt(0) is the documented excluded set), so probe on a ramp
        d = torch.arange(8, dtype=torch.float64).repeat(6, 1).requires_grad_()
        soft_edge_of_disparity(d).sum().backward()
        assert d.grad is not None and torch.isfinite(d.grad).all()


class TestPseudoLabels:
    def test_thresholding_keeps_confident_background(self):
        pred = torch.tensor([[0.1, 0.3, 0.8]], dtype=torch.float64)
        label = pseudo_label_select(pred, 0.25)
        assert label.valid.tolist() == [[True, False, False]]
        assert torch.equal(label.values, pred)
        assert label.t == 0.25

    def test_threshold_one_keeps_everything(self):
        pred = torch.tensor([[0.1, 0.5, 0.999]], dtype=torch.float64)
        assert pseudo_label_select(pred, 1.0).valid.all()

    def test_valid_sets_grow_with_threshold(self, torch_gen):
        pred = torch.rand(6, 7, generator=torch_gen, dtype=torch.float64)
        previous = None
        for t in (0.1, 0.25, 0.5, 0.75, 1.0):
            valid = pseudo_label_select(pred, t).valid
            if previous is not None:
                assert bool((previous <= valid).all())
            previous = valid

    def test_values_are_copied(self):
        pred = torch.tensor([[0.1, 0.2]], dtype=torch.float64)
        label = pseudo_label_select(pred, 0.5)
        pred[0, 0] = 0.9
        assert label.values[0, 0] == 0.1

    def test_threshold_domain(self):
        pred = torch.tensor([[0.1]], dtype=torch.float64)
        for bad in (0.0, -0.5, 1.5):
            with pytest.raises(ContractViolation):
                pseudo_label_select(pred, bad)


class TestEdgeLoss:
    def test_identical_maps_cost_nothing(self, torch_gen):
        e = torch.rand(5, 6, generator=torch_gen, dtype=torch.float64)
        loss, n = edge_loss(e, e.clone())
        assert float(loss) == 0.0
        assert n == 30

    def test_linear_region_value(self):
        a = torch.full((4, 4), 4.0, dtype=torch.float64)
        b = torch.zeros(4, 4, dtype=torch.float64)
        loss, n = edge_loss(a, b)
        assert float(loss) == pytest.approx(3.5)  # |4| - 0.5
        assert n == 16

    def test_quadratic_region_value(self):
        a = torch.full((4, 4), 0.5, dtype=torch.float64)
        b = torch.zeros(4, 4, dtype=torch.float64)
        loss, _ = edge_loss(a, b)
        assert float(loss) == pytest.approx(0.125)  # 0.5 * 0.5**2

    def test_mask_restricts_the_mean(self):
        a = torch.tensor([[0.5, 4.0]], dtype=torch.float64)
        b = torch.zeros(1, 2, dtype=torch.float64)
        valid = torch.tensor([[True, False]])
        loss, n = edge_loss(a, b, valid)
        assert float(loss) == pytest.approx(0.125)
        assert n == 1

    def test_zero_valid_pixels_flagged(self):
        a = torch.rand(3, 3, dtype=torch.float64)
        loss, n = edge_loss(a, a, torch.zeros(3, 3, dtype=torch.bool))
        assert float(loss) == 0.0 and n == 0
        assert not loss.requires_grad

    def test_shape_violations(self):
        a = torch.zeros(3, 3, dtype=torch.float64)
        with pytest.raises(ContractViolation):
            edge_loss(a, torch.zeros(3, 4, dtype=torch.float64))
        with pytest.raises(ContractViolation):
            edge_loss(a, a, torch.ones(2, 3, dtype=torch.bool))
