import math

import numpy as np
import pytest
import torch

import forgeloc.losses as L
from forgeloc.heads import ClassProbPyramid, MaskPyramid

from oracles import avg_then_threshold, bce_scalar, cross_entropy_scalar, sobel_scalar

torch.manual_seed(0)

UNIFORM_DET_LOSS = math.log(2) + math.log(3) + math.log(5) + math.log(8)


def _prob_pyramid(batch, rng=None, perfect_labels=None, uniform=False):
    sizes = (2, 3, 5, 8)
    probs, logits = [], []
    for t, k in enumerate(sizes):
        if uniform:
            p = torch.full((batch, k), 1.0 / k, dtype=torch.float64)
        elif perfect_labels is not None:
            p = torch.zeros(batch, k, dtype=torch.float64)
            p[torch.arange(batch), perfect_labels[:, t]] = 1.0
        else:
            p = torch.softmax(torch.from_numpy(rng.standard_normal((batch, k))), dim=-1)
        probs.append(p)
        logits.append(torch.log(p.clamp(min=1e-12)))
    return ClassProbPyramid(probs, logits)


def _mask_pyramid(batch, size, fill=None, rng=None):
    masks = []
    for div in (8, 4, 2, 1):
        h = size // div
        if fill is not None:
            forged = torch.full((batch, h, h), fill, dtype=torch.float64)
        else:
            forged = torch.from_numpy(rng.random((batch, h, h)))
        masks.append(torch.stack([1 - forged, forged], dim=1))
    return MaskPyramid(masks)


class TestDetectionLoss:
    def test_perfect_predictions_zero(self):
        labels = torch.tensor([[1, 2, 3, 5], [0, 0, 0, 0]])
        pyr = _prob_pyramid(2, perfect_labels=labels)
        loss = L.detection_loss(pyr, labels)
        assert float(loss) < 1e-9

    def test_uniform_closed_form(self):
        labels = torch.tensor([[1, 1, 1, 1], [0, 0, 0, 0], [1, 2, 4, 7]])
        pyr = _prob_pyramid(3, uniform=True)
        loss = L.detection_loss(pyr, labels)
        assert abs(float(loss) - UNIFORM_DET_LOSS) < 1e-9

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(5)
        labels_np = np.stack([
            np.array([0, 0, 0, 0]),
            np.array([1, 1, 1, 1]),
            np.array([1, 2, 3, 4]),
        ])
        pyr = _prob_pyramid(3, rng=rng)
        loss = L.detection_loss(pyr, torch.from_numpy(labels_np))
        expected = cross_entropy_scalar([p.numpy() for p in pyr.probs], labels_np)
        assert abs(float(loss) - expected) < 1e-9

    def test_decomposes_over_stages(self):
        rng = np.random.default_rng(6)
        labels = torch.tensor([[1, 1, 2, 4], [0, 0, 0, 0]])
        pyr = _prob_pyramid(2, rng=rng)
        total = float(L.detection_loss(pyr, labels))
        parts = 0.0
        batch = torch.arange(2)
        for t, p in enumerate(pyr.probs):
            parts += float((-torch.log(p[batch, labels[:, t]].clamp(min=1e-12))).mean())
        assert abs(total - parts) < 1e-12

    def test_clamp_counter(self):
        L.reset_clamp_events()
        labels = torch.tensor([[1, 1, 1, 1]])
        probs = [torch.zeros(1, k, dtype=torch.float64) for k in (2, 3, 5, 8)]
        for p in probs:
            p[0, 0] = 1.0
        pyr = ClassProbPyramid(probs, probs)
        loss = L.detection_loss(pyr, labels)
        assert float(loss) == pytest.approx(4 * -math.log(1e-12))
        assert L.clamp_event_count() >= 4

    def test_label_shape_rejected(self):
        pyr = _prob_pyramid(1, uniform=True)
        with pytest.raises(ValueError):
            L.detection_loss(pyr, torch.tensor([[0, 0]]))


class TestLocalizationLoss:
    def test_perfect_prediction_zero(self):
        gt = (torch.rand(2, 16, 16) > 0.5).double()
        masks = []
        for div in (8, 4, 2, 1):
            y = L.downsample_mask(gt, div)
            masks.append(torch.stack([1 - y, y], dim=1))
        loss = L.localization_loss(MaskPyramid(masks), gt)
        assert float(loss) < 1e-9

    def test_half_probability_ln2_per_stage(self):
        gt = (torch.rand(2, 16, 16) > 0.5).double()
        pyr = _mask_pyramid(2, 16, fill=0.5)
        loss = L.localization_loss(pyr, gt)
        assert abs(float(loss) - 4 * math.log(2)) < 1e-9

    def test_matches_scalar_oracle_8x8(self):
        rng = np.random.default_rng(9)
        gt_np = (rng.random((1, 8, 8)) > 0.6).astype(np.float64)
        gt = torch.from_numpy(gt_np)
        masks, expected = [], 0.0
        for div in (8, 4, 2, 1):
            forged = rng.random((1, 8 // div, 8 // div))
            masks.append(torch.stack([torch.from_numpy(1 - forged),
                                      torch.from_numpy(forged)], dim=1))
            y = avg_then_threshold(gt_np[0], div)
            expected += bce_scalar(forged[0], y)
        loss = L.localization_loss(MaskPyramid(masks), gt)
        assert abs(float(loss) - expected) < 1e-9

    def test_downsample_is_area_average_then_threshold(self):
        rng = np.random.default_rng(10)
        gt = (rng.random((1, 16, 16)) > 0.7).astype(np.float64)
        for factor in (2, 4, 8):
            got = L.downsample_mask(torch.from_numpy(gt), factor)[0].numpy()
            assert np.array_equal(got, avg_then_threshold(gt[0], factor))

    def test_resolution_mismatch_rejected(self):
        gt = torch.rand(1, 16, 16)
        masks = _mask_pyramid(1, 16, fill=0.5).masks
        masks[0] = torch.rand(1, 2, 3, 3)
        with pytest.raises(ValueError):
            L.localization_loss(MaskPyramid(masks), gt)


class TestSobel:
    def test_constant_map_zero_away_from_borders(self):
        # DC rejection: the kernel sums to zero, so only the zero-padding frame responds
        out = L.sobel(torch.full((8, 8), 2.5), "x")
        assert out.shape == (10, 10)
        assert out[3:-3, 3:-3].abs().max() < 1e-6

    def test_vertical_step_edge_response(self):
        # step from 0 to 1 between content columns 3 and 4: S_x responds with 4
        # on the two columns flanking the edge (hand-convolved), 0 elsewhere inside
        step = torch.zeros(6, 8)
        step[:, 4:] = 1.0
        out = L.sobel(step, "x")  # full output: content pixel (i,j) -> out[i+1, j+1]
        interior = out[3:-3]
        assert torch.allclose(interior[:, 4], torch.full((2,), 4.0), atol=1e-6)
        assert torch.allclose(interior[:, 5], torch.full((2,), 4.0), atol=1e-6)
        assert interior[:, 2:4].abs().max() < 1e-6
        assert interior[:, 6:8].abs().max() < 1e-6

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        arr = rng.random((7, 7))
        for direction, kernel in (("x", L.SOBEL_X.numpy()), ("y", L.SOBEL_Y.numpy())):
            got = L.sobel(torch.from_numpy(arr), direction).numpy()
            assert np.abs(got - sobel_scalar(arr, kernel)).max() < 1e-12

    def test_transpose_symmetry(self):
        arr = torch.rand(6, 9, dtype=torch.float64)
        lhs = L.sobel(arr.T, "x")
        rhs = L.sobel(arr, "y").T
        assert torch.allclose(lhs, rhs, atol=1e-12)

    def test_bad_direction(self):
        with pytest.raises(ValueError):
            L.sobel(torch.rand(4, 4), "z")


class TestEdgeLoss:
    def test_identical_masks_zero_both_modes(self):
        m = (torch.rand(8, 8) > 0.5).double()
        for mode in ("absolute", "literal"):
            cfg = L.LossConfig(edge_weight=1.0, edge_mode=mode)
            assert float(L.edge_loss(m, m, cfg)) == 0.0

    def test_literal_mode_sign_cancellation_counterexample(self):
        # translated copy of the same blob: signed means cancel exactly
        m1 = torch.zeros(8, 8, dtype=torch.float64)
        m1[2:4, 2:4] = 1.0
        m2 = torch.zeros(8, 8, dtype=torch.float64)
        m2[4:6, 4:6] = 1.0
        literal = L.LossConfig(edge_weight=1.0, edge_mode="literal")
        absolute = L.LossConfig(edge_weight=1.0, edge_mode="absolute")
        assert abs(float(L.edge_loss(m2, m1, literal))) < 1e-12
        assert float(L.edge_loss(m2, m1, absolute)) > 0.1

    def test_absolute_mode_positive_on_all_differing_3x3_pairs(self):
        # exhaustive: every distinct pair of 3x3 binary masks has positive loss
        masks = torch.tensor(
            [[(i >> b) & 1 for b in range(9)] for i in range(512)], dtype=torch.float64
        ).reshape(512, 3, 3)
        sx = L.sobel(masks, "x").reshape(512, -1)
        sy = L.sobel(masks, "y").reshape(512, -1)
        dx = (sx[:, None, :] - sx[None, :, :]).abs().mean(dim=-1)
        dy = (sy[:, None, :] - sy[None, :, :]).abs().mean(dim=-1)
        loss = dx + dy
        off_diag = ~torch.eye(512, dtype=torch.bool)
        assert loss[off_diag].min() > 0

    def test_weight_scales_loss(self):
        m = (torch.rand(8, 8) > 0.5).double()
        gt = (torch.rand(8, 8) > 0.5).double()
        base = float(L.edge_loss(m, gt, L.LossConfig(edge_weight=1.0)))
        scaled = float(L.edge_loss(m, gt, L.LossConfig(edge_weight=2.5)))
        assert scaled == pytest.approx(2.5 * base, rel=1e-12)

    def test_argument_symmetry_absolute(self):
        m = torch.rand(8, 8, dtype=torch.float64)
        gt = torch.rand(8, 8, dtype=torch.float64)
        cfg = L.LossConfig(edge_weight=1.0)
        assert float(L.edge_loss(m, gt, cfg)) == pytest.approx(
            float(L.edge_loss(gt, m, cfg)), rel=1e-12)

    def test_resolution_mismatch_rejected(self):
        with pytest.raises(ValueError):
            L.edge_loss(torch.rand(8, 8), torch.rand(4, 4), L.LossConfig())

    def test_gradient_absolute_mode(self):
        from oracles import finite_difference_check

        m = torch.rand(6, 6, dtype=torch.float64, requires_grad=True)
        gt = (torch.rand(6, 6) > 0.5).double()
        cfg = L.LossConfig(edge_weight=1.3)

        def f():
            return L.edge_loss(m, gt, cfg)

        finite_difference_check(f, [m], rel_tol=1e-4)


class TestTotalLoss:
    def test_zeros(self):
        z = torch.tensor(0.0)
        assert float(L.total_loss(z, z, z)) == 0.0

    def test_sum(self):
        parts = [torch.tensor(v) for v in (1.0, 2.0, 0.5)]
        assert float(L.total_loss(*parts)) == pytest.approx(3.5)

    def test_matches_recomputation(self):
        rng = np.random.default_rng(3)
        det = torch.tensor(rng.random(), dtype=torch.float64)
        loc = torch.tensor(rng.random(), dtype=torch.float64)
        edge = torch.tensor(rng.random(), dtype=torch.float64)
        assert abs(float(L.total_loss(det, loc, edge))
                   - (float(det) + float(loc) + float(edge))) < 1e-12

    def test_nonfinite_component_identified(self):
        good = torch.tensor(1.0)
        bad = torch.tensor(float("nan"))
        with pytest.raises(ValueError, match="localization"):
            L.total_loss(good, bad, good)
