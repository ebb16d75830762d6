import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mspdet import boxes as bx
from mspdet.layers import DeconvLayer
from mspdet.rpn import (
    AnchorConfig, RpnPrediction, anchor_view, assign_rpn_targets, decode_proposals, fuse_predictions,
    gather_anchor_rows, generate_anchors, write_proposals_csv,
)
from mspdet.tensor import ModelParams, Tape, Tensor, mul, tsum

from oracles import bilinear_upsample, greedy_nms, iou, numerical_grad, rel_error, rpn_labels


def random_boxes(rng, n, size=100.0, min_side=2.0, max_side=40.0):
    xy = rng.uniform(0, size, size=(n, 2))
    wh = rng.uniform(min_side, max_side, size=(n, 2))
    return np.hstack([xy, xy + wh])


def upsamplers(ch_cls, ch_box):
    params = ModelParams()
    return DeconvLayer(params, "c", ch_cls, 2), DeconvLayer(params, "b", ch_box, 2)


class TestFuse:
    def test_zero_coarse(self):
        rng = np.random.default_rng(0)
        finer = RpnPrediction(Tensor(rng.normal(size=(1, 4, 8, 6))), Tensor(rng.normal(size=(1, 8, 8, 6))), 4)
        coarse = RpnPrediction(Tensor(np.zeros((1, 4, 4, 3))), Tensor(np.zeros((1, 8, 4, 3))), 8)
        out = fuse_predictions(coarse, finer, *upsamplers(4, 8))
        np.testing.assert_array_equal(out.objectness.data, finer.objectness.data)
        np.testing.assert_array_equal(out.box_deltas.data, finer.box_deltas.data)
        assert out.stride == 4

    def test_constant_propagation(self):
        finer = RpnPrediction(Tensor(np.zeros((1, 2, 8, 8))), Tensor(np.zeros((1, 4, 8, 8))), 4)
        coarse = RpnPrediction(Tensor(np.full((1, 2, 4, 4), 0.7)), Tensor(np.full((1, 4, 4, 4), -1.3)), 8)
        out = fuse_predictions(coarse, finer, *upsamplers(2, 4))
        np.testing.assert_allclose(out.objectness.data[:, :, 2:-2, 2:-2], 0.7, atol=1e-12)
        np.testing.assert_allclose(out.box_deltas.data[:, :, 2:-2, 2:-2], -1.3, atol=1e-12)

    def test_matches_upsample_then_add(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            c = rng.normal(size=(1, 2, 5, 4))
            f = rng.normal(size=(1, 2, 10, 8))
            out = fuse_predictions(RpnPrediction(Tensor(c), Tensor(c), 8), RpnPrediction(Tensor(f), Tensor(f), 4),
                                   *upsamplers(2, 2)).objectness.data
            for ch in range(2):
                ref, interior = bilinear_upsample(c[0, ch], 2)
                np.testing.assert_allclose(out[0, ch][interior], (ref + f[0, ch])[interior], atol=1e-6)

    def test_dimension_mismatch(self):
        a = RpnPrediction(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 4, 4, 4))), 8)
        b = RpnPrediction(Tensor(np.zeros((1, 2, 7, 8))), Tensor(np.zeros((1, 4, 7, 8))), 4)
        with pytest.raises(ValueError):
            fuse_predictions(a, b, *upsamplers(2, 4))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        arrays = [rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(2, 2, 4, 4))]
        weights = Tensor(rng.normal(size=(1, 2, 6, 6)))
        params = ModelParams()
        up = DeconvLayer(params, "u", 2, 2)

        def run(c, f, w):
            up.weight = w
            pred = fuse_predictions(RpnPrediction(c, c, 8), RpnPrediction(f, f, 4), up, up)
            return tsum(mul(pred.objectness, weights))

        def f():
            return run(*[Tensor(a) for a in arrays]).item()

        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            loss = run(*tensors)
        tape.backward(loss)
        for t, a in zip(tensors, arrays):
            assert rel_error(t.grad, numerical_grad(f, a)) < 1e-4


class TestAnchors:
    def test_single_anchor(self):
        a = generate_anchors((1, 1), 4, AnchorConfig(8.0, (1.0,), (1.0,)))
        np.testing.assert_allclose(a, [[-2, -2, 6, 6]])

    @pytest.mark.parametrize("h,w", [(1, 1), (3, 5), (8, 8)])
    def test_count(self, h, w):
        cfg = AnchorConfig()
        assert len(generate_anchors((h, w), 4, cfg)) == h * w * 4 * 3

    def test_ratio_area(self):
        a = generate_anchors((1, 1), 4, AnchorConfig(8.0, (2.0,), (0.5, 1.0, 2.0)))
        wh = a[:, 2:] - a[:, :2]
        np.testing.assert_allclose(wh[:, 0] * wh[:, 1], 256.0)
        assert wh[2, 1] / wh[2, 0] == pytest.approx(2.0)

    def test_golden_ordering(self):
        cfg = AnchorConfig(4.0, (1.0, 2.0), (1.0, 4.0))
        a = generate_anchors((2, 2), 10, cfg)
        golden = [
            [3, 3, 7, 7], [4, 1, 6, 9], [1, 1, 9, 9], [3, -3, 7, 13],
            [13, 3, 17, 7], [14, 1, 16, 9], [11, 1, 19, 9], [13, -3, 17, 13],
            [3, 13, 7, 17], [4, 11, 6, 19], [1, 11, 9, 19], [3, 7, 7, 23],
            [13, 13, 17, 17], [14, 11, 16, 19], [11, 11, 19, 19], [13, 7, 17, 23],
        ]
        np.testing.assert_allclose(a, golden)

    def test_centered_on_cells(self):
        a = generate_anchors((3, 4), 4, AnchorConfig())
        centers = ((a[:, :2] + a[:, 2:]) / 2).reshape(3, 4, 12, 2)
        np.testing.assert_allclose(centers[1, 2, :, 0], 10.0)
        np.testing.assert_allclose(centers[1, 2, :, 1], 6.0)

    def test_empty_config(self):
        with pytest.raises(ValueError):
            generate_anchors((2, 2), 4, AnchorConfig(8.0, (), (1.0,)))


class TestNMS:
    def test_duplicate(self):
        b = np.array([[0, 0, 10, 10], [0, 0, 10, 10.0]])
        assert bx.nms(b, [0.8, 0.9], 0.5).tolist() == [1]

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 60))
            b = random_boxes(rng, n)
            s = rng.random(n)
            thr = float(rng.uniform(0.1, 0.9))
            assert bx.nms(b, s, thr).tolist() == greedy_nms(b.tolist(), s.tolist(), thr)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.05, 0.95))
    def test_kept_set_is_antichain(self, seed, thr):
        rng = np.random.default_rng(seed)
        b = random_boxes(rng, 40)
        kept = bx.nms(b, rng.random(40), thr)
        m = bx.iou_matrix(b[kept], b[kept])
        np.fill_diagonal(m, 0)
        assert m.max(initial=0) <= thr


class TestBoxCodec:
    def test_identity(self):
        np.testing.assert_array_equal(bx.encode([[0, 0, 10, 10]], [[0, 0, 10, 10]]), [[0, 0, 0, 0]])

    def test_closed_form(self):
        np.testing.assert_allclose(bx.encode([[0, 0, 10, 10]], [[5, 5, 15, 15]]), [[0.5, 0.5, 0, 0]])

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        a = random_boxes(rng, 200)
        g = random_boxes(rng, 200)
        np.testing.assert_allclose(bx.decode(a, bx.encode(a, g)), g, atol=1e-9)

    def test_degenerate(self):
        with pytest.raises(ValueError):
            bx.encode([[0, 0, 0, 10]], [[0, 0, 1, 1]])


def prediction_from_anchor_arrays(obj_logits, deltas, grid, a):
    """Build a (1, 2A, H, W) / (1, 4A, H, W) prediction from per-anchor rows."""
    h, w = grid
    obj = obj_logits.reshape(h, w, a, 2).transpose(2, 3, 0, 1).reshape(1, 2 * a, h, w)
    box = deltas.reshape(h, w, a, 4).transpose(2, 3, 0, 1).reshape(1, 4 * a, h, w)
    return RpnPrediction(Tensor(obj), Tensor(box), 4)


class TestDecodeProposals:
    def test_zero_deltas_give_anchors(self):
        cfg = AnchorConfig(8.0, (1.0, 2.0), (1.0,))
        grid = (4, 4)
        anchors = generate_anchors(grid, 4, cfg)
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(len(anchors), 2))
        pred = prediction_from_anchor_arrays(logits, np.zeros((len(anchors), 4)), grid, 2)
        boxes, scores = decode_proposals(pred, anchors, (16, 16), 1000, 1000, 1.0)
        order = np.argsort(-(1 / (1 + np.exp(logits[:, 0] - logits[:, 1]))), kind="stable")
        np.testing.assert_allclose(boxes, bx.clip(anchors[order], 16, 16))
        assert np.all(np.diff(scores) <= 0)

    def test_anchor_view_round_trip(self):
        rng = np.random.default_rng(1)
        rows = rng.normal(size=(3 * 5 * 4, 2))
        pred = prediction_from_anchor_arrays(rows, np.zeros((60, 4)), (3, 5), 4)
        np.testing.assert_array_equal(anchor_view(pred.objectness.data, 2), rows)

    def test_clipped_and_nms(self):
        grid = (8, 8)
        cfg = AnchorConfig()
        anchors = generate_anchors(grid, 4, cfg)
        rng = np.random.default_rng(2)
        pred = prediction_from_anchor_arrays(rng.normal(size=(len(anchors), 2)),
                                             rng.normal(0, 0.3, size=(len(anchors), 4)), grid, 12)
        boxes, scores = decode_proposals(pred, anchors, (30, 27), 500, 50, 0.5)
        assert len(boxes) <= 50
        assert boxes[:, [0, 2]].min() >= 0 and boxes[:, 2].max() <= 27 and boxes[:, 3].max() <= 30
        assert np.all((boxes[:, 2:] - boxes[:, :2]) >= 1)
        m = bx.iou_matrix(boxes, boxes)
        np.fill_diagonal(m, 0)
        assert m.max() <= 0.5
        assert np.all((scores >= 0) & (scores <= 1))

    def test_csv_dump(self, tmp_path):
        write_proposals_csv(tmp_path / "p.csv", [("im0", np.array([[1, 2, 3, 4.0]]), np.array([0.5]))])
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines == ["image_id,x_min,y_min,x_max,y_max,score", "im0,1.000000,2.000000,3.000000,4.000000,0.500000"]


class TestAssignTargets:
    def test_perfect_anchor(self):
        anchors = np.array([[0, 0, 10, 10], [50, 50, 60, 60.0]])
        labels, targets = assign_rpn_targets(anchors, [[0, 0, 10, 10]], None)
        assert labels.tolist() == [1, 0]
        np.testing.assert_array_equal(targets[0], 0)

    def test_argmax_fallback(self):
        anchors = np.array([[0, 0, 10, 10], [3, 3, 13, 13], [40, 40, 50, 50.0]])
        labels, _ = assign_rpn_targets(anchors, [[4, 4, 12, 12]], None)
        assert labels[1] == 1
        assert bx.iou_matrix(anchors[1:2], [[4, 4, 12, 12]])[0, 0] < 0.7

    def test_no_gt(self):
        labels, targets = assign_rpn_targets(generate_anchors((2, 2), 4, AnchorConfig()), np.zeros((0, 4)), None)
        assert np.all(labels == 0) and np.all(targets == 0)

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(3)
        anchors = generate_anchors((6, 6), 4, AnchorConfig())
        for _ in range(20):
            gts = random_boxes(rng, int(rng.integers(1, 5)), size=20, min_side=3, max_side=20)
            labels, _ = assign_rpn_targets(anchors, gts, None)
            np.testing.assert_array_equal(labels, rpn_labels(anchors.tolist(), gts.tolist()))

    def test_sampling(self):
        rng = np.random.default_rng(4)
        anchors = generate_anchors((16, 16), 4, AnchorConfig())
        gts = random_boxes(rng, 6, size=40, min_side=6, max_side=30)
        labels, _ = assign_rpn_targets(anchors, gts, rng)
        assert (labels >= 0).sum() == 256
        assert (labels == 1).sum() <= 128

    def test_gather_gradient(self):
        rng = np.random.default_rng(5)
        arr = rng.normal(size=(1, 6, 3, 4))
        idx = np.array([0, 5, 5, 17, 35])
        w = Tensor(rng.normal(size=(5, 2, 1, 1)))

        def f():
            return tsum(mul(gather_anchor_rows(Tensor(arr), 2, idx), w)).item()

        t = Tensor(arr, requires_grad=True)
        with Tape() as tape:
            loss = tsum(mul(gather_anchor_rows(t, 2, idx), w))
        tape.backward(loss)
        assert rel_error(t.grad, numerical_grad(f, arr)) < 1e-6
        np.testing.assert_array_equal(gather_anchor_rows(Tensor(arr), 2, idx).data.reshape(5, 2),
                                      anchor_view(arr, 2)[idx])

    def test_oracle_iou(self):
        assert iou([0, 0, 10, 10], [5, 0, 15, 10]) == pytest.approx(1 / 3)
