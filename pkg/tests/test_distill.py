import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from oadp.classify import BASE, CategoryTable
from oadp.distill import (
    BG,
    LossParts,
    PyramidWeights,
    StudentStub,
    avg_pool,
    central_difference,
    loss_block,
    loss_global,
    loss_gradients,
    loss_object,
    rcnn_cls_gradient,
    rcnn_cls_loss,
    relative_error,
    restricted_probs,
    student_forward,
    total_loss,
)
from oadp.errors import CategoryError, DimensionError
from oadp.geometry import Box, ImageSize, partition_blocks
from oadp.synthetic import gen_category_table


def untied_pair(rng, shape, gap=1e-3):
    """Student/teacher arrays whose coordinates differ by at least ``gap``."""
    s = rng.normal(size=shape)
    d = rng.uniform(gap, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return s, s - d


class TestL1Losses:
    def test_identical(self):
        e = np.random.default_rng(0).normal(size=(3, 4))
        assert loss_object(e, e.copy()) == loss_block(e, e.copy()) == 0.0

    def test_zeros_vs_ones(self):
        assert loss_object(np.zeros((1, 4)), np.ones((1, 4))) == 1.0

    def test_global(self):
        assert loss_global(np.array([0.0, 0.0]), np.array([2.0, 0.0])) == 1.0

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 5, 3))
        expected = 0.0
        for i in range(5):
            for j in range(3):
                expected += abs(a[i, j] - b[i, j])
        assert abs(loss_block(a, b) - expected / 15) < 1e-12

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            loss_object(np.zeros((2, 4)), np.zeros((3, 4)))


def one_base_table():
    return CategoryTable(("a",), np.array([[1.0, 0.0]]), (BASE,), np.array([0.0, 1.0]))


class TestRcnnLoss:
    def test_equal_logits(self):
        e = np.array([[1.0, 1.0]])
        assert rcnn_cls_loss(e, [BG], one_base_table()) == pytest.approx(math.log(2.0), abs=1e-15)

    def test_margin_monotone(self):
        t = one_base_table()
        losses = [rcnn_cls_loss(np.array([[1.0, y]]), [0], t) for y in (1.0, 0.5, 0.2, 0.0)]
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_additive(self):
        t = gen_category_table(2, 2, 6, seed=0)
        e = np.random.default_rng(2).normal(size=(1, 6))
        assert rcnn_cls_loss(np.vstack([e, e]), [1, 1], t) == pytest.approx(2 * rcnn_cls_loss(e, [1], t), rel=1e-15)

    def test_novel_label_rejected(self):
        t = gen_category_table(2, 2, 6, seed=0)
        with pytest.raises(CategoryError, match="novel"):
            rcnn_cls_loss(np.ones((1, 6)), [3], t)

    def test_restricted_softmax(self):
        t = gen_category_table(3, 2, 6, seed=1)
        p = restricted_probs(np.random.default_rng(3).normal(size=6), t)
        assert p.shape == (4,)  # three base categories and background
        assert abs(p.sum() - 1.0) < 1e-9

    def test_label_count(self):
        with pytest.raises(DimensionError):
            rcnn_cls_loss(np.ones((2, 2)), [BG], one_base_table())


class TestTotalLoss:
    def test_zero(self):
        assert total_loss(LossParts(0.0, 0.0, 0.0, 0.0)) == 0.0

    def test_default_weights(self):
        assert total_loss(LossParts(1.0, 1.0, 1.0, 1.0)) == 2.0

    @settings(max_examples=50, deadline=None)
    @given(*[st.floats(0, 10)] * 4, *[st.floats(0, 2)] * 3)
    def test_linear_combination(self, l, lo, lb, lg, wo, wb, wg):
        out = total_loss(LossParts(l, lo, lb, lg), PyramidWeights(wo, wb, wg))
        assert out == pytest.approx(l + wo * lo + wb * lb + wg * lg, rel=1e-12, abs=1e-12)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            PyramidWeights(-0.1, 0.25, 0.25)


class TestStudent:
    def setup_method(self):
        self.image = np.random.default_rng(4).random((64, 96, 3))
        self.boxes = [Box(3, 4, 30, 40), Box(50.5, 10.2, 90, 60)]
        self.blocks = partition_blocks(ImageSize(96, 64), 32)

    def test_shapes(self):
        out = student_forward(StudentStub.from_seed(0, d=16), self.image, self.boxes, self.blocks)
        assert out.E_O.shape == (2, 16) and out.E.shape == (2, 16)
        assert out.E_B.shape == (6, 16) and out.e_G.shape == (16,)

    def test_deterministic(self):
        a = student_forward(StudentStub.from_seed(5), self.image, self.boxes, self.blocks)
        b = student_forward(StudentStub.from_seed(5), self.image.copy(), self.boxes, self.blocks)
        for name in ("E_O", "E_B", "e_G", "E"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_zero_image_gives_head_biases(self):
        stub = StudentStub.from_seed(6, zero_bias=True)
        out = student_forward(stub, np.zeros((64, 96, 3)), self.boxes, self.blocks)
        assert_array_equal(out.E_O, np.tile(stub.obj_head[1], (2, 1)))
        assert_array_equal(out.E, np.tile(stub.rcnn_head[1], (2, 1)))
        assert_array_equal(out.E_B, np.tile(stub.block_head[1], (6, 1)))
        assert_array_equal(out.e_G, stub.global_head[1])

    def test_no_proposals(self):
        out = student_forward(StudentStub.from_seed(0), self.image, [], self.blocks)
        assert out.E_O.shape == (0, 32)

    def test_avg_pool_ragged(self):
        img = np.arange(5 * 3, dtype=float).reshape(5, 3, 1)
        pooled = avg_pool(img, 4)
        assert pooled.shape == (2, 1, 1)
        assert pooled[0, 0, 0] == img[:4, :3].mean()
        assert pooled[1, 0, 0] == img[4:, :3].mean()


class TestGradients:
    def test_tie_flag(self):
        e = np.ones((2, 3))
        student = type("S", (), {"E_O": e, "E_B": e, "e_G": e[0], "E": e})()
        t = gen_category_table(1, 1, 3, seed=0)
        report = loss_gradients(student, e.copy(), e.copy(), e[0].copy(), [BG, BG], t)
        for name in ("object", "block", "global"):
            assert report.tied[name]
            assert not np.any(report.gradients[name])

    def test_sign_rule(self):
        s = np.array([[1.0, 2.0, 3.0]])
        student = type("S", (), {"E_O": s, "E_B": s, "e_G": s[0], "E": s})()
        t = gen_category_table(1, 1, 3, seed=0)
        report = loss_gradients(student, s - 0.5, s - 0.5, s[0] - 0.5, [0], t)
        assert_array_equal(report.gradients["object"], np.full((1, 3), 1 / 3))
        assert not report.tied["object"]

    @pytest.mark.parametrize("seed", range(5))
    def test_l1_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        s, t = untied_pair(rng, (4, 6))
        analytic = loss_gradients(
            type("S", (), {"E_O": s, "E_B": s, "e_G": s[0], "E": s})(), t, t, t[0], [BG] * 4,
            gen_category_table(1, 1, 6, seed=0),
        ).gradients["object"]
        numeric = central_difference(lambda x: loss_object(x, t), s)
        assert relative_error(analytic, numeric) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_rcnn_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        t = gen_category_table(3, 2, 8, seed=seed)
        E = rng.normal(size=(3, 8))
        labels = [0, BG, 2]
        analytic = rcnn_cls_gradient(E, labels, t, temperature=0.5)
        numeric = central_difference(lambda x: rcnn_cls_loss(x, labels, t, temperature=0.5), E)
        assert relative_error(analytic, numeric) < 1e-4

    def test_relative_error_zero(self):
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
