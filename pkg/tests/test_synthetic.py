from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from oadp.encoder import EncoderConfig, encode_cls
from oadp.geometry import Box, ImageSize
from oadp.oake import crop_square, extract_object_embedding, object_crop
from oadp.synthetic import (
    SceneSpec,
    gen_category_table,
    gen_scene,
    gen_weights,
    orthonormal_rows,
    random_scene_spec,
    render_scene,
)
from oadp.tensor import crop_and_resize


class TestWeights:
    def test_same_seed_identical(self):
        a, b = gen_weights(EncoderConfig(), 3), gen_weights(EncoderConfig(), 3)
        for name, arr in a.named_arrays().items():
            assert arr.tobytes() == b.named_arrays()[name].tobytes(), name

    def test_different_seed(self):
        a, b = gen_weights(EncoderConfig(), 3), gen_weights(EncoderConfig(), 4)
        assert not np.array_equal(a.patch_proj, b.patch_proj)

    def test_uniform_statistics(self):
        w = gen_weights(EncoderConfig(), 5)
        x = w.layers[0].w_q.ravel()  # Uniform(-a, a) with a = 1/sqrt(64)
        a = 1 / 8
        sigma = a / np.sqrt(3)
        assert np.abs(x).max() <= a
        assert abs(x.mean()) < 5 * sigma / np.sqrt(x.size)
        assert abs(x.std() - sigma) < 0.1 * sigma

    def test_norm_parameters(self):
        w = gen_weights(EncoderConfig(), 6)
        assert np.all(w.layers[1].ln1_g == 1.0) and np.all(w.ln_post_b == 0.0)


class TestCategoryTable:
    @pytest.mark.parametrize("n, d", [(1, 1), (5, 8), (32, 32)])
    def test_orthonormal(self, n, d):
        rows = orthonormal_rows(n, d, seed=n)
        assert_allclose(rows @ rows.T, np.eye(n), atol=1e-12)

    def test_too_many(self):
        with pytest.raises(ValueError):
            orthonormal_rows(5, 4, 0)

    def test_layout(self):
        t = gen_category_table(3, 2, 8, 0)
        assert t.names == ("cat00", "cat01", "cat02", "cat03", "cat04")
        assert [t.is_novel(n) for n in t.names] == [False, False, False, True, True]
        assert abs(t.bg_embedding @ t.embeddings.T).max() < 1e-12


class TestScenes:
    def test_single_object(self):
        spec = SceneSpec(64, 48, objects=[(Box(10, 12, 30, 30), 1)], seed=2)
        scene = gen_scene(spec)
        assert scene.image.shape == (48, 64, 3)
        assert len(scene.proposals) == 1
        assert scene.proposals[0].objectness >= 0.5
        assert scene.ground_truth == spec.objects

    def test_deterministic(self):
        spec = random_scene_spec(7)
        a, b = gen_scene(spec), gen_scene(SceneSpec.from_json(spec.to_json()))
        assert a.image.tobytes() == b.image.tobytes()
        assert a.proposals == b.proposals

    def test_json_round_trip(self):
        spec = random_scene_spec(8, n_distractors=2)
        assert SceneSpec.from_json(spec.to_json()) == spec

    def test_invalid(self):
        with pytest.raises(ValueError):
            SceneSpec(32, 32, objects=[(Box(10, 10, 40, 20), 0)])
        with pytest.raises(ValueError):
            SceneSpec(32, 32, objects=[(Box(1, 1, 4, 4), 9)])

    def test_halo_separates_pair(self):
        # categories 0 and 1 share a body and differ in the surrounding frame
        box = Box(20, 20, 40, 40)
        a = render_scene(SceneSpec(64, 64, objects=[(box, 0)], n_categories=2, noise=0.0))
        b = render_scene(SceneSpec(64, 64, objects=[(box, 1)], n_categories=2, noise=0.0))
        assert np.array_equal(a[20:40, 20:40], b[20:40, 20:40])
        assert not np.array_equal(a[16:20, 20:40], b[16:20, 20:40])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_random_spec_constraints(self, seed):
        spec = random_scene_spec(seed)
        objs = [b for b, _ in spec.objects]
        for box, _ in spec.distractors:
            assert all(box.x2 <= o.x1 or o.x2 <= box.x1 or box.y2 <= o.y1 or o.y2 <= box.y1 for o in objs)
        for p in gen_scene(spec).proposals:
            assert p.objectness >= 0.5


class TestDistractorInvariance:
    """At L=1 the masked [OBJ] embedding reads only the masked patches, so a
    distractor drawn outside the mask footprint cannot move it."""

    def setup_method(self):
        self.w = gen_weights(replace(EncoderConfig(), L=1), 11)
        self.box = Box(40, 40, 56, 56)  # r=4 gives the square (32, 32, 64, 64), one source pixel per crop pixel
        self.objects = [(self.box, 0)]
        # the distractor and its frame stay in the crop's unmasked corner
        self.distractors = [(Box(58, 33, 63, 38), 2)]

    def scenes(self):
        clean = render_scene(SceneSpec(96, 96, objects=self.objects, seed=4))
        busy = render_scene(SceneSpec(96, 96, objects=self.objects, distractors=self.distractors, seed=4))
        return clean, busy

    def test_crop_changes(self):
        clean, busy = self.scenes()
        square = crop_square("adaptive", self.box, ImageSize(96, 96), r=4.0)
        assert square == Box(32, 32, 64, 64)
        a = crop_and_resize(clean, square, 32, 32)
        b = crop_and_resize(busy, square, 32, 32)
        assert np.abs(a - b).max() > 0.1

    def test_masked_obj_invariant(self):
        clean, busy = self.scenes()
        a = extract_object_embedding(clean, self.box, self.w, r=4.0)
        b = extract_object_embedding(busy, self.box, self.w, r=4.0)
        assert np.abs(a - b).max() < 1e-12

    def test_unmasked_cls_moves(self):
        clean, busy = self.scenes()
        square = crop_square("adaptive", self.box, ImageSize(96, 96), r=4.0)
        a, m = object_crop(clean, self.box, square, self.w)
        b, _ = object_crop(busy, self.box, square, self.w)
        assert m[:-1].reshape(4, 4).tolist() == [[False] * 4] + [[False, True, True, False]] * 2 + [[False] * 4]
        assert np.abs(encode_cls(a, self.w) - encode_cls(b, self.w)).max() > 1e-6
