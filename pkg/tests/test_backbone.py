import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mspdet.backbone import Backbone, BackboneConfig, pad_to_stride
from mspdet.tensor import ModelParams, Tensor


@pytest.fixture(scope="module")
def backbone():
    return Backbone(ModelParams(), BackboneConfig(), np.random.default_rng(0))


def image(h, w, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(1, 3, h, w)))


class TestShapes:
    def test_square(self, backbone):
        pyr = backbone(image(64, 64))
        assert pyr.c3.shape == (1, 64, 16, 16)
        assert pyr.c4.shape == (1, 96, 8, 8)
        assert pyr.c5.shape == (1, 128, 4, 4)
        assert pyr.n3.shape == pyr.c3.shape

    def test_rectangular(self, backbone):
        pyr = backbone(image(128, 96))
        assert pyr.c3.shape[2:] == (32, 24)
        assert pyr.c4.shape[2:] == (16, 12)
        assert pyr.c5.shape[2:] == (8, 6)

    @settings(max_examples=6, deadline=None)
    @given(st.integers(2, 32))
    def test_level_strides(self, backbone, m):
        side = 16 * m
        pyr = backbone(image(side, 32))
        assert pyr.c3.shape[2:] == (side // 4, 8)
        assert pyr.c4.shape[2:] == (side // 8, 4)
        assert pyr.c5.shape[2:] == (side // 16, 2)

    def test_rejects_unpadded(self, backbone):
        with pytest.raises(RuntimeError):
            backbone(image(65, 64))

    def test_selected_norm_levels(self):
        params = ModelParams()
        bb = Backbone(params, BackboneConfig(), np.random.default_rng(0), levels=("p5",))
        pyr = bb(image(32, 32))
        assert pyr.n3 is None and pyr.n5 is not None
        assert "backbone.norm_p5.gamma" in params or any("norm_p5" in k for k in params)
        assert not any("norm_p3" in k for k in params)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            BackboneConfig(strides=(2, 2, 2, 2, 2))


class TestReceptiveField:
    def test_local_perturbation(self, backbone):
        """A pixel change only reaches c3 cells near it."""
        base = image(64, 64, seed=1)
        pert = Tensor(base.data.copy())
        pert.data[0, :, 40, 40] += 5.0
        a, b = backbone(base).c3.data, backbone(pert).c3.data
        changed = np.argwhere(np.abs(a - b).max(axis=1)[0] > 0)
        assert len(changed) > 0
        assert np.all(np.abs(changed - 10) <= 4)

    def test_c5_sees_wider_context(self, backbone):
        base = image(64, 64, seed=2)
        pert = Tensor(base.data.copy())
        pert.data[0, :, 8, 8] += 5.0
        d3 = np.abs(backbone(base).c3.data - backbone(pert).c3.data).max(axis=1)[0] > 0
        d5 = np.abs(backbone(base).c5.data - backbone(pert).c5.data).max(axis=1)[0] > 0
        # fraction of the map touched grows with depth
        assert d5.mean() > d3.mean()


class TestPad:
    def test_pad_up(self):
        t, hw = pad_to_stride(image(65, 70))
        assert t.shape[2:] == (80, 80) and hw == (65, 70)
        np.testing.assert_array_equal(t.data[:, :, 65:], 0)
        np.testing.assert_array_equal(t.data[:, :, :, 70:], 0)

    def test_already_aligned(self):
        x = image(32, 48)
        t, hw = pad_to_stride(x)
        assert t is x and hw == (32, 48)
