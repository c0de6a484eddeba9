"""Residual-dense enhancement network: identity at init, shapes, gradients."""

import numpy as np
import pytest

from jointiq import autodiff as ad
from jointiq.autodiff import Tensor
from jointiq.enhancement import (GRDN_FINAL, GRDN_LIGHT, Grdn, GrdnConfig,
                                 GroupedResidualDenseBlock, ResidualDenseBlock)


class TestConfig:
    def test_published_operating_points(self):
        assert GRDN_FINAL == GrdnConfig(4, 4, 8, 64)
        assert GRDN_LIGHT == GrdnConfig(4, 3, 3, 32)

    def test_rejects_non_positive_fields(self):
        with pytest.raises(ValueError):
            GrdnConfig(0, 1, 1, 8)
        with pytest.raises(ValueError):
            GrdnConfig(1, 1, 1, 0)


class TestForward:
    def test_zero_tail_makes_exact_identity(self):
        rng = np.random.default_rng(0)
        net = Grdn(rng, GrdnConfig(2, 2, 2, 6))
        x = rng.uniform(-1, 1, (3, 9, 13))
        out = net(Tensor(x)).data
        assert np.array_equal(out, x)

    def test_output_clamped_when_tail_active(self):
        rng = np.random.default_rng(1)
        net = Grdn(rng, GrdnConfig(1, 1, 1, 4))
        net.tail.w.data = rng.normal(0, 5.0, net.tail.w.data.shape)
        x = rng.uniform(-1, 1, (3, 8, 8))
        out = net(Tensor(x)).data
        assert out.max() <= 1.0 and out.min() >= -1.0
        assert not np.array_equal(out, x)

    def test_shapes_preserved(self):
        rng = np.random.default_rng(2)
        net = Grdn(rng, GrdnConfig(1, 2, 2, 5))
        for hw in [(5, 7), (16, 16), (13, 17)]:
            x = Tensor(rng.uniform(-1, 1, (3, *hw)))
            assert net(x).shape == (3, *hw)

    def test_rdb_local_skip(self):
        rng = np.random.default_rng(3)
        rdb = ResidualDenseBlock(rng, 4, 2)
        rdb.fuse.w.data[:] = 0.0
        x = rng.standard_normal((4, 6, 6))
        assert np.array_equal(rdb(Tensor(x)).data, x)

    def test_grdb_global_skip(self):
        rng = np.random.default_rng(4)
        grdb = GroupedResidualDenseBlock(rng, 4, 2, 2)
        grdb.fuse.w.data[:] = 0.0
        x = rng.standard_normal((4, 6, 6))
        assert np.array_equal(grdb(Tensor(x)).data, x)

    def test_parameter_count_scales_with_config(self):
        rng = np.random.default_rng(5)
        small = Grdn(rng, GrdnConfig(1, 1, 1, 4)).params()
        big = Grdn(rng, GrdnConfig(2, 2, 2, 4)).params()
        assert len(big) > len(small)
        assert len(set(big)) == len(big)


class TestGradients:
    def test_full_network_gradcheck(self):
        rng = np.random.default_rng(6)
        net = Grdn(rng, GrdnConfig(1, 1, 1, 3))
        # small active tail; keep outputs off the clamp boundary
        net.tail.w.data = rng.normal(0, 0.02, net.tail.w.data.shape)
        x = Tensor(rng.uniform(-0.5, 0.5, (3, 5, 5)))
        c = rng.standard_normal((3, 5, 5))
        params = list(net.params().values())
        report = ad.grad_check(lambda: (net(x) * Tensor(c)).sum(), params,
                               h=1e-6)
        assert report["passed"], report
