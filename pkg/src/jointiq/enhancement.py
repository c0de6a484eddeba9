"""Residual-dense quality enhancement network cascaded after the decoder.

A stack of grouped residual dense blocks between a head and a tail
convolution, with a global additive skip from the input.  The tail is
zero-initialized so an untrained network is exactly the identity and
training starts from the plain codec.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .transforms import Conv2d


@dataclass(frozen=True)
class GrdnConfig:
    num_grdbs: int = 4
    rdbs_per_grdb: int = 3
    convs_per_rdb: int = 3
    kernels_per_conv: int = 32

    def __post_init__(self):
        for name in ("num_grdbs", "rdbs_per_grdb", "convs_per_rdb",
                     "kernels_per_conv"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


# published operating points: heavier for final models, lighter for studies
GRDN_FINAL = GrdnConfig(4, 4, 8, 64)
GRDN_LIGHT = GrdnConfig(4, 3, 3, 32)


class ResidualDenseBlock:
    """Densely connected 3x3 convs, 1x1 fusion, additive local skip."""

    def __init__(self, rng, channels: int, num_convs: int, dtype=np.float64):
        self.convs = [Conv2d(rng, channels * (i + 1), channels, k=3, dtype=dtype)
                      for i in range(num_convs)]
        self.fuse = Conv2d(rng, channels * (num_convs + 1), channels, k=1,
                           dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        feats = [x]
        for conv in self.convs:
            feats.append(ad.relu(conv(ad.concat(feats, axis=0))))
        return x + self.fuse(ad.concat(feats, axis=0))

    def params(self, prefix: str) -> dict:
        out = {}
        for i, c in enumerate(self.convs):
            out.update(c.params(f"{prefix}.conv{i}"))
        out.update(self.fuse.params(f"{prefix}.fuse"))
        return out


class GroupedResidualDenseBlock:
    """Chain of RDBs, 1x1 fusion over their outputs, additive skip."""

    def __init__(self, rng, channels: int, num_rdbs: int, convs_per_rdb: int,
                 dtype=np.float64):
        self.rdbs = [ResidualDenseBlock(rng, channels, convs_per_rdb, dtype=dtype)
                     for _ in range(num_rdbs)]
        self.fuse = Conv2d(rng, channels * num_rdbs, channels, k=1, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        outs = []
        h = x
        for rdb in self.rdbs:
            h = rdb(h)
            outs.append(h)
        return x + self.fuse(ad.concat(outs, axis=0))

    def params(self, prefix: str) -> dict:
        out = {}
        for i, r in enumerate(self.rdbs):
            out.update(r.params(f"{prefix}.rdb{i}"))
        out.update(self.fuse.params(f"{prefix}.fuse"))
        return out


class Grdn:
    """head conv -> GRDBs -> zero-init tail conv -> global skip -> clamp."""

    def __init__(self, rng, config: GrdnConfig, dtype=np.float64):
        c = config.kernels_per_conv
        self.config = config
        self.head = Conv2d(rng, 3, c, k=3, dtype=dtype)
        self.grdbs = [GroupedResidualDenseBlock(rng, c, config.rdbs_per_grdb,
                                                config.convs_per_rdb, dtype=dtype)
                      for _ in range(config.num_grdbs)]
        self.tail = Conv2d(rng, c, 3, k=3, zero_init=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.head(x)
        for g in self.grdbs:
            h = g(h)
        return ad.clamp(x + self.tail(h), -1.0, 1.0)

    def params(self, prefix: str = "q") -> dict:
        out = self.head.params(f"{prefix}.head")
        for i, g in enumerate(self.grdbs):
            out.update(g.params(f"{prefix}.grdb{i}"))
        out.update(self.tail.params(f"{prefix}.tail"))
        return out
