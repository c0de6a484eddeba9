"""Full codec model: transforms + entropy model + enhancement network.

A model is constructed from a ``ModelConfig`` with a deterministic
parameter initialization (seeded), and can be round-tripped through the
binary checkpoint format; the config rides along inside the checkpoint as
a reserved entry so a checkpoint is self-describing.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .enhancement import Grdn, GrdnConfig
from .entropy import EntropyModel, likelihood_graph, rate_bits_graph
from .errors import ConfigError
from .transforms import (AnalysisTransform, HyperAnalysisTransform,
                         HyperSynthesisTransform, IMAGE_SCALES, PaddingRecord,
                         SynthesisTransform, latent_extent, pad_for_scales,
                         quantize, unpad)

# operating points: lambda -> (N, M, iterations, initial learning rate)
LAMBDA_TABLE = (
    (0.5, 128, 128, 1_200_000, 1e-4),
    (0.35, 128, 128, 1_200_000, 1e-4),
    (0.23, 128, 192, 1_500_000, 1e-4),
    (0.12, 192, 256, 1_500_000, 1e-4),
    (0.06, 192, 420, 2_000_000, 5e-5),
    (0.03, 192, 420, 2_000_000, 5e-5),
    (0.017, 256, 600, 3_000_000, 5e-5),
    (0.01, 256, 600, 3_000_000, 3e-5),
)

FLAG_GC = 1
FLAG_GMM = 2
FLAG_ENHANCE = 4
FLAG_MPRM = 8

CONFIG_KEY = "__config__"


@dataclass(frozen=True)
class ModelConfig:
    n: int = 32
    m: int = 48
    g: int = 3
    k_clip: int = 7
    min_count: int = 30
    lam: float = 0.06
    use_gc: bool = True
    use_gmm: bool = True
    use_mprm: bool = True
    use_enhance: bool = True
    grdn: GrdnConfig = GrdnConfig()
    hidden_mult: int = 4
    model_id: int = 255  # 0..7 index the built-in lambda table; 255 = custom
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ConfigError("lambda must lie in (0,1)")
        if self.use_gmm and self.g < 2:
            raise ConfigError("GMM flag requires g >= 2")
        if not self.use_gmm and self.g != 1:
            raise ConfigError("single-Gaussian flag requires g == 1")
        if self.model_id != 255:
            lam, n, m, _, _ = LAMBDA_TABLE[self.model_id]
            if (lam, n, m) != (self.lam, self.n, self.m):
                raise ConfigError(
                    f"model_id {self.model_id} implies lambda={lam}, N={n}, M={m}")

    @property
    def flags(self) -> int:
        return ((FLAG_GC if self.use_gc else 0)
                | (FLAG_GMM if self.use_gmm else 0)
                | (FLAG_ENHANCE if self.use_enhance else 0)
                | (FLAG_MPRM if self.use_mprm else 0))

    @staticmethod
    def for_model_id(model_id: int, **overrides) -> "ModelConfig":
        lam, n, m, _, _ = LAMBDA_TABLE[model_id]
        return ModelConfig(n=n, m=m, lam=lam, model_id=model_id, **overrides)

    def to_vector(self) -> np.ndarray:
        g = self.grdn
        return np.array([
            1.0, self.n, self.m, self.g, self.k_clip, self.min_count,
            self.flags, self.lam, self.model_id, g.num_grdbs, g.rdbs_per_grdb,
            g.convs_per_rdb, g.kernels_per_conv, self.hidden_mult, self.seed,
        ], dtype=np.float64)

    @staticmethod
    def from_vector(v: np.ndarray) -> "ModelConfig":
        if int(v[0]) != 1:
            raise ConfigError(f"unknown embedded config version {v[0]}")
        flags = int(v[6])
        model_id = int(v[8])
        # the float32 round trip perturbs lambda; table rows restore it exactly
        lam = LAMBDA_TABLE[model_id][0] if model_id != 255 else float(np.float32(v[7]))
        return ModelConfig(
            n=int(v[1]), m=int(v[2]), g=int(v[3]), k_clip=int(v[4]),
            min_count=int(v[5]), lam=lam,
            use_gc=bool(flags & FLAG_GC), use_gmm=bool(flags & FLAG_GMM),
            use_mprm=bool(flags & FLAG_MPRM),
            use_enhance=bool(flags & FLAG_ENHANCE),
            grdn=GrdnConfig(int(v[9]), int(v[10]), int(v[11]), int(v[12])),
            hidden_mult=int(v[13]), model_id=model_id, seed=int(v[14]))


class CodecModel:
    """All trainable pieces plus the training-time forward pass."""

    def __init__(self, config: ModelConfig, dtype=np.float64):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(config.seed)
        self.ga = AnalysisTransform(rng, config.n, config.m, dtype=dtype)
        self.gs = SynthesisTransform(rng, config.n, config.m, dtype=dtype)
        self.ha = HyperAnalysisTransform(rng, config.n, config.m, dtype=dtype)
        self.hs = HyperSynthesisTransform(rng, config.n, config.m, dtype=dtype)
        self.em = EntropyModel(rng, config.n, config.m, g=config.g,
                               k_clip=config.k_clip, min_count=config.min_count,
                               use_gc=config.use_gc, use_mprm=config.use_mprm,
                               hidden_mult=config.hidden_mult, dtype=dtype)
        self.q = Grdn(rng, config.grdn, dtype=dtype) if config.use_enhance else None

    def params(self) -> dict:
        out = {}
        out.update(self.ga.params("ga"))
        out.update(self.gs.params("gs"))
        out.update(self.ha.params("ha"))
        out.update(self.hs.params("hs"))
        out.update(self.em.params("em"))
        if self.q is not None:
            out.update(self.q.params("q"))
        return out

    # -- persistence -----------------------------------------------------------

    def save(self, path: str) -> None:
        entries = dict(self.params())
        entries[CONFIG_KEY] = Tensor(self.config.to_vector())
        ad.save_checkpoint(path, entries)

    @staticmethod
    def load(path: str, dtype=np.float64) -> "CodecModel":
        raw = ad.load_checkpoint(path)
        if CONFIG_KEY not in raw:
            raise ConfigError("checkpoint lacks embedded model config")
        config = ModelConfig.from_vector(raw[CONFIG_KEY].astype(np.float64))
        model = CodecModel(config, dtype=dtype)
        params = model.params()
        missing = set(params) - set(raw)
        if missing:
            raise ConfigError(f"checkpoint missing tensors: {sorted(missing)[:3]}...")
        for name, t in params.items():
            arr = raw[name].astype(dtype)
            if arr.shape != t.data.shape:
                raise ConfigError(f"checkpoint tensor {name} has shape {arr.shape}, "
                                  f"model expects {t.data.shape}")
            t.data = arr
        return model

    def load_params_from(self, other: "CodecModel") -> None:
        mine, theirs = self.params(), other.params()
        for name, t in mine.items():
            t.data = theirs[name].data.copy()

    # -- training forward --------------------------------------------------------

    def training_forward(self, x: np.ndarray, rng: np.random.Generator,
                         with_rate: bool = True) -> dict:
        """Noise-relaxed forward pass on one image; returns graph tensors for
        the rate (bits), the reconstruction, and intermediates.

        ``with_rate=False`` skips the hyper branch and the entropy model
        entirely (distortion-only training stages need neither).
        """
        cfg = self.config
        xt = Tensor(np.asarray(x, dtype=self.dtype))
        xp, rec = pad_for_scales(xt, IMAGE_SCALES)
        y = self.ga(xp, rec)
        y_noisy = quantize(y, "noise", rng)
        out = {
            "x": xt, "record": rec, "y": y, "y_noisy": y_noisy,
            "latent_extents": (y.shape[1], y.shape[2]),
        }
        if with_rate:
            z = self.ha(y_noisy, rec)
            z_noisy = quantize(z, "noise", rng)
            hs_out = self.hs(z_noisy, rec)
            pi, mu, sigma = self.em.training_params(y_noisy, hs_out)
            P = y.shape[1] * y.shape[2]
            vals = ad.transpose(y_noisy.reshape(cfg.m, P), (1, 0))
            p_y = likelihood_graph(vals, pi, mu, sigma)  # (P, M)
            p_z = self._z_likelihood(z_noisy)
            out.update(z_noisy=z_noisy, p_y=p_y, p_z=p_z,
                       rate_y=rate_bits_graph(p_y),
                       rate_z=rate_bits_graph(p_z))
        xhat = self.gs(y_noisy, rec)
        out["xhat"] = unpad(xhat, rec)
        return out

    def enhance(self, xhat: Tensor) -> Tensor:
        return self.q(xhat) if self.q is not None else xhat

    def _z_likelihood(self, z_noisy: Tensor) -> Tensor:
        C = z_noisy.shape[0]
        sigma = self.em.z_sigma().reshape(C, 1, 1, 1)
        pi = Tensor(np.ones(1, dtype=self.dtype))
        mu = Tensor(np.zeros(1, dtype=self.dtype))
        return likelihood_graph(z_noisy, pi, mu, sigma)

    def latent_extents_for(self, height: int, width: int) -> tuple[int, int]:
        return (latent_extent(height, IMAGE_SCALES),
                latent_extent(width, IMAGE_SCALES))
