"""Rate-distortion training: loss assembly, Adam, the learning-rate
schedule, patch sampling, and the two-stage training procedure.

Stage A trains the enhancement network alone with a distortion-only loss;
stage B trains everything jointly on the full rate-distortion objective.
During stage B the enhancement network sees random crops of the
reconstruction (offsets snapped to the 16-pixel latent stride) and the
rate term covers only the spatially corresponding latent region.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields

import numpy as np

from .autodiff import Tensor
from .enhancement import GrdnConfig
from .entropy import LOG2E
from .errors import ConfigError, DataError, NumericError
from .imageio import read_image
from .metrics import IMAGE_SUFFIXES, ms_ssim_graph
from .model import CodecModel, ModelConfig

LATENT_STRIDE = 16  # pixels per latent sample after four halvings

LOG_HEADER = "step,loss,rate_bits,distortion,lr"


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.06
    n: int = 32
    m: int = 48
    g: int = 3
    k_clip: int = 7
    min_count: int = 30
    hidden_mult: int = 4
    num_grdbs: int = 4
    rdbs_per_grdb: int = 3
    convs_per_rdb: int = 3
    kernels_per_conv: int = 32
    use_gc: bool = True
    use_gmm: bool = True
    use_mprm: bool = True
    use_enhance: bool = True
    model_id: int = 255
    seed: int = 0
    batch_size: int = 1
    patch_size: int = 64
    q_crop: int = 0  # 0 disables cropping; else crop size for stage B
    iters: int = 2000
    stage_a_iters: int = 200
    lr: float = 1e-4
    decay_window: int = -1  # -1: iters // 4
    decay_interval: int = -1  # -1: window // 6
    distortion: str = "mse"

    def __post_init__(self):
        if self.distortion not in ("mse", "msssim"):
            raise ConfigError(f"unknown distortion {self.distortion!r}")
        if self.q_crop % LATENT_STRIDE:
            raise ConfigError("q_crop must be a multiple of 16")
        if self.q_crop > self.patch_size:
            raise ConfigError("q_crop cannot exceed the patch size")
        if self.batch_size < 1 or self.iters < 0 or self.stage_a_iters < 0:
            raise ConfigError("batch size and iteration counts must be valid")
        self.to_model_config()  # validates lambda range, flag/g consistency

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(
            n=self.n, m=self.m, g=self.g, k_clip=self.k_clip,
            min_count=self.min_count, lam=self.lam, use_gc=self.use_gc,
            use_gmm=self.use_gmm, use_mprm=self.use_mprm,
            use_enhance=self.use_enhance,
            grdn=GrdnConfig(self.num_grdbs, self.rdbs_per_grdb,
                            self.convs_per_rdb, self.kernels_per_conv),
            hidden_mult=self.hidden_mult, model_id=self.model_id,
            seed=self.seed)


_FLAG_NAMES = ("gc", "gmm", "mprm", "enhance")

_KEY_ALIASES = {"lambda": "lam", "k": "k_clip"}

_INT_KEYS = {"n", "m", "g", "k_clip", "min_count", "hidden_mult",
             "num_grdbs", "rdbs_per_grdb", "convs_per_rdb",
             "kernels_per_conv", "model_id", "seed", "batch_size",
             "patch_size", "q_crop", "iters", "stage_a_iters",
             "decay_window", "decay_interval"}


def parse_config(path: str) -> TrainConfig:
    """Read a `key = value` training config file.

    Blank lines and `#` comments are ignored; unknown keys are errors.
    The `flags` key lists enabled features (subset of gc,gmm,mprm,enhance,
    comma-separated); omitting gmm without giving g selects g=1.
    """
    valid = {f.name for f in fields(TrainConfig)}
    kwargs: dict = {}
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = _KEY_ALIASES.get(key.strip(), key.strip())
        value = value.strip()
        if key == "flags":
            enabled = {v.strip() for v in value.split(",") if v.strip()}
            unknown = enabled - set(_FLAG_NAMES)
            if unknown:
                raise ConfigError(f"{path}:{lineno}: unknown flags {sorted(unknown)}")
            for name in _FLAG_NAMES:
                kwargs[f"use_{name}"] = name in enabled
            continue
        if key not in valid:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            if key in _INT_KEYS:
                kwargs[key] = int(value)
            elif key == "distortion":
                kwargs[key] = value
            else:
                kwargs[key] = float(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}") from exc
    if kwargs.get("use_gmm") is False and "g" not in kwargs:
        kwargs["g"] = 1
    return TrainConfig(**kwargs)


class PatchDataset:
    """Deterministic random patches, each fully inside a source image."""

    def __init__(self, folder: str, patch_size: int, seed: int = 0):
        files = sorted(os.path.join(folder, f) for f in os.listdir(folder)
                       if f.lower().endswith(IMAGE_SUFFIXES))
        self.patch_size = patch_size
        self.images = []
        for path in files:
            img = read_image(path)
            if img.shape[1] >= patch_size and img.shape[2] >= patch_size:
                self.images.append(img)
        if not self.images:
            raise DataError(
                f"no images in {folder} are at least {patch_size} pixels")
        self.rng = np.random.default_rng(seed)

    def sample(self) -> np.ndarray:
        img = self.images[int(self.rng.integers(len(self.images)))]
        ps = self.patch_size
        r = int(self.rng.integers(img.shape[1] - ps + 1))
        c = int(self.rng.integers(img.shape[2] - ps + 1))
        return img[:, r:r + ps, c:c + ps]

    def batch(self, size: int) -> list[np.ndarray]:
        return [self.sample() for _ in range(size)]


def _distortion_graph(xref: Tensor, xout: Tensor, kind: str) -> Tensor:
    if kind == "msssim":
        return 1.0 - ms_ssim_graph(xref, xout)
    diff = (xref - xout) * 127.5
    return (diff * diff).mean()


def rd_objective(rate_bits, distortion, lam: float, latent_samples: float,
                 kind: str = "mse"):
    """Combine rate and distortion into the training objective.

    Rate is normalized per latent sample over the 256-pixel footprint each
    sample covers; MSE (0-255 scale) is divided by 1000, while the MS-SSIM
    distortion (1 - score) is scaled by 50.  Works on floats and on graph
    tensors alike.
    """
    d_scale = (1.0 - lam) * 50.0 if kind == "msssim" else (1.0 - lam) / 1000.0
    return (lam / (latent_samples * 256.0)) * rate_bits + d_scale * distortion


def _crop_rate_bits(fw: dict, crop: tuple[int, int, int]) -> tuple[Tensor, float]:
    """Rate (bits) over the latent region under a pixel crop, plus the
    region's latent sample count for the loss normalizer."""
    Hy, Wy = fw["latent_extents"]
    r0, c0, size = crop
    lr0, lc0 = r0 // LATENT_STRIDE, c0 // LATENT_STRIDE
    ext = size // LATENT_STRIDE
    rows = np.arange(lr0, lr0 + ext)
    cols = np.arange(lc0, lc0 + ext)
    pos = (rows[:, None] * Wy + cols[None, :]).reshape(-1)
    from . import autodiff as ad
    bits_y = -(ad.log(fw["p_y"][pos, :]).sum()) * LOG2E
    # the hyper stream is not spatially addressable; charge the area share
    frac = float(ext * ext) / float(Hy * Wy)
    return bits_y + frac * fw["rate_z"], float(ext * ext)


def total_loss(x: np.ndarray, model: CodecModel, lam: float | None = None,
               rng: np.random.Generator | None = None,
               distortion: str = "mse",
               crop: tuple[int, int, int] | None = None,
               distortion_only: bool = False) -> tuple[Tensor, dict]:
    """Training objective for one image; returns (scalar graph, parts).

    The rate term is normalized by the latent sample count times 256, the
    distortion term is MSE on the 0-255 pixel scale divided by 1000 (or
    1 - MS-SSIM times 50).  `crop` = (row, col, size) in pixels, multiples
    of 16, restricts the distortion and the charged rate to that region.
    """
    if lam is None:
        lam = model.config.lam
    if rng is None:
        rng = np.random.default_rng(0)
    fw = model.training_forward(x, rng, with_rate=not distortion_only)
    xhat = fw["xhat"]
    xref = Tensor(np.asarray(x, dtype=model.dtype))
    if crop is not None:
        r0, c0, size = crop
        xhat = xhat[:, r0:r0 + size, c0:c0 + size]
        xref = Tensor(xref.data[:, r0:r0 + size, c0:c0 + size])
    xout = model.enhance(xhat)
    dist = _distortion_graph(xref, xout, distortion)
    if distortion_only:
        d_scale = (1.0 - lam) * 50.0 if distortion == "msssim" \
            else (1.0 - lam) / 1000.0
        loss = d_scale * dist
        parts = {"rate_bits": 0.0, "distortion": float(dist.item())}
        return loss, parts
    if crop is not None:
        rate, samples = _crop_rate_bits(fw, crop)
    else:
        Hy, Wy = fw["latent_extents"]
        rate, samples = fw["rate_y"] + fw["rate_z"], float(Hy * Wy)
    loss = rd_objective(rate, dist, lam, samples, distortion)
    parts = {"rate_bits": float(rate.item()),
             "distortion": float(dist.item())}
    return loss, parts


class Adam:
    """Adam over a named parameter dict (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data -= lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c)
                                                + self.eps)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Constant until the final decay window, then halve per interval."""
    window = config.decay_window if config.decay_window >= 0 \
        else config.iters // 4
    interval = config.decay_interval if config.decay_interval >= 1 \
        else max(1, window // 6)
    boundary = config.iters - window
    if step < boundary:
        return config.lr
    return config.lr / 2.0 ** ((step - boundary) // interval)


def train_step(batch: list[np.ndarray], model: CodecModel, optimizer: Adam,
               lr: float, rng: np.random.Generator, lam: float | None = None,
               distortion: str = "mse",
               crop: tuple[int, int, int] | None = None,
               distortion_only: bool = False) -> tuple[float, float, dict]:
    """One Adam update over a batch; returns (loss, grad norm, parts)."""
    optimizer.zero_grad()
    total = None
    rate_sum = dist_sum = 0.0
    for x in batch:
        loss, parts = total_loss(x, model, lam, rng, distortion, crop,
                                 distortion_only)
        rate_sum += parts["rate_bits"]
        dist_sum += parts["distortion"]
        total = loss if total is None else total + loss
    total = total * (1.0 / len(batch))
    value = float(total.item())
    if not math.isfinite(value):
        raise NumericError(
            f"non-finite loss {value} (rate_bits={rate_sum / len(batch)}, "
            f"distortion={dist_sum / len(batch)}, lr={lr})")
    total.backward()
    sq = 0.0
    for p in optimizer.params.values():
        if p.grad is not None:
            sq += float(np.sum(p.grad * p.grad))
    grad_norm = math.sqrt(sq)
    if not math.isfinite(grad_norm):
        raise NumericError(f"non-finite gradient norm at lr={lr}")
    optimizer.step(lr)
    return value, grad_norm, {"rate_bits": rate_sum / len(batch),
                              "distortion": dist_sum / len(batch)}


def _pick_crop(rng: np.random.Generator, patch: int, crop: int):
    if crop <= 0 or crop >= patch:
        return None
    cells = (patch - crop) // LATENT_STRIDE + 1
    r0 = int(rng.integers(cells)) * LATENT_STRIDE
    c0 = int(rng.integers(cells)) * LATENT_STRIDE
    return (r0, c0, crop)


def joint_training_procedure(config: TrainConfig, data_dir: str,
                             out_path: str, resume: str | None = None,
                             stage: str = "joint",
                             log_path: str | None = None) -> CodecModel:
    """Run stage A (enhancement-only, distortion loss), stage B (joint
    rate-distortion), or both; writes the checkpoint and a CSV log."""
    if stage not in ("a", "b", "joint"):
        raise ConfigError(f"unknown stage {stage!r}")
    if resume is not None:
        if not os.path.exists(resume):
            raise ConfigError(f"resume checkpoint {resume} does not exist")
        model = CodecModel.load(resume)
    else:
        model = CodecModel(config.to_model_config())
    dataset = PatchDataset(data_dir, config.patch_size, config.seed)
    noise_rng = np.random.default_rng(config.seed + 1000)
    crop_rng = np.random.default_rng(config.seed + 2000)

    log = open(log_path, "w", encoding="utf-8") if log_path else None
    if log:
        log.write(LOG_HEADER + "\n")

    def emit(step, loss, parts, lr):
        if log:
            log.write(f"{step},{loss:.8f},{parts['rate_bits']:.4f},"
                      f"{parts['distortion']:.8f},{lr:.8g}\n")

    try:
        step = 0
        if stage in ("a", "joint") and model.q is not None:
            opt = Adam(model.q.params("q"))
            for _ in range(config.stage_a_iters):
                loss, _, parts = train_step(
                    dataset.batch(config.batch_size), model, opt, config.lr,
                    noise_rng, config.lam, config.distortion,
                    distortion_only=True)
                emit(step, loss, parts, config.lr)
                step += 1
        if stage in ("b", "joint"):
            opt = Adam(model.params())
            for i in range(config.iters):
                lr = lr_schedule(i, config)
                crop = _pick_crop(crop_rng, config.patch_size, config.q_crop)
                loss, _, parts = train_step(
                    dataset.batch(config.batch_size), model, opt, lr,
                    noise_rng, config.lam, config.distortion, crop)
                emit(step, loss, parts, lr)
                step += 1
    finally:
        if log:
            log.close()
    model.save(out_path)
    return model
