"""Analysis/synthesis transform networks, quantization, and per-scale padding.

The codec halves spatial extents four times on the image side and twice
more on the hyper side.  Whenever an extent is odd before a halving, one
replicate line is appended at the bottom (right); the decoder re-derives
the same ladder from the original extents alone and crops symmetrically
on the way back up.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError, ShapeError

LATENT_CLAMP = 255  # keeps the entropy-coder alphabet finite
IMAGE_SCALES = 4    # halvings between image and main latent
HYPER_SCALES = 2    # further halvings between main and hyper latent


def scale_ladder(extent: int, num_scales: int) -> list[tuple[int, int, int]]:
    """Per-scale (input extent, padded extent, output extent) triples."""
    steps = []
    e = extent
    for _ in range(num_scales):
        pe = e + (e & 1)
        steps.append((e, pe, pe // 2))
        e = pe // 2
    return steps


def latent_extent(extent: int, num_scales: int) -> int:
    e = extent
    for _ in range(num_scales):
        e = (e + (e & 1)) // 2
    return e


@dataclass(frozen=True)
class PaddingRecord:
    """Pad bookkeeping; fully determined by the original size."""

    orig_height: int
    orig_width: int
    num_scales: int
    pad_h: tuple = field(default=())  # one flag per scale
    pad_w: tuple = field(default=())

    @staticmethod
    def for_size(height: int, width: int, num_scales: int) -> "PaddingRecord":
        lh = scale_ladder(height, num_scales)
        lw = scale_ladder(width, num_scales)
        return PaddingRecord(
            orig_height=height, orig_width=width, num_scales=num_scales,
            pad_h=tuple(p != e for e, p, _ in lh),
            pad_w=tuple(p != e for e, p, _ in lw))


def pad_for_scales(img: Tensor, num_scales: int) -> tuple[Tensor, PaddingRecord]:
    """Apply the scale-0 replicate pad; deeper scales pad inside the
    strided stages (see ``AnalysisTransform``)."""
    if num_scales < 0:
        raise ValueError("num_scales must be >= 0")
    C, H, W = img.shape
    record = PaddingRecord.for_size(H, W, num_scales)
    if num_scales == 0:
        return img, record
    out = ad.pad_edge_br(img, int(record.pad_h[0]), int(record.pad_w[0]))
    return out, record


def unpad(img: Tensor, record: PaddingRecord) -> Tensor:
    C, H, W = img.shape
    eh = record.orig_height + (record.pad_h[0] if record.num_scales else 0)
    ew = record.orig_width + (record.pad_w[0] if record.num_scales else 0)
    if (H, W) != (eh, ew):
        raise ShapeError(f"image {H}x{W} inconsistent with padding record "
                         f"({eh}x{ew} expected)")
    if (H, W) == (record.orig_height, record.orig_width):
        return img
    return img[:, :record.orig_height, :record.orig_width]


def quantize(v, mode: str = "round", rng: np.random.Generator | None = None):
    """Integer quantization (ties away from zero, clamped) or additive
    uniform noise in [-1/2, 1/2) for the training relaxation."""
    data = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericError("non-finite values passed to quantize")
    if mode == "round":
        q = np.copysign(np.floor(np.abs(data) + 0.5), data)
        return np.clip(q, -LATENT_CLAMP, LATENT_CLAMP)
    if mode == "noise":
        if rng is None:
            raise ValueError("noise mode needs a seedable generator")
        noise = rng.uniform(-0.5, 0.5, size=data.shape)
        if isinstance(v, Tensor):
            return v + Tensor(noise.astype(data.dtype))
        return data + noise
    raise ValueError(f"unknown quantize mode {mode!r}")


# -- layers --------------------------------------------------------------------


class Conv2d:
    """Stride-s 'same' convolution with bias; optional constant tap mask."""

    def __init__(self, rng: np.random.Generator, in_c: int, out_c: int, k: int,
                 stride: int = 1, mask: np.ndarray | None = None,
                 zero_init: bool = False, dtype=np.float64):
        fan_in = in_c * k * k
        w = np.zeros((out_c, in_c, k, k)) if zero_init else \
            rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_c, in_c, k, k))
        self.w = Tensor(w.astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(out_c, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.mask = mask

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.conv2d(x, self.w, stride=self.stride, mask=self.mask)
        return _bias_add_chw(out, self.b)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class TransposedConv2d:
    """Stride-s transposed convolution with bias; kernel (in_c, out_c, k, k)."""

    def __init__(self, rng: np.random.Generator, in_c: int, out_c: int, k: int,
                 stride: int, dtype=np.float64):
        fan_in = in_c * k * k // (stride * stride)
        w = rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)),
                       size=(in_c, out_c, k, k))
        self.w = Tensor(w.astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(out_c, dtype=dtype), requires_grad=True)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.transposed_conv2d(x, self.w, stride=self.stride)
        return _bias_add_chw(out, self.b)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def _bias_add_chw(x: Tensor, b: Tensor) -> Tensor:
    out = x.data + b.data[:, None, None]

    def vjp(g):
        return (g, g.sum(axis=(1, 2)))

    return Tensor._from_op(out, (x, b), vjp)


# -- transform networks ----------------------------------------------------------


class AnalysisTransform:
    """Image -> main latent: four stride-2 5x5 convolutions with
    leaky-relu(0.2) between stages; channels N,N,N,M."""

    def __init__(self, rng, n: int, m: int, dtype=np.float64):
        chans = [3, n, n, n, m]
        self.stages = [Conv2d(rng, chans[i], chans[i + 1], k=5, stride=2, dtype=dtype)
                       for i in range(4)]

    def __call__(self, x: Tensor, record: PaddingRecord) -> Tensor:
        h = x
        for s, stage in enumerate(self.stages):
            if s > 0:  # scale-0 pad already applied by pad_for_scales
                h = ad.pad_edge_br(h, int(record.pad_h[s]), int(record.pad_w[s]))
            h = stage(h)
            if s < 3:
                h = ad.leaky_relu(h, 0.2)
        return h

    def params(self, prefix: str = "ga") -> dict:
        out = {}
        for i, st in enumerate(self.stages):
            out.update(st.params(f"{prefix}.{i}"))
        return out


class SynthesisTransform:
    """Main latent -> image: mirror of the analysis transform with
    transposed convolutions; output clamped to [-1, 1]."""

    def __init__(self, rng, n: int, m: int, dtype=np.float64):
        chans = [m, n, n, n, 3]
        self.stages = [TransposedConv2d(rng, chans[i], chans[i + 1], k=5, stride=2,
                                        dtype=dtype)
                       for i in range(4)]

    def __call__(self, y: Tensor, record: PaddingRecord) -> Tensor:
        h = y
        for i, stage in enumerate(self.stages):
            s = 3 - i  # undo scales deepest-first
            h = stage(h)
            # the scale-0 pad is external (pad_for_scales/unpad), so only
            # interior-scale pads are cropped here
            if s > 0 and (record.pad_h[s] or record.pad_w[s]):
                ladder_h = scale_ladder(record.orig_height, record.num_scales)
                ladder_w = scale_ladder(record.orig_width, record.num_scales)
                h = h[:, :ladder_h[s][0], :ladder_w[s][0]]
            if i < 3:
                h = ad.leaky_relu(h, 0.2)
        return ad.clamp(h, -1.0, 1.0)

    def params(self, prefix: str = "gs") -> dict:
        out = {}
        for i, st in enumerate(self.stages):
            out.update(st.params(f"{prefix}.{i}"))
        return out


class HyperAnalysisTransform:
    """Main latent -> hyper latent: 3x3 stride-1 conv then two 5x5
    stride-2 convs (channels N throughout)."""

    def __init__(self, rng, n: int, m: int, dtype=np.float64):
        self.conv0 = Conv2d(rng, m, n, k=3, stride=1, dtype=dtype)
        self.down = [Conv2d(rng, n, n, k=5, stride=2, dtype=dtype) for _ in range(2)]

    def __call__(self, y: Tensor, record: PaddingRecord) -> Tensor:
        hy = latent_extent(record.orig_height, IMAGE_SCALES)
        wy = latent_extent(record.orig_width, IMAGE_SCALES)
        lh = scale_ladder(hy, HYPER_SCALES)
        lw = scale_ladder(wy, HYPER_SCALES)
        h = ad.leaky_relu(self.conv0(y), 0.2)
        for s, stage in enumerate(self.down):
            h = ad.pad_edge_br(h, int(lh[s][1] != lh[s][0]), int(lw[s][1] != lw[s][0]))
            h = stage(h)
            if s == 0:
                h = ad.leaky_relu(h, 0.2)
        return h

    def params(self, prefix: str = "ha") -> dict:
        out = self.conv0.params(f"{prefix}.0")
        for i, st in enumerate(self.down):
            out.update(st.params(f"{prefix}.{i + 1}"))
        return out


class HyperSynthesisTransform:
    """Hyper latent -> conditioning features over the main latent grid;
    2M output channels."""

    def __init__(self, rng, n: int, m: int, dtype=np.float64):
        self.up = [TransposedConv2d(rng, n, n, k=5, stride=2, dtype=dtype)
                   for _ in range(2)]
        self.conv_out = Conv2d(rng, n, 2 * m, k=3, stride=1, dtype=dtype)

    def __call__(self, z: Tensor, record: PaddingRecord) -> Tensor:
        hy = latent_extent(record.orig_height, IMAGE_SCALES)
        wy = latent_extent(record.orig_width, IMAGE_SCALES)
        lh = scale_ladder(hy, HYPER_SCALES)
        lw = scale_ladder(wy, HYPER_SCALES)
        h = z
        for i, stage in enumerate(self.up):
            s = 1 - i
            h = stage(h)
            h = h[:, :lh[s][0], :lw[s][0]]
            h = ad.leaky_relu(h, 0.2)
        return self.conv_out(h)

    def params(self, prefix: str = "hs") -> dict:
        out = {}
        for i, st in enumerate(self.up):
            out.update(st.params(f"{prefix}.{i}"))
        out.update(self.conv_out.params(f"{prefix}.2"))
        return out
