"""End-to-end encode/decode pipeline and the .jiq bitstream container.

Container layout (all integers big-endian):

    magic "JIQ1" | version u8 | flags u8 | width u16 | height u16 |
    model_id u8 | z_len u32 | z payload | y payload

Width/height are the original (pre-pad) extents; the decoder re-derives
every padded ladder from them.  The hyper payload is coded first because
its decoded features condition the autoregressive main-latent loop.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .entropy import (TAIL_HI, TAIL_LO, rate_bits_coding, symbol_to_value,
                      value_to_symbol)
from .errors import ConfigError, DataError
from .model import CodecModel, FLAG_ENHANCE, FLAG_GC, FLAG_GMM, FLAG_MPRM
from .rangecoder import RangeDecoder, RangeEncoder, build_cdf
from .transforms import (HYPER_SCALES, IMAGE_SCALES, PaddingRecord,
                         latent_extent, pad_for_scales, quantize, unpad)

MAGIC = b"JIQ1"
VERSION = 1
HEADER_FMT = ">4sBBHHB"
HEADER_LEN = struct.calcsize(HEADER_FMT)


@dataclass(frozen=True)
class Header:
    flags: int
    width: int
    height: int
    model_id: int
    version: int = VERSION

    def serialize(self) -> bytes:
        if not (1 <= self.width <= 0xFFFF and 1 <= self.height <= 0xFFFF):
            raise DataError("extents must fit in u16")
        return struct.pack(HEADER_FMT, MAGIC, self.version, self.flags,
                           self.width, self.height, self.model_id)

    @staticmethod
    def parse(data: bytes) -> "Header":
        if len(data) < HEADER_LEN:
            raise DataError("truncated header")
        magic, version, flags, width, height, model_id = \
            struct.unpack_from(HEADER_FMT, data)
        if magic != MAGIC:
            raise DataError(f"bad magic {magic!r}")
        if version != VERSION:
            raise DataError(f"unsupported bitstream version {version}")
        return Header(flags=flags, width=width, height=height,
                      model_id=model_id, version=version)


@dataclass(frozen=True)
class RdPoint:
    bpp: float
    psnr_db: float
    msssim: float

    def __post_init__(self):
        if self.bpp <= 0:
            raise ValueError("bpp must be positive")
        if self.msssim > 1:
            raise ValueError("ms-ssim cannot exceed 1")


def _effective_flags(model: CodecModel, overrides: dict | None) -> int:
    """Combine checkpoint capabilities with requested ablations.

    A feature can be switched off relative to the checkpoint, but not on.
    """
    flags = model.config.flags
    overrides = overrides or {}
    for key, bit in (("gc", FLAG_GC), ("gmm", FLAG_GMM),
                     ("enhance", FLAG_ENHANCE), ("mprm", FLAG_MPRM)):
        if overrides.get(key) is False:
            if bit == FLAG_GMM and (flags & bit):
                raise ConfigError(
                    "single-Gaussian coding requires a checkpoint trained "
                    "with g=1")
            flags &= ~bit
        elif overrides.get(key) is True and not (flags & bit):
            raise ConfigError(f"checkpoint was built without the {key} feature")
    return flags


class _FlagScope:
    """Temporarily retarget the entropy model / enhancement switches to the
    bitstream's flags (encode and decode must agree on them)."""

    def __init__(self, model: CodecModel, flags: int):
        self.model = model
        self.flags = flags

    def __enter__(self):
        em = self.model.em
        self._saved = (em.use_gc, em.use_mprm)
        em.use_gc = bool(self.flags & FLAG_GC)
        em.use_mprm = bool(self.flags & FLAG_MPRM)
        if (self.flags & FLAG_GMM) and self.model.config.g < 2:
            raise ConfigError("bitstream requires a mixture model checkpoint")
        return self

    def __exit__(self, *exc):
        self.model.em.use_gc, self.model.em.use_mprm = self._saved
        return False


def _code_z(model: CodecModel, zhat: np.ndarray | None, enc_or_dec, shape=None):
    """Shared hyper-latent coding loop: encodes when given values, decodes
    when given a shape."""
    tables = [build_cdf(row) for row in model.em.z_pmf_table()]
    if zhat is not None:
        syms = value_to_symbol(zhat)
        for c in range(zhat.shape[0]):
            flat = syms[c].reshape(-1)
            table = tables[c]
            for s in flat:
                enc_or_dec.encode_symbol(table, int(s))
        return None
    C, h, w = shape
    out = np.zeros(shape)
    for c in range(C):
        table = tables[c]
        flat = np.empty(h * w, dtype=np.int64)
        for i in range(h * w):
            s = enc_or_dec.decode_symbol(table)
            if s in (TAIL_LO, TAIL_HI):
                raise DataError("tail escape in hyper payload")
            flat[i] = s
        out[c] = symbol_to_value(flat).reshape(h, w)
    return out


def encode_image(x: np.ndarray, model: CodecModel,
                 flag_overrides: dict | None = None) -> tuple[bytes, dict]:
    """Compress a float (3,H,W) image in [-1,1] into a .jiq byte string.

    Also returns a stats dict (stream sizes and the model's own
    cross-entropy estimate of the main payload, for rate-model checks).
    """
    C, H, W = x.shape
    flags = _effective_flags(model, flag_overrides)
    header = Header(flags=flags, width=W, height=H,
                    model_id=model.config.model_id)

    with _FlagScope(model, flags):
        xt = Tensor(np.asarray(x, dtype=np.float64))
        xp, rec = pad_for_scales(xt, IMAGE_SCALES)
        y = model.ga(xp, rec).data
        yhat = quantize(y, "round")
        z = model.ha(Tensor(yhat), rec).data
        zhat = quantize(z, "round")

        enc_z = RangeEncoder()
        _code_z(model, zhat, enc_z)
        z_payload = enc_z.flush()

        hs_out = model.hs(Tensor(zhat), rec).data

        M, Hy, Wy = yhat.shape
        state = model.em.start_coding_state((Hy, Wy))
        enc_y = RangeEncoder()
        est_bits = 0.0
        yflat = yhat.reshape(M, -1)
        for p in range(Hy * Wy):
            params = model.em.estimate_position(state, hs_out, p)
            pmf = model.em.pmf_table(params)
            syms = value_to_symbol(yflat[:, p])
            est_bits += rate_bits_coding(pmf, syms)
            for c in range(M):
                enc_y.encode_symbol(build_cdf(pmf[c]), int(syms[c]))
            model.em.commit_position(state, p, yflat[:, p])
        y_payload = enc_y.flush()

    stream = header.serialize() + struct.pack(">I", len(z_payload)) \
        + z_payload + y_payload
    stats = {
        "bytes": len(stream),
        "bpp": len(stream) * 8.0 / (W * H),
        "z_bytes": len(z_payload),
        "y_bytes": len(y_payload),
        "y_bits_estimate": est_bits,
        "yhat": yhat,
        "zhat": zhat,
    }
    return stream, stats


def decode_image(stream: bytes, model: CodecModel) -> tuple[np.ndarray, dict]:
    """Decompress a .jiq byte string to a float (3,H,W) image in [-1,1]."""
    header = Header.parse(stream)
    if header.model_id != model.config.model_id:
        raise DataError(f"bitstream model_id {header.model_id} does not match "
                        f"checkpoint model_id {model.config.model_id}")
    if header.flags & ~model.config.flags:
        raise DataError("bitstream uses features absent from checkpoint")
    off = HEADER_LEN
    if len(stream) < off + 4:
        raise DataError("truncated container")
    (z_len,) = struct.unpack_from(">I", stream, off)
    off += 4
    z_payload = stream[off:off + z_len]
    if len(z_payload) != z_len:
        raise DataError("truncated hyper payload")
    y_payload = stream[off + z_len:]

    H, W = header.height, header.width
    rec = PaddingRecord.for_size(H, W, IMAGE_SCALES)
    Hy, Wy = latent_extent(H, IMAGE_SCALES), latent_extent(W, IMAGE_SCALES)
    Hz, Wz = latent_extent(Hy, HYPER_SCALES), latent_extent(Wy, HYPER_SCALES)

    with _FlagScope(model, header.flags):
        dec_z = RangeDecoder(z_payload)
        zhat = _code_z(model, None, dec_z, shape=(model.config.n, Hz, Wz))
        hs_out = model.hs(Tensor(zhat), rec).data

        M = model.config.m
        state = model.em.start_coding_state((Hy, Wy))
        dec_y = RangeDecoder(y_payload)
        for p in range(Hy * Wy):
            params = model.em.estimate_position(state, hs_out, p)
            pmf = model.em.pmf_table(params)
            values = np.empty(M)
            for c in range(M):
                s = dec_y.decode_symbol(build_cdf(pmf[c]))
                if s in (TAIL_LO, TAIL_HI):
                    raise DataError("tail escape in main payload")
                values[c] = symbol_to_value(s)
            model.em.commit_position(state, p, values)
        yhat = state["yhat"]

        xhat = model.gs(Tensor(yhat), rec)
        if (header.flags & FLAG_ENHANCE) and model.q is not None:
            xprime = model.q(xhat)
        else:
            xprime = xhat
        out = unpad(xprime, rec).data

    info = {"yhat": yhat, "zhat": zhat, "header": header}
    return out, info
