"""Conditional prior over the quantized latents.

Three context streams feed the per-position parameter estimator:

* hyper context: the 2M conditioning features decoded from the hyper
  latent, read off at the current position;
* local context: a causally masked 5x5 convolution over all latent
  channels (only raster-earlier positions contribute);
* global context: per channel, a softmax-weighted mean and standard
  deviation over the entire causal region, with trainable weight grids
  shared across positions (clipped/nearest-shared beyond distance K).

The estimator outputs, per latent channel, mixture weights, means and
standard deviations of a G-component Gaussian mixture; the coded
probability of an integer latent is the mixture mass on [n-1/2, n+1/2].

Every routine exists in two forms: a graph (autodiff) form evaluated over
all positions at once during training, and a plain-numpy per-position form
used by both encoder and decoder so their floating-point results are
bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .transforms import Conv2d, LATENT_CLAMP

SIGMA_MIN = 1e-3
EPS_DEN = 1e-6            # guard on the weighted-variance denominator
PMF_FLOOR = 2.0 ** -16    # keeps per-symbol bits <= 16
LOG2E = 1.0 / np.log(2.0)

ALPHABET_LO = -LATENT_CLAMP
ALPHABET_HI = LATENT_CLAMP
NUM_VALUES = ALPHABET_HI - ALPHABET_LO + 1   # 511 integers
NUM_SYMBOLS = NUM_VALUES + 2                 # plus low/high tail escapes
TAIL_LO = 0
TAIL_HI = NUM_SYMBOLS - 1

_EDGES = np.arange(ALPHABET_LO - 0.5, ALPHABET_HI + 1.5)  # 512 bin edges


def value_to_symbol(v: np.ndarray) -> np.ndarray:
    return (v - ALPHABET_LO + 1).astype(np.int64)


def symbol_to_value(s: np.ndarray) -> np.ndarray:
    return np.asarray(s, dtype=np.int64) + ALPHABET_LO - 1


@dataclass(frozen=True)
class GmmParams:
    """Mixture parameters for all M channels at one spatial position."""

    weights: np.ndarray  # (M, G), rows on the simplex
    means: np.ndarray    # (M, G)
    stddevs: np.ndarray  # (M, G), >= SIGMA_MIN

    def __post_init__(self):
        if not (self.weights.shape == self.means.shape == self.stddevs.shape):
            raise ShapeError("mixture parameter arrays disagree in shape")
        if np.any(np.abs(self.weights.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("mixture weights must sum to 1 per channel")
        if np.any(self.stddevs < SIGMA_MIN):
            raise ValueError(f"stddev below floor {SIGMA_MIN}")


class DenseLayer:
    def __init__(self, rng, in_dim: int, out_dim: int,
                 scale: float | None = None, dtype=np.float64):
        if scale is None:
            scale = np.sqrt(2.0 / in_dim)
        w = rng.normal(0.0, scale, size=(out_dim, in_dim))
        self.w = Tensor(w.astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.dense(x, self.w, self.b)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def causal_window_mask(k: int = 5) -> np.ndarray:
    """Taps strictly before the window centre in raster order."""
    mask = np.zeros((k, k))
    c = k // 2
    mask[:c, :] = 1.0
    mask[c, :c] = 1.0
    return mask


def causal_offset_index(pos: int, width: int, k_clip: int) -> np.ndarray:
    """Flat indices into a flattened (2K+1)x(2K+1) weight grid for every
    causal position (raster order), with offsets clipped to +-K so that
    positions beyond the grid share the nearest stored weight."""
    side = 2 * k_clip + 1
    q = np.arange(pos)
    i_r, i_c = divmod(pos, width)
    ko = np.clip(i_r - q // width, -k_clip, k_clip)
    lo = np.clip(i_c - q % width, -k_clip, k_clip)
    return (ko + k_clip) * side + (lo + k_clip)


def build_weight_field(psi: np.ndarray, pos: int, extents: tuple[int, int],
                       k_clip: int | None = None) -> np.ndarray:
    """Softmax-normalized weights over the causal region for one channel.

    ``psi`` is the (2K+1)x(2K+1) trainable grid of that channel.
    """
    if pos == 0:
        raise ValueError("empty causal region")
    side = psi.shape[0]
    if k_clip is None:
        k_clip = (side - 1) // 2
    idx = causal_offset_index(pos, extents[1], k_clip)
    a = psi.reshape(-1)[idx]
    e = np.exp(a - a.max())
    return e / e.sum()


def weighted_moments(values: np.ndarray, w: np.ndarray):
    """Weighted mean and the bias-corrected weighted standard deviation
    (denominator 1 - sum(w^2), clamped away from zero)."""
    mu = float(np.dot(w, values))
    num = float(np.dot(w, (values - mu) ** 2))
    den = max(1.0 - float(np.dot(w, w)), EPS_DEN)
    return mu, float(np.sqrt(num / den))


def global_context_E3(ydot_channel: np.ndarray, psi_channel: np.ndarray,
                      pos: tuple[int, int] | int, extents: tuple[int, int],
                      min_count: int = 30) -> tuple[float, float]:
    """Weighted mean / std over the causal region of one channel; zeros
    when fewer than ``min_count`` causal positions exist."""
    H, W = extents
    p = pos if isinstance(pos, int) else pos[0] * W + pos[1]
    if p < min_count:
        return 0.0, 0.0
    w = build_weight_field(psi_channel, p, extents)
    return weighted_moments(ydot_channel.reshape(-1)[:p], w)


class EntropyModel:
    """Parameter estimator and priors for the main and hyper latents."""

    def __init__(self, rng: np.random.Generator, n: int, m: int, g: int = 3,
                 k_clip: int = 7, min_count: int = 30, use_gc: bool = True,
                 use_mprm: bool = True, hidden_mult: int = 4, dtype=np.float64):
        self.m = m
        self.g = g
        self.k_clip = k_clip
        self.min_count = min_count
        self.use_gc = use_gc
        self.use_mprm = use_mprm
        self.dtype = dtype

        self.ctx_mask = causal_window_mask(5)
        self.ctx_conv = Conv2d(rng, m, 2 * m, k=5, stride=1,
                               mask=self.ctx_mask, dtype=dtype)
        self.ydot_conv = Conv2d(rng, m, m, k=1, stride=1, dtype=dtype)
        side = 2 * k_clip + 1
        self.psi = Tensor(rng.normal(0.0, 0.01, size=(m, side, side)).astype(dtype),
                          requires_grad=True)

        hidden = hidden_mult * m
        self.fc_in = DenseLayer(rng, 6 * m, hidden, dtype=dtype)
        self.mprm = [(DenseLayer(rng, hidden, hidden, dtype=dtype),
                      DenseLayer(rng, hidden, hidden, dtype=dtype))
                     for _ in range(2)]
        # near-zero (not exactly zero) head: identical mixture components
        # would receive identical gradients and never differentiate
        self.head = DenseLayer(rng, hidden, 3 * g * m, scale=0.01, dtype=dtype)

        # zero-mean prior scale for the hyper latent, one per channel,
        # stored pre-softplus (init gives sigma = 1)
        self.z_scale_raw = Tensor(np.full(n, _softplus_inv(1.0), dtype=dtype),
                                  requires_grad=True)

    # -- parameters ------------------------------------------------------------

    def params(self, prefix: str = "em") -> dict:
        out = {}
        out.update(self.ctx_conv.params(f"{prefix}.ctx"))
        out.update(self.ydot_conv.params(f"{prefix}.ydot"))
        out[f"{prefix}.psi"] = self.psi
        out.update(self.fc_in.params(f"{prefix}.f.in"))
        for i, (d1, d2) in enumerate(self.mprm):
            out.update(d1.params(f"{prefix}.f.res{i}.0"))
            out.update(d2.params(f"{prefix}.f.res{i}.1"))
        out.update(self.head.params(f"{prefix}.f.head"))
        out[f"{prefix}.zscale"] = self.z_scale_raw
        return out

    def z_sigma(self) -> Tensor:
        return ad.softplus(self.z_scale_raw)

    # -- estimator body (shared between graph and numpy paths) -------------------

    def _f_graph(self, ctx: Tensor):
        h = ad.leaky_relu(self.fc_in(ctx), 0.2)
        if self.use_mprm:
            for d1, d2 in self.mprm:
                h = h + d2(ad.leaky_relu(d1(h), 0.2))
        raw = self.head(h)
        lead = raw.shape[:-1]
        raw = raw.reshape(lead + (self.m, 3, self.g))
        pi = ad.softmax(raw[..., 0, :], axis=-1)
        mu = raw[..., 1, :]
        sigma = ad.softplus(raw[..., 2, :]) + SIGMA_MIN
        return pi, mu, sigma

    def _f_numpy(self, ctx: np.ndarray):
        w, b = self.fc_in.w.data, self.fc_in.b.data
        h = _lrelu_np(w @ ctx + b)
        if self.use_mprm:
            for d1, d2 in self.mprm:
                t = _lrelu_np(d1.w.data @ h + d1.b.data)
                h = h + d2.w.data @ t + d2.b.data
        raw = (self.head.w.data @ h + self.head.b.data).reshape(self.m, 3, self.g)
        pi = _softmax_np(raw[:, 0, :])
        mu = raw[:, 1, :]
        sigma = np.logaddexp(0.0, raw[:, 2, :]) + SIGMA_MIN
        return pi, mu, sigma

    # -- training path: all positions at once -------------------------------------

    def training_params(self, y: Tensor, hs_out: Tensor):
        """Mixture parameters for every position of a (possibly noisy)
        latent grid; causality is enforced structurally by the local-context
        mask and the causal gathers of the global context.

        Returns (pi, mu, sigma) shaped (P, M, G) with P = H*W raster
        positions.
        """
        M, H, W = y.shape
        P = H * W
        c1 = ad.transpose(hs_out.reshape(2 * self.m, P), (1, 0))
        c2 = ad.transpose(self.ctx_conv(y).reshape(2 * self.m, P), (1, 0))
        if self.use_gc:
            c3 = self._global_context_all(y, (H, W))
        else:
            c3 = Tensor(np.zeros((P, 2 * self.m), dtype=y.data.dtype))
        ctx = ad.concat([c1, c2, c3], axis=1)
        return self._f_graph(ctx)

    def _global_context_all(self, y: Tensor, extents) -> Tensor:
        H, W = extents
        P = H * W
        ydot = self.ydot_conv(y)
        yflat = ydot.reshape(self.m, P)
        psi_flat = self.psi.reshape(self.m, -1)
        zero = Tensor(np.zeros(2 * self.m, dtype=y.data.dtype))
        rows = []
        for p in range(P):
            if p < self.min_count:
                rows.append(zero)
                continue
            idx = causal_offset_index(p, W, self.k_clip)
            a = ad.gather_columns(psi_flat, idx)
            w = ad.softmax(a, axis=1)
            vals = yflat[:, :p]
            mu = (w * vals).sum(axis=1)
            d = vals - mu.reshape(self.m, 1)
            num = (w * d * d).sum(axis=1)
            den = ad.clamp_min(1.0 - (w * w).sum(axis=1) * 1.0, EPS_DEN)
            sig = ad.sqrt(num / den)
            rows.append(ad.concat([mu, sig], axis=0))
        return ad.stack(rows, axis=0)

    # -- coding path: one position at a time ----------------------------------------

    def start_coding_state(self, extents: tuple[int, int]) -> dict:
        H, W = extents
        return {
            "yhat": np.zeros((self.m, H, W)),
            "ydot": np.zeros((self.m, H, W)),
            "extents": (H, W),
        }

    def commit_position(self, state: dict, p: int, values: np.ndarray) -> None:
        """Record the latents decoded (or to be encoded) at raster position
        ``p`` and derive the transformed-channel value the global context
        reads.  Encoder and decoder call this identically."""
        H, W = state["extents"]
        i_r, i_c = divmod(p, W)
        state["yhat"][:, i_r, i_c] = values
        state["ydot"][:, i_r, i_c] = \
            self.ydot_conv.w.data[:, :, 0, 0] @ values + self.ydot_conv.b.data

    def local_context_E2(self, yhat: np.ndarray, pos: tuple[int, int]) -> np.ndarray:
        """Masked 5x5 window feature at one position (numpy path)."""
        M, H, W = yhat.shape
        i_r, i_c = pos
        win = np.zeros((M, 5, 5))
        r0, r1 = max(0, i_r - 2), min(H, i_r + 3)
        c0, c1 = max(0, i_c - 2), min(W, i_c + 3)
        win[:, r0 - i_r + 2:r1 - i_r + 2, c0 - i_c + 2:c1 - i_c + 2] = \
            yhat[:, r0:r1, c0:c1]
        win *= self.ctx_mask
        w = self.ctx_conv.w.data.reshape(2 * self.m, -1)
        return w @ win.reshape(-1) + self.ctx_conv.b.data

    def hyper_context_E1(self, hs_out: np.ndarray, pos: tuple[int, int]) -> np.ndarray:
        i_r, i_c = pos
        if not (0 <= i_r < hs_out.shape[1] and 0 <= i_c < hs_out.shape[2]):
            raise IndexError(f"position {pos} outside hyper feature map")
        return hs_out[:, i_r, i_c]

    def estimate_position(self, state: dict, hs_out: np.ndarray, p: int) -> GmmParams:
        """Mixture parameters at raster position ``p`` from decoded-so-far
        latents only; used by encoder and decoder alike."""
        H, W = state["extents"]
        i_r, i_c = divmod(p, W)
        c1 = self.hyper_context_E1(hs_out, (i_r, i_c))
        c2 = self.local_context_E2(state["yhat"], (i_r, i_c))
        c3 = np.zeros(2 * self.m)
        if self.use_gc and p >= self.min_count:
            idx = causal_offset_index(p, W, self.k_clip)
            a = self.psi.data.reshape(self.m, -1)[:, idx]
            a = a - a.max(axis=1, keepdims=True)
            e = np.exp(a)
            w = e / e.sum(axis=1, keepdims=True)
            vals = state["ydot"].reshape(self.m, -1)[:, :p]
            mu = (w * vals).sum(axis=1)
            d = vals - mu[:, None]
            num = (w * d * d).sum(axis=1)
            den = np.maximum(1.0 - (w * w).sum(axis=1), EPS_DEN)
            sig = np.sqrt(num / den)
            c3 = np.concatenate([mu, sig])
        pi, mu, sigma = self._f_numpy(np.concatenate([c1, c2, c3]))
        return GmmParams(weights=pi, means=mu, stddevs=sigma)

    # -- probability tables -----------------------------------------------------------

    def pmf_table(self, params: GmmParams) -> np.ndarray:
        """Discretized mixture PMF over the full alphabet, one row per
        channel; columns are [low tail, -255..255, high tail]."""
        return gmm_pmf_table(params.weights, params.means, params.stddevs)

    def z_pmf_table(self) -> np.ndarray:
        sigma = np.logaddexp(0.0, self.z_scale_raw.data)
        ones = np.ones_like(sigma)
        return gmm_pmf_table(ones[:, None], np.zeros_like(sigma)[:, None],
                             sigma[:, None])


def gmm_pmf_table(pi: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Rows of mixture mass per integer bin plus the two tail bins."""
    z = (_EDGES[None, None, :] - mu[:, :, None]) / sigma[:, :, None]
    cdf = ndtr(z)
    interior = np.einsum("cg,cgs->cs", pi, cdf[:, :, 1:] - cdf[:, :, :-1])
    tail_lo = (pi * cdf[:, :, 0]).sum(axis=1)
    tail_hi = (pi * (1.0 - cdf[:, :, -1])).sum(axis=1)
    pmf = np.concatenate([tail_lo[:, None], interior, tail_hi[:, None]], axis=1)
    return np.maximum(pmf, 0.0)


def gmm_pmf(weights, means, stddevs, n: int) -> float:
    """Probability of integer ``n`` (or a tail escape) under one channel's
    discretized mixture."""
    pi = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    mu = np.atleast_2d(np.asarray(means, dtype=np.float64))
    sg = np.atleast_2d(np.asarray(stddevs, dtype=np.float64))
    if np.any(sg < SIGMA_MIN):
        raise ValueError(f"stddev below floor {SIGMA_MIN}")
    table = gmm_pmf_table(pi, mu, sg)[0]
    if n == "tail_lo":
        return float(table[TAIL_LO])
    if n == "tail_hi":
        return float(table[TAIL_HI])
    if not ALPHABET_LO <= n <= ALPHABET_HI:
        raise ValueError(f"{n} outside coded alphabet")
    return float(table[int(n) - ALPHABET_LO + 1])


def z_pmf(sigma: float, n: int) -> float:
    return gmm_pmf([1.0], [0.0], [max(sigma, SIGMA_MIN)], n)


# -- rate terms ----------------------------------------------------------------------


def likelihood_graph(values: Tensor, pi: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Mixture mass on [v-1/2, v+1/2] per element, floored; differentiable.

    ``values`` has the shape of ``pi`` minus the trailing mixture axis.
    """
    v = values.reshape(values.shape + (1,))
    upper = ad.normal_cdf((v + 0.5 - mu) / sigma)
    lower = ad.normal_cdf((v - 0.5 - mu) / sigma)
    p = (pi * (upper - lower)).sum(axis=-1)
    return ad.clamp_min(p, PMF_FLOOR)


def rate_bits_graph(p: Tensor) -> Tensor:
    """Total bits from per-element likelihoods."""
    return -(ad.log(p).sum()) * LOG2E


def rate_bits_coding(pmf_rows: np.ndarray, symbols: np.ndarray) -> float:
    """Cross-entropy estimate (bits) of integer symbols under their PMF
    rows; the independent yardstick the coded stream is compared against."""
    p = np.maximum(pmf_rows[np.arange(len(symbols)), symbols], PMF_FLOOR)
    return float(-np.log2(p).sum())


def _softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


def _lrelu_np(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def _softmax_np(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
