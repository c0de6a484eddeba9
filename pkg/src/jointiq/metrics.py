"""Quality metrics (PSNR, MS-SSIM), rate-distortion evaluation, and the
Bjontegaard delta-rate between two RD curves.

MS-SSIM exists in two forms: a graph version built from autodiff ops so it
can serve as a training objective, and a plain-numpy wrapper around it for
evaluation.  Both operate on the codec's [-1, 1] image convention but all
constants live on the 0-255 pixel scale.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, ShapeError
from .imageio import denormalize, read_image

# standard five-scale weights
MSSSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
_C1 = (0.01 * 255.0) ** 2
_C2 = (0.03 * 255.0) ** 2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB, on the 0-255 scale.

    Inputs are float images in [-1, 1] with identical extents; identical
    images report +inf.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr extents differ: {a.shape} vs {b.shape}")
    mse = np.mean(np.square((a - b) * 127.5))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def msssim_db(value: float) -> float:
    """The usual decibel transform -10*log10(1 - v)."""
    if value >= 1.0:
        return math.inf
    return -10.0 * math.log10(1.0 - value)


def _gaussian_window() -> np.ndarray:
    half = (WINDOW_SIZE - 1) / 2.0
    t = np.arange(WINDOW_SIZE) - half
    w = np.exp(-0.5 * (t / WINDOW_SIGMA) ** 2)
    win = np.outer(w, w)
    return win / win.sum()


def _blur_kernel(channels: int, dtype) -> Tensor:
    """Per-channel Gaussian blur as a block-diagonal conv kernel."""
    win = _gaussian_window().astype(dtype)
    k = np.zeros((channels, channels, WINDOW_SIZE, WINDOW_SIZE), dtype=dtype)
    for c in range(channels):
        k[c, c] = win
    return Tensor(k)


def num_scales(height: int, width: int) -> int:
    """Scale count for MS-SSIM: 5 for large images, fewer for small ones."""
    m = min(height, width)
    if m < 16:
        raise DataError(f"image too small for MS-SSIM: min extent {m} < 16")
    return min(5, int(math.floor(math.log2(m / 8.0))))


def _ssim_terms(a: Tensor, b: Tensor, kernel: Tensor) -> tuple:
    """Mean luminance and contrast-structure terms over the valid region."""
    crop = WINDOW_SIZE // 2

    def valid_mean(t):
        return t[:, crop:t.shape[1] - crop, crop:t.shape[2] - crop].mean()

    mu_a = ad.conv2d(a, kernel)
    mu_b = ad.conv2d(b, kernel)
    var_a = ad.conv2d(a * a, kernel) - mu_a * mu_a
    var_b = ad.conv2d(b * b, kernel) - mu_b * mu_b
    cov = ad.conv2d(a * b, kernel) - mu_a * mu_b
    lum = (2.0 * mu_a * mu_b + _C1) / (mu_a * mu_a + mu_b * mu_b + _C1)
    cs = (2.0 * cov + _C2) / (var_a + var_b + _C2)
    return valid_mean(lum * cs), valid_mean(cs)


def ms_ssim_graph(a: Tensor, b: Tensor) -> Tensor:
    """Multiscale SSIM as a differentiable scalar; inputs (C,H,W) in [-1,1].

    11x11 Gaussian window with sigma 1.5, statistics taken over the valid
    interior, dyadic downsampling by 2x2 mean pooling between scales.
    """
    if a.shape != b.shape:
        raise ShapeError(f"ms_ssim extents differ: {a.shape} vs {b.shape}")
    scales = num_scales(a.shape[1], a.shape[2])
    weights = MSSSIM_WEIGHTS[:scales] / MSSSIM_WEIGHTS[:scales].sum()
    kernel = _blur_kernel(a.shape[0], a.dtype)

    # work on the 0-255 scale so C1/C2 have their textbook meaning
    a = (a + 1.0) * 127.5
    b = (b + 1.0) * 127.5
    log_terms = []
    for s in range(scales):
        ssim_mean, cs_mean = _ssim_terms(a, b, kernel)
        term = ssim_mean if s == scales - 1 else cs_mean
        log_terms.append(weights[s] * ad.log(ad.clamp_min(term, 1e-12)))
        if s != scales - 1:
            a = ad.avg_pool2(a)
            b = ad.avg_pool2(b)
    total = log_terms[0]
    for t in log_terms[1:]:
        total = total + t
    return ad.exp(total)


def ms_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Plain-number MS-SSIM of two [-1, 1] float images."""
    return float(ms_ssim_graph(Tensor(np.asarray(a, dtype=np.float64)),
                               Tensor(np.asarray(b, dtype=np.float64))).item())


def _check_curve(points, name: str) -> tuple[np.ndarray, np.ndarray]:
    pts = sorted((float(q), float(r)) for r, q in points)
    if len(pts) < 4:
        raise DataError(f"{name} curve needs >= 4 points, got {len(pts)}")
    quality = np.array([q for q, _ in pts])
    rate = np.array([r for _, r in pts])
    if np.any(rate <= 0):
        raise DataError(f"{name} curve has non-positive rates")
    if np.any(np.diff(quality) <= 0):
        raise DataError(f"{name} curve has repeated quality values")
    if np.any(np.diff(rate) <= 0):
        raise DataError(f"{name} curve is not monotonic in rate")
    return quality, rate


def bd_rate(anchor, test) -> float:
    """Average rate difference of `test` vs `anchor` in percent.

    Curves are sequences of (rate, quality) points; log10(rate) is
    interpolated piecewise-cubic (PCHIP) over quality and integrated over
    the common quality interval.  Negative means the test curve spends
    fewer bits at equal quality.
    """
    qa, ra = _check_curve(anchor, "anchor")
    qt, rt = _check_curve(test, "test")
    lo = max(qa[0], qt[0])
    hi = min(qa[-1], qt[-1])
    if lo >= hi:
        raise DataError("curves have no overlapping quality range")
    fa = PchipInterpolator(qa, np.log10(ra))
    ft = PchipInterpolator(qt, np.log10(rt))
    avg_diff = (ft.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo)
    return float((10.0 ** avg_diff - 1.0) * 100.0)


IMAGE_SUFFIXES = (".png", ".ppm", ".pnm", ".bmp", ".jpg", ".jpeg")

CSV_HEADER = "image,bpp,psnr_db,msssim,msssim_db"


def _eval_one(model, path: str, flag_overrides) -> dict:
    from .codec import decode_image, encode_image

    x = read_image(path)
    stream, stats = encode_image(x, model, flag_overrides)
    out, _ = decode_image(stream, model)
    # score the 8-bit reconstruction a viewer would actually see
    xq = denormalize(x).astype(np.float64) / 127.5 - 1.0
    oq = denormalize(out).astype(np.float64) / 127.5 - 1.0
    v = ms_ssim(xq.transpose(2, 0, 1), oq.transpose(2, 0, 1))
    return {
        "image": os.path.basename(path),
        "bpp": len(stream) * 8.0 / (x.shape[1] * x.shape[2]),
        "psnr_db": psnr(xq.transpose(2, 0, 1), oq.transpose(2, 0, 1)),
        "msssim": v,
        "msssim_db": msssim_db(v),
    }


def rd_eval(model, folder: str, csv_path: str | None = None,
            flag_overrides: dict | None = None, workers: int = 1) -> list[dict]:
    """Encode/decode every image in a folder and tabulate RD statistics.

    Returns per-image rows plus a final dataset-average row; optionally
    writes them as CSV (`image,bpp,psnr_db,msssim,msssim_db`).
    """
    files = sorted(os.path.join(folder, f) for f in os.listdir(folder)
                   if f.lower().endswith(IMAGE_SUFFIXES))
    if not files:
        raise DataError(f"no images found in {folder}")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(
                lambda p: _eval_one(model, p, flag_overrides), files))
    else:
        rows = [_eval_one(model, p, flag_overrides) for p in files]
    avg = {"image": "average"}
    for key in ("bpp", "psnr_db", "msssim", "msssim_db"):
        avg[key] = float(np.mean([r[key] for r in rows]))
    rows.append(avg)
    if csv_path is not None:
        write_rd_csv(csv_path, rows)
    return rows


def write_rd_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(CSV_HEADER + "\n")
        for r in rows:
            f.write(f"{r['image']},{r['bpp']:.6f},{r['psnr_db']:.6f},"
                    f"{r['msssim']:.6f},{r['msssim_db']:.6f}\n")


def read_rd_csv(path: str) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise DataError(f"{path}: not an RD CSV (bad header)")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 5:
            raise DataError(f"{path}: malformed row {ln!r}")
        rows.append({"image": parts[0], "bpp": float(parts[1]),
                     "psnr_db": float(parts[2]), "msssim": float(parts[3]),
                     "msssim_db": float(parts[4])})
    return rows


def curve_from_rows(rows: list[dict], quality_key: str = "psnr_db"):
    """Per-image rows -> (rate, quality) points; skips the average row."""
    return [(r["bpp"], r[quality_key]) for r in rows if r["image"] != "average"]
