"""End-to-end acceptance checks, one test per criterion.

Each test prints a single "criterion N ...: PASS/FAIL" line (run pytest
with -s to see them on success).  The heavy criteria (desk-scale training
and the ablation sweep) run real optimization and take a few minutes.
"""

import math
import time

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from conftest import tiny_config
from jointiq import autodiff as ad
from jointiq import trainer as tr
from jointiq.autodiff import Tensor
from jointiq.codec import decode_image, encode_image
from jointiq.enhancement import Grdn, GrdnConfig
from jointiq.entropy import (EntropyModel, causal_offset_index,
                             global_context_E3, gmm_pmf, gmm_pmf_table)
from jointiq.imageio import denormalize
from jointiq.metrics import bd_rate, ms_ssim, psnr
from jointiq.model import CodecModel, ModelConfig
from jointiq.rangecoder import RangeDecoder, RangeEncoder, build_cdf
from jointiq.transforms import (IMAGE_SCALES, Tensor as _T, latent_extent,
                                pad_for_scales, scale_ladder, unpad)
from test_entropy import gc_oracle
from test_metrics import msssim_oracle


def report(num: int, label: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"criterion {num} ({label}): {status} {detail}".rstrip())
    assert ok, f"criterion {num} ({label}) failed: {detail}"


# -- corpus shared by the round-trip and rate-agreement criteria -------------------


def _smooth_image(rng, h, w):
    base = rng.uniform(-0.7, 0.7, (3, 1, 1))
    ramp = np.linspace(-0.2, 0.2, w)[None, None, :]
    return np.clip(base + ramp + 0.05 * rng.standard_normal((3, h, w)),
                   -1.0, 1.0)


@pytest.fixture(scope="module")
def coded_corpus():
    """Twenty random images (odd extents included) pushed through the codec
    once; round-trip and rate checks both read from this."""
    model = CodecModel(tiny_config())
    rng = np.random.default_rng(7)
    sizes = [(13, 17), (333, 500)]
    while len(sizes) < 20:
        sizes.append((int(rng.integers(13, 97)), int(rng.integers(13, 97))))
    t0 = time.perf_counter()
    items = []
    for h, w in sizes:
        x = _smooth_image(rng, h, w)
        stream, stats = encode_image(x, model)
        out, info = decode_image(stream, model)
        items.append({"x": x, "stream": stream, "stats": stats,
                      "out": out, "info": info})
    return model, items, time.perf_counter() - t0


# -- criterion 1 -------------------------------------------------------------------


def test_criterion_1_range_coder_exactness():
    rng = np.random.default_rng(0)
    tables, probs = [], []
    for _ in range(64):
        k = int(rng.integers(2, 300))
        pmf = rng.dirichlet(np.ones(k) * rng.uniform(0.2, 3.0))
        table = build_cdf(pmf)
        tables.append(table)
        probs.append(table.freq / 65536.0)

    n = 1_000_000
    per = n // 64
    draws = [rng.choice(len(p), size=per, p=p) for p in probs]
    symbols = [int(draws[i % 64][i // 64]) for i in range(n)]

    t0 = time.perf_counter()
    enc = RangeEncoder()
    for i, s in enumerate(symbols):
        enc.encode_symbol(tables[i % 64], s)
    payload = enc.flush()
    dec = RangeDecoder(payload)
    mismatches = sum(dec.decode_symbol(tables[i % 64]) != s
                     for i, s in enumerate(symbols))
    elapsed = time.perf_counter() - t0

    cross_entropy = sum(-np.log2(probs[t][draws[t]]).sum() for t in range(64))
    bits = len(payload) * 8.0
    ok = (mismatches == 0
          and bits <= cross_entropy * 1.001 + 64.0
          and elapsed < 10.0)
    report(1, "range coder, 1e6 symbols", ok,
           f"[mismatches={mismatches}, bits={bits:.0f}, "
           f"H={cross_entropy:.0f}, {elapsed:.1f}s]")


# -- criterion 2 -------------------------------------------------------------------


def test_criterion_2_codec_round_trip(coded_corpus):
    model, items, elapsed = coded_corpus

    latents_exact = True
    recon_exact = True
    for it in items:
        latents_exact &= np.array_equal(it["info"]["yhat"], it["stats"]["yhat"])
        latents_exact &= np.array_equal(it["info"]["zhat"], it["stats"]["zhat"])
        # reconstruction recomputed independently from the encoder's
        # quantized latents must match the decoder output byte for byte
        h, w = it["x"].shape[1:]
        xp, rec = pad_for_scales(_T(it["x"]), IMAGE_SCALES)
        xhat = model.gs(_T(it["stats"]["yhat"]), rec)
        ref = unpad(model.enhance(xhat), rec).data
        recon_exact &= np.array_equal(denormalize(it["out"]),
                                      denormalize(ref))

    ladder = scale_ladder(13, IMAGE_SCALES)
    ladder_ok = (ladder == [(13, 14, 7), (7, 8, 4), (4, 4, 2), (2, 2, 1)]
                 and latent_extent(13, IMAGE_SCALES) == 1)

    ok = latents_exact and recon_exact and ladder_ok and elapsed < 120.0
    report(2, "codec round trip, 20 images", ok,
           f"[latents_exact={latents_exact}, recon_exact={recon_exact}, "
           f"ladder_ok={ladder_ok}, {elapsed:.1f}s]")


# -- criterion 3 -------------------------------------------------------------------


def test_criterion_3_rate_model_agreement(coded_corpus):
    _, items, _ = coded_corpus
    worst = -math.inf
    ok = True
    for it in items:
        actual = it["stats"]["y_bytes"] * 8.0
        estimate = it["stats"]["y_bits_estimate"]
        slack = 0.02 * estimate + 64.0
        worst = max(worst, abs(actual - estimate) - slack)
        ok &= abs(actual - estimate) <= slack
    report(3, "rate estimate vs coded bits", ok,
           f"[worst slack margin={-worst:.1f} bits]")


# -- criterion 4 -------------------------------------------------------------------


def test_criterion_4_entropy_model_math():
    rng = np.random.default_rng(11)

    # 1000 random mixtures: normalization and one quadrature spot check each
    pi = rng.dirichlet(np.ones(3), size=1000)
    mu = rng.normal(0.0, 5.0, (1000, 3))
    sg = rng.uniform(0.05, 4.0, (1000, 3))
    table = gmm_pmf_table(pi, mu, sg)
    norm_ok = bool(np.all(np.abs(table.sum(axis=1) - 1.0) < 1e-6))

    quad_ok = True
    bins = rng.integers(-8, 9, size=1000)
    for i in range(1000):
        def pdf(t, i=i):
            return float(np.dot(pi[i], norm.pdf(t, mu[i], sg[i])))
        want, _ = quad(pdf, bins[i] - 0.5, bins[i] + 0.5,
                       epsabs=1e-12, epsrel=1e-12)
        got = gmm_pmf(pi[i], mu[i], sg[i], int(bins[i]))
        quad_ok &= abs(got - want) < 1e-8

    # 1000 random causal fields against the brute-force oracle
    K = 4
    field_ok = True
    for _ in range(1000):
        W = int(rng.integers(3, 12))
        H = int(rng.integers(2, 12))
        p = int(rng.integers(1, H * W))
        psi = rng.normal(0.0, 1.0, (2 * K + 1, 2 * K + 1))
        ydot = rng.normal(0.0, 2.0, H * W)
        mu_o, sig_o = gc_oracle(ydot.tolist(), psi.tolist(), p, W, K, 0)
        mu_g, sig_g = global_context_E3(ydot, psi, p, (H, W), min_count=0)
        field_ok &= abs(mu_g - mu_o) < 1e-9 and abs(sig_g - sig_o) < 1e-9

    # minimum-count gate flips exactly between 29 and 30 causal positions
    psi = rng.normal(0.0, 1.0, (15, 15))
    ydot = rng.normal(0.0, 2.0, 64)
    gate_ok = (global_context_E3(ydot, psi, 29, (8, 8)) == (0.0, 0.0)
               and global_context_E3(ydot, psi, 30, (8, 8)) != (0.0, 0.0))

    # clip and nearest-sharing over exhaustive offsets |k|,|l| <= 12, K = 7
    K7, width = 7, 40
    i_r, i_c = 12, 20
    pos = i_r * width + i_c
    idx = causal_offset_index(pos, width, K7)
    clip_ok = True
    for q in range(pos):
        q_r, q_c = divmod(q, width)
        k, l = i_r - q_r, i_c - q_c
        if abs(k) > 12 or abs(l) > 12:
            continue
        kc = max(-K7, min(K7, k))
        lc = max(-K7, min(K7, l))
        clip_ok &= idx[q] == (kc + K7) * (2 * K7 + 1) + (lc + K7)

    ok = norm_ok and quad_ok and field_ok and gate_ok and clip_ok
    report(4, "entropy model math", ok,
           f"[norm={norm_ok}, quad={quad_ok}, fields={field_ok}, "
           f"gate={gate_ok}, clip={clip_ok}]")


# -- criterion 5 -------------------------------------------------------------------


def test_criterion_5_causality():
    rng = np.random.default_rng(13)
    em = EntropyModel(rng, n=4, m=4, g=3, k_clip=3, min_count=2,
                      hidden_mult=2)
    H = W = 8
    hs_out = rng.normal(0.0, 1.0, (8, H, W))
    ok = True
    for _ in range(100):
        p = int(rng.integers(1, H * W - 1))
        state = em.start_coding_state((H, W))
        for q in range(p):
            em.commit_position(state, q, rng.normal(0.0, 3.0, 4))
        before = em.estimate_position(state, hs_out, p)
        for q in range(p + 1, H * W):
            em.commit_position(state, q, rng.normal(0.0, 3.0, 4))
        after = em.estimate_position(state, hs_out, p)
        ok &= (np.array_equal(before.weights, after.weights)
               and np.array_equal(before.means, after.means)
               and np.array_equal(before.stddevs, after.stddevs))
    report(5, "causality, 100 positions", ok)


# -- criterion 6 -------------------------------------------------------------------


def test_criterion_6_gradients():
    from jointiq.transforms import (AnalysisTransform, PaddingRecord,
                                    SynthesisTransform)

    errors = {}

    rng = np.random.default_rng(21)
    ga = AnalysisTransform(rng, 2, 3)
    x = Tensor(rng.uniform(-0.8, 0.8, (3, 13, 17)))
    rec = PaddingRecord.for_size(13, 17, IMAGE_SCALES)
    c = rng.standard_normal((3, 1, 2))
    rep = ad.grad_check(lambda: (ga(x, rec) * Tensor(c)).sum(),
                        list(ga.params().values()), h=1e-6)
    errors["analysis"] = rep["max_rel_error"]

    gs = SynthesisTransform(rng, 2, 3)
    y = Tensor(rng.uniform(-0.1, 0.1, (3, 1, 2)))
    rec = PaddingRecord.for_size(16, 29, IMAGE_SCALES)
    c = rng.standard_normal((3, 16, 30))
    rep = ad.grad_check(lambda: (gs(y, rec) * Tensor(c)).sum(),
                        list(gs.params().values()), h=1e-6)
    errors["synthesis"] = rep["max_rel_error"]

    em = EntropyModel(rng, n=4, m=2, g=2, k_clip=2, min_count=1,
                      hidden_mult=2)
    em.head.w.data = rng.normal(0.0, 0.1, em.head.w.data.shape)
    y = Tensor(rng.normal(0.0, 1.0, (2, 3, 3)))
    hs_out = Tensor(rng.normal(0.0, 1.0, (4, 3, 3)))

    def estimator_fn():
        pi, mu, sg = em.training_params(y, hs_out)
        return (pi * mu).sum() + ad.log(sg).sum()

    params = list(em.params().values())
    params.remove(em.z_scale_raw)  # not part of this graph
    rep = ad.grad_check(estimator_fn, params, h=1e-6)
    errors["estimator+mprm"] = rep["max_rel_error"]

    # the weighted causal field alone: only psi and the 1x1 transform
    rep = ad.grad_check(estimator_fn,
                        [em.psi, em.ydot_conv.w, em.ydot_conv.b], h=1e-6)
    errors["ydot/psi"] = rep["max_rel_error"]

    net = Grdn(rng, GrdnConfig(1, 1, 1, 3))
    net.tail.w.data = rng.normal(0.0, 0.02, net.tail.w.data.shape)
    xq = Tensor(rng.uniform(-0.5, 0.5, (3, 5, 5)))
    c = rng.standard_normal((3, 5, 5))
    rep = ad.grad_check(lambda: (net(xq) * Tensor(c)).sum(),
                        list(net.params().values()), h=1e-6)
    errors["grdn"] = rep["max_rel_error"]

    # full rate-distortion loss through every sub-network at once
    cfg = ModelConfig(n=2, m=2, g=2, k_clip=1, min_count=1, lam=0.3,
                      grdn=GrdnConfig(1, 1, 1, 2), hidden_mult=1, seed=1)
    model = CodecModel(cfg)
    x_img = np.random.default_rng(22).uniform(-0.5, 0.5, (3, 16, 32))

    def loss_fn():
        loss, _ = tr.total_loss(x_img, model, rng=np.random.default_rng(0))
        return loss

    rep = ad.grad_check(loss_fn, list(model.params().values()), h=1e-6)
    errors["full loss"] = rep["max_rel_error"]

    worst = max(errors.values())
    ok = worst < 1e-5
    report(6, "finite-difference gradients", ok,
           "[" + ", ".join(f"{k}={v:.2e}" for k, v in errors.items()) + "]")


# -- criteria 7 and 8: desk-scale training runs ------------------------------------


def _texture(rng, h, w):
    """Banded sinusoid gratings plus mild noise; compressible but not flat."""
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    img = np.zeros((3, h, w))
    for c in range(3):
        fx, fy = rng.uniform(0.15, 0.5, 2)
        ph = rng.uniform(0.0, 2.0 * np.pi)
        img[c] = (0.5 * np.sin(fx * xx + fy * yy + ph)
                  + 0.15 * np.sin(2.3 * fx * xx + ph))
    img += 0.05 * rng.standard_normal((3, h, w))
    return np.clip(img, -1.0, 1.0)


def test_criterion_7_overfit_learning_signal():
    t0 = time.perf_counter()
    cfg = ModelConfig(n=32, m=48, g=3, k_clip=4, min_count=8, lam=0.2,
                      grdn=GrdnConfig(1, 1, 2, 8), hidden_mult=2, seed=0)
    x = _texture(np.random.default_rng(70), 64, 64)

    def eval_loss(model):
        loss, _ = tr.total_loss(x, model, rng=np.random.default_rng(99))
        return loss.item()

    def coded_point(model):
        stream, _ = encode_image(x, model)
        out, _ = decode_image(stream, model)
        return len(stream) * 8.0, float(np.mean((out - x) ** 2))

    fresh = CodecModel(cfg)
    initial_loss = eval_loss(fresh)
    bits_before, mse_before = coded_point(fresh)

    model = CodecModel(cfg)
    opt = tr.Adam(model.params())
    rng = np.random.default_rng(1)
    for _ in range(5000):
        tr.train_step([x], model, opt, 3e-4, rng)

    final_loss = eval_loss(model)
    bits_after, mse_after = coded_point(model)
    elapsed = time.perf_counter() - t0

    ok = (final_loss < 0.5 * initial_loss
          and bits_after < bits_before
          and mse_after <= mse_before
          and elapsed < 1800.0)
    report(7, "overfit one patch, 5k steps", ok,
           f"[loss {initial_loss:.3f}->{final_loss:.3f}, "
           f"bits {bits_before:.0f}->{bits_after:.0f}, "
           f"mse {mse_before:.5f}->{mse_after:.5f}, {elapsed:.0f}s]")


def test_criterion_8_directional_ablations():
    drng = np.random.default_rng(100)
    train_imgs = [_texture(drng, 96, 96) for _ in range(6)]
    eval_imgs = [_texture(drng, 96, 96) for _ in range(10)]

    def make_cfg(seed, **flags):
        base = dict(n=8, m=12, g=3, k_clip=4, min_count=5, lam=0.35,
                    num_grdbs=1, rdbs_per_grdb=1, convs_per_rdb=2,
                    kernels_per_conv=8, hidden_mult=2, patch_size=64,
                    iters=800, stage_a_iters=0, lr=3e-4, seed=seed)
        base.update(flags)
        if flags.get("use_gmm") is False:
            base["g"] = 1
        return tr.TrainConfig(**base)

    def train_variant(cfg):
        model = CodecModel(cfg.to_model_config())
        data_rng = np.random.default_rng(cfg.seed + 1)
        noise_rng = np.random.default_rng(cfg.seed + 2)
        opt = tr.Adam(model.params())
        ps = cfg.patch_size
        for i in range(cfg.iters):
            img = train_imgs[int(data_rng.integers(len(train_imgs)))]
            r = int(data_rng.integers(img.shape[1] - ps + 1))
            c = int(data_rng.integers(img.shape[2] - ps + 1))
            tr.train_step([img[:, r:r + ps, c:c + ps]], model, opt,
                          tr.lr_schedule(i, cfg), noise_rng, cfg.lam)
        return model

    def eval_loss(model, lam):
        total = 0.0
        for j, x in enumerate(eval_imgs):
            loss, _ = tr.total_loss(x, model, lam,
                                    np.random.default_rng(7000 + j))
            total += loss.item()
        return total / len(eval_imgs)

    variants = {
        "full": {},
        "no_grdn": {"use_enhance": False},
        "no_gc": {"use_gc": False},
        "no_gc_mprm": {"use_gc": False, "use_mprm": False},
        "single_gauss": {"use_gmm": False},
    }
    averages = {}
    for name, flags in variants.items():
        values = []
        for seed in (0, 1, 2):
            cfg = make_cfg(seed, **flags)
            values.append(eval_loss(train_variant(cfg), cfg.lam))
        averages[name] = float(np.mean(values))

    full = averages["full"]
    ok = all(full <= avg for avg in averages.values())
    report(8, "directional ablations, 3 seeds", ok,
           "[" + ", ".join(f"{k}={v - full:+.5f}"
                           for k, v in averages.items() if k != "full") + "]")


# -- criterion 9 -------------------------------------------------------------------


def test_criterion_9_metrics():
    rng = np.random.default_rng(90)
    a = rng.uniform(-1.0, 1.0, (3, 48, 64))
    b = np.clip(a + 0.15 * rng.standard_normal(a.shape), -1.0, 1.0)
    msssim_ok = abs(ms_ssim(a, b) - msssim_oracle(a, b)) < 1e-6

    x = np.zeros((3, 10, 10))
    psnr_ok = (psnr(x, x) == math.inf
               and abs(psnr(x, x + 1.0 / 127.5)
                       - 10.0 * math.log10(255.0 ** 2)) < 1e-12
               and abs(psnr(np.full((3, 4, 4), -1.0),
                            np.full((3, 4, 4), 1.0))) < 1e-12)

    quality = [30.0, 32.5, 34.0, 36.0, 38.5]
    rate = [0.12, 0.24, 0.45, 0.85, 1.7]
    curve = list(zip(rate, quality))
    doubled = [(2.0 * r, q) for r, q in curve]
    bd_ok = (bd_rate(curve, curve) == 0.0
             and abs(bd_rate(curve, doubled) - 100.0) < 0.1)

    ok = msssim_ok and psnr_ok and bd_ok
    report(9, "metrics", ok,
           f"[msssim={msssim_ok}, psnr={psnr_ok}, bdrate={bd_ok}]")
