"""PSNR/MS-SSIM against closed forms and a from-scratch oracle, BD-rate
worked examples, and the RD evaluation CSV."""

import math

import numpy as np
import pytest
from scipy.signal import convolve2d

from jointiq import metrics as mt
from jointiq.errors import DataError, ShapeError


def msssim_oracle(a, b):
    """Definition-level MS-SSIM: per-channel valid-window statistics with
    an explicit Gaussian kernel, dyadic mean-pool downsampling."""
    half = 5
    t = np.arange(11) - half
    g = np.exp(-0.5 * (t / 1.5) ** 2)
    win = np.outer(g, g)
    win /= win.sum()
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2

    a = (np.asarray(a, dtype=np.float64) + 1.0) * 127.5
    b = (np.asarray(b, dtype=np.float64) + 1.0) * 127.5
    scales = min(5, int(math.floor(math.log2(min(a.shape[1:]) / 8.0))))
    weights = mt.MSSSIM_WEIGHTS[:scales] / mt.MSSSIM_WEIGHTS[:scales].sum()

    def pool(x):
        c, h, w = x.shape
        return x[:, :h // 2 * 2, :w // 2 * 2].reshape(
            c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    total = 1.0
    for s in range(scales):
        lum_vals, cs_vals = [], []
        for ch in range(a.shape[0]):
            f = lambda img: convolve2d(img, win, mode="valid")
            mu_a, mu_b = f(a[ch]), f(b[ch])
            va = f(a[ch] * a[ch]) - mu_a ** 2
            vb = f(b[ch] * b[ch]) - mu_b ** 2
            cov = f(a[ch] * b[ch]) - mu_a * mu_b
            lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
            cs = (2 * cov + c2) / (va + vb + c2)
            lum_vals.append(np.mean(lum * cs))
            cs_vals.append(np.mean(cs))
        term = np.mean(lum_vals) if s == scales - 1 else np.mean(cs_vals)
        total *= max(term, 1e-12) ** weights[s]
        a, b = pool(a), pool(b)
    return total


class TestPsnr:
    def test_identical_is_infinite(self):
        x = np.random.default_rng(0).uniform(-1, 1, (3, 8, 8))
        assert mt.psnr(x, x) == math.inf

    def test_one_level_difference_closed_form(self):
        x = np.zeros((3, 10, 10))
        assert mt.psnr(x, x + 1.0 / 127.5) == pytest.approx(
            10.0 * math.log10(255.0 ** 2), abs=1e-12)
        assert round(mt.psnr(x, x + 1.0 / 127.5), 4) == 48.1308

    def test_full_scale_difference_is_zero_db(self):
        a = np.full((3, 4, 4), -1.0)
        b = np.full((3, 4, 4), 1.0)
        assert mt.psnr(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_monotone_in_noise_amplitude(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-0.5, 0.5, (3, 16, 16))
        noise = rng.standard_normal(x.shape)
        values = [mt.psnr(x, x + amp * noise)
                  for amp in (0.001, 0.01, 0.05, 0.2)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_extent_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            mt.psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


class TestMsSsim:
    def test_self_similarity_is_one(self):
        x = np.random.default_rng(2).uniform(-1, 1, (3, 32, 48))
        assert mt.ms_ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(-1, 1, (3, 40, 40))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), -1, 1)
        assert mt.ms_ssim(a, b) == mt.ms_ssim(b, a)

    @pytest.mark.parametrize("hw", [(16, 20), (33, 47), (64, 64), (128, 96)])
    def test_matches_definition_oracle(self, hw):
        rng = np.random.default_rng(hw[0])
        a = rng.uniform(-1, 1, (3, *hw))
        b = np.clip(a + 0.15 * rng.standard_normal(a.shape), -1, 1)
        assert mt.ms_ssim(a, b) == pytest.approx(msssim_oracle(a, b), abs=1e-6)

    def test_too_small_rejected(self):
        with pytest.raises(DataError):
            mt.ms_ssim(np.zeros((3, 15, 64)), np.zeros((3, 15, 64)))

    def test_scale_count_rule(self):
        assert mt.num_scales(16, 999) == 1
        assert mt.num_scales(32, 999) == 2
        assert mt.num_scales(333, 500) == 5

    def test_db_transform(self):
        assert mt.msssim_db(0.9) == pytest.approx(10.0, abs=1e-12)
        assert mt.msssim_db(1.0) == math.inf


def make_curve(qualities, rates):
    return list(zip(rates, qualities))


class TestBdRate:
    quality = [30.0, 32.5, 34.0, 36.0, 38.5]
    rate = [0.12, 0.24, 0.45, 0.85, 1.7]

    def test_identical_curves_zero(self):
        c = make_curve(self.quality, self.rate)
        assert mt.bd_rate(c, c) == 0.0

    def test_doubled_rate_is_plus_100(self):
        a = make_curve(self.quality, self.rate)
        b = make_curve(self.quality, [2 * r for r in self.rate])
        assert mt.bd_rate(a, b) == pytest.approx(100.0, abs=0.1)
        assert mt.bd_rate(b, a) == pytest.approx(-50.0, abs=0.1)

    def test_sign_antisymmetry(self):
        a = make_curve(self.quality, self.rate)
        b = make_curve([q + 1.0 for q in self.quality], self.rate)
        assert mt.bd_rate(a, b) < 0 < mt.bd_rate(b, a)

    def test_too_few_points(self):
        c = make_curve(self.quality[:3], self.rate[:3])
        with pytest.raises(DataError):
            mt.bd_rate(c, c)

    def test_no_overlap(self):
        a = make_curve([30, 31, 32, 33], [0.1, 0.2, 0.3, 0.4])
        b = make_curve([40, 41, 42, 43], [0.1, 0.2, 0.3, 0.4])
        with pytest.raises(DataError):
            mt.bd_rate(a, b)

    def test_monotonicity_violation(self):
        bad = make_curve([30, 32, 34, 36], [0.1, 0.3, 0.2, 0.4])
        good = make_curve(self.quality[:4], self.rate[:4])
        with pytest.raises(DataError):
            mt.bd_rate(bad, good)


class TestRdEval:
    def test_folder_sweep(self, tiny_model, toy_images, tmp_path):
        from jointiq.imageio import write_image

        folder = tmp_path / "imgs"
        folder.mkdir()
        for i, x in enumerate(toy_images[1:3]):  # both MS-SSIM-sized
            write_image(str(folder / f"im{i}.png"), x)
        csv = tmp_path / "curve.csv"
        rows = mt.rd_eval(tiny_model, str(folder), csv_path=str(csv))
        assert len(rows) == 3 and rows[-1]["image"] == "average"
        for key in ("bpp", "psnr_db", "msssim"):
            assert rows[-1][key] == pytest.approx(
                np.mean([r[key] for r in rows[:-1]]))
        back = mt.read_rd_csv(str(csv))
        assert [r["image"] for r in back] == [r["image"] for r in rows]
        for r1, r2 in zip(back, rows):
            assert r1["bpp"] == pytest.approx(r2["bpp"], abs=1e-6)

    def test_single_image_folder(self, tiny_model, toy_images, tmp_path):
        from jointiq.imageio import write_image

        folder = tmp_path / "one"
        folder.mkdir()
        write_image(str(folder / "x.png"), toy_images[1])
        rows = mt.rd_eval(tiny_model, str(folder))
        assert len(rows) == 2

    def test_empty_folder_rejected(self, tiny_model, tmp_path):
        with pytest.raises(DataError):
            mt.rd_eval(tiny_model, str(tmp_path))

    def test_curve_from_rows_skips_average(self):
        rows = [{"image": "a", "bpp": 0.5, "psnr_db": 30.0},
                {"image": "average", "bpp": 0.5, "psnr_db": 30.0}]
        assert mt.curve_from_rows(rows) == [(0.5, 30.0)]

    def test_bad_csv_rejected(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("nope\n1,2,3\n")
        with pytest.raises(DataError):
            mt.read_rd_csv(str(p))
