"""CDF quantization and bit-exact range-coder round trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointiq.errors import DataError
from jointiq.rangecoder import CdfTable, RangeDecoder, RangeEncoder, build_cdf


class TestBuildCdf:
    def test_dyadic_probabilities_are_exact(self):
        cdf = build_cdf([0.5, 0.25, 0.25])
        assert cdf.cum.tolist() == [0, 32768, 49152, 65536]

    def test_every_symbol_keeps_frequency_one(self):
        pmf = np.full(100, 1e-12)
        pmf[0] = 1.0 - pmf[1:].sum()
        cdf = build_cdf(pmf)
        assert int(cdf.freq.min()) == 1
        assert int(cdf.cum[-1]) == 1 << 16

    def test_totals_exact_for_random_pmfs(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            size = int(rng.integers(2, 600))
            pmf = rng.dirichlet(np.full(size, 0.3))
            cdf = build_cdf(pmf)
            assert int(cdf.cum[-1]) == 1 << 16
            assert int(cdf.freq.min()) >= 1
            assert cdf.num_symbols == size

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        pmf = rng.dirichlet(np.ones(50))
        assert np.array_equal(build_cdf(pmf).cum, build_cdf(pmf.copy()).cum)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            build_cdf([0.6, 0.6])
        with pytest.raises(ValueError):
            build_cdf([1.2, -0.2])
        with pytest.raises(ValueError):
            build_cdf([])
        with pytest.raises(ValueError):
            build_cdf(np.full(1 << 17, 1.0 / (1 << 17)))

    @given(st.integers(min_value=2, max_value=300), st.integers())
    @settings(max_examples=50, deadline=None)
    def test_quantization_error_bounded(self, size, seed):
        rng = np.random.default_rng(abs(seed) % (2 ** 32))
        pmf = rng.dirichlet(np.ones(size))
        cdf = build_cdf(pmf)
        # each frequency within one count of ideal unless lifted by the floor
        ideal = pmf * (1 << 16)
        slack = np.maximum(1.0, np.ceil(ideal) - ideal + 1.0)
        assert np.all(np.abs(cdf.freq - ideal) <= slack + size)


def roundtrip(symbol_stream, tables, table_ids):
    enc = RangeEncoder()
    for s, t in zip(symbol_stream, table_ids):
        enc.encode_symbol(tables[t], int(s))
    data = enc.flush()
    dec = RangeDecoder(data)
    out = [dec.decode_symbol(tables[t]) for t in table_ids]
    return data, np.asarray(out)


class TestRoundTrip:
    def test_small_stream(self):
        tables = [build_cdf([0.9, 0.05, 0.05]), build_cdf([0.2, 0.3, 0.5])]
        syms = [0, 0, 2, 1, 0, 2, 2, 1, 0, 0]
        ids = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1]
        _, out = roundtrip(syms, tables, ids)
        assert out.tolist() == syms

    def test_randomized_with_varying_tables(self):
        rng = np.random.default_rng(2)
        tables = [build_cdf(rng.dirichlet(np.full(int(rng.integers(2, 40)), 0.5)))
                  for _ in range(32)]
        n = 20000
        ids = rng.integers(0, len(tables), size=n)
        syms = np.array([rng.choice(tables[t].num_symbols,
                                    p=tables[t].probabilities())
                         for t in ids])
        data, out = roundtrip(syms, tables, ids)
        assert np.array_equal(out, syms)
        ideal = -sum(np.log2(tables[t].probabilities()[s])
                     for s, t in zip(syms, ids))
        assert len(data) * 8 <= ideal * 1.001 + 64

    def test_single_symbol_alphabet_members(self):
        # skewed table still codes its rare symbols correctly
        table = build_cdf([0.998, 0.001, 0.001])
        syms = [1, 2, 1, 2, 0]
        _, out = roundtrip(syms, [table], [0] * len(syms))
        assert out.tolist() == syms

    def test_flush_is_idempotent(self):
        enc = RangeEncoder()
        enc.encode_symbol(build_cdf([0.5, 0.5]), 1)
        assert enc.flush() == enc.flush()

    def test_decoder_needs_preamble(self):
        with pytest.raises(DataError):
            RangeDecoder(b"\x00\x01")

    def test_byte_exhaustion_detected(self):
        table = build_cdf(np.full(256, 1.0 / 256))
        enc = RangeEncoder()
        for _ in range(100):
            enc.encode_symbol(table, 17)
        data = enc.flush()
        dec = RangeDecoder(data[:8])
        with pytest.raises(DataError):
            for _ in range(100):
                dec.decode_symbol(table)

    def test_probabilities_property(self):
        cdf = build_cdf([0.5, 0.25, 0.25])
        assert np.allclose(cdf.probabilities(), [0.5, 0.25, 0.25])
        assert isinstance(cdf, CdfTable)
