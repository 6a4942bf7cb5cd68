"""Bit-packing and multiplication-free kernel tests against dense oracles."""

import struct

import numpy as np
import pytest

from btnn.packing import (
    from_bytes,
    pack,
    packed_conv2d,
    packed_dot,
    packed_matmul,
    to_bytes,
    unpack,
)
from btnn.quant import (
    Granularity,
    QuantKind,
    QuantScheme,
    binarize,
    bt_quantize,
    dequantize,
    quantize,
    ternarize,
)


def conv2d_loop_oracle(w, x, stride=1, padding=0):
    """Direct nested-loop convolution in float64 (independent of im2col)."""
    f, c, kh, kw = w.shape
    n, _, h, wd = x.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for ni in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    tile = xp[ni, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[ni, fi, i, j] = np.sum(tile * w[fi].astype(np.float64))
    return out


def random_quant(rng, kind, size=None, shape=None, granularity=Granularity.PER_TENSOR):
    if shape is None:
        shape = (size,)
    w = rng.normal(size=shape).astype(np.float32)
    return w, quantize(w, QuantScheme(kind, granularity=granularity))


ALL_KINDS = [QuantKind.BINARY, QuantKind.TERNARY, QuantKind.BT]


class TestPackRoundTrip:
    def test_sign_word_layout(self):
        # LSB-first: codes [1, -1, 1] -> bits 101 -> word value 5
        q = binarize(np.array([0.5, -0.5, 0.5], dtype=np.float32))
        p = pack(q)
        assert int(p.planes[0].sign_bits[0]) == 0b101
        assert p.planes[0].nonzero_mask is None

    def test_pad_bits_are_zero(self):
        q = binarize(np.ones(3, dtype=np.float32))
        p = pack(q)
        assert int(p.planes[0].sign_bits[0]) >> 3 == 0

    def test_storage_arithmetic(self):
        # 4096 elements: BT planes take 3 bits each = 1536 bytes vs 16384
        rng = np.random.default_rng(0)
        w, q = random_quant(rng, QuantKind.BT, size=4096)
        p = pack(q)
        plane_bytes = sum(pl.nbytes for pl in p.planes)
        assert plane_bytes == 1536
        assert w.nbytes == 16384
        # binary-only plane storage is 32x smaller than float32
        _, qb = random_quant(rng, QuantKind.BINARY, size=4096)
        assert pack(qb).planes[0].nbytes == 512

    def test_round_trip_many_random_tensors(self):
        rng = np.random.default_rng(1)
        for i in range(1000):
            kind = ALL_KINDS[i % 3]
            gran = Granularity.PER_CHANNEL if i % 5 == 0 else Granularity.PER_TENSOR
            shape = tuple(rng.integers(1, 9, size=rng.integers(1, 4)))
            w = rng.normal(size=shape).astype(np.float32)
            q = quantize(w, QuantScheme(kind, granularity=gran))
            back = unpack(pack(q))
            assert back.shape == q.shape
            for a, b in zip(q.planes, back.planes):
                np.testing.assert_array_equal(a, b)
            np.testing.assert_array_equal(np.atleast_1d(q.alpha), np.atleast_1d(back.alpha))

    def test_memory_ratio_invariant(self):
        rng = np.random.default_rng(2)
        for n in (4096, 10000, 65536):
            _, qb = random_quant(rng, QuantKind.BINARY, size=n)
            _, qt = random_quant(rng, QuantKind.BT, size=n)
            float_bytes = 4 * n
            assert pack(qb).nbytes <= float_bytes / 30
            assert pack(qt).nbytes <= float_bytes / 10


class TestPackedDot:
    def test_hand_example(self):
        q = binarize(np.array([0.5, -0.5, 0.5], dtype=np.float32))
        p = pack(q)
        a = np.array([0.5, 0.2, 0.1], dtype=np.float32)
        # alpha = 0.5, code dot = 0.4
        assert packed_dot(p, a) == pytest.approx(0.5 * 0.4, rel=1e-6)

    def test_unit_alpha_example(self):
        w = np.array([1.0, -1.0, 1.0], dtype=np.float32)  # alpha = 1 exactly
        p = pack(binarize(w))
        assert packed_dot(p, [0.5, 0.2, 0.1]) == pytest.approx(0.4, rel=1e-6)

    def test_all_zero_ternary(self):
        q = ternarize(np.zeros(8, dtype=np.float32))
        p = pack(q)
        rng = np.random.default_rng(3)
        assert packed_dot(p, rng.normal(size=8)) == 0.0

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_against_dense_oracle(self, kind):
        rng = np.random.default_rng(4)
        for _ in range(333):
            w, q = random_quant(rng, kind, size=4096)
            a = rng.normal(size=4096).astype(np.float32)
            dense = float(dequantize(q).astype(np.float64) @ a.astype(np.float64))
            got = packed_dot(pack(q), a)
            assert got == pytest.approx(dense, rel=1e-4, abs=1e-4)

    def test_length_mismatch(self):
        p = pack(binarize(np.ones(4, dtype=np.float32)))
        with pytest.raises(ValueError):
            packed_dot(p, np.ones(5))


class TestPackedMatmul:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_against_dense(self, kind):
        rng = np.random.default_rng(5)
        w, q = random_quant(rng, kind, shape=(16, 64))
        x = rng.normal(size=(8, 64)).astype(np.float32)
        dense = x.astype(np.float64) @ dequantize(q).astype(np.float64).T
        got = packed_matmul(pack(q), x)
        np.testing.assert_allclose(got, dense, rtol=1e-4, atol=1e-5)

    def test_per_channel_scales(self):
        rng = np.random.default_rng(6)
        w, q = random_quant(
            rng, QuantKind.BT, shape=(4, 32), granularity=Granularity.PER_CHANNEL
        )
        x = rng.normal(size=(3, 32)).astype(np.float32)
        dense = x @ dequantize(q).T
        np.testing.assert_allclose(packed_matmul(pack(q), x), dense, rtol=1e-4, atol=1e-5)


class TestPackedConv2d:
    def test_identity_filter(self):
        w = np.ones((1, 1, 1, 1), dtype=np.float32)
        p = pack(binarize(w))  # code +1, alpha 1
        x = np.random.default_rng(7).normal(size=(2, 1, 5, 5)).astype(np.float32)
        np.testing.assert_allclose(packed_conv2d(p, x), x, rtol=1e-6)

    def test_bt_filter_bank_matches_loop_oracle(self):
        rng = np.random.default_rng(8)
        w = rng.normal(size=(8, 3, 3, 3)).astype(np.float32)
        q = bt_quantize(w)
        x = rng.normal(size=(1, 3, 16, 16)).astype(np.float32)
        oracle = conv2d_loop_oracle(dequantize(q), x, stride=1, padding=1)
        got = packed_conv2d(pack(q), x, stride=1, padding=1)
        np.testing.assert_allclose(got, oracle, rtol=1e-4, atol=1e-5)

    def test_many_random_cases_match_oracle(self):
        rng = np.random.default_rng(9)
        for i in range(100):
            kind = ALL_KINDS[i % 3]
            f, c = int(rng.integers(1, 5)), int(rng.integers(1, 4))
            kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            padding = int(rng.integers(0, 2))
            h = int(rng.integers(kh, kh + 6))
            wd = int(rng.integers(kw, kw + 6))
            gran = Granularity.PER_CHANNEL if i % 4 == 0 else Granularity.PER_TENSOR
            wts = rng.normal(size=(f, c, kh, kw)).astype(np.float32)
            q = quantize(wts, QuantScheme(kind, granularity=gran))
            x = rng.normal(size=(2, c, h, wd)).astype(np.float32)
            oracle = conv2d_loop_oracle(dequantize(q), x, stride, padding)
            got = packed_conv2d(pack(q), x, stride=stride, padding=padding)
            np.testing.assert_allclose(got, oracle, rtol=1e-4, atol=1e-5)

    def test_channel_mismatch(self):
        p = pack(binarize(np.ones((2, 3, 3, 3), dtype=np.float32)))
        with pytest.raises(ValueError):
            packed_conv2d(p, np.ones((1, 4, 8, 8), dtype=np.float32))

    def test_unsupported_stride(self):
        p = pack(binarize(np.ones((2, 3, 3, 3), dtype=np.float32)))
        with pytest.raises(ValueError):
            packed_conv2d(p, np.ones((1, 3, 8, 8), dtype=np.float32), stride=0)

    def test_kernel_larger_than_input(self):
        p = pack(binarize(np.ones((1, 1, 5, 5), dtype=np.float32)))
        with pytest.raises(ValueError):
            packed_conv2d(p, np.ones((1, 1, 3, 3), dtype=np.float32))


class TestSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(10)
        for kind in ALL_KINDS:
            for gran in (Granularity.PER_TENSOR, Granularity.PER_CHANNEL):
                w = rng.normal(size=(6, 10)).astype(np.float32)
                q = quantize(w, QuantScheme(kind, granularity=gran))
                p = pack(q)
                back = from_bytes(to_bytes(p))
                assert back.shape == p.shape
                assert back.scheme.kind == kind
                np.testing.assert_array_equal(
                    np.atleast_1d(back.alpha), np.atleast_1d(p.alpha)
                )
                for a, b in zip(p.planes, back.planes):
                    np.testing.assert_array_equal(a.sign_bits, b.sign_bits)

    def test_exact_layout_golden(self):
        # independently reconstruct the documented byte layout
        q = binarize(np.array([0.5, -0.5, 0.5], dtype=np.float32))
        expected = b"".join(
            [
                b"BQT1",
                struct.pack("<BBBB", 1, 0, 1, 0),
                struct.pack("<I", 1),
                struct.pack("<I", 3),
                struct.pack("<I", 1),
                struct.pack("<f", 0.5),
                struct.pack("<B", 0),
                struct.pack("<Q", 0b101),
            ]
        )
        assert to_bytes(pack(q)) == expected

    def test_bad_magic(self):
        blob = bytearray(to_bytes(pack(binarize(np.ones(4, dtype=np.float32)))))
        blob[0] = 0x58
        with pytest.raises(ValueError):
            from_bytes(bytes(blob))

    def test_truncated(self):
        blob = to_bytes(pack(binarize(np.ones(100, dtype=np.float32))))
        with pytest.raises(ValueError):
            from_bytes(blob[:-4])

    def test_dequantized_values_survive(self):
        rng = np.random.default_rng(11)
        w = rng.normal(size=257).astype(np.float32)
        q = bt_quantize(w)
        back = unpack(from_bytes(to_bytes(pack(q))))
        np.testing.assert_allclose(dequantize(back), dequantize(q), rtol=1e-6)
