"""Quantizer tests: hand-computed examples, analytic oracles, invariants."""

import logging
import math

import numpy as np
import pytest

from btnn.quant import (
    Granularity,
    QuantKind,
    QuantScheme,
    alpha_opt,
    binarize,
    binary_residual_pair,
    bt_quantize,
    dequantize,
    diagnostics,
    effective_codes,
    quantize,
    residual,
    ternarize,
)

PER_CHANNEL = Granularity.PER_CHANNEL


class TestBinarize:
    def test_signs_and_scale(self):
        q = binarize(np.array([0.5, -0.3, 0.2], dtype=np.float32))
        np.testing.assert_array_equal(q.planes[0], [1, -1, 1])
        assert q.alpha == pytest.approx(1.0 / 3.0, abs=1e-6)

    def test_zero_maps_to_plus_one(self):
        q = binarize(np.zeros(2, dtype=np.float32))
        np.testing.assert_array_equal(q.planes[0], [1, 1])
        assert q.alpha == 0.0

    def test_gaussian_scale_and_mse(self):
        # For W ~ N(0,1): E|W| = sqrt(2/pi) and the sign-quantizer MSE is
        # E[(|W| - E|W|)^2] = 1 - 2/pi.
        rng = np.random.default_rng(7)
        w = rng.standard_normal(1_000_000).astype(np.float32)
        q = binarize(w)
        assert q.alpha == pytest.approx(math.sqrt(2 / math.pi), abs=3e-3)
        d = diagnostics(w, q)
        assert d.mse == pytest.approx(1 - 2 / math.pi, abs=3e-3)

    def test_dequantize_is_alpha_times_codes(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(4, 5)).astype(np.float32)
        q = binarize(w)
        np.testing.assert_allclose(dequantize(q), q.alpha * q.planes[0], rtol=1e-7)

    @pytest.mark.parametrize("bad", [np.array([]), np.array([1.0, np.nan]),
                                     np.array([np.inf, 0.0])])
    def test_invalid_inputs(self, bad):
        with pytest.raises(ValueError):
            binarize(bad)


class TestTernarize:
    def test_hand_example(self):
        w = np.array([0.9, 0.1, -0.5, -0.05], dtype=np.float32)
        q = ternarize(w)
        # mean |W| = 0.3875, threshold 0.66 * 0.3875 = 0.25575
        np.testing.assert_array_equal(q.planes[0], [1, 0, -1, 0])
        assert q.alpha == pytest.approx(0.3875, abs=1e-6)

    def test_all_zero_weights(self):
        q = ternarize(np.zeros(3, dtype=np.float32))
        np.testing.assert_array_equal(q.planes[0], [0, 0, 0])
        assert q.alpha == 0.0

    def test_boundary_weight_goes_to_zero(self):
        # with delta_coeff=1 every |W| equals the threshold exactly
        q = ternarize(np.array([0.5, -0.5], dtype=np.float32), delta_coeff=1.0)
        np.testing.assert_array_equal(q.planes[0], [0, 0])

    def test_gaussian_zero_fraction(self):
        # P(|W| <= 0.66 * E|W|) = 2*Phi(0.66*sqrt(2/pi)) - 1 for W ~ N(0,1)
        scipy_stats = pytest.importorskip("scipy.stats")
        rng = np.random.default_rng(11)
        w = rng.standard_normal(1_000_000).astype(np.float32)
        q = ternarize(w)
        expected = 2 * scipy_stats.norm.cdf(0.66 * math.sqrt(2 / math.pi)) - 1
        assert np.mean(q.planes[0] == 0) == pytest.approx(expected, abs=5e-3)

    def test_nonzero_alpha_option(self):
        w = np.array([0.9, 0.1, -0.5, -0.05], dtype=np.float32)
        q = ternarize(w, alpha_nonzero=True)
        assert q.alpha == pytest.approx((0.9 + 0.5) / 2, abs=1e-6)

    def test_bad_delta_coeff(self):
        with pytest.raises(ValueError):
            ternarize(np.ones(3), delta_coeff=0.0)


class TestResidual:
    def test_hand_example(self):
        w = np.array([0.8, -0.4, 0.1, -0.9], dtype=np.float32)
        e = residual(w, binarize(w))  # alpha = 0.55
        np.testing.assert_allclose(e, [0.25, 0.15, -0.45, -0.35], atol=1e-6)

    def test_exact_encoding_gives_zero(self):
        w = np.array([1.0, -1.0, 1.0], dtype=np.float32)
        e = residual(w, binarize(w))
        np.testing.assert_array_equal(e, np.zeros(3, dtype=np.float32))

    def test_zero_scale_returns_weights(self):
        w = np.array([0.25, -0.75], dtype=np.float32)
        q = binarize(np.zeros(2, dtype=np.float32))
        np.testing.assert_array_equal(residual(w, q), w)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            residual(np.ones(3), binarize(np.ones(4)))


class TestAlphaOpt:
    def test_direct_substitution(self):
        assert alpha_opt(1.0, 0.2) == pytest.approx(0.70, abs=1e-7)

    def test_symmetry_case(self):
        for a in (0.0, 0.5, 2.0, 17.25):
            assert alpha_opt(a, a) == pytest.approx(0.5 * a, abs=1e-6)

    def test_midpoint_identity(self):
        # 0.75*a1 - 0.25*a2 is the midpoint of (a1 - a2) and 0.5*(a1 + a2):
        # exact in exact arithmetic, within 1e-7 in 32-bit float on unit-range
        # scales (realistic weight magnitudes).
        rng = np.random.default_rng(5)
        a1 = rng.uniform(0, 1, 1000).astype(np.float32)
        a2 = rng.uniform(0, 1, 1000).astype(np.float32)
        got = alpha_opt(a1, a2)
        midpoint = ((a1 - a2) + 0.5 * (a1 + a2)) / 2
        np.testing.assert_allclose(got, midpoint, atol=1e-7)
        # exactness of the algebra itself, checked in float64
        b1 = rng.uniform(0, 10, 1000)
        b2 = rng.uniform(0, 10, 1000)
        np.testing.assert_allclose(
            0.75 * b1 - 0.25 * b2, ((b1 - b2) + 0.5 * (b1 + b2)) / 2, atol=1e-12
        )

    def test_negative_inputs_rejected(self):
        with pytest.raises(ValueError):
            alpha_opt(-0.1, 1.0)
        with pytest.raises(ValueError):
            alpha_opt(1.0, -0.1)

    def test_warnings_on_flip_and_nonpositive(self, caplog):
        with caplog.at_level(logging.WARNING, logger="btnn.quant"):
            alpha_opt(1.0, 0.1)  # a1 > 3*a2
        assert any("ordering flipped" in r.message for r in caplog.records)
        caplog.clear()
        with caplog.at_level(logging.WARNING, logger="btnn.quant"):
            alpha_opt(0.1, 1.0)  # a1 <= a2/3 -> nonpositive
        assert any("nonpositive" in r.message for r in caplog.records)


class TestBtQuantize:
    def test_hand_example(self):
        w = np.array([0.8, -0.4, 0.1, -0.9], dtype=np.float32)
        q = bt_quantize(w)
        np.testing.assert_allclose(q.stage_alphas[0], 0.55, atol=1e-6)
        np.testing.assert_array_equal(q.planes[0], [1, -1, 1, -1])
        np.testing.assert_allclose(q.stage_alphas[1], 0.30, atol=1e-6)
        np.testing.assert_array_equal(q.planes[1], [1, 0, -1, -1])
        np.testing.assert_array_equal(effective_codes(q), [2, -1, 0, -2])
        assert q.alpha == pytest.approx(0.3375, abs=1e-6)
        np.testing.assert_allclose(
            dequantize(q), [0.675, -0.3375, 0.0, -0.675], atol=1e-6
        )

    def test_constant_tensor(self):
        for c in (0.5, 1.0, 3.25):
            w = np.full(3, c, dtype=np.float32)
            q = bt_quantize(w)
            np.testing.assert_array_equal(q.planes[0], [1, 1, 1])
            np.testing.assert_array_equal(q.planes[1], [0, 0, 0])
            assert q.stage_alphas[1] == pytest.approx(0.0, abs=1e-7)
            np.testing.assert_allclose(dequantize(q), 0.75 * c, atol=1e-6)

    def test_codomain(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            w = rng.normal(size=256).astype(np.float32)
            eff = effective_codes(bt_quantize(w))
            assert set(np.unique(eff)) <= {-2, -1, 0, 1, 2}

    def test_error_ordering_on_gaussian(self):
        rng = np.random.default_rng(17)
        w = rng.standard_normal(1_000_000).astype(np.float32)
        mse_b = diagnostics(w, binarize(w)).mse
        mse_t = diagnostics(w, ternarize(w)).mse
        mse_bt = diagnostics(w, bt_quantize(w)).mse
        assert mse_bt < mse_t < mse_b

    def test_rejects_non_bt_scheme(self):
        with pytest.raises(ValueError):
            bt_quantize(np.ones(4), QuantScheme(QuantKind.BINARY))


class TestBinaryResidualPair:
    def test_hand_example(self):
        w = np.array([0.8, -0.4, 0.1, -0.9], dtype=np.float32)
        q = binary_residual_pair(w)
        np.testing.assert_array_equal(q.planes[0], [1, -1, 1, -1])
        np.testing.assert_array_equal(q.planes[1], [1, 1, -1, -1])
        np.testing.assert_array_equal(effective_codes(q), [2, 0, 0, -2])

    def test_three_level_codomain(self):
        rng = np.random.default_rng(23)
        for _ in range(100):
            w = rng.normal(size=512).astype(np.float32)
            eff = effective_codes(binary_residual_pair(w))
            levels = set(np.unique(eff))
            assert levels <= {-2, 0, 2}
            assert len(levels) <= 3

    def test_single_positive_weight(self):
        q = binary_residual_pair(np.array([2.5], dtype=np.float32))
        assert effective_codes(q)[0] == 2


class TestDiagnostics:
    def test_exact_reconstruction(self):
        w = np.array([1.0, -1.0], dtype=np.float32)
        d = diagnostics(w, binarize(w))
        assert d.mse == 0.0
        assert d.sparsity == 0.0

    def test_ternary_sparsity(self):
        w = np.array([0.9, 0.1, -0.5, -0.05], dtype=np.float32)
        d = diagnostics(w, ternarize(w))
        assert d.sparsity == 0.5

    def test_histogram_sums_to_element_count(self):
        rng = np.random.default_rng(29)
        w = rng.normal(size=(8, 16)).astype(np.float32)
        for q in (binarize(w), ternarize(w), bt_quantize(w)):
            d = diagnostics(w, q)
            assert sum(d.level_histogram.values()) == w.size


class TestInvariants:
    def test_code_idempotence(self):
        rng = np.random.default_rng(31)
        w = rng.normal(size=1024).astype(np.float32)
        w[w == 0] = 0.1
        q1 = binarize(w)
        q2 = binarize(dequantize(q1))
        np.testing.assert_array_equal(q1.planes[0], q2.planes[0])

    def test_binary_scale_minimizes_l2(self):
        # golden-section search over alpha must land on mean(|W|)
        rng = np.random.default_rng(37)
        w = rng.normal(size=4096).astype(np.float32)
        codes = binarize(w).planes[0].astype(np.float64)

        def err(a):
            return float(np.linalg.norm(w - a * codes))

        lo, hi = 0.0, 2.0 * float(np.abs(w).max())
        phi = (math.sqrt(5) - 1) / 2
        for _ in range(200):
            m1 = hi - phi * (hi - lo)
            m2 = lo + phi * (hi - lo)
            if err(m1) < err(m2):
                hi = m2
            else:
                lo = m1
        best = (lo + hi) / 2
        assert binarize(w).alpha == pytest.approx(best, abs=1e-4)

    def test_error_ordering_over_many_tensors(self):
        rng = np.random.default_rng(41)
        mses = {"binary": [], "ternary": [], "bt": []}
        for i in range(200):
            if i % 2 == 0:
                w = rng.standard_normal(4096).astype(np.float32)
            else:
                w = rng.uniform(-1, 1, 4096).astype(np.float32)
            mses["binary"].append(diagnostics(w, binarize(w)).mse)
            mses["ternary"].append(diagnostics(w, ternarize(w)).mse)
            mses["bt"].append(diagnostics(w, bt_quantize(w)).mse)
        assert np.mean(mses["bt"]) < np.mean(mses["ternary"]) < np.mean(mses["binary"])

    def test_scale_equivariance(self):
        rng = np.random.default_rng(43)
        w = rng.normal(size=512).astype(np.float32)
        w[w == 0] = 0.25
        for c in (0.5, 2.0, 10.0):
            for fn in (binarize, ternarize, bt_quantize):
                q1, qc = fn(w), fn(np.float32(c) * w)
                for p1, pc in zip(q1.planes, qc.planes):
                    np.testing.assert_array_equal(p1, pc)
                np.testing.assert_allclose(qc.alpha, c * q1.alpha, rtol=1e-5)
                np.testing.assert_allclose(
                    dequantize(qc), c * dequantize(q1), rtol=1e-4, atol=1e-6
                )

    def test_per_channel_alphas(self):
        rng = np.random.default_rng(47)
        w = rng.normal(size=(4, 64)).astype(np.float32)
        q = binarize(w, PER_CHANNEL)
        assert q.alpha.shape == (4,)
        np.testing.assert_allclose(q.alpha, np.abs(w).mean(axis=1), rtol=1e-6)

    def test_per_channel_mse_not_worse(self):
        rng = np.random.default_rng(53)
        for _ in range(50):
            w = rng.normal(size=(8, 128)).astype(np.float32)
            w *= rng.uniform(0.1, 10.0, size=(8, 1))  # heterogeneous channels
            for kind in (QuantKind.BINARY, QuantKind.TERNARY, QuantKind.BT):
                per_tensor = quantize(w, QuantScheme(kind))
                per_chan = quantize(w, QuantScheme(kind, granularity=PER_CHANNEL))
                assert (
                    diagnostics(w, per_chan).mse
                    <= diagnostics(w, per_tensor).mse + 1e-12
                )

    def test_per_channel_on_scalar_is_error(self):
        with pytest.raises(ValueError):
            binarize(np.float32(1.0), PER_CHANNEL)
