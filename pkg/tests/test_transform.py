import hashlib
import math

import numpy as np
import pytest

from pswa.transform import (LATENT_CHANNELS, QUANT_STEPS, analysis, dct_matrix, psnr, quant_step, synthesis,
                            zigzag_order)


def _frame(h=24, w=16):
    return (np.arange(h * w * 3).reshape(h, w, 3) * 7 % 256).astype(np.uint8)


def _dct_block_sum(block, u, v):
    """Textbook 2-D DCT-II coefficient by direct cosine sums."""
    cu = math.sqrt(1 / 8) if u == 0 else math.sqrt(2 / 8)
    cv = math.sqrt(1 / 8) if v == 0 else math.sqrt(2 / 8)
    acc = 0.0
    for i in range(8):
        for j in range(8):
            acc += block[i, j] * math.cos((2 * i + 1) * u * math.pi / 16) * math.cos((2 * j + 1) * v * math.pi / 16)
    return cu * cv * acc


def test_coefficients_match_direct_sums():
    f = _frame(8, 8)
    lat = analysis(f, 2)
    zz = zigzag_order()
    for k in (0, 1, 2, 9, 35, 63):
        u, v = zz[k]
        for plane in range(3):
            want = _dct_block_sum(f[:, :, plane].astype(float) - 128, u, v) / QUANT_STEPS[2]
            assert lat[3 * k + plane, 0, 0] == pytest.approx(want, abs=1e-4)


def test_zigzag_prefix_and_orthonormality():
    assert zigzag_order()[:6] == [(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2)]
    assert sorted(zigzag_order()) == [(i, j) for i in range(8) for j in range(8)]
    d = dct_matrix()
    np.testing.assert_allclose(d @ d.T, np.eye(8), atol=1e-12)


def test_constant_frame_is_dc_only():
    f = np.full((16, 24, 3), 200, np.uint8)
    f[..., 1] = 10
    lat = analysis(f, 0)
    assert lat.shape == (LATENT_CHANNELS, 2, 3)
    assert np.all(np.abs(lat[3:]) < 1e-4)
    assert lat[0, 0, 0] == pytest.approx(8 * 72 / 8.0, rel=1e-6)
    assert lat[1, 0, 0] == pytest.approx(8 * -118 / 8.0, rel=1e-6)


def test_roundtrip_and_padding():
    f = _frame(21, 13)
    for rate in range(4):
        lat = analysis(f, rate)
        assert lat.shape == (192, 3, 2)
        back = synthesis(lat, rate, size=(21, 13), clamp_round=False)
        assert np.max(np.abs(back - f)) < 1e-3
        assert np.array_equal(synthesis(lat, rate, size=(21, 13)), f)


def test_parseval():
    f = _frame(16, 16)
    lat = analysis(f, 3).astype(np.float64) * QUANT_STEPS[3]
    x = f.astype(np.float64) - 128
    assert np.sum(lat ** 2) == pytest.approx(np.sum(x ** 2), rel=1e-5)


def test_zero_latent_is_mid_gray():
    out = synthesis(np.zeros((192, 2, 2), np.float32), 0)
    assert out.shape == (16, 16, 3) and np.all(out == 128)


def test_quantised_quality_improves_with_rate():
    r = np.random.default_rng(0)
    f = np.clip(r.normal(128, 40, (32, 32, 3)), 0, 255).astype(np.uint8)
    scores = [psnr(f, synthesis(np.rint(analysis(f, q)), q)) for q in range(4)]
    assert all(a < b for a, b in zip(scores, scores[1:]))
    assert psnr(f, f) == float("inf")


def test_input_validation():
    with pytest.raises(ValueError):
        analysis(np.zeros((8, 8), np.uint8), 0)
    with pytest.raises(ValueError):
        quant_step(4)
    with pytest.raises(ValueError):
        synthesis(np.zeros((3, 1, 1)), 0)


def test_frozen_latent_hash():
    lat = np.rint(analysis(_frame(), 1)).astype(np.int32)
    assert hashlib.sha256(lat.tobytes()).hexdigest() == \
        "e70cc2340ad12ce0a4621f27c492979036afc4945d9a926d3bac18a1bbeda336"
