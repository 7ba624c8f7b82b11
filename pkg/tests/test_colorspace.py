import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duconet.colorspace import (
    ColorRangeError,
    channel_change_stats,
    channel_correlation,
    lab_to_rgb,
    normalize_lab_channels,
    rgb_to_lab,
    srgb_to_linear,
)
from duconet.synth import illumination_reflectance_corpus


def reference_lab(r, g, b):
    """Scalar sRGB -> XYZ -> Lab using the published 4-digit matrix and D65 white."""

    def lin(c):
        return c / 12.92 if c <= 0.04045 else ((c + 0.055) / 1.055) ** 2.4

    rl, gl, bl = lin(r), lin(g), lin(b)
    x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl
    y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl
    z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl

    def f(t):
        d = 6 / 29
        return t ** (1 / 3) if t > d**3 else t / (3 * d * d) + 4 / 29

    fx, fy, fz = f(x / 0.95047), f(y / 1.0), f(z / 1.08883)
    return 116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)


def lattice(n=17):
    g = np.linspace(0.0, 1.0, n)
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)


def test_srgb_to_linear_examples():
    assert srgb_to_linear(0.0) == 0.0
    assert srgb_to_linear(1.0) == 1.0
    assert abs(srgb_to_linear(0.04045) - 0.04045 / 12.92) < 1e-15
    assert abs(0.04045 / 12.92 - 0.0031308) < 1e-6


def test_black_and_white():
    np.testing.assert_array_equal(rgb_to_lab(np.zeros(3)), [0.0, 0.0, 0.0])
    assert np.abs(rgb_to_lab(np.ones(3)) - [100.0, 0.0, 0.0]).max() <= 1e-6


def test_mid_gray_against_scalar_reference():
    L, a, b = rgb_to_lab(np.full(3, 0.5))
    ref_L = reference_lab(0.5, 0.5, 0.5)[0]
    # reference uses the rounded published matrix, whose Y row sums to 1.0000001
    assert abs(L - ref_L) < 1e-5
    assert abs(a) < 1e-9 and abs(b) < 1e-9


def test_random_colours_against_scalar_reference(rng):
    for rgb in rng.uniform(size=(50, 3)):
        got = rgb_to_lab(rgb)
        ref = reference_lab(*rgb)
        assert np.abs(got - ref).max() < 1e-3


def test_round_trip_lattice():
    x = lattice()
    assert np.abs(lab_to_rgb(rgb_to_lab(x)) - x).max() <= 1e-9


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 1.0))
def test_gray_axis_is_neutral(c):
    _, a, b = rgb_to_lab(np.full(3, c))
    assert abs(a) <= 1e-9 and abs(b) <= 1e-9


def test_lightness_increases_along_gray_axis():
    L = rgb_to_lab(np.repeat(np.linspace(0, 1, 1001)[:, None], 3, axis=1))[:, 0]
    assert (np.diff(L) > 0).all()


def test_out_of_range_rgb_rejected():
    with pytest.raises(ColorRangeError):
        rgb_to_lab(np.array([0.2, 1.2, 0.3]))
    with pytest.raises(ColorRangeError):
        rgb_to_lab(np.array([-0.01, 0.2, 0.3]))


def test_lab_to_rgb_clamps_and_counts():
    rgb, count = lab_to_rgb(np.array([[50.0, 120.0, -120.0]]), with_clamp_count=True)
    assert count > 0
    assert rgb.min() >= 0.0 and rgb.max() <= 1.0
    _, none = lab_to_rgb(rgb_to_lab(np.array([[0.3, 0.4, 0.5]])), with_clamp_count=True)
    assert none == 0


def test_normalize_lab_channels():
    L, a, b = normalize_lab_channels(np.array([[100.0, 0.0, -128.0]]))
    assert L[0] == 1.0 and a[0] == 0.5 and b[0] == 0.0


def test_correlation_grayscale_corpus(rng):
    images = [np.repeat(rng.uniform(size=(8, 8, 1)), 3, axis=2) for _ in range(4)]
    rep = channel_correlation(images, 500, seed=3)
    off = rep.rgb_corr[[0, 0, 1], [1, 2, 2]]
    assert np.abs(off - 1.0).max() <= 1e-12
    assert np.allclose(np.diag(rep.rgb_corr), 1.0, atol=1e-12)


def test_correlation_constant_corpus_flags_all_pairs():
    rep = channel_correlation([np.full((4, 4, 3), 0.3)], 100, seed=0)
    assert len(rep.rgb_undefined) == 3 and len(rep.lab_undefined) == 3
    assert (rep.rgb_corr[[0, 0, 1], [1, 2, 2]] == 0).all()


def _pearson(u, v):
    mu, mv = sum(u) / len(u), sum(v) / len(v)
    num = sum((a - mu) * (b - mv) for a, b in zip(u, v))
    du = sum((a - mu) ** 2 for a in u) ** 0.5
    dv = sum((b - mv) ** 2 for b in v) ** 0.5
    return num / (du * dv)


def test_correlation_illumination_corpus_matches_independent_statistics():
    corpus = illumination_reflectance_corpus(100, 32, seed=0)
    rep = channel_correlation(corpus, 1000, seed=0)
    # replay the sampling and compute Pearson with plain Python
    flat = np.concatenate([im.reshape(-1, 3) for im in corpus])
    picks = flat[np.random.default_rng(0).integers(0, flat.shape[0], size=1000)]
    for i, j in [(0, 1), (0, 2), (1, 2)]:
        ref = _pearson(picks[:, i].tolist(), picks[:, j].tolist())
        assert abs(rep.rgb_corr[i, j] - ref) < 1e-10
        assert rep.rgb_corr[i, j] >= 0.9
    lab = rgb_to_lab(picks)
    assert min(abs(_pearson(lab[:, i].tolist(), lab[:, j].tolist())) for i, j in [(0, 1), (0, 2), (1, 2)]) <= 0.5


def test_correlation_is_deterministic_and_symmetric():
    corpus = illumination_reflectance_corpus(10, 16, seed=5)
    a = channel_correlation(corpus, 300, seed=9)
    b = channel_correlation(corpus, 300, seed=9)
    assert a.to_json() == b.to_json()
    for m in (a.rgb_corr, a.lab_corr):
        np.testing.assert_array_equal(m, m.T)
        assert np.abs(np.diag(m) - 1).max() <= 1e-12
        assert np.abs(m).max() <= 1.0
    doc = json.loads(a.to_json())
    assert doc["n_pixels"] == 300 and len(doc["rgb_corr"]) == 3


def test_correlation_preconditions():
    with pytest.raises(ValueError):
        channel_correlation([], 10, 0)
    with pytest.raises(ValueError):
        channel_correlation([np.zeros((2, 2, 3))], 1, 0)


def test_channel_change_stats_examples(rng):
    gt = rgb_to_lab(rng.uniform(0.2, 0.8, size=(6, 6, 3)))
    mask = np.zeros((6, 6))
    mask[1:4, 2:5] = 1.0
    assert channel_change_stats(gt, gt, mask) == (0.0, 0.0, 0.0)
    shifted = gt.copy()
    shifted[mask > 0.5, 0] += 10.0
    dL, da, db = channel_change_stats(shifted, gt, mask)
    assert abs(dL - 10.0) < 1e-12 and da == 0.0 and db == 0.0

    comp = rgb_to_lab(rng.uniform(size=(6, 6, 3)))
    soft = rng.uniform(size=(6, 6))
    ref = [0.0, 0.0, 0.0]
    count = 0
    for i in range(6):
        for j in range(6):
            if soft[i, j] > 0.5:
                count += 1
                for c in range(3):
                    ref[c] += abs(comp[i, j, c] - gt[i, j, c])
    got = channel_change_stats(comp, gt, soft)
    assert max(abs(g - r / count) for g, r in zip(got, ref)) <= 1e-12


def test_channel_change_stats_needs_foreground():
    lab = np.zeros((3, 3, 3))
    with pytest.raises(ValueError):
        channel_change_stats(lab, lab, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        channel_change_stats(lab, np.zeros((3, 4, 3)), np.ones((3, 3)))
