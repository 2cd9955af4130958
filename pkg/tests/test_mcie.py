"""
Contrast-limited equalization with one lookup table per snippet.
"""
import numpy as np
import pytest

import mcie
from mcie import (BrightnessHistogram, BrightnessLUT, MCIEError, apply_lut, brightness_map,
                  clip_redistribute, enhance_batch, enhance_snippet, histogram_equalize, quantize,
                  snippet_histogram, snippet_lut)
from synthscene import DegradeParams, degrade, random_scene, random_trajectory, render_triplet


def reference_lut(frames, sigma, levels=256):
    """Plain-loop contrast-limited equalization, written without numpy vector ops."""
    counts = [0] * levels
    total = 0
    for frame in frames:
        for v in np.asarray(frame, dtype=np.float64).ravel().tolist():
            v = min(max(v, 0.0), 1.0)
            counts[int(np.floor(v * (levels - 1) + 0.5))] += 1
            total += 1
    freq = [c / total for c in counts]
    excess = 0.0
    for f in freq:
        if f > sigma:
            excess += f - sigma
    clipped = [min(f, sigma) + excess / levels for f in freq]
    cdf, running = [], 0.0
    for f in clipped:
        running += f
        cdf.append(running)
    cdf_min = next(c for c, f in zip(cdf, clipped) if f > 0)
    span = cdf[-1] - cdf_min
    if span < 1e-12:
        return list(range(levels))
    return [min(max(int(np.floor((c - cdf_min) / span * (levels - 1) + 0.5)), 0), levels - 1) for c in cdf]


def test_quantize_rounds_half_up():
    np.testing.assert_array_equal(quantize(np.array([0.0, 0.5, 1.0, 2.4 / 255, -0.2, 1.3])),
                                  [0, 128, 255, 2, 0, 255])


def test_constant_image_histogram():
    hist = snippet_histogram([np.full((4, 4, 3), 0.5)])
    assert hist.bins[128] == 1.0
    assert hist.bins.sum() == 1.0


def test_black_and_white_frames_split_mass():
    hist = snippet_histogram([np.zeros((3, 3, 3)), np.ones((3, 3, 3))])
    assert hist.bins[0] == 0.5 and hist.bins[255] == 0.5


def test_histogram_matches_counting_oracle(rng):
    frame = rng.uniform(0, 1, (8, 8, 3))
    hist = snippet_histogram([frame])
    expected = np.zeros(256)
    for v in frame.ravel():
        expected[int(np.floor(v * 255 + 0.5))] += 1
    np.testing.assert_array_equal(hist.bins, expected / expected.sum())


def test_empty_snippet_is_rejected():
    with pytest.raises(MCIEError):
        snippet_histogram([])
    with pytest.raises(MCIEError):
        snippet_lut([], 0.008)


def test_histogram_must_be_normalized():
    with pytest.raises(MCIEError):
        BrightnessHistogram(np.full(256, 0.5))


def test_clip_redistribute_two_bins():
    bins = np.zeros(256)
    bins[10], bins[200] = 0.9, 0.1
    out = clip_redistribute(BrightnessHistogram(bins), 0.5)
    assert out.bins[10] == pytest.approx(0.5 + 0.4 / 256, abs=1e-15)
    assert out.bins[200] == pytest.approx(0.1 + 0.4 / 256, abs=1e-15)
    assert out.bins[0] == pytest.approx(0.4 / 256, abs=1e-15)
    assert out.bins.sum() == pytest.approx(1.0, abs=1e-9)


def test_clip_above_max_leaves_histogram_unchanged(rng):
    hist = snippet_histogram([rng.uniform(0, 1, (8, 8, 3))])
    np.testing.assert_array_equal(clip_redistribute(hist, float(hist.bins.max())).bins, hist.bins)


def test_uniform_histogram_survives_clipping():
    uniform = BrightnessHistogram(np.full(256, 1 / 256))
    np.testing.assert_allclose(clip_redistribute(uniform, 1 / 256).bins, uniform.bins, atol=1e-15)
    np.testing.assert_allclose(clip_redistribute(uniform, 0.3).bins, uniform.bins, atol=1e-15)


def test_clip_rejects_non_positive_sigma():
    with pytest.raises(MCIEError):
        clip_redistribute(BrightnessHistogram(np.full(256, 1 / 256)), 0.0)


def test_two_level_map_stretches_to_full_range():
    bins = np.zeros(256)
    bins[40], bins[90] = 0.5, 0.5
    lut = brightness_map(BrightnessHistogram(bins))
    assert lut.table[40] == 0
    assert lut.table[90] == 255
    assert lut.is_monotone()


def test_uniform_map_is_near_identity():
    lut = brightness_map(BrightnessHistogram(np.full(256, 1 / 256)))
    assert np.max(np.abs(lut.table - np.arange(256))) <= 1


def test_single_level_map_is_identity():
    bins = np.zeros(256)
    bins[77] = 1.0
    np.testing.assert_array_equal(brightness_map(BrightnessHistogram(bins)).table, np.arange(256))


def test_lut_matches_reference_on_gray_image():
    frame = np.tile((np.arange(16, dtype=np.float64).reshape(4, 4) * 7 + 20) / 255.0, (3, 1, 1)).transpose(1, 2, 0)
    lut = snippet_lut([frame], 0.008)
    np.testing.assert_array_equal(lut.table, reference_lut([frame], 0.008))


@pytest.mark.parametrize("sigma", [0.004, 0.008, 0.05])
def test_lut_matches_reference_on_random_snippets(rng, sigma):
    frames = [np.power(rng.uniform(0, 1, (8, 8, 3)), 2.2) for _ in range(3)]
    np.testing.assert_array_equal(snippet_lut(frames, sigma).table, reference_lut(frames, sigma))


def test_lut_is_monotone_with_anchored_ends(rng):
    frames = [rng.uniform(0.1, 0.4, (8, 8, 3)) for _ in range(3)]
    lut = snippet_lut(frames, 0.008)
    assert lut.is_monotone()
    assert lut.table[255] == 255
    first = int(np.flatnonzero(clip_redistribute(snippet_histogram(frames), 0.008).bins > 0)[0])
    assert lut.table[first] == 0


def test_shared_brightness_maps_identically_across_frames(rng):
    target = rng.uniform(0, 0.3, (6, 6, 3))
    source = rng.uniform(0, 0.3, (6, 6, 3))
    source[2, 3] = target[1, 1]
    out_target, out_source = enhance_snippet([target, source], 0.008)
    np.testing.assert_array_equal(out_source[2, 3], out_target[1, 1])


def test_equalized_snippet_is_nearly_unchanged():
    frame = np.repeat((np.arange(256, dtype=np.float64) / 255.0).reshape(16, 16, 1), 3, axis=2)
    out = enhance_snippet([frame], 0.008)[0]
    assert np.max(np.abs(out - frame)) <= 1.0 / 255 + 1e-6


def test_infinite_sigma_is_plain_equalization(rng):
    frames = [rng.uniform(0, 0.5, (8, 8, 3)) for _ in range(2)]
    plain = histogram_equalize(frames)
    huge = enhance_snippet(frames, 1e9)
    for a, b in zip(plain, huge):
        np.testing.assert_array_equal(a, b)


def test_dark_snippet_gets_brighter():
    scene = random_scene(5, "street", 32, 32)
    center, motion = random_trajectory(6)
    triplet = render_triplet(scene, center, motion)
    params = DegradeParams(gamma=2.2, gain_jitter=(0.6, 0.6), noise_sigma=0.005)
    dark = [degrade(frame, params, 10 + i) for i, frame in enumerate(triplet.frames)]
    enhanced = enhance_snippet(dark, 0.008)
    assert np.mean(enhanced) > np.mean(dark)


def _relative_gap(a, b):
    mu_a, mu_b = float(np.mean(a)), float(np.mean(b))
    return abs(mu_a - mu_b) / (mu_a + mu_b)


def test_shared_table_narrows_relative_brightness_gap():
    params = DegradeParams(gamma=2.2, gain_jitter=(0.8, 1.2), noise_sigma=0.01)
    narrowed = 0
    for seed in range(100):
        scene = random_scene(seed, "street", 32, 32)
        center, motion = random_trajectory(seed + 1000)
        frames = render_triplet(scene, center, motion).frames[:2]
        dark = [degrade(frame, params, 2 * seed + i) for i, frame in enumerate(frames)]
        enhanced = enhance_snippet(dark, 0.008)
        narrowed += _relative_gap(*enhanced) < _relative_gap(*dark)
    assert narrowed >= 90


def test_target_histogram_source_ignores_sources(rng):
    target = rng.uniform(0, 0.2, (6, 6, 3))
    bright = rng.uniform(0.8, 1.0, (6, 6, 3))
    assert snippet_lut([target, bright], 0.008, histogram_source="target").table.tolist() == \
        snippet_lut([target], 0.008).table.tolist()
    with pytest.raises(MCIEError):
        snippet_lut([target], 0.008, histogram_source="sources")


def test_enhance_batch_uses_one_table_per_sample(rng):
    target = rng.uniform(0, 0.3, (2, 3, 8, 8)).astype(np.float32)
    sources = [rng.uniform(0, 0.3, (2, 3, 8, 8)).astype(np.float32) for _ in range(2)]
    out_target, out_sources = enhance_batch(target, sources, 0.008)
    for n in range(2):
        frames = [target[n]] + [s[n] for s in sources]
        expected = enhance_snippet(frames, 0.008)
        np.testing.assert_array_equal(out_target[n], expected[0])
        for out, exp in zip(out_sources, expected[1:]):
            np.testing.assert_array_equal(out[n], exp)


def test_apply_lut_dequantizes(rng):
    out = apply_lut(np.array([0.0, 0.5, 1.0]), BrightnessLUT.identity())
    np.testing.assert_allclose(out, [0.0, 128 / 255, 1.0], rtol=1e-6)
    assert out.dtype == np.float32


def test_lut_text_file(tmp_path):
    path = tmp_path / "lut.txt"
    BrightnessLUT.identity(mcie.LEVELS).save_text(path)
    lines = path.read_text().splitlines()
    assert len(lines) == 256
    assert lines[0] == "0" and lines[-1] == "255"
