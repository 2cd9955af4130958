"""
Mapping-Consistent Image Enhancement
Contrast-limited histogram equalization where one brightness lookup table,
built from a whole frame snippet, is applied to every frame in it.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

LEVELS = 256
HISTOGRAM_SOURCES = ("snippet", "target")


class MCIEError(ValueError):
    """Invalid enhancement input."""


@dataclass
class BrightnessHistogram:
    """Normalized frequencies of the L quantized brightness levels."""
    bins: np.ndarray

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.float64)
        if self.bins.ndim != 1 or np.any(self.bins < 0):
            raise MCIEError("Histogram bins must be a non-negative vector")
        if abs(float(self.bins.sum()) - 1.0) > 1e-9:
            raise MCIEError(f"Histogram must sum to 1, got {self.bins.sum():.12f}")

    @property
    def levels(self) -> int:
        return len(self.bins)


@dataclass
class BrightnessLUT:
    """Monotone level-to-level brightness mapping."""
    table: np.ndarray

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.int64)

    @property
    def levels(self) -> int:
        return len(self.table)

    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.table) >= 0))

    def save_text(self, path):
        """One output level per line, indexed by input level."""
        Path(path).write_text("\n".join(str(int(v)) for v in self.table) + "\n")

    @classmethod
    def identity(cls, levels: int = LEVELS) -> "BrightnessLUT":
        return cls(np.arange(levels))


def quantize(image: np.ndarray, levels: int = LEVELS) -> np.ndarray:
    """Round-half-up to integer levels: floor(v·(L−1) + 0.5)."""
    values = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(values * (levels - 1) + 0.5).astype(np.int64)


def snippet_histogram(frames: Sequence[np.ndarray], levels: int = LEVELS) -> BrightnessHistogram:
    """Joint histogram of every channel value of every frame."""
    if len(frames) == 0:
        raise MCIEError("snippet_histogram: empty frame list")
    counts = np.zeros(levels, dtype=np.int64)
    for frame in frames:
        counts += np.bincount(quantize(frame, levels).ravel(), minlength=levels)
    return BrightnessHistogram(counts / counts.sum())


def clip_redistribute(hist: BrightnessHistogram, sigma: float) -> BrightnessHistogram:
    """Clip every bin at sigma and spread the clipped excess evenly over all levels (single pass)."""
    if not sigma > 0:
        raise MCIEError(f"sigma must be positive, got {sigma}")
    f = hist.bins
    excess = float(np.maximum(f - sigma, 0.0).sum())
    return BrightnessHistogram(np.minimum(f, sigma) + excess / hist.levels)


def brightness_map(hist: BrightnessHistogram) -> BrightnessLUT:
    """Cumulative-distribution mapping stretched so the lowest occupied level goes to 0."""
    levels = hist.levels
    cdf = np.cumsum(hist.bins)
    occupied = np.flatnonzero(hist.bins > 0)
    if occupied.size == 0:
        return BrightnessLUT.identity(levels)
    cdf_min = cdf[occupied[0]]
    cdf_max = cdf[-1]
    span = cdf_max - cdf_min
    if span < 1e-12:
        return BrightnessLUT.identity(levels)
    scaled = (cdf - cdf_min) / span * (levels - 1)
    return BrightnessLUT(np.clip(np.floor(scaled + 0.5), 0, levels - 1))


def apply_lut(image: np.ndarray, lut: BrightnessLUT) -> np.ndarray:
    """Quantize, map, dequantize to v/(L−1)."""
    mapped = lut.table[quantize(image, lut.levels)]
    return (mapped / (lut.levels - 1)).astype(np.float32)


def snippet_lut(frames: Sequence[np.ndarray], sigma: float, levels: int = LEVELS,
                histogram_source: str = "snippet") -> BrightnessLUT:
    """
    Build the shared lookup table for a snippet.

    Args:
        frames: Target frame first, then its sources
        sigma: Clip limit as a fraction of pixels per level (inf disables clipping)
        levels: Brightness levels
        histogram_source: "snippet" pools all frames, "target" uses only the first

    Returns:
        BrightnessLUT applied to every frame
    """
    if histogram_source not in HISTOGRAM_SOURCES:
        raise MCIEError(f"Unknown histogram source '{histogram_source}', expected one of {HISTOGRAM_SOURCES}")
    if len(frames) == 0:
        raise MCIEError("snippet_lut: empty frame list")
    pool = frames if histogram_source == "snippet" else frames[:1]
    hist = snippet_histogram(pool, levels)
    if np.isfinite(sigma):
        hist = clip_redistribute(hist, sigma)
    return brightness_map(hist)


def enhance_snippet(frames: Sequence[np.ndarray], sigma: float, levels: int = LEVELS,
                    histogram_source: str = "snippet") -> List[np.ndarray]:
    lut = snippet_lut(frames, sigma, levels, histogram_source)
    return [apply_lut(frame, lut) for frame in frames]


def histogram_equalize(frames: Sequence[np.ndarray], levels: int = LEVELS) -> List[np.ndarray]:
    """Plain global equalization with a shared table (no clip limit)."""
    return enhance_snippet(frames, float("inf"), levels)


def enhance_batch(target: np.ndarray, sources: Sequence[np.ndarray], sigma: float,
                  histogram_source: str = "snippet",
                  levels: int = LEVELS) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Enhance N×C×H×W batches sample by sample; each sample gets its own snippet table."""
    enhanced_target = np.empty_like(target, dtype=np.float32)
    enhanced_sources = [np.empty_like(s, dtype=np.float32) for s in sources]
    for n in range(target.shape[0]):
        frames = [target[n]] + [s[n] for s in sources]
        lut = snippet_lut(frames, sigma, levels, histogram_source)
        enhanced_target[n] = apply_lut(target[n], lut)
        for out, source in zip(enhanced_sources, sources):
            out[n] = apply_lut(source[n], lut)
    return enhanced_target, enhanced_sources
