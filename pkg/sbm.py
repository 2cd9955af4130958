"""
Statistics-Based Masking
Auto-mask plus a percentile mask driven by an exponentially weighted histogram
of frame differences, maintained across training iterations.
"""
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

BINS = 256
STATS_MODES = ("histogram", "scalar")


class StatsError(ValueError):
    """Statistics state misuse (e.g. a percentile of an empty state)."""


@dataclass(frozen=True, eq=False)
class EwmaHistogramState:
    """EWMA of normalized 256-bin histograms of per-pixel frame differences."""
    bins: np.ndarray = field(default_factory=lambda: np.zeros(BINS))
    beta: float = 0.98
    initialized: bool = False
    updates: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise StatsError(f"beta must be in [0, 1), got {self.beta}")
        if len(self.bins) != BINS:
            raise StatsError(f"state needs {BINS} bins, got {len(self.bins)}")


def histogram_of(d: np.ndarray) -> np.ndarray:
    """Normalized histogram of values in [0, 1]; bin i covers [i/256, (i+1)/256), 1.0 lands in the last bin."""
    d = np.asarray(d, dtype=np.float64).ravel()
    if d.size == 0:
        raise StatsError("cannot histogram an empty difference map")
    index = np.clip(np.floor(d * BINS), 0, BINS - 1).astype(np.int64)
    counts = np.bincount(index, minlength=BINS)
    return counts / counts.sum()


def bin_centers() -> np.ndarray:
    return (np.arange(BINS) + 0.5) / BINS


def update_stats(state: EwmaHistogramState, d: np.ndarray) -> EwmaHistogramState:
    """Return the next state; the first update adopts the map's histogram directly."""
    hist = histogram_of(d)
    if not state.initialized:
        bins = hist
    else:
        bins = state.beta * state.bins + (1.0 - state.beta) * hist
    return replace(state, bins=bins, initialized=True, updates=state.updates + 1)


def percentile(state: EwmaHistogramState, epsilon: float) -> float:
    """Smallest bin center whose cumulative mass reaches epsilon/100 (epsilon=0: first occupied bin)."""
    if not state.initialized:
        raise StatsError("percentile: statistics state has not been updated yet")
    if not 0.0 <= epsilon <= 100.0:
        raise StatsError(f"epsilon must be in [0, 100], got {epsilon}")
    occupied = np.flatnonzero(state.bins > 0)
    if epsilon == 0:
        index = occupied[0]
    else:
        reached = np.flatnonzero(np.cumsum(state.bins) >= epsilon / 100.0 - 1e-12)
        index = reached[0] if reached.size else occupied[-1]
    return float(bin_centers()[index])


def auto_mask(pe_recon: np.ndarray, pe_identity: np.ndarray) -> np.ndarray:
    """1 where reconstruction beats the unwarped source (strictly)."""
    pe_recon, pe_identity = np.asarray(pe_recon), np.asarray(pe_identity)
    if pe_recon.shape != pe_identity.shape:
        raise ValueError(f"auto_mask: shapes {pe_recon.shape} and {pe_identity.shape} differ")
    return (pe_recon < pe_identity).astype(np.float32)


def pixel_difference(target: np.ndarray, source: np.ndarray, channel_axis: int = -1) -> np.ndarray:
    """Channel-mean absolute difference between two frames."""
    target, source = np.asarray(target), np.asarray(source)
    if target.shape != source.shape:
        raise ValueError(f"pixel_difference: shapes {target.shape} and {source.shape} differ")
    return np.abs(target.astype(np.float32) - source.astype(np.float32)).mean(axis=channel_axis)


def stats_mask(d: np.ndarray, threshold: float) -> np.ndarray:
    """1 where the difference strictly exceeds the threshold."""
    return (np.asarray(d) > threshold).astype(np.float32)


def combine(m_a: np.ndarray, m_s: np.ndarray) -> np.ndarray:
    m_a, m_s = np.asarray(m_a), np.asarray(m_s)
    if m_a.shape != m_s.shape:
        raise ValueError(f"combine: shapes {m_a.shape} and {m_s.shape} differ")
    return m_a * m_s


def save_state(state: EwmaHistogramState, path):
    """256 little-endian float64 bins, beta as float64, update counter as uint64."""
    payload = np.asarray(state.bins, dtype="<f8").tobytes() + struct.pack("<dQ", state.beta, state.updates)
    Path(path).write_bytes(payload)


def load_state(path) -> EwmaHistogramState:
    payload = Path(path).read_bytes()
    expected = BINS * 8 + 16
    if len(payload) != expected:
        raise StatsError(f"{path}: expected {expected} bytes of statistics, got {len(payload)}")
    bins = np.frombuffer(payload[:BINS * 8], dtype="<f8").astype(np.float64)
    beta, updates = struct.unpack("<dQ", payload[BINS * 8:])
    return EwmaHistogramState(bins=bins, beta=beta, initialized=updates > 0, updates=updates)


class StatsTracker:
    """Streaming source of the masking threshold. Subclasses pick the statistic."""

    def __init__(self, beta: float = 0.98, epsilon: float = 10.0):
        if not 0.0 <= epsilon <= 100.0:
            raise StatsError(f"epsilon must be in [0, 100], got {epsilon}")
        self.epsilon = epsilon
        self.state = EwmaHistogramState(beta=beta)

    def update(self, d: np.ndarray):
        self.state = update_stats(self.state, d)

    def threshold(self) -> float:
        raise NotImplementedError

    def mask(self, d: np.ndarray) -> np.ndarray:
        return stats_mask(d, self.threshold())


class HistogramPercentileTracker(StatsTracker):
    """Percentile of the EWMA histogram."""

    def threshold(self) -> float:
        return percentile(self.state, self.epsilon)


class ScalarPercentileTracker(StatsTracker):
    """EWMA of each map's own percentile value."""

    def __init__(self, beta: float = 0.98, epsilon: float = 10.0):
        super().__init__(beta, epsilon)
        self.value: Optional[float] = None

    def update(self, d: np.ndarray):
        super().update(d)
        current = float(np.percentile(np.asarray(d, dtype=np.float64), self.epsilon))
        beta = self.state.beta
        self.value = current if self.value is None else beta * self.value + (1.0 - beta) * current

    def threshold(self) -> float:
        if self.value is None:
            raise StatsError("threshold requested before any update")
        return self.value


def get_stats_tracker(mode: str, beta: float = 0.98, epsilon: float = 10.0) -> StatsTracker:
    """
    Factory function to get the tracker for a statistics mode.

    Args:
        mode: "histogram" or "scalar"
        beta: EWMA momentum
        epsilon: Percentile in [0, 100]

    Returns:
        StatsTracker instance
    """
    trackers = {
        "histogram": HistogramPercentileTracker,
        "scalar": ScalarPercentileTracker,
    }
    if mode not in trackers:
        raise StatsError(f"Unknown statistics mode '{mode}', expected one of {STATS_MODES}")
    return trackers[mode](beta, epsilon)
