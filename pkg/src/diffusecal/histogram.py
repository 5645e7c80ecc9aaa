"""Histogram arithmetic: background subtraction, depth-window selection,
scalar patch response, and peak normalization.

The scalar patch response for pixel p is

    R = max over t in [lo, hi] of max(h[p, t] - bg[p, t], 0)

i.e. subtract the background histogram inside the window, clip negatives
to zero, then take the windowed maximum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Tuple

import numpy as np

from .errors import ConfigError, ConsistencyError, DegenerateMapError, NoSignalError

PATCH_PRESENT = "patch_present"
BACKGROUND = "background"

#: Default half-width, in bins, of the auto-selected response window.
DEFAULT_WINDOW_HALF_WIDTH = 3


@dataclass(frozen=True)
class HistogramCube:
    """Per-scan-point stack of P x T photon counts.

    counts is an int64 array; kind distinguishes the patch-present scan
    from the patch-removed background scan. Treat instances as immutable.
    """

    counts: np.ndarray
    scan_index: int
    kind: str

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2:
            raise ConsistencyError(f"histogram counts must be 2-D (P x T), got shape {counts.shape}")
        if np.any(counts < 0):
            raise ConsistencyError(f"negative count in histogram for scan {self.scan_index}")
        if self.kind not in (PATCH_PRESENT, BACKGROUND):
            raise ConsistencyError(f"unknown histogram kind {self.kind!r}")
        object.__setattr__(self, "counts", counts)

    @property
    def pixel_count(self) -> int:
        return self.counts.shape[0]

    @property
    def bin_count(self) -> int:
        return self.counts.shape[1]


@dataclass(frozen=True)
class BinWindow:
    """Inclusive histogram-bin window [lo, hi]."""

    lo: int
    hi: int

    def __post_init__(self) -> None:
        if self.lo < 0 or self.lo > self.hi:
            raise ConfigError(f"invalid bin window [{self.lo}, {self.hi}]")

    @property
    def width(self) -> int:
        return self.hi - self.lo + 1


def _check_pair(h: HistogramCube, bg: HistogramCube) -> None:
    if h.kind != PATCH_PRESENT or bg.kind != BACKGROUND:
        raise ConsistencyError(
            f"expected (patch_present, background) pair, got ({h.kind}, {bg.kind})"
        )
    if h.scan_index != bg.scan_index:
        raise ConsistencyError(
            f"scan index mismatch: patch cube {h.scan_index} vs background {bg.scan_index}"
        )
    if h.counts.shape != bg.counts.shape:
        raise ConsistencyError(
            f"histogram shape mismatch at scan {h.scan_index}: "
            f"{h.counts.shape} vs {bg.counts.shape}"
        )


def _check_window(window: BinWindow, bin_count: int) -> None:
    if window.hi >= bin_count:
        raise ConfigError(f"bin window [{window.lo}, {window.hi}] exceeds T={bin_count}")


def patch_responses(h: HistogramCube, bg: HistogramCube, window: BinWindow) -> np.ndarray:
    """Windowed background-subtracted maximum for every pixel at once."""
    _check_pair(h, bg)
    _check_window(window, h.bin_count)
    diff = h.counts[:, window.lo : window.hi + 1] - bg.counts[:, window.lo : window.hi + 1]
    return np.clip(diff, 0, None).max(axis=1).astype(np.float64)


def patch_response(h: HistogramCube, bg: HistogramCube, window: BinWindow, p: int) -> float:
    """Scalar patch response of pixel p for one scan point."""
    if not 0 <= p < h.pixel_count:
        raise IndexError(f"pixel index {p} out of range for P={h.pixel_count}")
    return float(patch_responses(h, bg, window)[p])


def auto_select_window(
    pairs: Iterable[Tuple[HistogramCube, HistogramCube]],
    half_width: int = DEFAULT_WINDOW_HALF_WIDTH,
) -> BinWindow:
    """Select the response window from the data itself.

    Accumulates d[t] = sum over (p, k) of max(h[p,t] - bg[p,t], 0) and
    centers the window on the first maximizing bin (smallest index wins
    ties), clamped to [0, T-1]. Deterministic for a given dataset.
    """
    if half_width < 0:
        raise ConfigError(f"half_width must be >= 0, got {half_width}")
    total = None
    bin_count = 0
    for h, bg in pairs:
        _check_pair(h, bg)
        diff = np.clip(h.counts - bg.counts, 0, None).sum(axis=0)
        if total is None:
            total = diff.astype(np.float64)
            bin_count = h.bin_count
        else:
            if h.bin_count != bin_count:
                raise ConsistencyError("histogram cubes disagree on bin count")
            total += diff
    if total is None:
        raise ConfigError("auto_select_window requires at least one histogram pair")
    if not np.any(total > 0):
        raise NoSignalError("no above-background signal in any bin; cannot select window")
    peak = int(np.argmax(total))  # argmax returns the first maximizing bin
    return BinWindow(lo=max(0, peak - half_width), hi=min(bin_count - 1, peak + half_width))


def peak_normalize(values: Mapping[int, float]) -> dict[int, float]:
    """Divide every value by the maximum so the peak equals 1.0.

    Raises DegenerateMapError when all values are zero (the normalization
    is undefined and silently returning zeros would hide upstream failures).
    """
    if not values:
        raise DegenerateMapError("cannot normalize an empty response set")
    peak = max(values.values())
    if peak <= 0.0:
        raise DegenerateMapError("cannot normalize an all-zero response set")
    return {k: v / peak for k, v in values.items()}
