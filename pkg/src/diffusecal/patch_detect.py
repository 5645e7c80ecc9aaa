"""Retroreflective-patch localization via a gradient-directed circle Hough
transform, implemented from scratch on numpy.

Grayscale images are plain 2-D float arrays with intensities in [0, 1].
Each edge pixel votes for circle centers at distance r along +/- its
gradient direction for every candidate radius, so the accumulator costs
O(edges x radii) instead of sweeping all angles. Candidates are ranked by
(votes desc, radius asc, cy asc, cx asc) - a strict total order, so
identical inputs always produce identical candidate lists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ConsistencyError

# Rec. 601 luminance weights.
_LUMA_R, _LUMA_G, _LUMA_B = 0.299, 0.587, 0.114

# Absolute floor for edge magnitudes. The relative gradient threshold alone
# would promote float-level ripple (the blur's summed-area table is not
# exactly constant on constant images) to "edges" on featureless frames;
# any real edge exceeds this by orders of magnitude.
_MIN_EDGE_MAGNITUDE = 1e-6


@dataclass(frozen=True)
class HoughParams:
    """Detector tuning. Defaults suit a small bright patch spanning a
    handful of pixels; all values are CLI-overridable."""

    r_min: int = 3
    r_max: int = 15
    gradient_threshold: float = 0.25
    vote_threshold: int = 8
    blur_radius: int = 1

    def __post_init__(self) -> None:
        if not 1 <= self.r_min <= self.r_max:
            raise ConfigError(f"need 1 <= r_min <= r_max, got [{self.r_min}, {self.r_max}]")
        if not 0.0 < self.gradient_threshold <= 1.0:
            raise ConfigError(f"gradient_threshold must be in (0, 1], got {self.gradient_threshold}")
        if self.vote_threshold < 0:
            raise ConfigError(f"vote_threshold must be >= 0, got {self.vote_threshold}")
        if self.blur_radius < 0:
            raise ConfigError(f"blur_radius must be >= 0, got {self.blur_radius}")


@dataclass(frozen=True)
class CircleCandidate:
    """One accumulator cell: integer center, radius, and vote count."""

    cx: int
    cy: int
    radius: int
    votes: int


@dataclass(frozen=True)
class PatchDetection:
    """Patch location in one RGB frame. When valid is False the patch was
    not found and center/radius are None."""

    scan_index: int
    center: tuple[float, float] | None
    radius: float | None
    votes: int
    valid: bool

    @classmethod
    def invalid(cls, scan_index: int, votes: int = 0) -> "PatchDetection":
        return cls(scan_index=scan_index, center=None, radius=None, votes=votes, valid=False)


def to_grayscale(frame: np.ndarray) -> np.ndarray:
    """Convert an RGB frame to a [0, 1] luminance image.

    uint8 input is scaled by 1/255; float input is assumed to already be
    in [0, 1] and is clipped.
    """
    arr = np.asarray(frame)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ConsistencyError(f"expected a nonempty H x W x 3 frame, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = np.clip(arr.astype(np.float64), 0.0, 1.0)
    gray = _LUMA_R * arr[:, :, 0] + _LUMA_G * arr[:, :, 1] + _LUMA_B * arr[:, :, 2]
    return np.clip(gray, 0.0, 1.0)


def box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    """Mean filter with a (2r+1)^2 window and edge-replicate borders."""
    if radius < 0:
        raise ConfigError(f"blur radius must be >= 0, got {radius}")
    if radius == 0:
        return np.asarray(img, dtype=np.float64).copy()
    w = 2 * radius + 1
    padded = np.pad(np.asarray(img, dtype=np.float64), radius, mode="edge")
    # Summed-area table with a zero row/col prepended so window sums are
    # four lookups.
    sat = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1))
    np.cumsum(padded, axis=0, out=sat[1:, 1:])
    np.cumsum(sat[1:, 1:], axis=1, out=sat[1:, 1:])
    sums = sat[w:, w:] - sat[:-w, w:] - sat[w:, :-w] + sat[:-w, :-w]
    return sums / float(w * w)


def gradient_field(img: np.ndarray, blur_radius: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Box-blur then 3x3 Sobel. Returns (magnitude, direction) arrays.

    Direction is atan2(gy, gx) with x along columns and y along rows
    (increasing downward). Borders use edge-replicate sampling.
    """
    smooth = box_blur(img, blur_radius)
    p = np.pad(smooth, 1, mode="edge")
    gx = (
        (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2])
    )
    gy = (
        (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:])
    )
    magnitude = np.hypot(gx, gy)
    direction = np.arctan2(gy, gx)
    return magnitude, direction


def _vote_accumulator(
    magnitude: np.ndarray, direction: np.ndarray, params: HoughParams
) -> tuple[np.ndarray, np.ndarray]:
    """Fill the (radius, cy, cx) vote accumulator. Returns (acc, radii)."""
    height, width = magnitude.shape
    if params.r_max >= min(width, height) / 2:
        raise ConfigError(
            f"r_max={params.r_max} too large for a {width}x{height} image"
        )
    radii = np.arange(params.r_min, params.r_max + 1)
    acc = np.zeros((radii.size, height, width), dtype=np.int32)

    peak = float(magnitude.max(initial=0.0))
    if peak <= _MIN_EDGE_MAGNITUDE:
        return acc, radii
    cutoff = max(params.gradient_threshold * peak, _MIN_EDGE_MAGNITUDE)
    edge_ys, edge_xs = np.nonzero(magnitude >= cutoff)
    if edge_ys.size == 0:
        return acc, radii
    theta = direction[edge_ys, edge_xs]
    ux, uy = np.cos(theta), np.sin(theta)
    for ri, r in enumerate(radii):
        for sign in (1.0, -1.0):
            cx = np.rint(edge_xs + sign * r * ux).astype(np.int64)
            cy = np.rint(edge_ys + sign * r * uy).astype(np.int64)
            ok = (cx >= 0) & (cx < width) & (cy >= 0) & (cy < height)
            np.add.at(acc[ri], (cy[ok], cx[ok]), 1)
    return acc, radii


def _ranked_candidates(acc: np.ndarray, radii: np.ndarray) -> list[CircleCandidate]:
    """Extract all voted cells ranked by (votes desc, r asc, cy asc, cx asc)."""
    ri, cy, cx = np.nonzero(acc)
    if ri.size == 0:
        return []
    votes = acc[ri, cy, cx]
    order = np.lexsort((cx, cy, radii[ri], -votes))
    return [
        CircleCandidate(cx=int(cx[i]), cy=int(cy[i]), radius=int(radii[ri[i]]), votes=int(votes[i]))
        for i in order
    ]


def hough_circles(
    magnitude: np.ndarray, direction: np.ndarray, params: HoughParams
) -> list[CircleCandidate]:
    """Rank circle candidates from a gradient field.

    An image without edge pixels yields an empty list, not an error.
    """
    acc, radii = _vote_accumulator(magnitude, direction, params)
    return _ranked_candidates(acc, radii)


def _refine_center(acc_slice: np.ndarray, cx: int, cy: int) -> tuple[float, float]:
    """Vote-weighted centroid over the 3x3 neighborhood of the peak cell."""
    height, width = acc_slice.shape
    y0, y1 = max(0, cy - 1), min(height, cy + 2)
    x0, x1 = max(0, cx - 1), min(width, cx + 2)
    block = acc_slice[y0:y1, x0:x1].astype(np.float64)
    total = block.sum()
    if total <= 0.0:
        return float(cx), float(cy)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return float((xs * block).sum() / total), float((ys * block).sum() / total)


def detect_patch(
    frame: np.ndarray, params: HoughParams = HoughParams(), scan_index: int = 0
) -> PatchDetection:
    """Locate the patch in one RGB frame.

    Returns an invalid PatchDetection (never raises) when the frame has no
    edges or the best candidate falls below vote_threshold.
    """
    gray = to_grayscale(frame)
    magnitude, direction = gradient_field(gray, params.blur_radius)
    acc, radii = _vote_accumulator(magnitude, direction, params)
    candidates = _ranked_candidates(acc, radii)
    if not candidates:
        return PatchDetection.invalid(scan_index)
    best = candidates[0]
    if best.votes < params.vote_threshold:
        return PatchDetection.invalid(scan_index, votes=best.votes)
    slice_index = best.radius - params.r_min
    center = _refine_center(acc[slice_index], best.cx, best.cy)
    return PatchDetection(
        scan_index=scan_index,
        center=center,
        radius=float(best.radius),
        votes=best.votes,
        valid=True,
    )
