"""Per-LiDAR-pixel response maps on the scan grid, support-region
estimation, and cross-run consistency metrics.

A ResponseMap stores the scalar patch response of one LiDAR pixel at every
scan-grid cell, together with a validity mask (cells whose patch detection
failed carry no measurement) and the detected RGB-plane anchor coordinates
of every valid cell. All metrics treat invalid cells as absence of
measurement, never as zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import GridSpec, snake_index_to_cell
from .errors import ConsistencyError, DatasetError, DegenerateMapError, UndefinedIouError
from .patch_detect import PatchDetection

#: Default relative threshold for support-mask extraction.
DEFAULT_SUPPORT_THRESHOLD = 0.05


@dataclass(frozen=True)
class ResponseMap:
    """rows x cols response values for one LiDAR pixel.

    values are >= 0 with 0 at invalid cells; anchors is (rows, cols, 2)
    holding the detected RGB (x, y) of each valid cell and NaN elsewhere.
    """

    pixel: int
    grid: GridSpec
    values: np.ndarray
    valid: np.ndarray
    anchors: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        anchors = np.asarray(self.anchors, dtype=np.float64)
        shape = (self.grid.rows, self.grid.cols)
        if values.shape != shape or valid.shape != shape or anchors.shape != shape + (2,):
            raise ConsistencyError(
                f"map arrays do not match grid {self.grid.cols}x{self.grid.rows}: "
                f"values {values.shape}, valid {valid.shape}, anchors {anchors.shape}"
            )
        if np.any(values < 0):
            raise ConsistencyError(f"negative response value in map for pixel {self.pixel}")
        if np.any(values[~valid] != 0):
            raise ConsistencyError("invalid cells must carry value 0")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "anchors", anchors)

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())


@dataclass(frozen=True)
class SupportMask:
    """Thresholded effective-support cells of one pixel's map."""

    pixel: int
    grid: GridSpec
    mask: np.ndarray

    @property
    def cell_count(self) -> int:
        return int(self.mask.sum())


@dataclass
class PixelComparison:
    """Per-pixel consistency metrics; None marks an undefined entry."""

    pixel: int
    iou: float | None
    centroid_displacement: float | None
    cosine: float | None
    note: str = ""


@dataclass
class ConsistencyReport:
    """Cross-run agreement of two sets of peak-normalized maps."""

    pixel_count: int
    grid: GridSpec
    rel_threshold: float
    pixels: list[PixelComparison] = field(default_factory=list)
    iou_mean: float = float("nan")
    iou_std: float = float("nan")
    displacement_mean: float = float("nan")
    displacement_std: float = float("nan")
    cosine_mean: float = float("nan")
    cosine_std: float = float("nan")
    undefined_count: int = 0
    invalid_cells_a: int = 0
    invalid_cells_b: int = 0


def assemble_map(
    responses: Mapping[int, float],
    detections: Sequence[PatchDetection],
    grid: GridSpec,
    pixel: int,
) -> ResponseMap:
    """Place per-scan-point responses onto the snake-ordered grid.

    Cells whose detection is invalid are masked out with value 0; anchors
    are copied from the detections. Both inputs must cover scan indices
    0..K-1 exactly.
    """
    k_total = grid.point_count
    by_index = {d.scan_index: d for d in detections}
    wanted = set(range(k_total))
    missing = sorted((wanted - set(responses)) | (wanted - set(by_index)))
    if missing:
        shown = ", ".join(str(m) for m in missing[:10])
        more = "" if len(missing) <= 10 else f" (+{len(missing) - 10} more)"
        raise DatasetError(f"missing scan index: {shown}{more}")

    values = np.zeros((grid.rows, grid.cols))
    valid = np.zeros((grid.rows, grid.cols), dtype=bool)
    anchors = np.full((grid.rows, grid.cols, 2), np.nan)
    for k in range(k_total):
        row, col = snake_index_to_cell(k, grid)
        det = by_index[k]
        if det.valid and det.center is not None:
            values[row, col] = float(responses[k])
            valid[row, col] = True
            anchors[row, col] = det.center
    return ResponseMap(pixel=pixel, grid=grid, values=values, valid=valid, anchors=anchors)


def peak_normalize_map(m: ResponseMap) -> ResponseMap:
    """Scale so that the maximum over valid cells is exactly 1.0."""
    if m.valid_count == 0:
        raise DegenerateMapError(f"pixel {m.pixel}: no valid cells to normalize")
    peak = float(m.values[m.valid].max())
    if peak <= 0.0:
        raise DegenerateMapError(f"pixel {m.pixel}: all-zero map cannot be normalized")
    return ResponseMap(
        pixel=m.pixel,
        grid=m.grid,
        values=m.values / peak,
        valid=m.valid,
        anchors=m.anchors,
        normalized=True,
    )


def median_filter_valid(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """3x3 median over valid cells only; invalid neighbors are excluded
    from each window and invalid cells stay 0 in the output."""
    rows, cols = values.shape
    out = np.zeros_like(values, dtype=np.float64)
    for r in range(rows):
        r0, r1 = max(0, r - 1), min(rows, r + 2)
        for c in range(cols):
            if not valid[r, c]:
                continue
            c0, c1 = max(0, c - 1), min(cols, c + 2)
            window = values[r0:r1, c0:c1]
            mask = valid[r0:r1, c0:c1]
            out[r, c] = float(np.median(window[mask]))
    return out


def support_mask(m: ResponseMap, rel_threshold: float = DEFAULT_SUPPORT_THRESHOLD) -> SupportMask:
    """Estimate the effective support: median-filter the map, then keep
    cells at or above rel_threshold times the filtered peak.

    The median filter suppresses isolated spikes, so a map whose only
    signal is a single-cell outlier is reported as degenerate.
    """
    if not 0.0 < rel_threshold < 1.0:
        raise DegenerateMapError(f"rel_threshold must be in (0, 1), got {rel_threshold}")
    if m.valid_count == 0:
        raise DegenerateMapError(f"pixel {m.pixel}: no valid cells")
    filtered = median_filter_valid(m.values, m.valid)
    peak = float(filtered[m.valid].max())
    if peak <= 0.0:
        raise DegenerateMapError(f"pixel {m.pixel}: map is all-zero after median filtering")
    mask = m.valid & (filtered >= rel_threshold * peak)
    return SupportMask(pixel=m.pixel, grid=m.grid, mask=mask)


def centroid(m: ResponseMap) -> tuple[float, float]:
    """Response-weighted mean of the anchor coordinates, in RGB pixels."""
    weights = m.values[m.valid]
    total = float(weights.sum())
    if m.valid_count == 0 or total <= 0.0:
        raise DegenerateMapError(f"pixel {m.pixel}: centroid of an all-zero map is undefined")
    anchors = m.anchors[m.valid]
    x = float((weights * anchors[:, 0]).sum() / total)
    y = float((weights * anchors[:, 1]).sum() / total)
    return x, y


def iou(a: SupportMask, b: SupportMask) -> float:
    """Intersection-over-union of two support masks on the same grid.

    Two empty masks are rejected rather than scored 1.0: perfect agreement
    on nothing would mask an upstream failure.
    """
    if a.grid != b.grid:
        raise ConsistencyError(f"grid mismatch: {a.grid} vs {b.grid}")
    union = int(np.logical_or(a.mask, b.mask).sum())
    if union == 0:
        raise UndefinedIouError("both support masks are empty; IoU undefined")
    inter = int(np.logical_and(a.mask, b.mask).sum())
    return inter / union


def cosine_similarity(a: ResponseMap, b: ResponseMap) -> float:
    """Cosine of the two maps over cells valid in both.

    Requires peak-normalized inputs; nonnegative values put the result in
    [0, 1].
    """
    if a.grid != b.grid:
        raise ConsistencyError(f"grid mismatch: {a.grid} vs {b.grid}")
    if not (a.normalized and b.normalized):
        raise ConsistencyError("cosine_similarity requires peak-normalized maps")
    joint = a.valid & b.valid
    if not joint.any():
        raise DegenerateMapError("no jointly valid cells")
    va, vb = a.values[joint], b.values[joint]
    naa, nbb = float(np.dot(va, va)), float(np.dot(vb, vb))
    if naa <= 0.0 or nbb <= 0.0:
        raise DegenerateMapError("zero-norm map on the jointly valid cells")
    # dot/sqrt(dot*dot) keeps the self-comparison exactly 1.0 in floats.
    return min(1.0, float(np.dot(va, vb)) / math.sqrt(naa * nbb))


def _mean_std(values: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation; std is 0.0 below two entries."""
    if not values:
        return float("nan"), float("nan")
    mean = sum(values) / len(values)
    if len(values) < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(var)


def compare_modes(
    set_a: Sequence[ResponseMap],
    set_b: Sequence[ResponseMap],
    rel_threshold: float = DEFAULT_SUPPORT_THRESHOLD,
) -> ConsistencyReport:
    """Per-pixel IoU, centroid displacement, and cosine similarity between
    two sets of peak-normalized maps, with mean +/- sample std aggregates.

    Per-pixel degeneracies (empty supports, all-zero maps) become
    undefined entries that are excluded from the aggregates and counted.
    """
    if len(set_a) != len(set_b):
        raise ConsistencyError(f"pixel count mismatch: {len(set_a)} vs {len(set_b)}")
    if not set_a:
        raise ConsistencyError("cannot compare empty map sets")
    grid = set_a[0].grid
    for m in list(set_a) + list(set_b):
        if m.grid != grid:
            raise ConsistencyError(f"grid mismatch: {m.grid} vs {grid}")
        if not m.normalized:
            raise ConsistencyError(f"pixel {m.pixel}: compare_modes requires normalized maps")

    report = ConsistencyReport(pixel_count=len(set_a), grid=grid, rel_threshold=rel_threshold)
    report.invalid_cells_a = int(sum(m.grid.point_count - m.valid_count for m in set_a))
    report.invalid_cells_b = int(sum(m.grid.point_count - m.valid_count for m in set_b))

    ious: list[float] = []
    displacements: list[float] = []
    cosines: list[float] = []
    for p, (ma, mb) in enumerate(zip(set_a, set_b)):
        entry = PixelComparison(pixel=p, iou=None, centroid_displacement=None, cosine=None)
        try:
            pixel_iou = iou(support_mask(ma, rel_threshold), support_mask(mb, rel_threshold))
            ca, cb = centroid(ma), centroid(mb)
            displacement = math.hypot(ca[0] - cb[0], ca[1] - cb[1])
            cosine = cosine_similarity(ma, mb)
        except DegenerateMapError as err:
            entry.note = str(err)
            report.undefined_count += 1
        else:
            entry.iou, entry.centroid_displacement, entry.cosine = pixel_iou, displacement, cosine
            ious.append(pixel_iou)
            displacements.append(displacement)
            cosines.append(cosine)
        report.pixels.append(entry)

    report.iou_mean, report.iou_std = _mean_std(ious)
    report.displacement_mean, report.displacement_std = _mean_std(displacements)
    report.cosine_mean, report.cosine_std = _mean_std(cosines)
    return report
