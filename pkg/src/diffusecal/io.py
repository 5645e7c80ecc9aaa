"""Dataset and result serialization.

On-disk dataset layout, shared by the simulator and real-capture
converters (one directory per dataset):

    manifest.json               versioned manifest (schema below)
    frames/frame_00000.png      patch-present RGB frames, 8-bit lossless
    hist/hist_00000.csv         patch-present histograms, P rows x T int columns
    bg_frames/frame_00000.png   patch-removed (background) frames
    bg_hist/hist_00000.csv      background histograms
    gt/                         ground-truth kernel samples (simulator only)

The manifest is JSON with a declared format_version; paths are relative
to the manifest's directory. Histogram CSVs hold plain integers.
Response-map CSVs serialize floats with 10 significant digits so a reload
agrees with the saved values within 1e-9 relative.
"""

from __future__ import annotations

import io as _stdio
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from PIL import Image

from .core import GridSpec, RgbFrameSpec, SensorConfig, snake_cell_to_index
from .errors import ConsistencyError, DatasetError
from .histogram import BACKGROUND, PATCH_PRESENT, BinWindow, HistogramCube
from .patch_detect import PatchDetection
from .response_map import ConsistencyReport, ResponseMap, SupportMask

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT_VERSION = 1
MAPS_FORMAT_VERSION = 1

FRAMES_DIR = "frames"
HIST_DIR = "hist"
BG_FRAMES_DIR = "bg_frames"
BG_HIST_DIR = "bg_hist"
GT_DIR = "gt"

SUMMARY_NAME = "summary.json"
DETECTIONS_NAME = "detections.csv"

FLOAT_FMT = "%.10g"


def frame_name(k: int) -> str:
    return f"frame_{k:05d}.png"


def hist_name(k: int) -> str:
    return f"hist_{k:05d}.csv"


@dataclass(frozen=True)
class ScanEntry:
    index: int
    frame_path: str
    hist_path: str


@dataclass
class DatasetManifest:
    """Validated description of one scan dataset (both scans)."""

    sensor: SensorConfig
    grid: GridSpec
    frame: RgbFrameSpec
    scans: list[ScanEntry]
    background: list[ScanEntry]
    window: BinWindow | None = None
    provenance: str = ""
    ground_truth_dir: str | None = None
    format_version: int = MANIFEST_FORMAT_VERSION

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": self.format_version,
            "sensor": self.sensor.to_dict(),
            "grid": self.grid.to_dict(),
            "frame": self.frame.to_dict(),
            "window": None if self.window is None else {"lo": self.window.lo, "hi": self.window.hi},
            "provenance": self.provenance,
            "ground_truth_dir": self.ground_truth_dir,
            "scans": [
                {"index": e.index, "frame_path": e.frame_path, "hist_path": e.hist_path}
                for e in self.scans
            ],
            "background": [
                {"index": e.index, "frame_path": e.frame_path, "hist_path": e.hist_path}
                for e in self.background
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DatasetManifest":
        try:
            version = int(d["format_version"])
            if version != MANIFEST_FORMAT_VERSION:
                raise DatasetError(
                    f"unsupported format_version {version}, expected {MANIFEST_FORMAT_VERSION}"
                )
            window = d.get("window")
            return cls(
                format_version=version,
                sensor=SensorConfig.from_dict(d["sensor"]),
                grid=GridSpec.from_dict(d["grid"]),
                frame=RgbFrameSpec.from_dict(d["frame"]),
                window=None if window is None else BinWindow(int(window["lo"]), int(window["hi"])),
                provenance=str(d.get("provenance", "")),
                ground_truth_dir=d.get("ground_truth_dir"),
                scans=[
                    ScanEntry(int(e["index"]), str(e["frame_path"]), str(e["hist_path"]))
                    for e in d["scans"]
                ],
                background=[
                    ScanEntry(int(e["index"]), str(e["frame_path"]), str(e["hist_path"]))
                    for e in d["background"]
                ],
            )
        except (KeyError, TypeError, ValueError) as err:
            raise DatasetError(f"malformed manifest: {err}") from err


def write_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_manifest(path: Path | str) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise DatasetError(f"manifest parse error: {path}: {err}") from err
    return DatasetManifest.from_dict(payload)


def encode_png(rgb: np.ndarray) -> bytes:
    """Deterministic lossless PNG encoding of an 8-bit RGB array."""
    arr = np.asarray(rgb, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ConsistencyError(f"expected H x W x 3 uint8 image, got shape {arr.shape}")
    buf = _stdio.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_image(path: Path | str, rgb: np.ndarray) -> None:
    Path(path).write_bytes(encode_png(rgb))


def read_image(path: Path | str) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def write_histogram_csv(path: Path | str, counts: np.ndarray) -> None:
    np.savetxt(path, np.asarray(counts, dtype=np.int64), fmt="%d", delimiter=",")


def read_histogram_csv(path: Path | str) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    try:
        return np.loadtxt(path, dtype=np.int64, delimiter=",", ndmin=2)
    except ValueError as err:
        raise DatasetError(f"invalid histogram value in {path}: {err}") from err


@dataclass
class Dataset:
    """Loaded, validated dataset. Histograms are held in memory; frames
    are loaded on demand (they can dwarf the histograms)."""

    root: Path
    manifest: DatasetManifest
    cubes: list[HistogramCube]
    bg_cubes: list[HistogramCube]

    @property
    def point_count(self) -> int:
        return self.manifest.grid.point_count

    def frame_path(self, k: int) -> Path:
        return self.root / self.manifest.scans[k].frame_path

    def bg_frame_path(self, k: int) -> Path:
        return self.root / self.manifest.background[k].frame_path

    def load_frame(self, k: int) -> np.ndarray:
        return read_image(self.frame_path(k))

    def load_bg_frame(self, k: int) -> np.ndarray:
        return read_image(self.bg_frame_path(k))


def _check_entries(entries: Sequence[ScanEntry], k_total: int, which: str) -> list[ScanEntry]:
    seen: dict[int, ScanEntry] = {}
    for e in entries:
        if e.index in seen:
            raise DatasetError(f"duplicate scan index {e.index} in {which}")
        seen[e.index] = e
    missing = sorted(set(range(k_total)) - seen.keys())
    if missing:
        shown = ", ".join(str(m) for m in missing[:10])
        more = "" if len(missing) <= 10 else f" (+{len(missing) - 10} more)"
        raise DatasetError(f"missing scan index: {shown}{more} in {which}")
    extra = sorted(seen.keys() - set(range(k_total)))
    if extra:
        raise DatasetError(f"unexpected scan index {extra[0]} in {which} (K={k_total})")
    return [seen[k] for k in range(k_total)]


def _load_cubes(
    root: Path, entries: Sequence[ScanEntry], manifest: DatasetManifest, kind: str
) -> list[HistogramCube]:
    sensor = manifest.sensor
    expected_shape = (sensor.pixel_count, sensor.bin_count)
    cubes = []
    for e in entries:
        path = root / e.hist_path
        counts = read_histogram_csv(path)
        if counts.shape != expected_shape:
            raise DatasetError(
                f"shape mismatch: {path} has shape {counts.shape}, expected {expected_shape}"
            )
        if np.any(counts < 0):
            p, t = np.argwhere(counts < 0)[0]
            raise DatasetError(f"negative count: {path} at pixel {p}, bin {t}")
        if np.any(counts > sensor.max_count):
            p, t = np.argwhere(counts > sensor.max_count)[0]
            raise DatasetError(
                f"count exceeds max_count: {path} at pixel {p}, bin {t} "
                f"({counts[p, t]} > {sensor.max_count})"
            )
        cubes.append(HistogramCube(counts=counts, scan_index=e.index, kind=kind))
    return cubes


def _check_frames(root: Path, entries: Sequence[ScanEntry], frame: RgbFrameSpec) -> None:
    for e in entries:
        path = root / e.frame_path
        if not path.is_file():
            raise DatasetError(f"missing file: {path} (scan {e.index})")
        with Image.open(path) as img:
            if img.size != (frame.width, frame.height):
                raise DatasetError(
                    f"frame size mismatch: {path} is {img.size[0]}x{img.size[1]}, "
                    f"expected {frame.width}x{frame.height}"
                )


def load_dataset(manifest_path: Path | str) -> Dataset:
    """Load and fully validate a dataset.

    Every malformed-input class (missing file, shape mismatch, duplicate
    or missing scan index, out-of-range count, bad frame size) raises a
    DatasetError naming the offending path and index before any
    processing starts.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    manifest = load_manifest(manifest_path)
    root = manifest_path.parent
    k_total = manifest.grid.point_count
    if manifest.window is not None and manifest.window.hi >= manifest.sensor.bin_count:
        raise DatasetError(
            f"manifest window [{manifest.window.lo}, {manifest.window.hi}] exceeds "
            f"T={manifest.sensor.bin_count}"
        )
    scans = _check_entries(manifest.scans, k_total, "scans")
    background = _check_entries(manifest.background, k_total, "background")
    manifest.scans = scans
    manifest.background = background
    cubes = _load_cubes(root, scans, manifest, PATCH_PRESENT)
    bg_cubes = _load_cubes(root, background, manifest, BACKGROUND)
    _check_frames(root, scans, manifest.frame)
    _check_frames(root, background, manifest.frame)
    return Dataset(root=root, manifest=manifest, cubes=cubes, bg_cubes=bg_cubes)


# ---------------------------------------------------------------------------
# Response-map result directories
# ---------------------------------------------------------------------------


def _detection_rows(detections: Sequence[PatchDetection]) -> np.ndarray:
    rows = np.full((len(detections), 6), np.nan)
    for i, det in enumerate(sorted(detections, key=lambda d: d.scan_index)):
        rows[i, 0] = det.scan_index
        if det.valid and det.center is not None:
            rows[i, 1], rows[i, 2] = det.center
            rows[i, 3] = det.radius if det.radius is not None else np.nan
        rows[i, 4] = det.votes
        rows[i, 5] = 1.0 if det.valid else 0.0
    return rows


def save_response_maps(
    maps: Sequence[ResponseMap],
    masks: Sequence[SupportMask],
    detections: Sequence[PatchDetection],
    out_dir: Path | str,
    summary: Mapping[str, Any] | None = None,
) -> Path:
    """Write per-pixel value/validity/support CSV grids, the detections
    CSV, and summary.json. Returns the output directory."""
    if len(maps) != len(masks):
        raise ConsistencyError(f"{len(maps)} maps but {len(masks)} support masks")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = maps[0].grid
    payload: dict[str, Any] = {
        "format_version": MAPS_FORMAT_VERSION,
        "pixel_count": len(maps),
        "grid": grid.to_dict(),
        "normalized": all(m.normalized for m in maps),
    }
    if summary:
        payload.update(summary)
    for p, (m, mask) in enumerate(zip(maps, masks)):
        if m.pixel != p or mask.pixel != p:
            raise ConsistencyError("maps/masks must be ordered by pixel index")
        np.savetxt(out / f"map_p{p}.csv", m.values, fmt=FLOAT_FMT, delimiter=",")
        np.savetxt(out / f"valid_p{p}.csv", m.valid.astype(np.int64), fmt="%d", delimiter=",")
        np.savetxt(out / f"support_p{p}.csv", mask.mask.astype(np.int64), fmt="%d", delimiter=",")
    np.savetxt(
        out / DETECTIONS_NAME,
        _detection_rows(detections),
        fmt=FLOAT_FMT,
        delimiter=",",
        header="k,x,y,radius,votes,valid",
    )
    (out / SUMMARY_NAME).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return out


def _detections_from_rows(rows: np.ndarray) -> list[PatchDetection]:
    detections = []
    for row in np.atleast_2d(rows):
        k = int(row[0])
        valid = bool(row[5] >= 0.5)
        votes = 0 if math.isnan(row[4]) else int(row[4])
        if valid:
            detections.append(
                PatchDetection(
                    scan_index=k,
                    center=(float(row[1]), float(row[2])),
                    radius=float(row[3]),
                    votes=votes,
                    valid=True,
                )
            )
        else:
            detections.append(PatchDetection.invalid(k, votes=votes))
    return detections


def load_response_maps(
    maps_dir: Path | str,
) -> tuple[list[ResponseMap], list[SupportMask], list[PatchDetection], dict[str, Any]]:
    """Reload a directory written by save_response_maps.

    Anchors are reconstructed from the detections CSV through the snake
    ordering, so maps round-trip without separate anchor files.
    """
    root = Path(maps_dir)
    summary_path = root / SUMMARY_NAME
    if not summary_path.is_file():
        raise DatasetError(f"missing file: {summary_path}")
    summary = json.loads(summary_path.read_text(encoding="utf-8"))
    if int(summary.get("format_version", -1)) != MAPS_FORMAT_VERSION:
        raise DatasetError(f"unsupported format_version in {summary_path}")
    grid = GridSpec.from_dict(summary["grid"])
    pixel_count = int(summary["pixel_count"])
    normalized = bool(summary.get("normalized", False))

    det_path = root / DETECTIONS_NAME
    if not det_path.is_file():
        raise DatasetError(f"missing file: {det_path}")
    detections = _detections_from_rows(np.loadtxt(det_path, delimiter=","))
    if len(detections) != grid.point_count:
        raise DatasetError(
            f"{det_path} has {len(detections)} rows, expected K={grid.point_count}"
        )
    by_index = {d.scan_index: d for d in detections}

    anchor_grid = np.full((grid.rows, grid.cols, 2), np.nan)
    for r in range(grid.rows):
        for c in range(grid.cols):
            det = by_index.get(snake_cell_to_index(r, c, grid))
            if det is not None and det.valid and det.center is not None:
                anchor_grid[r, c] = det.center

    maps: list[ResponseMap] = []
    masks: list[SupportMask] = []
    for p in range(pixel_count):
        values = np.loadtxt(root / f"map_p{p}.csv", delimiter=",", ndmin=2)
        valid = np.loadtxt(root / f"valid_p{p}.csv", delimiter=",", dtype=np.int64, ndmin=2) != 0
        support = np.loadtxt(root / f"support_p{p}.csv", delimiter=",", dtype=np.int64, ndmin=2) != 0
        if values.shape != (grid.rows, grid.cols):
            raise DatasetError(
                f"shape mismatch: map_p{p}.csv has shape {values.shape}, "
                f"expected {(grid.rows, grid.cols)}"
            )
        anchors = anchor_grid.copy()
        anchors[~valid] = np.nan
        maps.append(
            ResponseMap(
                pixel=p, grid=grid, values=values, valid=valid, anchors=anchors,
                normalized=normalized,
            )
        )
        masks.append(SupportMask(pixel=p, grid=grid, mask=support))
    return maps, masks, detections, summary


# ---------------------------------------------------------------------------
# Consistency reports
# ---------------------------------------------------------------------------


def _fmt(value: float | None) -> str:
    return "undefined" if value is None else f"{value:.6f}"


def report_text(report: ConsistencyReport) -> str:
    lines = [
        "consistency report",
        f"pixel_count: {report.pixel_count}",
        f"grid: {report.grid.cols}x{report.grid.rows}",
        f"rel_threshold: {report.rel_threshold}",
        f"invalid_cells_a: {report.invalid_cells_a}",
        f"invalid_cells_b: {report.invalid_cells_b}",
        f"undefined_pixels: {report.undefined_count}",
        "",
    ]
    for entry in report.pixels:
        lines.append(f"pixel {entry.pixel}")
        lines.append(f"  iou: {_fmt(entry.iou)}")
        lines.append(f"  centroid_displacement_px: {_fmt(entry.centroid_displacement)}")
        lines.append(f"  cosine: {_fmt(entry.cosine)}")
        if entry.note:
            lines.append(f"  note: {entry.note}")
    lines.append("")
    lines.append("aggregate (mean +/- sample std)")
    lines.append(f"  iou: {report.iou_mean:.6f} +/- {report.iou_std:.6f}")
    lines.append(
        f"  centroid_displacement_px: {report.displacement_mean:.6f} "
        f"+/- {report.displacement_std:.6f}"
    )
    lines.append(f"  cosine: {report.cosine_mean:.6f} +/- {report.cosine_std:.6f}")
    return "\n".join(lines) + "\n"


def save_report(report: ConsistencyReport, out_dir: Path | str) -> Path:
    """Write report.txt (key-value blocks) and report.csv (per-pixel rows)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report_text(report), encoding="utf-8")
    rows = []
    for e in report.pixels:
        rows.append(
            ",".join(
                [
                    str(e.pixel),
                    _fmt(e.iou),
                    _fmt(e.centroid_displacement),
                    _fmt(e.cosine),
                    e.note.replace(",", ";"),
                ]
            )
        )
    csv_text = "pixel,iou,centroid_displacement_px,cosine,note\n" + "\n".join(rows) + "\n"
    (out / "report.csv").write_text(csv_text, encoding="utf-8")
    return out


# ---------------------------------------------------------------------------
# Overlays
# ---------------------------------------------------------------------------

# Distinct per-pixel colors for the composite overlay.
_PALETTE = (
    (31, 119, 180),
    (255, 127, 14),
    (44, 160, 44),
    (214, 39, 40),
    (148, 103, 189),
    (140, 86, 75),
    (227, 119, 194),
    (127, 127, 127),
    (188, 189, 34),
    (23, 190, 207),
)

COLORMAPS = ("hot", "gray")


def colormap_lookup(name: str, values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to RGB (float 0..255)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    if name == "hot":
        r = np.clip(3.0 * v, 0.0, 1.0)
        g = np.clip(3.0 * v - 1.0, 0.0, 1.0)
        b = np.clip(3.0 * v - 2.0, 0.0, 1.0)
        return np.stack([r, g, b], axis=-1) * 255.0
    if name == "gray":
        return np.stack([v, v, v], axis=-1) * 255.0
    raise ConsistencyError(f"unknown colormap {name!r}, expected one of {COLORMAPS}")


def _splat(
    canvas: np.ndarray, cx: float, cy: float, radius: float, color: np.ndarray, alpha: float
) -> None:
    height, width = canvas.shape[:2]
    x0, x1 = max(0, int(math.floor(cx - radius - 1))), min(width, int(math.ceil(cx + radius + 2)))
    y0, y1 = max(0, int(math.floor(cy - radius - 1))), min(height, int(math.ceil(cy + radius + 2)))
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    coverage = np.clip(radius + 0.5 - np.hypot(xs - cx, ys - cy), 0.0, 1.0)
    a = (alpha * coverage)[:, :, None]
    canvas[y0:y1, x0:x1] = canvas[y0:y1, x0:x1] * (1.0 - a) + color[None, None, :] * a


def _splat_radius(grid: GridSpec, width: int, height: int) -> float:
    return 0.55 * min(width / grid.cols, height / grid.rows)


def render_overlay(
    m: ResponseMap,
    base: np.ndarray,
    colormap: str = "hot",
    alpha_scale: float = 1.0,
) -> np.ndarray:
    """Splat each valid cell's value at its anchor as a colormapped
    semi-transparent disk over the base image. Cells are composited in
    row-major order, so output bytes are deterministic."""
    if not m.normalized:
        raise ConsistencyError(f"pixel {m.pixel}: overlay requires a peak-normalized map")
    base_arr = np.asarray(base, dtype=np.uint8)
    if base_arr.ndim != 3 or base_arr.shape[2] != 3:
        raise ConsistencyError(f"expected H x W x 3 base image, got shape {base_arr.shape}")
    canvas = base_arr.astype(np.float64)
    height, width = canvas.shape[:2]
    radius = _splat_radius(m.grid, width, height)
    for r in range(m.grid.rows):
        for c in range(m.grid.cols):
            if not m.valid[r, c]:
                continue
            value = float(m.values[r, c])
            alpha = min(1.0, value * alpha_scale)
            if alpha <= 0.0:
                continue
            color = colormap_lookup(colormap, np.asarray(value)).reshape(3)
            x, y = m.anchors[r, c]
            _splat(canvas, float(x), float(y), radius, color, alpha)
    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)


def render_composite(
    maps: Sequence[ResponseMap], base: np.ndarray, alpha_scale: float = 0.85
) -> np.ndarray:
    """All pixel maps on one base image, one palette color per pixel."""
    base_arr = np.asarray(base, dtype=np.uint8)
    canvas = base_arr.astype(np.float64)
    height, width = canvas.shape[:2]
    for m in maps:
        if not m.normalized:
            raise ConsistencyError(f"pixel {m.pixel}: overlay requires a peak-normalized map")
        color = np.asarray(_PALETTE[m.pixel % len(_PALETTE)], dtype=np.float64)
        radius = _splat_radius(m.grid, width, height)
        for r in range(m.grid.rows):
            for c in range(m.grid.cols):
                if not m.valid[r, c]:
                    continue
                alpha = min(1.0, float(m.values[r, c]) * alpha_scale)
                if alpha <= 0.0:
                    continue
                x, y = m.anchors[r, c]
                _splat(canvas, float(x), float(y), radius, color, alpha)
    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
