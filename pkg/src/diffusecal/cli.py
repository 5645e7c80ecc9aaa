"""Command-line pipeline: simulate, calibrate, compare, render.

Exit codes: 0 success; 2 configuration or usage error; 3 dataset
validation or I/O error; 4 degenerate data (no signal, all-zero maps,
too few valid detections); 1 unexpected failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import io as dataset_io
from .errors import (
    CalibrationError,
    ConfigError,
    ConsistencyError,
    DatasetError,
    DegenerateMapError,
)
from .histogram import DEFAULT_WINDOW_HALF_WIDTH, BinWindow, auto_select_window, patch_responses
from .patch_detect import HoughParams, PatchDetection, detect_patch
from .response_map import (
    DEFAULT_SUPPORT_THRESHOLD,
    ResponseMap,
    SupportMask,
    assemble_map,
    compare_modes,
    peak_normalize_map,
    support_mask,
)
from .simulator import SceneSpec, SimConfig, default_kernel_bank, simulate_scan

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_DEGENERATE = 4

DEFAULT_MIN_VALID_FRACTION = 0.9


@dataclass
class CalibrationResult:
    """Everything cmd_calibrate writes, in memory."""

    maps: list[ResponseMap]
    masks: list[SupportMask]
    detections: list[PatchDetection]
    window: BinWindow
    window_mode: str
    summary: dict[str, Any] = field(default_factory=dict)


def calibrate_dataset(
    dataset: dataset_io.Dataset,
    hough: HoughParams = HoughParams(),
    window: BinWindow | None = None,
    window_mode: str = "auto",
    half_width: int = DEFAULT_WINDOW_HALF_WIDTH,
    rel_threshold: float = DEFAULT_SUPPORT_THRESHOLD,
    min_valid_fraction: float = DEFAULT_MIN_VALID_FRACTION,
) -> CalibrationResult:
    """Run detection, window selection, response extraction, assembly,
    normalization, and support estimation on a loaded dataset."""
    grid = dataset.manifest.grid
    sensor = dataset.manifest.sensor
    k_total = grid.point_count

    detections = [
        detect_patch(dataset.load_frame(k), hough, scan_index=k) for k in range(k_total)
    ]
    valid_count = sum(1 for d in detections if d.valid)
    valid_fraction = valid_count / k_total
    if valid_fraction < min_valid_fraction:
        raise DegenerateMapError(
            f"detection stage: only {valid_count}/{k_total} scan points valid "
            f"({valid_fraction:.1%} < required {min_valid_fraction:.1%})"
        )

    if window is None:
        window = auto_select_window(zip(dataset.cubes, dataset.bg_cubes), half_width)
        window_mode = "auto"

    response_rows = np.zeros((k_total, sensor.pixel_count))
    for k in range(k_total):
        response_rows[k] = patch_responses(dataset.cubes[k], dataset.bg_cubes[k], window)

    saturated = int(
        sum(int((c.counts == sensor.max_count).sum()) for c in dataset.cubes)
        + sum(int((c.counts == sensor.max_count).sum()) for c in dataset.bg_cubes)
    )

    maps: list[ResponseMap] = []
    masks: list[SupportMask] = []
    peaks: list[float] = []
    for p in range(sensor.pixel_count):
        responses = {k: float(response_rows[k, p]) for k in range(k_total)}
        raw = assemble_map(responses, detections, grid, p)
        peaks.append(float(raw.values[raw.valid].max()) if raw.valid_count else 0.0)
        normalized = peak_normalize_map(raw)
        maps.append(normalized)
        masks.append(support_mask(normalized, rel_threshold))

    summary: dict[str, Any] = {
        "sensor": sensor.to_dict(),
        "frame": dataset.manifest.frame.to_dict(),
        "window": {"lo": window.lo, "hi": window.hi},
        "window_mode": window_mode,
        "window_half_width": half_width,
        "rel_threshold": rel_threshold,
        "min_valid_fraction": min_valid_fraction,
        "hough": {
            "r_min": hough.r_min,
            "r_max": hough.r_max,
            "gradient_threshold": hough.gradient_threshold,
            "vote_threshold": hough.vote_threshold,
            "blur_radius": hough.blur_radius,
        },
        "invalid_detections": k_total - valid_count,
        "valid_fraction": valid_fraction,
        "peak_responses": peaks,
        "saturated_bins": saturated,
        "saturation_warning": saturated > 0,
    }
    return CalibrationResult(
        maps=maps,
        masks=masks,
        detections=detections,
        window=window,
        window_mode=window_mode,
        summary=summary,
    )


def _write_config_echo(out_dir: Path, payload: dict[str, Any]) -> None:
    (out_dir / "config_used.json").write_text(
        json.dumps(payload, indent=2) + "\n", encoding="utf-8"
    )


def _merge_flag(d: dict[str, Any], key: str, value) -> None:
    if value is not None:
        d[key] = value


def cmd_simulate(args: argparse.Namespace) -> int:
    sim_dict: dict[str, Any] = {}
    scene_dict: dict[str, Any] = {}
    if args.config:
        payload = json.loads(Path(args.config).read_text(encoding="utf-8"))
        sim_dict = dict(payload.get("sim", {}))
        scene_dict = dict(payload.get("scene", {}))

    _merge_flag(sim_dict, "seed", args.seed)
    _merge_flag(sim_dict, "noise", args.noise)
    _merge_flag(sim_dict, "integration_step", args.integration_step)
    if args.cols is not None or args.rows is not None:
        grid = dict(sim_dict.get("grid", {"cols": 40, "rows": 24, "order": "snake_row_major"}))
        _merge_flag(grid, "cols", args.cols)
        _merge_flag(grid, "rows", args.rows)
        sim_dict["grid"] = grid
    if args.frame_width is not None or args.frame_height is not None:
        frame = dict(sim_dict.get("frame", {"width": 424, "height": 240}))
        _merge_flag(frame, "width", args.frame_width)
        _merge_flag(frame, "height", args.frame_height)
        sim_dict["frame"] = frame

    patch = dict(scene_dict.get("patch", {}))
    _merge_flag(patch, "radius", args.patch_radius)
    _merge_flag(patch, "intensity", args.patch_intensity)
    _merge_flag(patch, "depth_bin", args.depth_bin)
    if patch:
        scene_dict["patch"] = patch
    background = dict(scene_dict.get("background", {}))
    _merge_flag(background, "wall_bin", args.wall_bin)
    _merge_flag(background, "wall_intensity", args.wall_intensity)
    _merge_flag(background, "ambient_floor", args.ambient_floor)
    if background:
        scene_dict["background"] = background

    cfg = SimConfig.from_dict(sim_dict)
    scene = SceneSpec.from_dict(scene_dict)
    bank = default_kernel_bank(cfg.frame, cfg.sensor.layout_name)

    out = Path(args.out)
    manifest_path = simulate_scan(bank, scene, cfg, out, jobs=args.jobs)
    _write_config_echo(out, {"sim": cfg.to_dict(), "scene": scene.to_dict()})
    print(f"dataset written: {manifest_path}")
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    dataset = dataset_io.load_dataset(args.dataset)
    hough = HoughParams(
        r_min=args.r_min,
        r_max=args.r_max,
        gradient_threshold=args.gradient_threshold,
        vote_threshold=args.vote_threshold,
        blur_radius=args.blur_radius,
    )
    window: BinWindow | None = None
    window_mode = "auto"
    if args.window is not None:
        window = BinWindow(args.window[0], args.window[1])
        window_mode = "flag"
    elif dataset.manifest.window is not None:
        window = dataset.manifest.window
        window_mode = "manifest"

    result = calibrate_dataset(
        dataset,
        hough=hough,
        window=window,
        window_mode=window_mode,
        half_width=args.half_width,
        rel_threshold=args.rel_threshold,
        min_valid_fraction=args.min_valid_fraction,
    )

    out = Path(args.out)
    result.summary["dataset"] = str(args.dataset)
    dataset_io.save_response_maps(
        result.maps, result.masks, result.detections, out, result.summary
    )
    if not args.no_overlays:
        overlays = out / "overlays"
        overlays.mkdir(parents=True, exist_ok=True)
        base = dataset.load_bg_frame(0)
        for m in result.maps:
            dataset_io.write_image(
                overlays / f"overlay_p{m.pixel}.png",
                dataset_io.render_overlay(m, base, colormap=args.colormap),
            )
        dataset_io.write_image(
            overlays / "composite.png", dataset_io.render_composite(result.maps, base)
        )

    print(
        f"window [{result.window.lo}, {result.window.hi}] ({result.window_mode}), "
        f"{result.summary['invalid_detections']} invalid detections, "
        f"{len(result.maps)} maps written to {out}"
    )
    if result.summary["saturation_warning"]:
        print(
            f"warning: {result.summary['saturated_bins']} saturated histogram bins "
            f"(counts at max_count={dataset.manifest.sensor.max_count}); "
            "responses may be clipped",
            file=sys.stderr,
        )
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    maps_a, _, _, _ = dataset_io.load_response_maps(args.maps_a)
    maps_b, _, _, _ = dataset_io.load_response_maps(args.maps_b)
    report = compare_modes(maps_a, maps_b, rel_threshold=args.rel_threshold)
    out = Path(args.out)
    dataset_io.save_report(report, out)
    _write_config_echo(
        out,
        {
            "rel_threshold": args.rel_threshold,
            "maps_a": str(args.maps_a),
            "maps_b": str(args.maps_b),
        },
    )
    print(f"iou: {report.iou_mean:.4f} +/- {report.iou_std:.4f}")
    print(
        f"centroid_displacement_px: {report.displacement_mean:.4f} "
        f"+/- {report.displacement_std:.4f}"
    )
    print(f"cosine: {report.cosine_mean:.4f} +/- {report.cosine_std:.4f}")
    if report.undefined_count:
        print(f"undefined pixels: {report.undefined_count}", file=sys.stderr)
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    maps, _, _, _ = dataset_io.load_response_maps(args.maps)
    base = dataset_io.read_image(args.base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for m in maps:
        dataset_io.write_image(
            out / f"overlay_p{m.pixel}.png",
            dataset_io.render_overlay(m, base, colormap=args.colormap, alpha_scale=args.alpha_scale),
        )
    dataset_io.write_image(
        out / "composite.png",
        dataset_io.render_composite(maps, base, alpha_scale=args.alpha_scale),
    )
    _write_config_echo(out, {"colormap": args.colormap, "alpha_scale": args.alpha_scale})
    print(f"{len(maps)} overlays + composite written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffusecal",
        description="Spatial response-map calibration for diffuse LiDAR + RGB rigs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="synthesize a retroreflective-patch scan dataset")
    sim.add_argument("--out", required=True, help="output dataset directory")
    sim.add_argument("--config", help="JSON config file with 'sim' and 'scene' sections")
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--noise", choices=["none", "poisson"], default=None)
    sim.add_argument("--cols", type=int, default=None, help="scan grid columns")
    sim.add_argument("--rows", type=int, default=None, help="scan grid rows")
    sim.add_argument("--frame-width", type=int, default=None)
    sim.add_argument("--frame-height", type=int, default=None)
    sim.add_argument("--integration-step", type=float, default=None)
    sim.add_argument("--patch-radius", type=float, default=None)
    sim.add_argument("--patch-intensity", type=float, default=None)
    sim.add_argument("--depth-bin", type=int, default=None)
    sim.add_argument("--wall-bin", type=int, default=None)
    sim.add_argument("--wall-intensity", type=float, default=None)
    sim.add_argument("--ambient-floor", type=float, default=None)
    sim.add_argument("--jobs", type=int, default=1, help="worker threads (results identical)")
    sim.set_defaults(func=cmd_simulate)

    cal = sub.add_parser("calibrate", help="estimate response maps from a scan dataset")
    cal.add_argument("dataset", help="dataset directory or manifest path")
    cal.add_argument("--out", required=True, help="output maps directory")
    cal.add_argument("--window", type=int, nargs=2, metavar=("LO", "HI"), default=None,
                     help="explicit response bin window (overrides manifest and auto)")
    cal.add_argument("--half-width", type=int, default=DEFAULT_WINDOW_HALF_WIDTH,
                     help="half-width for auto window selection")
    cal.add_argument("--rel-threshold", type=float, default=DEFAULT_SUPPORT_THRESHOLD)
    cal.add_argument("--r-min", type=int, default=HoughParams.r_min)
    cal.add_argument("--r-max", type=int, default=HoughParams.r_max)
    cal.add_argument("--gradient-threshold", type=float, default=HoughParams.gradient_threshold)
    cal.add_argument("--vote-threshold", type=int, default=HoughParams.vote_threshold)
    cal.add_argument("--blur-radius", type=int, default=HoughParams.blur_radius)
    cal.add_argument("--min-valid-fraction", type=float, default=DEFAULT_MIN_VALID_FRACTION,
                     help="fail when fewer scan points have a valid detection")
    cal.add_argument("--no-overlays", action="store_true")
    cal.add_argument("--colormap", choices=list(dataset_io.COLORMAPS), default="hot")
    cal.set_defaults(func=cmd_calibrate)

    cmp_ = sub.add_parser("compare", help="consistency report between two maps directories")
    cmp_.add_argument("maps_a")
    cmp_.add_argument("maps_b")
    cmp_.add_argument("--out", required=True)
    cmp_.add_argument("--rel-threshold", type=float, default=DEFAULT_SUPPORT_THRESHOLD)
    cmp_.set_defaults(func=cmd_compare)

    ren = sub.add_parser("render", help="overlay response maps on a base image")
    ren.add_argument("maps", help="maps directory from calibrate")
    ren.add_argument("--base", required=True, help="base RGB image path")
    ren.add_argument("--out", required=True)
    ren.add_argument("--colormap", choices=list(dataset_io.COLORMAPS), default="hot")
    ren.add_argument("--alpha-scale", type=float, default=1.0)
    ren.set_defaults(func=cmd_render)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, ConsistencyError) as err:
        print(f"dataset error: {err}", file=sys.stderr)
        return EXIT_DATASET
    except DegenerateMapError as err:
        print(f"degenerate data: {err}", file=sys.stderr)
        return EXIT_DEGENERATE
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_DATASET
    except CalibrationError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
