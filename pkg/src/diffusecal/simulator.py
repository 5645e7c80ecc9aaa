"""Forward model: synthesize patch-present and background scan datasets
from known per-pixel mixing kernels.

Each LiDAR pixel's expected histogram is the spatial integral of its
sensitivity kernel against the scene transient, discretized as a midpoint
Riemann sum on a fixed pixel lattice. The scene is a bright patch disk at
the scan position (occluding part of a single-depth wall return) plus a
flat ambient floor, all convolved with a short discrete pulse. Photon
noise is Poisson with counter-based keying, so datasets are bit-identical
for a given seed under any parallel execution schedule.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .core import GridSpec, RgbFrameSpec, SensorConfig, snake_index_to_cell
from .counter_rng import poisson_from_keys, uniform_from_keys
from .errors import ConfigError
from .histogram import BACKGROUND, DEFAULT_WINDOW_HALF_WIDTH, PATCH_PRESENT

NOISE_NONE = "none"
NOISE_POISSON = "poisson"

# Frame rendering constants. The background texture is keyed by the seed
# alone so that two scan points differ only near their patch disks; it is
# piecewise constant on coarse blocks, which keeps its gradients far below
# the patch edge and PNG encoding fast.
_TEX_STREAM = 0x7E58
_TEX_BASE = 10.0
_TEX_SPAN = 12.0
_TEX_BLOCK = 4
_DISK_LEVEL = 235.0


@dataclass(frozen=True)
class GaussianComponent:
    """One truncated anisotropic Gaussian term of a pixel kernel.

    rotation is in radians; the component is identically zero outside the
    ellipse at truncation_sigmas standard deviations.
    """

    center_x: float
    center_y: float
    sigma_x: float
    sigma_y: float
    rotation: float = 0.0
    amplitude: float = 1.0
    truncation_sigmas: float = 3.5

    def __post_init__(self) -> None:
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ConfigError("component sigmas must be positive")
        if self.amplitude < 0:
            raise ConfigError("component amplitude must be nonnegative")
        if self.truncation_sigmas <= 0:
            raise ConfigError("truncation_sigmas must be positive")


@dataclass(frozen=True)
class KernelBank:
    """Ground-truth spatial sensitivity of every LiDAR pixel over one
    RGB frame, as sums of truncated Gaussian components."""

    frame: RgbFrameSpec
    kernels: tuple[tuple[GaussianComponent, ...], ...]

    @property
    def pixel_count(self) -> int:
        return len(self.kernels)


@dataclass(frozen=True)
class PatchSpec:
    """Retroreflective patch model: a uniform disk, a depth bin, and the
    expected photon count contributed per unit kernel weight."""

    radius: float = 5.0
    depth_bin: int = 40
    intensity: float = 150.0

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ConfigError("patch radius must be positive")
        if self.depth_bin < 0:
            raise ConfigError("depth_bin must be >= 0")
        if self.intensity < 0:
            raise ConfigError("patch intensity must be >= 0")


@dataclass(frozen=True)
class BackgroundSpec:
    """Single-depth wall return plus a flat ambient floor, both scaled by
    kernel mass."""

    wall_bin: int = 90
    wall_intensity: float = 0.05
    ambient_floor: float = 0.002

    def __post_init__(self) -> None:
        if self.wall_bin < 0:
            raise ConfigError("wall_bin must be >= 0")
        if self.wall_intensity < 0 or self.ambient_floor < 0:
            raise ConfigError("background intensities must be >= 0")


@dataclass(frozen=True)
class SceneSpec:
    patch: PatchSpec = field(default_factory=PatchSpec)
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    #: Discrete temporal pulse as (bin offset, weight) pairs; weights sum to 1.
    pulse: tuple[tuple[int, float], ...] = ((-1, 0.25), (0, 0.5), (1, 0.25))

    def __post_init__(self) -> None:
        if not self.pulse:
            raise ConfigError("pulse must have at least one tap")
        weights = [w for _, w in self.pulse]
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigError("pulse weights must be nonnegative and sum to 1")

    @property
    def max_pulse_offset(self) -> int:
        return max(abs(int(off)) for off, _ in self.pulse)

    def to_dict(self) -> dict[str, Any]:
        return {
            "patch": {
                "radius": self.patch.radius,
                "depth_bin": self.patch.depth_bin,
                "intensity": self.patch.intensity,
            },
            "background": {
                "wall_bin": self.background.wall_bin,
                "wall_intensity": self.background.wall_intensity,
                "ambient_floor": self.background.ambient_floor,
            },
            "pulse": [[int(off), float(w)] for off, w in self.pulse],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SceneSpec":
        patch = d.get("patch", {})
        bg = d.get("background", {})
        pulse = d.get("pulse")
        return cls(
            patch=PatchSpec(
                radius=float(patch.get("radius", PatchSpec.radius)),
                depth_bin=int(patch.get("depth_bin", PatchSpec.depth_bin)),
                intensity=float(patch.get("intensity", PatchSpec.intensity)),
            ),
            background=BackgroundSpec(
                wall_bin=int(bg.get("wall_bin", BackgroundSpec.wall_bin)),
                wall_intensity=float(bg.get("wall_intensity", BackgroundSpec.wall_intensity)),
                ambient_floor=float(bg.get("ambient_floor", BackgroundSpec.ambient_floor)),
            ),
            pulse=tuple((int(off), float(w)) for off, w in pulse)
            if pulse is not None
            else SceneSpec.pulse,
        )


@dataclass(frozen=True)
class SimConfig:
    """Simulation run configuration. The seed fully determines every
    stochastic output. The default frame is half the sensor-facing
    848x480 resolution to keep full-grid runs fast; any frame of at least
    300x200 works with the default kernel bank."""

    sensor: SensorConfig = field(default_factory=SensorConfig)
    grid: GridSpec = field(default_factory=lambda: GridSpec(cols=40, rows=24))
    frame: RgbFrameSpec = field(default_factory=lambda: RgbFrameSpec(width=424, height=240))
    seed: int = 0
    integration_step: float = 1.0
    noise: str = NOISE_POISSON

    def __post_init__(self) -> None:
        if self.integration_step < 1.0:
            raise ConfigError(f"integration_step must be >= 1 px, got {self.integration_step}")
        if self.noise not in (NOISE_NONE, NOISE_POISSON):
            raise ConfigError(f"unknown noise kind {self.noise!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "sensor": self.sensor.to_dict(),
            "grid": self.grid.to_dict(),
            "frame": self.frame.to_dict(),
            "seed": self.seed,
            "integration_step": self.integration_step,
            "noise": self.noise,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SimConfig":
        kwargs: dict[str, Any] = {}
        if "sensor" in d:
            kwargs["sensor"] = SensorConfig.from_dict(d["sensor"])
        if "grid" in d:
            kwargs["grid"] = GridSpec.from_dict(d["grid"])
        if "frame" in d:
            kwargs["frame"] = RgbFrameSpec.from_dict(d["frame"])
        for key in ("seed", "integration_step", "noise"):
            if key in d:
                kwargs[key] = d[key]
        return cls(**kwargs)


def scan_position(k: int, grid: GridSpec, frame: RgbFrameSpec) -> tuple[float, float]:
    """RGB-plane patch center for scan index k: cell centers of a uniform
    lattice covering the frame with half-step margins."""
    row, col = snake_index_to_cell(k, grid)
    return (
        (col + 0.5) * frame.width / grid.cols,
        (row + 0.5) * frame.height / grid.rows,
    )


def eval_kernel_points(bank: KernelBank, p: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Kernel of pixel p evaluated at arrays of RGB coordinates."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    out = np.zeros(np.broadcast_shapes(xs.shape, ys.shape))
    for comp in bank.kernels[p]:
        dx = xs - comp.center_x
        dy = ys - comp.center_y
        c, s = math.cos(comp.rotation), math.sin(comp.rotation)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        q = (u / comp.sigma_x) ** 2 + (v / comp.sigma_y) ** 2
        inside = q <= comp.truncation_sigmas**2
        out += np.where(inside, comp.amplitude * np.exp(-0.5 * q), 0.0)
    return out


def eval_kernel(bank: KernelBank, p: int, u: tuple[float, float]) -> float:
    """Kernel value at a single in-frame coordinate."""
    x, y = float(u[0]), float(u[1])
    if not (0.0 <= x <= bank.frame.width and 0.0 <= y <= bank.frame.height):
        raise ValueError(f"coordinate {u} outside {bank.frame.width}x{bank.frame.height} frame")
    if not 0 <= p < bank.pixel_count:
        raise IndexError(f"pixel index {p} out of range")
    return float(eval_kernel_points(bank, p, np.asarray(x), np.asarray(y)))


def _lattice(extent: float, step: float) -> tuple[np.ndarray, float]:
    """Midpoint-rule sample coordinates covering [0, extent]."""
    n = max(1, int(round(extent / step)))
    actual = extent / n
    return (np.arange(n) + 0.5) * actual, actual


@lru_cache(maxsize=8)
def _frame_masses(bank: KernelBank, step: float) -> tuple[float, ...]:
    """Total kernel mass of every pixel over the whole frame."""
    xs, dx = _lattice(bank.frame.width, step)
    ys, dy = _lattice(bank.frame.height, step)
    gx, gy = np.meshgrid(xs, ys)
    return tuple(
        float(eval_kernel_points(bank, p, gx, gy).sum() * dx * dy)
        for p in range(bank.pixel_count)
    )


def disk_masses(
    bank: KernelBank, center: tuple[float, float], radius: float, step: float
) -> np.ndarray:
    """Kernel mass of every pixel over a disk clipped to the frame.

    Sampled on the same global midpoint lattice as the whole-frame mass,
    so disk + complement always equals the frame total exactly.
    """
    xs, dx = _lattice(bank.frame.width, step)
    ys, dy = _lattice(bank.frame.height, step)
    cx, cy = center
    xsel = xs[(xs >= cx - radius - dx) & (xs <= cx + radius + dx)]
    ysel = ys[(ys >= cy - radius - dy) & (ys <= cy + radius + dy)]
    out = np.zeros(bank.pixel_count)
    if xsel.size == 0 or ysel.size == 0:
        return out
    gx, gy = np.meshgrid(xsel, ysel)
    inside = (gx - cx) ** 2 + (gy - cy) ** 2 <= radius**2
    if not inside.any():
        return out
    for p in range(bank.pixel_count):
        out[p] = float(eval_kernel_points(bank, p, gx[inside], gy[inside]).sum() * dx * dy)
    return out


# Per-pixel variation tables for the default bank: distinct amplitudes and
# mild anisotropy so peak normalization has real per-pixel scale to remove.
_BANK_AMP = (0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95)
_BANK_SX = (1.00, 0.92, 1.06, 0.95, 1.08, 0.90, 1.04, 0.97, 1.02)
_BANK_SY = (0.94, 1.05, 0.98, 1.07, 0.91, 1.03, 0.96, 1.00, 1.06)
_BANK_ROT = (-0.20, 0.10, -0.05, 0.15, 0.00, -0.15, 0.05, -0.10, 0.20)


def default_kernel_bank(frame: RgbFrameSpec, layout: str = "3x3-wide") -> KernelBank:
    """Nine mildly anisotropic kernels on a 3x3 lattice spanning the
    central 70% of the frame, with pairwise-distinct amplitudes and
    modest overlap between neighbors."""
    if layout != "3x3-wide":
        raise ConfigError(f"no default kernel bank for layout {layout!r}")
    if frame.width < 300 or frame.height < 200:
        raise ConfigError(
            f"frame {frame.width}x{frame.height} too small for the default bank (need 300x200)"
        )
    fractions = (0.15, 0.50, 0.85)
    spacing_x = 0.35 * frame.width
    spacing_y = 0.35 * frame.height
    sigma_x0 = spacing_x / 3.45
    sigma_y0 = spacing_y / 3.45
    kernels = []
    for p in range(9):
        row, col = divmod(p, 3)
        kernels.append(
            (
                GaussianComponent(
                    center_x=fractions[col] * frame.width,
                    center_y=fractions[row] * frame.height,
                    sigma_x=sigma_x0 * _BANK_SX[p],
                    sigma_y=sigma_y0 * _BANK_SY[p],
                    rotation=_BANK_ROT[p],
                    amplitude=_BANK_AMP[p],
                ),
            )
        )
    return KernelBank(frame=frame, kernels=tuple(kernels))


def validate_scene(scene: SceneSpec, sensor: SensorConfig) -> None:
    """Check scene bins against the sensor and the default window width."""
    t_max = sensor.bin_count - 1
    if scene.patch.depth_bin > t_max or scene.background.wall_bin > t_max:
        raise ConfigError(
            f"scene bins (depth {scene.patch.depth_bin}, wall {scene.background.wall_bin}) "
            f"exceed T-1={t_max}"
        )
    separation = abs(scene.background.wall_bin - scene.patch.depth_bin)
    if separation <= DEFAULT_WINDOW_HALF_WIDTH + scene.max_pulse_offset:
        raise ConfigError(
            f"wall_bin {scene.background.wall_bin} falls inside the default response window "
            f"around depth_bin {scene.patch.depth_bin}"
        )


def _expected_histogram(
    bank: KernelBank, scene: SceneSpec, sensor: SensorConfig, disk: np.ndarray, step: float
) -> np.ndarray:
    """Expected counts given precomputed patch-disk kernel masses.

    A zero disk vector is exactly the background (patch-removed) scan.
    """
    total = np.asarray(_frame_masses(bank, step))
    expected = np.zeros((sensor.pixel_count, sensor.bin_count))
    expected += scene.background.ambient_floor * total[:, None]
    for off, w in scene.pulse:
        wall_t = scene.background.wall_bin + int(off)
        if 0 <= wall_t < sensor.bin_count:
            expected[:, wall_t] += scene.background.wall_intensity * (total - disk) * w
        patch_t = scene.patch.depth_bin + int(off)
        if 0 <= patch_t < sensor.bin_count:
            expected[:, patch_t] += scene.patch.intensity * disk * w
    return np.clip(expected, 0.0, float(sensor.max_count))


def render_transient(
    bank: KernelBank, scene: SceneSpec, k: int, cfg: SimConfig, with_patch: bool
) -> np.ndarray:
    """Expected (pre-noise) P x T photon counts for one scan point.

    The patch disk contributes at the patch depth and occludes the wall
    behind it; the ambient floor adds to every bin. Values are clamped to
    the sensor's saturation ceiling but kept real-valued.
    """
    sensor = cfg.sensor
    if bank.pixel_count != sensor.pixel_count:
        raise ConfigError(
            f"kernel bank has {bank.pixel_count} pixels, sensor expects {sensor.pixel_count}"
        )
    if bank.frame != cfg.frame:
        raise ConfigError("kernel bank frame does not match the simulation frame")
    validate_scene(scene, sensor)

    if with_patch:
        u = scan_position(k, cfg.grid, cfg.frame)
        disk = disk_masses(bank, u, scene.patch.radius, cfg.integration_step)
    else:
        disk = np.zeros(bank.pixel_count)
    return _expected_histogram(bank, scene, sensor, disk, cfg.integration_step)


def apply_noise(
    expected: np.ndarray,
    seed: int,
    k: int,
    noise: str,
    scan_kind: str = PATCH_PRESENT,
    max_count: int = 65535,
) -> np.ndarray:
    """Turn expected real-valued counts into integer counts.

    noise="none" rounds to the nearest integer; noise="poisson" draws each
    (p, t) entry from a counter-based Poisson keyed by (seed, scan, p, t).
    The patch-present and background scans of the same index use distinct
    streams, mirroring two independent captures.
    """
    arr = np.asarray(expected, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("expected counts must be nonnegative")
    if noise == NOISE_NONE:
        counts = np.rint(arr).astype(np.int64)
    elif noise == NOISE_POISSON:
        stream = 2 * k + (0 if scan_kind == PATCH_PRESENT else 1)
        element = np.arange(arr.size, dtype=np.int64).reshape(arr.shape)
        counts = poisson_from_keys(arr, seed, stream, element)
    else:
        raise ConfigError(f"unknown noise kind {noise!r}")
    return np.clip(counts, 0, max_count)


@lru_cache(maxsize=4)
def _background_texture(seed: int, width: int, height: int) -> np.ndarray:
    blocks_x = -(-width // _TEX_BLOCK)
    blocks_y = -(-height // _TEX_BLOCK)
    element = np.arange(blocks_y * blocks_x, dtype=np.int64)
    u = uniform_from_keys(seed, _TEX_STREAM, element).reshape(blocks_y, blocks_x)
    gray = _TEX_BASE + _TEX_SPAN * u
    full = np.repeat(np.repeat(gray, _TEX_BLOCK, axis=0), _TEX_BLOCK, axis=1)
    out = full[:height, :width]
    out.flags.writeable = False
    return out


def render_frame(scene: SceneSpec, k: int, cfg: SimConfig, with_patch: bool = True) -> np.ndarray:
    """RGB frame for scan point k: dark deterministic texture plus a
    bright anti-aliased patch disk at the scan position."""
    width, height = cfg.frame.width, cfg.frame.height
    gray = _background_texture(cfg.seed, width, height).copy()

    if with_patch:
        cx, cy = scan_position(k, cfg.grid, cfg.frame)
        r = scene.patch.radius
        x0, x1 = max(0, int(math.floor(cx - r - 1))), min(width, int(math.ceil(cx + r + 2)))
        y0, y1 = max(0, int(math.floor(cy - r - 1))), min(height, int(math.ceil(cy + r + 2)))
        if x0 < x1 and y0 < y1:
            ys, xs = np.mgrid[y0:y1, x0:x1]
            dist = np.hypot(xs + 0.0 - cx, ys + 0.0 - cy)
            coverage = np.clip(r + 0.5 - dist, 0.0, 1.0)
            patch_zone = gray[y0:y1, x0:x1]
            gray[y0:y1, x0:x1] = patch_zone * (1.0 - coverage) + _DISK_LEVEL * coverage

    channel = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
    return np.repeat(channel[:, :, None], 3, axis=2)


def simulate_scan(
    bank: KernelBank, scene: SceneSpec, cfg: SimConfig, out_dir, jobs: int = 1
):
    """Write a complete synthetic dataset to out_dir: manifest, both
    scans' frames and histograms, and ground-truth kernel samples (point
    values and patch-disk masses on the scan grid) for oracle tests.

    Returns the manifest path. Output bytes depend only on (bank, scene,
    cfg); the jobs thread count never changes results because all noise
    is counter-keyed and writes happen in scan order.
    """
    from . import io as dataset_io

    if bank.pixel_count != cfg.sensor.pixel_count:
        raise ConfigError(
            f"kernel bank has {bank.pixel_count} pixels, sensor expects {cfg.sensor.pixel_count}"
        )
    if bank.frame != cfg.frame:
        raise ConfigError("kernel bank frame does not match the simulation frame")
    validate_scene(scene, cfg.sensor)

    out = Path(out_dir)
    for sub in (
        dataset_io.FRAMES_DIR,
        dataset_io.HIST_DIR,
        dataset_io.BG_FRAMES_DIR,
        dataset_io.BG_HIST_DIR,
        dataset_io.GT_DIR,
    ):
        (out / sub).mkdir(parents=True, exist_ok=True)

    grid, sensor = cfg.grid, cfg.sensor
    k_total = grid.point_count
    # The background scan is k-independent pre-noise; render it once.
    bg_expected = render_transient(bank, scene, 0, cfg, with_patch=False)
    bg_png = dataset_io.encode_png(render_frame(scene, 0, cfg, with_patch=False))

    gt_disk = np.zeros((sensor.pixel_count, grid.rows, grid.cols))
    gt_point = np.zeros_like(gt_disk)
    positions = np.zeros((k_total, 3))

    def build(k: int):
        u = scan_position(k, grid, cfg.frame)
        disk = disk_masses(bank, u, scene.patch.radius, cfg.integration_step)
        point = np.array([eval_kernel(bank, p, u) for p in range(bank.pixel_count)])
        expected = _expected_histogram(bank, scene, sensor, disk, cfg.integration_step)
        patch_counts = apply_noise(
            expected, cfg.seed, k, cfg.noise, PATCH_PRESENT, sensor.max_count
        )
        bg_counts = apply_noise(bg_expected, cfg.seed, k, cfg.noise, BACKGROUND, sensor.max_count)
        png = dataset_io.encode_png(render_frame(scene, k, cfg, with_patch=True))
        return k, u, disk, point, patch_counts, bg_counts, png

    def consume(payload) -> None:
        k, u, disk, point, patch_counts, bg_counts, png = payload
        row, col = snake_index_to_cell(k, grid)
        gt_disk[:, row, col] = disk
        gt_point[:, row, col] = point
        positions[k] = (k, u[0], u[1])
        (out / dataset_io.FRAMES_DIR / dataset_io.frame_name(k)).write_bytes(png)
        (out / dataset_io.BG_FRAMES_DIR / dataset_io.frame_name(k)).write_bytes(bg_png)
        dataset_io.write_histogram_csv(out / dataset_io.HIST_DIR / dataset_io.hist_name(k), patch_counts)
        dataset_io.write_histogram_csv(out / dataset_io.BG_HIST_DIR / dataset_io.hist_name(k), bg_counts)

    if jobs > 1:
        chunk = max(1, 8 * jobs)
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for start in range(0, k_total, chunk):
                stop = min(start + chunk, k_total)
                for payload in pool.map(build, range(start, stop)):
                    consume(payload)
    else:
        for k in range(k_total):
            consume(build(k))

    def entries(frames_dir: str, hist_dir: str):
        return [
            dataset_io.ScanEntry(
                index=k,
                frame_path=f"{frames_dir}/{dataset_io.frame_name(k)}",
                hist_path=f"{hist_dir}/{dataset_io.hist_name(k)}",
            )
            for k in range(k_total)
        ]

    manifest = dataset_io.DatasetManifest(
        sensor=sensor,
        grid=grid,
        frame=cfg.frame,
        scans=entries(dataset_io.FRAMES_DIR, dataset_io.HIST_DIR),
        background=entries(dataset_io.BG_FRAMES_DIR, dataset_io.BG_HIST_DIR),
        window=None,
        provenance=(
            f"synthetic scan: seed={cfg.seed}, noise={cfg.noise}, "
            f"grid={grid.cols}x{grid.rows}, frame={cfg.frame.width}x{cfg.frame.height}"
        ),
        ground_truth_dir=dataset_io.GT_DIR,
    )
    dataset_io.write_manifest(manifest, out / dataset_io.MANIFEST_NAME)

    gt = out / dataset_io.GT_DIR
    for p in range(sensor.pixel_count):
        np.savetxt(gt / f"disk_response_p{p}.csv", gt_disk[p], fmt=dataset_io.FLOAT_FMT, delimiter=",")
        np.savetxt(gt / f"kernel_sample_p{p}.csv", gt_point[p], fmt=dataset_io.FLOAT_FMT, delimiter=",")
    np.savetxt(gt / "scan_positions.csv", positions, fmt=dataset_io.FLOAT_FMT, delimiter=",", header="k,x,y")
    return out / dataset_io.MANIFEST_NAME
