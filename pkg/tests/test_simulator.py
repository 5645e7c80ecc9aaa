import math

import numpy as np
import pytest

from diffusecal.core import GridSpec, RgbFrameSpec
from diffusecal.errors import ConfigError
from diffusecal.histogram import BACKGROUND, PATCH_PRESENT
from diffusecal.patch_detect import HoughParams, detect_patch
from diffusecal.simulator import (
    BackgroundSpec,
    GaussianComponent,
    KernelBank,
    PatchSpec,
    SceneSpec,
    SimConfig,
    apply_noise,
    default_kernel_bank,
    disk_masses,
    eval_kernel,
    eval_kernel_points,
    render_frame,
    render_transient,
    scan_position,
    simulate_scan,
)

SMALL_GRID = GridSpec(cols=6, rows=4)
FRAME = RgbFrameSpec(width=424, height=240)


def small_cfg(**kwargs):
    defaults = dict(grid=SMALL_GRID, frame=FRAME, seed=17, noise="none")
    defaults.update(kwargs)
    return SimConfig(**defaults)


def quadrature_disk_mass(component, center, radius, step=0.25):
    """Independent midpoint quadrature of one Gaussian over a disk."""
    cx, cy = center
    xs = np.arange(cx - radius, cx + radius + step, step)
    ys = np.arange(cy - radius, cy + radius + step, step)
    gx, gy = np.meshgrid(xs, ys)
    inside = (gx - cx) ** 2 + (gy - cy) ** 2 <= radius**2
    dx = gx[inside] - component.center_x
    dy = gy[inside] - component.center_y
    c, s = math.cos(component.rotation), math.sin(component.rotation)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    q = (u / component.sigma_x) ** 2 + (v / component.sigma_y) ** 2
    vals = np.where(q <= component.truncation_sigmas**2, component.amplitude * np.exp(-0.5 * q), 0.0)
    return float(vals.sum() * step * step)


# --- kernels ------------------------------------------------------------------


def test_eval_kernel_peak_value():
    comp = GaussianComponent(center_x=100.0, center_y=80.0, sigma_x=12.0, sigma_y=9.0, amplitude=0.7)
    bank = KernelBank(frame=RgbFrameSpec(400, 300), kernels=((comp,),))
    assert eval_kernel(bank, 0, (100.0, 80.0)) == pytest.approx(0.7)


def test_eval_kernel_zero_outside_truncation():
    comp = GaussianComponent(center_x=100.0, center_y=80.0, sigma_x=10.0, sigma_y=10.0,
                             amplitude=1.0, truncation_sigmas=3.0)
    bank = KernelBank(frame=RgbFrameSpec(400, 300), kernels=((comp,),))
    assert eval_kernel(bank, 0, (100.0 + 31.0, 80.0)) == 0.0
    assert eval_kernel(bank, 0, (100.0 + 29.0, 80.0)) > 0.0


def test_eval_kernel_outside_frame_is_error():
    bank = default_kernel_bank(FRAME)
    with pytest.raises(ValueError):
        eval_kernel(bank, 0, (-1.0, 10.0))
    with pytest.raises(ValueError):
        eval_kernel(bank, 0, (10.0, 1e6))


def test_isotropic_component_integral_matches_closed_form():
    # Riemann sum over a fine grid vs 2*pi*sigma^2 for a unit-amplitude
    # isotropic Gaussian (truncated at 4 sigma: 0.034% mass loss).
    sigma = 12.0
    comp = GaussianComponent(center_x=150.0, center_y=150.0, sigma_x=sigma, sigma_y=sigma,
                             amplitude=1.0, truncation_sigmas=4.0)
    step = 0.5
    xs = np.arange(step / 2, 300.0, step)
    gx, gy = np.meshgrid(xs, xs)
    bank = KernelBank(frame=RgbFrameSpec(300, 300), kernels=((comp,),))
    total = float(eval_kernel_points(bank, 0, gx, gy).sum() * step * step)
    assert abs(total - 2.0 * math.pi * sigma**2) / (2.0 * math.pi * sigma**2) < 0.01


def test_default_bank_construction():
    bank = default_kernel_bank(FRAME)
    assert bank.pixel_count == 9
    comp0 = bank.kernels[0][0]
    assert comp0.center_x < FRAME.width / 2 and comp0.center_y < FRAME.height / 2
    amplitudes = [k[0].amplitude for k in bank.kernels]
    assert len(set(amplitudes)) == 9


def test_default_bank_corner_supports_disjoint():
    bank = default_kernel_bank(FRAME)
    xs = np.arange(0.5, FRAME.width, 2.0)
    ys = np.arange(0.5, FRAME.height, 2.0)
    gx, gy = np.meshgrid(xs, ys)
    k0 = eval_kernel_points(bank, 0, gx, gy)
    k8 = eval_kernel_points(bank, 8, gx, gy)
    mask0 = k0 >= 0.05 * k0.max()
    mask8 = k8 >= 0.05 * k8.max()
    assert not np.logical_and(mask0, mask8).any()


def test_default_bank_rejects_small_frame():
    with pytest.raises(ConfigError):
        default_kernel_bank(RgbFrameSpec(200, 100))
    with pytest.raises(ConfigError):
        default_kernel_bank(FRAME, layout="8x8")


# --- transients ----------------------------------------------------------------


def test_background_render_has_no_patch_term():
    cfg = small_cfg()
    bank = default_kernel_bank(FRAME)
    scene = SceneSpec()
    bg = render_transient(bank, scene, 0, cfg, with_patch=False)
    depth = scene.patch.depth_bin
    ambient = bg[:, depth - 2]  # a bin inside the window but off the pulse
    assert np.allclose(bg[:, depth], ambient)
    assert np.allclose(bg[:, depth - 1], ambient)
    wall = scene.background.wall_bin
    assert np.all(bg[:, wall] > ambient)


def test_background_render_is_scan_independent():
    cfg = small_cfg()
    bank = default_kernel_bank(FRAME)
    scene = SceneSpec()
    first = render_transient(bank, scene, 0, cfg, with_patch=False)
    for k in (1, 7, 23):
        assert np.array_equal(first, render_transient(bank, scene, k, cfg, with_patch=False))


def test_patch_term_ratio_matches_disk_mass_quadrature():
    cfg = small_cfg()
    bank = default_kernel_bank(FRAME)
    scene = SceneSpec(background=BackgroundSpec(wall_intensity=0.0, ambient_floor=0.0))
    comp4 = bank.kernels[4][0]

    # scan point nearest the central kernel's peak vs a distant one
    positions = [scan_position(k, cfg.grid, cfg.frame) for k in range(cfg.grid.point_count)]
    near = min(range(len(positions)),
               key=lambda k: (positions[k][0] - comp4.center_x) ** 2
               + (positions[k][1] - comp4.center_y) ** 2)
    far = max(range(len(positions)),
              key=lambda k: (positions[k][0] - comp4.center_x) ** 2
              + (positions[k][1] - comp4.center_y) ** 2)

    depth = scene.patch.depth_bin
    r_near = render_transient(bank, scene, near, cfg, True)[4, depth]
    r_far = render_transient(bank, scene, far, cfg, True)[4, depth]
    m_near = quadrature_disk_mass(comp4, positions[near], scene.patch.radius)
    m_far = quadrature_disk_mass(comp4, positions[far], scene.patch.radius)
    if m_far == 0.0:
        assert r_far == 0.0
        assert r_near > 0.0
    else:
        assert r_near / r_far == pytest.approx(m_near / m_far, rel=0.02)


def test_patch_intensity_linearity():
    cfg = small_cfg()
    bank = default_kernel_bank(FRAME)
    base = SceneSpec(patch=PatchSpec(intensity=50.0))
    double = SceneSpec(patch=PatchSpec(intensity=100.0))
    zero = SceneSpec(patch=PatchSpec(intensity=0.0))
    k = 9
    r_base = render_transient(bank, base, k, cfg, True)
    r_double = render_transient(bank, double, k, cfg, True)
    r_zero = render_transient(bank, zero, k, cfg, True)
    assert np.allclose(r_double - r_zero, 2.0 * (r_base - r_zero), rtol=1e-12, atol=1e-12)


def test_transient_additivity():
    cfg = small_cfg()
    bank = default_kernel_bank(FRAME)
    quiet = BackgroundSpec(wall_intensity=0.0, ambient_floor=0.0)
    s1 = SceneSpec(patch=PatchSpec(intensity=30.0), background=quiet)
    s2 = SceneSpec(patch=PatchSpec(intensity=45.5), background=quiet)
    s_sum = SceneSpec(patch=PatchSpec(intensity=75.5), background=quiet)
    k = 14
    lhs = render_transient(bank, s_sum, k, cfg, True)
    rhs = render_transient(bank, s1, k, cfg, True) + render_transient(bank, s2, k, cfg, True)
    nonzero = rhs > 0
    assert np.allclose(lhs, rhs, rtol=1e-9, atol=0.0)
    assert nonzero.any()


def test_zero_response_outside_kernel_support():
    # patch disk far from pixel 0's truncation ellipse -> exactly zero
    cfg = small_cfg()
    bank = default_kernel_bank(FRAME)
    scene = SceneSpec(background=BackgroundSpec(wall_intensity=0.0, ambient_floor=0.0))
    far_k = max(
        range(cfg.grid.point_count),
        key=lambda k: sum(
            (a - b) ** 2
            for a, b in zip(scan_position(k, cfg.grid, cfg.frame),
                            (bank.kernels[0][0].center_x, bank.kernels[0][0].center_y))
        ),
    )
    out = render_transient(bank, scene, far_k, cfg, True)
    assert np.all(out[0] == 0.0)


def test_transient_clamps_at_max_count():
    cfg = small_cfg()
    bank = default_kernel_bank(FRAME)
    scene = SceneSpec(patch=PatchSpec(intensity=1e9))
    k = 14  # central cell, large disk mass
    out = render_transient(bank, scene, k, cfg, True)
    assert out.max() == cfg.sensor.max_count


def test_scene_validation():
    with pytest.raises(ConfigError):
        SceneSpec(pulse=((0, 0.5), (1, 0.6)))
    with pytest.raises(ConfigError):
        PatchSpec(radius=0.0)
    cfg = small_cfg()
    bank = default_kernel_bank(FRAME)
    clash = SceneSpec(patch=PatchSpec(depth_bin=40), background=BackgroundSpec(wall_bin=42))
    with pytest.raises(ConfigError):
        render_transient(bank, clash, 0, cfg, True)
    too_deep = SceneSpec(patch=PatchSpec(depth_bin=500))
    with pytest.raises(ConfigError):
        render_transient(bank, too_deep, 0, cfg, True)


# --- noise ----------------------------------------------------------------------


def test_noise_zero_expectation_stays_zero():
    zeros = np.zeros((3, 8))
    assert np.all(apply_noise(zeros, 1, 0, "none") == 0)
    assert np.all(apply_noise(zeros, 1, 0, "poisson") == 0)


def test_noise_none_rounds():
    out = apply_noise(np.array([[4.6, 4.4, 0.2]]), 1, 0, "none")
    assert np.array_equal(out, [[5, 4, 0]])


def test_noise_poisson_mean():
    lam = np.full((100, 100), 50.0)
    draws = apply_noise(lam, seed=42, k=3, noise="poisson")
    assert 49.0 <= draws.mean() <= 51.0


def test_noise_is_reproducible_and_kind_separated():
    lam = np.random.default_rng(0).uniform(0, 30, size=(9, 128))
    a = apply_noise(lam, seed=5, k=2, noise="poisson", scan_kind=PATCH_PRESENT)
    b = apply_noise(lam, seed=5, k=2, noise="poisson", scan_kind=PATCH_PRESENT)
    assert np.array_equal(a, b)
    bg = apply_noise(lam, seed=5, k=2, noise="poisson", scan_kind=BACKGROUND)
    assert not np.array_equal(a, bg)
    other_k = apply_noise(lam, seed=5, k=3, noise="poisson", scan_kind=PATCH_PRESENT)
    assert not np.array_equal(a, other_k)


def test_noise_clamps_to_max_count():
    lam = np.full((2, 4), 300.0)
    out = apply_noise(lam, seed=0, k=0, noise="poisson", max_count=100)
    assert out.max() == 100
    rounded = apply_noise(lam, seed=0, k=0, noise="none", max_count=100)
    assert np.all(rounded == 100)


def test_noise_rejects_negative_expectation():
    with pytest.raises(ValueError):
        apply_noise(np.array([[-0.5]]), 0, 0, "poisson")


# --- frames ---------------------------------------------------------------------


def test_frame_determinism():
    cfg = small_cfg()
    scene = SceneSpec()
    a = render_frame(scene, 5, cfg)
    b = render_frame(scene, 5, cfg)
    assert np.array_equal(a, b)


def test_frames_differ_only_near_disks():
    cfg = small_cfg()
    scene = SceneSpec()
    a = render_frame(scene, 5, cfg)
    b = render_frame(scene, 6, cfg)
    diff = np.any(a != b, axis=2)
    ua = scan_position(5, cfg.grid, cfg.frame)
    ub = scan_position(6, cfg.grid, cfg.frame)
    ys, xs = np.mgrid[0 : cfg.frame.height, 0 : cfg.frame.width]
    pad = scene.patch.radius + 2.0
    near_a = np.hypot(xs - ua[0], ys - ua[1]) <= pad
    near_b = np.hypot(xs - ub[0], ys - ub[1]) <= pad
    assert not diff[~(near_a | near_b)].any()
    assert diff[near_a].any() and diff[near_b].any()


def test_frame_closed_loop_detection():
    cfg = SimConfig(grid=GridSpec(cols=8, rows=5), frame=FRAME, seed=23, noise="none")
    scene = SceneSpec()
    params = HoughParams()
    # interior scan points only (disk clear of the border by r_max)
    for k in range(cfg.grid.point_count):
        u = scan_position(k, cfg.grid, cfg.frame)
        if not (20 < u[0] < FRAME.width - 20 and 20 < u[1] < FRAME.height - 20):
            continue
        det = detect_patch(render_frame(scene, k, cfg), params, scan_index=k)
        assert det.valid, f"no detection at k={k}"
        assert math.hypot(det.center[0] - u[0], det.center[1] - u[1]) <= 1.0


# --- full scan ------------------------------------------------------------------


def test_simulate_scan_round_trip(tmp_path):
    from diffusecal.io import load_dataset

    cfg = small_cfg()
    bank = default_kernel_bank(FRAME)
    scene = SceneSpec()
    manifest_path = simulate_scan(bank, scene, cfg, tmp_path / "ds")
    ds = load_dataset(manifest_path)
    assert len(ds.cubes) == cfg.grid.point_count
    assert ds.cubes[3].kind == PATCH_PRESENT and ds.bg_cubes[3].kind == BACKGROUND
    # bit-exact reload of one histogram
    expected = apply_noise(
        render_transient(bank, scene, 3, cfg, True), cfg.seed, 3, cfg.noise,
        PATCH_PRESENT, cfg.sensor.max_count,
    )
    assert np.array_equal(ds.cubes[3].counts, expected)
    # ground truth written for every pixel
    gt_dir = tmp_path / "ds" / "gt"
    for p in range(9):
        disk = np.loadtxt(gt_dir / f"disk_response_p{p}.csv", delimiter=",", ndmin=2)
        assert disk.shape == (cfg.grid.rows, cfg.grid.cols)
        point = np.loadtxt(gt_dir / f"kernel_sample_p{p}.csv", delimiter=",", ndmin=2)
        assert point.shape == (cfg.grid.rows, cfg.grid.cols)


def test_simulate_scan_jobs_do_not_change_bytes(tmp_path):
    cfg = small_cfg(noise="poisson", seed=9)
    bank = default_kernel_bank(FRAME)
    scene = SceneSpec()
    simulate_scan(bank, scene, cfg, tmp_path / "serial", jobs=1)
    simulate_scan(bank, scene, cfg, tmp_path / "threaded", jobs=3)
    serial = sorted((tmp_path / "serial").rglob("*"))
    threaded = sorted((tmp_path / "threaded").rglob("*"))
    names_a = [p.relative_to(tmp_path / "serial") for p in serial if p.is_file()]
    names_b = [p.relative_to(tmp_path / "threaded") for p in threaded if p.is_file()]
    assert names_a == names_b
    for rel in names_a:
        assert (tmp_path / "serial" / rel).read_bytes() == (tmp_path / "threaded" / rel).read_bytes(), rel


def test_disk_masses_partition_frame_total():
    # disk + complement must equal the whole-frame mass on the shared lattice
    from diffusecal.simulator import _frame_masses

    bank = default_kernel_bank(FRAME)
    u = (FRAME.width * 0.5, FRAME.height * 0.5)
    disk = disk_masses(bank, u, 40.0, 1.0)
    total = np.asarray(_frame_masses(bank, 1.0))
    xs = np.arange(FRAME.width) + 0.5
    ys = np.arange(FRAME.height) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    outside = (gx - u[0]) ** 2 + (gy - u[1]) ** 2 > 40.0**2
    for p in range(9):
        complement = float(eval_kernel_points(bank, p, gx[outside], gy[outside]).sum())
        assert disk[p] + complement == pytest.approx(total[p], rel=1e-12)
