import json
import time

import numpy as np
import pytest

from diffusecal import io as dataset_io
from diffusecal.cli import main


def tree_bytes(root):
    return {
        str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
    }


def run(args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    code = run(["simulate", "--out", out, "--cols", "6", "--rows", "4", "--seed", "2",
                "--noise", "none"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def maps_dir(tmp_path_factory, sim_dir):
    out = tmp_path_factory.mktemp("cli_maps") / "maps"
    code = run(["calibrate", sim_dir, "--out", out])
    assert code == 0
    return out


def test_simulate_output_validates(sim_dir):
    ds = dataset_io.load_dataset(sim_dir)
    assert ds.point_count == 24
    assert (sim_dir / "config_used.json").is_file()


def test_simulate_same_seed_is_bit_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    args = ["--cols", "3", "--rows", "2", "--seed", "11", "--noise", "poisson"]
    assert run(["simulate", "--out", a, *args]) == 0
    assert run(["simulate", "--out", b, *args]) == 0
    assert tree_bytes(a) == tree_bytes(b)


def test_simulate_smoke_grid_is_fast(tmp_path):
    start = time.time()
    assert run(["simulate", "--out", tmp_path / "s", "--cols", "2", "--rows", "2",
                "--seed", "1", "--noise", "none"]) == 0
    assert time.time() - start < 1.0


def test_simulate_config_file_with_flag_override(tmp_path):
    config = tmp_path / "sim.json"
    config.write_text(json.dumps({
        "sim": {"seed": 5, "grid": {"cols": 3, "rows": 2, "order": "snake_row_major"},
                "noise": "poisson"},
        "scene": {"patch": {"intensity": 99.0}},
    }))
    out = tmp_path / "ds"
    assert run(["simulate", "--out", out, "--config", config, "--noise", "none"]) == 0
    echoed = json.loads((out / "config_used.json").read_text())
    assert echoed["sim"]["noise"] == "none"  # flag wins
    assert echoed["sim"]["seed"] == 5  # file value kept
    assert echoed["scene"]["patch"]["intensity"] == 99.0


def test_calibrate_noiseless_has_no_invalid_detections(sim_dir, maps_dir):
    summary = json.loads((maps_dir / "summary.json").read_text())
    assert summary["invalid_detections"] == 0
    assert summary["window_mode"] == "auto"
    assert summary["pixel_count"] == 9
    assert not summary["saturation_warning"]
    maps, masks, _, _ = dataset_io.load_response_maps(maps_dir)
    assert len(maps) == 9
    for mask in masks:
        assert mask.cell_count > 0
    overlays = maps_dir / "overlays"
    assert (overlays / "composite.png").is_file()
    assert len(list(overlays.glob("overlay_p*.png"))) == 9


def test_calibrate_explicit_window_flag_is_echoed(sim_dir, tmp_path):
    out = tmp_path / "maps"
    assert run(["calibrate", sim_dir, "--out", out, "--window", "37", "43",
                "--no-overlays"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["window"] == {"lo": 37, "hi": 43}
    assert summary["window_mode"] == "flag"


def test_calibrate_tolerates_few_blanked_frames(sim_dir, tmp_path):
    import shutil

    broken = tmp_path / "broken"
    shutil.copytree(sim_dir, broken)
    blank = np.zeros((240, 424, 3), dtype=np.uint8)
    for k in (3, 17):  # 2 of 24 blanked: 91.7% valid
        dataset_io.write_image(broken / "frames" / f"frame_{k:05d}.png", blank)
    out = tmp_path / "maps"
    assert run(["calibrate", broken, "--out", out, "--no-overlays"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["invalid_detections"] == 2
    maps, _, dets, _ = dataset_io.load_response_maps(out)
    assert sum(1 for d in dets if not d.valid) == 2
    assert all(m.valid.sum() == 22 for m in maps)


def test_calibrate_fails_below_valid_fraction(sim_dir, tmp_path):
    import shutil

    broken = tmp_path / "broken"
    shutil.copytree(sim_dir, broken)
    blank = np.zeros((240, 424, 3), dtype=np.uint8)
    for k in (0, 3, 9, 12, 17):  # 5 of 24 blanked: 79% valid
        dataset_io.write_image(broken / "frames" / f"frame_{k:05d}.png", blank)
    code = run(["calibrate", broken, "--out", tmp_path / "maps", "--no-overlays"])
    assert code == 4


def test_calibrate_missing_dataset_is_exit_3(tmp_path):
    assert run(["calibrate", tmp_path / "nope", "--out", tmp_path / "m"]) == 3


def test_compare_self_is_perfect(maps_dir, tmp_path, capsys):
    out = tmp_path / "rep"
    assert run(["compare", maps_dir, maps_dir, "--out", out]) == 0
    printed = capsys.readouterr().out
    assert "iou: 1.0000 +/- 0.0000" in printed
    assert "centroid_displacement_px: 0.0000 +/- 0.0000" in printed
    assert "cosine: 1.0000 +/- 0.0000" in printed
    assert (out / "report.txt").is_file()
    assert (out / "report.csv").is_file()


def test_compare_mismatched_grids_is_clean_error(sim_dir, maps_dir, tmp_path):
    other_ds = tmp_path / "ds2"
    assert run(["simulate", "--out", other_ds, "--cols", "4", "--rows", "3",
                "--seed", "2", "--noise", "none"]) == 0
    other_maps = tmp_path / "maps2"
    assert run(["calibrate", other_ds, "--out", other_maps, "--no-overlays"]) == 0
    assert run(["compare", maps_dir, other_maps, "--out", tmp_path / "rep"]) == 3


def test_render_produces_per_pixel_and_composite(sim_dir, maps_dir, tmp_path):
    base = sim_dir / "bg_frames" / "frame_00000.png"
    out_a = tmp_path / "ra"
    out_b = tmp_path / "rb"
    assert run(["render", maps_dir, "--base", base, "--out", out_a]) == 0
    assert run(["render", maps_dir, "--base", base, "--out", out_b]) == 0
    assert len(list(out_a.glob("overlay_p*.png"))) == 9
    assert (out_a / "composite.png").is_file()
    assert tree_bytes(out_a) == tree_bytes(out_b)


def test_render_missing_base_names_path(maps_dir, tmp_path, capsys):
    missing = tmp_path / "no_such_base.png"
    assert run(["render", maps_dir, "--base", missing, "--out", tmp_path / "r"]) == 3
    assert "no_such_base.png" in capsys.readouterr().err


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["simulate"])  # missing required --out
    assert exc.value.code == 2
