import numpy as np
import pytest

from hotspot.cli import EXIT_DIVERGED, EXIT_INCOMPATIBLE, EXIT_OK, EXIT_USAGE, main
from hotspot.field import Architecture, init_random, read_checkpoint, write_checkpoint
from hotspot.geometry import load_cloud, load_grid


def gen(tmp_path, name="g", *extra):
    out = tmp_path / name
    assert main(["gen", "circle", "--n", "300", "--res", "32", "--out", str(out), *extra]) == EXIT_OK
    return out


def test_gen_writes_cloud_grid_and_manifest(tmp_path):
    out = gen(tmp_path)
    assert len(load_cloud(out / "cloud.xyz")) == 300
    assert load_grid(out / "gt_grid.bin").spec.res == (32, 32)
    manifest = (out / "manifest.txt").read_text()
    assert "command = gen" in manifest and "seed = 0" in manifest and "sha256=" in manifest


def test_gen_is_byte_deterministic(tmp_path):
    a, b = gen(tmp_path, "a"), gen(tmp_path, "b")
    for name in ("cloud.xyz", "gt_grid.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_gen_seed_changes_cloud(tmp_path):
    a, b = gen(tmp_path, "a"), gen(tmp_path, "b", "--seed", "5")
    assert (a / "cloud.xyz").read_bytes() != (b / "cloud.xyz").read_bytes()


def test_gen_shape_parameter(tmp_path):
    out = gen(tmp_path, "r", "--r", "0.3")
    pts = load_cloud(out / "cloud.xyz").points
    assert np.allclose(np.linalg.norm(pts, axis=1), 0.3, atol=1e-9)


@pytest.mark.parametrize("argv", [["gen", "blob", "--out", "x"], ["gen", "circle", "--n", "0", "--out", "x"],
                                  ["gen", "square", "--inner", "0.2", "--out", "x"], ["gen", "circle", "--bogus"],
                                  ["frobnicate"], ["train"], ["demo1d", "sideways", "--out", "x"]])
def test_usage_errors(tmp_path, monkeypatch, argv):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_USAGE


@pytest.mark.parametrize("command", ["gen", "train", "eval", "trace", "validate", "demo1d"])
def test_help(command, capsys):
    assert main([command, "--help"]) == EXIT_OK
    assert "--threads" in capsys.readouterr().out


def test_bad_thread_count(tmp_path):
    assert main(["gen", "circle", "--threads", "0", "--out", str(tmp_path)]) == EXIT_USAGE


def test_eval_grid_against_itself(tmp_path, capsys):
    out = gen(tmp_path)
    grid = str(out / "gt_grid.bin")
    assert main(["eval", grid, "--gt", grid, "--samples", "500", "--out", str(tmp_path / "e")]) == EXIT_OK
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("iou=1 chamfer=0 hausdorff=0 rmse=0 mae=0 smape=0")
    assert (tmp_path / "e" / "summary.txt").read_text().strip() == line
    assert (tmp_path / "e" / "renders" / "sdf_heatmap.ppm").is_file()


def test_eval_missing_ground_truth(tmp_path):
    out = gen(tmp_path)
    assert main(["eval", str(out / "gt_grid.bin"), "--gt", str(tmp_path / "none.bin"),
                 "--out", str(tmp_path / "e")]) == EXIT_USAGE


def test_eval_grid_spec_mismatch(tmp_path):
    a = gen(tmp_path, "a")
    b = tmp_path / "b"
    assert main(["gen", "circle", "--n", "10", "--res", "16", "--out", str(b)]) == EXIT_OK
    assert main(["eval", str(a / "gt_grid.bin"), "--gt", str(b / "gt_grid.bin"),
                 "--out", str(tmp_path / "e")]) == EXIT_INCOMPATIBLE


def test_eval_checkpoint_dimension_mismatch(tmp_path):
    out = gen(tmp_path)
    ck = tmp_path / "m.ckpt"
    write_checkpoint(ck, init_random(Architecture(3, width=4, layers=1), 0))
    assert main(["eval", str(ck), "--gt", str(out / "gt_grid.bin"), "--out", str(tmp_path / "e")]) == EXIT_INCOMPATIBLE
    assert main(["trace", str(ck), "--poses", "1", "--size", "4", "--out", str(tmp_path / "t")]) == EXIT_OK


def test_trace_rejects_2d_checkpoint(tmp_path):
    ck = tmp_path / "m.ckpt"
    write_checkpoint(ck, init_random(Architecture(2, width=4, layers=1), 0))
    assert main(["trace", str(ck), "--out", str(tmp_path / "t")]) == EXIT_INCOMPATIBLE


def test_train_then_resume(tmp_path):
    out = gen(tmp_path)
    run = tmp_path / "run"
    common = [str(out / "cloud.xyz"), "--set", "width=8", "--set", "layers=2", "--set", "n_uniform=32",
              "--set", "n_gauss=32", "--set", "log_interval=10", "--set", "init_steps=50", "--out", str(run)]
    assert main(["train", *common, "--iterations", "20"]) == EXIT_OK
    assert read_checkpoint(run / "model.ckpt")[2] == 20
    assert main(["train", *common, "--iterations", "40", "--resume"]) == EXIT_OK
    assert read_checkpoint(run / "model.ckpt")[2] == 40
    rows = (run / "history.csv").read_text().splitlines()
    assert [int(r.split(",")[0]) for r in rows[1:]] == [10, 20, 30, 40]
    assert "total=" in (run / "summary.txt").read_text()
    assert main(["eval", str(run / "model.ckpt"), "--gt", str(out / "gt_grid.bin"), "--samples", "200",
                 "--out", str(tmp_path / "e")]) == EXIT_OK


def test_train_bad_config(tmp_path):
    out = gen(tmp_path)
    base = ["train", str(out / "cloud.xyz"), "--out", str(tmp_path / "run")]
    assert main(base + ["--set", "lr=-1"]) == EXIT_USAGE
    assert main(base + ["--set", "nonsense"]) == EXIT_USAGE
    assert main(base + ["--resume"]) == EXIT_USAGE
    assert main(["train", str(tmp_path / "none.xyz"), "--out", str(tmp_path / "run")]) == EXIT_USAGE


def test_train_divergence_exit_code(tmp_path):
    out = gen(tmp_path)
    argv = ["train", str(out / "cloud.xyz"), "--iterations", "30", "--set", "width=8", "--set", "layers=2",
            "--set", "init_steps=20", "--set", "lr=1e300", "--set", "lambda.knots=none", "--out", str(tmp_path / "r")]
    assert main(argv) == EXIT_DIVERGED


def test_validate_stability(tmp_path, capsys):
    assert main(["validate", "stability", "--out", str(tmp_path / "v")]) == EXIT_OK
    assert capsys.readouterr().out.strip().endswith("checks passed")
    assert (tmp_path / "v" / "metrics.csv").is_file()


def test_demo1d_short_run(tmp_path, capsys):
    out = tmp_path / "d"
    assert main(["demo1d", "both", "--iterations", "20", "--out", str(out)]) == EXIT_OK
    assert "eikonal_only_max_error=" in capsys.readouterr().out
    header = (out / "profile.csv").read_text().splitlines()[0]
    assert header == "x,u_eikonal_only,u_with_heat,u_star"
    assert (out / "with_heat.ckpt").is_file()
