import csv

import numpy as np
import pytest

from wxsplat import cli
from wxsplat.imaging import read_raw
from wxsplat.trainer import model_from_checkpoint


def run(args):
    return cli.main(args)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("clidata") / "snowy"
    code = run(
        [
            "synth", "--preset", "S", "--scene-seed", "3", "--weather-seed", "1",
            "--resolution", "32", "--views", "3", "--out", str(root),
        ]
    )
    assert code == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("clitrain") / "run"
    code = run(
        [
            "train", "--data", str(dataset), "--out", str(out),
            "--override", "m_init=5", "--override", "m_joint=6",
            "--override", "z_ref=3", "--override", "k_samples=8",
            "--override", "grid.resolution=8", "--override", "init_points=40",
        ]
    )
    assert code == 0
    return out


def test_synth_deterministic(dataset, tmp_path):
    again = tmp_path / "again"
    code = run(
        [
            "synth", "--preset", "S", "--scene-seed", "3", "--weather-seed", "1",
            "--resolution", "32", "--views", "3", "--out", str(again),
        ]
    )
    assert code == 0
    for rel in ("manifest.txt", "view_0/input.png", "view_2/mask.nimf", "cameras.txt"):
        assert (again / rel).read_bytes() == (dataset / rel).read_bytes()


def test_synth_collision_without_overwrite(dataset):
    code = run(
        [
            "synth", "--preset", "S", "--scene-seed", "3", "--weather-seed", "1",
            "--resolution", "32", "--views", "3", "--out", str(dataset),
        ]
    )
    assert code == cli.EXIT_DATA


def test_usage_error_exit_code():
    assert run(["synth", "--preset", "XYZ", "--out", "/tmp/x"]) == cli.EXIT_USAGE
    assert run(["not-a-command"]) == cli.EXIT_USAGE


def test_train_missing_dataset(tmp_path):
    code = run(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_DATA


def test_train_bad_override(dataset, tmp_path):
    code = run(
        ["train", "--data", str(dataset), "--out", str(tmp_path / "o"), "--override", "nope=1"]
    )
    assert code == cli.EXIT_USAGE


def test_train_outputs(trained):
    assert (trained / "model.nimc").exists()
    assert (trained / "training_log.csv").exists()
    assert (trained / "config.txt").exists()
    assert (trained / "summary.txt").exists()
    assert not (trained / "INCOMPLETE").exists()
    rows = list(csv.reader(open(trained / "training_log.csv")))
    assert len(rows) == 1 + 11  # header + iterations


def test_train_disable_flags(dataset, tmp_path):
    out = tmp_path / "noggs"
    code = run(
        [
            "train", "--data", str(dataset), "--out", str(out),
            "--disable", "ggs", "--disable", "csm",
            "--override", "m_init=3", "--override", "m_joint=3",
            "--override", "init_points=40", "--override", "k_samples=8",
            "--override", "grid.resolution=8",
        ]
    )
    assert code == 0
    cfg_text = (out / "config.txt").read_text()
    assert "ggs.enabled = false" in cfg_text
    assert "csm.enabled = false" in cfg_text


def test_eval_report_and_panels(trained, dataset, tmp_path):
    report = tmp_path / "rep" / "report.csv"
    code = run(["eval", "--checkpoint", str(trained / "model.nimc"), "--data", str(dataset), "--report", str(report)])
    assert code == 0
    rows = list(csv.reader(open(report)))
    assert rows[0] == ["view", "psnr", "ssim"]
    assert len(rows) == 1 + 3 + 1  # header + views + mean
    assert rows[-1][0] == "mean"
    for k in range(3):
        assert (report.parent / f"panel_{k}.png").exists()


def test_dump_decomposition_recomposes_bit_exact(trained, dataset, tmp_path):
    out = tmp_path / "maps"
    code = run(
        ["dump", "--checkpoint", str(trained / "model.nimc"), "--data", str(dataset), "--view", "1", "--out", str(out)]
    )
    assert code == 0
    i_hat = read_raw(out / "i_hat.nimf")
    t_map = read_raw(out / "t.nimf")
    p_map = read_raw(out / "p.nimf")
    r_map = read_raw(out / "r.nimf")
    i_con = read_raw(out / "i_con.nimf")
    i_deg = read_raw(out / "i_deg.nimf")
    assert np.all(r_map >= 0)
    assert np.all(t_map > 0) and np.all(t_map <= 1)
    assert np.array_equal(i_hat * t_map + p_map, i_con)
    # recomposition identity against the stored degraded image
    model = model_from_checkpoint(trained / "model.nimc")
    layer = model.layers[1]
    from wxsplat.particulate import compose_degraded

    assert np.array_equal(compose_degraded(i_con, layer), i_deg)


def test_dump_view_out_of_range(trained, dataset, tmp_path):
    code = run(
        ["dump", "--checkpoint", str(trained / "model.nimc"), "--data", str(dataset), "--view", "9", "--out", str(tmp_path / "x")]
    )
    assert code == cli.EXIT_DATA


def test_render_from_camera_line(trained, dataset, tmp_path):
    cam_line = (dataset / "cameras.txt").read_text().splitlines()[0]
    out = tmp_path / "render.png"
    code = run(["render", "--checkpoint", str(trained / "model.nimc"), "--camera", cam_line, "--out", str(out)])
    assert code == 0
    assert out.exists()


def test_ablate_sweep(dataset, tmp_path):
    out = tmp_path / "abl"
    code = run(
        [
            "ablate", "--data", str(dataset), "--out", str(out), "--sweep", "2,4",
            "--override", "m_joint=3", "--override", "init_points=40",
            "--override", "k_samples=8", "--override", "grid.resolution=8",
        ]
    )
    assert code == 0
    rows = list(csv.reader(open(out / "ablation.csv")))
    assert rows[0] == ["m_init", "psnr", "ssim", "final_loss"]
    assert [r[0] for r in rows[1:]] == ["2", "4"]


def test_nimbus_threads_env(monkeypatch):
    from wxsplat.validation import worker_count

    monkeypatch.setenv("NIMBUS_THREADS", "2")
    assert worker_count() == 2
    monkeypatch.setenv("NIMBUS_THREADS", "0")
    with pytest.raises(ValueError):
        worker_count()
    monkeypatch.delenv("NIMBUS_THREADS")
    assert worker_count() >= 1
