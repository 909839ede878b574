"""End-to-end command line coverage, run in process via cli.main."""

import json
import os

import numpy as np
import pytest

from isomatch import cli
from isomatch.errors import NumericsError
from isomatch.mesh import load_mesh_with_colors, save_mesh
from isomatch.refine import PointMap, load_corr, save_corr
from isomatch.synth import bumpy_figure, posed_figure
from isomatch.train import read_log

PRE = ["--k", "20", "--shot-bins", "2", "--shot-radius-fraction", "0.4"]


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Two isometric 42-vertex shapes, manifests, and a shared cache.

    The figure is bumpy on purpose: descriptors on a plain sphere are nearly
    constant, which starves the normal equations of rank."""
    root = tmp_path_factory.mktemp("ws")
    mesh = bumpy_figure(1)
    save_mesh(mesh, str(root / "x.ply"), binary=True)
    save_mesh(posed_figure(mesh, bend=0.12, twist=0.15),
              str(root / "y.ply"), binary=True)
    (root / "gt.txt").write_text("identity 42\n")
    (root / "pair.txt").write_text("x.ply gt.txt\ny.ply gt.txt\n")
    (root / "pair_nogt.txt").write_text("x.ply\ny.ply\n")
    return root


def _run(ws, *argv):
    return cli.main([str(a) for a in argv] +
                    ["--cache-dir", str(ws / "cache")])


def test_no_command_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main([])
    assert info.value.code == 2
    assert "error[usage]:" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(ws, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["preprocess", str(ws / "pair.txt"), "--bogus"])
    assert info.value.code == 2
    assert "error[usage]:" in capsys.readouterr().err


def test_missing_manifest_exits_data(capsys):
    code = cli.main(["preprocess", "/nonexistent/manifest.txt"])
    assert code == 3
    err = capsys.readouterr().err
    assert err.startswith("error[data]:")
    assert err.count("\n") == 1


def test_preprocess_then_cached_rerun(ws, capsys):
    assert _run(ws, "preprocess", ws / "pair.txt", *PRE) == 0
    first = capsys.readouterr().out
    assert first.count("computed") + first.count("cached") == 2
    assert _run(ws, "preprocess", ws / "pair.txt", *PRE) == 0
    again = capsys.readouterr().out
    assert again.count("cached") == 2
    assert "computed" not in again


def test_train_writes_artifacts(ws, capsys):
    out = ws / "run"
    code = _run(ws, "train", ws / "pair.txt", "--iterations", 5,
                "--depth", 2, "--seed", 7, "--out-dir", out, *PRE)
    assert code == 0
    assert "checkpoint" in capsys.readouterr().out
    assert (out / "checkpoint_final.bin").is_file()
    log = read_log(str(out / "log.csv"))
    assert len(log) == 5
    assert all(row["sup_loss"] is not None for row in log)
    snapshot = json.loads((out / "config.json").read_text())
    assert snapshot["k"] == 20 and snapshot["width"] == 96


def test_fixed_seed_rerun_reproduces_log(ws):
    logs = []
    for name in ("rep_a", "rep_b"):
        assert _run(ws, "train", ws / "pair.txt", "--iterations", 4,
                    "--depth", 2, "--seed", 11, "--out-dir", ws / name,
                    *PRE) == 0
        logs.append(read_log(str(ws / name / "log.csv")))
    key = lambda log: [(r["iteration"], r["unsup_loss"], r["sup_loss"])
                       for r in log]
    assert key(logs[0]) == key(logs[1])


def test_supervised_without_gt_fails_before_training(ws, capsys):
    out = ws / "sup_fail"
    code = _run(ws, "train", ws / "pair_nogt.txt", "--iterations", 5,
                "--mode", "supervised", "--out-dir", out, *PRE)
    assert code == 3
    assert "ground truth" in capsys.readouterr().err
    assert not (out / "log.csv").exists()  # no iteration ever ran


def test_infer_self_map_and_eval(ws, capsys):
    corr = ws / "self.corr"
    code = _run(ws, "infer", ws / "run" / "checkpoint_final.bin",
                ws / "x.ply", ws / "x.ply", "-o", corr,
                "--soft-out", ws / "self_soft.npy")
    assert code == 0
    capsys.readouterr()
    pmap = load_corr(str(corr))  # parses back through the shared format
    assert pmap.n_x == pmap.n_y == 42
    assert _run(ws, "eval", corr, ws / "x.ply", "--gt", "identity",
                "-o", ws / "self_curve.csv", *PRE) == 0
    out = capsys.readouterr().out
    mean = float(out.split("mean_error=")[1].splitlines()[0])
    within = float(out.split("fraction_within_0.02=")[1].splitlines()[0])
    assert mean <= 0.02
    assert within >= 0.95
    assert (ws / "self_curve.csv").is_file()


def test_infer_rejects_mismatched_k(ws, capsys):
    code = _run(ws, "infer", ws / "run" / "checkpoint_final.bin",
                ws / "x.ply", ws / "y.ply", "-o", ws / "bad.corr",
                "--k", 12)
    assert code == 3
    err = capsys.readouterr().err
    assert "k=20" in err and "k=12" in err


def test_refine_soft_passthrough_matches_infer(ws):
    out = ws / "pass.corr"
    code = _run(ws, "refine", ws / "self_soft.npy", ws / "x.ply", ws / "x.ply",
                "-o", out, "--soft", "--pmf-iters", 0, *PRE)
    assert code == 0
    a = load_corr(str(out))
    b = load_corr(str(ws / "self.corr"))
    np.testing.assert_array_equal(a.map, b.map)


def test_refine_produces_permutation(ws):
    corr = ws / "xy.corr"
    assert _run(ws, "infer", ws / "run" / "checkpoint_final.bin",
                ws / "x.ply", ws / "y.ply", "-o", corr) == 0
    out = ws / "xy_refined.corr"
    assert _run(ws, "refine", corr, ws / "x.ply", ws / "y.ply", "-o", out,
                "--pmf-iters", 3, *PRE) == 0
    pmap = load_corr(str(out))
    assert np.unique(pmap.map).size == 42


def test_eval_identity_gt_on_identity_map(ws, tmp_path, capsys):
    corr = tmp_path / "id.corr"
    save_corr(str(corr), PointMap(np.arange(42), 42))
    assert _run(ws, "eval", corr, ws / "x.ply", "--gt", "identity", *PRE) == 0
    assert "mean_error=0.0" in capsys.readouterr().out


def test_export_colors_round_trip(ws, tmp_path):
    out_x = tmp_path / "cx.ply"
    out_y = tmp_path / "cy.ply"
    # the refined map is bijective, so every transferred color is checkable
    code = cli.main(["export-colors", str(ws / "xy_refined.corr"),
                     str(ws / "x.ply"), str(ws / "y.ply"),
                     "--out-x", str(out_x), "--out-y", str(out_y)])
    assert code == 0
    mx, colors_x = load_mesh_with_colors(str(out_x))
    my, colors_y = load_mesh_with_colors(str(out_y))
    assert colors_x.shape == (42, 3) and colors_y.shape == (42, 3)
    span = np.ptp(mx.vertices, axis=0)
    expect = (mx.vertices - mx.vertices.min(axis=0)) / span
    assert np.abs(colors_x - expect).max() <= 1.0 / 255.0 + 1e-9
    pmap = load_corr(str(ws / "xy_refined.corr"))
    np.testing.assert_allclose(colors_y[pmap.map], colors_x,
                               atol=1.0 / 255.0 + 1e-9)


def test_config_file_precedence(ws, tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("k = 7\nshot_bins = 2\nshot-radius-fraction = 0.4\n")
    (tmp_path / "one.txt").write_text(
        f"{os.path.join(str(ws), 'x.ply')}\n")
    assert cli.main(["preprocess", str(tmp_path / "one.txt"),
                     "--config", str(cfg),
                     "--cache-dir", str(ws / "cache")]) == 0
    assert "k=7" in capsys.readouterr().out
    # an explicit flag beats the file
    assert cli.main(["preprocess", str(tmp_path / "one.txt"),
                     "--config", str(cfg), "--k", "20",
                     "--cache-dir", str(ws / "cache")]) == 0
    assert "k=20" in capsys.readouterr().out


def test_config_file_rejects_unknown_key(ws, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("kay = 7\n")
    code = cli.main(["preprocess", str(ws / "pair.txt"),
                     "--config", str(cfg)])
    assert code == 3
    assert "unknown config key" in capsys.readouterr().err


def test_threads_flag(ws, capsys):
    assert _run(ws, "preprocess", ws / "pair.txt", "--threads", 2, *PRE) == 0
    capsys.readouterr()
    assert _run(ws, "preprocess", ws / "pair.txt", "--threads", 0, *PRE) == 3
    assert "threads" in capsys.readouterr().err


def test_numerics_errors_exit_4(ws, tmp_path, capsys, monkeypatch):
    corr = tmp_path / "id.corr"
    save_corr(str(corr), PointMap(np.arange(42), 42))

    def boom(*args, **kwargs):
        raise NumericsError("condition number blew up")

    monkeypatch.setattr(cli, "geodesic_errors", boom)
    code = _run(ws, "eval", corr, ws / "x.ply", "--gt", "identity", *PRE)
    assert code == 4
    assert capsys.readouterr().err.startswith("error[numerics]:")
