import csv
import io
import json
import os

import numpy as np
import pytest

from twise import cli
from twise.fitter import FitReport
from twise.losses import ale, rale
from twise.pgm import read_depth, read_labels, read_pgm, write_depth, write_pgm


def run(*argv):
    try:
        return cli.main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def sidecar(path):
    with open(f"{path}.json") as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def step_fits(tmp_path_factory):
    """Grid samples of the step scene fitted by the twin-surface loss and by L2."""
    d = tmp_path_factory.mktemp("step")
    assert run("synth", "--scene", "step1d", "--out", d / "scene") == 0
    assert run("sparsify", "--scene", "step1d", "--grid-step", 8, "--out", d / "sparse") == 0
    sparse = d / "sparse" / "sparse.pgm"
    assert run("fit", "--sparse", sparse, "--out", d / "twise") == 0
    assert run("fit", "--sparse", sparse, "--baseline", "l2", "--out", d / "l2") == 0
    return d


def test_loss_eval_grid(capsys):
    assert run("loss-eval", "--gamma", 2, "--eps", "-2:0.5:2") == 0
    table = rows(capsys.readouterr().out)
    assert len(table) == 9
    eps = np.array([float(r["eps"]) for r in table])
    np.testing.assert_allclose(eps, np.linspace(-2, 2, 9))
    np.testing.assert_allclose([float(r["value"]) for r in table], ale(eps, 2.0).value, rtol=1e-12)
    np.testing.assert_allclose([float(r["dvalue"]) for r in table], ale(eps, 2.0).dvalue, rtol=1e-12)


@pytest.mark.parametrize("kind", ["ale", "rale"])
def test_loss_eval_gamma_one_is_absolute(capsys, kind):
    assert run("loss-eval", "--gamma", 1, "--loss", kind, "--eps", "-3:0.25:3") == 0
    table = rows(capsys.readouterr().out)
    for r in table:
        assert float(r["value"]) == abs(float(r["eps"]))


def test_loss_eval_rejects_bad_input(capsys):
    assert run("loss-eval", "--gamma", 0.5, "--eps", "-1:1:1") == 1
    assert run("loss-eval", "--loss", "cauchy", "--eps", "-1:1:1") == 1
    assert run("loss-eval") == 1
    assert run("loss-eval", "--c1", "only.pgm") == 1
    assert run("loss-eval", "--bogus") == 1


def test_loss_eval_images_match_direct_recomputation(tmp_path, capsys):
    rng = np.random.default_rng(4)
    c1 = np.round(rng.uniform(5, 30, (6, 7)) * 256) / 256
    c2 = np.round(rng.uniform(5, 30, (6, 7)) * 256) / 256
    target = np.round(rng.uniform(5, 30, (6, 7)) * 256) / 256
    target[0, :3] = 0.0  # missing ground truth is left out of the mean
    sig = rng.integers(1000, 64000, (6, 7)).astype(np.uint16)
    write_depth(tmp_path / "c1.pgm", c1)
    write_depth(tmp_path / "c2.pgm", c2)
    write_depth(tmp_path / "t.pgm", target)
    write_pgm(tmp_path / "s.pgm", sig)
    assert run("loss-eval", "--gamma", 3, "--c1", tmp_path / "c1.pgm", "--c2", tmp_path / "c2.pgm",
               "--sigma", tmp_path / "s.pgm", "--target", tmp_path / "t.pgm") == 0
    table = rows(capsys.readouterr().out)
    assert table[0]["quantity"] == "loss"
    s = sig / 65535.0
    v = target > 0
    per_pixel = (ale(c1 - target, 3.0).value + rale(c2 - target, 3.0).value
                 + np.abs(s * c1 + (1 - s) * c2 - target))
    assert float(table[0]["value"]) == pytest.approx(per_pixel[v].mean(), rel=1e-9)


def test_analyze_thresholds(capsys):
    assert run("analyze", "--p1", "0.5,0.1", "--gammas", "2") == 0
    table = rows(capsys.readouterr().out)
    assert [float(r["threshold"]) for r in table] == [1.0, 3.0]
    assert [float(r["predicted"]) for r in table] == [10.0, 20.0]
    assert table[0]["empirical_c1"] == ""


def test_analyze_empirical_agreement(capsys):
    assert run("analyze", "--p1", "0.3", "--gammas", "3", "--empirical", "--iterations", 6000) == 0
    (r,) = rows(capsys.readouterr().out)
    assert abs(float(r["empirical_c1"]) - 10) < 1.5
    assert r["agree"] == "True"
    assert run("analyze", "--p1", "0.3,x") == 1
    assert run("analyze", "--p1", "1.5") == 1


def test_synth_outputs_and_sidecars(step_fits):
    gt = read_depth(step_fits / "scene" / "gt.pgm").data[0]
    np.testing.assert_array_equal(gt[:50], 10.0)
    np.testing.assert_array_equal(gt[50:], 30.0)
    assert read_labels(step_fits / "scene" / "labels.pgm").shape == (1, 100)
    doc = sidecar(step_fits / "scene" / "gt.pgm")
    assert doc["tool"] == "twise" and doc["command"] == "synth" and doc["seed"] == 0
    assert len(doc["config_hash"]) == 64 and "out" not in doc["config"]
    assert doc["scene"]["kind"] == "step1d"


def test_sparsify_ring_ratio(tmp_path):
    counts = {}
    for r in (32, 16):
        out = tmp_path / str(r)
        assert run("sparsify", "--scene", "composite", "--rows", r, "--out", out) == 0
        counts[r] = read_depth(out / "sparse.pgm").valid_count
        assert sidecar(out / "sparse.pgm")["valid_count"] == counts[r]
    assert counts[32] / counts[16] == pytest.approx(2.0, rel=0.15)
    assert run("sparsify", "--scene", "composite", "--rows", 12, "--out", tmp_path / "bad") == 1


def test_semidense_outlier_sidecar(tmp_path):
    common = ("--scene", "slab2d", "--frames", 2, "--seed", 1)
    assert run("semidense", *common, "--sigma-t", 0, "--sigma-r", 0, "--out", tmp_path / "a") == 0
    assert run("semidense", *common, "--sigma-t", 0.05, "--out", tmp_path / "b") == 0
    clean = sidecar(tmp_path / "a" / "semidense.pgm")["outlier_stats"]
    noisy = sidecar(tmp_path / "b" / "semidense.pgm")["outlier_stats"]
    assert clean["metric_fraction"] == 0.0
    assert noisy["metric_fraction"] > 0.0
    assert run("semidense", *common, "--frames", -1, "--out", tmp_path / "c") == 1


def test_fit_outputs(step_fits):
    out = step_fits / "twise"
    for name in ("fused.pgm", "c1.pgm", "c2.pgm", "sigma.pgm", "ambiguity.pgm", "loss_trace.csv"):
        assert os.path.exists(out / name) and os.path.exists(out / f"{name}.json")
    report = json.loads((out / "fit_report.json").read_text())
    assert report["converged"] and report["provenance"]["command"] == "fit"
    assert report["fit_config"]["baseline"] == "twise"
    assert sidecar(out / "sigma.pgm")["scale"] == 65535.0
    trace = rows((out / "loss_trace.csv").read_text())
    assert len(trace) == 300


def test_fit_flat_scene_recovers_depth(tmp_path):
    assert run("sparsify", "--scene", "flat", "--grid-step", 8, "--out", tmp_path) == 0
    assert run("fit", "--sparse", tmp_path / "sparse.pgm", "--iterations", 50, "--out", tmp_path / "fit") == 0
    fused = read_depth(tmp_path / "fit" / "fused.pgm").data
    np.testing.assert_allclose(fused, 15.0, atol=0.05)


def test_fit_errors(tmp_path):
    assert run("fit") == 1
    assert run("fit", "--sparse", tmp_path / "missing.pgm", "--out", tmp_path) == 2
    (tmp_path / "junk.pgm").write_bytes(b"not an image")
    assert run("fit", "--sparse", tmp_path / "junk.pgm", "--out", tmp_path) == 2


def test_fit_non_convergence_exit_code(tmp_path, monkeypatch, step_fits):
    def diverged(scene, cfg, fit, sparse=None, probes=()):
        nan = np.full(sparse.shape, np.nan)
        from twise.core import TwinSurfaceField
        return FitReport(TwinSurfaceField(nan, nan, nan), np.array([np.nan]), np.ones(sparse.shape, bool), {},
                         fit.baseline, False, "non-finite loss or parameters", ((0, (1.0, 0.0, 0.0)),))

    monkeypatch.setattr(cli, "fit_kernel_regression", diverged)
    assert run("fit", "--sparse", step_fits / "sparse" / "sparse.pgm", "--out", tmp_path) == 3
    report = json.loads((tmp_path / "fit_report.json").read_text())
    assert report["converged"] is False and report["message"]


def test_compare_identical_predictions(step_fits, tmp_path):
    fused = step_fits / "twise" / "fused.pgm"
    gt = step_fits / "scene" / "gt.pgm"
    assert run("compare", "--pred-a", fused, "--pred-b", fused, "--gt", gt, "--out", tmp_path) == 0
    assert np.all(read_pgm(tmp_path / "diff_A.pgm") == 32768)
    assert np.all(read_pgm(tmp_path / "diff_S.pgm") == 32768)
    assert (tmp_path / "metrics_a.csv").read_text() == (tmp_path / "metrics_b.csv").read_text()
    counts = json.loads((tmp_path / "counts.json").read_text())
    assert counts["n_wins"] == counts["n_losses"] == 0


def test_compare_twise_against_l2(step_fits, tmp_path):
    gt = step_fits / "scene" / "gt.pgm"
    # the A map is |a - gt| - |b - gt|, so "wins" count pixels where b is closer
    assert run("compare", "--pred-a", step_fits / "l2" / "fused.pgm", "--pred-b", step_fits / "twise" / "fused.pgm",
               "--gt", gt, "--labels", step_fits / "scene" / "labels.pgm", "--out", tmp_path) == 0
    counts = json.loads((tmp_path / "counts.json").read_text())
    assert counts["n_wins"] > counts["n_losses"]
    regions = [r["region"] for r in rows((tmp_path / "metrics_a.csv").read_text())]
    assert regions == ["whole", "edge", "inside"]
    assert sidecar(tmp_path / "diff_A.pgm")["offset"] == 32768
    for name in ("hist_A_wins.csv", "hist_A_losses.csv", "hist_S_wins.csv", "hist_S_losses.csv"):
        assert (tmp_path / name).read_text().startswith("bin_left,bin_right,count\n")


def test_compare_shape_mismatch(step_fits, tmp_path):
    write_depth(tmp_path / "small.pgm", np.full((2, 2), 5.0))
    gt = step_fits / "scene" / "gt.pgm"
    assert run("compare", "--pred-a", tmp_path / "small.pgm", "--pred-b", gt, "--gt", gt, "--out", tmp_path) == 2


def test_metrics_command(step_fits, capsys):
    gt = step_fits / "scene" / "gt.pgm"
    assert run("metrics", "--pred", gt, "--gt", gt, "--unit", "m") == 0
    (r,) = rows(capsys.readouterr().out)
    assert r["region"] == "whole" and float(r["mae"]) == 0.0
    assert run("metrics", "--pred", gt, "--gt", gt, "--unit", "ft") == 1
    assert run("metrics", "--pred", gt) == 1


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"gamma": 1.0, "eps": "-1:1:1"}))
    assert run("loss-eval", "--config", cfg) == 0
    assert [float(r["value"]) for r in rows(capsys.readouterr().out)] == [1.0, 0.0, 1.0]
    assert run("loss-eval", "--config", cfg, "--gamma", 4) == 0
    assert [float(r["value"]) for r in rows(capsys.readouterr().out)] == [0.25, 0.0, 4.0]
    cfg.write_text(json.dumps({"gamma": 2.0, "momentum": 0.9}))
    assert run("loss-eval", "--config", cfg) == 1
    assert run("loss-eval", "--config", tmp_path / "nope.json") == 1
    cfg.write_text("[1, 2]")
    assert run("loss-eval", "--config", cfg) == 1


def test_config_hash_ignores_output_location(tmp_path):
    for sub in ("a", "b"):
        assert run("synth", "--scene", "flat", "--out", tmp_path / sub) == 0
    ha = sidecar(tmp_path / "a" / "gt.pgm")["config_hash"]
    hb = sidecar(tmp_path / "b" / "gt.pgm")["config_hash"]
    assert ha == hb
    assert run("synth", "--scene", "flat", "--seed", 1, "--out", tmp_path / "c") == 0
    assert sidecar(tmp_path / "c" / "gt.pgm")["config_hash"] != ha


def test_rerun_is_byte_identical(tmp_path):
    for sub in ("a", "b"):
        assert run("semidense", "--scene", "slab2d", "--frames", 1, "--sigma-t", 0.02, "--seed", 3,
                   "--out", tmp_path / sub) == 0
    for name in ("semidense.pgm", "semidense.pgm.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
