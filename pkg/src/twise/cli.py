"""Command-line experiment runner.

Every subcommand takes its parameters from flags, from a ``--config`` JSON
file, or both (flags win). Output files are written next to a ``<name>.json``
sidecar holding the resolved configuration, its SHA-256 hash, the seed and
the tool version. Outputs carry no timestamps, so rerunning a command with the
same configuration reproduces every byte.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data
error, 3 fit did not converge.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .ambiguity import AmbiguityModel, gamma_threshold, predict_binary
from .core import TwinSurfaceField, logit
from .fitter import (FitConfig, config_to_json, fit_kernel_regression, fit_stochastic_pixel,
                     staged_schedule)
from .losses import LOSS_KINDS, LossConfig, combined_loss, pointwise_loss
from .metrics import (diff_histograms, error_diff, histogram_to_csv, region_metrics,
                      reports_to_csv)
from .pgm import (encode_depth, encode_signed, encode_unit, read_depth, read_labels, read_pgm, write_labels,
                  write_pgm)
from .scenegen import (accumulate_semidense, grid_sample, lidar_sample, make_scene,
                       outlier_stats, Pose)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NOT_CONVERGED = 3

#: keys that only say where outputs go; excluded from provenance and hashing
_OUTPUT_KEYS = ("out", "output")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


@contextlib.contextmanager
def _config_errors():
    """Report invalid parameter values as usage errors."""
    try:
        yield
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(str(exc)) from exc


def _float_list(x) -> list[float]:
    if isinstance(x, str):
        x = [v for v in x.split(",") if v.strip()]
    return [float(v) for v in x]


def _grid(spec: str) -> np.ndarray:
    """Inclusive ``start:step:stop`` range."""
    try:
        a, step, b = (float(v) for v in spec.split(":"))
    except ValueError:
        raise UsageError(f"range must look like start:step:stop, got {spec!r}") from None
    if not step > 0 or b < a:
        raise UsageError("range needs step > 0 and stop >= start")
    n = int(math.floor((b - a) / step + 1e-9)) + 1
    return a + step * np.arange(n)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


class _Run:
    """Writes outputs with provenance sidecars."""

    def __init__(self, command: str, config: dict):
        self.command = command
        self.config = {k: v for k, v in config.items() if k not in _OUTPUT_KEYS}
        blob = json.dumps(self.config, sort_keys=True, default=str)
        self.config_hash = hashlib.sha256(blob.encode()).hexdigest()

    def sidecar(self, path, extra):
        doc = {
            "tool": "twise",
            "version": __version__,
            "command": self.command,
            "file": os.path.basename(path),
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.config.get("seed"),
        }
        doc.update(extra)
        with open(f"{path}.json", "w") as fh:
            fh.write(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")

    def text(self, path, text: str, **extra):
        if path is None:
            sys.stdout.write(text)
            return
        with open(path, "w") as fh:
            fh.write(text)
        self.sidecar(path, extra)

    def json(self, path, doc: dict):
        """JSON outputs carry their provenance inline instead of in a sidecar."""
        doc = dict(doc, provenance={
            "tool": "twise", "version": __version__, "command": self.command,
            "config": self.config, "config_hash": self.config_hash, "seed": self.config.get("seed"),
        })
        with open(path, "w") as fh:
            fh.write(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")

    def image(self, path, img: np.ndarray, **extra):
        write_pgm(path, img)
        self.sidecar(path, extra)


def _outdir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_loss_eval(cfg: dict, run: _Run) -> int:
    with _config_errors():
        gamma = float(cfg["gamma"])
        loss_cfg = LossConfig(gamma=gamma, fusion_weight=float(cfg["fusion_weight"]))
    images = [cfg[k] for k in ("c1", "c2", "sigma", "target")]
    if any(images):
        if not all(images):
            raise UsageError("--c1, --c2, --sigma and --target must be given together")
        c1 = read_depth(cfg["c1"]).data
        c2 = read_depth(cfg["c2"]).data
        c3 = logit(read_pgm(cfg["sigma"]).astype(np.float64) / 65535.0)
        target = read_depth(cfg["target"])
        value, _ = combined_loss(TwinSurfaceField(c1, c2, c3), target, loss_cfg)
        run.text(cfg["output"], _csv(("quantity", "value"), [("loss", value)]))
        return EXIT_OK
    if cfg["eps"] is None:
        raise UsageError("give --eps start:step:stop or the four image flags")
    kind = str(cfg["loss"]).lower()
    if kind not in LOSS_KINDS:
        raise UsageError(f"--loss must be one of {LOSS_KINDS}")
    eps = _grid(cfg["eps"])
    ev = pointwise_loss(kind, eps, gamma)
    run.text(cfg["output"], _csv(("eps", "value", "dvalue"), zip(eps, ev.value, ev.dvalue)))
    return EXIT_OK


def cmd_analyze(cfg: dict, run: _Run) -> int:
    with _config_errors():
        p1s = _float_list(cfg["p1"])
        gammas = _float_list(cfg["gammas"])
        d1, d2 = float(cfg["d1"]), float(cfg["d2"])
        fit = FitConfig(learning_rate=float(cfg["learning_rate"]), iterations=int(cfg["iterations"]),
                        seed=int(cfg["seed"]))
        models = [AmbiguityModel.binary(d1, d2, p) for p in p1s]
        for g in gammas:
            LossConfig(gamma=g)
    tol = 0.15 * (d2 - d1)
    rows = []
    for p1, model in zip(p1s, models):
        for g in gammas:
            fg, bg, sig = predict_binary(model, g)
            th = gamma_threshold(p1, 1 - p1) if p1 > 0 else math.inf
            th2 = gamma_threshold(p1, 1 - p1, "rale") if p1 < 1 else math.inf
            near = abs(g - th) <= 0.1 * th or abs(g - th2) <= 0.1 * th2
            row = [p1, g, th, fg.d_star, bg.d_star, sig.sigma_star, near]
            if cfg["empirical"]:
                rep = fit_stochastic_pixel(model, LossConfig(gamma=g), fit)
                pr = rep.probes[(0, 0)]
                ok1 = abs(pr["c1"] - fg.d_star) < tol or abs(g - th) <= 0.1 * th
                ok2 = abs(pr["c2"] - bg.d_star) < tol or abs(g - th2) <= 0.1 * th2
                ok3 = sig.is_tie or (pr["sigma"] > 0.5) == (sig.sigma_star > 0.5)
                row += [pr["c1"], pr["c2"], pr["sigma"], ok1 and ok2 and ok3 and rep.converged]
            else:
                row += ["", "", "", ""]
            rows.append(row)
    header = ("p1", "gamma", "threshold", "predicted", "predicted_c2", "predicted_sigma", "near_threshold",
              "empirical_c1", "empirical_c2", "empirical_sigma", "agree")
    run.text(cfg["output"], _csv(header, rows))
    return EXIT_OK


def _scene(cfg: dict):
    with _config_errors():
        spec = cfg["scene"]
        if isinstance(spec, str):
            spec = json.loads(spec) if spec.lstrip().startswith("{") else {"kind": spec}
        spec = dict(spec)
        spec["seed"] = int(cfg["seed"])
        return make_scene(spec)


def cmd_synth(cfg: dict, run: _Run) -> int:
    sample = _scene(cfg)
    out = _outdir(cfg["out"])
    spec = sample.scene.spec
    run.image(os.path.join(out, "gt.pgm"), encode_depth(sample.dense_gt), scene=spec,
              valid_count=sample.dense_gt.valid_count)
    write_labels(os.path.join(out, "labels.pgm"), sample.labels)
    run.sidecar(os.path.join(out, "labels.pgm"), {"scene": spec})
    return EXIT_OK


def cmd_sparsify(cfg: dict, run: _Run) -> int:
    sample = _scene(cfg)
    with _config_errors():
        rows = int(cfg["rows"])
        if rows not in (0, 8, 16, 32, 64):
            raise ValueError("--rows must be one of 0, 8, 16, 32, 64")
        if cfg["grid_step"] is not None:
            sparse = grid_sample(sample, int(cfg["grid_step"]), int(cfg["offset"]))
        else:
            step = None if cfg["azimuth_step"] is None else float(cfg["azimuth_step"])
            sparse = lidar_sample(sample, rows, int(cfg["offset"]), step)
    out = _outdir(cfg["out"])
    run.image(os.path.join(out, "sparse.pgm"), encode_depth(sparse), scene=sample.scene.spec,
              valid_count=sparse.valid_count)
    return EXIT_OK


def cmd_semidense(cfg: dict, run: _Run) -> int:
    sample = _scene(cfg)
    with _config_errors():
        frames = int(cfg["frames"])
        noise = (float(cfg["sigma_r"]), float(cfg["sigma_t"]))
        if frames < 0 or min(noise) < 0:
            raise ValueError("frames and noise levels must be non-negative")
        motion = Pose(translation=(0.0, 0.0, float(cfg["motion"])))
    semi = accumulate_semidense(sample, frames, motion, noise, int(cfg["seed"]), int(cfg["rows"]))
    stats = outlier_stats(semi, sample.dense_gt, sample.scene.intrinsics)
    out = _outdir(cfg["out"])
    run.image(os.path.join(out, "semidense.pgm"), encode_depth(semi), scene=sample.scene.spec,
              valid_count=semi.valid_count, outlier_stats=stats._asdict())
    return EXIT_OK


def cmd_fit(cfg: dict, run: _Run) -> int:
    if not cfg["sparse"]:
        raise UsageError("--sparse is required")
    with _config_errors():
        schedule = cfg["schedule"]
        if isinstance(schedule, str):
            schedule = json.loads(schedule)
        iterations = int(cfg["iterations"])
        if cfg["staged_schedule"]:
            schedule = staged_schedule(iterations)
        schedule = tuple((tuple(r), tuple(w)) for r, w in (schedule or ()))
        loss_cfg = LossConfig(gamma=float(cfg["gamma"]), omega=tuple(_float_list(cfg["omega"])),
                              fusion_weight=float(cfg["fusion_weight"]),
                              detach_surfaces=not cfg["full_gradient"])
        fit = FitConfig(learning_rate=float(cfg["learning_rate"]), iterations=iterations,
                        seed=int(cfg["seed"]), bandwidth=float(cfg["bandwidth"]), schedule=schedule,
                        baseline=str(cfg["baseline"]), huber_delta=float(cfg["huber_delta"]))
    sparse = read_depth(cfg["sparse"])
    rep = fit_kernel_regression(None, loss_cfg, fit, sparse=sparse)
    out = _outdir(cfg["out"])
    field = rep.field
    valid = rep.valid
    amb_scale = 256.0
    join = lambda name: os.path.join(out, name)  # noqa: E731
    run.image(join("fused.pgm"), encode_depth(rep.fused))
    run.image(join("c1.pgm"), encode_depth(np.where(valid, field.c1, 0.0)))
    run.image(join("c2.pgm"), encode_depth(np.where(valid, field.c2, 0.0)))
    run.image(join("sigma.pgm"), encode_unit(np.where(valid, field.sigma, 0.0)), scale=65535.0)
    run.image(join("ambiguity.pgm"), encode_signed(rep.ambiguity, amb_scale), scale=amb_scale, offset=32768)
    run.text(join("loss_trace.csv"), _csv(("iteration", "loss"), enumerate(rep.loss_trace)))
    report = {
        "fit_config": json.loads(config_to_json(fit, loss_cfg)),
        "converged": rep.converged,
        "message": rep.message,
        "final_loss": float(rep.loss_trace[-1]),
        "valid_count": int(valid.sum()),
        "stages": [{"start": s, "omega": list(w)} for s, w in rep.stages],
    }
    run.json(join("fit_report.json"), report)
    if not rep.converged:
        sys.stderr.write(f"fit did not converge: {rep.message}\n")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _metric_kwargs(cfg):
    with _config_errors():
        kw = {"edge_radius": int(cfg["edge_radius"]), "trim_threshold": float(cfg["trim"]),
              "unit": str(cfg["unit"])}
        if kw["unit"] not in ("m", "cm", "mm"):
            raise ValueError("--unit must be m, cm or mm")
    return kw


def cmd_metrics(cfg: dict, run: _Run) -> int:
    if not (cfg["pred"] and cfg["gt"]):
        raise UsageError("--pred and --gt are required")
    kw = _metric_kwargs(cfg)
    labels = read_labels(cfg["labels"]) if cfg["labels"] else None
    reports = region_metrics(read_depth(cfg["pred"]), read_depth(cfg["gt"]), labels, **kw)
    run.text(cfg["output"], reports_to_csv(reports))
    return EXIT_OK


def cmd_compare(cfg: dict, run: _Run) -> int:
    if not (cfg["pred_a"] and cfg["pred_b"] and cfg["gt"]):
        raise UsageError("--pred-a, --pred-b and --gt are required")
    kw = _metric_kwargs(cfg)
    with _config_errors():
        scale_a, scale_s = float(cfg["scale_a"]), float(cfg["scale_s"])
        bins = int(cfg["bins"])
        if scale_a <= 0 or scale_s <= 0 or bins < 1:
            raise ValueError("scales and bins must be positive")
    a, b, gt = (read_depth(cfg[k]) for k in ("pred_a", "pred_b", "gt"))
    labels = read_labels(cfg["labels"]) if cfg["labels"] else None
    out = _outdir(cfg["out"])
    join = lambda name: os.path.join(out, name)  # noqa: E731
    for name, pred in (("metrics_a.csv", a), ("metrics_b.csv", b)):
        run.text(join(name), reports_to_csv(region_metrics(pred, gt, labels, **kw)))
    diff = error_diff(a, b, gt)
    run.image(join("diff_A.pgm"), encode_signed(diff.A, scale_a), scale=scale_a, offset=32768,
              meaning="|a-gt| - |b-gt| in meters; positive where b is closer")
    run.image(join("diff_S.pgm"), encode_signed(diff.S, scale_s), scale=scale_s, offset=32768,
              meaning="(a-gt)^2 - (b-gt)^2 in square meters; positive where b is closer")
    hist = diff_histograms(diff, bins=bins)
    run.text(join("hist_A_wins.csv"), histogram_to_csv(hist.edges_a, hist.a_wins))
    run.text(join("hist_A_losses.csv"), histogram_to_csv(hist.edges_a, hist.a_losses))
    run.text(join("hist_S_wins.csv"), histogram_to_csv(hist.edges_s, hist.s_wins))
    run.text(join("hist_S_losses.csv"), histogram_to_csv(hist.edges_s, hist.s_losses))
    run.json(join("counts.json"), hist.summary())
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

_SCENE_OPTS = [("--scene", str, "step1d", "scene kind or JSON spec"),
               ("--seed", int, 0, "random seed")]

_COMMANDS = {
    "loss-eval": (cmd_loss_eval, "tabulate a loss on a grid, or evaluate the three-channel loss on images", [
        ("--gamma", float, 2.0, "asymmetry gamma >= 1"),
        ("--loss", str, "ale", f"loss kind: {', '.join(LOSS_KINDS)}"),
        ("--eps", str, None, "residual grid start:step:stop"),
        ("--c1", str, None, "foreground depth PGM"),
        ("--c2", str, None, "background depth PGM"),
        ("--sigma", str, None, "blend-weight PGM (0..65535)"),
        ("--target", str, None, "target depth PGM"),
        ("--fusion-weight", float, 1.0, "weight of the fusion term"),
        ("--output", str, None, "CSV path (stdout if omitted)"),
    ]),
    "analyze": (cmd_analyze, "predicted (and optionally fitted) minimisers over a (p1, gamma) sweep", [
        ("--p1", str, "0.1,0.3,0.5,0.7,0.9", "comma-separated foreground probabilities"),
        ("--gammas", str, "1.25,1.5,2,3,5", "comma-separated gamma values"),
        ("--d1", float, 10.0, "foreground depth"),
        ("--d2", float, 20.0, "background depth"),
        ("--empirical", bool, False, "also run the stochastic per-pixel fit"),
        ("--iterations", int, 20000, "SGD iterations"),
        ("--learning-rate", float, 0.05, "SGD step size"),
        ("--seed", int, 0, "random seed"),
        ("--output", str, None, "CSV path (stdout if omitted)"),
    ]),
    "synth": (cmd_synth, "render a synthetic scene's depth and labels", _SCENE_OPTS + [
        ("--out", str, ".", "output directory"),
    ]),
    "sparsify": (cmd_sparsify, "simulate a sparse LiDAR scan (or a regular grid)", _SCENE_OPTS + [
        ("--rows", int, 64, "kept elevation rings: 0, 8, 16, 32 or 64"),
        ("--offset", int, 0, "ring (or grid) phase offset"),
        ("--azimuth-step", float, None, "azimuth step in degrees"),
        ("--grid-step", int, None, "sample every N-th pixel instead of scanning"),
        ("--out", str, ".", "output directory"),
    ]),
    "semidense": (cmd_semidense, "accumulate scans from neighbouring frames into a semi-dense map", _SCENE_OPTS + [
        ("--frames", int, 5, "frames on each side of the reference"),
        ("--sigma-t", float, 0.0, "translation noise per axis (m)"),
        ("--sigma-r", float, 0.0, "rotation noise per axis (rad)"),
        ("--rows", int, 64, "rings per scan"),
        ("--motion", float, 0.4, "forward motion per frame (m)"),
        ("--out", str, ".", "output directory"),
    ]),
    "fit": (cmd_fit, "fit a twin-surface field (or a baseline) to sparse depth", [
        ("--sparse", str, None, "sparse depth PGM"),
        ("--baseline", str, "twise", "twise, l1, l2, l1+l2 or huber"),
        ("--gamma", float, 2.0, "asymmetry gamma >= 1"),
        ("--omega", str, "1,0,0", "multi-scale weights"),
        ("--schedule", str, None, "JSON list of [[start, stop], [w1, w2, w3]]"),
        ("--staged-schedule", bool, False, "three equal stages (1,1,1), (1,.1,.1), (1,0,0)"),
        ("--fusion-weight", float, 1.0, "weight of the fusion term"),
        ("--full-gradient", bool, False, "let the fusion term update the surfaces too"),
        ("--learning-rate", float, 0.5, "initial step size"),
        ("--iterations", int, 300, "descent iterations"),
        ("--bandwidth", float, 6.0, "kernel bandwidth in pixels"),
        ("--huber-delta", float, 1.0, "Huber transition point"),
        ("--seed", int, 0, "random seed"),
        ("--out", str, ".", "output directory"),
    ]),
    "metrics": (cmd_metrics, "standard and trimmed error metrics", [
        ("--pred", str, None, "predicted depth PGM"),
        ("--gt", str, None, "ground-truth depth PGM"),
        ("--labels", str, None, "label PGM for edge/inside regions"),
        ("--edge-radius", int, 3, "edge band radius in pixels"),
        ("--trim", float, 2.0, "trim threshold in meters"),
        ("--unit", str, "mm", "unit of linear metrics"),
        ("--output", str, None, "CSV path (stdout if omitted)"),
    ]),
    "compare": (cmd_compare, "metrics, error-difference maps and histograms for two predictions", [
        ("--pred-a", str, None, "first prediction"),
        ("--pred-b", str, None, "second prediction"),
        ("--gt", str, None, "ground truth"),
        ("--labels", str, None, "label PGM for edge/inside regions"),
        ("--edge-radius", int, 3, "edge band radius in pixels"),
        ("--trim", float, 2.0, "trim threshold in meters"),
        ("--unit", str, "mm", "unit of linear metrics"),
        ("--bins", int, 20, "histogram bins"),
        ("--scale-a", float, 1000.0, "encoding scale of the A map"),
        ("--scale-s", float, 50.0, "encoding scale of the S map"),
        ("--out", str, ".", "output directory"),
    ]),
}


def _defaults(command: str) -> dict:
    return {flag[2:].replace("-", "_"): default for flag, _, default, _ in _COMMANDS[command][2]}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="twise", description="Twin-surface depth experiments on synthetic scenes.")
    parser.add_argument("--version", action="version", version=f"twise {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text, opts) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON file of parameters; flags override it")
        for flag, typ, default, help_opt in opts:
            if typ is bool:
                p.add_argument(flag, action="store_true", default=argparse.SUPPRESS, help=help_opt)
            else:
                p.add_argument(flag, type=typ, default=argparse.SUPPRESS,
                               help=f"{help_opt} (default: {default})")
    return parser


def resolve_config(command: str, flags: dict) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags."""
    cfg = _defaults(command)
    path = flags.pop("config", None)
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {unknown}")
        cfg.update(doc)
    cfg.update(flags)
    return cfg


def _attach_negative_values(argv: list[str]) -> list[str]:
    """Turn ``--eps -2:1:2`` into ``--eps=-2:1:2`` so argparse does not see a flag."""
    out = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        nxt = argv[i + 1] if i + 1 < len(argv) else ""
        if tok.startswith("--") and "=" not in tok and len(nxt) > 1 and nxt[0] == "-" and nxt[1] in "0123456789.":
            out.append(f"{tok}={nxt}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = vars(parser.parse_args(_attach_negative_values(argv)))
    command = args.pop("command")
    try:
        cfg = resolve_config(command, args)
        return _COMMANDS[command][0](cfg, _Run(command, cfg))
    except UsageError as exc:
        sys.stderr.write(f"twise {command}: error: {exc}\n")
        return EXIT_USAGE
    except (OSError, ValueError, TypeError) as exc:
        sys.stderr.write(f"twise {command}: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
