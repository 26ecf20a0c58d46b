"""``polfuse`` command line: gen, train, predict, eval, sweep, gradcheck.

Exit codes: 0 success, 1 failed check, 2 usage or I/O error, 3 training divergence.
"""

import argparse
import logging
import os
import sys

from . import io
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import PARTS, DataError, SceneConfig, chessboard_partition, generate_synthetic_scene
from .metrics import MetricsError, accumulate, metrics, render_map
from .runconfig import ConfigError, RunConfig

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

GAMMA_GRID = tuple(1.5 + 0.5 * i for i in range(14))  # 1.5 .. 8.0
LAMBDA_GRID = (0.0, 0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0)

log = logging.getLogger("polfuse")


class UsageError(Exception):
    pass


def _parse_size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like HxW, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise UsageError("--size dimensions must be positive")
    return h, w


def _write(path, payload):
    mode = "w" if isinstance(payload, str) else "wb"
    with open(path, mode) as f:
        f.write(payload)


def _load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "set", None):
        cfg = cfg.with_overrides(args.set)
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args):
    if args.bands < 2:
        raise UsageError("--bands must be >= 2 (cross-band interaction needs at least two bands)")
    if args.classes < 1:
        raise UsageError("--classes must be >= 1")
    h, w = _parse_size(args.size)
    scene = generate_synthetic_scene(SceneConfig(classes=args.classes, bands=args.bands, height=h, width=w,
                                                 seed=args.seed, looks=args.looks))
    io.write_cube(scene, args.out)
    print(f"wrote {args.out}: K={args.bands} C={args.classes} H={h} W={w}")
    return EXIT_OK


def _ckpt_name(out, part, rep, repeats):
    suffix = "" if repeats == 1 else f"_r{rep}"
    return os.path.join(out, f"model_{part}{suffix}.mfst"), os.path.join(out, f"train_{part}{suffix}.log")


def cmd_train(args):
    from .train import train

    cfg = _load_config(args)
    cube = io.read_cube(args.data)
    os.makedirs(args.out, exist_ok=True)
    parts = PARTS if args.part == "both" else (args.part,)
    repeats = args.repeats if args.repeats is not None else cfg.repeats
    base = cfg.train
    split = chessboard_partition(cube.height, cube.width, base.grid_rows, base.grid_cols)
    for rep in range(repeats):
        tc = RunConfig.from_dict({**base.to_dict(), "seed": base.seed + rep}).train
        for part in parts:
            ckpt, logfile = _ckpt_name(args.out, part, rep, repeats)
            with open(logfile, "w") as lf:
                def on_epoch(rec, lf=lf):
                    lf.write(rec.log_line() + "\n")
                    lf.flush()
                result = train(cube, split, part, tc, on_epoch)
            save_checkpoint(result.model, ckpt)
            last = result.history[-1]
            print(f"part={part} seed={tc.seed} epochs={len(result.history)} l_total={last.total:.6f} "
                  f"alpha={','.join(f'{a:.6f}' for a in last.alpha)} -> {ckpt}")
    return EXIT_OK


def cmd_predict(args):
    from .train import predict_image

    cube = io.read_cube(args.data)
    models = {"black": load_checkpoint(args.ckpt_black), "white": load_checkpoint(args.ckpt_white)}
    for part, model in models.items():
        if model.source_bands != cube.n_bands:
            raise UsageError(f"checkpoint for {part} expects {model.source_bands} band(s), cube has {cube.n_bands}")
        if model.n_classes != cube.n_classes:
            raise UsageError(f"checkpoint for {part} has {model.n_classes} classes, cube has {cube.n_classes}")
        if model.part is not None and model.part != part:
            raise UsageError(f"--ckpt-{part} holds a model trained on the {model.part} part")
    cfg = models["black"].config
    split = chessboard_partition(cube.height, cube.width, cfg.grid_rows, cfg.grid_cols)
    pred = predict_image(cube, models, split)
    io.write_labels(pred, args.out)
    if args.map:
        _write(args.map, render_map(pred))
    print(f"wrote {args.out}: {cube.height}x{cube.width}")
    return EXIT_OK


def _read_truth(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] == io.MFPC_MAGIC:
        cube = io.cube_from_bytes(buf)
        return cube.labels, cube.n_classes
    labels = io.labels_from_bytes(buf)
    return labels, int(labels.max()) if labels.size else 0


def cmd_eval(args):
    truth, n_classes = _read_truth(args.truth)
    if args.classes:
        n_classes = args.classes
    cm = None
    for path in args.pred:
        pred = io.read_labels(path)
        if pred.shape != truth.shape:
            raise UsageError(f"prediction {path} is {pred.shape[0]}x{pred.shape[1]}, "
                             f"truth is {truth.shape[0]}x{truth.shape[1]}")
        n_classes = max(n_classes, int(pred.max()) if pred.size else 0)
        part = accumulate(truth, pred, n_classes)
        cm = part if cm is None else cm + part
    result = metrics(cm)
    sys.stdout.write(result.report())
    if args.json:
        _write(args.json, result.to_json())
    return EXIT_OK


def _parse_values(text, param):
    if text is None:
        return GAMMA_GRID if param == "gamma" else LAMBDA_GRID
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"--values must be a comma-separated list of numbers, got {text!r}") from None
    if not values:
        raise UsageError("--values is empty")
    if param == "gamma" and any(v <= 1 for v in values):
        raise UsageError(f"gamma values must be > 1, got {[v for v in values if v <= 1]}")
    if param == "lambda" and any(v < 0 for v in values):
        raise UsageError("lambda values must be >= 0")
    return values


def cmd_sweep(args):
    from .train import predict_image, train_pair

    values = _parse_values(args.values, args.param)
    cfg = _load_config(args)
    cube = io.read_cube(args.data)
    key = "gamma" if args.param == "gamma" else "lam"
    rows = []
    for v in values:
        tc = RunConfig.from_dict({**cfg.train.to_dict(), key: v}).train
        results, split = train_pair(cube, tc)
        pred = predict_image(cube, {p: r.model for p, r in results.items()}, split)
        m = metrics(accumulate(cube.labels, pred, cube.n_classes))
        rows.append((v, m))
        print(f"{args.param}={v:g} OA={m.oa:.4f} AA={m.aa:.4f} kappa={m.kappa:.4f}", flush=True)
    print(f"{args.param:>8s} | " + " | ".join(f"{v:g}" for v, _ in rows))
    print(f"{'OA':>8s} | " + " | ".join(f"{m.oa:.4f}" for _, m in rows))
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_gradcheck

    report = run_gradcheck(seed=args.seed)
    print("\n".join(report.lines()))
    if not report.passed:
        name, err = report.worst
        print(f"gradient check failed: worst op {name} rel_err={err:.3e}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="polfuse", description="Multi-band PolSAR fusion classifier.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic MFPC cube")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--bands", type=int, default=2)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--size", default="200x200")
    g.add_argument("--looks", type=int, default=4)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train chessboard models and write checkpoints plus epoch logs")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="RunConfig JSON; defaults apply when omitted")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--part", choices=("black", "white", "both"), default="both")
    t.add_argument("--repeats", type=int, help="independent runs with seeds seed, seed+1, ...")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="stitch a full-image prediction from the two chessboard models")
    r.add_argument("--data", required=True)
    r.add_argument("--ckpt-black", required=True)
    r.add_argument("--ckpt-white", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--map", help="optional PPM rendering")
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="per-class accuracy, OA, AA and kappa")
    e.add_argument("--pred", required=True, nargs="+", help="one or more MFLB rasters (pooled)")
    e.add_argument("--truth", required=True, help="MFLB raster or MFPC cube")
    e.add_argument("--classes", type=int, help="number of classes (default: from the truth file)")
    e.add_argument("--json", help="also write the metrics as JSON")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train per value of gamma or lambda and print an OA table")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--param", choices=("gamma", "lambda"), required=True)
    s.add_argument("--values", help="comma-separated list (default: the standard grid)")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op at float64")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .train import TrainingDiverged

    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigError, io.FormatError, CheckpointError, DataError, MetricsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

