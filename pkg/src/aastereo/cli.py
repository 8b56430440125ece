"""Command-line entry point: train, infer, eval, gradcheck, complexity, solve-xscale, gen-data."""

from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_EMPTY = 0, 1, 2, 3
THREADS_ENV = "AASTEREO_THREADS"

log = logging.getLogger("aastereo")


class UsageError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def write_manifest(path, args, command, outputs=(), inputs=(), config=None, seed=None) -> None:
    """Record the run; without a path the manifest goes to stderr as one JSON line."""
    manifest = {
        "command": command,
        "argv": args.argv,
        "config": config or {},
        "seed": seed,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
    }
    if path is None:
        print("manifest " + json.dumps(manifest, sort_keys=True), file=sys.stderr)
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# config files

MODEL_KEYS = {"scales", "base_factor", "channels", "max_disp", "num_modules", "num_plain", "kernel",
              "groups", "dilation", "refinement", "in_channels", "refine_channels", "seed"}
TRAIN_KEYS = {"lr": float, "beta1": float, "beta2": float, "eps": float, "epochs": int,
              "steps_per_epoch": int, "batch_size": int, "final_only": bool, "seed": int,
              "halve_at": "ints", "loss_weights": "floats"}
DATA_KEYS = {"count": int, "val_count": int, "size": str, "disp_min": int, "disp_max": int,
             "density": float, "num_layers": int, "seed": int}


def _line_of(path, section: str, key: str) -> int | None:
    current = None
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            text = line.strip()
            if text.startswith("[") and text.endswith("]"):
                current = text[1:-1].strip()
            elif current == section and text.split("=", 1)[0].split(":", 1)[0].strip().lower() == key:
                return n
    return None


def read_config(path) -> dict:
    """Flat ``key = value`` file with ``[model]``, ``[train]`` and ``[data]`` sections."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    out = {"model": {}, "train": {}, "data": {}}
    for section in parser.sections():
        if section not in out:
            raise UsageError(f"{path}: unknown section [{section}]")
        allowed = {"model": MODEL_KEYS, "train": TRAIN_KEYS, "data": DATA_KEYS}[section]
        for key, raw in parser.items(section):
            if key not in allowed:
                raise UsageError(f"{path}:{_line_of(path, section, key)}: unknown key {key!r} in [{section}]")
            kind = TRAIN_KEYS.get(key) if section == "train" else DATA_KEYS.get(key) if section == "data" else str
            try:
                if kind == "ints":
                    value = [int(v) for v in raw.replace(",", " ").split()]
                elif kind == "floats":
                    value = [float(v) for v in raw.replace(",", " ").split()]
                elif kind is bool:
                    value = parser.getboolean(section, key)
                elif kind in (int, float):
                    value = kind(raw)
                else:
                    value = raw
            except ValueError:
                raise UsageError(f"{path}:{_line_of(path, section, key)}: bad value {raw!r} for {key} "
                                 f"in [{section}]") from None
            out[section][key] = value
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_complexity(args) -> int:
    from .complexity import ComplexityQuery, complexity

    try:
        report = complexity(ComplexityQuery(args.k, args.c, args.d, args.h, args.w), args.layers)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for line in report.lines():
        print(line)
    r = report.ratio
    print(f"RESULT conv3d={report.conv3d} adaptive={report.adaptive} ratio={r.numerator}/{r.denominator}")
    write_manifest(args.manifest, args, "complexity", config=vars(report.query))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import REGISTRY, run_gradchecks

    names = None if args.scope == "all" else [args.scope]
    if names and names[0] not in REGISTRY:
        print(f"unknown operator {args.scope!r}; choose from: all, {', '.join(REGISTRY)}", file=sys.stderr)
        return EXIT_USAGE
    reports = run_gradchecks(names, seed=args.seed)
    print(f"{'operator':<20s} {'max rel err':>10s}  status")
    for r in reports:
        print(r.line())
    failed = [r.op for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed")
    write_manifest(args.manifest, args, "gradcheck", seed=args.seed, config={"scope": args.scope})
    return EXIT_FAIL if failed else EXIT_OK


def cmd_solve_xscale(args) -> int:
    from .cross_scale import solve_cross_scale

    values = np.asarray(args.values, dtype=np.float64)
    if args.scales is not None and args.scales != values.size:
        raise UsageError(f"--scales {args.scales} but {values.size} values given")
    if args.lam < 0:
        raise UsageError(f"--lam must be >= 0, got {args.lam}")
    v_hat, proj = solve_cross_scale(values, args.lam)
    print("P =")
    for row in proj:
        print("  " + " ".join(f"{x: .12g}" for x in row))
    print("v_hat = " + " ".join(repr(float(x)) for x in v_hat))
    write_manifest(args.manifest, args, "solve-xscale", config={"lam": args.lam, "values": args.values})
    return EXIT_OK


def _synthetic_pairs(count, size, disp_max, seed, **kw):
    from .data_io import generate_dataset

    return generate_dataset(count, height=size[0], width=size[1], disp_max=disp_max, seed=seed, **kw)


def cmd_gen_data(args) -> int:
    from .data_io import write_stereo_pair

    out = Path(args.out)
    pairs = _synthetic_pairs(args.count, args.size, args.disp_max, args.seed, disp_min=args.disp_min,
                             density=args.density, num_layers=args.layers)
    for i, pair in enumerate(pairs):
        write_stereo_pair(pair, out, f"{i:04d}")
    print(f"wrote {len(pairs)} stereo pairs to {out}")
    write_manifest(args.manifest or out / "manifest.json", args, "gen-data", outputs=[out], seed=args.seed,
                   config={"count": args.count, "size": list(args.size), "disp_max": args.disp_max})
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .data_io import load_stereo_dir
    from .model import StereoModel, ModelConfig
    from .train import TrainerConfig, TrainingDiverged, train

    cfg = read_config(args.config) if args.config else {"model": {}, "train": {}, "data": {}}
    model_kw = dict(cfg["model"])
    train_kw = dict(cfg["train"])
    data_kw = dict(cfg["data"])
    for key, value in (("max_disp", args.dmax), ("seed", args.seed)):
        if value is not None:
            model_kw[key] = value
    for key, value in (("lr", args.lr), ("batch_size", args.batch_size), ("epochs", args.epochs),
                       ("seed", args.seed)):
        if value is not None:
            train_kw[key] = value
    if args.steps is not None:
        train_kw["epochs"] = args.steps
        train_kw["steps_per_epoch"] = 1
    try:
        model_cfg = ModelConfig.from_dict(model_kw)
        trainer_cfg = TrainerConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None

    if args.synthetic:
        size = args.size or _size(data_kw.get("size", "32x64"))
        disp_max = data_kw.get("disp_max", model_cfg.max_disp // 3)
        seed = data_kw.get("seed", trainer_cfg.seed)
        extra = {k: data_kw[k] for k in ("disp_min", "density", "num_layers") if k in data_kw}
        count = args.count or data_kw.get("count", 64)
        dataset = _synthetic_pairs(count, size, disp_max, seed, **extra)
        val = _synthetic_pairs(data_kw.get("val_count", max(count // 4, 1)), size, disp_max, seed + 1, **extra)
        inputs = []
    else:
        if args.data is None:
            raise UsageError("train: give --data DIR or --synthetic")
        try:
            dataset = load_stereo_dir(args.data)
            val = load_stereo_dir(args.val) if args.val else None
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from None
        inputs = [args.data] + ([args.val] if args.val else [])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = StereoModel(model_cfg)
    log_path = out / "train.log"
    log_path.write_text("")

    def on_epoch(record):
        with open(log_path, "a") as fh:
            fh.write(record.line() + "\n")

    try:
        result = train(model, dataset, trainer_cfg, val=val, on_epoch=on_epoch)
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL
    ckpt = out / "checkpoint.aas"
    save_checkpoint(model, ckpt, result.optimizer, {"data_seed": trainer_cfg.seed})
    last = result.log[-1]
    print(f"trained {len(result.log)} epochs; final loss {last.train_loss:.6f}, val EPE {last.val_epe:.4f}")
    write_manifest(args.manifest or out / "manifest.json", args, "train", outputs=[ckpt, log_path],
                   inputs=inputs, seed=trainer_cfg.seed,
                   config={"model": model_cfg.to_dict(), "train": vars(trainer_cfg)})
    return EXIT_OK


def cmd_infer(args) -> int:
    from .autodiff import ShapeError
    from .checkpoint import CheckpointError, load_checkpoint
    from .data_io import FormatError, read_image, write_image, write_pfm

    try:
        model = load_checkpoint(args.checkpoint)
        left, right = read_image(args.left), read_image(args.right)
    except (OSError, CheckpointError, FormatError) as exc:
        raise UsageError(str(exc)) from None
    if left.shape != right.shape:
        raise UsageError(f"left {left.shape} and right {right.shape} images differ in size")
    if left.shape[2] != model.config.in_channels:
        raise UsageError(f"model expects {model.config.in_channels} channels, images have {left.shape[2]}")
    try:
        disp = model.predict(left, right)
    except ShapeError as exc:
        raise UsageError(str(exc)) from None
    write_pfm(disp, args.out)
    outputs = [args.out]
    if args.preview:
        write_image(np.clip(disp / model.config.max_disp, 0.0, 1.0), args.preview)
        outputs.append(args.preview)
    print(f"disparity {disp.shape[0]}x{disp.shape[1]} mean {disp.mean():.4f} -> {args.out}")
    write_manifest(args.manifest or f"{args.out}.manifest.json", args, "infer", outputs=outputs,
                   inputs=[args.checkpoint, args.left, args.right], config=model.config.to_dict())
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data_io import FormatError, read_image, read_pfm
    from .head import evaluate

    try:
        pred, gt = read_pfm(args.pred), read_pfm(args.gt)
        mask = read_image(args.mask)[..., 0] > 0.5 if args.mask else None
    except (OSError, FormatError) as exc:
        raise UsageError(str(exc)) from None
    if pred.shape != gt.shape or (mask is not None and mask.shape != gt.shape):
        raise UsageError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}"
                         + (f", mask {mask.shape}" if mask is not None else ""))
    gt_valid = np.isfinite(gt.values) & (gt.values >= 0)
    gt.valid = gt_valid
    try:
        report = evaluate(pred, gt, mask)
    except ValueError as exc:
        print(f"eval: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    sys.stdout.write(report.to_text())
    print(report.to_line())
    if args.out:
        Path(args.out).write_text(report.to_text() + report.to_line() + "\n")
    write_manifest(args.manifest, args, "eval", inputs=[p for p in (args.pred, args.gt, args.mask) if p],
                   outputs=[args.out] if args.out else [])
    return EXIT_OK


def cmd_rerun(args) -> int:
    manifest = json.loads(Path(args.manifest_file).read_text())
    return main(manifest["argv"])


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aastereo", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--manifest", default=None, help="where to write the run manifest (JSON)")
        p.set_defaults(func=func)
        return p

    p = add("complexity", cmd_complexity, "operation counts: 3D conv vs adaptive aggregation")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--c", type=int, default=64)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--h", type=int, default=1)
    p.add_argument("--w", type=int, default=1)
    p.add_argument("--layers", type=int, default=1)

    p = add("gradcheck", cmd_gradcheck, "finite-difference checks of every differentiable operator")
    p.add_argument("scope", nargs="?", default="all")
    p.add_argument("--seed", type=int, default=0)

    p = add("solve-xscale", cmd_solve_xscale, "closed-form inter-scale consistent costs")
    p.add_argument("--scales", "-S", type=int, default=None)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("values", type=float, nargs="+")

    p = add("gen-data", cmd_gen_data, "write synthetic random-dot stereo pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=_size, default=(32, 64))
    p.add_argument("--disp-min", type=int, default=0)
    p.add_argument("--disp-max", type=int, default=8)
    p.add_argument("--density", type=float, default=0.5)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)

    p = add("train", cmd_train, "train a model; writes checkpoint, log and manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--val", default=None)
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--size", type=_size, default=None)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--dmax", type=int, default=None, help="model maximum disparity (full resolution)")
    p.add_argument("--steps", type=int, default=None, help="total optimizer steps, one log line each")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("infer", cmd_infer, "predict a full-resolution disparity map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preview", default=None, help="optional 8-bit gray PGM preview")

    p = add("eval", cmd_eval, "EPE / >1px / D1 of a predicted PFM against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("rerun", help="re-execute the command recorded in a manifest")
    p.add_argument("manifest_file")
    p.set_defaults(func=cmd_rerun, manifest=None)
    return parser


def _limit_threads():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    if not value.isdigit() or int(value) < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(value))


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        limiter = _limit_threads()
    except UsageError as exc:
        print(f"aastereo: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"aastereo {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"aastereo {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
