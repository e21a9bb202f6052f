"""Command-line entry point: phantom, degrade, train, infer, eval, memstat.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import (DegradeSpec, NormSpec, Volume, degrade, denormalize, list_volumes,
                   load_volume, make_phantom, normalize, save_volume, sliding_window_infer)
from .errors import ConfigError, RevGANError, ShapeError
from .functional import upsample_trilinear
from .ledger import format_table, ledger_report, write_csv
from .metrics import evaluate_set
from .tensor import Tensor, no_grad

log = logging.getLogger("revgan3d")


class UsageError(Exception):
    pass


def _ints(text, count=None, minimum=None, what="value"):
    try:
        vals = tuple(int(t) for t in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must be comma-separated integers: {text!r}")
    if count is not None and len(vals) != count:
        raise argparse.ArgumentTypeError(f"{what} needs {count} integers, got {text!r}")
    if minimum is not None and min(vals) < minimum:
        raise argparse.ArgumentTypeError(f"{what} entries must be >= {minimum}, got {text!r}")
    return vals


def _dims(text):
    return _ints(text, 3, 8, "dims")


def _factors(text):
    return _ints(text, 3, 1, "factors")


def _depths(text):
    return _ints(text, None, 0, "depths")


def _patch(text):
    vals = _ints(text, None, 1, "patch")
    if len(vals) == 1:
        return vals * 3
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"patch needs 1 or 3 integers, got {text!r}")
    return vals


def _overlap(text):
    v = float(text)
    if not 0.0 <= v <= 0.5:
        raise argparse.ArgumentTypeError(f"overlap must lie in [0, 0.5], got {v}")
    return v


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(args):
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    for i in range(args.count):
        hu = make_phantom(args.dims, rng)
        meta = {"source": "synthetic phantom", "seed": str(args.seed), "index": str(i)}
        save_volume(Volume(hu, (1.0, 1.0, 1.0), meta), out / f"phantom_{i:03d}")
    log.info("wrote %d phantom volumes to %s", args.count, out)
    return 0


def _require_volumes(directory):
    paths = list_volumes(directory)
    if not paths:
        raise RevGANError(f"no .rvh volumes found in {directory}")
    return paths


def cmd_degrade(args):
    norm = NormSpec()
    spec = DegradeSpec(args.factors)
    out = Path(args.out)
    for path in _require_volumes(args.input):
        v = load_volume(path)
        low = degrade(normalize(v, norm), spec)
        res = denormalize(low, norm, tuple(s * f for s, f in zip(v.spacing, args.factors)))
        res.meta = dict(v.meta, degraded_from=path.stem,
                        degrade_factors=",".join(map(str, args.factors)),
                        degrade_method="block-mean in normalised space",
                        norm_window=f"{norm.lo},{norm.hi}")
        save_volume(res, out / path.stem, dtype="f32")
    return 0


def _train_config(args):
    from .train import TrainConfig

    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise RevGANError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
    for key in ("mode", "depth", "memory", "epochs", "seed"):
        val = getattr(args, key)
        if val is not None:
            data[key] = val
    if args.out:
        data["out_dir"] = args.out
    try:
        return TrainConfig.from_dict(data)
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args):
    from .train import fit, load_dataset

    config = _train_config(args)
    try:
        dataset = load_dataset(config)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    result = fit(config, dataset, config.out_dir, resume=args.resume)
    log.info("finished %d steps; log at %s", len(result.records), result.log_path)
    return 0


def _fit_patch(patch, shape, stride):
    """Largest tile no bigger than `patch` or the volume that the encoder accepts."""
    out = []
    for ax, p, n, s in zip("DHW", patch, shape, stride):
        q = min(p, n) // s * s
        if q < 1:
            raise ShapeError(f"volume extent {n} along {ax} is below the encoder stride {s}")
        out.append(q)
    return tuple(out)


def cmd_infer(args):
    norm = NormSpec()
    if args.model is None and not args.baseline:
        raise UsageError("infer needs --model, --baseline, or both")
    model = None
    factors = args.factors
    if args.model is not None:
        if not Path(args.model).exists():
            raise RevGANError(f"checkpoint {args.model} not found")
        model, _, _ = checkpoint.load_model(args.model)
        factors = model.config.y_scale if model.config.task == "super-resolution" else factors
    out = Path(args.out)
    for path in _require_volumes(args.input):
        v = load_volume(path)
        x = normalize(v, norm)
        if model is not None:
            cfg = model.config
            stride = (1, 1, 1) if cfg.arch == "identity" else (2, 2, 2)
            patch = _fit_patch(args.patch, x.shape, stride)
            dtype = cfg.np_dtype

            def model_fn(tile):
                with no_grad():
                    t = Tensor(tile.astype(dtype)[None, None])
                    return model.translate_xy(t).data[0, 0]

            y = sliding_window_infer(x, model_fn, patch, args.overlap)
            scale = tuple(a // b for a, b in zip(y.shape, x.shape))
            spacing = tuple(s / f for s, f in zip(v.spacing, scale))
            res = denormalize(y, norm, spacing, dict(v.meta, translated_by=str(args.model)))
            save_volume(res, out / path.stem, dtype="f32")
        if args.baseline:
            with no_grad():
                up = upsample_trilinear(Tensor(x[None, None]), factors).data[0, 0]
            spacing = tuple(s / f for s, f in zip(v.spacing, factors))
            res = denormalize(up, norm, spacing, dict(v.meta, baseline="trilinear"))
            save_volume(res, (out / "trilinear" if model is not None else out) / path.stem,
                        dtype="f32")
    return 0


def cmd_eval(args):
    norm = NormSpec()
    preds = {p.stem: p for p in _require_volumes(args.pred)}
    targets = {p.stem: p for p in _require_volumes(args.target)}
    if set(preds) != set(targets):
        missing = sorted(set(preds) ^ set(targets))
        raise RevGANError(f"prediction and target volume lists differ: {missing}")
    ids = sorted(preds)
    pv, tv = [], []
    for name in ids:
        p, t = normalize(load_volume(preds[name]), norm), normalize(load_volume(targets[name]),
                                                                    norm)
        if p.shape != t.shape:
            raise ShapeError(f"{name}: prediction extent {p.shape} != target {t.shape}")
        pv.append(p)
        tv.append(t)
    report = evaluate_set(pv, tv, ids)
    report.write_csv(args.out)
    for key in report.COLUMNS[1:]:
        print(f"{key}: mean {report.mean[key]:.6g}  stddev {report.stddev[key]:.6g}")
    return 0


def cmd_memstat(args):
    rows = ledger_report(args.depths, args.patch, args.channels, args.task, args.base_channels)
    print(format_table(rows))
    if args.csv:
        write_csv(rows, args.csv)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="revgan3d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="write synthetic HU phantom volumes")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--dims", type=_dims, default=(64, 64, 64))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("degrade", help="block-mean degrade every volume in a directory")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--factors", type=_factors, default=(4, 2, 2))
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("train", help="train a model from a JSON config")
    s.add_argument("--config")
    s.add_argument("--mode", choices=("paired", "unpaired"))
    s.add_argument("--depth", type=int)
    s.add_argument("--memory", choices=("reversible", "naive"))
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="sliding-window X -> Y translation of whole volumes")
    s.add_argument("--model")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--overlap", type=_overlap, default=0.25)
    s.add_argument("--patch", type=_patch, default=(64, 64, 64))
    s.add_argument("--baseline", action="store_true", help="also write trilinear up-sampling")
    s.add_argument("--factors", type=_factors, default=(4, 2, 2),
                   help="baseline up-sampling factors when no SR model is given")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="MAE / PSNR / SSIM report")
    s.add_argument("--pred", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("memstat", help="stored-activation bytes per core depth")
    s.add_argument("--depths", type=_depths, default=(0, 1, 2, 4, 8))
    s.add_argument("--patch", type=int, default=64)
    s.add_argument("--channels", type=int, default=64)
    s.add_argument("--base-channels", type=int, default=32)
    s.add_argument("--task", choices=("domain-adaptation", "super-resolution"),
                   default="domain-adaptation")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_memstat)
    return p


def _thread_limit():
    value = os.environ.get("REVGAN3D_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"REVGAN3D_THREADS must be a positive integer, got {value!r}")
    if n < 1:
        raise UsageError(f"REVGAN3D_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"revgan3d: error: {exc}", file=sys.stderr)
        return 2
    except (RevGANError, OSError, ValueError) as exc:
        print(f"revgan3d: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
