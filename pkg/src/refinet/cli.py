"""``refinet`` command line: train, refine, pyramid, gradcheck, eval, make-toy.

Exit codes: 0 ok, 1 bad config or input, 2 numeric abort, 3 gradcheck failure.
Outputs are written to a staging directory next to the target and renamed
into place only when the command succeeds.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
import warnings
from pathlib import Path

import numpy as np

from . import data as D
from . import gradcheck
from .checkpoint import CheckpointError, load_checkpoint
from .evalmetrics import evaluate, prepare_refine_input, refine
from .training import LOG_NAME, NonFiniteLossError, TrainConfig, train

log = logging.getLogger("refinet")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3
SEED_ENV = "REFINET_SEED"
RESOLVED_CONFIG = "resolved_config.json"
PATH_KEYS = ("data_dir", "output_dir", "resume")


class UsageError(Exception):
    """Bad configuration or input; maps to exit code 1."""


# ---------------------------------------------------------------------------
# config resolution


def default_run_config() -> dict:
    cfg = TrainConfig().to_dict()
    cfg.update({k: None for k in PATH_KEYS})
    return cfg


def resolve_config(config_path: str | None, overrides: dict, env=None) -> dict:
    """Precedence, lowest first: defaults, $REFINET_SEED, config file, flags."""
    env = os.environ if env is None else env
    cfg = default_run_config()
    if env.get(SEED_ENV):
        try:
            cfg["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    if config_path:
        try:
            with open(config_path) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config {config_path} must hold a JSON object")
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys in {config_path}: {sorted(unknown)}")
        cfg.update(file_cfg)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("data_dir", "output_dir"):
        if not cfg.get(key):
            raise UsageError(f"{key} is required (set it in the config file or pass --{key.replace('_', '-')})")
    return cfg


def train_config_from(run_cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict({k: v for k, v in run_cfg.items() if k not in PATH_KEYS})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


# ---------------------------------------------------------------------------
# staging


@contextlib.contextmanager
def staged_output(target):
    """Yield a scratch directory that replaces ``target`` only on clean exit."""
    target = Path(target)
    if target.exists() and (not target.is_dir() or any(target.iterdir())):
        raise UsageError(f"output directory {target} already exists and is not empty")
    target.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(dir=target.parent, prefix=f".{target.name}.stage-"))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    if target.exists():
        target.rmdir()
    os.replace(stage, target)


# ---------------------------------------------------------------------------
# commands


def _parse_mask(text: str) -> list[bool]:
    try:
        return [bool(int(t)) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"injection mask must look like 1,0,1 (got {text!r})") from None


def _copy_log_prefix(src: Path, dst: Path, upto_step: int) -> None:
    with open(src, newline="") as fh:
        rows = list(csv.reader(fh))
    with open(dst, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(rows[0])
        w.writerows(r for r in rows[1:] if int(r[0]) <= upto_step)


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k, None) for k in default_run_config()}
    run_cfg = resolve_config(args.config, overrides)
    cfg = train_config_from(run_cfg)
    data_dir = Path(run_cfg["data_dir"])
    if not data_dir.is_dir():
        raise UsageError(f"data directory not found: {data_dir}")
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            ds = D.load_image_dir(data_dir, cfg.target_res, seed=cfg.seed)
        for w in caught:
            log.warning("%s", w.message)
        D.batches_per_epoch(ds, cfg.batch_size)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None

    state = None
    if run_cfg.get("resume"):
        try:
            state = load_checkpoint(run_cfg["resume"])
        except CheckpointError as exc:
            raise UsageError(str(exc)) from None

    with staged_output(run_cfg["output_dir"]) as stage:
        with open(stage / RESOLVED_CONFIG, "w") as fh:
            json.dump(run_cfg, fh, indent=2, sort_keys=True)
        if state is not None:
            prev_log = Path(run_cfg["resume"]).parent / LOG_NAME
            if prev_log.exists():
                _copy_log_prefix(prev_log, stage / LOG_NAME, state.step)
        try:
            final = train(cfg, ds, stage, state=state)
        except NonFiniteLossError as exc:
            print(f"error: training aborted: {exc}", file=sys.stderr)
            raise _Abort(EXIT_NUMERIC) from None
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    print(f"trained {final.step} steps; final k_t={final.k_t:.6f}; outputs in {run_cfg['output_dir']}")
    return EXIT_OK


class _Abort(Exception):
    def __init__(self, code: int):
        super().__init__(code)
        self.code = code


def _load_generator(path):
    try:
        return load_checkpoint(path).generator
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None


def cmd_refine(args) -> int:
    gen = _load_generator(args.checkpoint)
    src = Path(args.input)
    if src.is_dir():
        files = D.list_images(src)
    elif src.is_file():
        files = [src]
    else:
        raise UsageError(f"input not found: {src}")
    if not files:
        raise UsageError(f"no PNG images in {src}")
    prepared = []
    for f in files:
        try:
            prepared.append((f.stem, prepare_refine_input(D.read_png(f), gen.config)))
        except (OSError, ValueError) as exc:
            raise UsageError(f"{f}: {exc}") from None
    with staged_output(args.output) as stage:
        for name, pyr in prepared:
            D.write_png(stage / f"{name}_refined.png", D.to_hwc_pixels(refine(gen, pyr)[0]))
    print(f"refined {len(prepared)} image(s) into {args.output}")
    return EXIT_OK


def cmd_pyramid(args) -> int:
    try:
        pixels = D.read_png(args.input)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read {args.input}: {exc}") from None
    h, w = pixels.shape[:2]
    if h != w or h & (h - 1):
        raise UsageError(f"pyramid input must be square with a power-of-two side, got {w}x{h}")
    try:
        pyr = D.make_pyramid(D.Tensor(D.to_chw(pixels)[None]), args.lowest_res)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with staged_output(args.output) as stage:
        for level in pyr.levels:
            r = level.shape[-1]
            D.write_png(stage / f"level_{r}x{r}.png", D.to_hwc_pixels(level.data[0]))
    print(f"wrote {len(pyr.levels)} level(s) into {args.output}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else int(os.environ.get(SEED_ENV) or 0)
    modes = {"32": [np.float32], "64": [np.float64], "both": [np.float32, np.float64]}[args.precision]
    failed = []
    for dtype in modes:
        try:
            results = gradcheck.run_suite(seed, trials=args.trials, dtype=dtype, perturb=args.perturb_op)
        except KeyError as exc:
            raise UsageError(str(exc)) from None
        print(f"# {np.dtype(dtype).name}")
        print(gradcheck.format_table(results))
        failed += [f"{r.op} ({np.dtype(dtype).name})" for r in results if not r.passed]
    if failed:
        print("gradcheck FAILED: " + ", ".join(failed), file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        with staged_output(args.output) as stage:
            records = evaluate(args.checkpoint, args.input, stage)
    except (CheckpointError, FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    l1 = float(np.mean([r.l1_hr for r in records]))
    print(f"evaluated {len(records)} image(s); mean L1 to HR {l1:.5f}; results in {args.output}")
    return EXIT_OK


def cmd_make_toy(args) -> int:
    with staged_output(args.output) as stage:
        D.write_toy_dir(stage, args.count, args.res, args.seed)
    print(f"wrote {args.count} toy images ({args.res}x{args.res}) into {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refinet", description="Image-conditioned BEGAN refiner toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a refiner and its critic")
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--data-dir", dest="data_dir")
    t.add_argument("--output-dir", dest="output_dir")
    t.add_argument("--resume", help="checkpoint to continue from")
    for key, typ in [("gamma", float), ("lambda_k", float), ("lambda_r", float), ("lr", float),
                     ("batch_size", int), ("total_steps", int), ("seed", int), ("target_res", int),
                     ("lowest_res", int), ("base_filters", int), ("embedding_dim", int),
                     ("convs_per_block", int), ("checkpoint_every", int), ("log_every", int)]:
        t.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ)
    t.add_argument("--variant", choices=["A", "B", "C"])
    t.add_argument("--injection-mask", dest="injection_mask", type=_parse_mask, help="e.g. 1,0,1")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("refine", help="refine images with a trained generator")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True, help="PNG file or directory")
    r.add_argument("--output", required=True)
    r.set_defaults(func=cmd_refine)

    y = sub.add_parser("pyramid", help="write the downscaled levels of one image")
    y.add_argument("--input", required=True)
    y.add_argument("--lowest-res", dest="lowest_res", type=int, default=8)
    y.add_argument("--output", required=True)
    y.set_defaults(func=cmd_pyramid)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backend op")
    g.add_argument("--seed", type=int)
    g.add_argument("--trials", type=int, default=20)
    g.add_argument("--precision", choices=["32", "64", "both"], default="both")
    g.add_argument("--perturb-op", dest="perturb_op", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval", help="refine a folder and report L1/PSNR against the originals")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--input", required=True)
    e.add_argument("--output", required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("make-toy", help="write a procedural toy dataset")
    m.add_argument("--output", required=True)
    m.add_argument("--count", type=int, default=256)
    m.add_argument("--res", type=int, default=16)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_toy)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except _Abort as exc:
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
