"""``cycledepth`` command-line interface.

Exit codes: 0 success, 2 configuration or input error, 3 stage-ordering or
state error, 4 numeric failure (non-finite loss, gradient check failure).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import gradcheck
from .config import ConfigError, RunConfig, load_config
from .data import make_dataset, load_dataset, save_dataset
from .networks import NetworkBundle
from .pipeline import (STAGE_ORDER, NumericError, ScheduleError, StageOrderError, check_stage_order,
                       checkpoint_name, evaluate, load_bundle, predict_disparity, run_stage, save_bundle,
                       write_jsonl)
from .pnm import FormatError, load_ppm, save_pfm, save_ppm

logger = logging.getLogger("cycledepth")

EXIT_OK, EXIT_CONFIG, EXIT_STATE, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def inverse_depth_colormap(disparity: np.ndarray, d_max: float) -> np.ndarray:
    """Map disparity (inverse depth) to RGB, near = warm.

    With ``t = clip(disparity / d_max, 0, 1)`` the channels are
    ``R = t``, ``G = 0.5 * t``, ``B = 1 - t``: red rises and blue falls
    strictly with t, so the mapping is monotone and invertible from R alone.
    """
    t = np.clip(np.asarray(disparity, dtype=np.float64) / d_max, 0.0, 1.0)
    return np.stack([t, 0.5 * t, 1.0 - t])


# -- helpers ----------------------------------------------------------------------

def _config(args) -> RunConfig:
    try:
        return load_config(args.config)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None


def _dataset(path):
    root = Path(path)
    if not (root / "manifest.json").exists():
        raise CliError(EXIT_CONFIG, f"no dataset at {root} (manifest.json missing); run gen-data first")
    try:
        return load_dataset(root)
    except (FormatError, OSError, KeyError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot load dataset {root}: {exc}") from None


def _completed(out_dir: Path) -> List[str]:
    return [name for k, name in enumerate(STAGE_ORDER) if (out_dir / f"stage-{k + 1}-{name}.ckpt").exists()]


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=False) + "\n")


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    d = cfg.data
    train, heldout = make_dataset(d.count, d.width, d.height, seed=d.seed, fb=d.fb)
    root = save_dataset(args.out, train, heldout, d.seed)
    logger.info("wrote %d train / %d held-out pairs to %s", len(train), len(heldout), root)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    train, _, manifest = _dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stages = cfg.stages()
    if args.stage is not None:
        stages = [s for s in stages if s.name == args.stage]
    completed = _completed(out_dir)
    bundle = NetworkBundle(cfg.network_config(), manifest["height"], manifest["width"])
    optimizer, settings = cfg.optimizer_config(), cfg.train_settings()

    for stage in stages:
        if stage.name in completed and args.stage is None:
            logger.info("stage %s already checkpointed; skipping", stage.name)
            continue
        try:
            check_stage_order(stage.name, completed)
        except StageOrderError as exc:
            raise CliError(EXIT_STATE, str(exc)) from None
        if stage.index > 0:
            prev = STAGE_ORDER[stage.index - 1]
            load_bundle(out_dir / f"stage-{stage.index}-{prev}.ckpt", bundle)
        log_path = out_dir / (checkpoint_name(stage)[: -len(".ckpt")] + ".jsonl")
        log_path.unlink(missing_ok=True)
        logger.info("running %s", stage.name)
        try:
            run_stage(stage, train, bundle, optimizer, settings, log=write_jsonl(log_path))
        except NumericError as exc:
            raise CliError(EXIT_NUMERIC, str(exc)) from None
        done = [n for n in STAGE_ORDER[: stage.index + 1]]
        path = out_dir / checkpoint_name(stage)
        try:
            save_bundle(path, bundle, done, {"config": cfg.to_dict()})
        except OSError as exc:
            err = ScheduleError(f"could not write checkpoint {path}: {exc}", completed)
            raise CliError(EXIT_STATE, str(err)) from None
        completed = sorted(set(completed) | {stage.name}, key=STAGE_ORDER.index)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    train, heldout, _ = _dataset(args.data)
    samples = {"heldout": heldout, "train": train, "all": train + heldout}[args.split]
    try:
        bundle, _ = load_bundle(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    which = ["student", "teacher"] if args.which == "both" else [args.which]
    e = cfg.eval
    for name in which:
        try:
            report = evaluate(bundle, samples, use_teacher=(name == "teacher"), cap_meters=e.cap_meters,
                              batch_size=e.batch_size, min_disp=e.min_disp)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
        _emit({name: report.to_dict()})
    return EXIT_OK


def cmd_infer(args) -> int:
    try:
        image = load_ppm(args.image)
    except (FormatError, OSError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot read image: {exc}") from None
    try:
        trained, meta = load_bundle(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    _, h, w = image.shape
    if (h, w) == (trained.height, trained.width):
        bundle = trained
    else:
        # the networks are fully convolutional; only d_max depends on the width
        try:
            bundle = NetworkBundle(trained.config, h, w)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
        bundle.load_state_dict(trained.state_dict())
    disp = predict_disparity(bundle, image[None], use_teacher=args.teacher)[0]
    if not np.all(np.isfinite(disp)):
        raise CliError(EXIT_NUMERIC, "non-finite disparity predicted")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    save_pfm(out / f"{stem}_disp.pfm", disp)
    save_ppm(out / f"{stem}_color.ppm", inverse_depth_colormap(disp, bundle.d_max))
    logger.info("wrote %s and %s", out / f"{stem}_disp.pfm", out / f"{stem}_color.ppm")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = [args.seed + k for k in range(args.seeds)]
    failed = False
    for seed in seeds:
        try:
            results = gradcheck.run_gradcheck(seed, names=args.ops or None, corrupt=args.corrupt)
        except KeyError as exc:
            raise CliError(EXIT_CONFIG, str(exc.args[0])) from None
        print(gradcheck.format_table(results, seed))
        failed |= any(not r.passed for r in results)
    return EXIT_NUMERIC if failed else EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cycledepth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic stereo dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one stage or the whole schedule")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stage", choices=STAGE_ORDER)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="depth metrics of a checkpoint, one JSON line per model")
    e.add_argument("--config")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--which", choices=("student", "teacher", "both"), default="both")
    e.add_argument("--split", choices=("heldout", "train", "all"), default="heldout")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict disparity for one PPM image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--teacher", action="store_true", help="use the refinement network output")
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--seeds", type=int, default=1, help="check seeds seed..seed+N-1")
    c.add_argument("--ops", nargs="*", help="restrict to these ops")
    c.add_argument("--corrupt", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"cycledepth {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
