"""Command line entry point: gen-data, pretrain, evaluate, stats, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from decon.checkpoint import CheckpointError
from decon.config import PRESET_NAMES, ConfigError, ExperimentConfig, load_config, preset, save_config, \
    validate_config
from decon.data import DatasetError, generate_dataset, load_arrays, read_manifest
from decon.evaluation import FINETUNE_STEPS, TRANSFER_MODES, ArchitectureMismatch, evaluate_downstream, save_eval
from decon.report import emit_report, load_run
from decon.stats import cohens_d, wilcoxon_signed_rank

log = logging.getLogger("decon")

USER_ERRORS = (ConfigError, DatasetError, CheckpointError, ArchitectureMismatch, ValueError,
               FileNotFoundError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides (one per ExperimentConfig field)")
    for f in fields(ExperimentConfig):
        kind = {"int": int, "float": float, "str": str}[f.type]
        names = [f"--{f.name}"]
        if f.name == "dropout_p":
            names.append("--dropout")
        group.add_argument(*names, dest=f.name, type=kind, default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="decon", description=__doc__)
    parser.add_argument("--json", action="store_true", help="emit errors as JSON on stderr")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic shapes dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, required=True, help="number of items")
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("pretrain", help="contrastive pre-training")
    p.add_argument("--preset", choices=None, help=f"one of: {', '.join(PRESET_NAMES)}")
    p.add_argument("--config", help="JSON config file (applied before flag overrides)")
    p.add_argument("--data", help="dataset directory (required)")
    p.add_argument("--out", help="checkpoint path, required; config.json and loss_log.csv go next to it")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--checkpoint-every", type=int, default=0, help="also checkpoint every K epochs")
    p.add_argument("--strict", action="store_true", help="config-hash mismatch on resume is an error")
    _config_flags(p)

    p = sub.add_parser("evaluate", help="downstream segmentation fine-tuning")
    p.add_argument("--ckpt", help="pre-trained checkpoint (ignored in random mode)")
    p.add_argument("--mode", required=True, choices=["random", "encoder", "encoder-decoder"])
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated fine-tuning seeds")
    p.add_argument("--head", default="fcn", choices=["fcn", "fpn"], help="segmentation decoder")
    p.add_argument("--steps", type=int, default=FINETUNE_STEPS, help="fine-tuning steps per seed")
    p.add_argument("--out", help="result JSON (default: eval_<mode>.json next to the checkpoint)")

    p = sub.add_parser("stats", help="Cohen's d and Wilcoxon p for two score files")
    p.add_argument("--a", required=True, help="file with one number per line")
    p.add_argument("--b", required=True, help="file with one number per line")

    p = sub.add_parser("report", help="comparison CSV and loss curves over run directories")
    p.add_argument("--runs", nargs="+", required=True, help="run directories")
    p.add_argument("--out", required=True, help="report directory")
    return parser


def effective_config(args) -> ExperimentConfig:
    """Flags override the config file, which overrides the preset, which overrides defaults."""
    cfg = preset(args.preset) if args.preset else ExperimentConfig()
    if args.config:
        base = cfg.to_dict()
        base.update(json.loads(Path(args.config).read_text()))
        cfg = ExperimentConfig.from_dict(base)
    overrides = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig)
                 if getattr(args, f.name) is not None}
    return validate_config(cfg.replace(**overrides))


def cmd_gen_data(args) -> dict:
    cfg = ExperimentConfig(image_size=args.size, seed=args.seed)
    manifest = generate_dataset(cfg, args.n, args.out, workers=args.workers)
    return {"out": args.out, "count": manifest.count}


def cmd_pretrain(args) -> dict:
    from decon.trainer import pretrain

    if args.preset and args.preset not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {args.preset!r}; valid presets: {', '.join(PRESET_NAMES)}")
    missing = [flag for flag in ("data", "out") if getattr(args, flag) is None]
    if missing:
        raise UsageError("pretrain: the following arguments are required: "
                         + ", ".join(f"--{m}" for m in missing))
    manifest = read_manifest(args.data)
    if args.image_size is None:
        args.image_size = manifest.image_size
    cfg = effective_config(args)
    images, _ = load_arrays(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out.parent / "config.json")
    if args.resume and args.strict:
        from decon.trainer import load_checkpoint

        load_checkpoint(args.resume, cfg, strict=True)
    state, rows = pretrain(cfg, images, out=out, log_path=out.parent / "loss_log.csv", resume=args.resume,
                           checkpoint_every=args.checkpoint_every)
    return {"checkpoint": str(out), "steps": state.step, "final_total": rows[-1]["total"] if rows else None}


def cmd_evaluate(args) -> dict:
    mode = args.mode.replace("-", "_")
    assert mode in TRANSFER_MODES
    if mode != "random" and not args.ckpt:
        raise ValueError(f"--ckpt is required for mode {args.mode}")
    if args.out is None and not args.ckpt:
        raise ValueError("--out is required when no checkpoint is given")
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ValueError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    images, masks = load_arrays(args.data)
    result = evaluate_downstream(args.ckpt, mode, images, masks, seeds, head=args.head, steps=args.steps)
    result.checkpoint = args.ckpt
    out = Path(args.out) if args.out else Path(args.ckpt).parent / f"eval_{mode}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_eval(result, out)
    print(f"mode={mode} miou_mean={result.mean:.4f} miou_std={result.std:.4f}")
    return {"out": str(out), "miou": result.miou}


def _read_numbers(path: str) -> list[float]:
    text = Path(path).read_text()
    try:
        return [float(line) for line in text.split() if line.strip()]
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


def cmd_stats(args) -> dict:
    a, b = _read_numbers(args.a), _read_numbers(args.b)
    d = cohens_d(a, b)
    p = float("nan")
    if len(a) == len(b):
        try:
            p = wilcoxon_signed_rank(np.subtract(a, b))
        except ValueError:
            pass  # every paired difference is zero
    print(f"d={d:.3f}")
    print(f"p={p:.4f}")
    return {"d": d, "p": p}


def cmd_report(args) -> dict:
    runs = [load_run(d) for d in args.runs]
    written = emit_report(runs, args.out)
    for kind, path in written.items():
        print(f"{kind}: {path}")
    return {k: str(v) for k, v in written.items()}


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "evaluate": cmd_evaluate,
            "stats": cmd_stats, "report": cmd_report}


def _fail(message: str, code: int, as_json: bool, kind: str) -> int:
    if as_json:
        print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    else:
        print(f"decon: error: {message}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json" in argv
    threads = os.environ.get("DECON_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(str(exc), 2, as_json, "usage")
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail(str(exc), 2, as_json, "usage")
    except USER_ERRORS as exc:
        return _fail(str(exc), 1, as_json, type(exc).__name__)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
