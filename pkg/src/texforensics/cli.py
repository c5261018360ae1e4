"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import nn
from .benchmark import DISTORTIONS, discover_dataset, labeled_items, run_ablation_suite, run_benchmark
from .config import ConfigError, RunManifest, resolve_config
from .detector import load_detector, predict, save_detector, train
from .errors import DataError
from .fingerprint import default_filter_bank, extract_fingerprint
from .imaging import load_image

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

SYNOPSIS = """usage:
  texforensics train --data DIR --out CKPT [--config FILE] [--set KEY=VALUE ...] [--seed S] [--workers N]
  texforensics fingerprint --in IMG --ckpt CKPT --out FILE [--seed S]
  texforensics classify --in IMG --ckpt CKPT [--seeds K] [--seed S]
  texforensics bench --data DIR --ckpt CKPT --distortion {none,jpeg95,blur1,half_size} --out REPORT.csv
                     [--seed S] [--workers N]
  texforensics ablate --data DIR --out DIR [--test DIR] [--config FILE] [--set KEY=VALUE ...]
                      [--distortions none,jpeg95,...] [--seed S] [--workers N]
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p, config=False):
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    if config:
        p.add_argument("--config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="texforensics", add_help=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", add_help=False)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _common(p, config=True)

    p = sub.add_parser("fingerprint", add_help=False)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("classify", add_help=False)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seeds", type=int, default=None)
    _common(p)

    p = sub.add_parser("bench", add_help=False)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--distortion", choices=sorted(DISTORTIONS), default="none")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("ablate", add_help=False)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test")
    p.add_argument("--distortions", default="none")
    _common(p, config=True)
    return parser


def _detector_from_ckpt(args):
    params, cfg = load_detector(args.ckpt)
    cfg = resolve_config(seed=args.seed, workers=args.workers, base=cfg)
    return params, cfg


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.overrides, args.seed, args.workers)
    items = labeled_items(args.data)
    history_path = Path(args.out + ".history.jsonl")
    with history_path.open("w", encoding="utf-8") as fh:
        def on_epoch(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
        result = train(cfg, items, on_epoch=on_epoch)
    save_detector(args.out, result.params, cfg)
    print(json.dumps({"checkpoint": args.out, "best_epoch": result.best_epoch,
                      "best_val_acc": result.best_val_acc, "epochs_run": len(result.history)}))
    return EXIT_OK


def cmd_fingerprint(args) -> int:
    params, cfg = _detector_from_ckpt(args)
    img = load_image(args.input)
    rng = np.random.default_rng(cfg.eval_seed)
    fp = extract_fingerprint(img, cfg.smash, default_filter_bank(), params, cfg.ablation, rng)
    Path(args.out).write_bytes(nn.tensor_dump_bytes(fp.data))
    print(json.dumps({"out": args.out, "shape": list(fp.shape)}))
    return EXIT_OK


def cmd_classify(args) -> int:
    params, cfg = _detector_from_ckpt(args)
    if args.seeds is not None and args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    pred = predict(params, cfg, load_image(args.input), seeds=args.seeds)
    print(json.dumps(pred.to_dict()))
    return EXIT_OK


def cmd_bench(args) -> int:
    params, cfg = _detector_from_ckpt(args)
    report = run_benchmark(params, cfg, discover_dataset(args.data), args.distortion)
    json_path = report.write(args.out)
    sys.stdout.write(report.to_csv())
    logging.getLogger(__name__).info("wrote %s and %s", args.out, json_path)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args.config, args.overrides, args.seed, args.workers)
    data = Path(args.data)
    train_dir = data / "train" if args.test is None else data
    test_dir = Path(args.test) if args.test else data / "test"
    distortions = [d.strip() for d in args.distortions.split(",") if d.strip()]
    bad = [d for d in distortions if d not in DISTORTIONS]
    if bad:
        raise UsageError(f"unknown distortions {bad}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = run_ablation_suite(labeled_items(train_dir), discover_dataset(test_dir), cfg,
                                 distortions=distortions)
    summary = []
    for r in reports:
        r.write(out / f"{r.ablation}__{r.distortion}.csv")
        m = r.mean
        summary.append(f"{r.ablation},{r.distortion},{m.accuracy:.4f},{m.average_precision:.4f}")
    (out / "summary.csv").write_text("ablation,distortion,accuracy,avg_precision\n" + "\n".join(summary) + "\n",
                                     encoding="utf-8")
    print("\n".join(summary))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "fingerprint": cmd_fingerprint,
    "classify": cmd_classify,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def parse_manifest(argv) -> tuple[RunManifest, argparse.Namespace]:
    args = build_parser().parse_args(argv)
    if not args.command:
        raise UsageError("no command given")
    manifest = RunManifest(args.command, getattr(args, "config", None), tuple(getattr(args, "overrides", ())),
                           args.seed)
    return manifest, args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        manifest, args = parse_manifest(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[manifest.command](args)
    except (UsageError, ConfigError) as exc:
        sys.stderr.write(f"error: {exc}\n{SYNOPSIS}")
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
