"""Command-line entry point: synthesize, train, infer, eval, gradcheck, ablate.

Exit codes: 0 success, 1 usage or config error, 2 I/O or format error,
3 numeric failure (non-finite loss, failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import gradsuite
from .metrics import KEYS, aggregate, evaluate_clip
from .predictor import load_alpha, save_alpha
from .synthcomp import (
    DEFAULT_SPLITS,
    FormatError,
    SynthConfig,
    load_sample,
    read_manifest,
    synthesize_corpus,
)
from .trainer import (
    ConfigError,
    NonFiniteLossError,
    TrainConfig,
    apply_pairs,
    config_text,
    infer,
    load_checkpoint,
    load_corpus,
    read_pairs,
    save_checkpoint,
    train,
    train_samples,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
RESOLVED_NAME = "resolved_config.txt"
SPLIT_SEED_STRIDE = 10000

logger = logging.getLogger("vidmatte")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def n_threads():
    raw = os.environ.get("VMF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"VMF_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"VMF_THREADS must be >= 1, got {n}")
    return n


def resolve(base, args):
    """Defaults, then ``--config`` file, then ``--set`` overrides, then ``--seed``."""
    pairs = read_pairs(args.config) if args.config else []
    pairs += list(args.set or [])
    if args.seed is not None and hasattr(base, "seed"):
        pairs.append(f"seed={args.seed}")
    return apply_pairs(base, pairs)


def write_resolved(out_dir, command, cfg, extra=None):
    """Record the exact configuration a run used next to its outputs."""
    lines = [f"command={command}"]
    for k, v in sorted((extra or {}).items()):
        lines.append(f"{k}={v}")
    text = "\n".join(lines) + "\n" + (config_text(cfg) if cfg is not None else "")
    Path(out_dir, RESOLVED_NAME).write_text(text)


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synthesize(args):
    cfg = resolve(SynthConfig(), args)
    seed = 0 if args.seed is None else args.seed
    out = _out_dir(args.out)
    if args.n is not None:
        if args.n < 1:
            raise UsageError(f"--n must be >= 1, got {args.n}")
        manifests = {args.name: synthesize_corpus(out, args.n, cfg, seed, args.name)}
    else:
        manifests = {name: synthesize_corpus(out, n, cfg, seed + i * SPLIT_SEED_STRIDE, name)
                     for i, (name, n) in enumerate(DEFAULT_SPLITS.items())}
    write_resolved(out, "synthesize", cfg, {"seed": seed, "n": args.n if args.n is not None else "splits"})
    for name, m in manifests.items():
        print(f"{name}: {m}")
    return EXIT_OK


def cmd_train(args):
    cfg = resolve(TrainConfig(), args)
    out = _out_dir(args.out)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(args.manifest, cfg, resume=resume, until_epoch=args.until_epoch)
    save_checkpoint(result.checkpoint, out / "checkpoint.vmck")
    (out / "train_log.csv").write_text(result.log_csv())
    if result.epoch_metrics:
        (out / "val_metrics.json").write_text(json.dumps(result.epoch_metrics, sort_keys=True, indent=2) + "\n")
    write_resolved(out, "train", cfg, {"manifest": args.manifest, "config_hash": cfg.hash()})
    last = result.log[-1] if result.log else None
    if last:
        print(f"steps={last['step']} final_total={last['total']!r}")
    return EXIT_OK


def cmd_infer(args):
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.train_config()
    window = args.window or cfg.window
    if window < 1:
        raise UsageError(f"--window must be >= 1, got {window}")
    net = ckpt.network()
    out = _out_dir(args.out)
    names = []
    for i, path in enumerate(read_manifest(args.manifest)):
        sample = load_sample(path, seed=i)
        alpha = infer(net, sample.composite, window)
        name = Path(path).stem + ".vmka"
        save_alpha(alpha, out / name)
        names.append(name)
    (out / "predictions.txt").write_text("".join(f"{n}\n" for n in names))
    write_resolved(out, "infer", cfg, {"checkpoint": args.checkpoint, "window": window})
    print(f"wrote {len(names)} mattes to {out}")
    return EXIT_OK


def evaluate_manifest(pred_dir, gt_manifest, threads=1):
    """Per-clip reports in manifest order plus their mean."""
    paths = read_manifest(gt_manifest)
    if not paths:
        raise FormatError(f"{gt_manifest} lists no samples")
    missing = [p.stem for p in paths if not Path(pred_dir, p.stem + ".vmka").is_file()]
    if missing:
        raise FileNotFoundError(f"missing predictions for clips: {', '.join(missing)}")

    def one(i_path):
        i, path = i_path
        gt = load_sample(path, seed=i).alpha
        pred = load_alpha(Path(pred_dir, path.stem + ".vmka"))
        return path.stem, evaluate_clip(pred, gt, per_frame=True)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(one, enumerate(paths)))
    return results, aggregate([r for _, r in results])


def report_json(results, mean):
    doc = {"clips": {name: r.to_dict() for name, r in results},
           "mean": {k: getattr(mean, k) for k in KEYS}}
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def report_csv(results, mean):
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(("clip",) + KEYS)
    for name, r in results:
        buf.write(r.csv_row(name))
    buf.write(mean.csv_row("mean"))
    return buf.getvalue()


def cmd_eval(args):
    out = _out_dir(args.out)
    results, mean = evaluate_manifest(args.pred_dir, args.gt_manifest, n_threads())
    (out / "report.json").write_text(report_json(results, mean))
    (out / "report.csv").write_text(report_csv(results, mean))
    write_resolved(out, "eval", None, {"pred_dir": args.pred_dir, "gt_manifest": args.gt_manifest})
    print(" ".join(f"{k}={getattr(mean, k):.6g}" for k in KEYS))
    return EXIT_OK


def cmd_gradcheck(args):
    scope = None if args.scope == "all" else args.scope
    seed = 0 if args.seed is None else args.seed
    results = gradsuite.run_suite(scope, seeds=range(seed, seed + args.seeds))
    lines = [r.line() for r in results]
    print("\n".join(lines))
    if args.out:
        out = _out_dir(args.out)
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
        write_resolved(out, "gradcheck", None, {"scope": args.scope, "seed": seed, "seeds": args.seeds})
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


ABLATION_ROWS = (
    ("none", False, False),
    ("+SFTM", True, False),
    ("+LQTM", False, True),
    ("+both", True, True),
)


def run_ablation(train_set, eval_set, base):
    """Train and evaluate the four temporal-module configurations from one seed."""
    rows = []
    for label, sftm_on, lqtm_on in ABLATION_ROWS:
        cfg = base.replace(sftm_enabled=sftm_on, lqtm_enabled=lqtm_on)
        result = train_samples(train_set, cfg)
        net = result.checkpoint.network()
        reports = [evaluate_clip(infer(net, s.composite, cfg.window), s.alpha, per_frame=False)
                   for s in eval_set]
        mean = aggregate(reports)
        rows.append({"row": label, "sftm": sftm_on, "lqtm": lqtm_on, "config_hash": cfg.hash(),
                     "seed": cfg.seed, "final_loss": result.log[-1]["total"],
                     **{k: getattr(mean, k) for k in KEYS}})
    return rows


def ablation_table(rows):
    cols = ("row", "sftm", "lqtm", "config_hash", "seed", "final_loss") + KEYS
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    return buf.getvalue()


def cmd_ablate(args):
    cfg = resolve(TrainConfig(), args)
    out = _out_dir(args.out)
    train_set = load_corpus(args.manifest)
    eval_manifest = args.eval_manifest or cfg.val_manifest or args.manifest
    eval_set = load_corpus(eval_manifest)
    rows = run_ablation(train_set, eval_set, cfg)
    if not all(np.isfinite(r[k]) for r in rows for k in KEYS):
        raise NonFiniteLossError("ablation produced non-finite metrics")
    (out / "ablation.csv").write_text(ablation_table(rows))
    (out / "ablation.json").write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n")
    write_resolved(out, "ablate", cfg, {"manifest": args.manifest, "eval_manifest": eval_manifest})
    print(f"{'row':8s} " + " ".join(f"{k:>10s}" for k in KEYS))
    for r in rows:
        print(f"{r['row']:8s} " + " ".join(f"{r[k]:10.4f}" for k in KEYS))
    return EXIT_OK


def _common(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = _Parser(prog="vidmatte", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synthesize", help="write synthetic composited clips and a manifest")
    _common(p)
    p.add_argument("--n", type=int, help="number of clips (default: the train/val/test splits)")
    p.add_argument("--name", default="train", help="corpus name when --n is given")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train", help="train a network on a manifest")
    p.add_argument("manifest")
    _common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--until-epoch", type=int, help="stop after this many epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict mattes for every clip of a manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    _common(p)
    p.add_argument("--window", type=int, help="inference window length (default: training window)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted mattes against ground truth")
    p.add_argument("pred_dir")
    p.add_argument("gt_manifest")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--scope", choices=gradsuite.SCOPES + ("all",), default="all")
    p.add_argument("--seed", type=int, help="first seed")
    p.add_argument("--seeds", type=int, default=20, help="number of seeds")
    p.add_argument("--out", help="optional directory for the result table")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and compare the four temporal-module settings")
    p.add_argument("manifest")
    _common(p)
    p.add_argument("--eval-manifest", help="clips to score (default: val_manifest, else the training clips)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"vidmatte: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"vidmatte: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"vidmatte: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"vidmatte: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
