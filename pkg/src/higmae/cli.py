"""Command-line entry point: ``higmae {coarsen,schedule,pretrain,embed,probe}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .config import describe_defaults, load_config
from .errors import ConfigError, HigmaeError
from .graph import load_dataset
from .masking import schedule_table
from .training import Checkpoint, embed, prepare_hierarchies, pretrain, probe_repeated

log = logging.getLogger("higmae")


def _dataset(cfg):
    if not cfg.data.path:
        raise ConfigError("data.path is required for this command", field="data.path")
    return load_dataset(cfg.data.format, cfg.data.path, cfg.data.name or None, cfg.data.max_degree)


def _write_text(text: str, out) -> None:
    if out is None or str(out) == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _figures(args, out) -> bool:
    return not args.no_figures and out is not None and str(out) != "-"


def cmd_coarsen(cfg, args) -> None:
    ds = _dataset(cfg)
    hierarchies = prepare_hierarchies(ds, cfg)
    dump = {
        "hierarchy": {"S": cfg.hierarchy.S, "r_p": cfg.hierarchy.r_p, "seed": cfg.hierarchy.seed,
                      "binarize_coarse": cfg.hierarchy.binarize_coarse},
        "graphs": [dict(index=i, **h.to_json()) for i, h in enumerate(hierarchies)],
    }
    _write_text(json.dumps(dump, indent=1) + "\n", args.out)
    if _figures(args, args.out):
        plotting.plot_hierarchy_sizes(dump, plotting.figure_path(args.out))


def cmd_schedule(cfg, args) -> None:
    rows = schedule_table(args.n_masked, cfg.schedule(), cfg.train.epochs)
    lines = ["t,R"] + [f"{t},{r}" for t, r in rows]
    _write_text("\n".join(lines) + "\n", args.out)
    if _figures(args, args.out):
        plotting.plot_schedule(rows, plotting.figure_path(args.out), args.n_masked)


def cmd_pretrain(cfg, args) -> None:
    ds = _dataset(cfg)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    ckpt = pretrain(ds, cfg, log_path=log_path)
    ckpt.save(out)
    log.info("wrote %s (final loss %.6f) and %s", out, ckpt.final_loss, log_path)
    if not args.no_figures:
        plotting.plot_loss(ckpt.history, plotting.figure_path(log_path))


def cmd_embed(cfg, args) -> None:
    # data comes from this config; hierarchy and model settings from the checkpoint
    ds = _dataset(cfg)
    ckpt = Checkpoint.load(args.checkpoint)
    emb = embed(ds, ckpt, mode=cfg.eval.readout_mode if args.readout else None)
    if args.out is None or args.out == "-":
        np.savetxt(sys.stdout, emb, delimiter=",", fmt="%.17g")
    else:
        np.savetxt(args.out, emb, delimiter=",", fmt="%.17g")
    log.info("embedded %d graphs, width %d", *emb.shape)


def cmd_probe(cfg, args) -> None:
    ds = _dataset(cfg)
    labels = ds.labels()
    if labels is None:
        raise ConfigError("dataset has no graph labels to probe against", field="data.path")
    emb = np.loadtxt(args.embeddings, delimiter=",", ndmin=2)
    reports = probe_repeated(emb, labels, cfg.eval.folds, cfg.eval.seed, cfg.eval.repeats)
    means = [r.mean for r in reports]
    summary = {
        "mean": float(np.mean(means)),
        "std": float(np.std([a for r in reports for a in r.fold_accuracies])),
        "runs": [r.to_dict() for r in reports],
    }
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=1) + "\n")
        if _figures(args, args.out):
            plotting.plot_probe(reports, plotting.figure_path(args.out))
    print(f"accuracy {summary['mean']:.4f} +- {summary['std']:.4f} "
          f"({cfg.eval.folds}-fold x {cfg.eval.repeats})")


COMMANDS = {
    "coarsen": cmd_coarsen,
    "schedule": cmd_schedule,
    "pretrain": cmd_pretrain,
    "embed": cmd_embed,
    "probe": cmd_probe,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="higmae",
        description="Hierarchical graph masked autoencoder pretraining toolkit.",
        epilog="config keys and defaults:\n" + describe_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. train.epochs=5 (repeatable)")
        p.add_argument("--no-figures", action="store_true", help="skip the PNG next to the output")
        return p

    p = common(sub.add_parser("coarsen", help="dump per-graph hierarchies as JSON"))
    p.add_argument("--out", help="output JSON path (default stdout)")
    p.add_argument("--binarize-coarse", action="store_true", help="use 0/1 coarse adjacencies")

    p = common(sub.add_parser("schedule", help="print the recovery table R(t) as CSV"))
    p.add_argument("--out", help="output CSV path (default stdout)")
    p.add_argument("--n-masked", type=int, default=10, help="masked top-scale nodes (default 10)")

    p = common(sub.add_parser("pretrain", help="pretrain and write a checkpoint"))
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-epoch CSV log (default: checkpoint path with .csv)")
    p.add_argument("--binarize-coarse", action="store_true")
    p.add_argument("--parallel", action="store_true", help="thread per-graph passes (non-deterministic)")

    p = common(sub.add_parser("embed", help="write graph embeddings as CSV"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="output CSV path (default stdout)")
    p.add_argument("--readout", action="store_true",
                   help="use eval.readout_mode from this config instead of the checkpoint's")

    p = common(sub.add_parser("probe", help="k-fold linear probe on embeddings"))
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--repeats", type=int, help="shortcut for --set eval.repeats=N")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    if getattr(args, "binarize_coarse", False):
        overrides.append("hierarchy.binarize_coarse=true")
    if getattr(args, "parallel", False):
        overrides.append("train.parallel=true")
    if getattr(args, "repeats", None) is not None:
        overrides.append(f"eval.repeats={args.repeats}")
    try:
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"higmae {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (HigmaeError, OSError) as exc:
        print(f"higmae {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
