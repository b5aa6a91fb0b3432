"""``osteoscreen`` command line.

Every stage command takes ``--run DIR``.  The first command that touches a
run directory fixes its ``config.json`` (from ``--config``, flags and
``--set`` overrides); later commands reuse it and refuse conflicting changes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .config import RunConfig, load_config, with_overrides
from .errors import ContractError, MissingArtifactError

EXIT_CONTRACT = 2
EXIT_MISSING = 3


def _parse_set(items) -> dict:
    out: dict = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ContractError(f"--set expects key.path=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def _overrides(args) -> list[dict]:
    ov = []
    if getattr(args, "seed", None) is not None:
        ov.append({"seed": args.seed})
    if getattr(args, "crop_mode", None):
        ov.append({"views": {"crop_mode": args.crop_mode}})
    if getattr(args, "pretrain_mode", None):
        ov.append({"pretraining": {"mode": args.pretrain_mode}})
    if getattr(args, "ablate", None):
        ov.append(P.ABLATIONS[args.ablate])
    ov.append(_parse_set(getattr(args, "set", None)))
    return ov


def _open_run(args) -> P.Run:
    root = Path(args.run)
    existing = root / "config.json"
    if not existing.exists():
        return P.Run(root, _config(args)).init()
    current = load_config(existing)
    if args.config or any(_overrides(args)):
        wanted = _apply(load_config(args.config) if args.config else current, args)
        if wanted != current:
            raise ContractError(f"{existing} already holds a different configuration; use a new run directory")
    return P.Run(root, current)


def _apply(cfg: RunConfig, args) -> RunConfig:
    for ov in _overrides(args):
        cfg = with_overrides(cfg, ov)
    return cfg


def _config(args) -> RunConfig:
    return _apply(load_config(args.config) if args.config else RunConfig(), args)


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def cmd_synth(args) -> None:
    if args.out:
        ds = P.synth_dataset(args.out, args.kind, args.n, args.size, args.data_seed, args.prevalence,
                             args.signal, args.modes)
        _print({"dataset": str(args.out), "images": len(ds.ids()), "splits": {k: len(v) for k, v in ds.splits.items()}})
        return
    if not args.run:
        raise ContractError("synth needs --out DIR or --run DIR")
    run = _open_run(args)
    ds = P.ensure_dataset(run)
    _print({"dataset": str(run.dataset_dir), "images": len(ds.ids())})


def cmd_segment_train(args) -> None:
    run = _open_run(args)
    P.segment_train(run, args.dump_plan)


def cmd_segment_predict(args) -> None:
    P.segment_predict(_open_run(args))


def cmd_extract(args) -> None:
    _print(P.extract_stage(_open_run(args)))


def cmd_pretrain(args) -> None:
    _print(P.pretrain_stage(_open_run(args)))


def cmd_finetune(args) -> None:
    _print(P.finetune_stage(_open_run(args)))


def cmd_evaluate(args) -> None:
    _print(P.evaluate_stage(_open_run(args)))


def cmd_run(args) -> None:
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise ContractError("--seeds needs at least one integer")
    summary = P.run_seeds(args.run, _config(args), seeds)
    _print(summary["summary"])


def cmd_ablate(args) -> None:
    report = P.ablate(args.mode, args.baseline, args.out)
    for k, row in report["metrics"].items():
        delta = "n/a" if row["delta"] is None else f"{row['delta']:+.4f}"
        print(f"{k:9s} baseline {row['baseline']} ablated {row['ablated']} delta {delta}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="osteoscreen", description="Hand radiograph osteoporosis screening pipeline.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def stage(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--run", required=name != "synth", help="run directory")
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--crop-mode", choices=["constrained", "conventional"])
        p.add_argument("--pretrain", dest="pretrain_mode", choices=["contrastive", "none"])
        p.add_argument("--ablate", choices=sorted(P.ABLATIONS))
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
        p.set_defaults(fn=fn)
        return p

    p = stage("synth", cmd_synth, "generate a synthetic dataset")
    p.add_argument("--out", help="write a standalone dataset here instead of into a run")
    p.add_argument("--kind", choices=["hand", "ambiguous"], default="hand")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--prevalence", type=float, default=0.285)
    p.add_argument("--signal", type=float, default=1.0)
    p.add_argument("--modes", type=int, default=2)
    p = stage("segment-train", cmd_segment_train, "train the mixture segmentation net")
    p.add_argument("--dump-plan", help="write per-step coupling plans as JSON lines")
    stage("segment-predict", cmd_segment_predict, "predict bone masks")
    stage("extract-patches", cmd_extract, "crop per-bone patches")
    stage("pretrain", cmd_pretrain, "contrastive encoder pretraining")
    stage("finetune", cmd_finetune, "fit the classification head")
    stage("evaluate", cmd_evaluate, "test metrics and per-bone table")
    p = stage("run", cmd_run, "all stages for each seed")
    p.add_argument("--seeds", default="7")

    p = sub.add_parser("ablate", help="rerun a finished multi-seed run with one component changed")
    p.add_argument("--mode", required=True, choices=sorted(P.ABLATIONS))
    p.add_argument("--baseline", required=True, help="directory of a completed 'run'")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    return 0


if __name__ == "__main__":
    sys.exit(main())
