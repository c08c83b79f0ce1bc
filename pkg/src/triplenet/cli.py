"""Command line entry point: ``triplenet {gen-data,train,eval,ablate}``.

Exit codes: 0 success, 1 validation failure, 2 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from triplenet import evalkit, trainer
from triplenet.netgraph import ConfigError, load_checkpoint
from triplenet.synthdata import DatasetError, GenConfig, generate_dataset, load_dataset, save_dataset

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("triplenet")


def cmd_gen_data(args) -> int:
    gen = GenConfig(image_size=(args.size, args.size), num_classes=args.classes,
                    max_objects=args.max_objects)
    samples = generate_dataset(args.num, args.seed, gen)
    save_dataset(samples, args.out, gen.class_names())
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = trainer.RunConfig.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out or cfg.output_dir)
    cfg.validate()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    net, mlog = trainer.train(cfg, out_dir=out)
    if cfg.val_dir:
        samples, names = load_dataset(cfg.val_dir)
        report, _ = trainer.evaluate(net, samples, names)
        mlog.final = {"mAP": report["mAP"], "mIoU": report["mIoU"]}
        mlog.save(out / "metrics.json")
        trainer.write_report(report, out / "report.json")
        print(trainer.format_summary(report))
    print(f"checkpoint: {out / 'checkpoint.tnck'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        net = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    samples, names = load_dataset(args.data)
    report, preds = trainer.evaluate(net, samples, names)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("report.json")
    trainer.write_report(report, out)
    if args.predictions:
        evalkit.write_predictions(args.predictions, preds)
    print(trainer.format_summary(report))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = trainer.RunConfig.load(args.config)
    rows = trainer.ablate(cfg, args.out)
    for r in rows:
        print(f"{r['row']:<40} mAP={r['mAP']:>5} mIoU={r['mIoU']:>5}")
    print(f"table: {Path(args.out) / 'ablation.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="triplenet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic shape dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--size", type=int, default=96, help="square image side in pixels")
    g.add_argument("--max-objects", type=int, default=3)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a network from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="report path (default: report.json beside the checkpoint)")
    e.add_argument("--predictions", help="also write a JSON-lines prediction dump here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the 8-row ablation sweep")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except trainer.NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except trainer.AblationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.cause, trainer.NumericalAbort) else EXIT_INVALID
    except (ConfigError, DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
