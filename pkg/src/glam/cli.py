"""Command line interface.

Subcommands: ``synth``, ``ingest``, ``split``, ``train``, ``evaluate``,
``predict``, ``report`` and ``run``. Each accepts ``--config`` plus
``--set section.key=value`` overrides; artifacts go under ``--out`` (or the
config's ``[output] dir``). Failures print one line
``glam: error: <category>: <message>`` to stderr and exit non-zero.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import load_config
from .data import CLASS_NAMES, SPECIES, build_manifest, generate_synthetic_dataset, ingest_patch, save_patch, scan_dataset
from .exceptions import ConfigError, GlamError
from .experiments import SCENARIOS, get_scenario, load_split, predict_file, report_from_csvs, run_scenarios, train_for_scenario
from .metrics import evaluate_model, sort_records, write_csv
from .network import load_checkpoint
from .training import TrainingHistory, select_checkpoint

EXIT_FAILURE = 3


def _overrides(pairs):
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args):
    overrides = _overrides(args.set)
    if getattr(args, "out", None):
        overrides["output.dir"] = str(Path(args.out).resolve())
    cfg = load_config(args.config, overrides=overrides) if args.config else load_config(text="", overrides=overrides)
    torch.set_num_threads(max(1, cfg.threads))
    return cfg


def cmd_synth(args):
    cfg = _config(args)
    out = Path(args.out or cfg.out_dir)
    manifest = generate_synthetic_dataset(cfg.synthetic, out, cfg.profiles)
    print(f"wrote {len(manifest.entries)} synthetic patches to {out}")


def cmd_ingest(args):
    """Resize a capture-resolution dataset tree into the working-size layout."""
    cfg = _config(args)
    src, out = Path(args.src), Path(args.out or cfg.out_dir)
    count = 0
    for (species, class_id), paths in sorted(scan_dataset(src, CLASS_NAMES[: cfg.num_classes]).items()):
        for rel in paths:
            mask_rel = rel[: -len("_img.png")] + "_mask.png"
            patch = ingest_patch(src / rel, src / mask_rel, class_id, cfg.profiles[species], cfg.num_classes)
            save_patch(patch, out / rel, out / mask_rel)
            count += 1
    print(f"ingested {count} patches into {out}")


def cmd_split(args):
    cfg = _config(args)
    root = Path(args.root) if args.root else cfg.dataset_root
    if root is None:
        raise ConfigError("split needs --root or [data] root")
    out = Path(args.manifest) if args.manifest else root / "manifest.tsv"
    manifest = build_manifest(root, cfg.split_ratios, cfg.split_seed, out_path=out, class_order=CLASS_NAMES[: cfg.num_classes])
    print(f"wrote manifest with {len(manifest.entries)} entries to {out}")


def cmd_train(args):
    cfg = _config(args)
    name = args.scenario or (cfg.scenarios[0] if cfg.scenarios else None)
    if name is None:
        raise ConfigError("train needs --scenario or [experiment] scenarios to choose training species")
    history, train_dir = train_for_scenario(cfg, get_scenario(name), reuse=not args.fresh)
    print(f"trained {len(history)} epochs; history at {train_dir / 'history.tsv'}")


def cmd_evaluate(args):
    cfg = _config(args)
    if args.checkpoint:
        checkpoint = Path(args.checkpoint)
    else:
        if not args.history:
            raise ConfigError("evaluate needs --checkpoint or --history")
        history = TrainingHistory.read_tsv(args.history, CLASS_NAMES[: cfg.num_classes])
        checkpoint = Path(args.history).parent / select_checkpoint(history, args.criterion or cfg.selection).checkpoint
    model, _ = load_checkpoint(checkpoint)
    patches = load_split(cfg, "test", args.species)
    class_order = CLASS_NAMES[: cfg.num_classes]
    records, _ = evaluate_model(model, patches, cfg.training.threshold, class_order, scenario=args.scenario_label, method=cfg.method)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = write_csv(sort_records(records, class_order), out / "metrics.csv")
    print(f"wrote {path}")


def cmd_predict(args):
    cfg = _config(args)
    out = Path(args.output)
    predict_file(args.checkpoint, args.image, args.class_id, cfg.profiles[args.species], out, cfg.training.threshold)
    print(f"wrote {out}")


def cmd_report(args):
    cfg = _config(args)
    out = Path(args.output) if args.output else None
    md = report_from_csvs(args.csv, out, CLASS_NAMES[: cfg.num_classes])
    if out is None:
        sys.stdout.write(md)
    else:
        print(f"wrote {out}")


def cmd_run(args):
    cfg = _config(args)
    reports = run_scenarios(cfg, args.scenario or None, reuse=not args.fresh)
    for rep in reports:
        avg = rep.records[-1]
        print(json.dumps({"scenario": rep.scenario, "epoch": rep.selected_epoch, "dice": avg.dice, "hd_um": avg.hd_um, "msd_um": avg.msd_um}))


def build_parser():
    parser = argparse.ArgumentParser(prog="glam", description="Class-conditional lesion segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--out", help="output directory")
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "write a synthetic dataset")
    p = add("ingest", cmd_ingest, "resize raw patches to working size")
    p.add_argument("--src", required=True, help="raw dataset root (<species>/<class>/<id>_img.png)")
    p = add("split", cmd_split, "build a train/val/test manifest")
    p.add_argument("--root", help="dataset root")
    p.add_argument("--manifest", help="manifest output path (default <root>/manifest.tsv)")
    p = add("train", cmd_train, "train for a scenario's species")
    p.add_argument("--scenario", choices=sorted(SCENARIOS))
    p.add_argument("--fresh", action="store_true", help="ignore an existing matching run")
    p = add("evaluate", cmd_evaluate, "score a checkpoint on test patches")
    p.add_argument("--checkpoint")
    p.add_argument("--history", help="history.tsv to select a checkpoint from")
    p.add_argument("--criterion", choices=["VM", "VH", "plain"])
    p.add_argument("--species", choices=SPECIES, default="human")
    p.add_argument("--scenario-label", default="")
    p = add("predict", cmd_predict, "write a predicted mask PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class-id", type=int, required=True)
    p.add_argument("--species", choices=SPECIES, default="human")
    p.add_argument("--output", required=True, help="mask PNG path")
    p = add("report", cmd_report, "markdown table from metric CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--output", help="markdown path (default stdout)")
    p = add("run", cmd_run, "run scenarios end to end")
    p.add_argument("--scenario", action="append", choices=sorted(SCENARIOS))
    p.add_argument("--fresh", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except GlamError as exc:
        msg = " ".join(str(exc).split())
        print(f"glam: error: {exc.category}: {msg}", file=sys.stderr)
        return EXIT_FAILURE
    except KeyboardInterrupt:
        print("glam: error: interrupted: keyboard interrupt", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
