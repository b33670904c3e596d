"""Command line entry point.

Subcommands: prep, synth, train, eval, report. Dotted config keys can be
passed directly as flags (``--d2r.enabled false``), through ``--set k=v`` or
from a JSON config file; every command writes its effective configuration
snapshot next to its outputs. Exit codes: 0 success, 2 configuration error,
3 data-format error, 4 runtime error.
"""

import argparse
import json
import sys
from pathlib import Path

import torch

from . import evaluation
from . import synth as synth_mod
from .config import CONFIG_SPEC, RunConfig, reference_page
from .core import ConfigError, FormatError, LabelSpace, MmharError, ValidationError
from .ingest import label_space_from_manifest, prep_source_dir, read_manifest, write_manifest
from .model import DopplerActionNet, load_embedding_bank
from .train import checkpoint_load, checkpoint_save, load_dataset, train, write_train_log

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_RUNTIME = 4


def _dotted_overrides(extras):
    """Turn leftover ``--section.key value`` flags into key=value pairs."""
    pairs = []
    i = 0
    while i < len(extras):
        token = extras[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}")
        body = token[2:]
        if "=" in body:
            key, value = body.split("=", 1)
        else:
            if i + 1 >= len(extras) or extras[i + 1].startswith("--"):
                raise ConfigError(f"flag {token!r} is missing a value")
            key, value = body, extras[i + 1]
            i += 1
        if key not in CONFIG_SPEC:
            raise ConfigError(f"unknown config key {key!r}")
        pairs.append((key, value))
        i += 1
    return pairs


def _build_config(args, extras):
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg.update_from_file(args.config)
    cfg.update_from_pairs(getattr(args, "set", None) or [])
    cfg.update_from_pairs(_dotted_overrides(extras))
    return cfg


def _apply_determinism(args):
    if getattr(args, "deterministic", False):
        torch.set_num_threads(1)


def _resolve_split(args, cfg, rows):
    if getattr(args, "split", None):
        return evaluation.read_split(args.split, protocol=args.protocol)
    return evaluation.split(rows, args.protocol, seed=cfg.get("eval.split_seed"))


def _load_bank(cfg, k):
    path = cfg.get("tam.bank_file")
    if path:
        return load_embedding_bank(path, expected_k=k)
    return None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_prep(args, cfg):
    out_dir = Path(args.out)
    result = prep_source_dir(
        args.source_dir, args.source, out_dir, normalize=cfg.get("prep.normalize")
    )
    write_manifest(out_dir / "manifest.csv", result.manifest_rows)
    cfg.write_snapshot(
        out_dir,
        extra={"command": "prep", "source": args.source, "source_dir": str(args.source_dir)},
    )
    print(
        f"prep: {result.n_input_files} files, {result.n_frames} input frames -> "
        f"{result.n_sequences} archives under {out_dir}"
    )
    return EXIT_OK


def cmd_synth(args, cfg):
    out_dir = Path(args.out)
    profiles = primitives = None
    scenario = cfg.get("synth.scenario_file")
    if scenario:
        profiles, primitives = synth_mod.load_scenario(scenario)
    rows, label_space = synth_mod.generate_benchmark(
        out_dir,
        n_sources=cfg.get("synth.n_sources"),
        n_classes=cfg.get("synth.n_classes"),
        clips_per_class_per_source=cfg.get("synth.clips_per_class"),
        seed=cfg.get("synth.seed"),
        normalize=cfg.get("synth.normalize"),
        duration_s=cfg.get("synth.duration_s"),
        profiles=profiles,
        primitives=primitives,
    )
    cfg.write_snapshot(out_dir, extra={"command": "synth"})
    sources = sorted({r.source for r in rows})
    print(
        f"synth: {len(rows)} clips ({len(sources)} sources x "
        f"{label_space.class_count} classes) under {out_dir}"
    )
    return EXIT_OK


def cmd_train(args, cfg):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = Path(args.manifest)
    rows = read_manifest(manifest_path)
    label_space = label_space_from_manifest(manifest_path, rows)
    split = _resolve_split(args, cfg, rows)
    by_id = {r.sample_id: r for r in rows}
    train_rows = [by_id[i] for i in split.train_ids]
    test_rows = [by_id[i] for i in split.test_ids]

    train_cfg = cfg.train_config()
    torch.manual_seed(train_cfg.seed)  # model init must precede train() seeding
    model = DopplerActionNet(
        cfg.model_config(label_space.class_count),
        label_space,
        bank=_load_bank(cfg, label_space.class_count),
    )
    dataset = load_dataset(manifest_path, train_rows, label_space)
    log = train(model, dataset, train_cfg)

    checkpoint_save(model, out_dir / "checkpoint.zip", extra={"protocol": split.protocol})
    write_train_log(out_dir / "train_log.csv", log)
    evaluation.write_split(out_dir / "split.csv", split)
    cfg.write_snapshot(
        out_dir,
        extra={"command": "train", "protocol": args.protocol, "manifest": str(args.manifest)},
    )

    summary = {
        "epochs": len(log),
        "final_train_loss": log[-1]["loss"] if log else None,
        "final_train_acc": log[-1]["acc"] if log else None,
        "q": float(model.q.detach()),
        "n_train": len(train_rows),
        "n_test": len(test_rows),
    }
    if test_rows:
        test_set = load_dataset(manifest_path, test_rows, label_space)
        report = evaluation.evaluate(
            model,
            test_set,
            batch_size=cfg.get("eval.batch_size"),
            protocol=split.protocol,
            seed_base=cfg.get("d2r.seed"),
        )
        summary["final_test_micro_acc"] = report.micro_acc
        summary["final_test_macro_acc"] = report.macro_acc
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(
        f"train: {len(train_rows)} clips, {len(log)} epochs, "
        f"final train acc {summary.get('final_train_acc')}, "
        f"test micro acc {summary.get('final_test_micro_acc')}"
    )
    return EXIT_OK


def cmd_eval(args, cfg):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, _ = checkpoint_load(args.checkpoint)
    manifest_path = Path(args.manifest)
    rows = read_manifest(manifest_path)
    split = _resolve_split(args, cfg, rows)
    by_id = {r.sample_id: r for r in rows}
    missing = [i for i in split.test_ids if i not in by_id]
    if missing:
        raise ValidationError(f"split references {len(missing)} ids missing from the manifest")
    label_space = LabelSpace(model.class_names)
    test_rows = [by_id[i] for i in split.test_ids]
    test_set = load_dataset(manifest_path, test_rows, label_space)
    report = evaluation.evaluate(
        model,
        test_set,
        batch_size=cfg.get("eval.batch_size"),
        protocol=split.protocol,
        seed_base=cfg.get("d2r.seed"),
    )
    report.to_csv(out_dir / "report.csv")
    cfg.write_snapshot(
        out_dir,
        extra={
            "command": "eval",
            "protocol": args.protocol,
            "manifest": str(args.manifest),
            "checkpoint": str(args.checkpoint),
        },
    )
    if args.plot:
        _plot_report(report, out_dir / "report.png")
    print(
        f"eval[{split.protocol}]: n={report.n_test} micro={report.micro_acc:.4f} "
        f"macro={report.macro_acc:.4f} offdiag={report.offdiag_acc} "
        f"coral={report.coral} mmd={report.mmd}"
    )
    return EXIT_OK


def cmd_report(args, cfg):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    baseline = evaluation.MetricReport.from_csv(args.baseline)
    ours = evaluation.MetricReport.from_csv(args.ours)
    improvements = evaluation.relative_improvement(baseline, ours)
    import csv as _csv

    with open(out_dir / "improvements.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["metric", "baseline", "ours", "improvement_pct"])
        for name in evaluation.INCREASING_METRICS + evaluation.DECREASING_METRICS:
            b, o = getattr(baseline, name), getattr(ours, name)
            pct = improvements[name]
            writer.writerow(
                [
                    name,
                    "" if b is None else repr(float(b)),
                    "" if o is None else repr(float(o)),
                    "" if pct is None else repr(float(pct)),
                ]
            )
    cfg.write_snapshot(
        out_dir,
        extra={"command": "report", "baseline": str(args.baseline), "ours": str(args.ours)},
    )
    if args.plot:
        _plot_improvements(improvements, out_dir / "improvements.png")
    for name, pct in improvements.items():
        if pct is not None:
            print(f"report: {name} improvement {pct:+.2f}%")
    return EXIT_OK


def _plot_report(report, path):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise MmharError("matplotlib is required for --plot (install mmhar[plots])") from None
    names, values = [], []
    for name in report.SCALARS:
        value = getattr(report, name)
        if value is not None:
            names.append(name)
            values.append(value)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(names, values, color="#4878a8")
    ax.set_ylabel("value")
    ax.set_title(f"metrics [{report.protocol}] n={report.n_test}")
    plt.xticks(rotation=30, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_improvements(improvements, path):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise MmharError("matplotlib is required for --plot (install mmhar[plots])") from None
    items = [(k, v) for k, v in improvements.items() if v is not None]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar([k for k, _ in items], [v for _, v in items], color="#53a567")
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_ylabel("improvement (%)")
    plt.xticks(rotation=30, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmhar",
        description="Doppler-guided mmWave point cloud action recognition toolkit",
    )
    parser.add_argument(
        "--config-reference",
        action="store_true",
        help="print the documentation of every config key and exit",
    )
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", help="JSON config file (nested or flat dotted keys)")
        p.add_argument(
            "--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)"
        )
        p.add_argument(
            "--deterministic",
            action="store_true",
            help="force single-threaded compute for bitwise reproducibility",
        )

    p = sub.add_parser("prep", help="preprocess one source directory into clip archives")
    p.add_argument("--source-dir", required=True)
    p.add_argument("--source", required=True, help="source name (radhar | mri | mmfi)")
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("synth", help="generate the synthetic multi-source benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="shorthand for --synth.seed")
    p.add_argument("--clips-per-class", type=int, help="shorthand for --synth.clips_per_class")
    common(p)

    p = sub.add_parser("train", help="split, train and checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--protocol", required=True, choices=evaluation.PROTOCOLS)
    p.add_argument("--out", required=True)
    p.add_argument("--split", help="reuse a previously written split.csv")
    p.add_argument("--epochs", type=int, help="shorthand for --train.epochs")
    p.add_argument("--seed", type=int, help="shorthand for --train.seed")
    common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write the metric report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--protocol", required=True, choices=evaluation.PROTOCOLS)
    p.add_argument("--out", required=True)
    p.add_argument("--split", help="reuse a previously written split.csv")
    p.add_argument("--plot", action="store_true", help="also write plot files")
    common(p)

    p = sub.add_parser("report", help="relative improvements between two metric reports")
    p.add_argument("--baseline", required=True)
    p.add_argument("--ours", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true")
    common(p)
    return parser


COMMANDS = {
    "prep": cmd_prep,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    if args.config_reference:
        print(reference_page())
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        cfg = _build_config(args, extras)
        if args.command == "synth":
            if args.seed is not None:
                cfg.set("synth.seed", args.seed)
            if args.clips_per_class is not None:
                cfg.set("synth.clips_per_class", args.clips_per_class)
        if args.command == "train":
            if args.epochs is not None:
                cfg.set("train.epochs", args.epochs)
            if args.seed is not None:
                cfg.set("train.seed", args.seed)
        _apply_determinism(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FileNotFoundError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except MmharError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
