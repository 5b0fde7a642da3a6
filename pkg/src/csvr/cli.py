"""``csvr`` command line: data generation, pretraining, evaluation, reports and plots.

Exit codes: 0 success, 2 usage or missing input, 3 training divergence, 4 IO.
Each invocation writes one ``run_manifest_<command>.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .config import config_hash, dump_config, finetune_defaults, load_config
from .exceptions import (CheckpointFormatError, CheckpointVersionError, ConfigSyntaxError, ConfigValueError,
                         DataShapeError, TrainingDivergedError)

log = logging.getLogger("csvr")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    """Bad flag values or a missing input artifact (exit 2)."""


@dataclass
class RunManifest:
    command: str
    config_hash: str = ""
    seed: int = 0
    version: str = __version__
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    started: float = field(default_factory=time.time)
    finished: float = 0.0
    exit_status: int = 0
    message: str = ""

    def write(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"run_manifest_{self.command}.json"
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
        os.replace(tmp, path)
        return path


# ------------------------------------------------------------------ helpers

def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"missing {what}: {path}")
    return path


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _configs(args, extra: dict | None = None):
    overrides = _overrides(getattr(args, "set", None))
    overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
    return load_config(getattr(args, "config", None), overrides)


def _run_dir(out, mc, tc) -> Path:
    return Path(out) / f"{config_hash(mc, tc)}-seed{tc.seed}"


def _load_corpus(path, mc):
    from .data import load_dataset

    _require(Path(path) / "manifest.json", "dataset manifest")
    return load_dataset(path, mc)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args, manifest: RunManifest) -> int:
    from .data import build_dataset, manifest_bytes

    if args.episodes < 1:
        raise UsageError("--episodes must be at least 1")
    mc, tc = _configs(args)
    classes = _int_list(args.classes) if args.classes else None
    info = build_dataset(mc, args.out, classes, args.episodes, args.seed, args.length)
    manifest.seed = args.seed
    manifest.config_hash = config_hash(mc, tc)
    manifest.outputs = {"dataset": str(args.out), "episodes": len(info["episodes"])}
    print(f"wrote {len(info['episodes'])} episodes to {args.out} "
          f"(manifest sha256 {_sha(manifest_bytes(info))[:12]})")
    return EXIT_OK


def _sha(data: bytes) -> str:
    import hashlib

    return hashlib.sha256(data).hexdigest()


def cmd_pretrain(args, manifest: RunManifest) -> int:
    from .trainer import pretrain, save_checkpoint, sigma_grid

    mc, tc = _configs(args, {"seed": args.seed, "epochs": args.epochs, "warmup_epochs": args.warmup_epochs})
    corpus = _load_corpus(args.data, mc)
    run = _run_dir(args.out, mc, tc) / args.mode
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.txt").write_text(dump_config(mc, tc))
    manifest.config_hash, manifest.seed = config_hash(mc, tc), tc.seed
    manifest.inputs = {"data": str(args.data)}
    if args.sigma_grid:
        rows = sigma_grid(corpus, mc, tc)
        path = run / "sigma_grid.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        manifest.outputs = {"sigma_grid": str(path)}
        print(f"wrote {path}")
        return EXIT_OK
    try:
        state = pretrain(corpus, mc, tc, args.mode, checkpoint_dir=run / "checkpoints")
    except TrainingDivergedError as exc:
        manifest.outputs = {"last_checkpoint": exc.checkpoint_path}
        raise
    final = save_checkpoint(state, run / "final.safetensors")
    state.log.write_csv(run / "metric_log.csv")
    state.log.write_jsonl(run / "metric_log.jsonl")
    manifest.outputs = {"checkpoint": str(final), "metric_log": str(run / "metric_log.csv")}
    print(f"wrote {final}")
    return EXIT_OK


def cmd_finetune(args, manifest: RunManifest) -> int:
    from .evals import finetune
    from .trainer import read_checkpoint

    ft = finetune_defaults(args.tag)
    changes = {"seed": args.seed}
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    ft = dataclasses.replace(ft, **changes)
    checkpoint = None
    if args.source != "scratch":
        if not args.checkpoint:
            raise UsageError(f"--checkpoint is required for source {args.source}")
        checkpoint = _require(args.checkpoint, "checkpoint")
        from .config import config_from_dict

        mc, _ = config_from_dict(read_checkpoint(checkpoint)[1]["config"])
    else:
        mc, _ = _configs(args)
    corpus = _load_corpus(args.data, mc)
    _, report = finetune(checkpoint, args.source, corpus, ft, linear_probe=args.linear_probe)
    run = _run_dir(args.out, mc, ft)
    run.mkdir(parents=True, exist_ok=True)
    path = run / f"eval_{args.source}.json"
    report.write_json(path)
    manifest.config_hash, manifest.seed = config_hash(mc, ft), ft.seed
    manifest.inputs = {"data": str(args.data), "checkpoint": str(checkpoint)}
    manifest.outputs = {"report": str(path)}
    print(f"top1 {report.top1:.4f} -> {path}")
    return EXIT_OK


def cmd_retrieve(args, manifest: RunManifest) -> int:
    from .evals import random_feature_recall, retrieve
    from .trainer import load_checkpoint

    ks = _int_list(args.k)
    if not ks or min(ks) < 1:
        raise UsageError("--k needs positive integers")
    state = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    corpus = _load_corpus(args.data, state.model_cfg)
    report = retrieve(state.nets.v_net, corpus, ks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "retrieval.json"
    payload = report.to_dict()
    if args.random_control:
        control = random_feature_recall([e.label for e in corpus.test], [e.label for e in corpus.train], ks=ks)
        payload["random_control"] = control.to_dict()["recalls"]
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    manifest.inputs = {"checkpoint": str(args.checkpoint), "data": str(args.data)}
    manifest.outputs = {"report": str(path)}
    manifest.seed = state.train_cfg.seed
    for k, v in report.recalls.items():
        print(f"R@{k} {v:.4f}")
    return EXIT_OK


def _load_report(path):
    import numpy as np

    from .evals import EvalReport

    data = json.loads(_require(path, "report").read_text())
    try:
        return EvalReport(
            top1=data["top1"], per_class={int(k): v for k, v in data["per_class"].items()},
            confusion=np.asarray(data["confusion"]), feature_source=data["feature_source"],
            seed=data["seed"], classes=data["classes"], config=data.get("config", {}))
    except KeyError as exc:
        raise UsageError(f"{path} is not an evaluation report (missing {exc})") from exc


def cmd_report(args, manifest: RunManifest) -> int:
    from .evals import per_class_report, write_per_class_csv

    if not args.reports:
        raise UsageError("no reports given")
    reports = {}
    for path in args.reports:
        rep = _load_report(path)
        name = rep.feature_source
        while name in reports:
            name += "'"
        reports[name] = rep
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ordering = sorted(reports.items(), key=lambda kv: -kv[1].top1)
    with open(out / "ordering.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature_source", "seed", "top1"])
        for name, rep in ordering:
            writer.writerow([name, rep.seed, f"{rep.top1:.6f}"])
    table = per_class_report(reports)
    write_per_class_csv(table, out / "per_class.csv")
    (out / "per_class.json").write_text(json.dumps(table, indent=2, sort_keys=True))
    manifest.inputs = {"reports": [str(p) for p in args.reports]}
    manifest.outputs = {"ordering": str(out / "ordering.csv"), "per_class": str(out / "per_class.csv")}
    for name, rep in ordering:
        print(f"{name:10s} {rep.top1:.4f}")
    return EXIT_OK


def _read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_plot(args, manifest: RunManifest) -> int:
    from . import plots

    runs = [Path(r) for r in args.runs or []]
    if not runs:
        raise UsageError("no run directories given")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for run in runs:
        _require(run, "run directory")
        for log_path in sorted(run.rglob("metric_log.csv")):
            name = "_".join(log_path.parent.relative_to(run).parts) or run.name
            written.append(plots.plot_loss_curves(_read_csv(log_path), out / f"loss_{name}.png"))
        for grid in sorted(run.rglob("sigma_grid.csv")):
            written.append(plots.plot_sigma_heatmap(_read_csv(grid), out / "sigma_heatmap.png"))
        for table in sorted(run.rglob("per_class.json")):
            data = json.loads(table.read_text())
            written.append(plots.plot_per_class(data["rows"], data["sources"], out / "per_class.png"))
    if not written:
        raise UsageError("no metric logs, sigma grids or per-class tables found under the given runs")
    manifest.inputs = {"runs": [str(r) for r in runs]}
    manifest.outputs = {"figures": [str(p) for p in written]}
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csvr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key=value config file (default: $CSVR_CONFIG)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("gen-data", help="render the synthetic corpus")
    with_config(p)
    p.add_argument("--classes", help="comma-separated class ids (default: all)")
    p.add_argument("--episodes", type=int, default=25, help="episodes per class")
    p.add_argument("--length", type=int, default=None, help="frames per episode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    from .trainer import MODES

    p = sub.add_parser("pretrain", help="warmup plus joint self-supervised training")
    with_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=sorted(MODES), default="full")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--sigma-grid", action="store_true", help="sweep sigma_p x sigma_c instead")
    p.set_defaults(func=cmd_pretrain)

    from .evals import FEATURE_SOURCES

    p = sub.add_parser("finetune", help="fine-tune and evaluate action recognition")
    with_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--source", choices=FEATURE_SOURCES, default="f_i_full")
    p.add_argument("--tag", choices=("A", "B"), default="A")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--linear-probe", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("retrieve", help="nearest-neighbour clip retrieval")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", default="1,5,10,20")
    p.add_argument("--random-control", action="store_true")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("report", help="merge evaluation reports")
    p.add_argument("reports", nargs="*")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot", help="static figures from run directories")
    p.add_argument("runs", nargs="*")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def _manifest_dir(args) -> Path:
    out = Path(args.out)
    return out if out.suffix == "" else out.parent


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(command=args.command)
    try:
        status = args.func(args, manifest)
    except (UsageError, ConfigSyntaxError, ConfigValueError, DataShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        status, manifest.message = EXIT_USAGE, str(exc)
    except TrainingDivergedError as exc:
        print(f"error: {exc}; last finite checkpoint: {exc.checkpoint_path}", file=sys.stderr)
        status, manifest.message = EXIT_DIVERGED, str(exc)
    except (OSError, CheckpointFormatError, CheckpointVersionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        status, manifest.message = EXIT_IO, str(exc)
    manifest.finished = time.time()
    manifest.exit_status = status
    try:
        manifest.write(_manifest_dir(args))
    except OSError as exc:
        print(f"warning: could not write run manifest: {exc}", file=sys.stderr)
        status = status or EXIT_IO
    return status


if __name__ == "__main__":
    sys.exit(main())
