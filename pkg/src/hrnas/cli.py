"""Command-line entry point: search, eval, flops, plotdata.

Configuration is a single JSON document with `supernet`, `search` and `task`
sections; a separate --task file contributes its `task` section. Flags
override file values; the HRNAS_SEED environment variable is the
lowest-precedence seed source. Exit codes: 0 success, 2 configuration/parse
failure, 3 training abort, 4 descriptor validation failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from .descriptor import (
    DescriptorError,
    export_descriptor,
    import_descriptor,
    rebuild_network,
)
from .flops import brute_force_count, network_flops
from .search import SearchConfig, TrainingAbort, evaluate, search
from .supernet import SupernetConfig, build_supernet
from .tensor import ConfigurationError
from .toytasks import make_dataset

EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_DESCRIPTOR = 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_json(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}", EXIT_CONFIG)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{p}:{exc.lineno}:{exc.colno}: {exc.msg}", EXIT_CONFIG) from exc


def _merge_config(config_path: str | None, task_path: str | None) -> dict:
    merged: dict = {}
    if config_path:
        merged.update(_load_json(config_path))
    if task_path:
        task_doc = _load_json(task_path)
        merged["task"] = task_doc.get("task", task_doc)
    return merged


def _resolve_seed(flag_seed: int | None, config: dict) -> int:
    if flag_seed is not None:
        return flag_seed
    if "seed" in config.get("search", {}):
        return int(config["search"]["seed"])
    env = os.environ.get("HRNAS_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise CliError(f"HRNAS_SEED must be an integer, got {env!r}", EXIT_CONFIG) from exc
    return 0


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, argv: list[str], seed: int,
                    config_files: dict, outputs: list[Path], started: str) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "seed": seed,
        "config_files": config_files,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _require(config: dict, section: str, context: str) -> dict:
    if section not in config:
        raise CliError(f"missing {section!r} section in {context}", EXIT_CONFIG)
    return config[section]


def _plotdata_from_header(header: dict) -> dict:
    blocks = []
    for rec in header["blocks"]:
        alive3 = len(rec["alive_conv"]["conv3"])
        alive5 = len(rec["alive_conv"]["conv5"])
        alive7 = len(rec["alive_conv"]["conv7"])
        tokens = len(rec["alive_tokens"])
        initial = 3 * rec["group_size"] + rec["tokens_init"]
        blocks.append(
            {
                "path": rec["path"],
                "conv3": alive3,
                "conv5": alive5,
                "conv7": alive7,
                "tokens": tokens,
                "removed": initial - alive3 - alive5 - alive7 - tokens,
                "initial": initial,
                "kind": rec["kind"],
            }
        )
    return {"blocks": blocks}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_search(args: argparse.Namespace, argv: list[str]) -> int:
    started = datetime.now(timezone.utc).isoformat()
    config = _merge_config(args.config, args.task)
    sup_dict = _require(config, "supernet", args.config or "config")
    task = _require(config, "task", args.task or args.config or "config")
    search_dict = dict(config.get("search", {}))
    seed = _resolve_seed(args.seed, config)
    search_dict["seed"] = seed
    if args.lam is not None:
        search_dict["lambda"] = args.lam
    try:
        sup_cfg = SupernetConfig.from_dict(sup_dict)
        search_cfg = SearchConfig.from_dict(search_dict)
        search_cfg.validate()
    except (ConfigurationError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}", EXIT_CONFIG) from exc

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = search(sup_cfg, search_cfg, task)
    except TrainingAbort as exc:
        snapshot_path = out_dir / "abort_snapshot.json"
        snapshot_path.write_text(json.dumps(exc.snapshot, indent=2, sort_keys=True))
        print(f"training aborted: {exc} (snapshot: {snapshot_path})", file=sys.stderr)
        return EXIT_TRAINING
    except ConfigurationError as exc:
        raise CliError(f"invalid configuration: {exc}", EXIT_CONFIG) from exc

    outputs = []
    desc_path = out_dir / "descriptor.hrnd"
    export_descriptor(result, desc_path)
    outputs.append(desc_path)

    log_path = out_dir / "search_log.csv"
    with log_path.open("w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "task_loss", "penalty", "total_flops", "alive_units"]
        )
        writer.writeheader()
        writer.writerows(result.log_rows)
    outputs.append(log_path)

    report = network_flops(result.net).to_dict()
    flops_json = out_dir / "flops.json"
    flops_json.write_text(json.dumps(report, indent=2, sort_keys=True))
    outputs.append(flops_json)
    flops_txt = out_dir / "flops.txt"
    flops_txt.write_text(network_flops(result.net).to_text() + "\n")
    outputs.append(flops_txt)

    from .report import render_search_curves

    outputs.append(render_search_curves(result.log_rows, out_dir / "curves.png"))
    manifest = _write_manifest(
        out_dir, "search", argv, seed,
        {"config": args.config, "task": args.task}, outputs, started,
    )
    metrics = " ".join(f"{k}={v}" for k, v in result.final_metrics.items() if k != "kind")
    print(f"descriptor: {desc_path}")
    print(f"final {result.final_metrics['kind']} metrics: {metrics}")
    print(f"manifest: {manifest}")
    return 0


def cmd_eval(args: argparse.Namespace, argv: list[str]) -> int:
    desc = import_descriptor(args.descriptor)
    net = rebuild_network(desc)
    config = _merge_config(None, args.task)
    task = _require(config, "task", args.task)
    dataset = make_dataset(task, "val")
    batch = int(desc.header["config"]["search"].get("batch_size", 16))
    metrics = evaluate(net, dataset, batch)
    for key, value in metrics.items():
        if key == "kind":
            print(f"kind={value}")
        else:
            print(f"{key}={value!r}")
    return 0


def cmd_flops(args: argparse.Namespace, argv: list[str]) -> int:
    started = datetime.now(timezone.utc).isoformat()
    if args.descriptor:
        desc = import_descriptor(args.descriptor)
        net = rebuild_network(desc)
        source = {"descriptor": args.descriptor}
    else:
        config = _merge_config(args.config, args.task)
        sup_dict = _require(config, "supernet", args.config)
        task = config.get("task", {})
        try:
            sup_cfg = SupernetConfig.from_dict(sup_dict)
        except (ConfigurationError, KeyError, TypeError, ValueError) as exc:
            raise CliError(f"invalid configuration: {exc}", EXIT_CONFIG) from exc
        net = build_supernet(
            sup_cfg,
            classes=int(task.get("classes", 10)),
            input_hw=int(task.get("hw", 64)),
            seed=_resolve_seed(args.seed, config),
        )
        source = {"config": args.config, "task": args.task}

    report = network_flops(net)
    oracle = brute_force_count(net)
    if report.total != oracle:
        raise AssertionError(
            f"closed-form total {report.total} disagrees with instrumented count {oracle}"
        )
    doc = report.to_dict()
    doc["oracle_total"] = oracle
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    flops_json = out_dir / "flops.json"
    flops_json.write_text(json.dumps(doc, indent=2, sort_keys=True))
    flops_txt = out_dir / "flops.txt"
    flops_txt.write_text(report.to_text() + "\n")

    from .report import render_flops_chart

    chart = render_flops_chart(doc, out_dir / "flops.png")
    _write_manifest(out_dir, "flops", argv, 0, source, [flops_json, flops_txt, chart], started)
    print(report.to_text())
    print(f"oracle-verified total: {oracle}")
    return 0


def cmd_plotdata(args: argparse.Namespace, argv: list[str]) -> int:
    started = datetime.now(timezone.utc).isoformat()
    desc = import_descriptor(args.descriptor)
    plotdata = _plotdata_from_header(desc.header)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "plotdata.json"
    json_path.write_text(json.dumps(plotdata, indent=2, sort_keys=True))

    from .report import render_block_sectors

    figure = render_block_sectors(plotdata, out_dir / "blocks.png")
    _write_manifest(
        out_dir, "plotdata", argv, 0, {"descriptor": args.descriptor},
        [json_path, figure], started,
    )
    print(json_path)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hrnas",
        description="Search, evaluate and report on prunable multi-branch supernets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_search = sub.add_parser("search", help="run the progressive-shrinking search")
    p_search.add_argument("--config", required=True, help="JSON with supernet/search sections")
    p_search.add_argument("--task", required=True, help="JSON with the task section")
    p_search.add_argument("--out", required=True, help="output directory")
    p_search.add_argument("--seed", type=int, default=None)
    p_search.add_argument("--lambda", dest="lam", type=float, default=None,
                          help="penalty coefficient override")
    p_search.set_defaults(func=cmd_search)

    p_eval = sub.add_parser("eval", help="evaluate a descriptor on the task's val split")
    p_eval.add_argument("--descriptor", required=True)
    p_eval.add_argument("--task", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_flops = sub.add_parser("flops", help="write table/JSON/figure of MAC counts")
    group = p_flops.add_mutually_exclusive_group(required=True)
    group.add_argument("--descriptor")
    group.add_argument("--config")
    p_flops.add_argument("--task", default=None)
    p_flops.add_argument("--seed", type=int, default=None)
    p_flops.add_argument("--out", default=".")
    p_flops.set_defaults(func=cmd_flops)

    p_plot = sub.add_parser("plotdata", help="per-block unit composition JSON and figure")
    p_plot.add_argument("--descriptor", required=True)
    p_plot.add_argument("--out", default=".")
    p_plot.set_defaults(func=cmd_plotdata)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DescriptorError as exc:
        print(f"descriptor error: {exc}", file=sys.stderr)
        return EXIT_DESCRIPTOR
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
