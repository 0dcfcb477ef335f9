"""Command-line front end.

Subcommands: ``train`` (run experiments from a config file), ``prune``
(re-run the mask search from a checkpoint plus logit dump), ``eval`` (score
a checkpoint on a dataset split), ``report`` (summarize a result store) and
``sweep`` (cartesian product of config axes).  Metric lines printed by
``train``/``eval``/``prune`` contain no timings, so identical inputs print
byte-identical results.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .experiment import ALL_RUNS, ExperimentConfig, RunStore, run_experiment
from .inference import load_logit_dump
from .model import load_checkpoint
from .pruning import select_best
from .report import build_report
from .weights import make_weights


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multiexit",
        description="Multi-exit networks: joint training, logit fusion, exit pruning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run experiments described by a config file")
    p_train.add_argument("--config", required=True, help="flat YAML experiment config")
    p_train.add_argument("--out-dir", default="runs", help="artifact and record directory")
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--subsample", type=float, default=None,
                         help="override the stratified train fraction")
    p_train.add_argument("--runs", default="baseline,ee,ee*",
                         help="comma list out of: baseline, ee, ee*")
    p_train.add_argument("--data-root", default=None, help="dataset directory")
    p_train.add_argument("--latency", action="store_true",
                         help="also measure forward latency (timing noise by nature)")

    p_prune = sub.add_parser("prune", help="exhaustive exit-mask search from saved artifacts")
    p_prune.add_argument("--checkpoint", required=True)
    p_prune.add_argument("--logits", required=True, help="validation logit dump (.npz)")
    p_prune.add_argument("--weight-mode", default="unif")
    p_prune.add_argument("--out-dir", default=None,
                         help="where to write pruned.ckpt and prune_report.json")

    p_eval = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--split", default="test", choices=("train", "val", "test"))
    p_eval.add_argument("--image-size", type=int, required=True)
    p_eval.add_argument("--weight-mode", default="unif")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--subsample", type=float, default=None)
    p_eval.add_argument("--data-root", default=None)

    p_report = sub.add_parser("report", help="percent-change tables from a result store")
    p_report.add_argument("--store", required=True, help="records.jsonl path")
    p_report.add_argument("--group-by", default="network", choices=("network", "dataset"))
    p_report.add_argument("--format", default="grid", choices=("grid", "csv"))
    p_report.add_argument("--out", default=None, help="write to file instead of stdout")

    p_sweep = sub.add_parser("sweep", help="cartesian product over comma-separated config axes")
    p_sweep.add_argument("--config", required=True,
                         help="YAML config; any value may be a comma list")
    p_sweep.add_argument("--out-dir", default="runs")
    p_sweep.add_argument("--runs", default="baseline,ee,ee*")
    p_sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p_sweep.add_argument("--data-root", default=None)
    p_sweep.add_argument("--seed", type=int, default=None,
                         help="override the seed axis with a single value")
    return parser


def _parse_runs(text: str) -> tuple[str, ...]:
    runs = tuple(part.strip() for part in text.split(",") if part.strip())
    for r in runs:
        if r not in ALL_RUNS:
            raise ValueError(f"unknown run kind {r!r}; expected subset of {ALL_RUNS}")
    if not runs:
        raise ValueError("--runs selected nothing")
    return runs


def _print_record(record: dict) -> None:
    cfg = record["config"]
    fields = [
        f"kind={record['run_kind']}",
        f"dataset={cfg['dataset']}",
        f"backbone={cfg['backbone']}",
        f"layout={cfg['exit_layout']}",
        f"mode={cfg['weight_mode']}",
        f"train={cfg['train_mode']}",
        f"size={cfg['image_size']}",
        f"seed={cfg['seed']}",
        f"val_top1={record['val_top1']:.6f}",
        f"test_top1={record['test_top1']:.6f}",
        f"params={record['params']}",
        f"macs={record['macs']}",
    ]
    if record.get("chosen_mask") is not None:
        fields.append("mask=" + "".join(str(b) for b in record["chosen_mask"]))
    print("RESULT " + " ".join(fields))


def _cmd_train(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    if args.seed is not None:
        config = ExperimentConfig.from_dict({**config.to_dict(), "seed": args.seed})
    if args.subsample is not None:
        config = ExperimentConfig.from_dict({**config.to_dict(), "subsample": args.subsample})
    if args.latency:
        config = ExperimentConfig.from_dict({**config.to_dict(), "measure_latency": True})
    records = run_experiment(config, args.out_dir, runs=_parse_runs(args.runs),
                             data_root=args.data_root)
    for record in records:
        _print_record(record)
    return 0


def _cmd_prune(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dump = load_logit_dump(args.logits)
    if dump.n_exits != model.n_exits:
        raise ValueError(
            f"dump has {dump.n_exits} exits, checkpoint has {model.n_exits}"
        )
    weights = make_weights(args.weight_mode, model.n_exits)
    report, subnetwork = select_best(model, weights, dump=dump)
    print(f"PRUNE chosen_mask={report.chosen_mask.as_bits()} "
          f"val_top1={report.chosen.val_top1:.6f} "
          f"params={report.chosen.params} macs={report.chosen.macs} "
          f"evaluated={len(report.evaluations)}")
    if args.out_dir is not None:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        from .model import save_checkpoint

        save_checkpoint(subnetwork, out / "pruned.ckpt")
        (out / "prune_report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return 0


def _cmd_eval(args) -> int:
    from .data import load_dataset
    from .inference import ensemble_top1, per_exit_accuracies

    model = load_checkpoint(args.checkpoint)
    splits = load_dataset(args.dataset, args.image_size, seed=args.seed,
                          subsample=args.subsample, data_root=args.data_root)
    split = dict(zip(("train", "val", "test"), splits))[args.split]
    weights = make_weights(args.weight_mode, model.n_exits)
    top1 = ensemble_top1(model, split, weights.output_weights)
    per_exit = per_exit_accuracies(model, split)
    print(f"EVAL split={args.split} n={len(split)} ensemble_top1={top1:.6f} "
          + " ".join(f"exit{k + 1}_top1={a:.6f}" for k, a in enumerate(per_exit)))
    return 0


def _cmd_report(args) -> int:
    store = RunStore(args.store)
    report = build_report(store, group_by=args.group_by)
    text = report.to_text() if args.format == "grid" else report.to_csv()
    if args.out is not None:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def _expand_axes(raw: dict) -> list[dict]:
    """Expand comma-separated values into the cartesian product of configs."""
    axes: list[tuple[str, list]] = []
    for key, value in raw.items():
        if isinstance(value, str) and "," in value:
            values = [v.strip() for v in value.split(",") if v.strip()]
        elif isinstance(value, list):
            values = value
        else:
            values = [value]
        axes.append((key, values))
    combos = [{}]
    for key, values in axes:
        combos = [{**c, key: v} for c in combos for v in values]
    return combos


def _coerce_types(mapping: dict) -> dict:
    """String axis values back to config field types (YAML lists keep types)."""
    out = {}
    for key, value in mapping.items():
        if isinstance(value, str):
            for cast in (int, float):
                try:
                    value = cast(value)
                    break
                except ValueError:
                    continue
        out[key] = value
    # exit_layout is stringly typed on purpose
    if "exit_layout" in out:
        out["exit_layout"] = str(out["exit_layout"])
    return out


def _sweep_worker(config_dict: dict, out_dir: str, shard: str, runs: tuple[str, ...],
                  data_root: str | None) -> list[dict]:
    config = ExperimentConfig.from_dict(config_dict)
    store = RunStore(shard)
    return run_experiment(config, out_dir, runs=runs, data_root=data_root, store=store)


def _cmd_sweep(args) -> int:
    import yaml

    with open(args.config) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"config file {args.config} must hold a flat key-value mapping")
    if args.seed is not None:
        raw["seed"] = args.seed
    combos = [_coerce_types(c) for c in _expand_axes(raw)]
    runs = _parse_runs(args.runs)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = RunStore(out_dir / "records.jsonl")

    print(f"SWEEP {len(combos)} configurations, jobs={args.jobs}")
    if args.jobs <= 1:
        for i, combo in enumerate(combos):
            config = ExperimentConfig.from_dict(combo)
            print(f"SWEEP [{i + 1}/{len(combos)}] {config.slug()}")
            for record in run_experiment(config, out_dir, runs=runs,
                                         data_root=args.data_root, store=store):
                _print_record(record)
        return 0

    shard_dir = out_dir / "shards"
    shard_dir.mkdir(parents=True, exist_ok=True)
    shards = [str(shard_dir / f"shard_{i:04d}.jsonl") for i in range(len(combos))]
    with ProcessPoolExecutor(max_workers=args.jobs) as pool:
        futures = [
            pool.submit(_sweep_worker, combo, str(out_dir), shard, runs, args.data_root)
            for combo, shard in zip(combos, shards)
        ]
        for future in futures:
            for record in future.result():
                _print_record(record)
    # merge shards into the main store in submission order
    for shard in shards:
        for record in RunStore(shard).read_all():
            record.pop("record_id", None)
            record.pop("schema_version", None)
            store.append(record)
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "prune": _cmd_prune,
    "eval": _cmd_eval,
    "report": _cmd_report,
    "sweep": _cmd_sweep,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # runtime failures are exit code 1, not tracebacks
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))
