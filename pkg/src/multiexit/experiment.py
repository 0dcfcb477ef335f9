"""Experiment harness: config files, run orchestration, result records.

One experiment covers up to three runs on the same data and backbone seed:

* ``baseline``: the plain single-exit network (only the deepest head),
* ``ee``: the multi-exit model trained jointly and fused at inference,
* ``ee*``: the pruned sub-network picked by exhaustive mask search.

Each run appends one JSON record to an append-only line store, referencing
any artifacts (checkpoints, histories, logit dumps, prune reports) written
next to it.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import yaml

from .backbones import build_backbone, registered_backbones
from .costs import count_macs, count_params, measure_latency
from .data import dataset_spec, load_dataset
from .inference import collect_logits, ensemble_top1, per_exit_accuracies, save_logit_dump
from .model import (
    MultiExitModel,
    attach_exits,
    load_checkpoint,
    save_checkpoint,
    spread_exit_indices,
)
from .pruning import select_best
from .training import TrainConfig, train_joint
from .weights import WeightMode, make_weights, restrict_weights

SCHEMA_VERSION = 1

RUN_BASELINE = "baseline"
RUN_EE = "ee"
RUN_EE_STAR = "ee*"
ALL_RUNS = (RUN_BASELINE, RUN_EE, RUN_EE_STAR)


@dataclass
class ExperimentConfig:
    """Flat, human-editable description of one experiment.

    Serialized as a flat YAML mapping; unknown keys are rejected so typos
    fail loudly instead of silently running defaults.
    """

    dataset: str = "cifar10"
    backbone: str = "micro-resnet-4"
    exit_layout: str = "full"  # "full" (one exit per stage) or an exit count like "4"
    weight_mode: str = "unif"
    train_mode: str = "scratch"  # scratch | finetune
    image_size: int = 64
    seed: int = 0
    subsample: float | None = None
    backbone_scale: float = 1.0
    max_epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-4
    early_stop_patience: int = 12
    measure_latency: bool = False

    def __post_init__(self):
        dataset_spec(self.dataset)  # raises KeyError on unknown names
        if self.backbone not in registered_backbones():
            raise KeyError(
                f"unknown backbone {self.backbone!r}; registered: {registered_backbones()}"
            )
        WeightMode.parse(self.weight_mode)
        if self.train_mode not in ("scratch", "finetune"):
            raise ValueError(f"train_mode must be scratch|finetune, got {self.train_mode!r}")
        self.exit_layout = str(self.exit_layout)
        if self.exit_layout != "full":
            try:
                n = int(self.exit_layout)
            except ValueError:
                raise ValueError(
                    f"exit_layout must be 'full' or an integer, got {self.exit_layout!r}"
                ) from None
            if n < 1:
                raise ValueError(f"exit_layout must be positive, got {n}")
        if self.image_size < 8:
            raise ValueError(f"image_size too small: {self.image_size}")
        if self.subsample is not None and not (0 < self.subsample <= 1):
            raise ValueError(f"subsample must be in (0, 1], got {self.subsample}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, mapping: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ValueError(f"unknown config keys {unknown}; known keys: {sorted(known)}")
        return cls(**mapping)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ValueError(f"config file {path} must hold a flat key-value mapping")
        return cls.from_dict(raw)

    def slug(self) -> str:
        parts = [self.dataset, self.backbone, f"x{self.exit_layout}", self.weight_mode,
                 self.train_mode, f"{self.image_size}px", f"s{self.seed}"]
        if self.subsample is not None:
            parts.append(f"sub{self.subsample:g}")
        if self.backbone_scale != 1.0:
            parts.append(f"w{self.backbone_scale:g}")
        return "_".join(parts).replace("/", "-")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            max_epochs=self.max_epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            early_stop_patience=self.early_stop_patience,
            seed=self.seed,
        )

    def exit_indices(self, n_stages: int) -> tuple[int, ...]:
        n = n_stages if self.exit_layout == "full" else int(self.exit_layout)
        return spread_exit_indices(n_stages, n)


class RunStore:
    """Append-only JSON-lines store of run records.

    Records receive sequential integer ids on write and are never mutated;
    re-reading yields them in insertion order.  Single-writer by design.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def __len__(self) -> int:
        if not self.path.exists():
            return 0
        with open(self.path) as fh:
            return sum(1 for line in fh if line.strip())

    def append(self, record: dict) -> int:
        record = dict(record)
        record["record_id"] = len(self)
        record["schema_version"] = SCHEMA_VERSION
        line = json.dumps(record, sort_keys=True)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(line + "\n")
            fh.flush()
        return record["record_id"]

    def read_all(self) -> list[dict]:
        if not self.path.exists():
            return []
        records = []
        with open(self.path) as fh:
            for lineno, line in enumerate(fh):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{self.path}:{lineno + 1}: corrupt record: {exc}") from exc
        return records


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat()


def _base_record(config: ExperimentConfig, run_kind: str) -> dict:
    return {
        "status": "ok",
        "run_kind": run_kind,
        "config": config.to_dict(),
        "timestamp": _timestamp(),
    }


def _model_costs(model: MultiExitModel, want_latency: bool, seed: int) -> dict:
    try:
        macs = count_macs(model)
    except ValueError:  # external backbones carry no static cost recipe
        macs = None
    out = {"params": count_params(model), "macs": macs, "latency_ms": None}
    if want_latency:
        out["latency_ms"] = measure_latency(model, seed=seed).median_ms
    return out


def run_experiment(
    config: ExperimentConfig,
    out_dir: str | Path,
    runs: tuple[str, ...] = ALL_RUNS,
    data_root: str | Path | None = None,
    store: RunStore | None = None,
) -> list[dict]:
    """Execute the requested runs and append one record each to the store.

    A failure writes a ``status: failed`` record naming the run that broke,
    then re-raises, so partial sweeps remain inspectable.
    """
    for r in runs:
        if r not in ALL_RUNS:
            raise ValueError(f"unknown run kind {r!r}; expected subset of {ALL_RUNS}")
    out_dir = Path(out_dir)
    run_dir = out_dir / "runs" / config.slug()
    run_dir.mkdir(parents=True, exist_ok=True)
    if store is None:
        store = RunStore(out_dir / "records.jsonl")

    current = "setup"
    try:
        train_split, val_split, test_split = load_dataset(
            config.dataset, config.image_size, seed=config.seed,
            subsample=config.subsample, data_root=data_root,
        )
        shape = (3, config.image_size, config.image_size)
        records = []

        baseline_ckpt = run_dir / "baseline.ckpt"
        if RUN_BASELINE in runs:
            current = RUN_BASELINE
            records.append(
                _run_baseline(config, store, run_dir, baseline_ckpt, shape,
                              train_split, val_split, test_split)
            )

        if RUN_EE in runs or RUN_EE_STAR in runs:
            current = RUN_EE
            ee_records = _run_ee_and_prune(
                config, store, run_dir, baseline_ckpt, shape,
                train_split, val_split, test_split,
                prune=RUN_EE_STAR in runs, record_ee=RUN_EE in runs,
            )
            records.extend(ee_records)
        return records
    except Exception as exc:
        failure = _base_record(config, current)
        failure["status"] = "failed"
        failure["error"] = f"{type(exc).__name__}: {exc}"
        store.append(failure)
        raise


def _run_baseline(config, store, run_dir, ckpt_path, shape,
                  train_split, val_split, test_split) -> dict:
    backbone = build_backbone(config.backbone, shape, config.backbone_scale, seed=config.seed)
    model = attach_exits(backbone, [backbone.n_stages - 1], train_split.num_classes,
                         seed=config.seed)
    weights = make_weights(WeightMode.UNIF, 1)
    model, history = train_joint(model, weights, train_split, val_split, config.train_config())
    save_checkpoint(model, ckpt_path)
    history_path = run_dir / "baseline_history.json"
    history_path.write_text(json.dumps(history.to_dict(), indent=2))

    record = _base_record(config, RUN_BASELINE)
    record.update(_model_costs(model, config.measure_latency, config.seed))
    record.update(
        n_exits=1,
        val_top1=ensemble_top1(model, val_split, weights.output_weights),
        test_top1=ensemble_top1(model, test_split, weights.output_weights),
        per_exit_val_top1=per_exit_accuracies(model, val_split),
        per_exit_test_top1=per_exit_accuracies(model, test_split),
        train_seconds=history.total_seconds,
        best_epoch=history.best_epoch,
        checkpoint=str(ckpt_path),
        history=str(history_path),
    )
    store.append(record)
    return record


def _init_from_baseline(model: MultiExitModel, baseline_ckpt: Path) -> None:
    """Warm-start backbone stages and the deepest head from the baseline run."""
    if not baseline_ckpt.exists():
        raise FileNotFoundError(
            f"finetune needs the baseline checkpoint at {baseline_ckpt}; run baseline first"
        )
    base = load_checkpoint(baseline_ckpt)
    if base.backbone.n_stages != model.backbone.n_stages:
        raise ValueError("baseline checkpoint does not match the backbone layout")
    model.backbone.load_state_dict(base.backbone.state_dict())
    model.exits[-1].load_state_dict(base.exits[-1].state_dict())


def _run_ee_and_prune(config, store, run_dir, baseline_ckpt, shape,
                      train_split, val_split, test_split,
                      prune: bool, record_ee: bool) -> list[dict]:
    backbone = build_backbone(config.backbone, shape, config.backbone_scale, seed=config.seed)
    indices = config.exit_indices(backbone.n_stages)
    model = attach_exits(backbone, indices, train_split.num_classes, seed=config.seed)
    if config.train_mode == "finetune":
        _init_from_baseline(model, baseline_ckpt)
    weights = make_weights(config.weight_mode, model.n_exits)
    model, history = train_joint(model, weights, train_split, val_split, config.train_config())

    ckpt_path = run_dir / "ee.ckpt"
    save_checkpoint(model, ckpt_path)
    history_path = run_dir / "ee_history.json"
    history_path.write_text(json.dumps(history.to_dict(), indent=2))
    val_dump = collect_logits(model, val_split)
    dump_path = run_dir / "ee_val_logits.npz"
    save_logit_dump(val_dump, dump_path)

    records = []
    if record_ee:
        record = _base_record(config, RUN_EE)
        record.update(_model_costs(model, config.measure_latency, config.seed))
        record.update(
            n_exits=model.n_exits,
            exit_stage_indices=list(indices),
            val_top1=ensemble_top1(model, val_split, weights.output_weights),
            test_top1=ensemble_top1(model, test_split, weights.output_weights),
            per_exit_val_top1=per_exit_accuracies(model, val_split),
            per_exit_test_top1=per_exit_accuracies(model, test_split),
            train_seconds=history.total_seconds,
            best_epoch=history.best_epoch,
            checkpoint=str(ckpt_path),
            history=str(history_path),
            val_logits=str(dump_path),
        )
        store.append(record)
        records.append(record)

    if prune:
        report, subnetwork = select_best(model, weights, dump=val_dump, test_split=test_split)
        pruned_path = run_dir / "pruned.ckpt"
        save_checkpoint(subnetwork, pruned_path)
        report_path = run_dir / "prune_report.json"
        report_path.write_text(json.dumps(report.to_dict(), indent=2))
        restricted = restrict_weights(weights, tuple(report.chosen_mask))

        record = _base_record(config, RUN_EE_STAR)
        record.update(_model_costs(subnetwork, config.measure_latency, config.seed))
        record.update(
            n_exits=subnetwork.n_exits,
            exit_stage_indices=list(subnetwork.exit_stage_indices),
            chosen_mask=[int(b) for b in report.chosen_mask],
            val_top1=report.chosen.val_top1,
            test_top1=report.test_top1,
            per_exit_val_top1=per_exit_accuracies(subnetwork, val_split),
            per_exit_test_top1=per_exit_accuracies(subnetwork, test_split),
            train_seconds=history.total_seconds,
            prune_seconds=report.search_seconds,
            best_epoch=history.best_epoch,
            checkpoint=str(pruned_path),
            prune_report=str(report_path),
        )
        store.append(record)
        records.append(record)
    return records
