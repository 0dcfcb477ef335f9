"""Percent-change summary tables over a result store.

Every multi-exit run (fused or pruned) is paired with the single-exit
baseline that shares its dataset, backbone, layout, training mode, image
size, seed, subsample and width scale.  Cells are mean percent changes over
all matched pairs in a group; runs without a matching baseline are left out
of the averages rather than guessed at.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .costs import percent_change
from .experiment import RUN_BASELINE, RUN_EE, RUN_EE_STAR, RunStore

MODES = ("desc", "asc", "mix", "unif")
ACCURACY_COLUMNS = MODES + tuple(f"{m}*" for m in MODES)
COST_COLUMNS = ("ee",) + tuple(f"{m}*" for m in MODES)


@dataclass
class Table:
    title: str
    columns: tuple[str, ...]
    rows: list[tuple[str, list[float | None]]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow([self.title] + list(self.columns))
        for label, cells in self.rows:
            writer.writerow([label] + ["" if c is None else f"{c:.3f}" for c in cells])
        return buf.getvalue()

    def to_text(self) -> str:
        header = [self.title] + list(self.columns)
        body = [
            [label] + ["-" if c is None else f"{c:+.3f}" for c in cells]
            for label, cells in self.rows
        ]
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
        lines.append("  ".join("-" * w for w in widths))
        for r in body:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
        if not body:
            lines.append("(no records)")
        return "\n".join(lines)


@dataclass
class Report:
    group_by: str
    accuracy: Table
    params: Table
    macs: Table
    latency: Table

    def tables(self) -> list[Table]:
        return [self.accuracy, self.params, self.macs, self.latency]

    def to_text(self) -> str:
        return "\n\n".join(t.to_text() for t in self.tables())

    def to_csv(self) -> str:
        return "\n".join(t.to_csv() for t in self.tables())


def _pair_key(config: dict) -> tuple:
    return (
        config.get("dataset"),
        config.get("backbone"),
        config.get("exit_layout"),
        config.get("train_mode"),
        config.get("image_size"),
        config.get("seed"),
        config.get("subsample"),
        config.get("backbone_scale"),
    )


def _network_label(config: dict) -> str:
    return f"{config.get('backbone')}[x{config.get('exit_layout')}]"


def _scenario_label(config: dict) -> str:
    tag = "TR" if config.get("train_mode") == "scratch" else "FT"
    return f"{tag}-{config.get('image_size')}"


def _group_label(config: dict, group_by: str) -> str:
    if group_by == "network":
        return _network_label(config)
    if group_by == "dataset":
        return str(config.get("dataset"))
    raise ValueError(f"group_by must be 'network' or 'dataset', got {group_by!r}")


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def build_report(store: RunStore, group_by: str = "network") -> Report:
    """Aggregate a result store into the four percent-change tables."""
    if group_by not in ("network", "dataset"):
        raise ValueError(f"group_by must be 'network' or 'dataset', got {group_by!r}")
    records = [r for r in store.read_all() if r.get("status") == "ok"]
    baselines: dict[tuple, dict] = {}
    for rec in records:
        if rec.get("run_kind") == RUN_BASELINE:
            baselines[_pair_key(rec["config"])] = rec

    acc_cells: dict[tuple[str, str], list[float]] = {}
    cost_cells: dict[str, dict[tuple[str, str], list[float]]] = {
        "params": {}, "macs": {}, "latency_ms": {},
    }
    acc_groups: list[str] = []
    scenario_rows: list[str] = []

    for rec in sorted(records, key=lambda r: r.get("record_id", 0)):
        kind = rec.get("run_kind")
        if kind not in (RUN_EE, RUN_EE_STAR):
            continue
        base = baselines.get(_pair_key(rec["config"]))
        if base is None:
            continue
        mode = rec["config"].get("weight_mode")
        acc_col = mode if kind == RUN_EE else f"{mode}*"
        group = _group_label(rec["config"], group_by)
        if group not in acc_groups:
            acc_groups.append(group)
        if rec.get("test_top1") is not None and base.get("test_top1"):
            acc_cells.setdefault((group, acc_col), []).append(
                percent_change(rec["test_top1"], base["test_top1"])
            )

        cost_col = "ee" if kind == RUN_EE else f"{mode}*"
        scenario = _scenario_label(rec["config"])
        if scenario not in scenario_rows:
            scenario_rows.append(scenario)
        for metric in ("params", "macs", "latency_ms"):
            new, old = rec.get(metric), base.get(metric)
            if new is not None and old:
                cost_cells[metric].setdefault((scenario, cost_col), []).append(
                    percent_change(new, old)
                )

    accuracy = Table(
        f"top1 % vs baseline, by {group_by}",
        ACCURACY_COLUMNS,
        [
            (g, [_mean(acc_cells.get((g, col), [])) for col in ACCURACY_COLUMNS])
            for g in sorted(acc_groups)
        ],
    )

    def cost_table(metric: str, title: str) -> Table:
        cells = cost_cells[metric]
        return Table(
            title,
            COST_COLUMNS,
            [
                (s, [_mean(cells.get((s, col), [])) for col in COST_COLUMNS])
                for s in sorted(scenario_rows)
            ],
        )

    return Report(
        group_by,
        accuracy,
        cost_table("params", "parameters % vs baseline"),
        cost_table("macs", "MACs % vs baseline"),
        cost_table("latency_ms", "latency % vs baseline"),
    )
