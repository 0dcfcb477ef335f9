"""Exhaustive exit-subset pruning.

After joint training, every non-empty subset of exits is scored on the
validation split using the same output weights it trained with (restricted
to the active exits, not renormalized; argmax does not care about scale).
The winner by validation top-1 is materialized as a standalone sub-network,
dropping all stages past its deepest active exit, and finally scored on the
test split.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

from .backbones import stage_mac_count, stage_output_shape
from .costs import count_params
from .data import ArraySplit
from .inference import LogitDump, collect_logits, ensemble_top1
from .model import ExitMask, MultiExitModel, extract_subnetwork
from .weights import ExitWeights, restrict_weights

MAX_EXITS = 16


def enumerate_masks(n_exits: int) -> list[ExitMask]:
    """All non-empty activation states, in binary counting order.

    The deepest exit is the least significant bit, so for two exits the
    order is [0,1], [1,0], [1,1].  Guarded at 16 exits: the search is
    exhaustive by design and 2^16 - 1 evaluations is already the ceiling of
    what "load and validate every combination" should mean.
    """
    if n_exits < 1 or n_exits > MAX_EXITS:
        raise ValueError(f"exhaustive search supports 1..{MAX_EXITS} exits, got {n_exits}")
    masks = []
    for value in range(1, 2 ** n_exits):
        bits = tuple(bool((value >> (n_exits - 1 - k)) & 1) for k in range(n_exits))
        masks.append(ExitMask(bits))
    return masks


@dataclass(frozen=True)
class MaskEvaluation:
    mask: ExitMask
    val_top1: float
    params: int
    macs: int

    def to_dict(self) -> dict:
        return {
            "mask": [int(b) for b in self.mask],
            "val_top1": self.val_top1,
            "params": self.params,
            "macs": self.macs,
        }


@dataclass(frozen=True)
class _CostTable:
    """Per-stage and per-head costs, so mask costs are pure arithmetic."""

    stage_params: tuple[int, ...]
    stage_macs: tuple[int, ...]
    head_params: tuple[int, ...]
    head_macs: tuple[int, ...]
    exit_stage_indices: tuple[int, ...]

    def costs_for(self, mask: ExitMask) -> tuple[int, int]:
        deepest_stage = self.exit_stage_indices[mask.deepest_active]
        params = sum(self.stage_params[: deepest_stage + 1])
        macs = sum(self.stage_macs[: deepest_stage + 1])
        for k in mask.active_indices:
            params += self.head_params[k]
            macs += self.head_macs[k]
        return params, macs


def _build_cost_table(model: MultiExitModel) -> _CostTable:
    stage_params = tuple(count_params(stage) for stage in model.backbone.stages)
    spec = model.backbone.spec
    stage_macs = []
    shape = spec.input_shape
    for stage in spec.stages:
        stage_macs.append(stage_mac_count(stage, shape))
        shape = stage_output_shape(stage, shape)
    head_params = tuple(count_params(head) for head in model.exits)
    head_macs = tuple(head.in_channels * head.num_classes for head in model.exits)
    return _CostTable(stage_params, tuple(stage_macs), head_params, head_macs,
                      tuple(model.exit_stage_indices))


def evaluate_mask(
    model: MultiExitModel,
    mask: ExitMask | Sequence[bool],
    weights: ExitWeights,
    val_split: ArraySplit | None = None,
    dump: LogitDump | None = None,
    cost_table: _CostTable | None = None,
) -> MaskEvaluation:
    """Score one activation state on validation data.

    Accepts either the raw validation split or a pre-collected logit dump;
    the dump route is what the exhaustive search uses.
    """
    mask = mask if isinstance(mask, ExitMask) else ExitMask(tuple(mask))
    if len(mask) != model.n_exits:
        raise ValueError(f"mask covers {len(mask)} exits, model has {model.n_exits}")
    if dump is None:
        if val_split is None:
            raise ValueError("need a validation split or a logit dump")
        dump = collect_logits(model, val_split)
    restricted = restrict_weights(weights, tuple(mask))
    top1 = dump.restricted_top1(tuple(mask), restricted.output_weights)
    table = cost_table if cost_table is not None else _build_cost_table(model)
    params, macs = table.costs_for(mask)
    return MaskEvaluation(mask, top1, params, macs)


@dataclass
class PruneReport:
    """Everything the exhaustive search looked at, plus the winner."""

    evaluations: list[MaskEvaluation]
    chosen: MaskEvaluation
    test_top1: float | None
    search_seconds: float

    @property
    def chosen_mask(self) -> ExitMask:
        return self.chosen.mask

    def to_dict(self) -> dict:
        return {
            "chosen": self.chosen.to_dict(),
            "test_top1": self.test_top1,
            "search_seconds": self.search_seconds,
            "evaluations": [e.to_dict() for e in self.evaluations],
        }


def _better(candidate: MaskEvaluation, incumbent: MaskEvaluation) -> bool:
    """Tie-break: accuracy, then fewer active exits, then fewer MACs.

    Remaining ties keep the incumbent, i.e. the earlier enumeration entry.
    """
    if candidate.val_top1 != incumbent.val_top1:
        return candidate.val_top1 > incumbent.val_top1
    if candidate.mask.n_active != incumbent.mask.n_active:
        return candidate.mask.n_active < incumbent.mask.n_active
    return candidate.macs < incumbent.macs


def search_masks(
    model: MultiExitModel,
    weights: ExitWeights,
    dump: LogitDump,
) -> tuple[list[MaskEvaluation], MaskEvaluation]:
    """Evaluate every mask against a validation logit dump; return all and best."""
    if weights.n_exits != model.n_exits:
        raise ValueError(f"{weights.n_exits} weights for {model.n_exits} exits")
    table = _build_cost_table(model)
    evaluations = []
    best = None
    for mask in enumerate_masks(model.n_exits):
        ev = evaluate_mask(model, mask, weights, dump=dump, cost_table=table)
        evaluations.append(ev)
        if best is None or _better(ev, best):
            best = ev
    return evaluations, best


def select_best(
    model: MultiExitModel,
    weights: ExitWeights,
    val_split: ArraySplit | None = None,
    test_split: ArraySplit | None = None,
    dump: LogitDump | None = None,
    batch_size: int = 256,
) -> tuple[PruneReport, MultiExitModel]:
    """Run the exhaustive search and materialize the winning sub-network.

    Returns the report and the extracted sub-network.  When a test split is
    given, the sub-network (not the masked parent) is evaluated on it with
    the restricted training-time output weights.
    """
    t0 = time.perf_counter()
    if dump is None:
        if val_split is None:
            raise ValueError("need a validation split or a logit dump")
        dump = collect_logits(model, val_split, batch_size)
    evaluations, best = search_masks(model, weights, dump)
    subnetwork = extract_subnetwork(model, best.mask)
    test_top1 = None
    if test_split is not None:
        restricted = restrict_weights(weights, tuple(best.mask))
        test_top1 = ensemble_top1(subnetwork, test_split, restricted.output_weights, batch_size)
    report = PruneReport(evaluations, best, test_top1, time.perf_counter() - t0)
    return report, subnetwork
