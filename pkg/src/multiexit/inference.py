"""Ensemble inference over exit logits.

The prediction rule is a weighted sum of the raw per-exit logits followed by
argmax.  No softmax is involved, so multiplying all output weights by a
positive constant never changes a prediction.  Ties in the fused logits
resolve to the lowest class index.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import ArraySplit, iter_batches
from .model import MultiExitModel, forward_all_exits

LOGIT_DUMP_VERSION = 1


def ensemble_logits(outputs: Sequence[torch.Tensor], output_weights: Sequence[float]) -> torch.Tensor:
    """Weighted sum of per-exit logit matrices."""
    if len(outputs) == 0:
        raise ValueError("need at least one exit output")
    if len(outputs) != len(output_weights):
        raise ValueError(f"{len(outputs)} outputs but {len(output_weights)} weights")
    shape = outputs[0].shape
    for o in outputs:
        if o.shape != shape:
            raise ValueError(f"exit outputs disagree in shape: {tuple(o.shape)} vs {tuple(shape)}")
    fused = outputs[0] * float(output_weights[0])
    for o, w in zip(outputs[1:], output_weights[1:]):
        fused = fused + o * float(w)
    return fused


def argmax_rows(logits: torch.Tensor) -> torch.Tensor:
    """Row-wise argmax with ties going to the lowest class index."""
    return torch.from_numpy(np.argmax(logits.detach().cpu().numpy(), axis=1).astype(np.int64))


def predict(outputs: Sequence[torch.Tensor], output_weights: Sequence[float]) -> torch.Tensor:
    return argmax_rows(ensemble_logits(outputs, output_weights))


def top1_accuracy(predictions: torch.Tensor, targets: torch.Tensor) -> float:
    if len(predictions) != len(targets):
        raise ValueError(f"{len(predictions)} predictions for {len(targets)} targets")
    if len(targets) == 0:
        raise ValueError("accuracy of an empty batch is undefined")
    return (predictions.to(torch.int64) == targets.to(torch.int64)).sum().item() / len(targets)


def ensemble_top1(
    model: MultiExitModel,
    split: ArraySplit,
    output_weights: Sequence[float],
    batch_size: int = 256,
) -> float:
    """Fused-prediction accuracy of the model over a split."""
    correct = 0
    for x, y in iter_batches(split, batch_size):
        preds = predict(forward_all_exits(model, x), output_weights)
        correct += (preds == y).sum().item()
    return correct / len(split)


def per_exit_accuracies(model: MultiExitModel, split: ArraySplit, batch_size: int = 256) -> list[float]:
    """Top-1 accuracy of each exit head on its own, one shared forward pass."""
    correct = [0] * model.n_exits
    for x, y in iter_batches(split, batch_size):
        outputs = forward_all_exits(model, x)
        for k, o in enumerate(outputs):
            correct[k] += (argmax_rows(o) == y).sum().item()
    return [c / len(split) for c in correct]


@dataclass(frozen=True)
class LogitDump:
    """Cached per-exit logits of one model over one split.

    Pruning evaluates thousands of exit subsets; caching the exit logits
    once turns each evaluation into a cheap weighted sum.
    """

    logits: tuple[np.ndarray, ...]  # one (N, C) float32 array per exit
    targets: np.ndarray  # (N,) int64
    exit_stage_indices: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        if not self.logits:
            raise ValueError("a dump needs at least one exit")
        if len(self.exit_stage_indices) != len(self.logits):
            raise ValueError("one stage index per exit required")
        n = len(self.targets)
        for k, arr in enumerate(self.logits):
            if arr.ndim != 2 or arr.shape != (n, self.num_classes):
                raise ValueError(
                    f"exit {k} logits must be ({n}, {self.num_classes}), got {arr.shape}"
                )

    @property
    def n_exits(self) -> int:
        return len(self.logits)

    def restricted_top1(self, active: Sequence[bool], output_weights: Sequence[float]) -> float:
        """Accuracy when only the active exits contribute, weights as given."""
        kept = [i for i, b in enumerate(active) if b]
        if len(active) != self.n_exits or not kept:
            raise ValueError("mask does not fit this dump")
        if len(output_weights) != len(kept):
            raise ValueError("need one output weight per active exit")
        outputs = [torch.from_numpy(self.logits[i]) for i in kept]
        preds = predict(outputs, output_weights)
        return top1_accuracy(preds, torch.from_numpy(self.targets))


def collect_logits(model: MultiExitModel, split: ArraySplit, batch_size: int = 256) -> LogitDump:
    chunks: list[list[np.ndarray]] = [[] for _ in range(model.n_exits)]
    for x, _ in iter_batches(split, batch_size):
        for k, o in enumerate(forward_all_exits(model, x)):
            chunks[k].append(o.numpy().astype(np.float32, copy=True))
    logits = tuple(np.concatenate(c) for c in chunks)
    return LogitDump(logits, split.targets.numpy().astype(np.int64),
                     tuple(model.exit_stage_indices), model.num_classes)


def save_logit_dump(dump: LogitDump, path: str | Path) -> None:
    arrays = {f"exit_{k:02d}": arr for k, arr in enumerate(dump.logits)}
    np.savez(
        path,
        version=np.int64(LOGIT_DUMP_VERSION),
        targets=dump.targets,
        exit_stage_indices=np.asarray(dump.exit_stage_indices, dtype=np.int64),
        num_classes=np.int64(dump.num_classes),
        **arrays,
    )


def load_logit_dump(path: str | Path) -> LogitDump:
    with np.load(path) as z:
        version = int(z["version"])
        if version != LOGIT_DUMP_VERSION:
            raise ValueError(f"unsupported logit dump version {version}")
        keys = sorted(k for k in z.files if re.fullmatch(r"exit_\d+", k))
        logits = tuple(z[k] for k in keys)
        return LogitDump(logits, z["targets"],
                         tuple(int(i) for i in z["exit_stage_indices"]), int(z["num_classes"]))
