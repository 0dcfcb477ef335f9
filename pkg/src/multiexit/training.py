"""Joint training of all exits with a weighted sum of cross-entropies.

Every exit contributes its categorical cross-entropy, scaled by its loss
weight; the deepest exit gets no special treatment.  Optimization follows a
fixed protocol: Adam at a flat learning rate, shuffled mini-batches, early
stopping on the total validation loss with the best-epoch parameters
restored at the end.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from .data import ArraySplit, iter_batches
from .model import MultiExitModel
from .weights import ExitWeights


def cce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean categorical cross-entropy from raw logits.

    Computed through log-softmax (log-sum-exp stabilized), in the dtype of
    the incoming logits.
    """
    if logits.ndim != 2:
        raise ValueError(f"logits must be (B, C), got {tuple(logits.shape)}")
    if targets.ndim != 1 or len(targets) != len(logits):
        raise ValueError("targets must be a vector aligned with logits")
    if len(logits) == 0:
        raise ValueError("loss of an empty batch is undefined")
    targets = targets.to(torch.int64)
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ValueError("target class out of range")
    log_probs = F.log_softmax(logits, dim=1)
    picked = log_probs.gather(1, targets.view(-1, 1)).squeeze(1)
    return -picked.mean()


def weighted_total_loss(per_exit_losses: Sequence, loss_weights: Sequence[float]):
    """Weighted sum of per-exit losses; tensors stay tensors for backprop."""
    if len(per_exit_losses) != len(loss_weights):
        raise ValueError(
            f"{len(per_exit_losses)} losses but {len(loss_weights)} weights"
        )
    if len(per_exit_losses) == 0:
        raise ValueError("need at least one exit loss")
    total = None
    for loss, w in zip(per_exit_losses, loss_weights):
        term = loss * float(w)
        total = term if total is None else total + term
    return total


@dataclass
class TrainConfig:
    """Fixed optimization protocol; only the values, never the shape, vary."""

    max_epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-4
    early_stop_patience: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_exit_losses: list[float]
    val_loss: float
    val_exit_losses: list[float]
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    total_seconds: float = 0.0
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "total_seconds": self.total_seconds,
            "stopped_early": self.stopped_early,
            "epochs": [
                {
                    "epoch": e.epoch,
                    "train_loss": e.train_loss,
                    "train_exit_losses": e.train_exit_losses,
                    "val_loss": e.val_loss,
                    "val_exit_losses": e.val_exit_losses,
                    "seconds": e.seconds,
                }
                for e in self.epochs
            ],
        }


def evaluate_loss(
    model: MultiExitModel,
    weights: ExitWeights,
    split: ArraySplit,
    batch_size: int = 256,
) -> tuple[float, list[float]]:
    """Total and per-exit mean losses over a split, eval mode, no grad.

    The total is the exact weighted sum of the returned per-exit values.
    """
    if weights.n_exits != model.n_exits:
        raise ValueError(f"{weights.n_exits} weights for {model.n_exits} exits")
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    was_training = model.training
    model.eval()
    sums = [0.0] * model.n_exits
    try:
        with torch.no_grad():
            for x, y in iter_batches(split, batch_size):
                for k, o in enumerate(model(x)):
                    sums[k] += cce_loss(o, y).item() * len(y)
    finally:
        if was_training:
            model.train()
    per_exit = [s / len(split) for s in sums]
    total = float(weighted_total_loss(per_exit, weights.loss_weights))
    return total, per_exit


def train_joint(
    model: MultiExitModel,
    weights: ExitWeights,
    train_split: ArraySplit,
    val_split: ArraySplit,
    config: TrainConfig,
) -> tuple[MultiExitModel, TrainHistory]:
    """Train all exits jointly; returns the model restored to its best epoch.

    Stops once the total validation loss has not improved for
    ``early_stop_patience`` consecutive epochs, then loads the parameters of
    the best epoch back into the model.
    """
    if weights.n_exits != model.n_exits:
        raise ValueError(f"{weights.n_exits} weights for {model.n_exits} exits")
    if len(train_split) == 0 or len(val_split) == 0:
        raise ValueError("train and validation splits must be non-empty")
    for split in (train_split, val_split):
        if split.num_classes != model.num_classes:
            raise ValueError("split class count does not match the model")

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    shuffler = torch.Generator().manual_seed(config.seed)
    history = TrainHistory()
    best_state = None
    since_best = 0
    t_start = time.perf_counter()

    for epoch in range(config.max_epochs):
        t_epoch = time.perf_counter()
        model.train()
        perm = torch.randperm(len(train_split), generator=shuffler)
        batch_exit_losses: list[list[float]] = []
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            x, y = train_split.images[idx], train_split.targets[idx]
            optimizer.zero_grad(set_to_none=True)
            exit_losses = [cce_loss(o, y) for o in model(x)]
            total = weighted_total_loss(exit_losses, weights.loss_weights)
            total.backward()
            optimizer.step()
            batch_exit_losses.append([l.item() for l in exit_losses])

        n_batches = len(batch_exit_losses)
        train_exit = [
            sum(b[k] for b in batch_exit_losses) / n_batches for k in range(model.n_exits)
        ]
        # logged total is derived from the logged components so the record
        # stays internally consistent
        train_loss = sum(w * l for w, l in zip(weights.loss_weights, train_exit))
        val_loss, val_exit = evaluate_loss(model, weights, val_split)
        history.epochs.append(
            EpochRecord(epoch, train_loss, train_exit, val_loss, val_exit,
                        time.perf_counter() - t_epoch)
        )

        if val_loss < history.best_val_loss:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                history.stopped_early = True
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    history.total_seconds = time.perf_counter() - t_start
    return model, history
