"""Multi-exit models: a stage backbone with classifier heads along the way.

Each exit head is global average pooling followed by a single dense layer
and emits raw class logits (no softmax).  The deepest stage always carries
an exit, so every model can also act as a plain single-output classifier.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .backbones import (
    Backbone,
    EXTERNAL_FAMILY,
    build_backbone,
    build_backbone_from_spec,
    init_parameters,
    spec_from_dict,
    spec_to_dict,
    truncate_spec,
)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ExitMask:
    """Boolean activation state per exit; at least one exit stays active."""

    active: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "active", tuple(bool(b) for b in self.active))
        if len(self.active) == 0:
            raise ValueError("mask must cover at least one exit")
        if not any(self.active):
            raise ValueError("mask must keep at least one exit active")

    def __len__(self) -> int:
        return len(self.active)

    def __iter__(self):
        return iter(self.active)

    @property
    def n_active(self) -> int:
        return sum(self.active)

    @property
    def deepest_active(self) -> int:
        return max(i for i, b in enumerate(self.active) if b)

    @property
    def active_indices(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.active) if b)

    @classmethod
    def full(cls, n_exits: int) -> "ExitMask":
        return cls(tuple(True for _ in range(n_exits)))

    def as_bits(self) -> str:
        return "".join("1" if b else "0" for b in self.active)


class ExitHead(nn.Module):
    """Global average pool, flatten, dense map to logits."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        if in_channels < 1 or num_classes < 1:
            raise ValueError(f"bad head dims: channels={in_channels}, classes={num_classes}")
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(in_channels, num_classes)

    def forward(self, x):
        return self.fc(torch.flatten(self.pool(x), 1))


def make_exit_head(stage_output_channels: int, num_classes: int, seed: int = 0) -> ExitHead:
    """Build a seeded exit head for a stage with the given channel count."""
    head = ExitHead(stage_output_channels, num_classes)
    init_parameters(head, seed)
    return head


def spread_exit_indices(n_stages: int, n_exits: int) -> tuple[int, ...]:
    """Evenly spaced stage indices for the exits, always ending at the last stage.

    Exit j (1-based) attaches after stage ceil(j * n_stages / n_exits); this
    reproduces the full layout when n_exits == n_stages and keeps the spacing
    as even as possible otherwise.
    """
    if n_exits < 1 or n_exits > n_stages:
        raise ValueError(f"cannot place {n_exits} exits on {n_stages} stages")
    idx = tuple(math.ceil((j + 1) * n_stages / n_exits) - 1 for j in range(n_exits))
    assert idx[-1] == n_stages - 1 and all(a < b for a, b in zip(idx, idx[1:]))
    return idx


class MultiExitModel(nn.Module):
    """Backbone stages with exit heads attached at chosen stage boundaries."""

    def __init__(
        self,
        backbone: Backbone,
        exit_stage_indices: Sequence[int],
        exits: Sequence[ExitHead],
        num_classes: int,
    ):
        super().__init__()
        indices = tuple(int(i) for i in exit_stage_indices)
        _validate_exit_indices(indices, backbone.n_stages)
        if len(exits) != len(indices):
            raise ValueError(f"{len(exits)} heads for {len(indices)} attach points")
        if num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {num_classes}")
        for head, idx in zip(exits, indices):
            want = backbone.stage_shapes[idx][0]
            if head.in_channels != want:
                raise ValueError(
                    f"head at stage {idx} expects {head.in_channels} channels, stage yields {want}"
                )
            if head.num_classes != num_classes:
                raise ValueError("all heads must share the model's class count")
        self.backbone = backbone
        self.exits = nn.ModuleList(exits)
        self.exit_stage_indices = indices
        self.num_classes = num_classes

    @property
    def n_exits(self) -> int:
        return len(self.exits)

    @property
    def input_shape(self):
        return self.backbone.input_shape

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Run all stages once and return the logits of every exit, shallow to deep."""
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ValueError(
                f"expected input of shape (B, {', '.join(map(str, self.input_shape))}), "
                f"got {tuple(x.shape)}"
            )
        outputs = []
        k = 0
        for i, stage in enumerate(self.backbone.stages):
            x = stage(x)
            if k < len(self.exit_stage_indices) and self.exit_stage_indices[k] == i:
                outputs.append(self.exits[k](x))
                k += 1
        return outputs


def _validate_exit_indices(indices: tuple[int, ...], n_stages: int) -> None:
    if len(indices) == 0:
        raise ValueError("need at least one exit")
    if any(i < 0 or i >= n_stages for i in indices):
        raise ValueError(f"exit indices {indices} out of range for {n_stages} stages")
    if any(a >= b for a, b in zip(indices, indices[1:])):
        raise ValueError(f"exit indices must be strictly increasing, got {indices}")
    if indices[-1] != n_stages - 1:
        raise ValueError(f"the final stage {n_stages - 1} must carry an exit, got {indices}")


def attach_exits(
    backbone: Backbone,
    exit_stage_indices: Sequence[int],
    num_classes: int,
    seed: int = 0,
) -> MultiExitModel:
    """Attach freshly initialized heads at the given stage boundaries.

    The backbone's parameters are left untouched; only the new heads are
    initialized (from the given seed).
    """
    indices = tuple(int(i) for i in exit_stage_indices)
    _validate_exit_indices(indices, backbone.n_stages)
    heads = [ExitHead(backbone.stage_shapes[i][0], num_classes) for i in indices]
    init_parameters(nn.ModuleList(heads), seed)
    return MultiExitModel(backbone, indices, heads, num_classes)


def forward_all_exits(model: MultiExitModel, batch: torch.Tensor) -> list[torch.Tensor]:
    """Inference-mode forward: eval mode, no grad, one logit matrix per exit."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(batch)
    finally:
        if was_training:
            model.train()


def extract_subnetwork(model: MultiExitModel, mask: ExitMask | Sequence[bool]) -> MultiExitModel:
    """Materialize the sub-network selected by an exit mask.

    Stages past the deepest active exit are dropped, inactive heads are
    dropped, and everything kept is deep-copied so the result is independent
    of the source model.
    """
    mask = mask if isinstance(mask, ExitMask) else ExitMask(tuple(mask))
    if len(mask) != model.n_exits:
        raise ValueError(f"mask covers {len(mask)} exits, model has {model.n_exits}")
    deepest_stage = model.exit_stage_indices[mask.deepest_active]
    spec = truncate_spec(model.backbone.spec, deepest_stage + 1)
    stages = [copy.deepcopy(model.backbone.stages[i]) for i in range(deepest_stage + 1)]
    shapes = model.backbone.stage_shapes[: deepest_stage + 1]
    backbone = Backbone(spec, stages, shapes)
    heads = [copy.deepcopy(model.exits[k]) for k in mask.active_indices]
    indices = tuple(model.exit_stage_indices[k] for k in mask.active_indices)
    return MultiExitModel(backbone, indices, heads, model.num_classes)


def save_checkpoint(model: MultiExitModel, path) -> None:
    """Serialize the backbone recipe, exit layout, and all parameters."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "backbone": spec_to_dict(model.backbone.spec),
        "stage_shapes": [list(s) for s in model.backbone.stage_shapes],
        "exit_stage_indices": list(model.exit_stage_indices),
        "num_classes": model.num_classes,
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> MultiExitModel:
    """Rebuild a model from :func:`save_checkpoint` output.

    Native backbones are reconstructed from their serialized recipe; external
    ones require their adapter to be registered under the same name.
    """
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    spec = spec_from_dict(payload["backbone"])
    if spec.family == EXTERNAL_FAMILY:
        backbone = build_backbone(spec.name, spec.input_shape)
    else:
        backbone = build_backbone_from_spec(spec, seed=0)
    indices = payload["exit_stage_indices"]
    heads = [
        ExitHead(backbone.stage_shapes[i][0], payload["num_classes"]) for i in indices
    ]
    model = MultiExitModel(backbone, indices, heads, payload["num_classes"])
    model.load_state_dict(payload["state_dict"], strict=True)
    model.eval()
    return model
