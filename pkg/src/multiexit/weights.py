"""Exit weight vectors.

Every exit of a multi-exit model carries two scalars: a loss weight used
during joint training and an output weight used when the exit logits are
fused at inference time.  Both vectors are strictly positive and sum to one.
The weights follow a linear ramp over the exit index (proportional to rank),
and four canonical assignment modes pick the ramp direction for each vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence


class WeightMode(Enum):
    """Direction pairing of the (loss, output) weight ramps."""

    DESC = "desc"  # both ramps favor early exits
    ASC = "asc"    # both ramps favor deep exits
    MIX = "mix"    # losses favor early exits, outputs favor deep exits
    UNIF = "unif"  # flat weights everywhere

    @classmethod
    def parse(cls, value: "WeightMode | str") -> "WeightMode":
        """Accept a WeightMode or its lowercase string name."""
        if isinstance(value, WeightMode):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            known = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown weight mode {value!r} (expected one of: {known})") from None


def linear_ramp(n: int, direction: str = "ascending") -> tuple[float, ...]:
    """Return n weights proportional to exit rank, normalized to sum 1.

    ``ascending`` yields w_i = i / (n * (n + 1) / 2) for i = 1..n,
    ``descending`` is its reversal, and ``uniform`` is 1/n everywhere.
    """
    if n < 1:
        raise ValueError(f"need at least one exit, got n={n}")
    if direction == "uniform":
        return tuple(1.0 / n for _ in range(n))
    total = n * (n + 1) // 2
    ramp = [i / total for i in range(1, n + 1)]
    if direction == "descending":
        ramp.reverse()
    elif direction != "ascending":
        raise ValueError(f"unknown ramp direction {direction!r}")
    return tuple(ramp)


@dataclass(frozen=True)
class ExitWeights:
    """Paired per-exit loss and output weight vectors.

    Entries must be strictly positive and finite.  Freshly made vectors (see
    :func:`make_weights`) sum to one; vectors restricted to an exit subset via
    :func:`restrict_weights` keep their original entries and therefore need
    not be normalized.
    """

    loss_weights: tuple[float, ...]
    output_weights: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        object.__setattr__(self, "output_weights", tuple(float(w) for w in self.output_weights))
        if len(self.loss_weights) == 0:
            raise ValueError("weight vectors must be non-empty")
        if len(self.loss_weights) != len(self.output_weights):
            raise ValueError(
                f"loss/output weight lengths differ: "
                f"{len(self.loss_weights)} vs {len(self.output_weights)}"
            )
        for name, vec in (("loss", self.loss_weights), ("output", self.output_weights)):
            for w in vec:
                if not math.isfinite(w) or w <= 0.0:
                    raise ValueError(f"{name} weights must be strictly positive and finite, got {w!r}")

    @property
    def n_exits(self) -> int:
        return len(self.loss_weights)


def make_weights(mode: WeightMode | str, n_exits: int) -> ExitWeights:
    """Build the weight pair for one of the four canonical modes."""
    mode = WeightMode.parse(mode)
    if mode is WeightMode.DESC:
        loss, out = "descending", "descending"
    elif mode is WeightMode.ASC:
        loss, out = "ascending", "ascending"
    elif mode is WeightMode.MIX:
        loss, out = "descending", "ascending"
    else:
        loss, out = "uniform", "uniform"
    return ExitWeights(linear_ramp(n_exits, loss), linear_ramp(n_exits, out))


def restrict_weights(
    weights: ExitWeights,
    mask: Sequence[bool],
    renormalize: bool = False,
) -> ExitWeights:
    """Keep the entries of the active exits, in order.

    By default the surviving entries are returned unchanged, so the result
    generally does not sum to one.  That is fine for prediction: argmax over
    fused logits is invariant to a positive rescaling of the output weights,
    which ``renormalize=True`` applies for callers that want unit sums.
    """
    active = [bool(b) for b in mask]
    if len(active) != weights.n_exits:
        raise ValueError(f"mask length {len(active)} does not match {weights.n_exits} exits")
    if not any(active):
        raise ValueError("mask keeps no exits")
    loss = [w for w, keep in zip(weights.loss_weights, active) if keep]
    out = [w for w, keep in zip(weights.output_weights, active) if keep]
    if renormalize:
        ls, os_ = sum(loss), sum(out)
        loss = [w / ls for w in loss]
        out = [w / os_ for w in out]
    return ExitWeights(tuple(loss), tuple(out))
