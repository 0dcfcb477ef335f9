"""Cost accounting: parameters, multiply-accumulates, wall-clock latency.

Parameter counts come straight from the torch parameter tensors.  MAC counts
are computed analytically from the backbone recipe (one MAC = one
multiply-accumulate; conv costs k*k*Cin/groups*Cout*Hout*Wout, dense costs
in*out, normalization / activations / pooling count zero), so they are exact
integers independent of any runtime tracing.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field

import torch

from .backbones import EXTERNAL_FAMILY, iter_layer_costs, stage_output_shape
from .model import MultiExitModel


@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    macs: int


@dataclass(frozen=True)
class CostReport:
    params: int
    macs: int
    latency_ms: float | None
    breakdown: tuple[LayerCost, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["layer", "params", "macs"])
        for row in self.breakdown:
            writer.writerow([row.name, row.params, row.macs])
        writer.writerow(["total", self.params, self.macs])
        return buf.getvalue()


def count_params(model: torch.nn.Module) -> int:
    """Number of trainable parameter scalars in the module."""
    return sum(p.numel() for p in model.parameters())


def model_cost_breakdown(model: MultiExitModel) -> list[LayerCost]:
    """Per-layer (params, MACs) rows for backbone stages and exit heads."""
    spec = model.backbone.spec
    if spec.family == EXTERNAL_FAMILY:
        raise ValueError("external backbones have no static cost recipe")
    rows: list[LayerCost] = []
    shape = spec.input_shape
    for stage in spec.stages:
        for name, params, macs in iter_layer_costs(stage, shape):
            rows.append(LayerCost(name, params, macs))
        shape = stage_output_shape(stage, shape)
    for k, head in enumerate(model.exits):
        stage_idx = model.exit_stage_indices[k]
        rows.append(LayerCost(f"exit{k + 1}@stage{stage_idx + 1}.pool", 0, 0))
        rows.append(
            LayerCost(
                f"exit{k + 1}@stage{stage_idx + 1}.dense",
                head.in_channels * head.num_classes + head.num_classes,
                head.in_channels * head.num_classes,
            )
        )
    return rows


def count_macs(model: MultiExitModel) -> int:
    """Total analytic MACs of one forward pass at the model's input shape."""
    return sum(r.macs for r in model_cost_breakdown(model))


def cost_report(model: MultiExitModel, latency_ms: float | None = None) -> CostReport:
    breakdown = tuple(model_cost_breakdown(model))
    params = count_params(model)
    analytic_params = sum(r.params for r in breakdown)
    if params != analytic_params:
        raise ValueError(
            f"recipe parameter count {analytic_params} disagrees with torch count {params}"
        )
    return CostReport(params, sum(r.macs for r in breakdown), latency_ms, breakdown)


@dataclass(frozen=True)
class LatencyResult:
    """Median forward latency in milliseconds plus its interquartile range.

    Protocol: fixed random batch, eval mode, `warmup` untimed passes, then
    `reps` timed passes on the same tensor; the median is the headline
    number and the IQR records dispersion.
    """

    median_ms: float
    iqr_ms: float
    reps: int
    warmup: int
    batch_size: int
    samples_ms: tuple[float, ...] = field(repr=False, default=())


def measure_latency(
    model: MultiExitModel,
    batch_size: int = 1,
    warmup: int = 10,
    reps: int = 100,
    seed: int = 0,
) -> LatencyResult:
    if reps < 1 or warmup < 0 or batch_size < 1:
        raise ValueError(f"bad latency protocol: warmup={warmup}, reps={reps}, batch={batch_size}")
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((batch_size, *model.input_shape), generator=gen)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for _ in range(warmup):
                model(x)
            samples = []
            for _ in range(reps):
                t0 = time.perf_counter()
                model(x)
                samples.append((time.perf_counter() - t0) * 1e3)
    finally:
        if was_training:
            model.train()
    median = statistics.median(samples)
    if len(samples) >= 2:
        q = statistics.quantiles(samples, n=4, method="inclusive")
        iqr = q[2] - q[0]
    else:
        iqr = 0.0
    return LatencyResult(median, iqr, reps, warmup, batch_size, tuple(samples))


def percent_change(new_value: float, baseline: float) -> float:
    """Relative change in percent: 100 * (new - baseline) / baseline."""
    if baseline == 0:
        raise ValueError("baseline is zero; percent change undefined")
    return 100.0 * (new_value - baseline) / baseline
