"""Stage-partitioned convolutional backbones.

A backbone is an ordered list of stages, each stage a recipe of primitive
layer descriptors (conv, depthwise conv, batch norm, activation, pool,
residual block).  The recipe is the single source of truth: the same
descriptors drive torch module construction, static shape inference, and the
analytic parameter / multiply-accumulate cost model, so the three can never
drift apart.

Three small reference families are registered by default.  External
backbones (e.g. pretrained torchvision models cut into stages) can be
plugged in through :func:`register_external_backbone`; they forward and
count parameters like any other backbone but have no static cost recipe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterator, Sequence, Union

import torch
from torch import nn

Shape = tuple[int, int, int]  # (channels, height, width)

EXTERNAL_FAMILY = "external-adapter"


# ---------------------------------------------------------------------------
# layer descriptors


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int | None = None  # None means "same-ish": kernel // 2
    bias: bool = True

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding


@dataclass(frozen=True)
class DepthwiseConv:
    """3x3-style conv with one filter per channel (groups == channels)."""

    kernel: int = 3
    stride: int = 1
    padding: int | None = None
    bias: bool = False

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding


@dataclass(frozen=True)
class BatchNorm:
    pass


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"  # relu | relu6

    def __post_init__(self):
        if self.kind not in ("relu", "relu6"):
            raise ValueError(f"unknown activation {self.kind!r}")


@dataclass(frozen=True)
class Pool:
    kind: str = "max"  # max | avg
    size: int = 2
    stride: int | None = None  # None means stride == size

    def __post_init__(self):
        if self.kind not in ("max", "avg"):
            raise ValueError(f"unknown pool kind {self.kind!r}")

    @property
    def step(self) -> int:
        return self.size if self.stride is None else self.stride


@dataclass(frozen=True)
class Residual:
    """Body layers plus an identity (or projected) skip, ReLU after the add."""

    body: tuple["LayerSpec", ...]


LayerSpec = Union[Conv, DepthwiseConv, BatchNorm, Activation, Pool, Residual]


@dataclass(frozen=True)
class StageSpec:
    name: str
    layers: tuple[LayerSpec, ...]


@dataclass(frozen=True)
class BackboneSpec:
    """Static description of a backbone: family, input shape, stage recipes.

    Truncated sub-network specs with a single stage are legal; the registry
    builders reject fewer than two stages for freshly built backbones.
    """

    name: str
    family: str
    input_shape: Shape
    stages: tuple[StageSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ValueError(f"input_shape must be 3 positive dims, got {self.input_shape}")
        if len(self.stages) < 1:
            raise ValueError("backbone needs at least one stage")

    @property
    def n_stages(self) -> int:
        return len(self.stages)


# ---------------------------------------------------------------------------
# static shape inference


def _hw_after(h: int, w: int, kernel: int, stride: int, pad: int) -> tuple[int, int]:
    oh = (h + 2 * pad - kernel) // stride + 1
    ow = (w + 2 * pad - kernel) // stride + 1
    return oh, ow


def layer_output_shape(layer: LayerSpec, in_shape: Shape) -> Shape:
    """Shape after one descriptor; raises ValueError if the map collapses."""
    c, h, w = in_shape
    if isinstance(layer, Conv):
        oh, ow = _hw_after(h, w, layer.kernel, layer.stride, layer.pad)
        out = (layer.out_channels, oh, ow)
    elif isinstance(layer, DepthwiseConv):
        oh, ow = _hw_after(h, w, layer.kernel, layer.stride, layer.pad)
        out = (c, oh, ow)
    elif isinstance(layer, (BatchNorm, Activation)):
        out = (c, h, w)
    elif isinstance(layer, Pool):
        oh, ow = _hw_after(h, w, layer.size, layer.step, 0)
        out = (c, oh, ow)
    elif isinstance(layer, Residual):
        out = in_shape
        for sub in layer.body:
            out = layer_output_shape(sub, out)
        _residual_projection(layer, in_shape)  # validates skip compatibility
    else:
        raise ValueError(f"unknown layer descriptor {layer!r}")
    if any(d < 1 for d in out):
        raise ValueError(f"layer {layer!r} collapses shape {in_shape} to {out}")
    return out


def _residual_projection(layer: Residual, in_shape: Shape) -> tuple[bool, int, Shape]:
    """Whether the skip path needs a 1x1 projection, and its stride."""
    out = in_shape
    for sub in layer.body:
        out = layer_output_shape(sub, out)
    ci, hi, wi = in_shape
    co, ho, wo = out
    if (ci, hi, wi) == (co, ho, wo):
        return False, 1, out
    if hi % ho or wi % wo or hi // ho != wi // wo:
        raise ValueError(f"residual body maps {in_shape} -> {out}; skip cannot be projected")
    return True, hi // ho, out


def stage_output_shape(stage: StageSpec, in_shape: Shape) -> Shape:
    shape = in_shape
    for layer in stage.layers:
        shape = layer_output_shape(layer, shape)
    return shape


def stage_shapes(spec: BackboneSpec) -> list[Shape]:
    """Output shape after each stage, validating the whole chain."""
    shapes = []
    shape = spec.input_shape
    for stage in spec.stages:
        shape = stage_output_shape(stage, shape)
        shapes.append(shape)
    return shapes


# ---------------------------------------------------------------------------
# analytic parameter and multiply-accumulate counts
#
# Convention: one MAC is one multiply-accumulate.  A dense layer costs
# in*out MACs, a conv k*k*Cin*Cout*Hout*Wout (grouped convs divide by
# groups).  Normalization, activations, pooling and elementwise adds are
# counted as zero.


def layer_param_count(layer: LayerSpec, in_channels: int) -> int:
    if isinstance(layer, Conv):
        n = layer.kernel * layer.kernel * in_channels * layer.out_channels
        return n + (layer.out_channels if layer.bias else 0)
    if isinstance(layer, DepthwiseConv):
        n = layer.kernel * layer.kernel * in_channels
        return n + (in_channels if layer.bias else 0)
    if isinstance(layer, BatchNorm):
        return 2 * in_channels  # affine scale and shift; running stats are buffers
    if isinstance(layer, (Activation, Pool)):
        return 0
    if isinstance(layer, Residual):
        raise ValueError("use iter_layer_costs for residual blocks")
    raise ValueError(f"unknown layer descriptor {layer!r}")


def layer_mac_count(layer: LayerSpec, in_shape: Shape) -> int:
    c, _, _ = in_shape
    if isinstance(layer, Conv):
        _, oh, ow = layer_output_shape(layer, in_shape)
        return layer.kernel * layer.kernel * c * layer.out_channels * oh * ow
    if isinstance(layer, DepthwiseConv):
        _, oh, ow = layer_output_shape(layer, in_shape)
        return layer.kernel * layer.kernel * c * oh * ow
    if isinstance(layer, (BatchNorm, Activation, Pool)):
        return 0
    if isinstance(layer, Residual):
        raise ValueError("use iter_layer_costs for residual blocks")
    raise ValueError(f"unknown layer descriptor {layer!r}")


def iter_layer_costs(stage: StageSpec, in_shape: Shape) -> Iterator[tuple[str, int, int]]:
    """Yield (name, params, macs) per primitive layer, flattening residuals."""
    shape = in_shape
    for i, layer in enumerate(stage.layers):
        label = f"{stage.name}.{i}"
        if isinstance(layer, Residual):
            need_proj, stride, body_out = _residual_projection(layer, shape)
            body_shape = shape
            for j, sub in enumerate(layer.body):
                yield (f"{label}.body.{j}.{_type_tag(sub)}",
                       layer_param_count(sub, body_shape[0]),
                       layer_mac_count(sub, body_shape))
                body_shape = layer_output_shape(sub, body_shape)
            if need_proj:
                proj = Conv(body_out[0], kernel=1, stride=stride, padding=0, bias=False)
                yield (f"{label}.skip.conv1x1",
                       layer_param_count(proj, shape[0]),
                       layer_mac_count(proj, shape))
                yield (f"{label}.skip.batchnorm", 2 * body_out[0], 0)
            shape = body_out
        else:
            yield (f"{label}.{_type_tag(layer)}",
                   layer_param_count(layer, shape[0]),
                   layer_mac_count(layer, shape))
            shape = layer_output_shape(layer, shape)


def _type_tag(layer: LayerSpec) -> str:
    return type(layer).__name__.lower()


def stage_param_count(stage: StageSpec, in_shape: Shape) -> int:
    return sum(p for _, p, _ in iter_layer_costs(stage, in_shape))


def stage_mac_count(stage: StageSpec, in_shape: Shape) -> int:
    return sum(m for _, _, m in iter_layer_costs(stage, in_shape))


# ---------------------------------------------------------------------------
# torch module construction


class ResidualBlock(nn.Module):
    def __init__(self, body: nn.Sequential, projection: nn.Module | None):
        super().__init__()
        self.body = body
        self.projection = projection

    def forward(self, x):
        skip = x if self.projection is None else self.projection(x)
        return torch.relu(self.body(x) + skip)


def _build_layer(layer: LayerSpec, in_shape: Shape) -> tuple[nn.Module, Shape]:
    c = in_shape[0]
    out_shape = layer_output_shape(layer, in_shape)
    if isinstance(layer, Conv):
        mod = nn.Conv2d(c, layer.out_channels, layer.kernel, stride=layer.stride,
                        padding=layer.pad, bias=layer.bias)
    elif isinstance(layer, DepthwiseConv):
        mod = nn.Conv2d(c, c, layer.kernel, stride=layer.stride,
                        padding=layer.pad, groups=c, bias=layer.bias)
    elif isinstance(layer, BatchNorm):
        mod = nn.BatchNorm2d(c)
    elif isinstance(layer, Activation):
        mod = nn.ReLU() if layer.kind == "relu" else nn.ReLU6()
    elif isinstance(layer, Pool):
        cls = nn.MaxPool2d if layer.kind == "max" else nn.AvgPool2d
        mod = cls(layer.size, stride=layer.step)
    elif isinstance(layer, Residual):
        body_mods = []
        shape = in_shape
        for sub in layer.body:
            m, shape = _build_layer(sub, shape)
            body_mods.append(m)
        need_proj, stride, _ = _residual_projection(layer, in_shape)
        proj = None
        if need_proj:
            proj = nn.Sequential(
                nn.Conv2d(c, shape[0], 1, stride=stride, bias=False),
                nn.BatchNorm2d(shape[0]),
            )
        mod = ResidualBlock(nn.Sequential(*body_mods), proj)
    else:
        raise ValueError(f"unknown layer descriptor {layer!r}")
    return mod, out_shape


def _build_stage(stage: StageSpec, in_shape: Shape) -> tuple[nn.Module, Shape]:
    mods = []
    shape = in_shape
    for layer in stage.layers:
        m, shape = _build_layer(layer, shape)
        mods.append(m)
    return nn.Sequential(*mods), shape


def init_parameters(module: nn.Module, seed: int) -> None:
    """Reinitialize conv/linear weights from a seeded uniform fan-in rule.

    Batch norms are reset to identity (weight 1, bias 0, fresh running
    stats).  Iteration follows registration order, so the draw is fully
    reproducible for a fixed module structure and seed.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight.shape[1:].numel()
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(m, nn.BatchNorm2d):
                m.reset_running_stats()
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)


class Backbone(nn.Module):
    """Runtime backbone: a BackboneSpec plus one torch module per stage."""

    def __init__(self, spec: BackboneSpec, stage_modules: Sequence[nn.Module],
                 shapes: Sequence[Shape]):
        super().__init__()
        if len(stage_modules) != spec.n_stages or len(shapes) != spec.n_stages:
            raise ValueError("stage modules / shapes must match the declared stage count")
        self.spec = spec
        self.stages = nn.ModuleList(stage_modules)
        self.stage_shapes = [tuple(s) for s in shapes]

    @property
    def input_shape(self) -> Shape:
        return self.spec.input_shape

    @property
    def n_stages(self) -> int:
        return self.spec.n_stages

    def forward(self, x):
        for stage in self.stages:
            x = stage(x)
        return x


def build_backbone_from_spec(spec: BackboneSpec, seed: int = 0) -> Backbone:
    """Construct and seed-initialize the torch modules for a native spec."""
    if spec.family == EXTERNAL_FAMILY:
        raise ValueError("external backbones are built by their registered adapter")
    mods, shapes = [], []
    shape = spec.input_shape
    for stage in spec.stages:
        m, shape = _build_stage(stage, shape)
        mods.append(m)
        shapes.append(shape)
    backbone = Backbone(spec, mods, shapes)
    init_parameters(backbone, seed)
    return backbone


# ---------------------------------------------------------------------------
# reference families


def _scaled(width: int, scale: float) -> int:
    return max(1, round(width * scale))


def micro_vgg_spec(input_shape: Shape, scale: float = 1.0, name: str = "micro-vgg-5") -> BackboneSpec:
    """Five plain conv-relu-maxpool stages."""
    widths = [_scaled(w, scale) for w in (8, 16, 24, 32, 48)]
    stages = tuple(
        StageSpec(f"stage{i + 1}", (Conv(w, 3, 1), Activation("relu"), Pool("max", 2)))
        for i, w in enumerate(widths)
    )
    return BackboneSpec(name, "micro-vgg", tuple(input_shape), stages)


def micro_resnet_spec(input_shape: Shape, scale: float = 1.0, name: str = "micro-resnet-4") -> BackboneSpec:
    """Four residual stages, each one stride-2 basic block."""
    widths = [_scaled(w, scale) for w in (12, 16, 24, 32)]
    stages = []
    for i, w in enumerate(widths):
        body = (
            Conv(w, 3, stride=2, bias=False),
            BatchNorm(),
            Activation("relu"),
            Conv(w, 3, stride=1, bias=False),
            BatchNorm(),
        )
        stages.append(StageSpec(f"stage{i + 1}", (Residual(body),)))
    return BackboneSpec(name, "micro-resnet", tuple(input_shape), tuple(stages))


def micro_mobile_spec(input_shape: Shape, scale: float = 1.0, name: str = "micro-mobile-5") -> BackboneSpec:
    """Five stride-2 inverted-bottleneck stages (expand 2x, depthwise, project)."""
    widths = [_scaled(w, scale) for w in (8, 12, 16, 24, 32)]
    stages = []
    in_c = input_shape[0]
    for i, w in enumerate(widths):
        expanded = 2 * in_c
        layers = (
            Conv(expanded, kernel=1, bias=False),
            BatchNorm(),
            Activation("relu6"),
            DepthwiseConv(3, stride=2, bias=False),
            BatchNorm(),
            Activation("relu6"),
            Conv(w, kernel=1, bias=False),
            BatchNorm(),
        )
        stages.append(StageSpec(f"stage{i + 1}", layers))
        in_c = w
    return BackboneSpec(name, "micro-mobile", tuple(input_shape), tuple(stages))


# ---------------------------------------------------------------------------
# registry

BackboneFactory = Callable[[Shape, float, int], Backbone]

_REGISTRY: dict[str, BackboneFactory] = {}


def register_backbone(name: str, factory: BackboneFactory) -> None:
    if not name:
        raise ValueError("backbone name must be non-empty")
    _REGISTRY[name] = factory


def registered_backbones() -> list[str]:
    return sorted(_REGISTRY)


def build_backbone(name: str, input_shape: Shape, scale: float = 1.0, seed: int = 0) -> Backbone:
    """Look up a registry entry and build a seeded backbone for the input shape."""
    if name not in _REGISTRY:
        raise KeyError(f"unknown backbone {name!r}; registered: {registered_backbones()}")
    shape = tuple(int(d) for d in input_shape)
    if len(shape) != 3 or any(d < 1 for d in shape):
        raise ValueError(f"input_shape must be 3 positive dims, got {input_shape}")
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    backbone = _REGISTRY[name](shape, scale, seed)
    if backbone.n_stages < 2:
        raise ValueError(f"backbone {name!r} must expose at least two stages")
    return backbone


def _register_native(key: str, spec_fn) -> None:
    def factory(input_shape: Shape, scale: float, seed: int) -> Backbone:
        return build_backbone_from_spec(spec_fn(input_shape, scale, key), seed=seed)

    register_backbone(key, factory)


_register_native("micro-vgg-5", micro_vgg_spec)
_register_native("micro-resnet-4", micro_resnet_spec)
_register_native("micro-mobile-5", micro_mobile_spec)


def register_external_backbone(
    name: str,
    builder: Callable[[Shape], tuple[Sequence[nn.Module], Sequence[Shape]]],
) -> None:
    """Register an externally provided backbone.

    ``builder(input_shape)`` must return (stage modules, per-stage output
    shapes).  The adapter supplies its own parameters (pretrained or
    otherwise); width scaling is not applied and the analytic MAC model does
    not cover these stages.
    """

    def factory(input_shape: Shape, scale: float, seed: int) -> Backbone:
        modules, shapes = builder(tuple(input_shape))
        if len(modules) != len(shapes):
            raise ValueError("external builder returned mismatched modules/shapes")
        spec = BackboneSpec(
            name,
            EXTERNAL_FAMILY,
            tuple(input_shape),
            tuple(StageSpec(f"stage{i + 1}", ()) for i in range(len(modules))),
        )
        return Backbone(spec, list(modules), [tuple(s) for s in shapes])

    register_backbone(name, factory)


# ---------------------------------------------------------------------------
# spec (de)serialization, used by checkpoints


def _layer_to_dict(layer: LayerSpec) -> dict:
    if isinstance(layer, Conv):
        return {"type": "conv", "out_channels": layer.out_channels, "kernel": layer.kernel,
                "stride": layer.stride, "padding": layer.padding, "bias": layer.bias}
    if isinstance(layer, DepthwiseConv):
        return {"type": "depthwise", "kernel": layer.kernel, "stride": layer.stride,
                "padding": layer.padding, "bias": layer.bias}
    if isinstance(layer, BatchNorm):
        return {"type": "batchnorm"}
    if isinstance(layer, Activation):
        return {"type": "activation", "kind": layer.kind}
    if isinstance(layer, Pool):
        return {"type": "pool", "kind": layer.kind, "size": layer.size, "stride": layer.stride}
    if isinstance(layer, Residual):
        return {"type": "residual", "body": [_layer_to_dict(sub) for sub in layer.body]}
    raise ValueError(f"unknown layer descriptor {layer!r}")


def _layer_from_dict(d: dict) -> LayerSpec:
    kind = d.get("type")
    if kind == "conv":
        return Conv(d["out_channels"], d["kernel"], d["stride"], d["padding"], d["bias"])
    if kind == "depthwise":
        return DepthwiseConv(d["kernel"], d["stride"], d["padding"], d["bias"])
    if kind == "batchnorm":
        return BatchNorm()
    if kind == "activation":
        return Activation(d["kind"])
    if kind == "pool":
        return Pool(d["kind"], d["size"], d["stride"])
    if kind == "residual":
        return Residual(tuple(_layer_from_dict(sub) for sub in d["body"]))
    raise ValueError(f"unknown serialized layer type {kind!r}")


def spec_to_dict(spec: BackboneSpec) -> dict:
    return {
        "name": spec.name,
        "family": spec.family,
        "input_shape": list(spec.input_shape),
        "stages": [
            {"name": s.name, "layers": [_layer_to_dict(l) for l in s.layers]}
            for s in spec.stages
        ],
    }


def spec_from_dict(d: dict) -> BackboneSpec:
    stages = tuple(
        StageSpec(s["name"], tuple(_layer_from_dict(l) for l in s["layers"]))
        for s in d["stages"]
    )
    return BackboneSpec(d["name"], d["family"], tuple(d["input_shape"]), stages)


def truncate_spec(spec: BackboneSpec, n_stages: int) -> BackboneSpec:
    if not (1 <= n_stages <= spec.n_stages):
        raise ValueError(f"cannot keep {n_stages} of {spec.n_stages} stages")
    return replace(spec, stages=spec.stages[:n_stages])
