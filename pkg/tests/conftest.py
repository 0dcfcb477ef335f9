"""Shared builders for small models and synthetic splits."""

import torch

from multiexit.backbones import (
    Activation,
    BackboneSpec,
    Conv,
    Pool,
    StageSpec,
    build_backbone_from_spec,
)
from multiexit.data import ArraySplit
from multiexit.model import attach_exits


def make_random_split(n, num_classes, image_size, seed=0, channels=3):
    """Gaussian images with uniform random labels; no structure by design."""
    gen = torch.Generator().manual_seed(seed)
    images = torch.randn((n, channels, image_size, image_size), generator=gen)
    targets = torch.randint(0, num_classes, (n,), generator=gen)
    return ArraySplit(images, targets, num_classes)


def make_chain_backbone(n_stages, image_size=16, width=6, seed=0):
    """A thin conv backbone with any number of stages, for layout tests."""
    stages = []
    h = image_size
    for i in range(n_stages):
        layers = [Conv(width, 3, 1), Activation("relu")]
        if h >= 2:
            layers.append(Pool("max", 2))
            h //= 2
        stages.append(StageSpec(f"stage{i + 1}", tuple(layers)))
    spec = BackboneSpec("chain", "custom", (3, image_size, image_size), tuple(stages))
    return build_backbone_from_spec(spec, seed=seed)


def make_chain_model(n_exits, num_classes=5, image_size=16, seed=0):
    """One exit per stage on a chain backbone: n_exits stages, n_exits heads."""
    backbone = make_chain_backbone(n_exits, image_size=image_size, seed=seed)
    return attach_exits(backbone, list(range(n_exits)), num_classes, seed=seed + 1)


def make_pool_backbone(image_size=16):
    """Parameter-free backbone (two average pools); heads see channel means."""
    stages = (
        StageSpec("stage1", (Pool("avg", 2),)),
        StageSpec("stage2", (Pool("avg", 2),)),
    )
    spec = BackboneSpec("pooly", "custom", (3, image_size, image_size), stages)
    return build_backbone_from_spec(spec, seed=0)
