
import pytest
import torch
from torch import nn

from multiexit.backbones import (
    Activation,
    BackboneSpec,
    BatchNorm,
    Conv,
    DepthwiseConv,
    Pool,
    Residual,
    StageSpec,
    build_backbone,
    build_backbone_from_spec,
    layer_mac_count,
    layer_output_shape,
    layer_param_count,
    micro_resnet_spec,
    micro_vgg_spec,
    register_external_backbone,
    registered_backbones,
    spec_from_dict,
    spec_to_dict,
    stage_shapes,
    truncate_spec,
)


def test_registry_lists_reference_families():
    names = registered_backbones()
    for expected in ("micro-vgg-5", "micro-resnet-4", "micro-mobile-5"):
        assert expected in names


def test_reference_families_stage_counts():
    assert build_backbone("micro-vgg-5", (3, 64, 64)).n_stages == 5
    assert build_backbone("micro-resnet-4", (3, 64, 64)).n_stages == 4
    assert build_backbone("micro-mobile-5", (3, 64, 64)).n_stages == 5


def test_unknown_backbone_is_a_lookup_error():
    with pytest.raises(KeyError):
        build_backbone("mega-vgg", (3, 64, 64))


def test_bad_input_shape_rejected():
    with pytest.raises(ValueError):
        build_backbone("micro-vgg-5", (3, 0, 64))
    with pytest.raises(ValueError):
        build_backbone("micro-vgg-5", (3, 64))
    with pytest.raises(ValueError):
        build_backbone("micro-vgg-5", (3, 64, 64), scale=0.0)


def test_shape_inference_micro_vgg():
    shapes = stage_shapes(micro_vgg_spec((3, 64, 64)))
    assert shapes == [(8, 32, 32), (16, 16, 16), (24, 8, 8), (32, 4, 4), (48, 2, 2)]


def test_collapsing_shape_raises():
    # five halvings of 16px hit zero on the last stage
    with pytest.raises(ValueError):
        build_backbone("micro-vgg-5", (3, 16, 16))


def test_width_scale_changes_channels():
    b = build_backbone("micro-vgg-5", (3, 64, 64), scale=2.0)
    assert [s[0] for s in b.stage_shapes] == [16, 32, 48, 64, 96]
    tiny = build_backbone("micro-vgg-5", (3, 64, 64), scale=0.01)
    assert all(s[0] >= 1 for s in tiny.stage_shapes)


def test_seeded_init_is_reproducible():
    a = build_backbone("micro-resnet-4", (3, 32, 32), seed=11)
    b = build_backbone("micro-resnet-4", (3, 32, 32), seed=11)
    c = build_backbone("micro-resnet-4", (3, 32, 32), seed=12)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_layer_param_and_mac_primitives():
    conv = Conv(16, 3, 1, bias=True)
    assert layer_param_count(conv, 3) == 3 * 3 * 3 * 16 + 16 == 448
    assert layer_mac_count(conv, (3, 32, 32)) == 9 * 3 * 16 * 32 * 32 == 442368
    dw = DepthwiseConv(3, 1, bias=False)
    assert layer_param_count(dw, 24) == 9 * 24
    assert layer_mac_count(dw, (24, 8, 8)) == 9 * 24 * 8 * 8
    assert layer_param_count(BatchNorm(), 24) == 48
    assert layer_mac_count(Pool("max", 2), (8, 16, 16)) == 0
    assert layer_mac_count(Activation("relu"), (8, 16, 16)) == 0


def test_residual_projection_only_when_needed():
    same = Residual((Conv(8, 3, 1, bias=False), BatchNorm()))
    assert layer_output_shape(same, (8, 16, 16)) == (8, 16, 16)
    stage = StageSpec("s", (same,))
    backbone = build_backbone_from_spec(
        BackboneSpec("t", "custom", (8, 16, 16), (stage, stage))
    )
    assert backbone.stages[0][0].projection is None

    changes = Residual((Conv(12, 3, 2, bias=False), BatchNorm()))
    assert layer_output_shape(changes, (8, 16, 16)) == (12, 8, 8)
    b2 = build_backbone_from_spec(
        BackboneSpec("t2", "custom", (8, 16, 16),
                     (StageSpec("s1", (changes,)), StageSpec("s2", (changes,))))
    )
    assert b2.stages[0][0].projection is not None


def test_residual_incompatible_skip_rejected():
    weird = Residual((Pool("max", 3, 3),))  # 16 -> 5, not an integer stride
    with pytest.raises(ValueError):
        layer_output_shape(weird, (8, 16, 16))


def test_forward_shapes_match_static_inference():
    for name in registered_backbones():
        b = build_backbone(name, (3, 64, 64))
        x = torch.randn(2, 3, 64, 64)
        for stage, want in zip(b.stages, b.stage_shapes):
            x = stage(x)
            assert tuple(x.shape[1:]) == want


def test_external_adapter_round_trip():
    def builder(input_shape):
        c, h, w = input_shape
        stages = [
            nn.Sequential(nn.Conv2d(c, 4, 3, stride=2, padding=1), nn.ReLU()),
            nn.Sequential(nn.Conv2d(4, 8, 3, stride=2, padding=1), nn.ReLU()),
        ]
        return stages, [(4, h // 2, w // 2), (8, h // 4, w // 4)]

    register_external_backbone("toy-external", builder)
    b = build_backbone("toy-external", (3, 16, 16))
    assert b.n_stages == 2
    assert b.spec.family == "external-adapter"
    out = b(torch.randn(1, 3, 16, 16))
    assert tuple(out.shape) == (1, 8, 4, 4)
    with pytest.raises(ValueError):
        build_backbone_from_spec(b.spec)


def test_spec_serialization_round_trip():
    for spec in (micro_vgg_spec((3, 64, 64)), micro_resnet_spec((3, 32, 32))):
        assert spec_from_dict(spec_to_dict(spec)) == spec


def test_truncate_spec_bounds():
    spec = micro_vgg_spec((3, 64, 64))
    assert truncate_spec(spec, 2).n_stages == 2
    assert truncate_spec(spec, 1).n_stages == 1  # single-stage cuts are legal
    with pytest.raises(ValueError):
        truncate_spec(spec, 0)
    with pytest.raises(ValueError):
        truncate_spec(spec, 6)


def test_single_stage_registry_build_rejected():
    from multiexit.backbones import register_backbone

    def factory(input_shape, scale, seed):
        spec = BackboneSpec("one", "custom", input_shape,
                            (StageSpec("stage1", (Conv(4, 3, 1), Activation())),))
        return build_backbone_from_spec(spec, seed)

    register_backbone("one-stage", factory)
    with pytest.raises(ValueError):
        build_backbone("one-stage", (3, 16, 16))
