import csv
import io
import itertools

import pytest

from conftest import make_chain_model
from multiexit.backbones import build_backbone
from multiexit.costs import (
    cost_report,
    count_macs,
    count_params,
    measure_latency,
    model_cost_breakdown,
    percent_change,
)
from multiexit.model import ExitMask, attach_exits, extract_subnetwork, make_exit_head


def vgg_model(num_classes=10):
    backbone = build_backbone("micro-vgg-5", (3, 64, 64), seed=0)
    return attach_exits(backbone, [0, 1, 2, 3, 4], num_classes, seed=0)


def test_dense_unit_example():
    head = make_exit_head(512, 10)
    assert count_params(head) == 5130
    # its dense layer costs in*out multiply-accumulates
    backbone = build_backbone("micro-vgg-5", (3, 64, 64))
    model = attach_exits(backbone, [4], 10)
    dense_rows = [r for r in model_cost_breakdown(model) if r.name.endswith("dense")]
    assert len(dense_rows) == 1
    assert dense_rows[0].macs == 48 * 10
    assert dense_rows[0].params == 48 * 10 + 10


def test_hand_derived_micro_vgg_fixture():
    """Frozen expected values, worked out from the layer recipe by hand."""
    model = vgg_model()
    assert count_params(model) == 27018
    assert count_macs(model) == 3613952

    breakdown = model_cost_breakdown(model)
    conv_macs = [r.macs for r in breakdown if ".conv" in r.name]
    assert conv_macs == [884736, 1179648, 884736, 442368, 221184]
    conv_params = [r.params for r in breakdown if ".conv" in r.name]
    assert conv_params == [224, 1168, 3480, 6944, 13872]
    head_params = [r.params for r in breakdown if r.name.endswith("dense")]
    assert head_params == [90, 170, 250, 330, 490]
    assert sum(conv_params) == 25688  # backbone alone


def test_report_totals_equal_breakdown_sums():
    report = cost_report(vgg_model())
    assert report.params == sum(r.params for r in report.breakdown)
    assert report.macs == sum(r.macs for r in report.breakdown)
    assert report.latency_ms is None


def test_report_csv_is_parseable():
    text = cost_report(vgg_model()).to_csv()
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["layer", "params", "macs"]
    assert rows[-1][0] == "total"
    assert int(rows[-1][1]) == 27018


def test_params_add_up_across_model_parts():
    model = vgg_model()
    total = count_params(model.backbone) + sum(count_params(h) for h in model.exits)
    assert count_params(model) == total


def test_macs_monotone_under_mask_inclusion():
    model = make_chain_model(4, num_classes=3)
    masks = [ExitMask(bits) for bits in itertools.product([False, True], repeat=4)
             if any(bits)]
    macs = {m.as_bits(): count_macs(extract_subnetwork(model, m)) for m in masks}
    for a, b in itertools.product(masks, masks):
        if all(x <= y for x, y in zip(a, b)):
            assert macs[a.as_bits()] <= macs[b.as_bits()]


def test_count_macs_rejects_external_backbones():
    from torch import nn
    from multiexit.backbones import register_external_backbone

    def builder(input_shape):
        c, h, w = input_shape
        return (
            [nn.Sequential(nn.Conv2d(c, 4, 3, 2, 1)), nn.Sequential(nn.Conv2d(4, 4, 3, 2, 1))],
            [(4, h // 2, w // 2), (4, h // 4, w // 4)],
        )

    register_external_backbone("cost-external", builder)
    backbone = build_backbone("cost-external", (3, 16, 16))
    model = attach_exits(backbone, [0, 1], 5)
    assert count_params(model) > 0
    with pytest.raises(ValueError):
        count_macs(model)


def test_latency_protocol_shape():
    model = make_chain_model(2)
    result = measure_latency(model, reps=7, warmup=2)
    assert result.reps == 7 and result.warmup == 2 and result.batch_size == 1
    assert len(result.samples_ms) == 7
    assert min(result.samples_ms) <= result.median_ms <= max(result.samples_ms)
    assert result.iqr_ms >= 0.0
    with pytest.raises(ValueError):
        measure_latency(model, reps=0)


def test_truncated_network_is_not_slower():
    """Informational timing check with a wide margin: a sub-network keeping
    one of four stages should not take longer than the full model."""
    model = make_chain_model(4, num_classes=3, image_size=32)
    sub = extract_subnetwork(model, [True, False, False, False])
    full = measure_latency(model, reps=31, warmup=5)
    small = measure_latency(sub, reps=31, warmup=5)
    print(f"latency full={full.median_ms:.4f}ms sub={small.median_ms:.4f}ms")
    assert small.median_ms <= full.median_ms * 1.25


def test_percent_change_arithmetic():
    assert percent_change(50, 100) == -50.0
    assert percent_change(30, 20) == pytest.approx(50.0)
    assert percent_change(20, 20) == 0.0
    with pytest.raises(ValueError):
        percent_change(1.0, 0.0)
