import math

import pytest
import torch

from multiexit.inference import predict
from multiexit.weights import (
    ExitWeights,
    WeightMode,
    linear_ramp,
    make_weights,
    restrict_weights,
)


def test_linear_ramp_known_values():
    assert linear_ramp(1, "ascending") == (1.0,)
    assert linear_ramp(4, "ascending") == (0.1, 0.2, 0.3, 0.4)
    assert linear_ramp(4, "descending") == (0.4, 0.3, 0.2, 0.1)
    assert linear_ramp(2, "uniform") == (0.5, 0.5)


def test_linear_ramp_rejects_bad_arguments():
    with pytest.raises(ValueError):
        linear_ramp(0, "ascending")
    with pytest.raises(ValueError):
        linear_ramp(3, "sideways")


def test_mode_parsing():
    assert WeightMode.parse("mix") is WeightMode.MIX
    assert WeightMode.parse(WeightMode.ASC) is WeightMode.ASC
    assert WeightMode.parse("DESC") is WeightMode.DESC
    with pytest.raises(ValueError):
        WeightMode.parse("linear")


def test_mode_table_at_four_exits():
    """Each mode fixes the direction of both ramps."""
    cases = {
        "desc": ((0.4, 0.3, 0.2, 0.1), (0.4, 0.3, 0.2, 0.1)),
        "asc": ((0.1, 0.2, 0.3, 0.4), (0.1, 0.2, 0.3, 0.4)),
        "mix": ((0.4, 0.3, 0.2, 0.1), (0.1, 0.2, 0.3, 0.4)),
        "unif": ((0.25, 0.25, 0.25, 0.25), (0.25, 0.25, 0.25, 0.25)),
    }
    for mode, (loss, out) in cases.items():
        w = make_weights(mode, 4)
        assert w.loss_weights == pytest.approx(loss, abs=1e-12)
        assert w.output_weights == pytest.approx(out, abs=1e-12)


def test_fresh_vectors_positive_and_normalized():
    for mode in WeightMode:
        for n in range(1, 9):
            w = make_weights(mode, n)
            for vec in (w.loss_weights, w.output_weights):
                assert len(vec) == n
                assert all(x > 0 for x in vec)
                assert abs(sum(vec) - 1.0) <= 1e-9


def test_single_exit_weights_are_unity():
    for mode in WeightMode:
        w = make_weights(mode, 1)
        assert w.loss_weights == (1.0,) and w.output_weights == (1.0,)


def test_exit_weights_validation():
    with pytest.raises(ValueError):
        ExitWeights((), ())
    with pytest.raises(ValueError):
        ExitWeights((0.5, 0.5), (1.0,))
    with pytest.raises(ValueError):
        ExitWeights((0.5, -0.5), (0.5, 0.5))
    with pytest.raises(ValueError):
        ExitWeights((0.5, 0.0), (0.5, 0.5))
    with pytest.raises(ValueError):
        ExitWeights((0.5, math.inf), (0.5, 0.5))


def test_restrict_keeps_original_entries():
    w = make_weights("mix", 4)
    r = restrict_weights(w, [True, False, True, False])
    assert r.loss_weights == (0.4, 0.2)
    assert r.output_weights == pytest.approx((0.1, 0.3), abs=1e-12)
    # intentionally not renormalized
    assert sum(r.output_weights) != pytest.approx(1.0, abs=1e-3)


def test_restrict_renormalize_preserves_proportions():
    w = make_weights("asc", 5)
    mask = [False, True, False, True, True]
    r = restrict_weights(w, mask, renormalize=True)
    assert abs(sum(r.loss_weights) - 1.0) <= 1e-12
    assert abs(sum(r.output_weights) - 1.0) <= 1e-12
    raw = restrict_weights(w, mask)
    ratio = raw.output_weights[0] / r.output_weights[0]
    for a, b in zip(raw.output_weights, r.output_weights):
        assert a / b == pytest.approx(ratio, rel=1e-12)


def test_restrict_rejects_bad_masks():
    w = make_weights("unif", 3)
    with pytest.raises(ValueError):
        restrict_weights(w, [False, False, False])
    with pytest.raises(ValueError):
        restrict_weights(w, [True, False])


def test_renormalization_never_changes_predictions():
    """Scaling the output weights cannot move an argmax."""
    gen = torch.Generator().manual_seed(7)
    outputs = [torch.randn((12, 6), generator=gen) for _ in range(3)]
    w = make_weights("mix", 3)
    for bits in range(1, 8):
        mask = [bool((bits >> (2 - k)) & 1) for k in range(3)]
        kept = [outputs[k] for k in range(3) if mask[k]]
        raw = restrict_weights(w, mask)
        norm = restrict_weights(w, mask, renormalize=True)
        assert torch.equal(predict(kept, raw.output_weights),
                           predict(kept, norm.output_weights))
