import numpy as np
import pytest
import torch

from conftest import make_random_split
from multiexit.backbones import (
    Activation,
    BackboneSpec,
    Conv,
    Pool,
    StageSpec,
    build_backbone_from_spec,
)
from multiexit.inference import (
    collect_logits,
    ensemble_logits,
    ensemble_top1,
    load_logit_dump,
    per_exit_accuracies,
    predict,
    save_logit_dump,
    top1_accuracy,
)
from multiexit.model import attach_exits, forward_all_exits


def test_ensemble_logits_hand_example():
    o1 = torch.tensor([[1.0, 3.0]])
    o2 = torch.tensor([[5.0, 1.0]])
    fused = ensemble_logits([o1, o2], [0.3, 0.7])
    assert torch.allclose(fused, torch.tensor([[3.8, 1.6]]))


def test_ensemble_input_validation():
    o = torch.zeros((2, 3))
    with pytest.raises(ValueError):
        ensemble_logits([], [])
    with pytest.raises(ValueError):
        ensemble_logits([o, o], [1.0])
    with pytest.raises(ValueError):
        ensemble_logits([o, torch.zeros((2, 4))], [0.5, 0.5])


def test_prediction_matches_scalar_reference():
    """Loop-based python reference for the weighted argmax rule."""
    rng = np.random.default_rng(0)
    for _ in range(200):
        n_exits = int(rng.integers(1, 5))
        b = int(rng.integers(1, 7))
        c = int(rng.integers(2, 9))
        outs = [torch.tensor(rng.normal(size=(b, c))) for _ in range(n_exits)]
        weights = [float(w) for w in rng.uniform(0.05, 2.0, size=n_exits)]
        got = predict(outs, weights)
        for i in range(b):
            best, best_v = 0, None
            for j in range(c):
                v = sum(weights[k] * float(outs[k][i, j]) for k in range(n_exits))
                if best_v is None or v > best_v:
                    best, best_v = j, v
            assert int(got[i]) == best


def test_ties_resolve_to_lowest_class_index():
    o = torch.zeros((3, 4))
    assert predict([o], [1.0]).tolist() == [0, 0, 0]
    o2 = torch.tensor([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])
    assert predict([o2], [1.0]).tolist() == [0, 1]


def test_positive_rescaling_never_changes_predictions():
    gen = torch.Generator().manual_seed(3)
    outs = [torch.randn((16, 7), generator=gen) for _ in range(3)]
    weights = np.array([0.2, 0.3, 0.5])
    base = predict(outs, weights.tolist())
    for scale in np.logspace(-3, 3, 20):
        assert torch.equal(base, predict(outs, (weights * scale).tolist()))


def test_top1_accuracy_basics():
    preds = torch.tensor([0, 1, 2, 2])
    targets = torch.tensor([0, 1, 1, 2])
    assert top1_accuracy(preds, targets) == 0.75
    with pytest.raises(ValueError):
        top1_accuracy(preds, targets[:2])
    with pytest.raises(ValueError):
        top1_accuracy(torch.tensor([]), torch.tensor([]))


def _identical_feature_model(num_classes=4, image_size=16):
    """Three attach points that all see the same features.

    Stages 2 and 3 are size-1 average pools, i.e. identity maps, and all
    heads share one set of parameters, so every exit must behave identically.
    """
    stages = (
        StageSpec("stage1", (Conv(6, 3, 1), Activation("relu"), Pool("max", 2))),
        StageSpec("stage2", (Pool("avg", 1),)),
        StageSpec("stage3", (Pool("avg", 1),)),
    )
    spec = BackboneSpec("echo", "custom", (3, image_size, image_size), stages)
    backbone = build_backbone_from_spec(spec, seed=0)
    model = attach_exits(backbone, [0, 1, 2], num_classes, seed=0)
    state = model.exits[0].state_dict()
    for head in model.exits[1:]:
        head.load_state_dict(state)
    return model


def test_identical_heads_on_identical_features_agree():
    model = _identical_feature_model()
    split = make_random_split(40, 4, 16, seed=2)
    accs = per_exit_accuracies(model, split)
    assert accs[0] == accs[1] == accs[2]
    outs = forward_all_exits(model, split.images[:8])
    assert torch.equal(outs[0], outs[1])
    assert torch.equal(outs[1], outs[2])
    # fusing identical outputs changes nothing either
    fused = ensemble_top1(model, split, [0.2, 0.3, 0.5])
    assert fused == accs[0]


def test_collect_logits_matches_direct_forward():
    model = _identical_feature_model()
    split = make_random_split(30, 4, 16, seed=5)
    dump = collect_logits(model, split, batch_size=7)
    direct = forward_all_exits(model, split.images)
    for k in range(model.n_exits):
        np.testing.assert_array_equal(dump.logits[k], direct[k].numpy())
    assert dump.restricted_top1([True] * 3, [1 / 3] * 3) == ensemble_top1(
        model, split, [1 / 3] * 3
    )


def test_restricted_top1_validation():
    model = _identical_feature_model()
    split = make_random_split(10, 4, 16, seed=1)
    dump = collect_logits(model, split)
    with pytest.raises(ValueError):
        dump.restricted_top1([True, False], [1.0])
    with pytest.raises(ValueError):
        dump.restricted_top1([False, False, False], [])
    with pytest.raises(ValueError):
        dump.restricted_top1([True, True, False], [1.0])


def test_logit_dump_round_trip(tmp_path):
    model = _identical_feature_model()
    split = make_random_split(12, 4, 16, seed=9)
    dump = collect_logits(model, split)
    path = tmp_path / "dump.npz"
    save_logit_dump(dump, path)
    loaded = load_logit_dump(path)
    assert loaded.n_exits == dump.n_exits
    assert loaded.exit_stage_indices == dump.exit_stage_indices
    assert loaded.num_classes == dump.num_classes
    np.testing.assert_array_equal(loaded.targets, dump.targets)
    for a, b in zip(loaded.logits, dump.logits):
        np.testing.assert_array_equal(a, b)
