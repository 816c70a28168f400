import numpy as np
import pytest

from stitchkit import tensor as T
from stitchkit.anchors import (AnchorConfig, build_family, full_forward, head_forward, pretrain_anchor,
                               tail_forward)
from stitchkit.data import MarkovTask, source_and_target

from conftest import TOY_CONFIGS


def test_family_of_two():
    fam = build_family([AnchorConfig(2, 32), AnchorConfig(4, 64)], seed=0)
    assert [a.config.depth for a in fam] == [2, 4]
    assert [a.index for a in fam] == [0, 1]


def test_equal_depth_family_of_three():
    # same depth, width and heads doubling at each step
    cfgs = [AnchorConfig(12, 12, 3), AnchorConfig(12, 24, 6), AnchorConfig(12, 48, 12)]
    fam = build_family(cfgs, seed=0)
    assert len(fam) == 3
    assert fam[0].flops < fam[1].flops < fam[2].flops


def test_family_is_deterministic():
    a = build_family(TOY_CONFIGS, seed=5)
    b = build_family(TOY_CONFIGS, seed=5)
    for x, y in zip(a, b):
        for k, p in x.parameters().items():
            assert p.data.tobytes() == y.parameters()[k].data.tobytes()


@pytest.mark.parametrize("cfgs", [
    [AnchorConfig(4, 64), AnchorConfig(2, 32)],
    [AnchorConfig(2, 32), AnchorConfig(2, 32)],
    [AnchorConfig(2, 32)],
])
def test_family_preconditions(cfgs):
    with pytest.raises(ValueError):
        build_family(cfgs)


def test_config_invariants():
    with pytest.raises(ValueError):
        AnchorConfig(1, 32)
    with pytest.raises(ValueError):
        AnchorConfig(2, 30, heads=4)


def test_zero_epoch_pretraining_only_freezes(toy_data):
    a = build_family(TOY_CONFIGS, seed=0)[0]
    before = {k: v.data.copy() for k, v in a.parameters().items()}
    pretrain_anchor(a, toy_data, epochs=0)
    assert a.frozen
    assert all(before[k].tobytes() == v.data.tobytes() for k, v in a.parameters().items())
    with pytest.raises(RuntimeError):
        pretrain_anchor(a, toy_data, epochs=1)


def test_pretraining_reduces_loss(toy_data):
    a = build_family(TOY_CONFIGS, seed=0)[0]
    start = T.cross_entropy(full_forward(a, toy_data), toy_data.labels).item()
    pretrain_anchor(a, toy_data, epochs=8, lr=1e-2, batch_size=32)
    end = T.cross_entropy(full_forward(a, toy_data), toy_data.labels).item()
    assert end < start


def test_head_output_shape(toy_family, toy_data):
    a = toy_family[1]
    h = head_forward(a, toy_data[:5], 2)
    assert h.shape == (5, a.config.seq_len, a.config.dim)


@pytest.mark.parametrize("which", [0, 1])
def test_split_and_recompose_is_identity(toy_family, toy_data, which):
    a = toy_family[which]
    full = full_forward(a, toy_data).data
    for l in range(1, a.config.depth):
        split = tail_forward(a, head_forward(a, toy_data, l), l + 1).data
        np.testing.assert_allclose(split, full, rtol=0, atol=1e-10)


def test_illegal_splits(toy_family, toy_data):
    a = toy_family[0]
    with pytest.raises(IndexError):
        head_forward(a, toy_data, 0)
    with pytest.raises(IndexError):
        head_forward(a, toy_data, a.config.depth)
    with pytest.raises(IndexError):
        tail_forward(a, head_forward(a, toy_data, 1), 1)


def test_zero_overlay_matches_empty_overlay(toy_palette, toy_data):
    palette, overlay = toy_palette
    for s in palette.stitches:
        if not s.is_anchor:
            continue
        a = palette.family[s.small_anchor]
        with_pst = full_forward(a, toy_data, overlay.view(s.id)).data
        without = full_forward(a, toy_data, overlay.heads_only()).data
        assert with_pst.tobytes() == without.tobytes()


def test_param_count_formula():
    fam = build_family([AnchorConfig(2, 32, mlp_ratio=2.0), AnchorConfig(3, 48, heads=4, mlp_ratio=1.5)])
    for a in fam:
        d, r = a.config.dim, a.config.mlp_ratio
        counts = a.count_params()
        assert counts["attention"] == a.config.depth * (4 * d * d + 4 * d)
        assert counts["ffn"] == a.config.depth * int(2 * r * d * d + (r + 1) * d)
        assert sum(counts.values()) == sum(p.size for p in a.parameters().values())


def test_frozen_anchor_gets_no_gradients(toy_palette, toy_data):
    palette, overlay = toy_palette
    teacher = palette.teacher
    a = palette.family[teacher.large_anchor]
    logits = full_forward(a, toy_data, overlay.view(teacher.id))
    T.backward(T.cross_entropy(logits, toy_data.labels))
    assert all(p.grad is None for p in a.parameters().values())
    assert overlay.lora[(1, 1, "q")].down.grad is not None


def test_markov_domains_differ_and_are_balanced():
    src, tgt = source_and_target(num_classes=4, seq_len=8)
    assert not np.allclose(src.transitions, tgt.transitions)
    b = src.sample(40, seed=0)
    assert np.bincount(b.labels).tolist() == [10, 10, 10, 10]
    assert b.tokens.max() < src.vocab_size
    again = MarkovTask(4, 8, seed=src.seed).sample(40, seed=0)
    assert np.array_equal(again.tokens, b.tokens)
