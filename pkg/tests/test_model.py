"""Backbone/adapter/head composition against hand-computed oracles."""

import numpy as np
import pytest

from adapool import model, nn
from adapool.errors import DimensionError, RoutingError, UsageError
from adapool.rng import rng_for


def small_stack(seed=0, width=6, layers=2, bottleneck=3, insertions=2):
    bb = model.Backbone.build(rng_for(seed, "init", "backbone"),
                              num_layers=layers, width=width)
    ad = model.Adapter.init(rng_for(seed, "init", "adapter"),
                            width=width, bottleneck=bottleneck,
                            insertions=insertions)
    return bb, ad


def test_adapter_param_count_formula():
    assert model.adapter_param_count(768, 48, 24) == 1_789_056
    assert model.adapter_param_count(1, 1, 1) == 4
    assert model.adapter_param_count(64, 8, 8) == 8 * (1024 + 64 + 8) == 8768
    for bad in [(0, 1, 1), (1, 0, 1), (1, 1, 0), (-2, 3, 4)]:
        with pytest.raises(UsageError):
            model.adapter_param_count(*bad)


def test_adapter_param_count_matches_enumeration():
    _, ad = small_stack(width=10, bottleneck=4, insertions=6, layers=2)
    assert ad.num_params() == model.adapter_param_count(10, 4, 6)


def test_zero_up_projection_is_identity_on_features():
    bb, ad = small_stack(seed=3)
    for j in range(ad.insertions):
        ad.params[f"ins{j}.W_up"] = np.zeros_like(ad.params[f"ins{j}.W_up"])
        ad.params[f"ins{j}.b_up"] = np.zeros_like(ad.params[f"ins{j}.b_up"])
    X = rng_for(1, "x").normal(size=(5, bb.width))
    got = model.forward_features(bb, ad, X)
    # reference: backbone layers alone
    H = X
    for i in range(bb.num_layers):
        H = nn.residual_dense(None, H, bb.params, f"layer{i}.W", f"layer{i}.b", "tanh")
    assert np.array_equal(got, H)


def test_single_layer_hand_computed_bottleneck():
    # zero backbone layer acts as identity (x + tanh(0) = x)
    bb = model.Backbone.build(rng_for(0, "init", "backbone"), num_layers=1, width=2)
    bb.params["layer0.W"] = np.zeros((2, 2))
    ad = model.Adapter.init(rng_for(0, "init", "adapter"), width=2,
                            bottleneck=1, insertions=1)
    ad.params["ins0.W_down"] = np.array([[1.0, 0.0]])
    ad.params["ins0.b_down"] = np.array([0.5])
    ad.params["ins0.W_up"] = np.array([[2.0], [0.0]])
    ad.params["ins0.b_up"] = np.array([0.1, -0.2])
    y = model.forward_features(bb, ad, np.array([0.3, -0.4]))
    # z = 0.3 + 0.5 = 0.8, relu passes, up = [1.6, 0] + [0.1, -0.2]
    assert np.allclose(y, [2.0, -0.6], atol=1e-12)


def test_forward_is_deterministic_across_builds():
    bb1, ad1 = small_stack(seed=9)
    bb2, ad2 = small_stack(seed=9)
    X = rng_for(2, "x").normal(size=(4, bb1.width))
    assert bb1.byte_hash() == bb2.byte_hash()
    a = model.forward_features(bb1, ad1, X)
    b = model.forward_features(bb2, ad2, X)
    assert np.array_equal(a, b)


def test_backbone_frozen_through_training_step():
    bb, ad = small_stack(seed=4)
    head = model.Head.init(1, 2, bb.width)
    h0 = bb.byte_hash()
    X = rng_for(3, "x").normal(size=(8, bb.width))
    y = np.array([0, 1] * 4, dtype=float)
    st_a = nn.AdamState(ad.params, lr=1e-2)
    st_h = nn.AdamState(head.params, lr=1e-2)
    for _ in range(3):
        trace = nn.Trace()
        Z = model.forward_task(bb, ad, head, X, trace)
        grads, _ = nn.backward(trace, nn.binary_cross_entropy_grad(Z, y))
        assert grads.for_set(bb.params) == {}
        nn.adam_step(ad.params, grads.for_set(ad.params), st_a)
        nn.adam_step(head.params, grads.for_set(head.params), st_h)
    assert bb.byte_hash() == h0


def test_forward_task_head_contracts():
    bb, ad = small_stack(seed=5)
    zero_head = model.Head.init(1, 2, bb.width)
    X = rng_for(4, "x").normal(size=(3, bb.width))
    assert np.array_equal(model.forward_task(bb, ad, zero_head, X), np.zeros((3, 1)))

    hand = model.Head.init(2, 2, bb.width)
    w = np.arange(bb.width, dtype=float)[None, :]
    hand.params["W"] = w
    hand.params["b"] = np.array([0.25])
    H = model.forward_features(bb, ad, X)
    want = H @ w.T + 0.25
    assert np.allclose(model.forward_task(bb, ad, hand, X), want, atol=1e-12)

    multi = model.Head.init(3, 5, bb.width)
    assert model.forward_task(bb, ad, multi, X).shape == (3, 5)
    assert model.forward_task(bb, ad, multi, X[0]).shape == (5,)


def test_forward_all_matches_per_task_and_shares_features():
    bb, _ = small_stack(seed=6)
    rng = rng_for(6, "init", "adapters")
    slots = [model.Adapter.init(rng, bb.width, 3, 2) for _ in range(2)]
    heads = {i: model.Head.init(i, 2, bb.width) for i in (1, 2, 3)}
    for i, h in heads.items():
        h.params["W"] = rng.normal(size=(1, bb.width))
        h.params["b"] = rng.normal(size=1)
    routing = {1: 0, 2: 1, 3: 0}
    X = rng_for(7, "x").normal(size=(4, bb.width))
    Z = model.forward_all(bb, slots, heads, routing, X)
    assert Z.shape == (4, 3)
    for i in (1, 2, 3):
        want = model.forward_task(bb, slots[routing[i]], heads[i], X)
        assert np.array_equal(Z[:, i - 1:i], want)
    # tasks 1 and 3 share slot 0, so their logits come from the same features
    single = model.forward_all(bb, slots, {1: heads[1]}, {1: 0}, X)
    assert np.array_equal(single, model.forward_task(bb, slots[0], heads[1], X))


def test_forward_all_routing_guards():
    bb, ad = small_stack(seed=7)
    heads = {1: model.Head.init(1, 2, bb.width), 3: model.Head.init(3, 2, bb.width)}
    X = np.zeros((2, bb.width))
    with pytest.raises(RoutingError):
        model.forward_all(bb, [ad], heads, {1: 0, 3: 0}, X)  # gap at 2
    with pytest.raises(RoutingError):
        model.forward_all(bb, [ad], {1: heads[1]}, {1: 5}, X)  # missing slot
    with pytest.raises(RoutingError):
        model.forward_all(bb, [ad], {}, {}, X)
    with pytest.raises(RoutingError):
        model.forward_all(bb, [ad], {2: heads[3]}, {2: 0}, X)  # must start at 1


def test_dimension_guards():
    bb, ad = small_stack(seed=8)
    with pytest.raises(DimensionError):
        model.forward_features(bb, ad, np.zeros((2, bb.width + 1)))
    odd = model.Adapter.init(rng_for(8, "init", "odd"), bb.width, 3, 3)
    with pytest.raises(UsageError):
        model.forward_features(bb, odd, np.zeros((2, bb.width)))  # 3 over 2 layers
    wide = model.Adapter.init(rng_for(8, "init", "wide"), bb.width + 2, 3, 2)
    with pytest.raises(DimensionError):
        model.forward_features(bb, wide, np.zeros((2, bb.width)))


def test_head_init_and_guards():
    h = model.Head.init(1, 2, 6)
    assert h.out_dim == 1 and h.num_params() == 7
    h5 = model.Head.init(2, 5, 6)
    assert h5.out_dim == 5 and h5.num_params() == 35
    with pytest.raises(UsageError):
        model.Head.init(1, 1, 6)


def test_predict_label_conventions():
    # logit exactly 0 resolves to class 0
    assert model.predict_labels(np.array([0.0, 0.2, -0.3]), 2).tolist() == [0, 1, 0]
    Z = np.array([[0.1, 0.9, 0.3], [2.0, -1.0, 2.0]])
    assert model.predict_labels(Z, 3).tolist() == [1, 0]  # argmax tie -> lowest
    with pytest.raises(DimensionError):
        model.predict_labels(Z, 4)
