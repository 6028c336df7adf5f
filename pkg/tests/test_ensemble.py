"""Fusion model: dimensions, freezing, locality, caching."""

import numpy as np
import numpy.testing as npt
import pytest

from trifusion.densenet import dense_tiny
from trifusion.ensemble import FeatureCache, HeadConfig, build_ensemble
from trifusion.errors import ConfigError, ContractError
from trifusion.mobile import mobile_tiny
from trifusion.tensor import Tape, Tensor
from trifusion.train import Adam, one_hot, softmax_cross_entropy
from trifusion.vit import VitConfig, vit_tiny


def tiny_model(seed=0, freeze=True, hidden=32):
    return build_ensemble(mobile_tiny(), dense_tiny(), vit_tiny(),
                          HeadConfig(hidden=hidden, num_classes=2),
                          seed=seed, freeze_branches=freeze)


def test_tiny_fused_dimension():
    model = tiny_model()
    assert (model.mobile.feature_dim, model.dense.feature_dim,
            model.vit.feature_dim) == (32, 24, 32)
    assert model.fused_dim == 88


def test_mismatched_input_sizes_rejected():
    bad_vit = VitConfig(input_size=16, patch_size=8, embed_dim=32,
                        num_layers=1, num_heads=2, mlp_hidden_dim=32)
    with pytest.raises(ConfigError):
        build_ensemble(mobile_tiny(), dense_tiny(), bad_vit,
                       HeadConfig(hidden=8), seed=0)


def test_forward_probability_rows():
    model = tiny_model(seed=1)
    x = Tensor(np.random.default_rng(2).uniform(0, 1, size=(3, 3, 32, 32)))
    probs = model.forward(x, mode="eval")
    assert probs.shape == (3, 2)
    npt.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-9)


def test_zero_final_layer_gives_uniform_probs():
    model = tiny_model(seed=3)
    model.head.fc2.weight.data[...] = 0.0
    model.head.fc2.bias.data[...] = 0.0
    x = Tensor(np.random.default_rng(4).uniform(0, 1, size=(2, 3, 32, 32)))
    probs = model.forward(x, mode="eval")
    npt.assert_allclose(probs.data, 0.5, atol=1e-15)


def test_eval_forward_deterministic():
    model = tiny_model(seed=5)
    x = Tensor(np.random.default_rng(6).uniform(0, 1, size=(2, 3, 32, 32)))
    a = model.forward(x, mode="eval").data.copy()
    b = model.forward(x, mode="eval").data
    npt.assert_array_equal(a, b)


def test_bad_mode_rejected():
    model = tiny_model(seed=7)
    with pytest.raises(ContractError):
        model.forward(Tensor(np.zeros((2, 3, 32, 32))), mode="predict")


def test_trainable_parameters_frozen_default():
    model = tiny_model(seed=8)
    names = [n for n, _ in model.trainable_parameters()]
    assert names and all(n.startswith("head.") for n in names)
    # BN gamma/beta + two dense layers with biases
    total = sum(p.size for _, p in model.trainable_parameters())
    assert total == 2 * 88 + (88 * 32 + 32) + (32 * 2 + 2) == 3090


def test_unfrozen_includes_branch_parameters():
    model = tiny_model(seed=9, freeze=False)
    names = [n for n, _ in model.trainable_parameters()]
    assert any(n.startswith("mobile.") for n in names)
    assert any(n.startswith("dense.") for n in names)
    assert any(n.startswith("vit.") for n in names)
    assert any(n.startswith("head.") for n in names)


def test_branch_freeze_invariant_under_training_steps():
    model = tiny_model(seed=10)
    rng = np.random.default_rng(11)
    x = rng.uniform(0, 1, size=(4, 3, 32, 32))
    labels = one_hot(np.array([0, 1, 0, 1]), 2)
    branch_before = {n: p.data.copy() for n, p in model.named_parameters()
                     if not n.startswith("head.")}
    head_before = {n: p.data.copy() for n, p in model.named_parameters()
                   if n.startswith("head.")}
    optimizer = Adam([p for _, p in model.trainable_parameters()], lr=1e-3)
    for _ in range(5):
        with Tape() as tape:
            loss = softmax_cross_entropy(
                model.forward_logits(Tensor(x), "train"), labels)
            tape.backward(loss)
        optimizer.step()
        optimizer.zero_grad()
    for n, p in model.named_parameters():
        if n.startswith("head."):
            continue
        npt.assert_array_equal(p.data, branch_before[n], err_msg=n)
    changed = [n for n, p in model.named_parameters()
               if n.startswith("head.")
               and not np.array_equal(p.data, head_before[n])]
    assert changed


def test_fusion_locality():
    """Silencing one branch's final layer only changes its fused slice."""
    model = tiny_model(seed=12)
    x = Tensor(np.random.default_rng(13).uniform(0, 1, size=(2, 3, 32, 32)))
    before = model.fused_features(x, "eval").data.copy()
    model.dense.final_bn.gamma.data[...] = 0.0
    model.dense.final_bn.beta.data[...] = 0.0
    after = model.fused_features(x, "eval").data
    lo, hi = 32, 32 + 24  # dense slice of [mobile | dense | vit]
    npt.assert_array_equal(after[:, :lo], before[:, :lo])
    npt.assert_array_equal(after[:, hi:], before[:, hi:])
    npt.assert_array_equal(after[:, lo:hi], 0.0)
    assert not np.array_equal(before[:, lo:hi], after[:, lo:hi])


def test_feature_cache_bit_identical_and_keyed():
    model = tiny_model(seed=14)
    rng = np.random.default_rng(15)
    images = rng.uniform(0, 1, size=(3, 3, 32, 32))
    cache = FeatureCache("model-a")
    cached = cache.features_for(model, images)
    fresh = model.fused_features(Tensor(images), "eval").data
    npt.assert_array_equal(cached, fresh)
    # a second pass serves from the cache, still bit-identical
    npt.assert_array_equal(cache.features_for(model, images), fresh)
    digest = FeatureCache.digest(images[0])
    assert cache.get(digest) is not None
    assert FeatureCache("model-b").get(digest) is None


def test_ensemble_gradcheck_scope():
    from trifusion.gradcheck import run_gradcheck
    for result in run_gradcheck("ensemble", seed=16):
        assert result.max_err <= 1e-4, result.name
