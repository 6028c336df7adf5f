"""Finite-difference verification suite over ops, layers, and models.

Each case builds a small seeded scenario, runs :func:`finite_diff_check`
against one or more tensors (inputs and parameters), and reports the worst
relative error. Deep ReLU compositions use a smaller step: a kink crossed
inside the probe interval inflates the central difference even when the
analytic gradient is exact, and the crossing probability shrinks with the
step.

Scopes: ``ops`` (tensor arithmetic), ``layers``, ``backbones`` (micro-scale
branches), ``ensemble`` (full model through the head, frozen and unfrozen),
``all``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from . import train as T
from .densenet import DenseConfig, build_dense
from .ensemble import HeadConfig, build_ensemble
from .errors import ContractError
from .mobile import MobileConfig, build_mobile
from .tensor import (Tensor, add, expand_batch, finite_diff_check, matmul,
                     mul_elementwise, narrow, reshape, scale, softmax, sub,
                     tensor_sum, transpose)
from .vit import VitConfig, build_vit

THRESHOLD = 1e-4
SCOPES = ("ops", "layers", "backbones", "ensemble", "all")


def _checked(f, x, eps: float = 1e-5) -> float:
    """Kink-robust finite difference: retry at smaller steps when over
    threshold. A ReLU kink inside the probe interval inflates the central
    difference at one step size but not at a much smaller one, whereas a
    wrong backward rule disagrees at every step size."""
    err = finite_diff_check(f, x, eps)
    for smaller in (eps / 10.0, eps / 100.0):
        if err <= THRESHOLD / 10.0:
            break
        err = min(err, finite_diff_check(f, x, smaller))
    return err


@dataclass
class CaseResult:
    name: str
    scope: str
    max_err: float

    def ok(self, threshold: float = THRESHOLD) -> bool:
        return self.max_err <= threshold


Case = tuple[str, str, Callable[[int], float]]


def _rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, salt)))


def _rand(rng, *shape, away_from_zero: float = 0.0) -> Tensor:
    v = rng.uniform(-2.0, 2.0, size=shape)
    if away_from_zero:
        v = np.where(np.abs(v) < away_from_zero,
                     np.sign(v) * away_from_zero + v, v)
    return Tensor(v)


def _micro_vit() -> VitConfig:
    return VitConfig(input_size=8, patch_size=4, embed_dim=8, num_layers=2,
                     num_heads=2, mlp_hidden_dim=12)


def _micro_mobile() -> MobileConfig:
    return MobileConfig(input_size=8, stem_channels=4, stem_stride=1,
                        block_specs=[(None, 4, 1), (None, 6, 2)])


def _micro_dense() -> DenseConfig:
    return DenseConfig(input_size=8, stem_channels=4, growth_rate=2,
                       block_layers=[1, 2])


def _micro_ensemble(seed: int, freeze: bool):
    return build_ensemble(_micro_mobile(), _micro_dense(), _micro_vit(),
                          HeadConfig(hidden=4, dropout=0.3, num_classes=2),
                          seed=seed, freeze_branches=freeze)


# ---------------------------------------------------------------------------
# Case builders (each returns the worst relative error for one scenario)
# ---------------------------------------------------------------------------

def _ops_cases() -> list[Case]:
    def do_add(seed):
        rng = _rng(seed, 1)
        y = _rand(rng, 3, 5)
        return _checked(lambda x: tensor_sum(mul_elementwise(
            add(x, y), add(x, y))), _rand(rng, 3, 5))

    def do_add_bias(seed):
        rng = _rng(seed, 2)
        x = _rand(rng, 4, 3)
        b = _rand(rng, 3)
        err = _checked(
            lambda v: tensor_sum(mul_elementwise(add(x, v), add(x, v))), b)
        pos = _rand(rng, 5, 2)
        tok = _rand(rng, 3, 5, 2)
        err2 = _checked(
            lambda v: tensor_sum(mul_elementwise(add(tok, v), add(tok, v))), pos)
        return max(err, err2)

    def do_sub_scale(seed):
        rng = _rng(seed, 3)
        y = _rand(rng, 6)
        return _checked(
            lambda x: tensor_sum(scale(mul_elementwise(sub(x, y), sub(x, y)),
                                       0.7)), _rand(rng, 6))

    def do_mul(seed):
        rng = _rng(seed, 4)
        y = _rand(rng, 2, 7)
        return _checked(
            lambda x: tensor_sum(mul_elementwise(x, mul_elementwise(x, y))),
            _rand(rng, 2, 7))

    def do_matmul(seed):
        rng = _rng(seed, 5)
        b = _rand(rng, 4, 3)
        x = _rand(rng, 5, 4)
        e1 = _checked(lambda v: tensor_sum(
            mul_elementwise(matmul(v, b), matmul(v, b))), x)
        e2 = _checked(lambda v: tensor_sum(
            mul_elementwise(matmul(x, v), matmul(x, v))), b)
        return max(e1, e2)

    def do_matmul_batched(seed):
        rng = _rng(seed, 6)
        a = _rand(rng, 2, 3, 4)
        b = _rand(rng, 2, 4, 3)
        e1 = _checked(lambda v: tensor_sum(matmul(v, b)), a)
        e2 = _checked(lambda v: tensor_sum(matmul(a, v)), b)
        w = _rand(rng, 4, 2)
        e3 = _checked(lambda v: tensor_sum(
            mul_elementwise(matmul(a, v), matmul(a, v))), w)
        return max(e1, e2, e3)

    def do_softmax(seed):
        rng = _rng(seed, 7)
        y = _rand(rng, 3, 6)
        return _checked(lambda x: tensor_sum(
            mul_elementwise(softmax(x, axis=-1), y)), _rand(rng, 3, 6))

    def do_shapes(seed):
        rng = _rng(seed, 8)
        x = _rand(rng, 2, 3, 4)
        w = _rand(rng, 4, 3, 2)

        def f(v):
            y = transpose(reshape(v, (2, 12)), (1, 0))
            y = reshape(y, (4, 3, 2))
            return tensor_sum(mul_elementwise(y, w))
        e1 = _checked(f, x)
        e2 = _checked(lambda v: tensor_sum(mul_elementwise(
            narrow(v, 1, 1, 2), narrow(v, 1, 0, 2))), x)
        e3 = _checked(lambda v: tensor_sum(mul_elementwise(
            expand_batch(v, 3), expand_batch(v, 3))), _rand(rng, 2, 2))
        return max(e1, e2, e3)

    def do_concat_split(seed):
        rng = _rng(seed, 9)
        a = _rand(rng, 2, 3)
        bt = _rand(rng, 2, 2)

        def f(v):
            joined = L.concat([v, bt], axis=1)
            left, right = L.split(joined, [3, 2], axis=1)
            return tensor_sum(mul_elementwise(left, left)) \
                + tensor_sum(mul_elementwise(right, right))
        return _checked(f, a)

    def do_cross_entropy(seed):
        rng = _rng(seed, 10)
        labels = T.one_hot(np.array([0, 2, 1]), 3)
        logits = _rand(rng, 3, 3)
        e1 = _checked(
            lambda v: T.softmax_cross_entropy(v, labels), logits)
        probs = Tensor(rng.uniform(0.1, 0.9, size=(3, 3)))
        e2 = _checked(lambda v: T.cross_entropy(v, labels), probs)
        return max(e1, e2)

    return [
        ("add", "ops", do_add),
        ("add-bias-broadcast", "ops", do_add_bias),
        ("sub-scale", "ops", do_sub_scale),
        ("mul-elementwise", "ops", do_mul),
        ("matmul", "ops", do_matmul),
        ("matmul-batched", "ops", do_matmul_batched),
        ("softmax", "ops", do_softmax),
        ("reshape-transpose-narrow-expand", "ops", do_shapes),
        ("concat-split", "ops", do_concat_split),
        ("cross-entropy", "ops", do_cross_entropy),
    ]


def _layers_cases() -> list[Case]:
    def do_activations(seed):
        rng = _rng(seed, 20)
        x = _rand(rng, 3, 7, away_from_zero=0.05)
        worst = _checked(lambda v: tensor_sum(L.relu(v)), x)
        x6 = Tensor(np.where(np.abs(np.abs(x.data * 3) - 6) < 0.05,
                             x.data * 3 + 0.1, x.data * 3))
        worst = max(worst, _checked(
            lambda v: tensor_sum(L.relu6(v)), x6))
        worst = max(worst, _checked(
            lambda v: tensor_sum(mul_elementwise(L.gelu(v), L.gelu(v))),
            _rand(rng, 3, 7)))
        return worst

    def do_conv(seed):
        rng = _rng(seed, 21)
        x = _rand(rng, 2, 2, 5, 5)
        w = _rand(rng, 3, 2, 3, 3)
        b = _rand(rng, 3)
        worst = 0.0
        for target in (x, w, b):
            worst = max(worst, _checked(
                lambda v: tensor_sum(mul_elementwise(
                    L.conv2d(x, w, b, stride=2, pad=1),
                    L.conv2d(x, w, b, stride=2, pad=1))), target))
        return worst

    def do_depthwise(seed):
        rng = _rng(seed, 22)
        x = _rand(rng, 2, 3, 5, 5)
        w = _rand(rng, 3, 1, 3, 3)
        worst = 0.0
        for target in (x, w):
            worst = max(worst, _checked(
                lambda v: tensor_sum(mul_elementwise(
                    L.depthwise_conv2d(x, w, stride=1, pad=1),
                    L.depthwise_conv2d(x, w, stride=1, pad=1))), target))
        return worst

    def do_pointwise(seed):
        rng = _rng(seed, 23)
        x = _rand(rng, 2, 3, 4, 4)
        w = _rand(rng, 2, 3, 1, 1)
        return _checked(
            lambda v: tensor_sum(mul_elementwise(L.pointwise_conv2d(x, v),
                                                 L.pointwise_conv2d(x, v))), w)

    def do_pools(seed):
        rng = _rng(seed, 24)
        x = _rand(rng, 2, 2, 4, 4)
        e1 = _checked(lambda v: tensor_sum(mul_elementwise(
            L.avg_pool2d(v), L.avg_pool2d(v))), x)
        e2 = _checked(lambda v: tensor_sum(mul_elementwise(
            L.global_average_pool(v), L.global_average_pool(v))), x)
        tok = _rand(rng, 2, 5, 3)
        e3 = _checked(lambda v: tensor_sum(mul_elementwise(
            L.global_average_pool(v), L.global_average_pool(v))), tok)
        return max(e1, e2, e3)

    def do_batchnorm(seed):
        rng = _rng(seed, 25)
        worst = 0.0
        for shape in ((4, 3), (3, 2, 3, 3)):
            bn = L.BatchNorm(shape[1])
            bn.gamma.data = rng.uniform(0.5, 1.5, size=shape[1])
            bn.beta.data = rng.uniform(-0.5, 0.5, size=shape[1])
            x = _rand(rng, *shape)
            for train in (True, False):
                bn.train(train)
                for target in (x, bn.gamma, bn.beta):
                    worst = max(worst, _checked(
                        lambda v: tensor_sum(mul_elementwise(bn(x), bn(x))),
                        target))
        return worst

    def do_layernorm(seed):
        rng = _rng(seed, 26)
        ln = L.LayerNorm(6)
        ln.gamma.data = rng.uniform(0.5, 1.5, size=6)
        x = _rand(rng, 2, 3, 6)
        worst = 0.0
        for target in (x, ln.gamma, ln.beta):
            worst = max(worst, _checked(
                lambda v: tensor_sum(mul_elementwise(ln(x), ln(x))), target))
        return worst

    def do_dense(seed):
        rng = _rng(seed, 27)
        layer = L.Dense(4, 3, rng)
        x = _rand(rng, 5, 4)
        worst = 0.0
        for target in (x, layer.weight, layer.bias):
            worst = max(worst, _checked(
                lambda v: tensor_sum(mul_elementwise(layer(x), layer(x))),
                target))
        return worst

    def do_dropout(seed):
        rng = _rng(seed, 28)
        drop = L.Dropout(0.4, seed=seed)
        drop.train()
        x = _rand(rng, 4, 6)

        def f(v):
            drop.counter = 0  # replay the same mask for every probe
            return tensor_sum(mul_elementwise(drop(v), drop(v)))
        return _checked(f, x)

    def do_attention(seed):
        from .vit import Attention
        rng = _rng(seed, 29)
        attn = Attention(_micro_vit(), rng)
        tok = _rand(rng, 2, 5, 8)
        worst = _checked(lambda v: tensor_sum(attn(v)), tok)
        worst = max(worst, _checked(
            lambda v: tensor_sum(attn(tok)), attn.qkv.weight))
        return worst

    def do_encoder_layer(seed):
        from .vit import EncoderLayer
        rng = _rng(seed, 30)
        cfg = _micro_vit()
        cfg.use_local_mlp = True
        layer = EncoderLayer(cfg, rng)
        tok = _rand(rng, 1, 5, 8)
        worst = _checked(lambda v: tensor_sum(layer(v)), tok)
        for target in (layer.fc1.weight, layer.local.weight):
            worst = max(worst, _checked(
                lambda v: tensor_sum(layer(tok)), target))
        return worst

    def do_patch_embed(seed):
        from .vit import PatchEmbedding, patchify
        rng = _rng(seed, 31)
        pe = PatchEmbedding(_micro_vit(), rng)
        img = _rand(rng, 2, 3, 8, 8)
        worst = _checked(
            lambda v: tensor_sum(mul_elementwise(pe(patchify(v, 4)),
                                                 pe(patchify(v, 4)))), img)
        for target in (pe.projection, pe.class_token, pe.positional):
            worst = max(worst, _checked(
                lambda v: tensor_sum(mul_elementwise(pe(patchify(img, 4)),
                                                     pe(patchify(img, 4)))),
                target))
        return worst

    return [
        ("relu-relu6-gelu", "layers", do_activations),
        ("conv2d", "layers", do_conv),
        ("depthwise-conv2d", "layers", do_depthwise),
        ("pointwise-conv2d", "layers", do_pointwise),
        ("avg-pool-global-pool", "layers", do_pools),
        ("batchnorm", "layers", do_batchnorm),
        ("layernorm", "layers", do_layernorm),
        ("dense-layer", "layers", do_dense),
        ("dropout-fixed-mask", "layers", do_dropout),
        ("attention", "layers", do_attention),
        ("encoder-layer-local-mlp", "layers", do_encoder_layer),
        ("patch-embedding", "layers", do_patch_embed),
    ]


def _backbones_cases() -> list[Case]:
    def do_mobile(seed):
        rng = _rng(seed, 40)
        branch = build_mobile(_micro_mobile(), rng)
        branch.train()
        x = Tensor(rng.uniform(-1, 1, size=(2, 3, 8, 8)))
        worst = _checked(
            lambda v: tensor_sum(branch(v)), x, eps=1e-6)
        worst = max(worst, _checked(
            lambda v: tensor_sum(branch(x)), branch.blocks[0].dw.weight,
            eps=1e-6))
        return worst

    def do_inverted_residual(seed):
        from .mobile import InvertedResidualBlock
        rng = _rng(seed, 41)
        block = InvertedResidualBlock(3, 3, 1, 2, "relu6", rng)
        block.train()
        x = Tensor(rng.uniform(-1, 1, size=(2, 3, 4, 4)))
        worst = _checked(lambda v: tensor_sum(block(v)), x, eps=1e-6)
        worst = max(worst, _checked(
            lambda v: tensor_sum(block(x)), block.project.weight, eps=1e-6))
        return worst

    def do_dense_branch(seed):
        rng = _rng(seed, 42)
        branch = build_dense(_micro_dense(), rng)
        branch.train()
        x = Tensor(rng.uniform(-1, 1, size=(2, 3, 8, 8)))
        worst = _checked(
            lambda v: tensor_sum(branch(v)), x, eps=1e-6)
        worst = max(worst, _checked(
            lambda v: tensor_sum(branch(x)), branch.stem.weight, eps=1e-6))
        return worst

    def do_vit_branch(seed):
        rng = _rng(seed, 43)
        branch = build_vit(_micro_vit(), rng)
        x = Tensor(rng.uniform(-1, 1, size=(1, 3, 8, 8)))
        worst = _checked(lambda v: tensor_sum(branch(v)), x)
        worst = max(worst, _checked(
            lambda v: tensor_sum(branch(x)),
            branch.encoder[1].attn.qkv.weight))
        worst = max(worst, _checked(
            lambda v: tensor_sum(branch(x)), branch.embed.positional))
        return worst

    return [
        ("mobile-branch", "backbones", do_mobile),
        ("inverted-residual-block", "backbones", do_inverted_residual),
        ("dense-branch", "backbones", do_dense_branch),
        ("vit-branch", "backbones", do_vit_branch),
    ]


def _ensemble_cases() -> list[Case]:
    def loss_fn(model, x, labels):
        def f(_):
            model.head.drop.counter = 0
            logits = model.forward_logits(x, "train")
            return T.softmax_cross_entropy(logits, labels)
        return f

    def do_frozen_head(seed):
        model = _micro_ensemble(seed, freeze=True)
        rng = _rng(seed, 50)
        x = Tensor(rng.uniform(0, 1, size=(3, 3, 8, 8)))
        labels = T.one_hot(np.array([0, 1, 0]), 2)
        f = loss_fn(model, x, labels)
        worst = 0.0
        for name, p in model.trainable_parameters():
            worst = max(worst, _checked(f, p, eps=1e-6))
        return worst

    def do_unfrozen(seed):
        model = _micro_ensemble(seed, freeze=False)
        rng = _rng(seed, 51)
        x = Tensor(rng.uniform(0, 1, size=(3, 3, 8, 8)))
        labels = T.one_hot(np.array([1, 0, 1]), 2)
        f = loss_fn(model, x, labels)
        targets = [model.mobile.stem.weight,
                   model.dense.stages[0].layers[0].conv2.weight,
                   model.vit.embed.projection,
                   model.vit.encoder[0].attn.qkv.weight]
        worst = 0.0
        for p in targets:
            worst = max(worst, _checked(f, p, eps=1e-6))
        return worst

    return [
        ("ensemble-head-frozen", "ensemble", do_frozen_head),
        ("ensemble-unfrozen-branches", "ensemble", do_unfrozen),
    ]


def default_cases(scope: str) -> list[Case]:
    if scope not in SCOPES:
        raise ContractError(f"gradcheck scope must be one of {SCOPES}, "
                            f"got {scope!r}")
    cases: list[Case] = []
    if scope in ("ops", "all"):
        cases += _ops_cases()
    if scope in ("layers", "all"):
        cases += _layers_cases()
    if scope in ("backbones", "all"):
        cases += _backbones_cases()
    if scope in ("ensemble", "all"):
        cases += _ensemble_cases()
    return cases


def run_gradcheck(scope: str, seed: int = 0, cases: list[Case] | None = None
                  ) -> list[CaseResult]:
    """Run every case in the scope, returning per-case worst errors."""
    cases = cases if cases is not None else default_cases(scope)
    return [CaseResult(name, case_scope, float(fn(seed)))
            for name, case_scope, fn in cases]


def format_report(results: list[CaseResult],
                  threshold: float = THRESHOLD) -> str:
    lines = []
    for r in results:
        status = "ok" if r.ok(threshold) else "FAIL"
        lines.append(f"{r.name:<34} {r.scope:<10} "
                     f"max_rel_err={r.max_err:.3e}  {status}")
    failures = [r.name for r in results if not r.ok(threshold)]
    if failures:
        lines.append(f"FAILED ({len(failures)}): {', '.join(failures)}")
    else:
        lines.append(f"all {len(results)} gradient checks passed "
                     f"(threshold {threshold:g})")
    return "\n".join(lines)
