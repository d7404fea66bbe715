"""
Finite-difference verification of the autograd engine.

Relative error per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|)
with central differences (f(x+h) - f(x-h)) / 2h. NaN anywhere propagates into
the reported error and fails the check.
"""
from dataclasses import dataclass
from typing import Callable

import numpy as np
from loguru import logger

from vikanformer.entity import VARIANTS, ExpansionConfig, ModelConfig
from vikanformer.errors import AutogradError, PrecisionError
from vikanformer.kan import init_expansion, kan_ffn
from vikanformer.model import ViKANformer, named_parameters
from vikanformer.nn import (
    attention_naive,
    attention_tiled,
    init_attention,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
    softmax,
)
from vikanformer.tensor import (
    Precision,
    Tensor,
    bmm,
    broadcast_to,
    concat,
    elementwise,
    matmul,
    no_grad,
    parameter,
    reduce,
    using_precision,
    zero_grads,
)
from vikanformer.train import cross_entropy

DEFAULT_TOLERANCE = 1e-4

LossFn = Callable[[], Tensor]


def _relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return np.abs(analytic - numeric) / scale


def _worst(errors: np.ndarray) -> float:
    if errors.size == 0:
        return 0.0
    if np.isnan(errors).any():
        return float("nan")
    return float(errors.max())


def grad_check_many(loss_fn: LossFn, named: dict[str, Tensor], h: float = 1e-5) -> dict[str, float]:
    """Worst relative error per named leaf tensor of `loss_fn()`."""
    for name, t in named.items():
        if t.dtype != np.float64:
            raise PrecisionError(f"gradient checks run in F64, {name} is {t.dtype}")
        if not t.is_leaf:
            raise AutogradError(f"{name} is not a leaf tensor")

    zero_grads(named.values())
    loss = loss_fn()
    if loss.size != 1:
        raise AutogradError(f"gradient check needs a scalar function, got shape {loss.shape}")
    if loss.requires_grad:
        loss.backward()
    analytic = {name: np.zeros_like(t.data) if t.grad is None else t.grad.copy() for name, t in named.items()}

    errors = {}
    with no_grad():
        for name, t in named.items():
            numeric = np.zeros_like(t.data)
            for idx in np.ndindex(t.shape):
                original = t.data[idx]
                t.data[idx] = original + h
                plus = loss_fn().item()
                t.data[idx] = original - h
                minus = loss_fn().item()
                t.data[idx] = original
                numeric[idx] = (plus - minus) / (2.0 * h)
            errors[name] = _worst(_relative_errors(analytic[name], numeric))
    zero_grads(named.values())
    return errors


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    x.requires_grad = True
    return grad_check_many(lambda: f(x), {"x": x}, h)["x"]


def worst_of(errors: dict[str, float]) -> tuple[str, float]:
    """(name, error) of the worst entry; NaN beats everything."""
    worst_name, worst = "", 0.0
    for name, err in errors.items():
        if np.isnan(err):
            return name, err
        if err >= worst:
            worst_name, worst = name, err
    return worst_name, worst


# *** suite ***
@dataclass
class GradCheckCase:
    name: str
    build: Callable[[], tuple[LossFn, dict[str, Tensor]]]


@dataclass
class GradCheckResult:
    name: str
    error: float
    worst_tensor: str
    passed: bool


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    """sum(out * R) with a fixed random R, so the upstream gradient is not uniform."""
    return (out * rng.normal(size=out.shape)).sum()


def _away_from_zero(rng: np.random.Generator, shape, low: float = 0.2, high: float = 1.5) -> np.ndarray:
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def rng_weights(seed: int) -> np.random.Generator:
    # 毎回同じ重みを使うため generator を作り直す
    return np.random.default_rng(seed + 1000)


def _unary_case(op: str, data: Callable[[np.random.Generator], np.ndarray], seed: int) -> GradCheckCase:
    def build():
        rng = np.random.default_rng(seed)
        a = parameter(data(rng))
        return (lambda: _weighted(elementwise(op, a), rng_weights(seed))), {"a": a}
    return GradCheckCase(f"elementwise:{op}", build)


def _binary_case(op: str, seed: int) -> GradCheckCase:
    def build():
        rng = np.random.default_rng(seed)
        a = parameter(rng.normal(size=(2, 3)))
        b = parameter(_away_from_zero(rng, (1, 3)) if op == "div" else rng.normal(size=(1, 3)))
        return (lambda: _weighted(elementwise(op, a, b), rng_weights(seed))), {"a": a, "b": b}
    return GradCheckCase(f"elementwise:{op}", build)


def _pow_case(exponent: float, seed: int) -> GradCheckCase:
    def build():
        rng = np.random.default_rng(seed)
        a = parameter(rng.uniform(0.5, 2.0, size=(2, 3)))
        return (lambda: _weighted(a**exponent, rng_weights(seed))), {"a": a}
    return GradCheckCase(f"elementwise:pow_scalar({exponent:g})", build)


def op_cases(seed: int = 0) -> list[GradCheckCase]:
    normal = lambda rng: rng.normal(size=(2, 3))  # noqa: E731
    positive = lambda rng: rng.uniform(0.3, 2.0, size=(2, 3))  # noqa: E731
    kinked = lambda rng: _away_from_zero(rng, (2, 3))  # noqa: E731
    cases = [_binary_case(op, seed) for op in ("add", "sub", "mul", "div")]
    cases += [_unary_case(op, normal, seed) for op in ("neg", "sin", "cos", "exp", "tanh", "silu", "gelu")]
    cases += [_unary_case("log", positive, seed), _unary_case("relu", kinked, seed)]
    cases += [_pow_case(3.0, seed), _pow_case(-0.5, seed)]

    def matmul_build():
        rng = np.random.default_rng(seed)
        a, b = parameter(rng.normal(size=(3, 4))), parameter(rng.normal(size=(4, 2)))
        return (lambda: _weighted(matmul(a, b), rng_weights(seed))), {"a": a, "b": b}

    def bmm_build():
        rng = np.random.default_rng(seed)
        a, b = parameter(rng.normal(size=(2, 3, 4))), parameter(rng.normal(size=(2, 4, 2)))
        return (lambda: _weighted(bmm(a, b), rng_weights(seed))), {"a": a, "b": b}

    cases += [GradCheckCase("matmul", matmul_build), GradCheckCase("bmm", bmm_build)]

    def reduce_build(op: str, axis: int | None, keepdims: bool):
        def build():
            rng = np.random.default_rng(seed)
            # 値を十分離して max の argmax が摂動で入れ替わらないように
            data = rng.permutation(12).reshape(3, 4) * 0.25 + rng.uniform(0.0, 0.01, size=(3, 4))
            a = parameter(data)
            return (lambda: _weighted(reduce(op, a, axis, keepdims), rng_weights(seed))), {"a": a}
        return build

    for op in ("sum", "mean", "max"):
        cases.append(GradCheckCase(f"reduce:{op}", reduce_build(op, None, False)))
        cases.append(GradCheckCase(f"reduce:{op}(axis=1)", reduce_build(op, 1, False)))
        cases.append(GradCheckCase(f"reduce:{op}(axis=0,keepdims)", reduce_build(op, 0, True)))

    def movement_build(kind: str):
        def build():
            rng = np.random.default_rng(seed)
            a = parameter(rng.normal(size=(2, 3, 4)))
            b = parameter(rng.normal(size=(2, 1, 4)))
            fns = {
                "reshape": lambda: a.reshape(6, 4),
                "transpose": lambda: a.transpose((2, 0, 1)),
                "index": lambda: a[:, np.array([0, 2, 0]), 1:],
                "concat": lambda: concat([a, b], axis=1),
                "broadcast_to": lambda: broadcast_to(b, (2, 3, 4)),
            }
            uses = {"concat": ("a", "b"), "broadcast_to": ("b",)}.get(kind, ("a",))
            named = {name: t for name, t in (("a", a), ("b", b)) if name in uses}
            return (lambda: _weighted(fns[kind](), rng_weights(seed))), named
        return build

    cases += [
        GradCheckCase(f"movement:{kind}", movement_build(kind))
        for kind in ("reshape", "transpose", "index", "concat", "broadcast_to")
    ]
    return cases


def layer_cases(seed: int = 0) -> list[GradCheckCase]:
    def softmax_build():
        rng = np.random.default_rng(seed)
        x = parameter(rng.normal(size=(3, 5)))
        return (lambda: _weighted(softmax(x, axis=-1), rng_weights(seed))), {"x": x}

    def layer_norm_build():
        rng = np.random.default_rng(seed)
        x = parameter(rng.normal(size=(3, 6)))
        p = init_layer_norm(6)
        p.gamma.data[...] = rng.normal(size=6)
        p.beta.data[...] = rng.normal(size=6)
        return (lambda: _weighted(layer_norm(x, p.gamma, p.beta), rng_weights(seed))), {
            "x": x, "gamma": p.gamma, "beta": p.beta
        }

    def linear_build():
        rng = np.random.default_rng(seed)
        x = parameter(rng.normal(size=(3, 4)))
        p = init_linear(4, 5, rng)
        p.bias.data[...] = rng.normal(size=5)
        return (lambda: _weighted(linear(p, x), rng_weights(seed))), {"x": x, **named_parameters(p)}

    def cross_entropy_build():
        rng = np.random.default_rng(seed)
        logits = parameter(rng.normal(size=(4, 5)))
        labels = np.array([0, 3, 4, 3])
        return (lambda: cross_entropy(logits, labels)), {"logits": logits}

    def attention_build(tile: int | None, t: int = 5):
        def build():
            rng = np.random.default_rng(seed)
            x = parameter(rng.normal(size=(t, 4)))
            p = init_attention(4, 2, rng)
            if tile is None:
                fn = lambda: attention_naive(p, x)  # noqa: E731
            else:
                fn = lambda: attention_tiled(p, x, tile)  # noqa: E731
            return (lambda: _weighted(fn(), rng_weights(seed))), {"x": x, **named_parameters(p)}
        return build

    return [
        GradCheckCase("softmax", softmax_build),
        GradCheckCase("layer_norm", layer_norm_build),
        GradCheckCase("linear", linear_build),
        GradCheckCase("cross_entropy", cross_entropy_build),
        GradCheckCase("attention_naive", attention_build(None)),
        *[GradCheckCase(f"attention_tiled(tile={tile})", attention_build(tile)) for tile in (1, 2, 3, 5)],
    ]


def tiny_expansion(variant: str) -> ExpansionConfig:
    return ExpansionConfig(variant=variant, M=3, centers=3, knots=4, order=3, hidden=6)


def tiny_model_config(variant: str, attention: str = "naive") -> ModelConfig:
    return ModelConfig(
        image_size=8, patch_size=4, d=4, blocks=1, heads=2, n_classes=3,
        ffn=tiny_expansion(variant), attention=attention, tile=2,
    )


def ffn_cases(seed: int = 0) -> list[GradCheckCase]:
    def build_for(variant: str):
        def build():
            rng = np.random.default_rng(seed)
            cfg = tiny_expansion(variant)
            params = init_expansion(cfg, 4, rng)
            x = parameter(rng.uniform(-1.5, 1.5, size=(3, 4)))
            return (lambda: _weighted(kan_ffn(cfg, params, x), rng_weights(seed))), {
                "x": x, **named_parameters(params, "ffn")
            }
        return build

    return [GradCheckCase(f"kan_ffn:{v}", build_for(v)) for v in VARIANTS]


def model_cases(seed: int = 0) -> list[GradCheckCase]:
    def build_for(variant: str, attention: str):
        def build():
            rng = np.random.default_rng(seed)
            model = ViKANformer.create(tiny_model_config(variant, attention), seed)
            # head がゼロだと上流の勾配が全部 0 になり検査にならない
            model.params.head.weight.data[...] = rng.normal(size=model.params.head.weight.shape)
            images = Tensor(rng.normal(size=(2, 8, 8)))
            labels = np.array([0, 2])
            return (lambda: cross_entropy(model(images), labels)), model.parameters()
        return build

    cases = [GradCheckCase(f"model:{v}", build_for(v, "naive")) for v in VARIANTS]
    cases.append(GradCheckCase("model:flash-vit", build_for("mlp", "tiled")))
    cases.append(GradCheckCase("model:flashkan-sinekan", build_for("sinekan", "tiled")))
    return cases


def default_suite(only: list[str] | None = None, seed: int = 0) -> list[GradCheckCase]:
    cases = op_cases(seed) + layer_cases(seed) + ffn_cases(seed) + model_cases(seed)
    if only:
        cases = [c for c in cases if any(key in c.name for key in only)]
    return cases


def run_case(case: GradCheckCase, h: float = 1e-5, tolerance: float = DEFAULT_TOLERANCE) -> GradCheckResult:
    with using_precision(Precision.F64):
        loss_fn, named = case.build()
        errors = grad_check_many(loss_fn, named, h)
    worst_tensor, error = worst_of(errors)
    passed = bool(error < tolerance)
    return GradCheckResult(case.name, error, worst_tensor, passed)


def run_suite(cases: list[GradCheckCase], h: float = 1e-5,
              tolerance: float = DEFAULT_TOLERANCE) -> list[GradCheckResult]:
    results = []
    for case in cases:
        result = run_case(case, h, tolerance)
        log = logger.debug if result.passed else logger.error
        log(f"{case.name}: worst={result.error:.3e} ({result.worst_tensor})")
        results.append(result)
    return results
