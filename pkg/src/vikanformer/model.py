"""
ViKANformer: patchify -> linear embed -> (+cls) -> +pos -> pre-norm
Transformer blocks with KAN feed-forward -> pool -> LayerNorm -> head.
"""
from dataclasses import dataclass, fields, is_dataclass
from typing import Protocol

import numpy as np

from vikanformer.entity import ExpansionConfig, ModelConfig, ModelKind, VARIANTS
from vikanformer.errors import ConfigError, ShapeError
from vikanformer.kan import ExpansionParams, expansion_param_count, init_expansion, kan_ffn
from vikanformer.nn import (
    AttentionParams,
    AttentionStats,
    LayerNormParams,
    LinearParams,
    attention,
    init_attention,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
)
from vikanformer.tensor import Tensor, broadcast_to, concat, parameter


@dataclass
class BlockParams:
    ln1: LayerNormParams
    attn: AttentionParams
    ln2: LayerNormParams
    ffn: ExpansionParams


@dataclass
class ModelParams:
    patch_embed: LinearParams
    pos_embed: Tensor  # [T, d]
    cls_token: Tensor | None  # [d], cls_token pooling only
    blocks: list[BlockParams]
    norm: LayerNormParams
    head: LinearParams


@dataclass
class MlpBaselineParams:
    fc1: LinearParams
    fc2: LinearParams


def named_parameters(params, prefix: str = "") -> dict[str, Tensor]:
    """Flatten a params dataclass tree into ordered `name -> Tensor` (learnable leaves only)."""
    named: dict[str, Tensor] = {}
    if isinstance(params, Tensor):
        if params.requires_grad:
            named[prefix] = params
    elif is_dataclass(params):
        for f in fields(params):
            named.update(named_parameters(getattr(params, f.name), f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(params, (list, tuple)):
        for i, item in enumerate(params):
            named.update(named_parameters(item, f"{prefix}.{i}"))
    return named


def count_params(params) -> int:
    return sum(t.size for t in named_parameters(params).values())


# *** initialization ***
def init_model(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    patch_embed = init_linear(cfg.patch_dim, cfg.d, rng)
    pos_embed = parameter(rng.normal(0.0, 0.02, size=(cfg.n_tokens, cfg.d)))
    cls_token = parameter(rng.normal(0.0, 0.02, size=cfg.d)) if cfg.pooling == "cls_token" else None
    blocks = [
        BlockParams(
            ln1=init_layer_norm(cfg.d),
            attn=init_attention(cfg.d, cfg.heads, rng),
            ln2=init_layer_norm(cfg.d),
            ffn=init_expansion(cfg.ffn, cfg.d, rng),
        )
        for _ in range(cfg.blocks)
    ]
    # head はゼロ初期化: 初期 loss が ln(n_classes) になる
    head = LinearParams(
        weight=parameter(np.zeros((cfg.n_classes, cfg.d))),
        bias=parameter(np.zeros(cfg.n_classes)),
    )
    return ModelParams(patch_embed, pos_embed, cls_token, blocks, init_layer_norm(cfg.d), head)


# *** forward ***
def patchify(img: Tensor, patch_size: int = 7) -> Tensor:
    """
    [H, W] -> [(H/p)*(W/p), p*p] (or batched [B, H, W] -> [B, n_patches, p*p]).
    Patches in row-major patch order, each flattened row-major. Pixels are
    inputs, so the result carries no gradient.
    """
    data = img.data
    if data.ndim not in (2, 3) or data.shape[-1] != data.shape[-2] or data.shape[-1] % patch_size != 0:
        raise ShapeError(f"patchify expects square [H,W] or [B,H,W] divisible by {patch_size}, got {img.shape}")
    batch = data.reshape(-1, *data.shape[-2:])
    b, size = batch.shape[0], batch.shape[-1]
    grid = size // patch_size
    patches = (
        batch.reshape(b, grid, patch_size, grid, patch_size)
        .transpose(0, 1, 3, 2, 4)
        .reshape(b, grid * grid, patch_size * patch_size)
    )
    if data.ndim == 2:
        patches = patches[0]
    return Tensor(patches, dtype=img.dtype)


def forward(params: ModelParams, cfg: ModelConfig, batch_images: Tensor,
            stats: AttentionStats | None = None) -> Tensor:
    """batch_images [B, H, W] -> logits [B, n_classes]."""
    if batch_images.ndim != 3 or batch_images.shape[1:] != (cfg.image_size, cfg.image_size):
        raise ShapeError(f"expected images [B,{cfg.image_size},{cfg.image_size}], got {batch_images.shape}")
    b = batch_images.shape[0]
    x = linear(params.patch_embed, patchify(batch_images, cfg.patch_size))  # [B, 16, d]
    if cfg.pooling == "cls_token":
        cls = broadcast_to(params.cls_token.reshape(1, 1, cfg.d), (b, 1, cfg.d))
        x = concat([cls, x], axis=1)
    x = x + params.pos_embed
    for block in params.blocks:
        x = x + attention(block.attn, layer_norm(x, block.ln1.gamma, block.ln1.beta), cfg.attention, cfg.tile, stats)
        x = x + kan_ffn(cfg.ffn, block.ffn, layer_norm(x, block.ln2.gamma, block.ln2.beta))
    pooled = x[:, 0, :] if cfg.pooling == "cls_token" else x.mean(axis=1)
    pooled = layer_norm(pooled, params.norm.gamma, params.norm.beta)
    return linear(params.head, pooled)


def base_param_count(cfg: ModelConfig) -> int:
    """Parameters outside the feed-forward blocks."""
    d = cfg.d
    count = cfg.patch_dim * d + d + cfg.n_tokens * d
    count += d if cfg.pooling == "cls_token" else 0
    count += cfg.blocks * (2 * 2 * d + 4 * d * d)
    count += 2 * d + d * cfg.n_classes + cfg.n_classes
    return count


def expected_param_count(cfg: ModelConfig) -> int:
    return base_param_count(cfg) + cfg.blocks * expansion_param_count(cfg.ffn, cfg.d)


# *** MLP baseline (flattened pixels, one hidden layer) ***
def init_mlp_baseline(cfg: ModelConfig, seed: int, hidden: int = 128) -> MlpBaselineParams:
    rng = np.random.default_rng(seed)
    pixels = cfg.image_size * cfg.image_size
    return MlpBaselineParams(fc1=init_linear(pixels, hidden, rng), fc2=init_linear(hidden, cfg.n_classes, rng))


def forward_mlp_baseline(params: MlpBaselineParams, batch_images: Tensor) -> Tensor:
    b = batch_images.shape[0]
    flat = batch_images.reshape(b, -1)
    return linear(params.fc2, linear(params.fc1, flat).relu())


# *** classifier wrappers ***
class Classifier(Protocol):
    kind: ModelKind
    config: ModelConfig

    def __call__(self, images: Tensor) -> Tensor: ...

    def parameters(self) -> dict[str, Tensor]: ...

    @property
    def label(self) -> str: ...


@dataclass
class ViKANformer:
    config: ModelConfig
    params: ModelParams
    stats: AttentionStats | None = None
    kind: ModelKind = "vit"

    @classmethod
    def create(cls, config: ModelConfig, seed: int | None = None) -> "ViKANformer":
        seed = config.ffn.seed if seed is None else seed
        return cls(config, init_model(config, seed))

    def __call__(self, images: Tensor) -> Tensor:
        return forward(self.params, self.config, images, self.stats)

    def parameters(self) -> dict[str, Tensor]:
        return named_parameters(self.params)

    @property
    def label(self) -> str:
        return variant_label(self.config)


@dataclass
class MlpBaseline:
    config: ModelConfig
    params: MlpBaselineParams
    hidden: int = 128
    kind: ModelKind = "mlp-baseline"

    @classmethod
    def create(cls, config: ModelConfig, seed: int | None = None, hidden: int = 128) -> "MlpBaseline":
        seed = config.ffn.seed if seed is None else seed
        return cls(config, init_mlp_baseline(config, seed, hidden), hidden)

    def __call__(self, images: Tensor) -> Tensor:
        return forward_mlp_baseline(self.params, images)

    def parameters(self) -> dict[str, Tensor]:
        return named_parameters(self.params)

    @property
    def label(self) -> str:
        return "mlp-baseline"


def build_model(kind: ModelKind, config: ModelConfig, seed: int | None = None, hidden: int = 128) -> Classifier:
    """seed=None falls back to config.ffn.seed."""
    if kind == "vit":
        return ViKANformer.create(config, seed)
    if kind == "mlp-baseline":
        return MlpBaseline.create(config, seed, hidden)
    raise ConfigError(f"unknown model kind {kind!r}")


# *** named presets ***
@dataclass
class Preset:
    ffn: str
    attention: str


def _presets() -> dict[str, Preset]:
    presets = {v: Preset(v, "naive") for v in VARIANTS}
    presets["flash-vit"] = Preset("mlp", "tiled")
    presets.update({f"flashkan-{v}": Preset(v, "tiled") for v in VARIANTS if v != "mlp"})
    return presets


PRESETS: dict[str, Preset] = _presets()


def resolve_preset(name: str, base: ModelConfig | None = None, **ffn_overrides) -> ModelConfig:
    """Variant name or flash preset -> ModelConfig at the reference configuration."""
    if name not in PRESETS:
        raise ConfigError(f"unknown variant {name!r}, expected one of {sorted(PRESETS)}")
    preset = PRESETS[name]
    base = base or ModelConfig()
    ffn = ExpansionConfig(**{**base.ffn.__dict__, "variant": preset.ffn, **ffn_overrides})
    return ModelConfig(**{**base.__dict__, "ffn": ffn, "attention": preset.attention})


def variant_label(cfg: ModelConfig) -> str:
    if cfg.attention == "tiled":
        return "flash-vit" if cfg.ffn.variant == "mlp" else f"flashkan-{cfg.ffn.variant}"
    return cfg.ffn.variant
