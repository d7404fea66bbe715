import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from vikanformer.entity import VARIANTS, ExpansionConfig, ModelConfig
from vikanformer.errors import ConfigError, ShapeError
from vikanformer.model import (
    PRESETS,
    MlpBaseline,
    ViKANformer,
    build_model,
    count_params,
    expected_param_count,
    named_parameters,
    patchify,
    resolve_preset,
    variant_label,
)
from vikanformer.nn import AttentionStats
from vikanformer.tensor import Tensor
from vikanformer.train import cross_entropy


def test_patchify_order():
    img = np.arange(28 * 28, dtype=np.float64).reshape(28, 28)
    patches = patchify(Tensor(img)).data
    assert patches.shape == (16, 49)
    assert_array_equal(patches[0], img[0:7, 0:7].reshape(-1))
    assert_array_equal(patches[1], img[0:7, 7:14].reshape(-1))
    assert_array_equal(patches[4], img[7:14, 0:7].reshape(-1))
    assert_array_equal(patches[15], img[21:28, 21:28].reshape(-1))


def test_patchify_batched(rng):
    imgs = rng.normal(size=(3, 28, 28))
    batched = patchify(Tensor(imgs)).data
    assert batched.shape == (3, 16, 49)
    assert_array_equal(batched[2], patchify(Tensor(imgs[2])).data)


def test_patchify_rejects_bad_sizes():
    with pytest.raises(ShapeError):
        patchify(Tensor(np.zeros((27, 27))))
    with pytest.raises(ShapeError):
        patchify(Tensor(np.zeros(28)))


@pytest.mark.parametrize("name", list(PRESETS))
def test_forward_shape_and_param_count(name, rng):
    config = resolve_preset(name)
    model = ViKANformer.create(config, seed=7)
    logits = model(Tensor(rng.normal(size=(3, 28, 28))))
    assert logits.shape == (3, 10)
    assert count_params(model.params) == expected_param_count(config)


@pytest.mark.parametrize("variant", VARIANTS)
def test_initial_loss_is_ln10(variant, rng):
    model = ViKANformer.create(resolve_preset(variant), seed=7)
    loss = cross_entropy(model(Tensor(rng.normal(size=(8, 28, 28)))), rng.integers(0, 10, size=8))
    assert abs(loss.item() - math.log(10)) < 1e-12


def test_flash_preset_matches_naive_forward(rng):
    images = Tensor(rng.normal(size=(2, 28, 28)))
    naive = ViKANformer.create(resolve_preset("sinekan"), seed=3)
    flash = ViKANformer.create(resolve_preset("flashkan-sinekan"), seed=3)
    # head をゼロ以外にして logits を比較できるようにする
    head = rng.normal(size=naive.params.head.weight.shape)
    naive.params.head.weight.data[...] = head
    flash.params.head.weight.data[...] = head
    assert_allclose(flash(images).data, naive(images).data, rtol=0, atol=1e-10)


def test_presets():
    flash_vit = resolve_preset("flash-vit")
    assert (flash_vit.ffn.variant, flash_vit.attention) == ("mlp", "tiled")
    fast = resolve_preset("flashkan-fastkan")
    assert (fast.ffn.variant, fast.attention) == ("fastkan", "tiled")
    assert resolve_preset("sinekan").attention == "naive"
    assert set(VARIANTS) <= set(PRESETS)
    with pytest.raises(ConfigError):
        resolve_preset("flashkan-mlp")


def test_preset_overrides_keep_reference_sizes():
    config = resolve_preset("sinekan", M=4)
    assert config.ffn.M == 4
    assert (config.patch_size, config.d, config.blocks, config.heads) == (7, 8, 2, 2)


@pytest.mark.parametrize("name", list(PRESETS))
def test_variant_label_roundtrip(name):
    assert variant_label(resolve_preset(name)) == name


def test_named_parameters():
    model = ViKANformer.create(resolve_preset("sinekan"), seed=0)
    names = list(model.parameters())
    assert len(names) == len(set(names))
    assert names[0] == "patch_embed.weight"
    assert "blocks.1.ffn.phi.alpha" in names
    assert "blocks.0.attn.w_q.1" in names
    assert "head.bias" in names
    # 固定の knot grid は学習対象ではない
    spline = ViKANformer.create(resolve_preset("vanillakan"), seed=0)
    assert not any(name.endswith("grid") for name in spline.parameters())


def test_same_seed_same_parameters():
    a = ViKANformer.create(resolve_preset("fastkan"), seed=11).parameters()
    b = ViKANformer.create(resolve_preset("fastkan"), seed=11).parameters()
    for name in a:
        assert_array_equal(a[name].data, b[name].data)


def test_mean_pooling(rng):
    config = ModelConfig(pooling="mean", ffn=ExpansionConfig(variant="fourierkan"))
    model = ViKANformer.create(config, seed=0)
    assert config.n_tokens == 16
    assert model.params.cls_token is None
    assert model(Tensor(rng.normal(size=(2, 28, 28)))).shape == (2, 10)
    assert count_params(model.params) == expected_param_count(config)


def test_attention_stats_are_recorded(rng):
    model = ViKANformer.create(resolve_preset("flash-vit"), seed=0)
    model.stats = AttentionStats()
    model(Tensor(rng.normal(size=(1, 28, 28))))
    assert model.stats.peak_score_elements == 17 * 4


def test_forward_rejects_wrong_image_size(rng):
    model = ViKANformer.create(resolve_preset("sinekan"), seed=0)
    with pytest.raises(ShapeError):
        model(Tensor(rng.normal(size=(2, 14, 14))))


def test_mlp_baseline(rng):
    model = build_model("mlp-baseline", ModelConfig(), seed=0)
    assert isinstance(model, MlpBaseline)
    assert count_params(model.params) == 784 * 128 + 128 + 128 * 10 + 10
    assert model(Tensor(rng.normal(size=(4, 28, 28)))).shape == (4, 10)
    assert model.label == "mlp-baseline"


def test_build_model_kinds():
    assert isinstance(build_model("vit", ModelConfig(), seed=0), ViKANformer)
    with pytest.raises(ConfigError):
        build_model("resnet", ModelConfig(), seed=0)


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(patch_size=5)
    with pytest.raises(ConfigError):
        ModelConfig(heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(attention="flash")
    config = ModelConfig.from_dict(ModelConfig(ffn=ExpansionConfig(variant="fastkan")).to_dict())
    assert config.ffn.variant == "fastkan"
    assert config.ffn.grid_range == (-2.0, 2.0)
    assert named_parameters(None) == {}


def _with_random_head(model: ViKANformer, rng) -> ViKANformer:
    # 初期 head はゼロなので logits を比較できるよう乱数で埋める
    model.params.head.weight.data[...] = rng.normal(size=model.params.head.weight.shape)
    model.params.head.bias.data[...] = rng.normal(size=model.params.head.bias.shape)
    return model


@pytest.mark.parametrize("variant", VARIANTS)
def test_permuting_batch_permutes_logits(variant, rng):
    model = _with_random_head(ViKANformer.create(resolve_preset(variant), seed=7), rng)
    images = rng.uniform(0.0, 1.0, size=(6, 28, 28))
    perm = rng.permutation(6)
    logits = model(Tensor(images)).data
    assert_allclose(model(Tensor(images[perm])).data, logits[perm], rtol=0, atol=1e-12)


@pytest.mark.parametrize("variant", VARIANTS)
def test_identical_images_give_identical_rows(variant, rng):
    model = _with_random_head(ViKANformer.create(resolve_preset(variant), seed=7), rng)
    image = rng.uniform(0.0, 1.0, size=(28, 28))
    logits = model(Tensor(np.stack([image] * 4))).data
    for row in logits[1:]:
        assert_allclose(row, logits[0], rtol=0, atol=1e-12)


@pytest.mark.parametrize("variant", VARIANTS)
def test_logits_stay_finite_on_unit_range_inputs(variant):
    rng = np.random.default_rng(1)
    model = _with_random_head(ViKANformer.create(resolve_preset(variant), seed=7), rng)
    for _ in range(100):
        logits = model(Tensor(rng.uniform(0.0, 1.0, size=(2, 28, 28)))).data
        assert np.all(np.isfinite(logits))


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("tile", [1, 2, 3, 17])
def test_tiled_attention_matches_naive_for_any_tile(variant, tile, rng):
    flash_name = "flash-vit" if variant == "mlp" else f"flashkan-{variant}"
    naive = _with_random_head(ViKANformer.create(resolve_preset(variant), seed=5), rng)
    tiled = ViKANformer.create(resolve_preset(flash_name, ModelConfig(tile=tile)), seed=5)
    tiled.params.head = naive.params.head
    images = Tensor(rng.uniform(0.0, 1.0, size=(3, 28, 28)))
    assert tiled.config.attention == "tiled"
    assert np.max(np.abs(tiled(images).data - naive(images).data)) < 1e-8


def test_create_defaults_to_expansion_seed():
    config = resolve_preset("fastkan", seed=11)
    implicit = ViKANformer.create(config).parameters()
    explicit = ViKANformer.create(config, seed=11).parameters()
    other = ViKANformer.create(config, seed=12).parameters()
    for name in implicit:
        assert_array_equal(implicit[name].data, explicit[name].data)
    assert not np.array_equal(implicit["patch_embed.weight"].data, other["patch_embed.weight"].data)
    baseline = build_model("mlp-baseline", config, hidden=4)
    assert_array_equal(baseline.parameters()["fc1.weight"].data,
                       MlpBaseline.create(config, seed=11, hidden=4).parameters()["fc1.weight"].data)
