import pytest

from vikanformer.bench import BENCH_COLUMNS, attention_storage, bench_variants, time_ffn
from vikanformer.entity import VARIANTS, ExpansionConfig


@pytest.fixture(scope="module")
def ffn_costs():
    return {v: time_ffn(ExpansionConfig(variant=v), d=8, rows=4096, repeats=7, warmup=2) for v in VARIANTS}


def test_mlp_feed_forward_is_cheapest(ffn_costs):
    assert min(ffn_costs, key=ffn_costs.get) == "mlp"


def test_efficientkan_feed_forward_is_dearest(ffn_costs):
    assert max(ffn_costs, key=ffn_costs.get) == "efficientkan"


def test_vanilla_local_form_is_cheaper_than_basis_matrix(ffn_costs):
    assert ffn_costs["vanillakan"] < ffn_costs["efficientkan"]


def test_bench_table_columns():
    table = bench_variants(["mlp", "flashkan-fastkan"], batch_size=2, repeats=1, warmup=0, rows=64)
    assert tuple(table.columns) == BENCH_COLUMNS
    assert table["variant"].tolist() == ["mlp", "flashkan-fastkan"]
    assert (table[["us_per_batch", "ffn_us"]] > 0).all().all()


def test_attention_storage_counts_blocks():
    storage = attention_storage(tokens=17, tile=4)
    assert storage["naive"] == {"peak_score_elements": 17 * 17, "blocks": 2}
    # 2 heads x ceil(17 / 4) key tiles
    assert storage["tiled"] == {"peak_score_elements": 17 * 4, "blocks": 2 * 5}
