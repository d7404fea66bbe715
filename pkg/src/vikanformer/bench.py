"""
Relative cost of the feed-forward variants: forward + backward time per batch
at the reference model size, the same for the feed-forward block on its own,
plus the attention score-storage counters.
"""
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import pandas as pd
from loguru import logger

from vikanformer.entity import ExpansionConfig, ModelConfig
from vikanformer.kan import init_expansion, kan_ffn
from vikanformer.model import ViKANformer, count_params, expected_param_count, named_parameters, resolve_preset
from vikanformer.nn import AttentionStats, attention, init_attention
from vikanformer.tensor import Tensor, parameter, zero_grads
from vikanformer.train import cross_entropy


@dataclass
class BenchRecord:
    variant: str
    us_per_batch: float
    ffn_us: float
    params: int


BENCH_COLUMNS = ("variant", "us_per_batch", "ffn_us", "params")


def median_us(step: Callable[[], None], repeats: int, warmup: int) -> float:
    samples = []
    for i in range(warmup + repeats):
        start = time.perf_counter()
        step()
        elapsed = time.perf_counter() - start
        if i >= warmup:
            samples.append(elapsed)
    return float(np.median(samples)) * 1e6


def time_ffn(cfg: ExpansionConfig, d: int = 8, rows: int = 2048, repeats: int = 5, warmup: int = 1,
             seed: int = 0) -> float:
    """Median forward + backward time of one feed-forward block on [rows, d]."""
    rng = np.random.default_rng(seed)
    ffn = init_expansion(cfg, d, rng)
    x = parameter(rng.normal(size=(rows, d)))
    tensors = [x, *named_parameters(ffn).values()]

    def step():
        zero_grads(tensors)
        kan_ffn(cfg, ffn, x).sum().backward()

    return median_us(step, repeats, warmup)


def time_variant(name: str, batch_size: int = 128, repeats: int = 5, warmup: int = 1, seed: int = 0,
                 base: ModelConfig | None = None, rows: int = 2048) -> BenchRecord:
    """
    Median wall time of one forward + backward pass over a random batch. The
    whole-model figure includes patch embedding, attention and head, which all
    variants share; ffn_us isolates the feed-forward block.
    """
    config = resolve_preset(name, base)
    model = ViKANformer.create(config, seed)
    if count_params(model.params) != expected_param_count(config):
        logger.warning(f"{name}: counted {count_params(model.params)} params, closed form says {expected_param_count(config)}")
    rng = np.random.default_rng(seed)
    images = Tensor(rng.normal(size=(batch_size, config.image_size, config.image_size)))
    labels = rng.integers(0, config.n_classes, size=batch_size)
    params = model.parameters()

    def step():
        zero_grads(params.values())
        cross_entropy(model(images), labels).backward()

    us = median_us(step, repeats, warmup)
    ffn_us = time_ffn(config.ffn, config.d, rows, repeats, warmup, seed)
    logger.info(f"{name}: {us:.0f} us/batch, ffn {ffn_us:.0f} us (batch={batch_size}, rows={rows}, repeats={repeats})")
    return BenchRecord(model.label, us, ffn_us, count_params(model.params))


def bench_variants(names: list[str], batch_size: int = 128, repeats: int = 5, warmup: int = 1,
                   seed: int = 0, rows: int = 2048) -> pd.DataFrame:
    records = [time_variant(name, batch_size, repeats, warmup, seed, rows=rows) for name in names]
    return pd.DataFrame([asdict(r) for r in records], columns=list(BENCH_COLUMNS))


def attention_storage(tokens: int = 17, d: int = 8, heads: int = 2, tile: int = 4, seed: int = 0) -> dict:
    """Peak score-block size of naive vs tiled attention on one [tokens, d] sequence."""
    rng = np.random.default_rng(seed)
    p = init_attention(d, heads, rng)
    x = Tensor(rng.normal(size=(tokens, d)))
    counters = {}
    for mode in ("naive", "tiled"):
        stats = AttentionStats()
        attention(p, x, mode, tile, stats)
        counters[mode] = {"peak_score_elements": stats.peak_score_elements, "blocks": stats.blocks}
    return {"tokens": tokens, "d": d, "heads": heads, "tile": tile, **counters}
