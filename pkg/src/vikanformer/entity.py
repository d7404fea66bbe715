from pathlib import Path
from dataclasses import dataclass, field, asdict, fields
from typing import Literal, get_args

import pandas as pd
from loguru import logger

from vikanformer.errors import ConfigError


# 型エイリアス: feed-forward の種類
Variant = Literal["vanillakan", "sinekan", "fourierkan", "fastkan", "efficientkan", "mlp"]
VARIANTS: tuple[str, ...] = get_args(Variant)

AttentionMode = Literal["naive", "tiled"]
Pooling = Literal["cls_token", "mean"]
ModelKind = Literal["vit", "mlp-baseline"]


@dataclass
class ExpansionConfig:
    variant: Variant = "sinekan"
    M: int = 8  # frequencies / harmonics per dimension
    centers: int = 5  # RBF centers per dimension
    knots: int = 6  # uniform knot points inside grid_range
    order: int = 3  # spline polynomial degree
    grid_range: tuple[float, float] = (-2.0, 2.0)
    hidden: int = 8  # MLP variant hidden width
    hidden_multiplier: int = 1
    seed: int = 0  # init seed when the model builder is not given one

    def __post_init__(self):
        self.grid_range = tuple(float(v) for v in self.grid_range)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.M < 1:
            raise ConfigError(f"M must be >= 1, got {self.M}")
        if self.centers < 1:
            raise ConfigError(f"centers must be >= 1, got {self.centers}")
        if self.order < 1:
            raise ConfigError(f"order must be >= 1, got {self.order}")
        if self.knots < self.order + 1:
            raise ConfigError(f"knots={self.knots} too few for order={self.order} (need >= order + 1)")
        lo, hi = self.grid_range
        if not lo < hi:
            raise ConfigError(f"grid_range must satisfy lo < hi, got {self.grid_range}")
        if self.hidden < 1 or self.hidden_multiplier < 1:
            raise ConfigError(f"{self.hidden=} and {self.hidden_multiplier=} must be positive")

    @property
    def n_basis(self) -> int:
        """B-spline basis functions per dimension."""
        return self.knots + self.order - 1

    @classmethod
    def from_dict(cls, data: dict) -> "ExpansionConfig":
        return cls(**data)


@dataclass
class ModelConfig:
    image_size: int = 28
    patch_size: int = 7
    d: int = 8
    blocks: int = 2
    heads: int = 2
    n_classes: int = 10
    ffn: ExpansionConfig = field(default_factory=ExpansionConfig)
    attention: AttentionMode = "naive"
    tile: int = 4
    pooling: Pooling = "cls_token"

    def __post_init__(self):
        if isinstance(self.ffn, dict):
            self.ffn = ExpansionConfig.from_dict(self.ffn)
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"patch_size={self.patch_size} does not divide image_size={self.image_size}")
        if self.d % self.heads != 0:
            raise ConfigError(f"heads={self.heads} does not divide d={self.d}")
        if self.attention not in get_args(AttentionMode):
            raise ConfigError(f"unknown attention mode {self.attention!r}")
        if self.pooling not in get_args(Pooling):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.tile < 1:
            raise ConfigError(f"tile must be >= 1, got {self.tile}")
        if self.blocks < 1 or self.n_classes < 2:
            raise ConfigError(f"{self.blocks=} must be >= 1 and {self.n_classes=} >= 2")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.n_patches + (1 if self.pooling == "cls_token" else 0)

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class TrainConfig:
    lr: float = 0.003
    betas: tuple[float, float] = (0.9, 0.999)
    eps_adam: float = 1e-8
    epochs: int = 10
    batch: int = 128
    seed: int = 7
    variant: ExpansionConfig = field(default_factory=ExpansionConfig)
    precision: Literal["f32", "f64"] = "f32"
    eval_batch: int = 1000
    log_every: int = 100

    def __post_init__(self):
        if isinstance(self.variant, dict):
            self.variant = ExpansionConfig.from_dict(self.variant)
        self.betas = tuple(float(b) for b in self.betas)
        if self.batch < 1 or self.eval_batch < 1:
            raise ConfigError(f"batch sizes must be >= 1, got {self.batch=} {self.eval_batch=}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")

    def check_reference(self) -> bool:
        """Warns when lr or epochs leave the settings of the reference runs."""
        ok = True
        if not 0.001 <= self.lr <= 0.005:
            logger.warning(f"lr={self.lr} is outside the [0.001, 0.005] range used for the reference runs")
            ok = False
        if self.epochs not in (10, 20):
            logger.warning(f"epochs={self.epochs}; reference runs use 10 or 20")
            ok = False
        return ok

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    macro_f1: float
    roc_auc_ovr: float
    seconds: float


METRICS_COLUMNS: tuple[str, ...] = tuple(f.name for f in fields(EpochMetrics))


@dataclass
class MetricsHistory:
    """エポックごとの評価結果の配列"""
    records: list[EpochMetrics] = field(default_factory=list)

    def append(self, record: EpochMetrics):
        self.records.append(record)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=list(METRICS_COLUMNS))

    def to_csv(self, output_file: str | Path):
        Path(output_file).parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(output_file, index=False)

    @classmethod
    def read_csv(cls, input_file: str | Path) -> "MetricsHistory":
        df = pd.read_csv(input_file)
        assert set(df.columns) >= set(METRICS_COLUMNS), f"unexpected metrics columns {list(df.columns)}"
        records = [
            EpochMetrics(
                epoch=int(row["epoch"]),
                train_loss=float(row["train_loss"]),
                train_acc=float(row["train_acc"]),
                test_acc=float(row["test_acc"]),
                macro_f1=float(row["macro_f1"]),
                roc_auc_ovr=float(row["roc_auc_ovr"]),
                seconds=float(row["seconds"]),
            )
            for _, row in df.iterrows()
        ]
        return cls(records)

