"""
vikan <command> [flags]

    train      train one variant (or all six) on MNIST
    eval       evaluate a checkpoint on the test split
    gradcheck  finite-difference check of every op, block and variant
    bench      per-batch cost of each variant + attention storage counters
    summarize  collect summary.json files into one results table

Exit codes: 0 ok, 1 gradcheck failure, 2 bad flags, 3 data / checkpoint /
config error, 4 non-finite loss.
"""
import json
import os
import sys
from pathlib import Path
from typing import Callable, Literal

import pandas as pd
from dotenv import dotenv_values, load_dotenv
from loguru import logger
from tap import Tap

from vikanformer import __version__
from vikanformer.bench import attention_storage, bench_variants
from vikanformer.checkpoint import load_model, save_model
from vikanformer.data import Dataset, load_mnist
from vikanformer.entity import VARIANTS, AttentionMode, ModelConfig, ModelKind, TrainConfig
from vikanformer.errors import CheckpointError, ConfigError, DataError, NonFiniteLossError
from vikanformer.gradcheck import GradCheckCase, default_suite, run_suite
from vikanformer.model import PRESETS, build_model, count_params, resolve_preset
from vikanformer.tensor import using_precision
from vikanformer.train import CsvMetricsSink, evaluate, train

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NONFINITE = 4

DATA_ENV = "VIKAN_DATA"


class DataArguments(Tap):
    data: str | None = None  # MNIST IDX directory (default: $VIKAN_DATA)
    limit_train: int | None = None  # use only the first N training samples
    limit_test: int | None = None  # use only the first N test samples
    allow_partial: bool = False  # accept IDX files that are not the full 60k/10k split
    precision: Literal["f32", "f64"] = "f32"
    config: str | None = None  # key=value file; command-line flags take precedence

    def process_args(self):
        for name in ("limit_train", "limit_test"):
            value = getattr(self, name)
            if value is not None and value < 1:
                self.error(f"--{name} must be >= 1, got {value}")


class TrainArguments(DataArguments):
    variant: str = "sinekan"  # variant or flash preset name, or "all" for the six variants
    model: ModelKind = "vit"
    out: str = "runs"
    epochs: int = 10
    batch: int = 128
    eval_batch: int = 1000
    lr: float = 0.003
    seed: int = 7
    attention: AttentionMode | None = None  # overrides the preset's attention mode
    tile: int = 4
    M: int = 8
    centers: int = 5
    knots: int = 6
    order: int = 3
    hidden: int = 8  # MLP feed-forward hidden width
    hidden_multiplier: int = 1
    baseline_hidden: int = 128  # hidden units of the mlp-baseline model
    log_every: int = 100

    def configure(self):
        self.add_argument("--variant", choices=[*PRESETS, "all"])

    def run_names(self) -> list[str]:
        if self.model == "mlp-baseline":
            return ["mlp"]
        return list(VARIANTS) if self.variant == "all" else [self.variant]

    def process_args(self):
        super().process_args()
        if self.baseline_hidden < 1 or self.log_every < 1:
            self.error(f"--baseline_hidden and --log_every must be >= 1, got {self.baseline_hidden}, {self.log_every}")
        # 範囲外の値は実行前に usage error として弾く
        try:
            for name in self.run_names():
                model_config = build_model_config(self, name)
                TrainConfig(lr=self.lr, epochs=self.epochs, batch=self.batch, eval_batch=self.eval_batch,
                            variant=model_config.ffn)
        except ConfigError as e:
            self.error(str(e))


class EvalArguments(DataArguments):
    checkpoint: str
    variant: str | None = None  # expected variant tag; a mismatch is an error
    format: Literal["json", "csv"] = "json"
    batch: int | None = None  # default: eval_batch stored in the checkpoint

    def process_args(self):
        super().process_args()
        if self.batch is not None and self.batch < 1:
            self.error(f"--batch must be >= 1, got {self.batch}")


class GradcheckArguments(Tap):
    only: list[str] | None = None  # keep only cases whose name contains one of these
    step: float = 1e-5  # finite-difference step h
    tolerance: float = 1e-4
    seed: int = 0
    config: str | None = None

    def process_args(self):
        if not self.step > 0 or not self.tolerance > 0:
            self.error(f"--step and --tolerance must be positive, got {self.step}, {self.tolerance}")


class BenchArguments(Tap):
    variants: list[str] = list(VARIANTS)
    batch: int = 128
    repeats: int = 5
    warmup: int = 1
    seed: int = 0
    tokens: int = 17  # sequence length for the attention storage counters
    tile: int = 4
    rows: int = 2048  # token rows fed to each feed-forward block when timing it alone
    out: str | None = None  # directory for bench.csv and storage.json
    config: str | None = None

    def process_args(self):
        for name in ("batch", "repeats", "tokens", "tile", "rows"):
            if getattr(self, name) < 1:
                self.error(f"--{name} must be >= 1, got {getattr(self, name)}")
        if self.warmup < 0:
            self.error(f"--warmup must be >= 0, got {self.warmup}")


class SummarizeArguments(Tap):
    runs: str = "runs"
    output_file: str | None = None
    config: str | None = None


# *** helpers ***
def expand_config(argv: list[str]) -> list[str]:
    """Prepend the key=value pairs of --config FILE so later flags win."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise ConfigError("--config needs a file path")
    path = Path(argv[i + 1])
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    injected = []
    for key, value in dotenv_values(path).items():
        if value is None or value.lower() == "false":
            continue
        injected.append(f"--{key}")
        if value.lower() != "true":
            injected.extend(value.split())
    logger.debug(f"config {path}: {injected}")
    return injected + argv


def resolve_data_dir(data: str | None) -> Path:
    data = data or os.environ.get(DATA_ENV)
    if not data:
        raise DataError(f"no MNIST directory: pass --data or set {DATA_ENV}")
    path = Path(data)
    if not path.is_dir():
        raise DataError(f"MNIST directory {path} does not exist")
    return path


def load_split(args: DataArguments, split: Literal["train", "test"]) -> Dataset:
    ds = load_mnist(resolve_data_dir(args.data), split, strict_size=not args.allow_partial)
    limit = args.limit_train if split == "train" else args.limit_test
    return ds.subset(limit) if limit else ds


def build_model_config(args: TrainArguments, name: str) -> ModelConfig:
    base = ModelConfig(tile=args.tile)
    config = resolve_preset(
        name, base, M=args.M, centers=args.centers, knots=args.knots, order=args.order,
        hidden=args.hidden, hidden_multiplier=args.hidden_multiplier, seed=args.seed,
    )
    if args.attention is not None:
        config = ModelConfig(**{**config.__dict__, "attention": args.attention})
    return config


def write_json(path: Path, data: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=2, ensure_ascii=False)


# *** commands ***
def cmd_train(args: TrainArguments) -> int:
    logger.info(f"{args=}")
    names = args.run_names()

    with using_precision(args.precision):
        ds_train = load_split(args, "train")
        ds_test = load_split(args, "test")
        for name in names:
            model_config = build_model_config(args, name)
            train_config = TrainConfig(
                lr=args.lr, epochs=args.epochs, batch=args.batch, seed=args.seed, variant=model_config.ffn,
                precision=args.precision, eval_batch=args.eval_batch, log_every=args.log_every,
            )
            model = build_model(args.model, model_config, hidden=args.baseline_hidden)
            run_dir = Path(args.out) / model.label
            run_dir.mkdir(parents=True, exist_ok=True)
            sink_id = logger.add(run_dir / "train.log", level="DEBUG")
            try:
                result = train(model, ds_train, ds_test, train_config, CsvMetricsSink(run_dir / "metrics.csv"))
            finally:
                logger.remove(sink_id)

            save_model(run_dir / "checkpoint.vkn", model, train_config.to_dict())
            final = result.history.records[-1]
            summary = {
                "variant": model.label,
                "kind": model.kind,
                "attention": model_config.attention if model.kind == "vit" else "none",
                "acc": final.test_acc,
                "macro_f1": final.macro_f1,
                "roc_auc_ovr": final.roc_auc_ovr,
                "params": count_params(model.params),
                "seconds_per_epoch": sum(r.seconds for r in result.history.records) / len(result.history.records),
                "epochs": train_config.epochs,
                "model_config": model_config.to_dict(),
                "train_config": train_config.to_dict(),
                "version": __version__,
            }
            write_json(run_dir / "summary.json", summary)
            logger.info(f"Outputs are saved at {run_dir}")
    return EXIT_OK


def cmd_eval(args: EvalArguments) -> int:
    with using_precision(args.precision):
        model, header = load_model(args.checkpoint, expected_variant=args.variant)
        batch_size = args.batch or int(header.get("train_config", {}).get("eval_batch", 1000))
        ds_test = load_split(args, "test")
        result = evaluate(model, ds_test, batch_size)

    if args.format == "csv":
        row = {"variant": model.label, "acc": result.acc, "f1": result.macro_f1, "auc": result.roc_auc_ovr}
        print(pd.DataFrame([row]).to_csv(index=False), end="")
    else:
        print(json.dumps({"acc": result.acc, "macro_f1": result.macro_f1, "roc_auc_ovr": result.roc_auc_ovr}))
    return EXIT_OK


def cmd_gradcheck(args: GradcheckArguments, cases: list[GradCheckCase] | None = None) -> int:
    if cases is None:
        cases = default_suite(args.only, args.seed)
    elif args.only:
        cases = [c for c in cases if any(key in c.name for key in args.only)]
    if not cases:
        raise ConfigError(f"no gradient-check case matches --only {args.only}")

    results = run_suite(cases, args.step, args.tolerance)
    table = pd.DataFrame(
        [{"component": r.name, "worst_rel_err": r.error, "tensor": r.worst_tensor, "ok": r.passed} for r in results]
    )
    print(table.to_string(index=False))
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f"{len(failed)} of {len(results)} gradient checks failed: {', '.join(failed)}")
        return EXIT_GRADCHECK
    logger.info(f"All {len(results)} gradient checks passed (tolerance {args.tolerance:g})")
    return EXIT_OK


def cmd_bench(args: BenchArguments) -> int:
    unknown = [v for v in args.variants if v not in PRESETS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}, expected names from {sorted(PRESETS)}")
    table = bench_variants(args.variants, args.batch, args.repeats, args.warmup, args.seed, rows=args.rows)
    storage = attention_storage(tokens=args.tokens, tile=args.tile, seed=args.seed)
    print(table.to_csv(index=False), end="")
    logger.info(f"attention storage: {storage}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / "bench.csv", index=False)
        write_json(out / "storage.json", storage)
    return EXIT_OK


SUMMARY_COLUMNS = ("variant", "attention", "acc", "f1", "auc", "params", "seconds_per_epoch")


def cmd_summarize(args: SummarizeArguments) -> int:
    paths = sorted(Path(args.runs).glob("*/summary.json"))
    if not paths:
        raise DataError(f"no summary.json found under {args.runs}")
    rows = []
    for path in paths:
        with open(path) as f:
            s = json.load(f)
        rows.append({
            "variant": s["variant"],
            "attention": s["attention"],
            "acc": s["acc"],
            "f1": s["macro_f1"],
            "auc": s["roc_auc_ovr"],
            "params": s["params"],
            "seconds_per_epoch": s["seconds_per_epoch"],
        })
    df = pd.DataFrame(rows, columns=list(SUMMARY_COLUMNS)).sort_values("variant").reset_index(drop=True)
    if args.output_file:
        Path(args.output_file).parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(args.output_file, index=False)
        logger.info(f"Summary is saved at {args.output_file}")
    print(df.to_csv(index=False), end="")
    return EXIT_OK


COMMANDS: dict[str, tuple[type[Tap], Callable[[Tap], int]]] = {
    "train": (TrainArguments, cmd_train),
    "eval": (EvalArguments, cmd_eval),
    "gradcheck": (GradcheckArguments, cmd_gradcheck),
    "bench": (BenchArguments, cmd_bench),
    "summarize": (SummarizeArguments, cmd_summarize),
}


def main(argv: list[str] | None = None) -> int:
    # (project-root)/.env を読み込む (VIKAN_DATA など)
    load_dotenv()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in COMMANDS:
        print(__doc__, file=sys.stderr)
        return EXIT_OK if argv and argv[0] in ("-h", "--help") else EXIT_USAGE

    name, rest = argv[0], argv[1:]
    args_class, handler = COMMANDS[name]
    try:
        args = args_class(prog=f"vikan {name}").parse_args(expand_config(rest))
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    except ConfigError as e:
        logger.error(str(e))
        return EXIT_DATA

    try:
        return handler(args)
    except (DataError, CheckpointError, ConfigError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_DATA
    except NonFiniteLossError as e:
        logger.error(str(e))
        return EXIT_NONFINITE


if __name__ == "__main__":
    sys.exit(main())
