"""
Checkpoint file layout (one file per checkpoint):

    b"VIKN" | uint32 LE header length | UTF-8 JSON header | float32 LE payload

The header carries the tensor table (name, shape, offset in elements) plus
whatever metadata the caller supplies (model kind, variant tag, configs).
"""
import json
import struct
from pathlib import Path

import numpy as np
from loguru import logger

from vikanformer.entity import ModelConfig
from vikanformer.errors import CheckpointError
from vikanformer.model import Classifier, build_model, variant_label
from vikanformer.tensor import Tensor

MAGIC = b"VIKN"
FORMAT_VERSION = 1


def save_tensors(path: str | Path, tensors: dict[str, Tensor], metadata: dict):
    table = []
    offset = 0
    for name, tensor in tensors.items():
        table.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        offset += tensor.size
    header = {"format": FORMAT_VERSION, **metadata, "tensors": table, "total": offset}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for tensor in tensors.values():
            f.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def load_tensors(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (header_len,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
        table = header["tensors"]
        total = int(header["total"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupted checkpoint header ({e})") from None

    payload = raw[8 + header_len:]
    if len(payload) != 4 * total:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, header declares {4 * total}")
    flat = np.frombuffer(payload, dtype="<f4")
    arrays = {}
    for entry in table:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = int(entry["offset"])
        if start < 0 or start + size > total:
            raise CheckpointError(f"{path}: tensor {entry['name']} lies outside the payload")
        arrays[entry["name"]] = flat[start:start + size].reshape(entry["shape"])
    return header, arrays


def save_model(path: str | Path, model: Classifier, train_config: dict | None = None):
    metadata = {
        "kind": model.kind,
        "variant": model.label,
        "model_config": model.config.to_dict(),
        "train_config": train_config or {},
    }
    if getattr(model, "hidden", None) is not None:
        metadata["hidden"] = model.hidden
    save_tensors(path, model.parameters(), metadata)
    logger.info(f"Checkpoint is saved at {path}")


def load_model(path: str | Path, expected_variant: str | None = None) -> tuple[Classifier, dict]:
    """Rebuild the model described by the header and fill in the stored tensors."""
    header, arrays = load_tensors(path)
    try:
        config = ModelConfig.from_dict(header["model_config"])
        kind = header["kind"]
        variant = header["variant"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: header lacks a valid model description ({e})") from None

    if expected_variant is not None and expected_variant != variant:
        raise CheckpointError(f"{path}: checkpoint variant {variant!r} does not match requested {expected_variant!r}")

    model = build_model(kind, config, seed=0, hidden=int(header.get("hidden", 128)))
    if kind == "vit" and variant_label(config) != variant:
        raise CheckpointError(f"{path}: variant tag {variant!r} disagrees with its config")
    params = model.parameters()
    if set(params) != set(arrays):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise CheckpointError(f"{path}: tensor names differ from the model ({missing=}, {extra=})")
    for name, tensor in params.items():
        if tuple(arrays[name].shape) != tensor.shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, model expects {tensor.shape}")
        tensor.data[...] = arrays[name]
    return model, header
