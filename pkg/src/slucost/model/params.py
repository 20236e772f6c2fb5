"""Model configuration, checkpoints, initialization and parameter transfer."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "slucost-checkpoint"
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    vocab_asr: int
    vocab_slu: int
    hidden_dim: int = 64
    decoder_dim: int = 64
    encoder_layers: int = 2
    pyramid_factor: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("feature_dim", "hidden_dim", "decoder_dim", "encoder_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.vocab_asr < 2 or self.vocab_slu < 2:
            raise ValueError("vocabularies must hold the blank plus at least one label")
        if self.pyramid_factor != 2:
            raise ValueError("pyramid_factor is fixed at 2")

    def to_dict(self) -> dict:
        return asdict(self)

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        F, H, D = self.feature_dim, self.hidden_dim, self.decoder_dim
        shapes: dict[str, tuple[int, ...]] = {}
        in_dim = 2 * F
        for k in range(self.encoder_layers):
            shapes[f"enc.{k}.W"] = (in_dim, 4 * H)
            shapes[f"enc.{k}.U"] = (H, 4 * H)
            shapes[f"enc.{k}.b"] = (4 * H,)
            in_dim = 2 * H
        shapes["asr_head.W"] = (H, self.vocab_asr)
        shapes["asr_head.b"] = (self.vocab_asr,)
        shapes["slu_head.W"] = (H, self.vocab_slu)
        shapes["slu_head.b"] = (self.vocab_slu,)
        shapes["dec.in.W"] = (H, D)
        shapes["dec.in.b"] = (D,)
        shapes["dec.att.Wq"] = (D, D)
        shapes["dec.att.Wk"] = (H, D)
        shapes["dec.att.Wv"] = (H, D)
        shapes["dec.self.Wq"] = (D, D)
        shapes["dec.self.Wk"] = (D, D)
        shapes["dec.self.Wv"] = (D, D)
        shapes["dec.comb.W"] = (3 * D, D)
        shapes["dec.comb.b"] = (D,)
        shapes["dec.out.W"] = (D, self.vocab_slu)
        shapes["dec.out.b"] = (self.vocab_slu,)
        return shapes


@dataclass
class ModelCheckpoint:
    tensors: dict[str, np.ndarray]
    config: ModelConfig
    provenance: list[dict] = field(default_factory=list)

    @property
    def param_count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> ModelCheckpoint:
        return ModelCheckpoint(
            {k: v.copy() for k, v in self.tensors.items()},
            self.config,
            [dict(p) for p in self.provenance],
        )

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(self, path)


def init_tensor(name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    """Biases are zero; matrices are U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Each matrix draws from PCG64 seeded with SeedSequence([seed, crc32(name)]),
    so a tensor's initial value does not depend on which other tensors exist.
    """
    if len(shape) == 1:
        return np.zeros(shape, dtype=np.float32)
    bound = 1.0 / np.sqrt(shape[0])
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_model(config: ModelConfig) -> ModelCheckpoint:
    tensors = {name: init_tensor(name, shape, config.seed) for name, shape in config.tensor_shapes().items()}
    return ModelCheckpoint(tensors, config, [{"op": "init", "seed": config.seed}])


def transfer_parameters(src: ModelCheckpoint, dst_config: ModelConfig) -> tuple[ModelCheckpoint, list[str]]:
    """Initialise ``dst_config`` and copy every same-name, same-shape tensor from ``src``."""
    dst = init_model(dst_config)
    transferred = []
    for name, value in dst.tensors.items():
        source = src.tensors.get(name)
        if source is not None and source.shape == value.shape:
            dst.tensors[name] = source.astype(np.float32, copy=True)
            transferred.append(name)
    dst.provenance = [dict(p) for p in src.provenance] + [{
        "op": "transfer",
        "seed": dst_config.seed,
        "transferred": len(transferred),
        "reinitialized": sorted(set(dst.tensors) - set(transferred)),
    }]
    return dst, transferred


def write_tensor_dir(path: str | Path, tensors: dict[str, np.ndarray], header: dict) -> Path:
    """Write ``path/manifest.json`` (header plus tensor table) and ``path/tensors.bin``.

    The blob holds every tensor as row-major little-endian float32, in sorted
    name order; the manifest records each tensor's shape and byte offset.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(tensors[name].shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps({**header, "tensors": entries}, indent=1, sort_keys=True) + "\n")
    return path


def read_tensor_dir(path: str | Path, fmt: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Inverse of :func:`write_tensor_dir`; checks the manifest's ``format`` field."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        blob = (path / BLOB).read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != fmt:
        raise CheckpointError(f"{path} is not a {fmt} directory")
    tensors = {}
    try:
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape, dtype=np.int64)) * 4
            start = entry["offset"]
            if entry.get("nbytes", n) != n or start + n > len(blob):
                raise CheckpointError(f"{path}: tensor {entry['name']} out of bounds or mis-sized")
            tensors[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=start).reshape(shape).astype(np.float32)
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    return manifest, tensors


def save_checkpoint(ckpt: ModelCheckpoint, path: str | Path) -> Path:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": ckpt.config.to_dict(),
        "provenance": ckpt.provenance,
    }
    return write_tensor_dir(path, ckpt.tensors, header)


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    manifest, tensors = read_tensor_dir(path, CHECKPOINT_FORMAT)
    try:
        config = ModelConfig(**manifest["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model config ({exc})") from exc
    expected = config.tensor_shapes()
    if {k: v.shape for k, v in tensors.items()} != expected:
        raise CheckpointError(f"{path}: tensors do not match the configured architecture")
    return ModelCheckpoint(tensors, config, list(manifest.get("provenance", [])))
