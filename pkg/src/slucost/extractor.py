"""Frame-wise feature extractor fine-tuned with CTC against concept labels.

The extractor is a residual per-frame transform

    y = x + tanh(x W1 + b1) W2

trained jointly with a throw-away linear CTC head (``y Wh + bh``) at the
input frame rate. After training only ``transform`` is used: downstream
models see ``y`` in place of ``x``. Its energy ledger is kept with the
extractor and is not charged to the runs that reuse it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, with_features
from .ctc import best_path_decode, ctc_loss_and_grad, min_frames
from .energy import EnergyLedger, Meter, Sampler, ledger_total
from .metrics import concept_error_rate, corpus_alignment
from .model.network import log_softmax
from .model.optim import Adam
from .model.params import CheckpointError, init_tensor, read_tensor_dir, write_tensor_dir

logger = logging.getLogger(__name__)

EXTRACTOR_FORMAT = "slucost-extractor"
TAG_SUFFIX = "-slu"
TRANSFORM_TENSORS = ("W1", "b1", "W2")


class ExtractorError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExtractorConfig:
    feature_dim: int
    vocab: int
    hidden_dim: int = 32
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0

    def shapes(self) -> dict[str, tuple[int, ...]]:
        F, H = self.feature_dim, self.hidden_dim
        return {"W1": (F, H), "b1": (H,), "W2": (H, F), "Wh": (F, self.vocab), "bh": (self.vocab,)}


@dataclass
class Extractor:
    config: ExtractorConfig
    tensors: dict[str, np.ndarray]
    ledger: EnergyLedger | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def param_count(self) -> int:
        """Size of the transform kept after fine-tuning (the CTC head is discarded)."""
        return int(sum(self.tensors[n].size for n in TRANSFORM_TENSORS))

    def transform(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        t = {k: v.astype(np.float64) for k, v in self.tensors.items()}
        return (x + np.tanh(x @ t["W1"] + t["b1"]) @ t["W2"]).astype(np.float32)

    def apply(self, corpus: Corpus) -> Corpus:
        """The corpus as seen through the extractor; its feature tag gains ``-slu``."""
        if corpus.feature_dim != self.config.feature_dim:
            raise ExtractorError(
                f"extractor expects {self.config.feature_dim}-dim features, corpus has {corpus.feature_dim}"
            )
        return with_features(corpus, self.transform, TAG_SUFFIX)

    def save(self, path: str | Path) -> Path:
        header = {
            "format": EXTRACTOR_FORMAT,
            "version": 1,
            "config": asdict(self.config),
            "ledger": self.ledger.to_dict() if self.ledger is not None else None,
            "provenance": self.provenance,
        }
        return write_tensor_dir(path, self.tensors, header)


def load_extractor(path: str | Path) -> Extractor:
    manifest, tensors = read_tensor_dir(path, EXTRACTOR_FORMAT)
    try:
        config = ExtractorConfig(**manifest["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad extractor config ({exc})") from exc
    if {k: v.shape for k, v in tensors.items()} != config.shapes():
        raise CheckpointError(f"{path}: tensors do not match the extractor config")
    ledger = EnergyLedger.from_dict(manifest["ledger"]) if manifest.get("ledger") else None
    return Extractor(config, tensors, ledger, dict(manifest.get("provenance") or {}))


def init_extractor(config: ExtractorConfig) -> Extractor:
    tensors = {n: init_tensor(f"extractor.{n}", shape, config.seed) for n, shape in config.shapes().items()}
    return Extractor(config, tensors)


def _forward(t: dict, x: np.ndarray):
    h = np.tanh(x @ t["W1"] + t["b1"])
    y = x + h @ t["W2"]
    return y @ t["Wh"] + t["bh"], (x, h, y)


def _backward(t: dict, dlogits: np.ndarray, cache) -> dict:
    x, h, y = cache
    dy = dlogits @ t["Wh"].T
    da = (dy @ t["W2"].T) * (1.0 - h * h)
    return {
        "Wh": y.T @ dlogits,
        "bh": dlogits.sum(axis=0),
        "W2": h.T @ dy,
        "W1": x.T @ da,
        "b1": da.sum(axis=0),
    }


def _batch_loss_and_grads(t: dict, feats: list[np.ndarray], targets: list[list[int]]):
    grads = {n: np.zeros_like(v) for n, v in t.items()}
    total = 0.0
    for x, target in zip(feats, targets):
        logits, cache = _forward(t, x)
        loss, g = ctc_loss_and_grad(log_softmax(logits), target)
        total += loss
        for n, gn in _backward(t, g / len(feats), cache).items():
            grads[n] += gn
    return total / len(feats), grads


def extractor_error_rate(ext: Extractor, utterances) -> float:
    """Concept error rate (fraction) of the extractor's own frame-rate CTC head."""
    t = {k: v.astype(np.float64) for k, v in ext.tensors.items()}
    pairs = []
    for u in utterances:
        logits, _ = _forward(t, u.features.astype(np.float64))
        pairs.append((u.concepts, best_path_decode(log_softmax(logits))))
    return concept_error_rate(corpus_alignment(pairs))


def finetune_feature_extractor(corpus: Corpus, config: ExtractorConfig | None = None,
                               meter: Meter | None = None) -> Extractor:
    """Train a frame-wise extractor on ``corpus['train']`` concept labels.

    The dev split picks the best epoch. Deterministic given ``config.seed``.
    """
    config = config or ExtractorConfig(feature_dim=corpus.feature_dim, vocab=corpus.vocab_slu)
    if config.feature_dim != corpus.feature_dim or config.vocab != corpus.vocab_slu:
        raise ExtractorError("extractor config does not match the corpus")
    train, dev = corpus["train"], corpus.splits.get("dev") or []
    if not train:
        raise ExtractorError("no samples")
    for u in train:
        if min_frames(u.concepts) > u.features.shape[0]:
            raise ExtractorError(f"utterance {u.id}: target longer than input allows")
    ext = init_extractor(config)
    params = {k: v.astype(np.float64) for k, v in ext.tensors.items()}
    opt = Adam(params, lr=config.lr, clip_norm=config.clip_norm)
    rng = np.random.default_rng([config.seed, 11])
    feats = [u.features.astype(np.float64) for u in train]
    targets = [list(u.concepts) for u in train]

    def snapshot() -> dict[str, np.ndarray]:
        return {k: v.astype(np.float32) for k, v in params.items()}

    def run():
        best, best_err, curve = snapshot(), math.inf, []
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(train))
            losses = []
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                loss, grads = _batch_loss_and_grads(params, [feats[i] for i in idx], [targets[i] for i in idx])
                if not math.isfinite(loss):
                    raise ExtractorError(f"non-finite loss at epoch {epoch}")
                opt.step(grads)
                losses.append(loss)
            point = {"epoch": epoch, "train_loss": float(np.mean(losses))}
            if dev:
                point["dev_error"] = extractor_error_rate(Extractor(config, snapshot()), dev)
                if point["dev_error"] < best_err:
                    best, best_err = snapshot(), point["dev_error"]
            else:
                best = snapshot()
            curve.append(point)
            logger.info("extractor epoch %d: %s", epoch, point)
        return best, curve

    if meter is None:
        tensors, curve = run()
        ledger = None
    else:
        with Sampler(meter) as sampler:
            tensors, curve = run()
        ledger = sampler.ledger
    provenance = {"op": "finetune", "corpus_tag": corpus.feature_tag, "curve": curve}
    if ledger is not None:
        provenance["kwh"] = ledger_total(ledger).kwh
    return Extractor(config, tensors, ledger, provenance)
