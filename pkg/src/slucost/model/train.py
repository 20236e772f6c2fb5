"""Stage training: Adam on the CTC objective, dev-set checkpoint selection, metering."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..ctc import best_path_decode, min_frames
from ..energy import EnergyLedger, Meter, Sampler
from ..metrics import concept_error_rate, corpus_alignment
from .network import batch_logits, encoded_lengths, loss_and_grads
from .optim import Adam
from .params import ModelCheckpoint

logger = logging.getLogger(__name__)

ASR_CHARS = "ASR_chars"
SLU_CONCEPTS = "SLU_concepts"
OBJECTIVES = (ASR_CHARS, SLU_CONCEPTS)
ENCODER_ONLY = "encoder_only"
FULL = "full"
SCOPES = (ENCODER_ONLY, FULL)


class TrainingError(RuntimeError):
    ledger: EnergyLedger | None = None


class TrainingDiverged(TrainingError):
    """Loss became non-finite; ``checkpoint`` holds the last finite parameters."""

    def __init__(self, message: str, checkpoint: ModelCheckpoint) -> None:
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class StageHyper:
    epochs: int = 12
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    dropout: float = 0.3
    seed: int = 0
    patience: int | None = None
    select_on_dev: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StageResult:
    checkpoint: ModelCheckpoint
    ledger: EnergyLedger | None
    curve: list[dict] = field(default_factory=list)


def output_mode(objective: str, scope: str) -> str:
    if objective not in OBJECTIVES:
        raise TrainingError(f"unknown objective {objective!r}")
    if scope not in SCOPES:
        raise TrainingError(f"unknown scope {scope!r}")
    if scope == FULL:
        if objective != SLU_CONCEPTS:
            raise TrainingError("full-model training is defined for the SLU objective only")
        return "decoder"
    return "asr_head" if objective == ASR_CHARS else "slu_head"


def trainable_tensors(names: Sequence[str], objective: str, scope: str) -> list[str]:
    mode = output_mode(objective, scope)
    prefix = "dec." if mode == "decoder" else f"{mode}."
    return [n for n in names if n.startswith("enc.") or n.startswith(prefix)]


def targets_for(utterances, objective: str) -> list[list[int]]:
    if objective == ASR_CHARS:
        return [list(u.char_transcript) for u in utterances]
    return [list(u.concepts) for u in utterances]


def predict(ckpt: ModelCheckpoint, features: list[np.ndarray], mode: str, batch_size: int = 64) -> list[list[int]]:
    """Best-path label sequences for each utterance."""
    params = {k: v.astype(np.float64) for k, v in ckpt.tensors.items()}
    out = []
    for start in range(0, len(features), batch_size):
        chunk = features[start:start + batch_size]
        out.extend(best_path_decode(lp) for lp in batch_logits(params, ckpt.config, chunk, mode))
    return out


def error_rate(ckpt: ModelCheckpoint, utterances, objective: str, scope: str) -> float:
    """Error rate (fraction) of best-path outputs against the objective's labels."""
    mode = output_mode(objective, scope)
    preds = predict(ckpt, [u.features for u in utterances], mode)
    return concept_error_rate(corpus_alignment(zip(targets_for(utterances, objective), preds)))


def _check_dataset(ckpt: ModelCheckpoint, utterances, objective: str) -> None:
    if not utterances:
        raise TrainingError("no samples")
    vocab = ckpt.config.vocab_asr if objective == ASR_CHARS else ckpt.config.vocab_slu
    for u in utterances:
        if u.features.shape[1] != ckpt.config.feature_dim:
            raise TrainingError(f"utterance {u.id}: feature dim {u.features.shape[1]} != {ckpt.config.feature_dim}")
        target = u.char_transcript if objective == ASR_CHARS else u.concepts
        if any(not 1 <= label < vocab for label in target):
            raise TrainingError(f"utterance {u.id}: label outside the {objective} vocabulary of size {vocab}")
        frames = int(encoded_lengths(np.array([u.features.shape[0]]), ckpt.config.encoder_layers)[0])
        if min_frames(target) > frames:
            raise TrainingError(f"utterance {u.id}: target longer than input allows ({len(target)} labels, {frames} frames)")


def _batches(utterances, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffled minibatches of similar length: sort within shuffled pools, shuffle the batches."""
    order = rng.permutation(len(utterances))
    pool = batch_size * 8
    batches = []
    for start in range(0, len(order), pool):
        chunk = sorted(order[start:start + pool].tolist(), key=lambda i: (utterances[i].features.shape[0], i))
        batches.extend(chunk[j:j + batch_size] for j in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def _to_checkpoint(base: ModelCheckpoint, params: dict, provenance: dict) -> ModelCheckpoint:
    tensors = {k: (params[k].astype(np.float32) if k in params else v.copy()) for k, v in base.tensors.items()}
    return ModelCheckpoint(tensors, base.config, [dict(p) for p in base.provenance] + [provenance])


def train_stage(
    ckpt: ModelCheckpoint,
    dataset,
    objective: str,
    scope: str,
    hyper: StageHyper = StageHyper(),
    meter: Meter | None = None,
    dev=None,
    name: str = "stage",
) -> StageResult:
    """Minimise CTC on ``dataset`` (a list of utterances) for ``hyper.epochs`` epochs.

    Only encoder tensors and the objective's output layer are updated; every
    other tensor leaves the stage bitwise-unchanged. With a dev set, the
    epoch with the lowest dev error is returned (``patience`` epochs without
    improvement stop early). The whole stage runs under ``meter`` when given.
    """
    mode = output_mode(objective, scope)
    _check_dataset(ckpt, dataset, objective)
    if dev:
        _check_dataset(ckpt, dev, objective)
    trainable = trainable_tensors(list(ckpt.tensors), objective, scope)
    params = {n: ckpt.tensors[n].astype(np.float64) for n in trainable}
    full_params = {k: v.astype(np.float64) for k, v in ckpt.tensors.items()}
    opt = Adam(params, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps, hyper.clip_norm)
    rng = np.random.default_rng([hyper.seed, 7])
    features = [u.features for u in dataset]
    targets = targets_for(dataset, objective)
    provenance = {"op": "train", "stage": name, "objective": objective, "scope": scope, **hyper.to_dict()}

    def run() -> StageResult:
        step = 0
        curve = []
        best = None
        best_epoch = None
        best_err = math.inf
        stale = 0
        last_finite = {n: p.copy() for n, p in params.items()}
        for epoch in range(1, hyper.epochs + 1):
            losses = []
            for batch in _batches(dataset, hyper.batch_size, rng):
                full_params.update(params)
                loss, grads = loss_and_grads(
                    full_params, ckpt.config, [features[i] for i in batch], [targets[i] for i in batch],
                    mode, dropout=hyper.dropout, rng=rng,
                )
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"{name}: non-finite loss at epoch {epoch}, step {step}",
                        _to_checkpoint(ckpt, last_finite, {**provenance, "diverged_at_step": step}),
                    )
                for n in params:
                    last_finite[n][...] = params[n]
                opt.step(grads)
                step += 1
                losses.append(loss)
            point = {"epoch": epoch, "train_loss": float(np.mean(losses))}
            if dev and hyper.select_on_dev:
                current = _to_checkpoint(ckpt, params, provenance)
                err = error_rate(current, dev, objective, scope)
                point["dev_error"] = err
                if err < best_err:
                    best_err, best, best_epoch, stale = err, current, epoch, 0
                else:
                    stale += 1
            curve.append(point)
            logger.info("%s epoch %d: %s", name, epoch, point)
            if hyper.patience is not None and stale >= hyper.patience:
                break
        if best is None:
            return StageResult(_to_checkpoint(ckpt, params, provenance), None, curve)
        best.provenance[-1]["selected_epoch"] = best_epoch
        return StageResult(best, None, curve)

    if meter is None:
        return run()
    sampler = Sampler(meter)
    try:
        with sampler:
            result = run()
    except TrainingError as exc:
        exc.ledger = sampler.ledger
        raise
    result.ledger = sampler.ledger
    return result
