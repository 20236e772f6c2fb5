"""Training strategies: stage plans, metered execution and experiment records.

A strategy is a list of stages run back to back. Each stage starts from
the previous stage's output (every same-name, same-shape tensor carried
over), except the first, which starts fresh or from an external
checkpoint. The record's energy is the sum of the stage ledgers.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import VOCAB_ASR, Corpus, intent_of
from .energy import EnergyLedger, MeterConfig, ledger_total, open_meter
from .extractor import Extractor
from .metrics import ACCURACY, ERROR_RATE, ExperimentRecord, concept_error_rate, corpus_alignment, grams_co2, intent_accuracy
from .model.params import ModelCheckpoint, ModelConfig, init_model, load_checkpoint, transfer_parameters
from .model.train import (
    ASR_CHARS,
    ENCODER_ONLY,
    FULL,
    SLU_CONCEPTS,
    StageHyper,
    TrainingError,
    output_mode,
    predict,
    train_stage,
)

logger = logging.getLogger(__name__)

THREE_STEP = "three_step"
TWO_STEP = "two_step"
ONE_STEP = "one_step"
KINDS = (THREE_STEP, TWO_STEP, ONE_STEP)
KIND_TAGS = {THREE_STEP: "3step", TWO_STEP: "2step", ONE_STEP: "1step"}

FRESH = "fresh"
PREVIOUS = "previous_stage"
EXTERNAL = "external"

DEFAULT_DROPOUT = 0.3
ONE_STEP_DROPOUT = 0.1

_STAGES = {
    THREE_STEP: [(ASR_CHARS, ENCODER_ONLY), (SLU_CONCEPTS, ENCODER_ONLY), (SLU_CONCEPTS, FULL)],
    TWO_STEP: [(SLU_CONCEPTS, ENCODER_ONLY), (SLU_CONCEPTS, FULL)],
    ONE_STEP: [(SLU_CONCEPTS, FULL)],
}


class StrategyError(RuntimeError):
    pass


@dataclass(frozen=True)
class Stage:
    objective: str
    scope: str
    init: str
    hyper: StageHyper = StageHyper()
    init_path: str | None = None

    def __post_init__(self) -> None:
        output_mode(self.objective, self.scope)
        if self.init not in (FRESH, PREVIOUS, EXTERNAL):
            raise StrategyError(f"unknown stage init {self.init!r}")
        if (self.init == EXTERNAL) != (self.init_path is not None):
            raise StrategyError("an external init needs a checkpoint path, and only it does")


@dataclass(frozen=True)
class StrategySpec:
    kind: str
    finetuned_features: bool = False
    transfer_from: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise StrategyError(f"unknown strategy kind {self.kind!r}; expected one of {KINDS}")

    @classmethod
    def from_tag(cls, tag: str, transfer_from: str | None = None) -> StrategySpec:
        """Parse "3step", "1step+1" and the like; "+PM" needs ``transfer_from``."""
        base, *mods = tag.split("+")
        kinds = {v: k for k, v in KIND_TAGS.items()}
        if base not in kinds or any(m not in ("1", "PM") for m in mods):
            raise StrategyError(f"bad strategy tag {tag!r}")
        if "PM" in mods and transfer_from is None:
            raise StrategyError("+PM needs a source checkpoint")
        return cls(kinds[base], "1" in mods, transfer_from)

    @property
    def tag(self) -> str:
        return KIND_TAGS[self.kind] + ("+1" if self.finetuned_features else "") + ("+PM" if self.transfer_from else "")


def default_hyper(kind: str, epochs: int = 12, seed: int = 0, **overrides) -> StageHyper:
    """Per-stage hyperparameters; one-step training uses lower dropout."""
    dropout = ONE_STEP_DROPOUT if kind == ONE_STEP else DEFAULT_DROPOUT
    return StageHyper(**{"epochs": epochs, "seed": seed, "dropout": dropout, **overrides})


def plan_strategy(spec: StrategySpec, hyper: StageHyper | list[StageHyper] | None = None) -> list[Stage]:
    """Stage list for ``spec``; ``hyper`` is shared or given per stage."""
    pairs = _STAGES[spec.kind]
    if hyper is None:
        hyper = default_hyper(spec.kind)
    hypers = list(hyper) if isinstance(hyper, (list, tuple)) else [hyper] * len(pairs)
    if len(hypers) != len(pairs):
        raise StrategyError(f"{spec.tag} has {len(pairs)} stages, got {len(hypers)} hyperparameter sets")
    stages = []
    for k, ((objective, scope), h) in enumerate(zip(pairs, hypers)):
        if k > 0:
            stages.append(Stage(objective, scope, PREVIOUS, h))
        elif spec.transfer_from is not None:
            stages.append(Stage(objective, scope, EXTERNAL, h, str(spec.transfer_from)))
        else:
            stages.append(Stage(objective, scope, FRESH, h))
    return stages


@dataclass
class StageOutcome:
    stage: Stage
    initial: ModelCheckpoint
    checkpoint: ModelCheckpoint
    ledger: EnergyLedger
    curve: list[dict]
    transferred: list[str]


@dataclass
class StrategyRun:
    record: ExperimentRecord
    stages: list[StageOutcome] = field(default_factory=list)
    run_dir: Path | None = None

    @property
    def final(self) -> ModelCheckpoint:
        return self.stages[-1].checkpoint


def model_config_for(corpus: Corpus, seed: int, **dims) -> ModelConfig:
    return ModelConfig(feature_dim=corpus.feature_dim, vocab_asr=VOCAB_ASR, vocab_slu=corpus.vocab_slu,
                       seed=seed, **dims)


def evaluate(ckpt: ModelCheckpoint, corpus: Corpus, split: str, metric_kind: str = ERROR_RATE) -> float:
    """Percent concept error rate (or intent accuracy) of the decoder's best-path outputs."""
    if ckpt.config.vocab_slu != corpus.vocab_slu:
        raise StrategyError(f"checkpoint has {ckpt.config.vocab_slu} concept labels, corpus has {corpus.vocab_slu}")
    if ckpt.config.feature_dim != corpus.feature_dim:
        raise StrategyError(f"checkpoint expects {ckpt.config.feature_dim}-dim features, corpus has {corpus.feature_dim}")
    utts = corpus[split]
    preds = predict(ckpt, [u.features for u in utts], "decoder")
    if metric_kind == ERROR_RATE:
        return 100.0 * concept_error_rate(corpus_alignment((u.concepts, p) for u, p in zip(utts, preds)))
    if metric_kind == ACCURACY:
        names = corpus.concept_names
        return intent_accuracy([(u.intent or intent_of(u.concepts, names), intent_of(p, names))
                                for u, p in zip(utts, preds)])
    raise StrategyError(f"unknown metric kind {metric_kind!r}")


def _initial_checkpoint(stage: Stage, previous: ModelCheckpoint | None, config: ModelConfig):
    if stage.init == FRESH:
        return init_model(config), []
    source = previous if stage.init == PREVIOUS else load_checkpoint(stage.init_path)
    return transfer_parameters(source, config)


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.+-]", "_", name)


def _write_ledger(path: Path, ledger: EnergyLedger, **extra) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({**ledger.to_dict(), **extra}, indent=1, sort_keys=True) + "\n")


def run_strategy(
    spec: StrategySpec,
    corpus: Corpus,
    seed: int,
    meter_config: MeterConfig,
    out_dir: str | Path | None = None,
    extractor: Extractor | None = None,
    hyper: StageHyper | list[StageHyper] | None = None,
    metric_kind: str = ERROR_RATE,
    record_id: str | None = None,
    model_dims: dict | None = None,
) -> StrategyRun:
    """Run every stage of ``spec`` under ``meter_config`` and build its record.

    With ``out_dir``, each stage's checkpoint and ledger go to
    ``out_dir/<record id>/stage<k>/``. If a stage fails, the ledgers
    collected so far (including the failed stage's partial one) are still
    written before the error propagates.
    """
    if spec.finetuned_features:
        if extractor is None:
            raise StrategyError("strategy needs fine-tuned features; run finetune-features first")
        corpus = extractor.apply(corpus)
    for split in ("train", "dev", "test"):
        if not corpus.splits.get(split):
            raise StrategyError(f"corpus has no {split} utterances")
    if hyper is None:
        hyper = default_hyper(spec.kind, seed=seed)
    stages = plan_strategy(spec, hyper)
    config = model_config_for(corpus, seed, **(model_dims or {}))
    record_id = record_id or f"{spec.tag}:{corpus.feature_tag}:seed{seed}"
    run_dir = Path(out_dir) / _safe(record_id) if out_dir is not None else None
    if run_dir is not None and run_dir.exists():
        raise StrategyError(f"run directory {run_dir} already exists; choose another record id")

    outcomes: list[StageOutcome] = []
    previous = None
    for k, stage in enumerate(stages, start=1):
        initial, transferred = _initial_checkpoint(stage, previous, config)
        name = f"stage{k}"
        logger.info("%s %s: %s/%s from %s (%d tensors transferred)",
                    record_id, name, stage.objective, stage.scope, stage.init, len(transferred))
        meter = open_meter(meter_config)
        try:
            result = train_stage(initial, corpus["train"], stage.objective, stage.scope, stage.hyper,
                                 meter=meter, dev=corpus["dev"], name=name)
        except TrainingError as exc:
            if run_dir is not None and exc.ledger is not None:
                _write_ledger(run_dir / name / "ledger.json", exc.ledger, failed=str(exc))
            raise
        outcomes.append(StageOutcome(stage, initial, result.checkpoint, result.ledger, result.curve, transferred))
        if run_dir is not None:
            result.checkpoint.save(run_dir / name / "checkpoint")
            _write_ledger(run_dir / name / "ledger.json", result.ledger)
        previous = result.checkpoint

    totals = [ledger_total(o.ledger, meter_config.co2_g_per_kwh) for o in outcomes]
    kwh = sum(t.kwh for t in totals)
    final = outcomes[-1].checkpoint
    record = ExperimentRecord(
        id=record_id,
        strategy=spec.tag,
        input_features=corpus.feature_tag,
        param_count=final.param_count,
        kwh=kwh,
        grams_co2=grams_co2(kwh, meter_config.co2_g_per_kwh),
        wall_time_s=sum(t.wall_time_s for t in totals),
        dev_metric=evaluate(final, corpus, "dev", metric_kind),
        test_metric=evaluate(final, corpus, "test", metric_kind),
        metric_kind=metric_kind,
        external_param_count=extractor.param_count if spec.finetuned_features else None,
    )
    if run_dir is not None:
        final.save(run_dir / "final")
    return StrategyRun(record, outcomes, run_dir)


def untrained_metric(corpus: Corpus, seed: int, split: str = "test", metric_kind: str = ERROR_RATE,
                     extractor: Extractor | None = None, model_dims: dict | None = None) -> float:
    """Metric of a freshly initialised model: the floor any training run must beat."""
    if extractor is not None:
        corpus = extractor.apply(corpus)
    return evaluate(init_model(model_config_for(corpus, seed, **(model_dims or {}))), corpus, split, metric_kind)
