"""Command-line entry point: ``slucost <command> ...``.

Data goes to stdout, diagnostics to stderr. Every failure exits nonzero
(argparse usage errors exit 2, everything else 1).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .corpus import BASE, PRETRAINED_SIM, CorpusError, CorpusSpec, generate_corpus, load_corpus, save_corpus, two_task_pair
from .energy import EnergyError, MeterConfig, ledger_total, open_meter
from .extractor import ExtractorConfig, ExtractorError, finetune_feature_extractor, load_extractor
from .metrics import ACCURACY, DEFAULT_CO2_G_PER_KWH, ERROR_RATE, MetricError
from .model.params import CheckpointError, load_checkpoint
from .model.train import TrainingError
from .records import RecordsError, append_record, read_records, render_table, report_line
from .strategies import KIND_TAGS, StrategyError, StrategySpec, default_hyper, evaluate, run_strategy

logger = logging.getLogger("slucost")

CO2_ENV = "SLUCOST_CO2_G_PER_KWH"
EXTRACTOR_DIRNAME = "extractor"
_ERRORS = (CorpusError, EnergyError, ExtractorError, MetricError, CheckpointError, TrainingError,
           RecordsError, StrategyError, OSError)


class CliError(Exception):
    pass


def default_co2() -> float:
    raw = os.environ.get(CO2_ENV)
    if raw is None:
        return DEFAULT_CO2_G_PER_KWH
    try:
        value = float(raw)
    except ValueError:
        raise CliError(f"{CO2_ENV}={raw!r} is not a number") from None
    if value <= 0:
        raise CliError(f"{CO2_ENV} must be positive")
    return value


def _meter(text: str, period: float | None) -> MeterConfig:
    """Parse ``--meter``; the environment's CO2 coefficient applies unless the config file sets one."""
    config = MeterConfig.parse(text) if period is None else MeterConfig.parse(text, sample_period_s=period)
    if Path(text).is_file() and "co2_g_per_kwh" in json.loads(Path(text).read_text()):
        return config
    return replace(config, co2_g_per_kwh=default_co2())


def cmd_gen_data(args) -> int:
    spec = CorpusSpec(
        n_train=args.n_train,
        n_dev=args.n_dev,
        n_test=args.n_test,
        concept_inventory_size=args.concepts,
        words_per_concept=args.words_per_concept,
        frames_per_char=args.frames_per_char,
        feature_dim=args.feature_dim,
        noise_sigma=args.noise_sigma,
        feature_kind=args.feature_kind,
        seed=args.seed,
        render_seed=args.render_seed,
        feature_tag=args.tag,
    )
    out = Path(args.out)
    if args.overlap is None:
        corpus = generate_corpus(spec)
        save_corpus(corpus, out)
        print(f"{out}\t{corpus.feature_tag}\t{corpus.vocab_slu - 1} concepts")
        return 0
    src_seed = args.seed + 1000 if args.src_seed is None else args.src_seed
    src, tgt = two_task_pair(
        replace(spec, concept_inventory_size=args.src_concepts, seed=src_seed),
        replace(spec, concept_inventory_size=args.tgt_concepts),
        overlap=args.overlap,
    )
    for name, corpus in (("source", src), ("target", tgt)):
        save_corpus(corpus, out / name)
        print(f"{out / name}\t{corpus.feature_tag}\t{corpus.vocab_slu - 1} concepts")
    return 0


def cmd_finetune_features(args) -> int:
    corpus = load_corpus(args.corpus)
    out = Path(args.out) if args.out else Path(args.corpus) / EXTRACTOR_DIRNAME
    config = ExtractorConfig(feature_dim=corpus.feature_dim, vocab=corpus.vocab_slu,
                             epochs=args.epochs, seed=args.seed)
    meter_config = _meter(args.meter, args.sample_period)
    extractor = finetune_feature_extractor(corpus, config, open_meter(meter_config))
    extractor.save(out)
    total = ledger_total(extractor.ledger, meter_config.co2_g_per_kwh)
    print(f"{out}\tkwh={total.kwh:.6g}\tgrams_co2={total.grams_co2}\twall_time_s={total.wall_time_s:.1f}")
    return 0


def cmd_train(args) -> int:
    corpus = load_corpus(args.corpus)
    extractor = None
    if args.finetuned_features:
        path = Path(args.extractor) if args.extractor else Path(args.corpus) / EXTRACTOR_DIRNAME
        if not path.exists():
            raise CliError(f"no fine-tuned extractor at {path}; run `slucost finetune-features "
                           f"--corpus {args.corpus}` first")
        extractor = load_extractor(path)
    kind = {v: k for k, v in KIND_TAGS.items()}[args.strategy]
    spec = StrategySpec(kind, args.finetuned_features, args.transfer_from)
    if args.transfer_from and not Path(args.transfer_from).exists():
        raise CliError(f"transfer checkpoint {args.transfer_from} does not exist")
    overrides = {} if args.dropout is None else {"dropout": args.dropout}
    hyper = default_hyper(kind, epochs=args.epochs, seed=args.seed, **overrides)
    records_path = Path(args.records)
    runs_dir = Path(args.runs_dir) if args.runs_dir else records_path.parent / "runs"
    record_id = args.id or f"{spec.tag}:{Path(args.corpus).resolve().name}:seed{args.seed}"
    run = run_strategy(spec, corpus, args.seed, _meter(args.meter, args.sample_period), out_dir=runs_dir,
                       extractor=extractor, hyper=hyper, metric_kind=args.metric, record_id=record_id)
    append_record(records_path, run.record)
    r = run.record
    print(f"{r.id}\tkwh={r.kwh:.6g}\tdev={r.dev_metric:.2f}\ttest={r.test_metric:.2f}\tcheckpoint={run.run_dir / 'final'}")
    return 0


def cmd_compare(args) -> int:
    records = read_records(args.records)
    if not records:
        raise CliError(f"{args.records}: no records")
    co2 = args.co2_g_per_kwh if args.co2_g_per_kwh is not None else default_co2()
    sys.stdout.write(render_table(records, co2, args.format))
    return 0


def cmd_report(args) -> int:
    records = {r.id: r for r in read_records(args.records)}
    for rid in (args.baseline, args.challenger):
        if rid not in records:
            raise CliError(f"unknown record id {rid!r}")
    print(report_line(records[args.baseline], records[args.challenger]))
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    if args.extractor:
        corpus = load_extractor(args.extractor).apply(corpus)
    value = evaluate(ckpt, corpus, args.split, args.metric)
    print(f"{args.split}\t{args.metric}\t{value:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slucost", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus (or a source/target pair)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--render-seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-dev", type=int, default=100)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--concepts", type=int, default=12, help="inventory size of a single corpus")
    p.add_argument("--words-per-concept", type=int, default=2)
    p.add_argument("--frames-per-char", type=int, default=6)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--noise-sigma", type=float, default=0.5)
    p.add_argument("--feature-kind", choices=(BASE, PRETRAINED_SIM), default=BASE)
    p.add_argument("--tag", help="input-features tag (default: spectro / ssl by kind)")
    p.add_argument("--overlap", type=int, help="write source/ and target/ corpora sharing this many concepts")
    p.add_argument("--src-concepts", type=int, default=36)
    p.add_argument("--tgt-concepts", type=int, default=76)
    p.add_argument("--src-seed", type=int, help="grammar seed of the source corpus (default: seed + 1000)")
    p.set_defaults(func=cmd_gen_data)

    meter_help = "constant:WATTS, trace:CSV, counter:PATH:MAX_UJ, or a JSON meter config file"

    p = sub.add_parser("finetune-features", help="fine-tune a frame-wise feature extractor on concept labels")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", help="extractor directory (default: CORPUS/extractor)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--meter", required=True, help=meter_help)
    p.add_argument("--sample-period", type=float)
    p.set_defaults(func=cmd_finetune_features)

    p = sub.add_parser("train", help="run one training strategy and append its record")
    p.add_argument("--strategy", required=True, choices=tuple(KIND_TAGS.values()))
    p.add_argument("--finetuned-features", action="store_true", help="train on fine-tuned extractor features (+1)")
    p.add_argument("--extractor", help="extractor directory (default: CORPUS/extractor)")
    p.add_argument("--transfer-from", help="checkpoint directory to initialise from (+PM)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--meter", required=True, help=meter_help)
    p.add_argument("--sample-period", type=float)
    p.add_argument("--records", required=True)
    p.add_argument("--runs-dir", help="where checkpoints and ledgers go (default: beside the records file)")
    p.add_argument("--id", help="record id (default: STRATEGY:CORPUS:seedN)")
    p.add_argument("--epochs", type=int, default=12, help="epochs per stage")
    p.add_argument("--dropout", type=float, help="override the per-strategy dropout")
    p.add_argument("--metric", choices=(ERROR_RATE, ACCURACY), default=ERROR_RATE)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="cost table with kWh per metric point")
    p.add_argument("--records", required=True)
    p.add_argument("--co2-g-per-kwh", type=float, help=f"default: ${CO2_ENV} or {DEFAULT_CO2_G_PER_KWH:g}")
    p.add_argument("--format", choices=("text", "tsv"), default="text")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="cost reduction and performance change between two records")
    p.add_argument("--records", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--challenger", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=("dev", "test"), default="test")
    p.add_argument("--extractor", help="pass features through this extractor first")
    p.add_argument("--metric", choices=(ERROR_RATE, ACCURACY), default=ERROR_RATE)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CliError, *_ERRORS) as exc:
        print(f"slucost {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
