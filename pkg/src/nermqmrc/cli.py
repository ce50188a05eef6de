"""Command-line entry point: synth, transform, stats, tag, train, eval, bench."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataops
from .bench import bench
from .evaluation import (
    gold_texts,
    read_predictions,
    score_predictions,
    span_texts,
    write_predictions,
)
from .heads import INTERACTION_KINDS
from .model import NerModel
from .packing import DEFAULT_MAX_SEQ_LEN, load_query_map
from .training import TrainConfig, train

OP_CHOICES = [k for k in INTERACTION_KINDS if k != "elementwise_product"] + ["product", "elementwise_product"]


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return value == "on"


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["mqmrc", "sqmrc"], default="mqmrc")
    p.add_argument("--head", choices=["bio", "span"], default="bio")
    p.add_argument("--op", choices=OP_CHOICES, default="product")
    p.add_argument("--max-seq-len", type=int, default=DEFAULT_MAX_SEQ_LEN)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--query-map", type=Path)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--ffn", type=int, default=64)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--ent-query-pool", type=_on_off, default=True,
                   help="add each question's mean token embedding to its [ENT] input (on|off)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nermqmrc", description=__doc__)
    parser.add_argument("--config", type=Path, help="key=value file; command-line flags take precedence")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic MQMRC corpus")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--omit-rate", type=float, default=0.0)
    p.add_argument("--format", choices=["mqmrc", "sqmrc"], default="mqmrc")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("transform", help="convert between SQMRC and MQMRC files")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--to", choices=["mqmrc", "sqmrc"], required=True)
    p.add_argument("--group-by", choices=["text", "none"], default="text",
                   help="how SQMRC rows become MQMRC records: by exact text, or one record per row")

    p = sub.add_parser("stats", help="entities-per-text histogram")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path)

    p = sub.add_parser("tag", help="distant-supervision annotation of raw texts")
    p.add_argument("--input", type=Path, required=True, help="one text per line")
    p.add_argument("--gazetteer", type=Path, required=True,
                   help="JSON: attribute -> list of values, or attribute -> {value: frequency}")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--lowercase", type=_on_off, default=True)
    p.add_argument("--plural", type=_on_off, default=True)
    p.add_argument("--possessive", type=_on_off, default=True)
    p.add_argument("--irregular", type=_on_off, default=False)

    p = sub.add_parser("train", help="train a model and write a checkpoint directory")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--dev", type=Path)
    p.add_argument("--output", type=Path, required=True)
    _add_model_flags(p)
    p.add_argument("--shuffle-entities", type=_on_off, default=False)
    p.add_argument("--no-answer-rate", type=float, default=0.0)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lowercase", type=_on_off, default=False)

    p = sub.add_parser("eval", help="score a checkpoint or a predictions file")
    p.add_argument("--input", type=Path, required=True, help="gold dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", type=Path, help="checkpoint directory")
    src.add_argument("--predictions", type=Path, help="predictions JSON lines")
    p.add_argument("--output", type=Path, help="write predictions here (with --model)")
    p.add_argument("--mode", choices=["mqmrc", "sqmrc"])
    p.add_argument("--batch-size", type=int, default=32)

    p = sub.add_parser("bench", help="SQMRC vs MQMRC pass counts and wall clock")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path)
    p.add_argument("--repetitions", type=int, default=3)
    _add_model_flags(p)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    values = {}
    for line in args.config.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        values[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    subparser = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    known = {a.dest: a for a in subparser._actions}  # noqa: SLF001
    defaults = {}
    for key, raw in values.items():
        action = known.get(key)
        if action is None:
            raise ValueError(f"config key {key!r} is not a flag of {args.command!r}")
        defaults[key] = action.type(raw) if action.type else raw
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def cmd_synth(args) -> None:
    records = dataops.generate_synthetic(
        dataops.SyntheticSpec(n_samples=args.n_samples, omit_rate=args.omit_rate, seed=args.seed))
    if args.format == "mqmrc":
        dataops.write_mqmrc(args.output, records)
    else:
        dataops.write_sqmrc(args.output, dataops.to_sqmrc(records))
    print(f"wrote {len(records)} texts to {args.output}")


def cmd_transform(args) -> None:
    if args.to == "mqmrc":
        rows = dataops.read_sqmrc(args.input)
        out = dataops.to_mqmrc(rows, args.group_by)
        dataops.write_mqmrc(args.output, out)
        sq, mq = len(rows), len(out)
    else:
        rows = dataops.read_mqmrc(args.input)
        out = dataops.to_sqmrc(rows)
        dataops.write_sqmrc(args.output, out)
        sq, mq = len(out), len(rows)
    print(f"sqmrc {sq} mqmrc {mq} reduction {dataops.reduction_pct(sq, mq):.2f}%")


def cmd_stats(args) -> None:
    stats = dataops.entities_per_text_stats([dataops.MqmrcRecord.from_sample(s)
                                             for s in dataops.load_samples(args.input)])
    payload = {"count": stats.count, "median": stats.median, "mean": stats.mean,
               "histogram": {str(k): v for k, v in stats.histogram.items()}}
    text = json.dumps(payload, sort_keys=True)
    if args.output:
        args.output.write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_tag(args) -> None:
    raw = json.loads(args.gazetteer.read_text(encoding="utf-8"))
    if all(isinstance(v, dict) for v in raw.values()):
        gaz = dataops.build_gazetteer(raw)
        values = {attr: gaz[attr] for attr in gaz.values}
    else:
        values = {attr: list(v) for attr, v in raw.items()}
    texts = [t for t in args.input.read_text(encoding="utf-8").splitlines() if t.strip()]
    h = dataops.Heuristics(args.lowercase, args.plural, args.possessive, args.irregular)
    records = dataops.tag_records(texts, values, h)
    dataops.write_mqmrc(args.output, records)
    print(f"tagged {len(records)} of {len(texts)} texts")


def _encoder_kwargs(args) -> dict:
    return dict(max_seq_len=args.max_seq_len, n_layers=args.layers, n_heads=args.heads,
                hidden_dim=args.hidden, ffn_dim=args.ffn, dropout_rate=args.dropout,
                ent_query_pool=args.ent_query_pool)


def cmd_train(args) -> None:
    samples = dataops.load_samples(args.input)
    dev = dataops.load_samples(args.dev) if args.dev else None
    query_map = load_query_map(args.query_map) if args.query_map else None
    config = TrainConfig(batch_size=args.batch_size, learning_rate=args.lr, epochs=args.epochs,
                         shuffle_entities=args.shuffle_entities, no_answer_rate=args.no_answer_rate,
                         seed=args.seed, mode=args.mode, head=args.head, op=args.op)
    model, report = train(samples, dev, config, query_map=query_map, lowercase=args.lowercase,
                          **_encoder_kwargs(args))
    model.save(args.output)
    (args.output / "train_report.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
    last = report.epochs[report.best_epoch]
    print(f"best epoch {report.best_epoch} train_loss {last.train_loss:.5f} "
          f"dev_f1 {'-' if last.dev_f1 is None else f'{last.dev_f1:.4f}'} -> {args.output}")


def cmd_eval(args) -> None:
    samples = dataops.load_samples(args.input)
    gold = [gold_texts(s) for s in samples]
    if args.model:
        model = NerModel.load(args.model)
        preds = model.predict(samples, batch_size=args.batch_size, mode=args.mode)
        pred_maps = [span_texts(s.context_tokens, p) for s, p in zip(samples, preds)]
        if args.output:
            write_predictions(args.output, [s.sample_id for s in samples], pred_maps)
        mode = args.mode or model.mode
    else:
        rows = read_predictions(args.predictions)
        if len(rows) != len(samples):
            raise ValueError(f"{len(rows)} predictions for {len(samples)} gold samples")
        pred_maps = [p for _, p in rows]
        mode = args.mode or "mqmrc"
    report = score_predictions(gold, pred_maps, mode)
    print(report.to_json())
    print(report.to_table())


def cmd_bench(args) -> None:
    samples = dataops.load_samples(args.input)
    report = bench(samples, repetitions=args.repetitions, batch_size=args.batch_size, seed=args.seed,
                   head=args.head, op=args.op, query_map=load_query_map(args.query_map) if args.query_map else None,
                   **_encoder_kwargs(args))
    if args.output:
        args.output.write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_json())
    print(f"pass ratio {float(report.pass_ratio):.4f} ({report.pass_ratio}) "
          f"train speedup {report.speedup_train:.3f} infer speedup {report.speedup_infer:.3f}")


COMMANDS = {
    "synth": cmd_synth,
    "transform": cmd_transform,
    "stats": cmd_stats,
    "tag": cmd_tag,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ValueError, OSError) as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except (ValueError, KeyError, IndexError, OSError) as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
