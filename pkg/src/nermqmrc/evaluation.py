"""BIO span decoding and Exact-Match micro precision / recall / F1."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .packing import Sample
from .tokenizer import decode_span

_LABEL_IDS = {"O": 0, "B": 1, "I": 2, 0: 0, 1: 1, 2: 2}

EntityTexts = Mapping[str, Iterable[str]]


def decode_bio(labels: Sequence) -> tuple[list[tuple[int, int]], bool]:
    """Decode ``[cls_slot, ctx_0, .., ctx_{n-1}]`` labels.

    Returns context-relative inclusive spans and the no-answer flag. Runs of
    ``B I*`` become spans; an ``I`` that does not continue a span is dropped.
    When the ``[CLS]`` slot is ``B`` the spans are suppressed.
    """
    if not labels:
        raise ValueError("labels must include the [CLS] slot")
    ids = [_LABEL_IDS[int(x) if not isinstance(x, str) else x] for x in labels]
    no_answer = ids[0] == 1
    spans: list[tuple[int, int]] = []
    start = None
    for pos, lab in enumerate(ids[1:]):
        if lab == 1:
            if start is not None:
                spans.append((start, pos - 1))
            start = pos
        elif lab == 0:
            if start is not None:
                spans.append((start, pos - 1))
            start = None
    if start is not None:
        spans.append((start, len(ids) - 2))
    return ([] if no_answer else spans), no_answer


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    per_entity: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, total: Counts, per_entity: Mapping[str, Counts] | None = None) -> "EvalReport":
        breakdown = {
            name: {"tp": c.tp, "fp": c.fp, "fn": c.fn, "precision": c.precision, "recall": c.recall, "f1": c.f1}
            for name, c in sorted((per_entity or {}).items())
        }
        return cls(total.tp, total.fp, total.fn, total.precision, total.recall, total.f1, breakdown)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def to_table(self) -> str:
        rows = [("entity", "tp", "fp", "fn", "P", "R", "F1")]
        for name, c in self.per_entity.items():
            rows.append((name, str(c["tp"]), str(c["fp"]), str(c["fn"]),
                         f"{c['precision']:.4f}", f"{c['recall']:.4f}", f"{c['f1']:.4f}"))
        rows.append(("micro", str(self.tp), str(self.fp), str(self.fn),
                     f"{self.precision:.4f}", f"{self.recall:.4f}", f"{self.f1:.4f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths)))
                 for r in rows]
        return "\n".join(lines)


def exact_match_score(gold, pred) -> EvalReport:
    """Micro P/R/F1 over (sample, entity, text) triples.

    ``gold`` and ``pred`` are either one ``entity -> texts`` map or equally
    long sequences of them (one per sample). Repeated texts collapse.
    """
    if isinstance(gold, Mapping):
        gold, pred = [gold], [pred]
    gold, pred = list(gold), list(pred)
    if len(gold) != len(pred):
        raise ValueError(f"{len(gold)} gold samples but {len(pred)} predicted samples")
    total = Counts()
    per_entity: dict[str, Counts] = defaultdict(Counts)
    for g_map, p_map in zip(gold, pred):
        for name in set(g_map) | set(p_map):
            g = set(g_map.get(name, ()))
            p = set(p_map.get(name, ()))
            hit = len(g & p)
            c = per_entity[name]
            c.tp += hit
            c.fp += len(p) - hit
            c.fn += len(g) - hit
            total.tp += hit
            total.fp += len(p) - hit
            total.fn += len(g) - hit
    return EvalReport.from_counts(total, per_entity)


def gold_texts(sample: Sample) -> dict[str, set[str]]:
    return {name: {decode_span(sample.context_tokens, s, e) for s, e in spans} for name, spans in sample.gold.items()}


def span_texts(tokens: Sequence[str], spans: Mapping[str, Iterable[tuple[int, int]]]) -> dict[str, set[str]]:
    return {name: {decode_span(tokens, s, e) for s, e in ss} for name, ss in spans.items()}


def flatten_by_entity(samples: Sequence[Mapping], preds: Sequence[Mapping]):
    """Regroup per-sample maps into one record per (sample, entity), the SQMRC view."""
    gold_rows, pred_rows = [], []
    for g_map, p_map in zip(samples, preds):
        for name in sorted(set(g_map) | set(p_map)):
            gold_rows.append({name: set(g_map.get(name, ()))})
            pred_rows.append({name: set(p_map.get(name, ()))})
    return gold_rows, pred_rows


def score_predictions(gold: Sequence[Mapping], pred: Sequence[Mapping], mode: str = "mqmrc") -> EvalReport:
    if mode == "sqmrc":
        gold, pred = flatten_by_entity(gold, pred)
    elif mode != "mqmrc":
        raise ValueError(f"unknown mode {mode!r}")
    return exact_match_score(gold, pred)


def evaluate(model, dataset: Sequence[Sample], mode: str | None = None, batch_size: int = 32) -> EvalReport:
    """Predict with ``model`` over ``dataset`` and score against its gold spans.

    ``mode`` defaults to the model's own packing mode; for ``sqmrc`` the
    model is queried once per (sample, entity).
    """
    preds = model.predict(dataset, batch_size=batch_size, mode=mode)
    pred_maps = [span_texts(s.context_tokens, p) for s, p in zip(dataset, preds)]
    return score_predictions([gold_texts(s) for s in dataset], pred_maps, mode or model.mode)


def write_predictions(path, ids: Sequence, preds: Sequence[Mapping[str, Iterable[str]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid, p in zip(ids, preds):
            fh.write(json.dumps({"id": sid, "entities": {k: sorted(v) for k, v in p.items()}}, sort_keys=True) + "\n")


def read_predictions(path) -> list[tuple[object, dict[str, set[str]]]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        if "entities" not in obj:
            raise ValueError(f"{path}:{lineno}: missing 'entities'")
        out.append((obj.get("id"), {k: set(v) for k, v in obj["entities"].items()}))
    return out
