"""Mini-batch Adam training for the MQMRC and SQMRC models."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .evaluation import evaluate
from .heads import B, I, O, canonical_kind
from .model import HEADS, MODES, NerModel
from .numerics import Tensor
from .packing import PackedSequence, QueryMap, Sample, SampleError, permute_entities, question_tokens
from .tokenizer import Vocab, build_vocab

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-5
    epochs: int = 20
    shuffle_entities: bool = False
    no_answer_rate: float = 0.0
    seed: int = 0
    mode: str = "mqmrc"
    head: str = "bio"
    op: str = "elementwise_product"
    # stop after this many epochs without a dev F1 improvement (None = run all epochs)
    patience: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.no_answer_rate <= 1.0:
            raise ValueError("no_answer_rate must be in [0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        self.op = canonical_kind(self.op)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    dev_f1: float | None
    seconds: float
    forward_passes: int


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def train_loss(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def dev_f1(self) -> list[float | None]:
        return [e.dev_f1 for e in self.epochs]

    def deterministic_view(self) -> dict:
        """Everything except wall-clock timings."""
        rows = [{k: v for k, v in asdict(e).items() if k != "seconds"} for e in self.epochs]
        return {"epochs": rows, "best_epoch": self.best_epoch}

    def to_jsonl(self) -> str:
        lines = [json.dumps({**asdict(e), "best": e.epoch == self.best_epoch}, sort_keys=True) for e in self.epochs]
        return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------- data preparation


def entity_universe(samples: Sequence[Sample]) -> list[str]:
    names: dict[str, None] = {}
    for s in samples:
        names.update(dict.fromkeys(s.gold))
    return sorted(names)


def add_no_answers(
    samples: Sequence[Sample],
    rate: float,
    seed: int = 0,
    entity_set: Sequence[str] | None = None,
) -> list[Sample]:
    """Add absent entities as empty-span questions.

    With ``rate == 1`` every absent entity is added; otherwise each absent
    entity is added independently with probability ``rate``.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be in [0, 1]")
    universe = list(entity_set) if entity_set is not None else entity_universe(samples)
    rng = np.random.default_rng(seed)
    out = []
    for s in samples:
        gold = {k: list(v) for k, v in s.gold.items()}
        if rate > 0.0:
            for name in universe:
                if name in gold:
                    continue
                if rate >= 1.0 or rng.random() < rate:
                    gold[name] = []
        out.append(Sample(list(s.context_tokens), gold, s.sample_id))
    return out


def surviving_spans(spans: Sequence[tuple[int, int]], n_context: int) -> list[tuple[int, int]]:
    return sorted((s, e) for s, e in spans if e < n_context)


def make_gold_bio(sample: Sample, packed: PackedSequence) -> np.ndarray:
    """Gold labels ``[k, n_ctx + 1]``; column 0 is the ``[CLS]`` no-answer slot."""
    n = packed.n_context
    gold = np.full((len(packed.entity_order), n + 1), O, dtype=np.int64)
    for row, name in enumerate(packed.entity_order):
        spans = surviving_spans(sample.gold[name], n)
        for (_, e1), (s2, _) in zip(spans, spans[1:]):
            if s2 <= e1:
                raise SampleError(f"entity {name!r}: overlapping spans {spans}")
        if not spans:
            gold[row, 0] = B
            continue
        for s, e in spans:
            gold[row, s + 1] = B
            gold[row, s + 2 : e + 2] = I
    return gold


def make_gold_span(sample: Sample, packed: PackedSequence) -> tuple[np.ndarray, np.ndarray]:
    """Slot-indexed (start, end) targets per entity: the first surviving span, or (0, 0)."""
    n = packed.n_context
    starts, ends = [], []
    for name in packed.entity_order:
        spans = surviving_spans(sample.gold[name], n)
        s, e = (spans[0][0] + 1, spans[0][1] + 1) if spans else (0, 0)
        starts.append(s)
        ends.append(e)
    return np.asarray(starts, dtype=np.int64), np.asarray(ends, dtype=np.int64)


def dataset_vocab(samples: Sequence[Sample], query_map: QueryMap | None = None, lowercase: bool = False) -> Vocab:
    texts = [" ".join(s.context_tokens) for s in samples]
    texts += [" ".join(question_tokens(name, query_map)) for name in entity_universe(samples)]
    if query_map:
        texts += list(query_map.values())
    return build_vocab(texts, min_count=1, lowercase=lowercase)


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- loop


def instance_golds(model: NerModel, samples: Sequence[Sample], insts) -> list:
    make = make_gold_bio if model.head == "bio" else make_gold_span
    return [make(samples[i.sample_index], i.packed) for i in insts]


def run_epoch(
    model: NerModel,
    samples: Sequence[Sample],
    optimizer: Adam | None,
    batch_size: int,
    rng: np.random.Generator,
    dropout: bool = True,
) -> float:
    """One pass over ``samples`` in random instance order; returns mean loss per instance.

    With ``optimizer=None`` only forward and backward run (used for timing).
    """
    insts = model.instances(samples)
    golds = instance_golds(model, samples, insts)
    order = rng.permutation(len(insts))
    total = 0.0
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        with nx.Tape():
            out = model.forward([insts[i].packed for i in idx], [golds[i] for i in idx], rng if dropout else None)
            if optimizer is not None:
                optimizer.zero_grad()
            nx.backward(out.loss)
        if optimizer is not None:
            optimizer.step()
        total += out.loss.item() * len(idx)
    return total / max(len(insts), 1)


def build_model(
    dataset: Sequence[Sample],
    config: TrainConfig,
    vocab: Vocab | None = None,
    query_map: QueryMap | None = None,
    lowercase: bool = False,
    **encoder_kwargs,
) -> NerModel:
    vocab = vocab or dataset_vocab(dataset, query_map, lowercase)
    return NerModel.create(vocab, seed=config.seed, mode=config.mode, head=config.head, op=config.op,
                           query_map=query_map, **encoder_kwargs)


def train(
    dataset: Sequence[Sample],
    dev_set: Sequence[Sample] | None = None,
    config: TrainConfig | None = None,
    model: NerModel | None = None,
    **model_kwargs,
) -> tuple[NerModel, TrainReport]:
    """Train and return the model (holding the best epoch's parameters) and its report.

    The best epoch maximizes dev F1 when ``dev_set`` is given, otherwise it
    minimizes train loss; ties go to the earlier epoch.
    """
    config = config or TrainConfig()
    if not dataset:
        raise ValueError("empty training set")
    if model is None:
        model = build_model(dataset, config, **model_kwargs)
    model.mode, model.head, model.op = config.mode, config.head, config.op
    samples = add_no_answers(dataset, config.no_answer_rate, config.seed) if config.no_answer_rate else list(dataset)

    optimizer = Adam(model.trainable(), config.learning_rate)
    report = TrainReport()
    best_score, best_state, stale = None, model.state(), 0
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        epoch_samples = samples
        if config.shuffle_entities:
            epoch_samples = [permute_entities(s, rng.permutation(s.k)) for s in samples]
        before = model.forward_passes
        tic = time.perf_counter()
        loss = run_epoch(model, epoch_samples, optimizer, config.batch_size, rng)
        seconds = time.perf_counter() - tic
        passes = model.forward_passes - before
        dev_f1 = evaluate(model, dev_set, batch_size=config.batch_size).f1 if dev_set else None
        report.epochs.append(EpochStats(epoch, loss, dev_f1, seconds, passes))
        score = dev_f1 if dev_set else -loss
        if best_score is None or score > best_score:
            best_score, best_state, stale = score, model.state(), 0
            report.best_epoch = epoch
        else:
            stale += 1
        log.info("epoch %d loss %.5f dev_f1 %s", epoch, loss, "-" if dev_f1 is None else f"{dev_f1:.4f}")
        if config.patience is not None and stale >= config.patience:
            break
    model.load_state(best_state)
    return model, report
