"""SQMRC vs MQMRC throughput: forward-pass accounting and wall-clock timing."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .packing import QueryMap, Sample
from .training import Adam, TrainConfig, build_model, dataset_vocab, run_epoch


def forward_pass_counts(samples: Sequence[Sample]) -> dict[str, int]:
    """Encoder passes per sweep: one per text for MQMRC, one per (text, entity) for SQMRC."""
    return {"mqmrc": len(samples), "sqmrc": sum(s.k for s in samples)}


def pass_ratio(samples: Sequence[Sample]) -> Fraction:
    counts = forward_pass_counts(samples)
    return Fraction(counts["sqmrc"], counts["mqmrc"])


@dataclass
class ModeTiming:
    forward_passes: int
    train_seconds: float
    infer_seconds: float
    peak_seq_len: int


@dataclass
class BenchReport:
    mqmrc: ModeTiming
    sqmrc: ModeTiming
    repetitions: int
    batch_size: int

    @property
    def pass_ratio(self) -> Fraction:
        return Fraction(self.sqmrc.forward_passes, self.mqmrc.forward_passes)

    @property
    def speedup_train(self) -> float:
        return self.sqmrc.train_seconds / self.mqmrc.train_seconds

    @property
    def speedup_infer(self) -> float:
        return self.sqmrc.infer_seconds / self.mqmrc.infer_seconds

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(pass_ratio=float(self.pass_ratio), pass_ratio_exact=str(self.pass_ratio),
                   speedup_train=self.speedup_train, speedup_infer=self.speedup_infer)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _time_mode(samples, mode, batch_size, repetitions, seed, vocab, head, op, query_map, encoder_kwargs) -> ModeTiming:
    config = TrainConfig(batch_size=batch_size, learning_rate=1e-3, mode=mode, head=head, op=op, seed=seed)
    model = build_model(samples, config, vocab=vocab, query_map=query_map, **encoder_kwargs)
    insts = model.instances(samples)
    optimizer = Adam(model.trainable(), config.learning_rate)
    # warmup, excluded from timing
    run_epoch(model, samples[:batch_size], optimizer, batch_size, np.random.default_rng(seed))
    model.predict(samples[:batch_size], batch_size=batch_size)

    train_times, infer_times = [], []
    for rep in range(repetitions):
        tic = time.perf_counter()
        run_epoch(model, samples, optimizer, batch_size, np.random.default_rng([seed, rep]))
        train_times.append(time.perf_counter() - tic)
        tic = time.perf_counter()
        model.predict(samples, batch_size=batch_size)
        infer_times.append(time.perf_counter() - tic)
    return ModeTiming(
        forward_passes=len(insts),
        train_seconds=statistics.median(train_times),
        infer_seconds=statistics.median(infer_times),
        peak_seq_len=max(len(i.packed) for i in insts),
    )


def bench(
    samples: Sequence[Sample],
    repetitions: int = 3,
    batch_size: int = 32,
    seed: int = 0,
    head: str = "bio",
    op: str = "elementwise_product",
    query_map: QueryMap | None = None,
    **encoder_kwargs,
) -> BenchReport:
    """Time one training epoch and one inference sweep per mode (medians over repetitions).

    Both modes share the vocabulary, encoder configuration, head, seed and batch size.
    """
    if not samples:
        raise ValueError("empty corpus")
    vocab = dataset_vocab(samples, query_map)
    timings = {
        mode: _time_mode(list(samples), mode, batch_size, repetitions, seed, vocab, head, op, query_map, encoder_kwargs)
        for mode in ("mqmrc", "sqmrc")
    }
    return BenchReport(timings["mqmrc"], timings["sqmrc"], repetitions, batch_size)
