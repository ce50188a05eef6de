import json

import numpy as np
import pytest

from nermqmrc import dataops
from nermqmrc.packing import Sample, pack_mqmrc
from nermqmrc.tokenizer import build_vocab
from nermqmrc.training import (
    TrainConfig,
    add_no_answers,
    dataset_vocab,
    make_gold_bio,
    make_gold_span,
    train,
)

VOCAB = build_vocab(["a b c color material size"])


def gold_row(spans, n=3):
    s = Sample(["a", "b", "c"][:n], {"color": spans})
    return make_gold_bio(s, pack_mqmrc(s, VOCAB)).tolist()[0]


def test_gold_bio_examples():
    assert gold_row([(1, 2)]) == [0, 0, 1, 2]
    assert gold_row([]) == [1, 0, 0, 0]
    assert gold_row([(0, 0), (2, 2)]) == [0, 1, 0, 1]


def test_gold_drops_truncated_spans():
    s = Sample(["a"] * 10, {"color": [(0, 0), (9, 9)]})
    packed = pack_mqmrc(s, VOCAB, max_seq_len=8)
    assert make_gold_bio(s, packed).tolist()[0] == [0, 1, 0, 0]


def test_gold_span_uses_first_span_or_cls():
    s = Sample(["a", "b", "c"], {"color": [(1, 2), (0, 0)], "size": []})
    starts, ends = make_gold_span(s, pack_mqmrc(s, VOCAB))
    assert starts.tolist() == [1, 0] and ends.tolist() == [1, 0]


def test_add_no_answers():
    s = [Sample(["a"], {"color": [(0, 0)]})]
    assert add_no_answers(s, 0.0, entity_set=["color", "material", "size"]) == s
    out = add_no_answers(s, 1.0, entity_set=["color", "material", "size"])
    assert out[0].gold == {"color": [(0, 0)], "material": [], "size": []}
    with pytest.raises(ValueError):
        add_no_answers(s, 1.5)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(mode="other")
    assert TrainConfig(op="product").op == "elementwise_product"


def corpus(n=24, seed=0):
    recs = dataops.generate_synthetic(dataops.SyntheticSpec(n, omit_rate=0.3, seed=seed))
    return [r.to_sample(str(i)) for i, r in enumerate(recs)]


def test_fixed_seed_reports_identical():
    samples = corpus()
    cfg = TrainConfig(batch_size=8, learning_rate=1e-3, epochs=2, seed=4)
    (m1, r1), (m2, r2) = train(samples, samples[:6], cfg), train(samples, samples[:6], cfg)
    assert r1.deterministic_view() == r2.deterministic_view()
    assert all(np.array_equal(m1.params[k].data, m2.params[k].data) for k in m1.params)


def test_report_and_best_epoch_restore():
    samples = corpus()
    cfg = TrainConfig(batch_size=8, learning_rate=1e-3, epochs=4, seed=0)
    model, report = train(samples, None, cfg)
    assert len(report.epochs) == 4
    assert report.best_epoch == int(np.argmin(report.train_loss))
    lines = [json.loads(x) for x in report.to_jsonl().splitlines()]
    assert sum(x["best"] for x in lines) == 1
    assert all(e.forward_passes == len(samples) for e in report.epochs)


def test_patience_stops_early():
    samples = corpus(12)
    cfg = TrainConfig(batch_size=8, learning_rate=1e-9, epochs=20, seed=0, patience=2)
    _, report = train(samples, samples, cfg)
    assert len(report.epochs) < 20


def test_sqmrc_training_counts_passes_per_entity():
    samples = corpus(10)
    cfg = TrainConfig(batch_size=8, learning_rate=1e-3, epochs=1, mode="sqmrc", seed=0)
    _, report = train(samples, None, cfg)
    assert report.epochs[0].forward_passes == sum(s.k for s in samples)


def test_shuffled_training_loss_decreases():
    samples = corpus(16)
    vocab = dataset_vocab(samples)
    cfg = TrainConfig(batch_size=8, learning_rate=3e-3, epochs=15, shuffle_entities=True, seed=1)
    _, report = train(samples, None, cfg, vocab=vocab, max_seq_len=64)
    assert report.train_loss[-1] < 0.5 * report.train_loss[0]
