"""Encoder-ready sequences for multi-question and single-question MRC.

MQMRC layout::

    [CLS] x_1 .. x_n [SEP] q_1 [ENT] q_2 [ENT] .. q_k [ENT] [SEP]

SQMRC layout::

    [CLS] x_1 .. x_n [SEP] q [SEP]

Segment A covers ``[CLS]``, the context and the first ``[SEP]``; everything
after is segment B. Only the context is ever truncated (from the right).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .tokenizer import CLS_ID, ENT_ID, SEP_ID, Vocab, tokenize

SEGMENT_A, SEGMENT_B = 0, 1
DEFAULT_MAX_SEQ_LEN = 128

Span = tuple[int, int]
QueryMap = Mapping[str, str]


class CapacityError(ValueError):
    """The question region does not fit into ``max_seq_len``."""


class SampleError(ValueError):
    pass


@dataclass
class Sample:
    """One context and its gold entity -> spans map.

    Key order of ``gold`` is the question order. An entity with an empty span
    list is an explicit no-answer question.
    """

    context_tokens: list[str]
    gold: dict[str, list[Span]]
    sample_id: str | None = None

    def __post_init__(self):
        self.gold = {name: [tuple(s) for s in spans] for name, spans in self.gold.items()}
        n = len(self.context_tokens)
        for name, spans in self.gold.items():
            for start, end in spans:
                if not 0 <= start <= end < n:
                    raise SampleError(f"entity {name!r}: span ({start}, {end}) outside context of {n} tokens")
            ordered = sorted(spans)
            for (_, e1), (s2, _) in zip(ordered, ordered[1:]):
                if s2 <= e1:
                    raise SampleError(f"entity {name!r}: overlapping spans {ordered}")

    @property
    def entities(self) -> list[str]:
        return list(self.gold)

    @property
    def k(self) -> int:
        return len(self.gold)

    @classmethod
    def from_text(cls, text: str, gold: Mapping[str, Sequence[Span]], sample_id: str | None = None) -> "Sample":
        return cls(tokenize(text), {k: list(v) for k, v in gold.items()}, sample_id)


@dataclass
class PackedSequence:
    ids: list[int]
    segment_ids: list[int]
    ent_positions: list[int]
    context_range: tuple[int, int]  # inclusive (first, last); last = first - 1 when empty
    entity_order: list[str]
    context_tokens: list[str] = field(default_factory=list)  # surviving context, for decoding
    cls_index: int = 0

    @property
    def n_context(self) -> int:
        first, last = self.context_range
        return last - first + 1

    def __len__(self) -> int:
        return len(self.ids)


def question_tokens(entity: str, query_map: QueryMap | None) -> list[str]:
    text = query_map.get(entity, entity) if query_map else entity
    toks = tokenize(text)
    if not toks:
        raise SampleError(f"entity {entity!r} has an empty question")
    return toks


def _assemble(context_ids, question_ids, max_seq_len, what):
    fixed = 1 + 2 + len(question_ids)
    if fixed > max_seq_len:
        raise CapacityError(f"{what}: question region needs {fixed} positions, max_seq_len is {max_seq_len}")
    n_ctx = min(len(context_ids), max_seq_len - fixed)
    ids = [CLS_ID, *context_ids[:n_ctx], SEP_ID, *question_ids, SEP_ID]
    segments = [SEGMENT_A] * (n_ctx + 2) + [SEGMENT_B] * (len(question_ids) + 1)
    return ids, segments, n_ctx


def pack_mqmrc(
    sample: Sample,
    vocab: Vocab,
    query_map: QueryMap | None = None,
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN,
) -> PackedSequence:
    if sample.k < 1:
        raise SampleError("MQMRC packing needs at least one entity")
    question_ids: list[int] = []
    offsets = []
    for name in sample.entities:
        question_ids += vocab.encode(question_tokens(name, query_map))
        offsets.append(len(question_ids))
        question_ids.append(ENT_ID)
    ids, segments, n_ctx = _assemble(vocab.encode(sample.context_tokens), question_ids, max_seq_len, "pack_mqmrc")
    question_start = n_ctx + 2
    return PackedSequence(
        ids=ids,
        segment_ids=segments,
        ent_positions=[question_start + off for off in offsets],
        context_range=(1, n_ctx),
        entity_order=sample.entities,
        context_tokens=list(sample.context_tokens[:n_ctx]),
    )


def pack_sqmrc(
    sample: Sample,
    entity: str,
    vocab: Vocab,
    query_map: QueryMap | None = None,
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN,
) -> PackedSequence:
    question_ids = vocab.encode(question_tokens(entity, query_map))
    ids, segments, n_ctx = _assemble(vocab.encode(sample.context_tokens), question_ids, max_seq_len, "pack_sqmrc")
    return PackedSequence(
        ids=ids,
        segment_ids=segments,
        ent_positions=[],
        context_range=(1, n_ctx),
        entity_order=[entity],
        context_tokens=list(sample.context_tokens[:n_ctx]),
    )


def permute_entities(sample: Sample, permutation: Sequence[int]) -> Sample:
    """Reorder questions: new position ``j`` holds old entity ``permutation[j]`` (0-based)."""
    k = sample.k
    if sorted(permutation) != list(range(k)):
        raise SampleError(f"not a permutation of 0..{k - 1}: {list(permutation)}")
    names = sample.entities
    gold = {names[j]: list(sample.gold[names[j]]) for j in permutation}
    return Sample(list(sample.context_tokens), gold, sample.sample_id)


def load_query_map(path) -> dict[str, str]:
    """Read ``entity<TAB>query`` lines."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'entity<TAB>query'")
        entity, query = line.split("\t", 1)
        out[entity.strip()] = query.strip()
    return out


def save_query_map(path, query_map: QueryMap) -> None:
    Path(path).write_text("".join(f"{e}\t{q}\n" for e, q in query_map.items()), encoding="utf-8")
