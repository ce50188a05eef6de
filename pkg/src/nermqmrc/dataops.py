"""Dataset formats, SQMRC <-> MQMRC conversion, statistics and distant supervision."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .packing import Sample
from .tokenizer import tokenize

FORMAT_VERSION = 1

Span = tuple[int, int]


class DataError(ValueError):
    pass


@dataclass
class SqmrcRecord:
    text: str
    entity: str
    spans: list[Span] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"v": FORMAT_VERSION, "text": self.text, "entity": self.entity, "spans": [list(s) for s in self.spans]}


@dataclass
class MqmrcRecord:
    text: str
    entities: dict[str, list[Span]]

    def __post_init__(self):
        if not self.entities:
            raise DataError("an MQMRC record needs at least one entity")

    def to_json(self) -> dict:
        ents = {k: [list(s) for s in v] for k, v in self.entities.items()}
        return {"v": FORMAT_VERSION, "text": self.text, "entities": ents}

    def to_sample(self, sample_id: str | None = None) -> Sample:
        return Sample(tokenize(self.text), {k: list(v) for k, v in self.entities.items()}, sample_id)

    @classmethod
    def from_sample(cls, sample: Sample) -> "MqmrcRecord":
        return cls(" ".join(sample.context_tokens), {k: list(v) for k, v in sample.gold.items()})


def _spans(raw) -> list[Span]:
    return [(int(s), int(e)) for s, e in raw]


# ---------------------------------------------------------------- JSON lines


def _read_jsonl(path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                obj = json.loads(line)
                if obj.get("v", FORMAT_VERSION) != FORMAT_VERSION:
                    raise DataError(f"{path}:{lineno}: unsupported format version {obj.get('v')!r}")
                yield lineno, obj


def _write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def detect_format(path) -> str:
    for _, obj in _read_jsonl(path):
        return "mqmrc" if "entities" in obj else "sqmrc"
    return "mqmrc"


def read_sqmrc(path) -> list[SqmrcRecord]:
    out = []
    for lineno, obj in _read_jsonl(path):
        try:
            out.append(SqmrcRecord(obj["text"], obj["entity"], _spans(obj.get("spans", []))))
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: missing key {exc}") from None
    return out


def read_mqmrc(path) -> list[MqmrcRecord]:
    out = []
    for lineno, obj in _read_jsonl(path):
        try:
            out.append(MqmrcRecord(obj["text"], {k: _spans(v) for k, v in obj["entities"].items()}))
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: missing key {exc}") from None
    return out


def write_sqmrc(path, records: Iterable[SqmrcRecord]) -> None:
    _write_jsonl(path, (r.to_json() for r in records))


def write_mqmrc(path, records: Iterable[MqmrcRecord]) -> None:
    _write_jsonl(path, (r.to_json() for r in records))


def load_samples(path) -> list[Sample]:
    """Read a dataset file (either format) as MQMRC samples."""
    records = read_mqmrc(path) if detect_format(path) == "mqmrc" else to_mqmrc(read_sqmrc(path))
    return [r.to_sample(str(i)) for i, r in enumerate(records)]


# ---------------------------------------------------------------- transformation


def to_mqmrc(records: Sequence[SqmrcRecord], group_by: str = "text") -> list[MqmrcRecord]:
    """Group rows by exact text; repeated (text, entity) rows merge by span union.

    ``group_by="none"`` keeps one question per record, for evaluation setups
    that score each (text, entity) row on its own.
    """
    if group_by == "none":
        return [MqmrcRecord(r.text, {r.entity: sorted(tuple(s) for s in r.spans)}) for r in records]
    if group_by != "text":
        raise ValueError(f"unknown grouping {group_by!r}")
    grouped: dict[str, dict[str, set[Span]]] = {}
    for r in records:
        ents = grouped.setdefault(r.text, {})
        ents.setdefault(r.entity, set()).update(tuple(s) for s in r.spans)
    return [MqmrcRecord(text, {k: sorted(v) for k, v in ents.items()}) for text, ents in grouped.items()]


def to_sqmrc(records: Sequence[MqmrcRecord]) -> list[SqmrcRecord]:
    return [SqmrcRecord(r.text, name, list(spans)) for r in records for name, spans in r.entities.items()]


def canonical(records: Sequence[MqmrcRecord]) -> list[MqmrcRecord]:
    """Entities sorted by name, spans sorted; the form on which the round trip is exact."""
    return [MqmrcRecord(r.text, {k: sorted(r.entities[k]) for k in sorted(r.entities)}) for r in records]


def reduction_pct(sqmrc_count: int, mqmrc_count: int) -> float:
    """Percentage fewer rows after grouping, rounded to 2 decimals."""
    if sqmrc_count <= 0:
        raise ValueError("sqmrc_count must be positive")
    if not 0 <= mqmrc_count <= sqmrc_count:
        raise ValueError("need 0 <= mqmrc_count <= sqmrc_count")
    return round(100.0 * (1.0 - mqmrc_count / sqmrc_count), 2)


@dataclass
class EntityStats:
    histogram: dict[int, int]
    median: int
    mean: float
    count: int


def entities_per_text_stats(records: Sequence[MqmrcRecord]) -> EntityStats:
    """Histogram of entities per text and its lower median."""
    ks = sorted(len(r.entities) for r in records)
    if not ks:
        return EntityStats({}, 0, 0.0, 0)
    hist = dict(sorted(Counter(ks).items()))
    return EntityStats(hist, ks[(len(ks) - 1) // 2], float(np.mean(ks)), len(ks))


# ---------------------------------------------------------------- gazetteer


@dataclass
class Gazetteer:
    values: dict[str, list[tuple[str, int]]]

    def __getitem__(self, attribute: str) -> list[str]:
        return [v for v, _ in self.values[attribute]]


def elbow_cutoff(freqs: Sequence[int]) -> int:
    """Index of the last kept value: the largest consecutive drop, earliest on ties."""
    if len(freqs) < 2:
        return len(freqs) - 1
    drops = [freqs[i] - freqs[i + 1] for i in range(len(freqs) - 1)]
    return int(np.argmax(drops))


def build_gazetteer(value_frequency: Mapping[str, Mapping[str, int]]) -> Gazetteer:
    out = {}
    for attribute, counts in value_frequency.items():
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        cut = elbow_cutoff([c for _, c in ranked])
        out[attribute] = ranked[: cut + 1]
    return Gazetteer(out)


# ---------------------------------------------------------------- distant supervision

IRREGULAR_PLURALS = {"man": "men", "woman": "women", "foot": "feet"}


@dataclass(frozen=True)
class Heuristics:
    lowercase: bool = True
    plural: bool = True  # add / remove a trailing "s"
    possessive: bool = True  # "men" <-> "men's"
    irregular: bool = False  # small built-in irregular plural table

    @classmethod
    def none(cls) -> "Heuristics":
        return cls(False, False, False, False)


def _word_variants(word: str, h: Heuristics) -> set[str]:
    forms = {word}
    if h.irregular:
        low = word.lower()
        for singular, plural in IRREGULAR_PLURALS.items():
            if low == singular:
                forms.add(plural)
            elif low == plural:
                forms.add(singular)
    if h.plural:
        for f in list(forms):
            forms.add(f + "s")
            if len(f) > 1 and f.endswith("s") and not f.endswith("'s"):
                forms.add(f[:-1])
    if h.possessive:
        for f in list(forms):
            if f.endswith("'s"):
                forms.add(f[:-2])
            else:
                forms.add(f + "'s")
    if h.lowercase:
        forms = {f.lower() for f in forms}
    return forms


def value_variants(value: str, h: Heuristics) -> set[tuple[str, ...]]:
    """Token sequences that count as a mention of ``value`` (variation on the last token)."""
    toks = tokenize(value)
    if not toks:
        return set()
    head = tuple(t.lower() for t in toks[:-1]) if h.lowercase else tuple(toks[:-1])
    return {head + (last,) for last in _word_variants(toks[-1], h)}


def distant_supervise(text: str, attribute: str, values: Sequence[str], heuristics: Heuristics | None = None) -> list[Span]:
    """Token spans in ``text`` matching any of ``values``; leftmost-longest, non-overlapping.

    ``attribute`` only labels the call; matching depends on the values alone.
    """
    h = heuristics if heuristics is not None else Heuristics()
    tokens = tokenize(text)
    if h.lowercase:
        tokens = [t.lower() for t in tokens]
    patterns: set[tuple[str, ...]] = set()
    for v in values:
        patterns |= value_variants(v, h)
    lengths = sorted({len(p) for p in patterns}, reverse=True)
    spans: list[Span] = []
    i = 0
    while i < len(tokens):
        for n in lengths:
            if i + n <= len(tokens) and tuple(tokens[i : i + n]) in patterns:
                spans.append((i, i + n - 1))
                i += n
                break
        else:
            i += 1
    return spans


def tag_records(texts: Sequence[str], gazetteer: Mapping[str, Sequence[str]], heuristics: Heuristics | None = None,
                keep_empty: bool = False) -> list[MqmrcRecord]:
    """Annotate raw texts with every attribute of ``gazetteer``."""
    out = []
    for text in texts:
        ents = {attr: distant_supervise(text, attr, vals, heuristics) for attr, vals in gazetteer.items()}
        if not keep_empty:
            ents = {k: v for k, v in ents.items() if v}
        if ents:
            out.append(MqmrcRecord(text, ents))
    return out


# ---------------------------------------------------------------- synthetic corpus

DEFAULT_POOLS: dict[str, list[str]] = {
    "color": ["red", "blue", "green", "black", "white", "navy blue", "light grey", "dark brown", "yellow", "pink"],
    "material": ["cotton", "leather", "wool", "silk", "denim", "linen", "polyester", "suede", "organic cotton", "nylon"],
    "item": ["shirt", "jacket", "boots", "scarf", "dress", "hoodie", "sneakers", "trousers", "backpack", "cap"],
    "audience": ["men", "women", "kids", "toddlers", "boys", "girls", "teens", "adults", "seniors", "babies"],
}

# each chunk is dropped entirely when the entity it mentions is omitted
DEFAULT_TEMPLATES: list[list[str]] = [
    ["the", "{color}", "{material}", "{item}", "for {audience}"],
    ["{item}", "in {color}", "made of {material}", "for {audience}"],
    ["for {audience} :", "{material}", "{item}", ", colour {color}"],
    ["new", "{color}", "{item}", "by acme", "in {material}", "sized for {audience}"],
    ["{audience}", "{item}", "with {material} lining", "available in {color}"],
    ["classic", "{material}", "{item}", "( {color} )", "great for {audience}"],
]
FILLERS = ["sale", "free shipping", "best seller", "limited edition", "new arrival", "top rated"]
NOISE_WORDS = ["premium", "soft", "stylish", "durable", "lightweight", "comfortable", "casual", "warm"]


@dataclass
class SyntheticSpec:
    n_samples: int
    pools: dict[str, list[str]] = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_POOLS.items()})
    templates: list[list[str]] = field(default_factory=lambda: [list(t) for t in DEFAULT_TEMPLATES])
    omit_rate: float = 0.0
    filler_rate: float = 0.3
    noise_rate: float = 0.0  # chance of a distractor word before each chunk
    shuffle_chunks: bool = False  # random chunk order per sample
    seed: int = 0


def _chunk_entities(chunk: str, pools: Mapping[str, Sequence[str]]) -> list[str]:
    names = []
    for tok in chunk.split():
        if tok.startswith("{") and tok.endswith("}"):
            name = tok[1:-1]
            if name not in pools:
                raise DataError(f"template references unknown entity {name!r}")
            names.append(name)
    return names


def generate_synthetic(spec: SyntheticSpec) -> list[MqmrcRecord]:
    """Templated MQMRC corpus with gold spans recorded during generation.

    Each entity slot is omitted independently with ``omit_rate``; a sample that
    would lose every entity keeps one at random so each record has a question.
    """
    for template in spec.templates:
        for chunk in template:
            _chunk_entities(chunk, spec.pools)
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(spec.n_samples):
        template = spec.templates[int(rng.integers(len(spec.templates)))]
        if spec.shuffle_chunks:
            template = [template[i] for i in rng.permutation(len(template))]
        present = [name for chunk in template for name in _chunk_entities(chunk, spec.pools)]
        keep = {name for name in present if rng.random() >= spec.omit_rate}
        if not keep and present:
            keep = {present[int(rng.integers(len(present)))]}
        tokens: list[str] = []
        gold: dict[str, list[Span]] = {}
        if rng.random() < spec.filler_rate:
            tokens += FILLERS[int(rng.integers(len(FILLERS)))].split()
        for chunk in template:
            names = _chunk_entities(chunk, spec.pools)
            if any(n not in keep for n in names):
                continue
            if spec.noise_rate and rng.random() < spec.noise_rate:
                tokens.append(NOISE_WORDS[int(rng.integers(len(NOISE_WORDS)))])
            for tok in chunk.split():
                if tok.startswith("{") and tok.endswith("}"):
                    name = tok[1:-1]
                    pool = spec.pools[name]
                    value = pool[int(rng.integers(len(pool)))].split()
                    gold.setdefault(name, []).append((len(tokens), len(tokens) + len(value) - 1))
                    tokens += value
                else:
                    tokens.append(tok)
        out.append(MqmrcRecord(" ".join(tokens), {name: gold[name] for name in sorted(gold)}))
    return out
