"""Batched MQMRC / SQMRC model: encoder + interaction op + BIO or span head."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoder import EncoderConfig, ModelParams, collate, encode_batch, init_params
from .evaluation import decode_bio
from .heads import (
    bio_forward,
    bio_head_from,
    canonical_kind,
    entity_specific,
    init_head_params,
    interaction_from,
    slot_positions,
    span_decode,
    span_head_from,
)
from .numerics import Tensor
from .packing import DEFAULT_MAX_SEQ_LEN, PackedSequence, QueryMap, Sample, load_query_map, pack_mqmrc, pack_sqmrc, save_query_map
from .tokenizer import Vocab

MODES = ("mqmrc", "sqmrc")
HEADS = ("bio", "span")


@dataclass
class Instance:
    """One packed encoder input and where it came from."""

    packed: PackedSequence
    sample_index: int


@dataclass
class BatchOutput:
    loss: Tensor | None
    # per instance: bio -> logits [k, n', 3]; span -> (start [k, n'], end [k, n'])
    outputs: list


class NerModel:
    def __init__(
        self,
        config: EncoderConfig,
        params: ModelParams,
        vocab: Vocab,
        mode: str = "mqmrc",
        head: str = "bio",
        op: str = "elementwise_product",
        query_map: QueryMap | None = None,
    ):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        self.config = config
        self.params = params
        self.vocab = vocab
        self.mode = mode
        self.head = head
        self.op = canonical_kind(op)
        self.query_map = dict(query_map) if query_map else None
        self.forward_passes = 0

    @classmethod
    def create(
        cls,
        vocab: Vocab,
        seed: int = 0,
        mode: str = "mqmrc",
        head: str = "bio",
        op: str = "elementwise_product",
        query_map: QueryMap | None = None,
        interaction_init: str = "identity",
        **encoder_kwargs,
    ) -> "NerModel":
        encoder_kwargs.setdefault("max_seq_len", DEFAULT_MAX_SEQ_LEN)
        config = EncoderConfig(vocab_size=len(vocab), **encoder_kwargs)
        params = init_params(config, seed)
        params.update(init_head_params(config.hidden_dim, seed + 1, interaction_init))
        return cls(config, params, vocab, mode, head, op, query_map)

    # ------------------------------------------------------------ parameters

    def trainable(self) -> dict[str, Tensor]:
        """Parameters that the current mode/head/op actually use."""
        out = {}
        for name, p in self.params.items():
            if name.startswith("head.bio.") and self.head != "bio":
                continue
            if name.startswith("head.span.") and self.head != "span":
                continue
            if name.startswith("head.inter.") and (self.mode != "mqmrc" or not self.op.startswith("layer")):
                continue
            out[name] = p
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            self.params[name].data = np.array(arr, dtype=np.float64)

    # ------------------------------------------------------------ packing

    def pack(self, sample: Sample, mode: str | None = None) -> list[PackedSequence]:
        mode = mode or self.mode
        max_len = self.config.max_seq_len
        if mode == "mqmrc":
            return [pack_mqmrc(sample, self.vocab, self.query_map, max_len)]
        return [pack_sqmrc(sample, name, self.vocab, self.query_map, max_len) for name in sample.entities]

    def instances(self, samples: Sequence[Sample], mode: str | None = None) -> list[Instance]:
        out = []
        for idx, sample in enumerate(samples):
            try:
                packed = self.pack(sample, mode)
            except ValueError as exc:
                label = sample.sample_id if sample.sample_id is not None else idx
                raise type(exc)(f"sample {label}: {exc}") from exc
            out.extend(Instance(p, idx) for p in packed)
        return out

    # ------------------------------------------------------------ forward

    def forward(
        self,
        packed: Sequence[PackedSequence],
        gold: Sequence | None = None,
        rng: np.random.Generator | None = None,
    ) -> BatchOutput:
        """Run one batch.

        ``gold`` (optional, aligned with ``packed``) holds BIO matrices
        ``[k, n']`` for the bio head or ``(start_slots, end_slots)`` pairs for
        the span head; when given, the mean per-instance loss is returned.
        Dropout is active only when ``rng`` is given.
        """
        self.forward_passes += len(packed)
        batch = collate(packed, self.config)
        hidden = encode_batch(batch, self.params, self.config, rng)
        bsz, length, d = hidden.shape
        flat = nx.reshape(hidden, (bsz * length, d))

        multi = bool(packed[0].ent_positions)
        if any(bool(p.ent_positions) != multi for p in packed):
            raise nx.ContractError("batch mixes MQMRC and SQMRC packings")
        tok_idx, ent_idx, groups = [], [], []
        for row, p in enumerate(packed):
            slots = np.asarray(slot_positions(p)) + row * length
            k = len(p.ent_positions) if multi else 1
            tok_idx.append(np.tile(slots, k))
            if multi:
                ent_idx.append(np.repeat(np.asarray(p.ent_positions) + row * length, len(slots)))
            groups.append((k, len(slots)))
        tokens = nx.take_rows(flat, np.concatenate(tok_idx))
        if multi:
            ents = nx.take_rows(flat, np.concatenate(ent_idx))
            P = entity_specific(tokens, ents, interaction_from(self.params, self.op))
        else:
            P = tokens

        if self.head == "bio":
            return self._bio(P, groups, gold)
        return self._span(P, groups, gold)

    def _bio(self, P: Tensor, groups, gold) -> BatchOutput:
        logits = bio_forward(P, bio_head_from(self.params))
        outputs, offset = [], 0
        for k, n in groups:
            outputs.append(logits.data[offset : offset + k * n].reshape(k, n, 3))
            offset += k * n
        loss = None
        if gold is not None:
            targets = np.concatenate([np.asarray(g, dtype=np.int64).reshape(-1) for g in gold])
            weights = np.concatenate([np.full(k * n, 1.0 / (k * n * len(groups))) for k, n in groups])
            if targets.shape[0] != logits.shape[0]:
                raise nx.ContractError("gold labels do not match the packed batch")
            loss = nx.cross_entropy(logits, targets, weights)
        return BatchOutput(loss, outputs)

    def _span(self, P: Tensor, groups, gold) -> BatchOutput:
        head = span_head_from(self.params)
        start = nx.reshape(nx.matmul(P, head.w_start), (P.shape[0],))
        end = nx.reshape(nx.matmul(P, head.w_end), (P.shape[0],))
        outputs, offset = [], 0
        width = max(n for _, n in groups)
        rows = []
        for k, n in groups:
            s = start.data[offset : offset + k * n].reshape(k, n)
            e = end.data[offset : offset + k * n].reshape(k, n)
            outputs.append((s, e))
            for i in range(k):
                base = offset + i * n
                rows.append(np.concatenate([np.arange(base, base + n), np.full(width - n, P.shape[0])]))
            offset += k * n
        loss = None
        if gold is not None:
            # pad every entity's slot list to a common width with a -inf sentinel
            index = np.concatenate(rows)
            sentinel = Tensor(np.array([-np.inf]))
            s_pad = nx.reshape(nx.take_rows(nx.concat([start, sentinel]), index), (len(rows), width))
            e_pad = nx.reshape(nx.take_rows(nx.concat([end, sentinel]), index), (len(rows), width))
            s_gold = np.concatenate([np.asarray(g[0], dtype=np.int64) for g in gold])
            e_gold = np.concatenate([np.asarray(g[1], dtype=np.int64) for g in gold])
            weights = np.concatenate([np.full(k, 0.5 / (k * len(groups))) for k, _ in groups])
            loss = nx.add(nx.cross_entropy(s_pad, s_gold, weights), nx.cross_entropy(e_pad, e_gold, weights))
        return BatchOutput(loss, outputs)

    # ------------------------------------------------------------ prediction

    def decode(self, packed: PackedSequence, output) -> dict[str, list[tuple[int, int]]]:
        """Context-relative spans per entity for one instance's raw output."""
        spans = {}
        if self.head == "bio":
            labels = np.argmax(output, axis=-1)
            for name, row in zip(packed.entity_order, labels):
                spans[name] = decode_bio(list(row))[0]
        else:
            s_rows, e_rows = output
            for name, s, e in zip(packed.entity_order, s_rows, e_rows):
                hit = span_decode(s, e)
                spans[name] = [] if hit is None else [(hit[0] - 1, hit[1] - 1)]
        return spans

    def predict(
        self,
        samples: Sequence[Sample],
        batch_size: int = 32,
        mode: str | None = None,
    ) -> list[dict[str, list[tuple[int, int]]]]:
        """Predicted context spans per entity, one map per sample."""
        insts = self.instances(samples, mode)
        results: list[dict] = [{} for _ in samples]
        with nx.no_grad():
            for start in range(0, len(insts), batch_size):
                chunk = insts[start : start + batch_size]
                out = self.forward([i.packed for i in chunk])
                for inst, o in zip(chunk, out.outputs):
                    results[inst.sample_index].update(self.decode(inst.packed, o))
        return results

    # ------------------------------------------------------------ checkpoints

    def save(self, directory) -> None:
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        nx.save_params(path / "params.bin", self.params)
        self.config.save(path / "encoder.cfg")
        (path / "model.cfg").write_text(f"mode={self.mode}\nhead={self.head}\nop={self.op}\n", encoding="utf-8")
        self.vocab.save(path / "vocab.txt")
        if self.query_map:
            save_query_map(path / "query_map.tsv", self.query_map)

    @classmethod
    def load(cls, directory) -> "NerModel":
        path = Path(directory)
        config = EncoderConfig.load(path / "encoder.cfg")
        settings = dict(
            line.split("=", 1) for line in (path / "model.cfg").read_text(encoding="utf-8").splitlines() if "=" in line
        )
        params = {k: Tensor(v, requires_grad=True) for k, v in nx.load_params(path / "params.bin").items()}
        query_map = load_query_map(path / "query_map.tsv") if (path / "query_map.tsv").exists() else None
        return cls(config, params, Vocab.load(path / "vocab.txt"), settings["mode"], settings["head"],
                   settings["op"], query_map)
