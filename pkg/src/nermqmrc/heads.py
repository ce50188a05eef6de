"""Entity-specific token representations and the prediction heads.

Predictions and losses are computed over "slots": the ``[CLS]`` position
(slot 0, the no-answer slot) followed by the surviving context positions.
Question tokens never carry labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoder import EncoderOutput, ModelParams
from .numerics import Tensor
from .packing import PackedSequence

O, B, I = 0, 1, 2
LABELS = ("O", "B", "I")

INTERACTION_KINDS = (
    "layer_sum",
    "difference",
    "layer_product_relu",
    "layer_product_tanh",
    "max",
    "elementwise_product",
    "layer_product",
)
# CLI spelling
KIND_ALIASES = {"product": "elementwise_product"}


class HeadConfigError(ValueError):
    pass


def canonical_kind(kind: str) -> str:
    kind = KIND_ALIASES.get(kind, kind)
    if kind not in INTERACTION_KINDS:
        raise HeadConfigError(f"unknown interaction op {kind!r}")
    return kind


def uses_layers(kind: str) -> bool:
    return canonical_kind(kind).startswith("layer")


@dataclass
class InteractionOp:
    kind: str
    w1: Tensor | None = None
    w2: Tensor | None = None

    def __post_init__(self):
        self.kind = canonical_kind(self.kind)


@dataclass
class BioHead:
    w: Tensor  # [d, 3]
    b: Tensor  # [3]

    def __post_init__(self):
        if self.w.shape[-1] != 3 or self.b.shape != (3,):
            raise HeadConfigError("BIO head must output exactly 3 classes")


@dataclass
class SpanIndexHead:
    w_start: Tensor  # [d, 1]
    w_end: Tensor  # [d, 1]


def entity_specific(T: Tensor, ent: Tensor, op: InteractionOp) -> Tensor:
    """Combine token rows ``T[n, d]`` with entity vector(s) ``ent``.

    ``ent`` is ``[d]`` (broadcast over all rows) or ``[n, d]`` (one entity
    vector per row, as used for batched evaluation).
    """
    if op.kind.startswith("layer") and (op.w1 is None or op.w2 is None):
        raise HeadConfigError(f"interaction op {op.kind!r} needs W_1 and W_2")
    if T.shape[-1] != ent.shape[-1]:
        raise nx.ShapeError(f"token dim {T.shape} does not match entity dim {ent.shape}")
    kind = op.kind
    if kind == "elementwise_product":
        return nx.mul(T, ent)
    if kind == "difference":
        return nx.sub(T, ent)
    if kind == "max":
        return nx.maximum(T, ent)
    ent2 = ent if ent.ndim == 2 else nx.reshape(ent, (1, ent.shape[0]))
    left = nx.matmul(T, op.w1)
    right = nx.matmul(ent2, op.w2)
    if kind == "layer_sum":
        return nx.add(left, right)
    if kind == "layer_product":
        return nx.mul(left, right)
    if kind == "layer_product_relu":
        return nx.mul(nx.relu(left), nx.relu(right))
    if kind == "layer_product_tanh":
        return nx.mul(nx.tanh(left), nx.tanh(right))
    raise HeadConfigError(f"unhandled interaction op {kind!r}")


def bio_forward(P: Tensor, head: BioHead) -> Tensor:
    return nx.add(nx.matmul(P, head.w), head.b)


def bio_predict(logits) -> list[int]:
    """Per-row argmax; ties go to the lowest label index (O < B < I)."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return [int(i) for i in np.argmax(z, axis=-1)]


def span_logits(P: Tensor, head: SpanIndexHead) -> tuple[Tensor, Tensor]:
    n = P.shape[0]
    return nx.reshape(nx.matmul(P, head.w_start), (n,)), nx.reshape(nx.matmul(P, head.w_end), (n,))


def span_decode(start_logits, end_logits) -> tuple[int, int] | None:
    """Slot-indexed (start, end), or None for no-answer."""
    s = int(np.argmax(np.asarray(start_logits)))
    e = int(np.argmax(np.asarray(end_logits)))
    if s == 0 or e < s:
        return None
    return s, e


def span_forward(P: Tensor, head: SpanIndexHead) -> tuple[int, int] | None:
    start, end = span_logits(P, head)
    return span_decode(start.data, end.data)


def slot_positions(packed: PackedSequence) -> list[int]:
    first, last = packed.context_range
    return [packed.cls_index, *range(first, last + 1)]


def mqmrc_logits(enc: EncoderOutput, packed: PackedSequence, op: InteractionOp, head: BioHead) -> Tensor:
    """BIO logits ``[k, n_ctx + 1, 3]`` for one packed sequence."""
    k = len(packed.ent_positions)
    if enc.token_embeddings.shape[0] != len(packed) or enc.entity_embeddings.shape[0] != k:
        raise nx.ContractError("encoder output was not produced from this packed sequence")
    slots = slot_positions(packed)
    n = len(slots)
    T = nx.take_rows(enc.token_embeddings, np.tile(slots, k))
    ents = nx.take_rows(enc.entity_embeddings, np.repeat(np.arange(k), n))
    return nx.reshape(bio_forward(entity_specific(T, ents, op), head), (k, n, 3))


def mqmrc_forward(enc: EncoderOutput, packed: PackedSequence, op: InteractionOp, head: BioHead) -> np.ndarray:
    """Per-entity label matrix ``[k, n_ctx + 1]``; column 0 is the no-answer slot."""
    logits = mqmrc_logits(enc, packed, op, head)
    return np.argmax(logits.data, axis=-1)


def mqmrc_loss(logits: Tensor, gold) -> Tensor:
    """Equal-weight mean of the per-(entity, slot) cross entropies."""
    gold = np.asarray(gold, dtype=np.int64)
    if logits.ndim != 3 or logits.shape[2] != 3 or logits.shape[:2] != gold.shape:
        raise nx.ContractError(f"logits {logits.shape} do not match gold labels {gold.shape}")
    k, n, _ = logits.shape
    return nx.cross_entropy(nx.reshape(logits, (k * n, 3)), gold.reshape(-1))


def init_head_params(
    hidden_dim: int,
    seed: int,
    interaction_init: str = "identity",
) -> ModelParams:
    """Head weights: BIO and span heads ~ N(0, 0.02); W_1/W_2 identity or N(0, 0.02)."""
    rng = np.random.default_rng(seed)
    d = hidden_dim
    params = {
        "head.bio.w": rng.normal(0.0, 0.02, size=(d, 3)),
        "head.bio.b": np.zeros(3),
        "head.span.start": rng.normal(0.0, 0.02, size=(d, 1)),
        "head.span.end": rng.normal(0.0, 0.02, size=(d, 1)),
    }
    if interaction_init == "identity":
        params["head.inter.w1"] = np.eye(d)
        params["head.inter.w2"] = np.eye(d)
    elif interaction_init == "normal":
        params["head.inter.w1"] = rng.normal(0.0, 0.02, size=(d, d))
        params["head.inter.w2"] = rng.normal(0.0, 0.02, size=(d, d))
    else:
        raise HeadConfigError(f"unknown interaction_init {interaction_init!r}")
    return {name: Tensor(v, requires_grad=True) for name, v in params.items()}


def interaction_from(params: ModelParams, kind: str) -> InteractionOp:
    kind = canonical_kind(kind)
    if uses_layers(kind):
        return InteractionOp(kind, params["head.inter.w1"], params["head.inter.w2"])
    return InteractionOp(kind)


def bio_head_from(params: ModelParams) -> BioHead:
    return BioHead(params["head.bio.w"], params["head.bio.b"])


def span_head_from(params: ModelParams) -> SpanIndexHead:
    return SpanIndexHead(params["head.span.start"], params["head.span.end"])
