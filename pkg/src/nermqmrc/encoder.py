"""Small BERT-style transformer encoder over packed sequences."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .packing import CapacityError, PackedSequence
from .tokenizer import PAD_ID

ModelParams = dict[str, Tensor]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 2
    hidden_dim: int = 32
    ffn_dim: int = 64
    max_seq_len: int = 128
    dropout_rate: float = 0.1
    layer_norm_eps: float = 1e-12
    # add the mean token embedding of each question to its [ENT] input
    ent_query_pool: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "n_heads", "hidden_dim", "ffn_dim", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden_dim % self.n_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps must be positive")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "EncoderConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            key, value = line.split("=", 1)
            key = key.strip()
            if key in types:
                kind = types[key]
                if kind in (bool, "bool"):
                    kwargs[key] = value.strip() == "True"
                elif kind in (float, "float"):
                    kwargs[key] = float(value)
                else:
                    kwargs[key] = int(value)
        return cls(**kwargs)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EncoderConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass
class EncoderOutput:
    token_embeddings: Tensor  # [seq_len, d], every position of the packed sequence
    entity_embeddings: Tensor  # [k, d], rows gathered at the [ENT] positions
    cls_embedding: Tensor  # [d]


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.hidden_dim, config.ffn_dim
    shapes = {
        "emb.token": (config.vocab_size, d),
        "emb.position": (config.max_seq_len, d),
        "emb.segment": (2, d),
        "emb.ln.gamma": (d,),
        "emb.ln.beta": (d,),
    }
    for layer in range(config.n_layers):
        p = f"layer{layer}."
        for m in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{m}"] = (d, d)
            shapes[p + f"attn.b{m}"] = (d,)
        shapes.update({
            p + "ln1.gamma": (d,),
            p + "ln1.beta": (d,),
            p + "ffn.w1": (d, f),
            p + "ffn.b1": (f,),
            p + "ffn.w2": (f, d),
            p + "ffn.b2": (d,),
            p + "ln2.gamma": (d,),
            p + "ln2.beta": (d,),
        })
    return shapes


def init_params(config: EncoderConfig, seed: int) -> ModelParams:
    """Weights ~ N(0, 0.02), biases 0, layer-norm gamma 1 / beta 0."""
    rng = np.random.default_rng(seed)
    params: ModelParams = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            data = np.ones(shape)
        elif leaf == "beta" or leaf.startswith("b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


@dataclass
class Batch:
    ids: np.ndarray  # [B, L] int
    segments: np.ndarray  # [B, L] int
    pad: np.ndarray  # [B, L] bool, True at padding
    pool: np.ndarray | None = None  # [B, L, L] question averaging rows at [ENT] positions

    @property
    def length(self) -> int:
        return self.ids.shape[1]


def collate(packed: Sequence[PackedSequence], config: EncoderConfig) -> Batch:
    if not packed:
        raise ValueError("empty batch")
    length = max(len(p) for p in packed)
    if length > config.max_seq_len:
        raise CapacityError(f"sequence of length {length} exceeds max_seq_len {config.max_seq_len}")
    ids = np.full((len(packed), length), PAD_ID, dtype=np.int64)
    segments = np.zeros((len(packed), length), dtype=np.int64)
    pad = np.ones((len(packed), length), dtype=bool)
    for row, p in enumerate(packed):
        n = len(p)
        ids[row, :n] = p.ids
        segments[row, :n] = p.segment_ids
        pad[row, :n] = False
    if ids.max() >= config.vocab_size or ids.min() < 0:
        raise IndexError(f"token id outside vocabulary of size {config.vocab_size}")
    pool = None
    if config.ent_query_pool and any(p.ent_positions for p in packed):
        pool = np.zeros((len(packed), length, length))
        for row, p in enumerate(packed):
            prev = p.context_range[1] + 1  # the [SEP] closing the context
            for e in p.ent_positions:
                if e - prev > 1:
                    pool[row, e, prev + 1 : e] = 1.0 / (e - prev - 1)
                prev = e
    return Batch(ids, segments, pad, pool)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return nx.add(nx.matmul(x, w), b)


def _attention(x: Tensor, params: ModelParams, p: str, config: EncoderConfig, mask: np.ndarray, rng) -> Tensor:
    bsz, length, d = x.shape
    h = config.n_heads
    dh = d // h

    def heads(t: Tensor) -> Tensor:
        return nx.transpose(nx.reshape(t, (bsz, length, h, dh)), (0, 2, 1, 3))

    q = heads(_linear(x, params[p + "attn.wq"], params[p + "attn.bq"]))
    k = heads(_linear(x, params[p + "attn.wk"], params[p + "attn.bk"]))
    v = heads(_linear(x, params[p + "attn.wv"], params[p + "attn.bv"]))
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = nx.softmax(nx.add(scores, Tensor(mask)), axis=-1)
    probs = nx.dropout(probs, config.dropout_rate, rng)
    ctx = nx.reshape(nx.transpose(nx.matmul(probs, v), (0, 2, 1, 3)), (bsz, length, d))
    return _linear(ctx, params[p + "attn.wo"], params[p + "attn.bo"])


def encode_batch(
    batch: Batch,
    params: ModelParams,
    config: EncoderConfig,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Hidden states ``[B, L, d]``. Dropout is applied only when ``rng`` is given."""
    bsz, length = batch.ids.shape
    d = config.hidden_dim
    tok = nx.reshape(nx.take_rows(params["emb.token"], batch.ids.reshape(-1)), (bsz, length, d))
    if batch.pool is not None:
        tok = nx.add(tok, nx.matmul(Tensor(batch.pool), tok))
    pos = nx.take_rows(params["emb.position"], np.arange(length))
    seg = nx.reshape(nx.take_rows(params["emb.segment"], batch.segments.reshape(-1)), (bsz, length, d))
    x = nx.add(nx.add(tok, pos), seg)
    x = nx.layer_norm(x, params["emb.ln.gamma"], params["emb.ln.beta"], config.layer_norm_eps)
    x = nx.dropout(x, config.dropout_rate, rng)

    # additive key mask: -inf on padding keys, broadcast over heads and queries
    mask = np.where(batch.pad, -np.inf, 0.0)[:, None, None, :]
    for layer in range(config.n_layers):
        p = f"layer{layer}."
        att = nx.dropout(_attention(x, params, p, config, mask, rng), config.dropout_rate, rng)
        x = nx.layer_norm(nx.add(x, att), params[p + "ln1.gamma"], params[p + "ln1.beta"], config.layer_norm_eps)
        hidden = nx.gelu(_linear(x, params[p + "ffn.w1"], params[p + "ffn.b1"]))
        ffn = nx.dropout(_linear(hidden, params[p + "ffn.w2"], params[p + "ffn.b2"]), config.dropout_rate, rng)
        x = nx.layer_norm(nx.add(x, ffn), params[p + "ln2.gamma"], params[p + "ln2.beta"], config.layer_norm_eps)
    return x


def encode(
    packed: PackedSequence,
    params: ModelParams,
    config: EncoderConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> EncoderOutput:
    if len(packed) > config.max_seq_len:
        raise CapacityError(f"sequence of length {len(packed)} exceeds max_seq_len {config.max_seq_len}")
    if train_mode and rng is None:
        rng = np.random.default_rng()
    hidden = encode_batch(collate([packed], config), params, config, rng if train_mode else None)
    tokens = nx.reshape(hidden, (len(packed), config.hidden_dim))
    return EncoderOutput(
        token_embeddings=tokens,
        entity_embeddings=nx.take_rows(tokens, packed.ent_positions),
        cls_embedding=nx.reshape(nx.take_rows(tokens, [packed.cls_index]), (config.hidden_dim,)),
    )
