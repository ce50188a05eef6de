"""Named entity recognition as multi-question machine reading comprehension.

One context and all of its entity questions share a single encoder pass;
each ``[ENT]`` separator's output vector turns the shared token embeddings
into entity-specific ones that a BIO (or start/end) head decodes.
"""

from .encoder import EncoderConfig
from .evaluation import EvalReport, decode_bio, evaluate, exact_match_score
from .model import NerModel
from .packing import PackedSequence, Sample, pack_mqmrc, pack_sqmrc, permute_entities
from .tokenizer import Vocab, build_vocab, tokenize
from .training import TrainConfig, TrainReport, train

__all__ = [
    "EncoderConfig",
    "EvalReport",
    "NerModel",
    "PackedSequence",
    "Sample",
    "TrainConfig",
    "TrainReport",
    "Vocab",
    "build_vocab",
    "decode_bio",
    "evaluate",
    "exact_match_score",
    "pack_mqmrc",
    "pack_sqmrc",
    "permute_entities",
    "tokenize",
    "train",
]

__version__ = "0.1.0"
