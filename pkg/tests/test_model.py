import numpy as np
import pytest

from nermqmrc import numerics as nx
from nermqmrc.encoder import ConfigError, EncoderConfig, collate, encode, encode_batch, init_params, parameter_shapes
from nermqmrc.evaluation import decode_bio
from nermqmrc.heads import (
    B,
    INTERACTION_KINDS,
    BioHead,
    HeadConfigError,
    InteractionOp,
    SpanIndexHead,
    bio_forward,
    bio_predict,
    entity_specific,
    init_head_params,
    interaction_from,
    mqmrc_forward,
    mqmrc_logits,
    mqmrc_loss,
    span_decode,
    span_forward,
)
from nermqmrc.model import NerModel
from nermqmrc.numerics import Tensor
from nermqmrc.packing import CapacityError, Sample, pack_mqmrc, pack_sqmrc
from nermqmrc.tokenizer import build_vocab
from nermqmrc.training import instance_golds

VOCAB = build_vocab(["red cotton shirt blue wool cap color material item"])


def small_config(**kw):
    kw.setdefault("vocab_size", len(VOCAB))
    kw.setdefault("max_seq_len", 32)
    return EncoderConfig(**kw)


def sample(k=2):
    names = ["color", "material", "item"][:k]
    gold = {"color": [(0, 0)], "material": [(1, 1)], "item": [(2, 2)]}
    return Sample(["red", "cotton", "shirt"], {n: gold[n] for n in names})


# ---------------------------------------------------------------- encoder


def test_parameter_count_closed_form():
    cfg = EncoderConfig(vocab_size=100, n_layers=2, hidden_dim=32, ffn_dim=64, n_heads=2, max_seq_len=64)
    d, f, v, length = 32, 64, 100, 64
    embeddings = v * d + length * d + 2 * d + 2 * d
    per_layer = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d
    expected = embeddings + 2 * per_layer
    assert expected == 22464
    assert sum(int(np.prod(s)) for s in parameter_shapes(cfg).values()) == expected


def test_encode_shapes_and_determinism():
    cfg = small_config()
    params = init_params(cfg, seed=0)
    packed = pack_mqmrc(Sample(["red", "cotton", "shirt"], {"color": [], "material": []}), VOCAB)
    out = encode(packed, params, cfg)
    assert len(packed) == 10
    assert out.token_embeddings.shape == (10, 32)
    assert out.entity_embeddings.shape == (2, 32)
    assert out.cls_embedding.shape == (32,)
    again = encode(packed, params, cfg)
    assert np.array_equal(out.token_embeddings.data, again.token_embeddings.data)
    dropped = encode(packed, params, cfg, train_mode=True, rng=np.random.default_rng(0))
    assert not np.array_equal(out.token_embeddings.data, dropped.token_embeddings.data)


def test_init_seeds():
    cfg = small_config()
    a, b, c = init_params(cfg, 1), init_params(cfg, 1), init_params(cfg, 2)
    assert nx.dump_params(a) == nx.dump_params(b)
    assert nx.dump_params(a) != nx.dump_params(c)


def test_padding_does_not_change_real_positions():
    cfg = small_config()
    params = init_params(cfg, 0)
    short = pack_mqmrc(sample(1), VOCAB)
    long = pack_mqmrc(Sample(["red"] * 9, {"color": [], "item": []}), VOCAB)
    alone = encode_batch(collate([short], cfg), params, cfg).data[0]
    batched = encode_batch(collate([short, long], cfg), params, cfg).data[0, : len(short)]
    np.testing.assert_allclose(alone, batched, atol=1e-12)


def test_ent_embedding_reflects_its_question():
    cfg = small_config()
    params = init_params(cfg, 0)
    a = pack_mqmrc(Sample(["red"], {"color": [], "item": []}), VOCAB)
    b = pack_mqmrc(Sample(["red"], {"material": [], "item": []}), VOCAB)
    ea = encode(a, params, cfg).entity_embeddings.data
    eb = encode(b, params, cfg).entity_embeddings.data
    assert np.abs(ea[0] - eb[0]).max() > 1e-2


def test_encoder_errors():
    cfg = small_config(max_seq_len=8)
    params = init_params(cfg, 0)
    with pytest.raises(CapacityError):
        encode(pack_mqmrc(sample(2), VOCAB), params, cfg)
    bad = pack_sqmrc(Sample(["red"], {"color": []}), "color", VOCAB)
    bad.ids[1] = 999
    with pytest.raises(IndexError):
        encode(bad, params, cfg)
    with pytest.raises(ConfigError):
        EncoderConfig(vocab_size=10, hidden_dim=30, n_heads=4)


def test_config_text_round_trip(tmp_path):
    cfg = small_config(dropout_rate=0.25, ent_query_pool=False)
    cfg.save(tmp_path / "enc.cfg")
    assert EncoderConfig.load(tmp_path / "enc.cfg") == cfg


# ---------------------------------------------------------------- heads


def test_interaction_examples():
    T = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = entity_specific(T, Tensor([2.0, 0.0]), InteractionOp("elementwise_product"))
    np.testing.assert_array_equal(out.data, [[2, 0], [6, 0]])
    out = entity_specific(Tensor([[5.0, 5.0]]), Tensor([2.0, 3.0]), InteractionOp("difference"))
    np.testing.assert_array_equal(out.data, [[3, 2]])
    with pytest.raises(HeadConfigError):
        entity_specific(T, Tensor([1.0, 1.0]), InteractionOp("layer_sum"))
    with pytest.raises(HeadConfigError):
        InteractionOp("concat")


@pytest.mark.parametrize("kind", INTERACTION_KINDS)
def test_every_kind_keeps_shape(kind):
    rng = np.random.default_rng(0)
    params = init_head_params(4, seed=0, interaction_init="normal")
    out = entity_specific(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=4)), interaction_from(params, kind))
    assert out.shape == (3, 4)


def test_identity_layer_product_equals_elementwise():
    rng = np.random.default_rng(1)
    T, ent = Tensor(rng.normal(size=(5, 6))), Tensor(rng.normal(size=(5, 6)))
    params = init_head_params(6, seed=0)
    a = entity_specific(T, ent, interaction_from(params, "layer_product"))
    b = entity_specific(T, ent, interaction_from(params, "product"))
    assert np.array_equal(a.data, b.data)


def test_bio_hand_computed_row():
    # d=2, t=[1,2], ent=[3,-1]: product [3,-2], head columns pick O=p0, B=p1, I=0
    head = BioHead(Tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), Tensor(np.zeros(3)))
    P = entity_specific(Tensor([[1.0, 2.0]]), Tensor([3.0, -1.0]), InteractionOp("elementwise_product"))
    logits = bio_forward(P, head)
    np.testing.assert_array_equal(logits.data, [[3, -2, 0]])
    assert bio_predict(logits) == [0]
    assert bio_predict(np.array([[1.0, 1.0, 0.0]])) == [0]
    zero = BioHead(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
    assert bio_predict(bio_forward(Tensor(np.ones((4, 2))), zero)) == [0, 0, 0, 0]
    with pytest.raises(HeadConfigError):
        BioHead(Tensor(np.zeros((2, 4))), Tensor(np.zeros(4)))


def test_mqmrc_forward_shapes_and_no_answer():
    cfg = small_config()
    params = init_params(cfg, 0)
    params.update(init_head_params(cfg.hidden_dim, 1))
    packed = pack_mqmrc(sample(2), VOCAB)
    enc = encode(packed, params, cfg)
    head = BioHead(params["head.bio.w"], params["head.bio.b"])
    op = interaction_from(params, "product")
    assert mqmrc_forward(enc, packed, op, head).shape == (2, 4)
    assert mqmrc_logits(enc, packed, op, head).shape == (2, 4, 3)
    assert decode_bio([B, 0, 0, 0]) == ([], True)
    other = pack_mqmrc(sample(3), VOCAB)
    with pytest.raises(nx.ContractError):
        mqmrc_logits(enc, other, op, head)


def test_mqmrc_loss_is_mean_of_cross_entropies():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 2, 3))
    gold = np.array([[0, 1], [2, 0]])
    per = [nx.cross_entropy(Tensor(logits[i, j]), gold[i, j]).item() for i in range(2) for j in range(2)]
    assert mqmrc_loss(Tensor(logits), gold).item() == pytest.approx(np.mean(per))
    # CE values [[0.1,0.3],[0.2,0.4]] average to 0.25
    assert np.mean([[0.1, 0.3], [0.2, 0.4]]) == pytest.approx(0.25)
    confident = np.full((1, 2, 3), -50.0)
    confident[0, 0, 0] = confident[0, 1, 1] = 50.0
    assert mqmrc_loss(Tensor(confident), [[0, 1]]).item() < 1e-12
    with pytest.raises(nx.ContractError):
        mqmrc_loss(Tensor(logits), gold[:, :1])


def test_span_decode_rules():
    assert span_decode([0, 0, 5, 0], [0, 0, 0, 5]) == (2, 3)
    assert span_decode([5, 0, 0], [5, 0, 0]) is None
    assert span_decode([0, 0, 5], [0, 5, 0]) is None
    head = SpanIndexHead(Tensor([[1.0]]), Tensor([[1.0]]))
    assert span_forward(Tensor([[0.0], [2.0], [1.0]]), head) == (1, 1)


# ---------------------------------------------------------------- model


def _train_steps(model, samples, steps=60):
    from nermqmrc.training import Adam, run_epoch

    opt = Adam(model.trainable(), 1e-2)
    return [run_epoch(model, samples, opt, 8, np.random.default_rng(i), dropout=False) for i in range(steps)]


@pytest.mark.parametrize("head", ["bio", "span"])
def test_single_sample_overfits(head):
    model = NerModel.create(VOCAB, seed=0, head=head, max_seq_len=32)
    losses = _train_steps(model, [sample(2)])
    assert losses[-1] < 0.01 < losses[0]
    assert model.predict([sample(2)])[0] == {"color": [(0, 0)], "material": [(1, 1)]}


def test_sqmrc_mode_counts_one_pass_per_entity():
    model = NerModel.create(VOCAB, seed=0, mode="sqmrc", max_seq_len=32)
    model.predict([sample(3), sample(2)])
    assert model.forward_passes == 5


def test_mixed_batch_rejected():
    model = NerModel.create(VOCAB, seed=0, max_seq_len=32)
    packs = [pack_mqmrc(sample(2), VOCAB), pack_sqmrc(sample(2), "color", VOCAB)]
    with pytest.raises(nx.ContractError):
        model.forward(packs)


def test_checkpoint_round_trip(tmp_path):
    model = NerModel.create(VOCAB, seed=3, op="layer_sum", max_seq_len=32)
    _train_steps(model, [sample(3)], steps=5)
    model.save(tmp_path / "ckpt")
    loaded = NerModel.load(tmp_path / "ckpt")
    assert (loaded.mode, loaded.head, loaded.op) == ("mqmrc", "bio", "layer_sum")
    insts = model.instances([sample(3)])
    golds = instance_golds(model, [sample(3)], insts)
    with nx.no_grad():
        a = model.forward([i.packed for i in insts], golds)
        b = loaded.forward([i.packed for i in insts], golds)
    assert a.loss.item() == b.loss.item()
    assert (tmp_path / "ckpt" / "params.bin").read_bytes() == nx.dump_params(loaded.params)
