import math

import numpy as np
import pytest

from outlierfree.attention import ModelConfig, init_params, zero_params
from outlierfree.checkpoint import Checkpoint, to_bytes
from outlierfree.data import CorpusSpec, bpe_train, encode, gen_corpus, gen_task
from outlierfree.errors import AlreadyOutlierFree, ConfigError, NoMaskedPositions, SingleClassDataset
from outlierfree.tensor_core import make_rng
from outlierfree.training import (
    IGNORE,
    AdamState,
    MccCounts,
    TrainConfig,
    adamw_step,
    continue_training,
    crop_batch,
    finetune_classifier,
    lr_at,
    loss_and_grads,
    mask_tokens,
    mcc,
    mlm_batch,
    mlm_loss,
    pretrain,
    surgery,
)


@pytest.fixture(scope="module")
def corpus():
    seqs = gen_corpus(CorpusSpec(num_sequences=128, seed=0))
    vocab = bpe_train(seqs, 64)
    return vocab, [encode(s, vocab) for s in seqs]


def test_mcc_hand_cases():
    assert mcc(MccCounts(1, 1, 1, 1)) == 0.0
    assert mcc(MccCounts(tp=5, tn=7)) == 1.0
    assert mcc(MccCounts(fp=4, fn=3)) == -1.0
    assert abs(mcc(MccCounts(tp=2, tn=3, fp=1, fn=0)) - 6 / math.sqrt(72)) < 1e-15
    # zero marginal
    assert mcc(MccCounts(tp=4, fp=2)) == 0.0
    assert mcc(MccCounts(tn=9)) == 0.0


def test_mcc_counts_from_predictions():
    c = MccCounts.from_predictions([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert (c.tp, c.tn, c.fp, c.fn) == (2, 1, 1, 1)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(mask_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    cfg = TrainConfig(steps=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_adamw_zero_grad_cases():
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1, weight_decay=0.0)
    assert p["w"].tolist() == [1.0, -2.0]
    adamw_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1, weight_decay=0.01)
    assert np.allclose(p["w"], [0.999, -1.998], rtol=0, atol=1e-15)


def test_adamw_first_step_is_signed_lr():
    # bias correction makes the first step lr * g / (|g| + eps)
    p = {"w": np.array([0.0, 0.0])}
    adamw_step(p, {"w": np.array([3.0, -0.5])}, AdamState(), lr=0.01, eps=1e-6)
    assert np.allclose(p["w"], [-0.01 * 3 / (3 + 1e-6), 0.01 * 0.5 / (0.5 + 1e-6)], atol=1e-15)


def test_adamw_quadratic_decreases_monotonically():
    p = {"x": np.array([3.0])}
    state = AdamState()
    losses = []
    for _ in range(100):
        losses.append(float(p["x"][0] ** 2))
        adamw_step(p, {"x": 2 * p["x"]}, state, lr=1e-2)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_lr_schedule_hand_values():
    cfg = TrainConfig(steps=10, warmup=2, lr=1.0)
    assert [lr_at(s, cfg) for s in range(10)] == [0.5, 1.0, 1.0, 0.875, 0.75, 0.625, 0.5, 0.375, 0.25, 0.125]
    # a shorter continuation budget gets its own warmup and decay
    assert lr_at(1, cfg, 4) == 1.0 and lr_at(3, cfg, 4) == 0.5
    assert lr_at(0, TrainConfig(steps=3, warmup=0, lr=0.3)) == 0.3


def test_mask_rate_binomial(corpus):
    vocab, _ = corpus
    rng = make_rng(0)
    tokens = np.full((10_000, 100), vocab.token_to_id["A"])
    _, labels = mask_tokens(tokens, vocab, 0.15, rng)
    counts = (labels != IGNORE).sum(axis=1)
    sigma = math.sqrt(100 * 0.15 * 0.85 / 10_000)
    assert abs(counts.mean() - 15) < 3 * sigma


def test_mask_split_and_specials(corpus):
    vocab, _ = corpus
    rng = make_rng(1)
    tokens = np.full((200, 200), vocab.token_to_id["C"])
    tokens[:, 0] = vocab.cls_id
    inputs, labels = mask_tokens(tokens, vocab, 0.5, rng)
    sel = labels != IGNORE
    assert not sel[:, 0].any()
    frac_mask = np.mean(inputs[sel] == vocab.mask_id)
    frac_same = np.mean(inputs[sel] == tokens[sel])
    assert abs(frac_mask - 0.8) < 0.01
    # unchanged covers the 10% kept plus random draws that hit the same id
    assert abs(frac_same - (0.1 + 0.1 / (len(vocab) - len(vocab.specials)))) < 0.01
    assert np.all(inputs[~sel] == tokens[~sel])


def test_batches_are_framed_and_seeded(corpus):
    vocab, ids = corpus
    a = crop_batch(ids, vocab, 4, 16, make_rng(3))
    b = crop_batch(ids, vocab, 4, 16, make_rng(3))
    assert np.array_equal(a, b)
    assert np.all(a[:, 0] == vocab.cls_id) and np.all(a[:, -1] == vocab.sep_id)
    assert a.shape[1] <= 16
    x1, y1 = mlm_batch(ids, vocab, TrainConfig(batch_size=4), make_rng(4), 16)
    x2, y2 = mlm_batch(ids, vocab, TrainConfig(batch_size=4), make_rng(4), 16)
    assert np.array_equal(x1, x2) and np.array_equal(y1, y2)


def test_no_masked_positions():
    cfg = ModelConfig(layers=1, heads=1, model_dim=4, ffn_dim=4, vocab_size=6, max_seq_len=8)
    with pytest.raises(NoMaskedPositions):
        loss_and_grads(init_params(cfg, make_rng(0)), cfg, np.zeros((1, 4), dtype=int), np.full((1, 4), IGNORE))


@pytest.mark.parametrize("variant", ["softmax", "softmax1"])
def test_zero_model_loss_is_log_vocab(variant):
    cfg = ModelConfig(layers=1, heads=2, model_dim=8, ffn_dim=8, vocab_size=20, max_seq_len=8, variant=variant)
    labels = np.array([[3, IGNORE, 7, 1]])
    assert abs(mlm_loss(zero_params(cfg), cfg, np.array([[0, 1, 2, 3]]), labels) - math.log(20)) < 1e-12


def test_near_zero_init_loss_bound(corpus):
    vocab, ids = corpus
    cfg = ModelConfig()
    params = init_params(cfg, make_rng(0), 0.02)
    x, y = mlm_batch(ids, vocab, TrainConfig(), make_rng(1), cfg.max_seq_len)
    assert mlm_loss(params, cfg, x, y) <= math.log(cfg.vocab_size) + 0.1


def test_pretrain_reduces_loss_and_is_deterministic(corpus):
    vocab, ids = corpus
    tc = TrainConfig(steps=200, batch_size=8, seed=5)
    run = pretrain(tc, ids, ModelConfig(), vocab)
    assert np.mean(run.losses[-20:]) < np.mean(run.losses[:20])
    again = pretrain(tc, ids, ModelConfig(), vocab)
    assert to_bytes(run.checkpoint) == to_bytes(again.checkpoint)
    assert run.checkpoint.step == 200


def test_pretrain_rejects_small_model_vocab(corpus):
    vocab, ids = corpus
    with pytest.raises(ConfigError):
        pretrain(TrainConfig(steps=1), ids, ModelConfig(vocab_size=8), vocab)


def test_surgery_switches_variant_only(corpus):
    vocab, ids = corpus
    ck = pretrain(TrainConfig(steps=5, batch_size=4), ids, ModelConfig(), vocab).checkpoint
    out = surgery(ck)
    assert out.config.variant.value == "softmax1"
    assert out.config.replace(variant="softmax").to_dict() == ck.config.to_dict()
    for name in ck.params:
        assert ck.params[name].tobytes() == out.params[name].tobytes()
    with pytest.raises(AlreadyOutlierFree):
        surgery(out)
    cont = continue_training(out, ids, vocab, TrainConfig(batch_size=4), 3)
    assert cont.checkpoint.step == 8
    assert len(cont.losses) == 3


@pytest.fixture(scope="module")
def task(corpus):
    vocab, _ = corpus
    seqs, labels = gen_task(seed=1)
    ids = [encode(s, vocab) for s in seqs]
    k = len(ids) * 3 // 4
    return vocab, (ids[:k], labels[:k]), (ids[k:], labels[k:])


def test_full_finetune_separates_motif_task(task):
    vocab, train, test = task
    cfg = ModelConfig()
    ck = Checkpoint(cfg, init_params(cfg, make_rng(0)))
    res = finetune_classifier(ck, train, test, vocab, mode="full", steps=200)
    assert res.mcc >= 0.9
    assert res.counts.tp + res.counts.tn + res.counts.fp + res.counts.fn == len(test[0])


def test_frozen_head_is_near_chance(task):
    vocab, train, test = task
    cfg = ModelConfig()
    scores = []
    for seed in range(5):
        ck = Checkpoint(cfg, init_params(cfg, make_rng(seed)))
        scores.append(finetune_classifier(ck, train, test, vocab, mode="frozen", seed=seed).mcc)
    assert abs(np.median(scores)) < 0.3


def test_lora_finetune_loss_decreases(task):
    vocab, train, test = task
    cfg = ModelConfig(variant="softmax1")
    ck = Checkpoint(cfg, init_params(cfg, make_rng(0)))
    res = finetune_classifier(ck, train, test, vocab, mode="lora", steps=50, lr=1e-2)
    assert np.mean(res.losses[-10:]) < np.mean(res.losses[:10])
    # the base weights are untouched apart from the merged low-rank deltas
    for name, ad in res.adapters.items():
        assert np.allclose(res.params[name] - ck.params[name], ad.delta(), atol=1e-12)


def test_single_class_dataset(task):
    vocab, train, test = task
    cfg = ModelConfig()
    ck = Checkpoint(cfg, init_params(cfg, make_rng(0)))
    with pytest.raises(SingleClassDataset):
        finetune_classifier(ck, (train[0][:5], [1] * 5), test, vocab)
