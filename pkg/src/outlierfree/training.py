"""Masked-language-model pretraining, AdamW, attention surgery and classification fine-tuning."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import (
    AttentionVariant,
    ModelConfig,
    check_params,
    forward_tokens,
    init_params,
    output_probs,
    softmax,
)
from .checkpoint import Checkpoint
from .data import Vocab
from .errors import AlreadyOutlierFree, ConfigError, NoMaskedPositions, SingleClassDataset
from .grads import backward
from .tensor_core import make_rng

IGNORE = -100


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    mask_rate: float = 0.15
    seed: int = 0
    warmup: int = 100
    init_std: float = 0.02

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.steps < 0 or self.batch_size <= 0 or self.lr <= 0 or self.warmup < 0:
            raise ConfigError("steps, batch_size, lr and warmup must be positive")
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError("mask_rate must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# -- batches ------------------------------------------------------------------


def crop_batch(corpus_ids, vocab: Vocab, batch_size: int, max_len: int, rng: np.random.Generator) -> np.ndarray:
    """Sample sequences and cut a common-length window, framed by [CLS] ... [SEP].

    Windows are cut to the shortest chosen sequence, so batches never need padding.
    """
    picks = rng.integers(0, len(corpus_ids), size=batch_size)
    chosen = [corpus_ids[i] for i in picks]
    body = min(max_len - 2, min(len(c) for c in chosen))
    rows = []
    for c in chosen:
        start = int(rng.integers(0, len(c) - body + 1))
        rows.append([vocab.cls_id] + list(c[start:start + body]) + [vocab.sep_id])
    return np.asarray(rows, dtype=np.int64)


def mask_tokens(tokens: np.ndarray, vocab: Vocab, mask_rate: float, rng: np.random.Generator):
    """BERT-style corruption: selected positions go 80/10/10 to [MASK]/random/unchanged."""
    tokens = np.asarray(tokens, dtype=np.int64)
    specials = np.isin(tokens, vocab.special_ids)
    selected = (rng.random(tokens.shape) < mask_rate) & ~specials
    labels = np.where(selected, tokens, IGNORE)
    roll = rng.random(tokens.shape)
    inputs = tokens.copy()
    inputs[selected & (roll < 0.8)] = vocab.mask_id
    n_special = len(vocab.specials)
    random_ids = rng.integers(n_special, len(vocab), size=tokens.shape)
    swap = selected & (roll >= 0.8) & (roll < 0.9)
    inputs[swap] = random_ids[swap]
    return inputs, labels


def mlm_batch(corpus_ids, vocab: Vocab, cfg: TrainConfig, rng: np.random.Generator, max_len: int):
    """``(inputs, labels)`` with ``labels == IGNORE`` off the masked positions."""
    tokens = crop_batch(corpus_ids, vocab, cfg.batch_size, max_len, rng)
    return mask_tokens(tokens, vocab, cfg.mask_rate, rng)


# -- loss ---------------------------------------------------------------------


def _mlm_loss_from_logits(logits, labels, cfg: ModelConfig):
    where = labels != IGNORE
    count = int(where.sum())
    if count == 0:
        raise NoMaskedPositions("batch has no masked positions")
    probs = output_probs(logits, cfg)  # (B, V, N)
    b_idx, n_idx = np.nonzero(where)
    y = labels[b_idx, n_idx]
    picked = probs[b_idx, y, n_idx]
    loss = float(-np.sum(np.log(picked)) / count)
    dlogits = np.zeros_like(logits)
    dlogits[b_idx, :, n_idx] = probs[b_idx, :, n_idx]
    dlogits[b_idx, y, n_idx] -= 1.0
    return loss, dlogits / count


def loss_and_grads(params: dict, cfg: ModelConfig, inputs, labels):
    """Mean cross-entropy over masked positions and gradients for every parameter."""
    res = forward_tokens(inputs, params, cfg, keep_cache=True)
    loss, dlogits = _mlm_loss_from_logits(res.logits, np.asarray(labels), cfg)
    return loss, backward(params, cfg, res.cache, dlogits=dlogits)


def mlm_loss(params: dict, cfg: ModelConfig, inputs, labels) -> float:
    res = forward_tokens(inputs, params, cfg)
    return _mlm_loss_from_logits(res.logits, np.asarray(labels), cfg)[0]


# -- optimiser ----------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, betas=(0.9, 0.98),
               eps: float = 1e-6, weight_decay: float = 0.0, names=None) -> None:
    """In-place decoupled-weight-decay Adam update.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in (names if names is not None else grads):
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p = params[name]
        p -= lr * ((m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p)


def lr_at(step: int, cfg: TrainConfig, total: int | None = None) -> float:
    """Linear warmup to ``cfg.lr``, then linear decay towards zero at ``total``."""
    total = cfg.steps if total is None else total
    warm = min(cfg.warmup, total)
    if warm and step < warm:
        return cfg.lr * (step + 1) / warm
    return cfg.lr * max(total - step, 0) / max(total - warm, 1)


# -- pretraining --------------------------------------------------------------


@dataclass
class TrainRun:
    checkpoint: Checkpoint
    losses: list[float]


def _train_mlm(params, model_cfg, corpus_ids, vocab, cfg: TrainConfig, steps: int, rng, losses, start: int = 0):
    state = AdamState()
    for step in range(steps):
        inputs, labels = mlm_batch(corpus_ids, vocab, cfg, rng, model_cfg.max_seq_len)
        try:
            loss, grads = loss_and_grads(params, model_cfg, inputs, labels)
        except NoMaskedPositions:
            losses.append(float("nan"))
            continue
        lr = lr_at(start + step, cfg, start + steps)
        adamw_step(params, grads, state, lr, cfg.betas, cfg.eps, cfg.weight_decay)
        losses.append(loss)


def pretrain(cfg: TrainConfig, corpus_ids, model_cfg: ModelConfig, vocab: Vocab) -> TrainRun:
    """Train from a seeded near-zero init; everything is a function of the seed."""
    if model_cfg.vocab_size < len(vocab):
        raise ConfigError(f"model vocab {model_cfg.vocab_size} smaller than tokenizer vocab {len(vocab)}")
    rng = make_rng(cfg.seed)
    params = init_params(model_cfg, rng, cfg.init_std)
    losses: list[float] = []
    _train_mlm(params, model_cfg, corpus_ids, vocab, cfg, cfg.steps, rng, losses)
    ckpt = Checkpoint(config=model_cfg, params=params, step=cfg.steps,
                      meta={"train": cfg.to_dict(), "stage": "pretrain"})
    return TrainRun(ckpt, losses)


def surgery(ckpt: Checkpoint) -> Checkpoint:
    """Switch a softmax-trained checkpoint to Softmax1 attention; parameters untouched."""
    if ckpt.config.variant is AttentionVariant.SOFTMAX1:
        raise AlreadyOutlierFree("checkpoint already uses softmax1 attention")
    out = ckpt.copy(config=ckpt.config.replace(variant=AttentionVariant.SOFTMAX1.value))
    out.meta["surgery_step"] = ckpt.step
    return out


def continue_training(ckpt: Checkpoint, corpus_ids, vocab: Vocab, cfg: TrainConfig, steps: int,
                      seed_offset: int = 1) -> TrainRun:
    """Resume MLM training for ``steps`` more steps.

    The schedule is read as one run of ``ckpt.step + steps`` steps, so the
    continuation takes its tail: small, decaying learning rates with no second
    warmup. The optimiser state starts fresh since checkpoints hold parameters only.
    """
    params = {k: v.copy() for k, v in ckpt.params.items()}
    rng = make_rng(cfg.seed + seed_offset * 1_000_003)
    losses: list[float] = []
    _train_mlm(params, ckpt.config, corpus_ids, vocab, cfg, steps, rng, losses, start=ckpt.step)
    meta = dict(ckpt.meta)
    meta["continued_steps"] = steps
    return TrainRun(ckpt.copy(params=params, step=ckpt.step + steps, meta=meta), losses)


def eval_batches(corpus_ids, vocab: Vocab, cfg: TrainConfig, max_len: int, n_batches: int = 128, seed: int = 12345):
    rng = make_rng(seed)
    return [mlm_batch(corpus_ids, vocab, cfg, rng, max_len) for _ in range(n_batches)]


def eval_loss(ckpt: Checkpoint, batches) -> float:
    return float(np.mean([mlm_loss(ckpt.params, ckpt.config, x, y) for x, y in batches]))


# -- classification -----------------------------------------------------------


@dataclass
class MccCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "MccCounts":
        t = np.asarray(y_true).astype(bool)
        p = np.asarray(y_pred).astype(bool)
        return cls(tp=int(np.sum(t & p)), tn=int(np.sum(~t & ~p)),
                   fp=int(np.sum(~t & p)), fn=int(np.sum(t & ~p)))


def mcc(counts: MccCounts) -> float:
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return float((tp * tn - fp * fn) / math.sqrt(denom))


def pad_batch(seqs, vocab: Vocab, max_len: int):
    """Frame with [CLS]/[SEP], truncate to ``max_len`` and right-pad."""
    rows = [[vocab.cls_id] + list(s)[: max_len - 2] + [vocab.sep_id] for s in seqs]
    n = max(len(r) for r in rows)
    tokens = np.full((len(rows), n), vocab.pad_id, dtype=np.int64)
    valid = np.zeros((len(rows), n), dtype=bool)
    for i, r in enumerate(rows):
        tokens[i, : len(r)] = r
        valid[i, : len(r)] = True
    return tokens, valid


def pooled_logits(params, cfg, head, tokens, valid, keep_cache=False):
    res = forward_tokens(tokens, params, cfg, keep_cache=keep_cache, valid=valid)
    w = valid[:, None, :].astype(np.float64)
    count = w.sum(axis=-1)
    pooled = (res.hidden * w).sum(axis=-1) / count  # (B, D)
    logits = pooled @ head["w"].T + head["b"]
    return logits, pooled, res, w / count[..., None]


def classifier_loss_and_grads(params, cfg, head, tokens, valid, labels, need_model_grads=True):
    logits, pooled, res, weights = pooled_logits(params, cfg, head, tokens, valid, keep_cache=need_model_grads)
    labels = np.asarray(labels)
    p = softmax(logits, axis=-1)
    B = len(labels)
    loss = float(-np.mean(np.log(p[np.arange(B), labels])))
    dlog = p.copy()
    dlog[np.arange(B), labels] -= 1.0
    dlog /= B
    head_grads = {"w": dlog.T @ pooled, "b": dlog.sum(axis=0)}
    model_grads = None
    if need_model_grads:
        dpooled = dlog @ head["w"]  # (B, D)
        dhidden = dpooled[:, :, None] * weights
        model_grads = backward(params, cfg, res.cache, dhidden=dhidden)
    return loss, head_grads, model_grads


def init_head(cfg: ModelConfig, rng, n_classes: int = 2, std: float = 0.02) -> dict:
    return {"w": rng.normal(0.0, std, size=(n_classes, cfg.model_dim)), "b": np.zeros(n_classes)}


def predict(params, cfg, head, seqs, vocab, batch_size: int = 64) -> np.ndarray:
    preds = []
    for i in range(0, len(seqs), batch_size):
        tokens, valid = pad_batch(seqs[i:i + batch_size], vocab, cfg.max_seq_len)
        logits, *_ = pooled_logits(params, cfg, head, tokens, valid)
        preds.append(np.argmax(logits, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


@dataclass
class FinetuneResult:
    head: dict
    mcc: float
    counts: MccCounts
    losses: list[float]
    params: dict
    adapters: object = None


def finetune_classifier(ckpt: Checkpoint, train, test, vocab: Vocab, mode: str = "full", steps: int = 200,
                        lr: float = 3e-3, batch_size: int = 16, seed: int = 0, rank: int = 8,
                        alpha: float = 16.0, weight_decay: float = 0.01, targets=None) -> FinetuneResult:
    """Fine-tune a mean-pooled linear head on ``train`` and report MCC on ``test``.

    ``train`` / ``test`` are ``(token_id_lists, labels)``. Modes:
    ``full`` trains every parameter, ``lora`` / ``qlora`` / ``loftq`` train
    low-rank adapters on a frozen base (4-bit fake-quantised for the latter
    two), ``frozen`` trains nothing and only evaluates the random head.
    """
    from . import lora

    x_train, y_train = train
    x_test, y_test = test
    if len(set(y_train)) < 2:
        raise SingleClassDataset("training labels contain a single class")
    cfg = ckpt.config
    rng = make_rng(seed)
    head = init_head(cfg, rng)
    params = {k: v.copy() for k, v in ckpt.params.items()}
    check_params(params, cfg)
    adapters = None
    if mode in ("lora", "qlora", "loftq"):
        base, adapters = lora.init_trainable_adapters(params, cfg, mode, rank, alpha, rng, targets)
    elif mode not in ("full", "frozen"):
        raise ConfigError(f"unknown fine-tuning mode {mode!r}")

    state = AdamState()
    losses: list[float] = []
    if mode != "frozen":
        for step in range(steps):
            idx = rng.integers(0, len(x_train), size=batch_size)
            tokens, valid = pad_batch([x_train[i] for i in idx], vocab, cfg.max_seq_len)
            labels = [y_train[i] for i in idx]
            if adapters is not None:
                params = lora.merge_params(base, adapters)
            loss, hg, mg = classifier_loss_and_grads(params, cfg, head, tokens, valid, labels)
            losses.append(loss)
            if mode == "full":
                grads = dict(mg)
                tparams = params
            else:
                grads = lora.adapter_grads(adapters, mg)
                tparams = lora.adapter_param_view(adapters)
            grads.update({"cls." + k: v for k, v in hg.items()})
            tparams = dict(tparams)
            tparams.update({"cls." + k: v for k, v in head.items()})
            adamw_step(tparams, grads, state, lr, weight_decay=weight_decay)
        if adapters is not None:
            params = lora.merge_params(base, adapters)

    preds = predict(params, cfg, head, x_test, vocab)
    counts = MccCounts.from_predictions(y_test, preds)
    return FinetuneResult(head=head, mcc=mcc(counts), counts=counts, losses=losses, params=params,
                          adapters=adapters)
