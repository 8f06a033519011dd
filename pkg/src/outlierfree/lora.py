"""Low-rank adapters.

Two halves live here. The first is the plain LoRA / QLoRA / LoftQ machinery used
for fine-tuning. The second is an exact construction: given a frozen formal-mode
model and a target model of the same shape, build rank-limited adapters on the
attention and output-layer weights (plus rewritten FFN biases) so that the
adapted model computes the same function as the target.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import ModelConfig, formal_apply, init_params
from .checkpoint import Checkpoint
from .errors import (
    ConfigMismatch,
    InvalidBits,
    NonSingularityViolated,
    RankConditionViolated,
    ShapeMismatch,
    Singular,
    TargetMissing,
)
from .quantizer import fake_quant
from .tensor_core import RANK_TOL, inverse, is_singular, make_rng, spectral_norm, svd

# -- adapters -----------------------------------------------------------------


@dataclass
class LoraAdapter:
    """``delta = (alpha / rank) * a @ b`` with ``a`` (out x r) and ``b`` (r x in)."""

    target: str
    a: np.ndarray
    b: np.ndarray
    alpha: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[1] != self.b.shape[0]:
            raise ShapeMismatch(f"adapter {self.target}: a {self.a.shape} and b {self.b.shape} do not chain")
        if self.rank < 1 or self.rank > min(self.a.shape[0], self.b.shape[1]):
            raise ShapeMismatch(f"adapter {self.target}: rank {self.rank} out of range")

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def shape(self) -> tuple[int, int]:
        return self.a.shape[0], self.b.shape[1]

    def delta(self) -> np.ndarray:
        return self.scale * (self.a @ self.b)


@dataclass
class AdapterSet:
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)
    replaced_biases: dict[str, np.ndarray] = field(default_factory=dict)

    def to_checkpoint(self, config, meta: dict | None = None) -> Checkpoint:
        params = {}
        for t, ad in self.adapters.items():
            params[f"adapter.{t}.a"] = ad.a
            params[f"adapter.{t}.b"] = ad.b
        for name, v in self.replaced_biases.items():
            params[f"bias.{name}"] = np.asarray(v, dtype=np.float64)
        m = dict(meta or {})
        m["alphas"] = {t: ad.alpha for t, ad in self.adapters.items()}
        return Checkpoint(config=config, params=params, kind="adapters", dtype="f64", meta=m)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "AdapterSet":
        alphas = ckpt.meta.get("alphas", {})
        out = cls()
        for name, arr in ckpt.params.items():
            if name.startswith("bias."):
                out.replaced_biases[name[len("bias."):]] = arr
            elif name.startswith("adapter.") and name.endswith(".a"):
                t = name[len("adapter."):-2]
                out.adapters[t] = LoraAdapter(t, arr, ckpt.params[f"adapter.{t}.b"], float(alphas[t]))
        return out


def adapter_from_delta(target: str, delta, rank: int) -> LoraAdapter:
    """Factor a matrix of rank <= ``rank`` into an adapter with unit scale."""
    delta = np.asarray(delta, dtype=np.float64)
    rank = max(1, min(rank, *delta.shape))
    if not np.any(delta):
        return LoraAdapter(target, np.zeros((delta.shape[0], rank)), np.zeros((rank, delta.shape[1])), float(rank))
    s = svd(delta)
    root = np.sqrt(s.sigma[:rank])
    return LoraAdapter(target, s.u[:, :rank] * root, root[:, None] * s.v[:, :rank].T, float(rank))


def apply_adapters(ckpt: Checkpoint, adapters: AdapterSet) -> Checkpoint:
    """Merge adapters into a copy of ``ckpt``; all-zero deltas leave bytes untouched."""
    params = {k: v.copy() for k, v in ckpt.params.items()}
    for t, ad in adapters.adapters.items():
        if t not in params:
            raise TargetMissing(f"adapter target {t} not in checkpoint")
        if params[t].shape != ad.shape:
            raise ShapeMismatch(f"adapter {t} has shape {ad.shape}, weight has {params[t].shape}")
        d = ad.delta()
        if np.any(d):
            params[t] = params[t] + d
    for name, v in adapters.replaced_biases.items():
        if name not in params:
            raise TargetMissing(f"bias {name} not in checkpoint")
        v = np.asarray(v, dtype=np.float64)
        if v.shape != params[name].shape:
            raise ShapeMismatch(f"bias {name} has shape {v.shape}, expected {params[name].shape}")
        params[name] = v.copy()
    return ckpt.copy(params=params)


# -- low-rank approximation ---------------------------------------------------


def lra(w, r: int) -> np.ndarray:
    """Best rank-``r`` approximation (truncated SVD)."""
    if r < 0:
        raise ValueError("rank must be non-negative")
    w = np.asarray(w, dtype=np.float64)
    if r >= min(w.shape):
        return w.copy()
    if r == 0:
        return np.zeros_like(w)
    return svd(w).reconstruct(r)


def _rank(diff, *operands) -> int:
    """Numerical rank of ``diff``, ignoring rounding noise relative to the operands."""
    sigma = svd(diff).sigma
    scale = max([sigma[0] if sigma.size else 0.0] + [spectral_norm(o) for o in operands])
    if scale == 0.0:
        return 0
    return int(np.sum(sigma > RANK_TOL * scale))


def lemma_product_update(w_factors, w_bar, R: int):
    """Rank-``R`` updates to each factor so the product best matches ``w_bar``.

    The error ``E = w_bar - prod(W)`` is split into consecutive chunks of ``R``
    singular components. Factors are updated right to left: factor ``l``
    absorbs its chunk as ``inv(W_1..W_{l-1}) E_chunk inv(W'_{l+1}..W'_L)``
    where the right-hand factors are the already-updated ones. The product then
    equals ``prod(W) + LRA_{RL}(E)`` and the spectral error is
    ``sigma_{RL+1}(E)``.

    Returns ``(deltas, achieved_error)``.
    """
    factors = [np.asarray(w, dtype=np.float64) for w in w_factors]
    w_bar = np.asarray(w_bar, dtype=np.float64)
    L = len(factors)
    if L == 0 or R < 1:
        raise ValueError("need at least one factor and R >= 1")
    for w in factors:
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape != w_bar.shape:
            raise ShapeMismatch("factors must be square and match the target")
    try:
        lefts = [np.eye(w_bar.shape[0])]
        for w in factors[:-1]:
            lefts.append(lefts[-1] @ w)
        left_inv = [inverse(m) for m in lefts]
        for w in factors:
            inverse(w)
    except Singular as exc:
        raise NonSingularityViolated(f"frozen factor is singular: {exc}") from exc

    product = lefts[-1] @ factors[-1]
    err = w_bar - product
    s = svd(err)
    keep = _rank(err, w_bar, product)
    n_used = min(R * L, keep)
    deltas = [np.zeros_like(w) for w in factors]
    updated = list(factors)
    right = np.eye(w_bar.shape[0])
    for chunk, l in enumerate(reversed(range(L))):
        lo, hi = chunk * R, min((chunk + 1) * R, n_used)
        if hi > lo:
            e = (s.u[:, lo:hi] * s.sigma[lo:hi]) @ s.v[:, lo:hi].T
            try:
                right_inv = inverse(right)
            except Singular as exc:
                raise NonSingularityViolated(f"updated partial product is singular: {exc}") from exc
            deltas[l] = left_inv[l] @ e @ right_inv
            updated[l] = factors[l] + deltas[l]
        right = updated[l] @ right
    achieved = spectral_norm(right - w_bar)
    return deltas, achieved


# -- exact construction for formal-mode models --------------------------------


def _check_pair(frozen: Checkpoint, target: Checkpoint):
    cf, ct = frozen.config, target.config
    if cf.to_dict() != ct.to_dict():
        raise ConfigMismatch("frozen and target configurations differ")
    if not cf.formal:
        raise ConfigMismatch("the exact construction needs formal block mode")
    if not cf.model_dim == cf.ffn_dim == cf.vocab_size:
        raise ConfigMismatch("the exact construction needs ffn_dim == model_dim == vocab_size")
    return cf


def _square_weights(cfg) -> list[str]:
    names = []
    for l in range(cfg.layers):
        for h in range(cfg.heads):
            names += [f"l{l}.h{h}.{w}" for w in ("wq", "wk", "wv", "wo")]
        names += [f"l{l}.w1", f"l{l}.w2"]
    return names + ["head.w"]


@dataclass
class FactorProblem:
    """One product the construction has to hit: ``family`` in key_query / value_output / output_layer."""

    family: str
    layer: int
    head: int | None
    names: tuple[str, str]
    factors: tuple[np.ndarray, np.ndarray]
    target: np.ndarray

    @property
    def error(self) -> np.ndarray:
        return self.target - self.factors[0] @ self.factors[1]


def factor_problems(frozen: Checkpoint, target: Checkpoint) -> list[FactorProblem]:
    """Every two-factor product the adapted model must reproduce.

    Past the first block the frozen model sees ``C^-1 Z`` where ``C`` is
    ``W2bar W2^-1`` of the previous block, so the score and value targets are
    conjugated by ``C``.
    """
    cfg = _check_pair(frozen, target)
    P, T = frozen.params, target.params
    out = []
    conj = None
    for l in range(cfg.layers):
        p = f"l{l}."
        w1_inv = inverse(P[p + "w1"])
        for h in range(cfg.heads):
            q = f"{p}h{h}."
            kq = T[q + "wk"].T @ T[q + "wq"]
            ov = w1_inv @ T[p + "w1"] @ T[q + "wo"] @ T[q + "wv"]
            if conj is not None:
                kq = conj.T @ kq @ conj
                ov = ov @ conj
            out.append(FactorProblem("key_query", l, h, (q + "wk", q + "wq"), (P[q + "wk"].T, P[q + "wq"]), kq))
            out.append(FactorProblem("value_output", l, h, (q + "wo", q + "wv"), (P[q + "wo"], P[q + "wv"]), ov))
        conj = T[p + "w2"] @ inverse(P[p + "w2"])
    last = f"l{cfg.layers - 1}.w2"
    out.append(FactorProblem("output_layer", cfg.layers - 1, None, ("head.w", last),
                             (P["head.w"], P[last]), T["head.w"] @ T[last]))
    return out


@dataclass
class NonSingularityReport:
    failures: list[tuple[str, int | None, int | None, int | None, str]] = field(default_factory=list)
    checked: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checked": self.checked,
                "failures": [{"family": f, "layer": l, "head": h, "r": r, "detail": d}
                             for f, l, h, r, d in self.failures]}


def check_nonsingularity(frozen: Checkpoint, target: Checkpoint, R: int) -> NonSingularityReport:
    """Check every frozen and target weight, and ``W + LRA_r(E)`` for each product and ``r = 1..R``."""
    cfg = _check_pair(frozen, target)
    report = NonSingularityReport()
    for which, ck in (("frozen", frozen), ("target", target)):
        for name in _square_weights(cfg):
            report.checked += 1
            if is_singular(ck.params[name]):
                report.failures.append((which, None, None, None, name))
    if report.failures:
        return report
    for prob in factor_problems(frozen, target):
        base = prob.factors[0] @ prob.factors[1]
        e = prob.error
        for r in range(1, R + 1):
            report.checked += 1
            if is_singular(base + lra(e, r)):
                report.failures.append((prob.family, prob.layer, prob.head, r, "+".join(prob.names)))
    return report


@dataclass
class FunctionalityGap:
    gaps: list[int]

    @property
    def required_rank(self) -> int:
        return max((math.ceil(g / 2) for g in self.gaps), default=0)

    def to_dict(self) -> dict:
        return {"gaps": list(self.gaps), "required_rank": self.required_rank}


def functionality_gap(frozen: Checkpoint, target: Checkpoint) -> FunctionalityGap:
    """Per-block rank of the target-vs-frozen discrepancy, plus one entry for the output layer."""
    cfg = _check_pair(frozen, target)
    P, T = frozen.params, target.params
    gaps = []
    for l in range(cfg.layers):
        p = f"l{l}."
        g = 0
        for h in range(cfg.heads):
            q = f"{p}h{h}."
            kq_t = T[q + "wk"].T @ T[q + "wq"]
            kq_f = P[q + "wk"].T @ P[q + "wq"]
            ov_t = T[p + "w1"] @ T[q + "wo"] @ T[q + "wv"]
            ov_f = P[p + "w1"] @ P[q + "wo"] @ P[q + "wv"]
            if l > 0:
                w2_t, w2_f = T[f"l{l - 1}.w2"], P[f"l{l - 1}.w2"]
                kq_t, kq_f = w2_t.T @ kq_t @ w2_t, w2_f.T @ kq_f @ w2_f
                ov_t, ov_f = ov_t @ w2_t, ov_f @ w2_f
            g = max(g, _rank(kq_t - kq_f, kq_t, kq_f), _rank(ov_t - ov_f, ov_t, ov_f))
        gaps.append(g)
    last = f"l{cfg.layers - 1}.w2"
    out_t, out_f = T["head.w"] @ T[last], P["head.w"] @ P[last]
    gaps.append(_rank(out_t - out_f, out_t, out_f))
    return FunctionalityGap(gaps)


def construct_adapters(frozen: Checkpoint, target: Checkpoint, R: int) -> AdapterSet:
    """Rank-``R`` adapters plus bias rewrites making ``frozen`` compute ``target``."""
    cfg = _check_pair(frozen, target)
    gap = functionality_gap(frozen, target)
    if R < gap.required_rank:
        raise RankConditionViolated(f"R={R} below required rank {gap.required_rank} (gaps {gap.gaps})")
    report = check_nonsingularity(frozen, target, R)
    if not report.passed:
        f = report.failures[0]
        raise NonSingularityViolated(f"non-singularity fails for {f[0]} (layer {f[1]}, head {f[2]}, r={f[3]})")
    P, T = frozen.params, target.params
    out = AdapterSet()
    for prob in factor_problems(frozen, target):
        (d0, d1), _ = lemma_product_update(prob.factors, prob.target, R)
        if prob.family == "key_query":
            d0 = d0.T  # first factor is W_K transposed
        out.adapters[prob.names[0]] = adapter_from_delta(prob.names[0], d0, R)
        out.adapters[prob.names[1]] = adapter_from_delta(prob.names[1], d1, R)
    L = cfg.layers
    for l in range(L):
        p = f"l{l}."
        out.replaced_biases[p + "b1"] = T[p + "b1"].copy()
        if l < L - 1:
            out.replaced_biases[p + "b2"] = P[p + "w2"] @ inverse(T[p + "w2"]) @ T[p + "b2"]
    wo = P["head.w"] + out.adapters["head.w"].delta()
    try:
        out.replaced_biases[f"l{L - 1}.b2"] = inverse(wo) @ T["head.w"] @ T[f"l{L - 1}.b2"]
    except Singular as exc:
        raise NonSingularityViolated(f"adapted output weight is singular: {exc}") from exc
    return out


def random_formal_pair(rng, dim: int = 4, heads: int = 1, layers: int = 1, std: float = 1.0):
    """Two independent Gaussian formal-mode checkpoints with ``F = D = V = dim``."""
    cfg = ModelConfig(layers=layers, heads=heads, model_dim=dim, ffn_dim=dim, vocab_size=dim, max_seq_len=64,
                      variant="softmax1", block_mode="formal", alibi=False)
    pair = []
    for _ in range(2):
        params = init_params(cfg, rng, std=std)
        for name in params:
            if name.endswith((".b1", ".b2")):
                params[name] = rng.normal(size=params[name].shape)
        pair.append(Checkpoint(config=cfg, params=params, dtype="f64"))
    return pair[0], pair[1]


def verify_theorem(frozen: Checkpoint, target: Checkpoint, adapters: AdapterSet, trials: int = 20,
                   rng: np.random.Generator | int | None = None, n_tokens: int = 3) -> float:
    """Max over random ``X`` in ``[-1, 1]^(D x N)`` of ``max |f(X) - fbar(X)|``."""
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = make_rng(0 if rng is None else int(rng))
    adapted = apply_adapters(frozen, adapters)
    cfg = frozen.config
    worst = 0.0
    for _ in range(trials):
        x = rng.uniform(-1.0, 1.0, size=(cfg.model_dim, n_tokens))
        dev = np.max(np.abs(formal_apply(x, adapted.params, cfg) - formal_apply(x, target.params, cfg)))
        worst = max(worst, float(dev))
    return worst


# -- quantisation-aware initialisation ----------------------------------------


def _quant_absmax(w: np.ndarray, per_channel: bool):
    if per_channel:
        return np.max(np.abs(w), axis=1, keepdims=True)
    return np.max(np.abs(w))


def loftq_init(w, bits: int = 4, r: int = 8, iters: int = 5, alpha: float | None = None,
               per_channel: bool = True, target: str = "", return_history: bool = False):
    """Alternate ``Q = quant(W - AB)`` and ``AB = LRA_r(W - Q)``.

    The quantisation grid is fixed from ``W`` itself so each half-step is a
    projection onto a fixed set; the residual ``||W - Q - AB||_F`` therefore
    never increases.
    """
    if bits not in (4, 6, 8):
        raise InvalidBits(f"loftq supports 4, 6 or 8 bits, got {bits}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    w = np.asarray(w, dtype=np.float64)
    r = max(1, min(r, *w.shape))
    absmax = _quant_absmax(w, per_channel)
    ab = np.zeros_like(w)
    history = []
    for _ in range(iters):
        q = fake_quant(w - ab, bits, absmax)
        ab = lra(w - q, r)
        history.append(float(np.linalg.norm(w - q - ab)))
    alpha = float(r if alpha is None else alpha)
    ad = adapter_from_delta(target, ab, r)
    ad = LoraAdapter(target, ad.a * (r / alpha), ad.b, alpha)
    if return_history:
        return q, ad, history
    return q, ad


# -- trainable adapters -------------------------------------------------------


def default_targets(cfg) -> list[str]:
    """Every linear weight inside the transformer blocks."""
    names = []
    for l in range(cfg.layers):
        p = f"l{l}."
        if cfg.formal:
            for h in range(cfg.heads):
                names += [f"{p}h{h}.{w}" for w in ("wq", "wk", "wv", "wo")]
        else:
            names += [p + w for w in ("wq", "wk", "wv", "wo")]
        names += [p + "w1", p + "w2"]
    return names


def init_trainable_adapters(params: dict, cfg, mode: str, rank: int, alpha: float, rng, targets=None):
    """Frozen base weights and fresh adapters for ``lora``, ``qlora`` or ``loftq``.

    ``a`` starts at zero and ``b`` Gaussian, so the initial delta is zero for
    lora / qlora. qlora freezes a 4-bit per-channel copy of each target; loftq
    starts from the alternating quantise / low-rank split instead.
    """
    targets = list(targets) if targets is not None else default_targets(cfg)
    base = {k: v.copy() for k, v in params.items()}
    adapters: dict[str, LoraAdapter] = {}
    for t in targets:
        if t not in params:
            raise TargetMissing(f"adapter target {t} not in checkpoint")
        w = params[t]
        r = min(rank, *w.shape)
        if mode == "loftq":
            base[t], adapters[t] = loftq_init(w, 4, r, iters=5, alpha=alpha, target=t)
            continue
        if mode == "qlora":
            base[t] = fake_quant(w, 4, _quant_absmax(w, True))
        elif mode != "lora":
            raise ValueError(f"unknown adapter mode {mode!r}")
        a = np.zeros((w.shape[0], r))
        b = rng.normal(0.0, 1.0 / math.sqrt(w.shape[1]), size=(r, w.shape[1]))
        adapters[t] = LoraAdapter(t, a, b, alpha)
    return base, adapters


def merge_params(base: dict, adapters: dict) -> dict:
    out = dict(base)
    for t, ad in adapters.items():
        out[t] = base[t] + ad.delta()
    return out


def adapter_param_view(adapters: dict) -> dict:
    """Name -> live adapter arrays, for in-place optimiser updates."""
    view = {}
    for t, ad in adapters.items():
        view[f"lora.{t}.a"] = ad.a
        view[f"lora.{t}.b"] = ad.b
    return view


def adapter_grads(adapters: dict, model_grads: dict) -> dict:
    """Chain rule through ``W = base + s a b``."""
    grads = {}
    for t, ad in adapters.items():
        dw = model_grads[t]
        grads[f"lora.{t}.a"] = ad.scale * (dw @ ad.b.T)
        grads[f"lora.{t}.b"] = ad.scale * (ad.a.T @ dw)
    return grads


def lora_finetune(ckpt: Checkpoint, train, test, vocab, r: int = 8, alpha: float = 16.0, steps: int = 200,
                  mode: str = "lora", **kwargs):
    """Train adapters (and a classifier head) on a labelled task; returns ``(AdapterSet, result)``."""
    from .training import finetune_classifier

    res = finetune_classifier(ckpt, train, test, vocab, mode=mode, steps=steps, rank=r, alpha=alpha, **kwargs)
    return AdapterSet(adapters=dict(res.adapters)), res
