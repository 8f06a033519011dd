"""Simulated post-training quantisation and SmoothQuant-style migration.

Weights are fake-quantised when the forward pass loads them; activations are
fake-quantised at every linear-layer input and at the attention-score matrix,
using ranges recorded during calibration. Attention probabilities are left in
full precision.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .attention import Hooks, forward_tokens, output_probs, weight_consumers
from .errors import AlphaOutOfRange, ConfigError, EmptySample, InvalidBits, MissingStats, ZeroRange

VALID_BITS = (4, 6, 8, 16)
PASS_THROUGH = 16


@dataclass(frozen=True)
class QuantSpec:
    weight_bits: int = 8
    act_bits: int = 8
    granularity: str = "per_tensor"
    symmetric: bool = True
    smoothquant_alpha: float | None = None

    def __post_init__(self):
        if self.weight_bits not in VALID_BITS or self.act_bits not in VALID_BITS:
            raise InvalidBits(f"bits must be one of {VALID_BITS}")
        if self.granularity not in ("per_tensor", "per_channel"):
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        if self.smoothquant_alpha is not None and not 0.0 <= self.smoothquant_alpha <= 1.0:
            raise AlphaOutOfRange("smoothquant alpha must lie in [0, 1]")

    @property
    def label(self) -> str:
        return f"{self.weight_bits}W/{self.act_bits}A"

    @property
    def passthrough(self) -> bool:
        return self.weight_bits == PASS_THROUGH and self.act_bits == PASS_THROUGH

    def to_dict(self) -> dict:
        return {"weight_bits": self.weight_bits, "act_bits": self.act_bits, "granularity": self.granularity,
                "symmetric": self.symmetric, "smoothquant_alpha": self.smoothquant_alpha}


def parse_bits(text: str) -> tuple[int, int]:
    """``"8W/8A"`` -> ``(8, 8)``."""
    m = re.fullmatch(r"\s*(\d+)\s*W\s*/\s*(\d+)\s*A\s*", text, flags=re.IGNORECASE)
    if not m:
        raise ConfigError(f"bit pair {text!r} is not of the form <w>W/<a>A")
    w, a = int(m.group(1)), int(m.group(2))
    if w not in VALID_BITS or a not in VALID_BITS:
        raise InvalidBits(f"bits must be one of {VALID_BITS}")
    return w, a


def _round_half_even(x):
    return np.rint(x)


def fake_quant(x, bits: int, absmax, symmetric: bool = True, minmax=None) -> np.ndarray:
    """Quantise-dequantise ``x`` on a uniform grid.

    Symmetric: ``scale = absmax / (2^(bits-1) - 1)``, round half to even, clamp
    to ``+-(2^(bits-1) - 1)``. ``absmax`` may be a scalar or anything
    broadcastable against ``x`` (per-channel ranges). Asymmetric uses
    ``minmax = (lo, hi)`` with an integer zero point over ``[0, 2^bits - 1]``.
    """
    if bits not in (4, 6, 8):
        raise InvalidBits(f"fake_quant supports 4, 6 or 8 bits, got {bits}")
    x = np.asarray(x, dtype=np.float64)
    if symmetric:
        qmax = 2 ** (bits - 1) - 1
        absmax = np.asarray(absmax, dtype=np.float64)
        zero = absmax <= 0
        if np.any(zero):
            if np.any(np.broadcast_to(zero, x.shape) & (x != 0)):
                raise ZeroRange("zero range with non-zero data")
            absmax = np.where(zero, 1.0, absmax)
        scale = absmax / qmax
        fine = scale == 0  # step below float64 resolution: nothing to round
        scale = np.where(fine, 1.0, scale)
        q = np.clip(_round_half_even(x / scale), -qmax, qmax)
        return np.where(fine, x, q * scale)
    if minmax is None:
        lo, hi = float(np.min(x)), float(np.max(x))
    else:
        lo, hi = minmax
    lo = np.minimum(np.asarray(lo, dtype=np.float64), 0.0)
    hi = np.maximum(np.asarray(hi, dtype=np.float64), 0.0)
    levels = 2 ** bits - 1
    span = hi - lo
    zero = span <= 0
    if np.any(zero):
        if np.any(np.broadcast_to(zero, x.shape) & (x != 0)):
            raise ZeroRange("zero range with non-zero data")
        span = np.where(zero, 1.0, span)
    scale = span / levels
    fine = scale == 0
    scale = np.where(fine, 1.0, scale)
    zp = _round_half_even(-lo / scale)
    q = np.clip(_round_half_even(x / scale) + zp, 0, levels)
    return np.where(fine, x, (q - zp) * scale)


# -- calibration --------------------------------------------------------------


@dataclass
class SiteStats:
    absmax: float
    lo: float
    hi: float
    channel_absmax: np.ndarray | None = None
    channel_lo: np.ndarray | None = None
    channel_hi: np.ndarray | None = None

    def update(self, other: "SiteStats") -> None:
        self.absmax = max(self.absmax, other.absmax)
        self.lo = min(self.lo, other.lo)
        self.hi = max(self.hi, other.hi)
        if self.channel_absmax is not None and other.channel_absmax is not None:
            self.channel_absmax = np.maximum(self.channel_absmax, other.channel_absmax)
            self.channel_lo = np.minimum(self.channel_lo, other.channel_lo)
            self.channel_hi = np.maximum(self.channel_hi, other.channel_hi)


def site_stats(site: str, x: np.ndarray) -> SiteStats:
    s = SiteStats(float(np.max(np.abs(x))), float(np.min(x)), float(np.max(x)))
    if not site.endswith("scores"):
        s.channel_absmax = np.max(np.abs(x), axis=(0, 2))
        s.channel_lo = np.min(x, axis=(0, 2))
        s.channel_hi = np.max(x, axis=(0, 2))
    return s


@dataclass
class CalibrationStats:
    sites: dict[str, SiteStats] = field(default_factory=dict)
    n_sequences: int = 0

    def observe(self, site: str, x: np.ndarray) -> None:
        s = site_stats(site, x)
        if site in self.sites:
            self.sites[site].update(s)
        else:
            self.sites[site] = s


class CalibrationHooks(Hooks):
    def __init__(self, stats: CalibrationStats):
        self.stats = stats

    def act(self, site, x):
        self.stats.observe(site, x)
        return x


def calibrate(ckpt, sample, spec: QuantSpec | None = None) -> CalibrationStats:
    """Running per-site min/max/absmax over the sample, in sample order."""
    if len(sample) == 0:
        raise EmptySample("calibration needs at least one sequence")
    stats = CalibrationStats()
    hooks = CalibrationHooks(stats)
    for seq in sample:
        forward_tokens(np.asarray(seq)[None], ckpt.params, ckpt.config, hooks)
        stats.n_sequences += 1
    return stats


def activation_sites(cfg) -> list[str]:
    sites = sorted(set(weight_consumers(cfg).values()))
    sites += [f"l{l}.scores" for l in range(cfg.layers)]
    return sites


# -- migration ----------------------------------------------------------------


def smoothquant_migrate(x_absmax, w_absmax, alpha: float, floor: float = 1e-8) -> np.ndarray:
    """Per-channel ``s_j = max|X_j|^alpha / max|W_j|^(1 - alpha)``."""
    if not 0.0 <= alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha {alpha} outside [0, 1]")
    x = np.maximum(np.asarray(x_absmax, dtype=np.float64), floor)
    w = np.maximum(np.asarray(w_absmax, dtype=np.float64), floor)
    return x ** alpha / w ** (1.0 - alpha)


def migration_scales(params, cfg, stats: CalibrationStats, alpha: float) -> dict[str, np.ndarray]:
    """One scale vector per activation site that feeds linear layers."""
    consumers: dict[str, list[str]] = {}
    for w, site in weight_consumers(cfg).items():
        consumers.setdefault(site, []).append(w)
    scales = {}
    for site, weights in consumers.items():
        if site not in stats.sites or stats.sites[site].channel_absmax is None:
            raise MissingStats(f"no per-channel statistics for site {site}")
        w_absmax = np.max(np.stack([np.max(np.abs(params[w]), axis=0) for w in weights]), axis=0)
        scales[site] = smoothquant_migrate(stats.sites[site].channel_absmax, w_absmax, alpha)
    return scales


class MigrationHooks(Hooks):
    """Apply ``X <- diag(1/s) X`` and ``W <- W diag(s)`` without quantising."""

    def __init__(self, cfg, scales: dict[str, np.ndarray]):
        self.scales = scales
        self.consumer = weight_consumers(cfg)

    def weight(self, name, w):
        site = self.consumer.get(name)
        if site in self.scales:
            return w * self.scales[site][None, :]
        return w

    def act(self, site, x):
        if site in self.scales:
            return x / self.scales[site][:, None]
        return x


class QuantHooks(MigrationHooks):
    def __init__(self, cfg, spec: QuantSpec, stats: CalibrationStats, scales=None):
        super().__init__(cfg, scales or {})
        self.spec = spec
        self.stats = stats

    def weight(self, name, w):
        if self.spec.weight_bits == PASS_THROUGH:
            return w
        w = super().weight(name, w)
        if self.spec.granularity == "per_channel":
            absmax = np.max(np.abs(w), axis=1, keepdims=True)
        else:
            absmax = np.max(np.abs(w))
        return fake_quant(w, self.spec.weight_bits, absmax, symmetric=True)

    def act(self, site, x):
        if self.spec.act_bits == PASS_THROUGH:
            return x
        x = super().act(site, x)
        st = self.stats.sites[site]
        s = self.scales.get(site)
        bits = self.spec.act_bits
        per_channel = self.spec.granularity == "per_channel" and st.channel_absmax is not None
        if per_channel:
            absmax = st.channel_absmax if s is None else st.channel_absmax / s
            lo = st.channel_lo if s is None else st.channel_lo / s
            hi = st.channel_hi if s is None else st.channel_hi / s
            absmax, lo, hi = absmax[:, None], lo[:, None], hi[:, None]
        elif s is not None:
            absmax = float(np.max(st.channel_absmax / s))
            lo = float(np.min(st.channel_lo / s))
            hi = float(np.max(st.channel_hi / s))
        else:
            absmax, lo, hi = st.absmax, st.lo, st.hi
        if self.spec.symmetric:
            return fake_quant(x, bits, absmax, symmetric=True)
        return fake_quant(x, bits, None, symmetric=False, minmax=(lo, hi))


@dataclass
class QuantizedModel:
    checkpoint: object
    spec: QuantSpec
    stats: CalibrationStats
    hooks: Hooks

    @property
    def config(self):
        return self.checkpoint.config

    @property
    def params(self):
        return self.checkpoint.params

    def logits(self, tokens) -> np.ndarray:
        return forward_tokens(np.asarray(tokens), self.params, self.config, self.hooks).logits

    def probs(self, tokens) -> np.ndarray:
        return output_probs(self.logits(tokens), self.config)


def quantize_model(ckpt, spec: QuantSpec, stats: CalibrationStats) -> QuantizedModel:
    if spec.passthrough:
        return QuantizedModel(ckpt, spec, stats, Hooks())
    if spec.act_bits != PASS_THROUGH or spec.smoothquant_alpha is not None:
        missing = [s for s in activation_sites(ckpt.config) if s not in stats.sites]
        if missing:
            raise MissingStats(f"calibration does not cover sites: {', '.join(missing)}")
    scales = None
    if spec.smoothquant_alpha is not None:
        scales = migration_scales(ckpt.params, ckpt.config, stats, spec.smoothquant_alpha)
    return QuantizedModel(ckpt, spec, stats, QuantHooks(ckpt.config, spec, stats, scales))


def logit_deviation(ckpt, qmodel: QuantizedModel, sample) -> float:
    """Mean absolute logit difference between full precision and quantised forwards."""
    total, count = 0.0, 0
    for seq in sample:
        t = np.asarray(seq)[None]
        ref = forward_tokens(t, ckpt.params, ckpt.config).logits
        q = qmodel.logits(t)
        total += float(np.sum(np.abs(ref - q)))
        count += ref.size
    return total / count
