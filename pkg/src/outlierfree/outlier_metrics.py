"""Outlier statistics over activation traces: kurtosis and maximum infinity norm."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .attention import model_forward
from .errors import DegenerateSample, EmptySample
from .jsonio import write_json
from .trace import ActivationTrace, Probe  # noqa: F401  (re-exported)

KURTOSIS_KINDS = ("ffn_output", "layernorm_output")


def kurtosis(x) -> float:
    """``n * sum(d^4) / (sum(d^2))^2`` with ``d = x - mean(x)``; no -3 offset."""
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    if n < 2:
        raise DegenerateSample("kurtosis needs at least two values")
    d = x - x.mean()
    d2 = d * d
    m2 = d2.sum()
    if m2 < 1e-30:
        raise DegenerateSample("kurtosis undefined for constant input")
    return float(n * np.sum(d2 * d2) / (m2 * m2))


@dataclass
class ProbeStats:
    name: str
    kind: str
    layer: int
    kurtosis: float | None
    inf_norm: float


@dataclass
class OutlierReport:
    per_probe: list[ProbeStats]
    avg_kurtosis: float | None
    max_inf_norm: float
    model_id: str = ""
    n_sequences: int = 0
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "n_sequences": self.n_sequences,
            "avg_kurtosis": self.avg_kurtosis,
            "max_inf_norm": self.max_inf_norm,
            "per_probe": [
                {"name": p.name, "kind": p.kind, "layer": p.layer, "kurtosis": p.kurtosis, "inf_norm": p.inf_norm}
                for p in self.per_probe
            ],
            "meta": self.meta,
        }

    def write_json(self, path) -> None:
        write_json(path, self.to_dict())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["probe", "kind", "layer", "kurtosis", "inf_norm"])
        for p in self.per_probe:
            w.writerow([p.name, p.kind, p.layer, "" if p.kurtosis is None else format(p.kurtosis, ".17g"),
                        format(p.inf_norm, ".17g")])
        return buf.getvalue()


def summarize(pooled: dict[str, list[np.ndarray]], meta: dict[str, tuple[str, int]],
              model_id: str = "", n_sequences: int = 0) -> OutlierReport:
    """Build a report from per-probe lists of arrays (pooled before kurtosis)."""
    stats = []
    for name, arrays in pooled.items():
        kind, layer = meta[name]
        flat = np.concatenate([np.ravel(a) for a in arrays])
        k = None
        if kind in KURTOSIS_KINDS:
            try:
                k = kurtosis(flat)
            except DegenerateSample:
                k = None
        stats.append(ProbeStats(name, kind, layer, k, float(np.max(np.abs(flat)))))
    valid = [s.kurtosis for s in stats if s.kurtosis is not None]
    avg = float(np.mean(valid)) if valid else None
    max_inf = max((s.inf_norm for s in stats), default=0.0)
    return OutlierReport(stats, avg, max_inf, model_id, n_sequences)


def collect_report(ckpt, sample, model_id: str = "", hooks=None) -> OutlierReport:
    """Run every sequence through the model and pool each probe across the sample."""
    if len(sample) == 0:
        raise EmptySample("need at least one sequence")
    pooled: dict[str, list[np.ndarray]] = {}
    meta: dict[str, tuple[str, int]] = {}
    for seq in sample:
        _, trace = model_forward(np.asarray(seq), ckpt, hooks)
        for p in trace:
            pooled.setdefault(p.name, []).append(p.tensor)
            meta[p.name] = (p.kind, p.layer)
    return summarize(pooled, meta, model_id, len(sample))
