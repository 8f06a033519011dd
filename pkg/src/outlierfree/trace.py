from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROBE_KINDS = ("ffn_output", "layernorm_output", "attention_probs")


@dataclass
class Probe:
    name: str
    kind: str
    layer: int
    tensor: np.ndarray


@dataclass
class ActivationTrace:
    """Ordered record of intermediate activations from one forward pass."""

    probes: list[Probe] = field(default_factory=list)

    def add(self, name: str, kind: str, layer: int, tensor: np.ndarray) -> None:
        if kind not in PROBE_KINDS:
            raise ValueError(f"unknown probe kind {kind!r}")
        if any(p.name == name for p in self.probes):
            raise ValueError(f"duplicate probe {name!r}")
        self.probes.append(Probe(name, kind, layer, tensor))

    def __iter__(self):
        return iter(self.probes)

    def __len__(self) -> int:
        return len(self.probes)

    def names(self) -> list[str]:
        return [p.name for p in self.probes]

    def get(self, name: str) -> Probe:
        for p in self.probes:
            if p.name == name:
                return p
        raise KeyError(name)
