"""Synthetic DNA corpora and a character-level BPE tokenizer.

BPE runs directly on raw ``ACGT`` strings with no pre-tokenization: each
sequence is one "word". Training greedily merges the most frequent adjacent
pair, breaking ties by the lexicographically smallest ``(left, right)``.
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyCorpus, InvalidCharacter, UnknownId
from .jsonio import read_json, write_json
from .tensor_core import make_rng

BASES = ("A", "C", "G", "T")
SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
VOCAB_VERSION = 1


@dataclass
class Vocab:
    merges: list[tuple[str, str]]
    tokens: list[str]
    specials: tuple[str, ...] = SPECIALS
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.merges = [tuple(m) for m in self.merges]
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        self._patterns = [
            (re.compile(r"(?<= )" + re.escape(a) + " " + re.escape(b) + r"(?= )"), a + b)
            for a, b in self.merges
        ]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.token_to_id["[PAD]"]

    @property
    def cls_id(self) -> int:
        return self.token_to_id["[CLS]"]

    @property
    def sep_id(self) -> int:
        return self.token_to_id["[SEP]"]

    @property
    def mask_id(self) -> int:
        return self.token_to_id["[MASK]"]

    @property
    def special_ids(self) -> list[int]:
        return [self.token_to_id[s] for s in self.specials]

    def to_dict(self) -> dict:
        return {"version": VOCAB_VERSION, "specials": list(self.specials),
                "merges": [list(m) for m in self.merges], "tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        if d.get("version") != VOCAB_VERSION:
            raise ValueError(f"unsupported vocab version {d.get('version')}")
        return cls(merges=[tuple(m) for m in d["merges"]], tokens=list(d["tokens"]),
                   specials=tuple(d["specials"]))

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_dict(read_json(path))


def _check_alphabet(seq: str) -> None:
    bad = set(seq) - set(BASES)
    if bad:
        raise InvalidCharacter(f"characters outside ACGT: {''.join(sorted(bad))}")


def _merge_pair(symbols: list[str], a: str, b: str) -> list[str]:
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def bpe_train(corpus, target_size: int = 64, min_pair_count: int = 2) -> Vocab:
    """Learn merges until the vocabulary (specials included) reaches ``target_size``.

    Stops early once the best pair occurs fewer than ``min_pair_count`` times.
    """
    if isinstance(corpus, str):
        corpus = [corpus]
    corpus = [s for s in corpus if s]
    if not corpus:
        raise EmptyCorpus("cannot train a tokenizer on an empty corpus")
    for s in corpus:
        _check_alphabet(s)
    tokens = list(SPECIALS) + list(BASES)
    known = set(tokens)
    words = Counter(corpus)
    seqs = {w: list(w) for w in words}
    merges: list[tuple[str, str]] = []
    while len(tokens) < target_size:
        pairs: Counter = Counter()
        for w, count in words.items():
            sym = seqs[w]
            for pair in zip(sym, sym[1:]):
                pairs[pair] += count
        if not pairs:
            break
        best_count = max(pairs.values())
        if best_count < min_pair_count:
            break
        a, b = min(p for p, c in pairs.items() if c == best_count)
        merges.append((a, b))
        for w in seqs:
            seqs[w] = _merge_pair(seqs[w], a, b)
        if a + b not in known:
            known.add(a + b)
            tokens.append(a + b)
    return Vocab(merges=merges, tokens=tokens)


def tokenize(seq: str, vocab: Vocab) -> list[str]:
    """Split ``seq`` into token strings by replaying merges in learned order."""
    _check_alphabet(seq)
    if not seq:
        return []
    text = " " + " ".join(seq) + " "
    for pattern, joined in vocab._patterns:
        if " " not in text.strip():
            break
        text = pattern.sub(joined, text)
    return text.split()


def encode(seq: str, vocab: Vocab) -> list[int]:
    ids = vocab.token_to_id
    return [ids[t] for t in tokenize(seq, vocab)]


def decode(ids, vocab: Vocab) -> str:
    specials = set(vocab.specials)
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab.tokens):
            raise UnknownId(f"token id {i} not in vocabulary")
        tok = vocab.tokens[i]
        if tok not in specials:
            out.append(tok)
    return "".join(out)


# -- corpora ------------------------------------------------------------------


@dataclass
class CorpusSpec:
    """Synthetic corpus recipe.

    Every sequence is either i.i.d. uniform bases or, with probability
    ``repeat_rate``, a tandem repeat of a random unit whose length is drawn
    from ``repeat_unit``. Motifs are then planted once per sequence at their
    rates. Lengths are in bases and never exceed ``max_seq_len`` so a framed
    sequence always fits the model window.
    """

    num_sequences: int = 512
    min_len: int = 40
    max_len: int = 62
    motifs: list[tuple[str, float]] = field(default_factory=lambda: [("TATAAA", 0.8), ("GGCGCC", 0.5)])
    repeat_rate: float = 0.5
    repeat_unit: tuple[int, int] = (4, 12)
    max_seq_len: int = 64
    seed: int = 0

    def __post_init__(self):
        self.motifs = [(str(m), float(r)) for m, r in self.motifs]
        self.repeat_unit = tuple(int(u) for u in self.repeat_unit)
        if not 10 <= self.min_len <= self.max_len <= self.max_seq_len:
            raise ValueError("need 10 <= min_len <= max_len <= max_seq_len")
        if not 0.0 <= self.repeat_rate <= 1.0:
            raise ValueError(f"repeat rate {self.repeat_rate} outside [0, 1]")
        lo, hi = self.repeat_unit
        if not 1 <= lo <= hi:
            raise ValueError("repeat unit range must satisfy 1 <= lo <= hi")
        for m, r in self.motifs:
            _check_alphabet(m)
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"motif rate {r} outside [0, 1]")
            if len(m) > self.min_len:
                raise ValueError(f"motif {m!r} longer than min_len")

    def to_dict(self) -> dict:
        return {"num_sequences": self.num_sequences, "min_len": self.min_len, "max_len": self.max_len,
                "motifs": [list(m) for m in self.motifs], "repeat_rate": self.repeat_rate,
                "repeat_unit": list(self.repeat_unit), "max_seq_len": self.max_seq_len, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        d["motifs"] = [tuple(m) for m in d.get("motifs", [])]
        return cls(**d)


def _random_dna(rng: np.random.Generator, n: int) -> list[str]:
    return [BASES[i] for i in rng.integers(0, 4, size=n)]


def gen_corpus(spec: CorpusSpec) -> list[str]:
    """Seeded corpus: uniform or tandem-repeat background, then planted motifs."""
    rng = make_rng(spec.seed)
    out = []
    for _ in range(spec.num_sequences):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        if spec.repeat_rate > 0 and rng.random() < spec.repeat_rate:
            unit = _random_dna(rng, int(rng.integers(spec.repeat_unit[0], spec.repeat_unit[1] + 1)))
            chars = (unit * (n // len(unit) + 1))[:n]
        else:
            chars = _random_dna(rng, n)
        for motif, rate in spec.motifs:
            if rng.random() < rate:
                pos = int(rng.integers(0, n - len(motif) + 1))
                chars[pos:pos + len(motif)] = list(motif)
        out.append("".join(chars))
    return out


def gen_task(num_sequences: int = 800, length: int = 24, motif: str = "TATAAA", seed: int = 0, copies: int = 1):
    """Balanced binary task: label 1 sequences carry ``motif``, label 0 never do."""
    _check_alphabet(motif)
    rng = make_rng(seed)
    seqs, labels = [], []
    for i in range(num_sequences):
        label = i % 2
        while True:
            chars = _random_dna(rng, length)
            if label:
                for _ in range(copies):
                    pos = int(rng.integers(0, length - len(motif) + 1))
                    chars[pos:pos + len(motif)] = list(motif)
            s = "".join(chars)
            if (motif in s) == bool(label):
                break
        seqs.append(s)
        labels.append(label)
    order = rng.permutation(num_sequences)
    return [seqs[i] for i in order], [labels[i] for i in order]


def write_corpus(path, sequences) -> None:
    Path(path).write_text("".join(s + "\n" for s in sequences), encoding="utf-8")


def read_corpus(path) -> list[str]:
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def write_task(path, sequences, labels) -> None:
    Path(path).write_text("".join(f"{y}\t{s}\n" for s, y in zip(sequences, labels)), encoding="utf-8")


def read_task(path):
    seqs, labels = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        y, s = line.split("\t")
        labels.append(int(y))
        seqs.append(s.strip())
    return seqs, labels


def frame_ids(ids, vocab: Vocab, max_len: int) -> list[int]:
    """``[CLS] ids [SEP]``, truncating the body so the result fits ``max_len``."""
    if max_len < 3:
        raise ValueError("max_len must leave room for [CLS], [SEP] and one token")
    return [vocab.cls_id] + list(ids)[: max_len - 2] + [vocab.sep_id]


def encode_sample(sequences, vocab: Vocab, max_len: int, limit: int | None = None) -> list[np.ndarray]:
    """Encode and frame up to ``limit`` sequences for evaluation or calibration."""
    seqs = list(sequences)[:limit] if limit is not None else list(sequences)
    return [np.asarray(frame_ids(encode(s, vocab), vocab, max_len), dtype=np.int64) for s in seqs]
