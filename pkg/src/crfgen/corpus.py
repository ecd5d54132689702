"""Vocabulary, plain-text ingestion, integer encoding and a synthetic HMM corpus."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .compute import substream

BOS, EOS, UNK = 0, 1, 2
RESERVED = ("<bos>", "<eos>", "<unk>")

TokenSeq = tuple  # tuple[int, ...], always terminated by EOS


@dataclass(frozen=True)
class Vocab:
    words: tuple[str, ...]
    index: dict = field(compare=False, repr=False, default=None)

    def __post_init__(self):
        if self.words[:3] != RESERVED:
            raise ValueError("vocabulary must start with the reserved symbols")
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate vocabulary entries")
        object.__setattr__(self, "index", {w: i for i, w in enumerate(self.words)})

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def id(self, word: str) -> int:
        return self.index.get(word, UNK)

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocab":
        return cls(RESERVED + tuple(words))

    def to_text(self) -> str:
        """One token per line; line ``k`` holds id ``k + 3``."""
        return "".join(w + "\n" for w in self.words[3:])

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        return cls.from_words(line for line in text.splitlines() if line)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def tokenize(line: str) -> list[str]:
    return line.lower().split()


def read_corpus(path, keep_empty: bool = False) -> list[list[str]]:
    """UTF-8 text, one sentence per line, whitespace tokens.

    Blank lines are skipped unless ``keep_empty`` (sample files may hold
    zero-length sentences).
    """
    with open(path, encoding="utf-8") as f:
        sents = [tokenize(line) for line in f.read().splitlines()]
    return sents if keep_empty else [s for s in sents if s]


def write_corpus(path, sentences: Iterable[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in sentences:
            f.write(" ".join(s) + "\n")


def build_vocab(sentences: Iterable[Sequence[str]], max_size: int) -> Vocab:
    """Keep the ``max_size - 3`` most frequent words, ties broken lexicographically."""
    if max_size < 4:
        raise ValueError("max_size must be at least 4")
    counts = Counter(w for s in sentences for w in s if w not in RESERVED)
    if not counts:
        raise ValueError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab.from_words(w for w, _ in ranked[: max_size - 3])


def encode(sentence: Sequence[str], vocab: Vocab, max_len: int) -> TokenSeq | None:
    """Map words to ids and append EOS; returns None when the sentence exceeds ``max_len``.

    The cap applies to the word count before EOS.
    """
    if max_len < 1:
        raise ValueError("max_len must be positive")
    if len(sentence) > max_len:
        return None
    return tuple(vocab.id(w) for w in sentence) + (EOS,)


def decode(ids: Sequence[int], vocab: Vocab) -> list[str]:
    """Words up to (excluding) the first EOS."""
    out = []
    for i in ids:
        if i == EOS:
            break
        out.append(vocab.words[i])
    return out


def encode_corpus(sentences, vocab: Vocab, max_len: int) -> list[TokenSeq]:
    return [s for s in (encode(x, vocab, max_len) for x in sentences) if s is not None]


def unk_rate(encoded: Sequence[TokenSeq]) -> float:
    words = [i for s in encoded for i in s[:-1]]
    return sum(i == UNK for i in words) / max(len(words), 1)


def length_histogram(corpus: Iterable[Sequence]) -> dict[int, float]:
    """Empirical distribution of sequence lengths (EOS counted for encoded input)."""
    counts = Counter(len(s) for s in corpus)
    n = sum(counts.values())
    if n == 0:
        raise ValueError("empty corpus")
    return {k: c / n for k, c in sorted(counts.items())}


def histogram_mean(hist: dict[int, float]) -> float:
    return float(sum(k * p for k, p in hist.items()))


# -- synthetic oracle --------------------------------------------------------

@dataclass
class SynthSpec:
    """HMM over ``n_words`` words plus EOS (the last emission column).

    ``initial`` defaults to the uniform distribution over states.
    """

    transition: np.ndarray
    emission: np.ndarray
    max_len: int = 15
    seed: int = 0
    initial: np.ndarray | None = None

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.emission = np.asarray(self.emission, dtype=np.float64)
        k = self.transition.shape[0]
        if self.initial is None:
            self.initial = np.full(k, 1.0 / k)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        for name, m in (("transition", self.transition), ("emission", self.emission),
                        ("initial", self.initial[None, :])):
            if m.ndim != 2 or np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-12):
                raise ValueError(f"{name} rows must be non-negative and sum to 1")
        if self.transition.shape != (k, k) or self.emission.shape[0] != k:
            raise ValueError("transition must be KxK and emission Kx(|V|+1)")
        if self.initial.shape != (k,):
            raise ValueError("initial must have K entries")
        if self.max_len < 1:
            raise ValueError("max_len must be positive")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_words(self) -> int:
        return self.emission.shape[1] - 1

    def word(self, j: int) -> str:
        return f"w{j}"


def random_synth_spec(n_states: int = 5, n_words: int = 50, max_len: int = 15,
                      seed: int = 0, eos_prob: float = 0.12,
                      concentration: float = 0.5) -> SynthSpec:
    """A structured HMM: states emit disjoint word groups and never self-transition.

    Adjacent repeats are therefore impossible in the data, and bigram statistics
    carry most of the structure.
    """
    rng = substream(seed, "synth-structure")
    trans = rng.dirichlet(np.full(n_states, concentration), size=n_states)
    np.fill_diagonal(trans, 0.0)
    trans /= trans.sum(axis=1, keepdims=True)
    groups = np.array_split(rng.permutation(n_words), n_states)
    emit = np.zeros((n_states, n_words + 1))
    for k, g in enumerate(groups):
        emit[k, g] = (1.0 - eos_prob) * rng.dirichlet(np.full(len(g), 1.0))
        emit[k, -1] = eos_prob
    emit /= emit.sum(axis=1, keepdims=True)
    return SynthSpec(trans, emit, max_len=max_len, seed=seed)


def generate_synthetic(spec: SynthSpec, n: int) -> list[list[str]]:
    """Sample ``n`` sentences; EOS ends a sentence, ``max_len`` words truncate it."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = substream(spec.seed, "synth-sample")
    eos = spec.n_words
    trans_cdf = np.cumsum(spec.transition, axis=1)
    emit_cdf = np.cumsum(spec.emission, axis=1)
    init_cdf = np.cumsum(spec.initial)
    out = []
    for _ in range(n):
        state = min(int(np.searchsorted(init_cdf, rng.random(), side="right")), spec.n_states - 1)
        words = []
        while len(words) < spec.max_len:
            sym = min(int(np.searchsorted(emit_cdf[state], rng.random(), side="right")), eos)
            if sym == eos:
                break
            words.append(spec.word(sym))
            state = min(int(np.searchsorted(trans_cdf[state], rng.random(), side="right")),
                        spec.n_states - 1)
        out.append(words)
    return out
