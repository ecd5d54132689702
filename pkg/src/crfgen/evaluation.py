"""External n-gram judges and aggregate statistics for generated text.

The judges are interpolated Kneser-Ney models with one fixed absolute
discount at every order.  The lowest order interpolates with the uniform
distribution over the vocabulary, so every token has positive probability
and perplexity of any sample is finite.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import RESERVED

BOS_TOK, EOS_TOK, UNK_TOK = RESERVED


@dataclass
class KneserNeyLm:
    order: int
    discount: float
    vocab: tuple                       # predictable tokens (EOS and UNK included)
    counts: dict                       # raw top-order n-gram counts, BOS-padded
    _levels: list = field(default_factory=list, repr=False)
    _vocab_set: frozenset = field(default=frozenset(), repr=False)

    def __post_init__(self):
        if self.order not in (1, 2, 3):
            raise ValueError("order must be 1, 2 or 3")
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        self._vocab_set = frozenset(self.vocab)
        self._build()

    def _build(self):
        # level k (1-based) maps ngram -> count; top level raw, lower levels
        # continuation counts N1+(. g) from the distinct (k+1)-gram types
        levels = [None] * (self.order + 1)
        levels[self.order] = dict(self.counts)
        for k in range(self.order - 1, 0, -1):
            cont = Counter(g[1:] for g in levels[k + 1])
            levels[k] = dict(cont)
        self._levels = []
        for k in range(1, self.order + 1):
            totals, types = defaultdict(int), defaultdict(int)
            for g, c in levels[k].items():
                totals[g[:-1]] += c
                types[g[:-1]] += 1
            self._levels.append((levels[k], dict(totals), dict(types)))

    def prob(self, word: str, context: Sequence[str] = ()) -> float:
        """``p(word | context)``; only the last ``order - 1`` context tokens are used."""
        if word not in self._vocab_set:
            word = UNK_TOK
        ctx = tuple(context)[-(self.order - 1):] if self.order > 1 else ()
        ctx = (BOS_TOK,) * (self.order - 1 - len(ctx)) + ctx
        p = 1.0 / len(self.vocab)
        for k in range(1, self.order + 1):
            grams, totals, types = self._levels[k - 1]
            c = ctx[len(ctx) - (k - 1):] if k > 1 else ()
            total = totals.get(c, 0)
            if total == 0:
                continue
            n = grams.get(c + (word,), 0)
            p = max(n - self.discount, 0.0) / total + self.discount * types[c] / total * p
        return p

    def logprob_sentence(self, words: Sequence[str]) -> tuple[float, int]:
        """Natural-log probability of ``words + [EOS]`` and the number of scored tokens."""
        toks = [w if w in self._vocab_set else UNK_TOK for w in words] + [EOS_TOK]
        hist = [BOS_TOK] * (self.order - 1)
        total = 0.0
        for w in toks:
            total += math.log(self.prob(w, hist))
            if self.order > 1:
                hist = hist[1:] + [w]
        return total, len(toks)

    def save(self, path) -> None:
        """Counts file: header comments, then ``tokens<TAB>count`` per n-gram."""
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# order\t{self.order}\n# discount\t{self.discount!r}\n")
            f.write("# vocab\t" + " ".join(self.vocab) + "\n")
            for g, c in sorted(self.counts.items()):
                f.write(" ".join(g) + f"\t{c}\n")

    @classmethod
    def load(cls, path) -> "KneserNeyLm":
        meta, counts = {}, {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if line.startswith("# "):
                    key, val = line[2:].split("\t", 1)
                    meta[key] = val
                elif line:
                    toks, c = line.rsplit("\t", 1)
                    counts[tuple(toks.split(" "))] = int(c)
        return cls(int(meta["order"]), float(meta["discount"]),
                   tuple(meta["vocab"].split(" ")), counts)


def fit_kn(corpus: Iterable[Sequence[str]], n: int, discount: float = 0.75,
           vocab: Iterable[str] | None = None) -> KneserNeyLm:
    """Interpolated Kneser-Ney model of order ``n`` with BOS-padded contexts.

    ``vocab`` extends the predictable token set beyond the training words
    (BOS is never predictable; EOS and UNK always are).
    """
    if n not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    counts: Counter = Counter()
    words: set = set()
    n_tokens = 0
    for sent in corpus:
        toks = [BOS_TOK] * (n - 1) + list(sent) + [EOS_TOK]
        words.update(sent)
        n_tokens += len(sent) + 1
        for i in range(n - 1, len(toks)):
            counts[tuple(toks[i - n + 1:i + 1])] += 1
    if n_tokens < n or not counts:
        raise ValueError(f"corpus too short to observe any {n}-gram")
    words.update(vocab or ())
    words.discard(BOS_TOK)
    words.update((EOS_TOK, UNK_TOK))
    return KneserNeyLm(n, discount, tuple(sorted(words)), dict(counts))


def perplexity(lm: KneserNeyLm, sentences: Iterable[Sequence[str]]) -> float:
    """``exp`` of the mean negative log-probability per token, EOS included."""
    total, n = 0.0, 0
    for s in sentences:
        lp, k = lm.logprob_sentence(s)
        total += lp
        n += k
    if n == 0:
        raise ValueError("empty sample set")
    return math.exp(-total / n)


@dataclass(frozen=True)
class GenStats:
    rho_rep: float   # % of tokens equal to their predecessor
    length: float    # mean tokens per sentence, EOS excluded
    rho_uni: float   # % distinct sentences
    count: int


def gen_stats(sentences: Sequence[Sequence[str]]) -> GenStats:
    sentences = [tuple(s) for s in sentences]
    if not sentences:
        raise ValueError("empty sample set")
    tokens = sum(len(s) for s in sentences)
    repeats = sum(a == b for s in sentences for a, b in zip(s, s[1:]))
    return GenStats(100.0 * repeats / tokens if tokens else 0.0,
                    tokens / len(sentences),
                    100.0 * len(set(sentences)) / len(sentences),
                    len(sentences))


COLUMNS = ("label", "PPL_2", "PPL_3", "rho_rep", "length", "rho_uni", "count")


def report(models: Sequence[tuple[str, Sequence[Sequence[str]]]],
           lms: Mapping[int, KneserNeyLm]) -> list[dict]:
    """One row per labelled sample set: perplexity under each judge plus statistics."""
    rows = []
    for label, sents in models:
        st = gen_stats(sents)
        row = {"label": label}
        for n in sorted(lms):
            row[f"PPL_{n}"] = perplexity(lms[n], sents)
        row.update(rho_rep=st.rho_rep, length=st.length, rho_uni=st.rho_uni, count=st.count)
        rows.append(row)
    return rows


def format_table(rows: Sequence[Mapping]) -> str:
    if not rows:
        return ""
    cols = [c for c in COLUMNS if c in rows[0]] + [c for c in rows[0] if c not in COLUMNS]
    cells = [[c for c in cols]]
    for r in rows:
        cells.append([f"{r[c]:.2f}" if isinstance(r[c], float) else str(r[c]) for c in cols])
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = []
    for j, row in enumerate(cells):
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w)
                               for i, (v, w) in enumerate(zip(row, widths))))
        if j == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def write_report(rows: Sequence[Mapping], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(format_table(rows), encoding="utf-8")
    with open(out_dir / "report.jsonl", "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")
