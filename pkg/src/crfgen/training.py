"""Per-sentence ELBO, the Adam training loop, checkpoints and sentence generation."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from . import compute as C
from .compute import AdamState, NumericError, Tape, adam_step, backward, substream
from .corpus import EOS, Vocab
from .crf import ChainCrfParams, batch_log_likelihood, init_crf_params, sample_batch
from .dynamics import (encode_suffix, gaussian_kl, gaussian_logpdf, init_dynamics_params,
                       posterior_step, prior_sample, prior_step, reparam_sample)

log = logging.getLogger(__name__)

TRAINLOG_HEADER = ("epoch", "elbo", "recon", "kl", "seconds")


@dataclass
class TrainConfig:
    latent_dim: int = 16
    embed_dim: int = 100
    hidden_dim: int = 64
    enc_dim: int = 64
    enc_embed_dim: int = 64
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    kl_warmup: int = 5000          # steps; 0 disables annealing
    unary_only: bool = False
    interaction: str = "diagonal"  # or "full"
    seed: int = 0
    max_len: int = 15
    vocab_size: int = 15003
    init_scale: float = 0.1
    kl_estimator: str = "analytic"  # or "sampled"

    def __post_init__(self):
        for name in ("latent_dim", "embed_dim", "hidden_dim", "enc_dim", "enc_embed_dim",
                     "batch_size", "max_len", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.epochs < 0 or self.kl_warmup < 0:
            raise ValueError("lr, epochs and kl_warmup must be non-negative")
        if self.interaction not in ("diagonal", "full"):
            raise ValueError(f"unknown interaction {self.interaction!r}")
        if self.kl_estimator not in ("analytic", "sampled"):
            raise ValueError(f"unknown kl_estimator {self.kl_estimator!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


def ablate_unary(config: TrainConfig) -> TrainConfig:
    """The non-autoregressive state-space baseline: pairwise factors fixed to ones."""
    return dataclasses.replace(config, unary_only=True)


def init_params(config: TrainConfig, vocab_size: int, rng=None) -> dict[str, np.ndarray]:
    rng = substream(config.seed, "init") if rng is None else rng
    params = init_crf_params(vocab_size, config.embed_dim, config.latent_dim, rng,
                             hidden=config.hidden_dim, interaction=config.interaction,
                             scale=config.init_scale)
    params.update(init_dynamics_params(vocab_size, config.latent_dim, rng,
                                       hidden=config.hidden_dim, enc_dim=config.enc_dim,
                                       enc_embed=config.enc_embed_dim, scale=config.init_scale))
    return params


def crf_view(params: Mapping, config: TrainConfig, unary_only: bool | None = None) -> ChainCrfParams:
    uo = config.unary_only if unary_only is None else unary_only
    return ChainCrfParams.from_flat(params, config.interaction, uo)


@dataclass
class ElboTerms:
    elbo: C.Tensor    # (B,) objective: recon - kl_weight * kl
    recon: C.Tensor   # (B,)
    kl: C.Tensor      # (B,)


def elbo(W, params: Mapping, config: TrainConfig, eps, kl_weight: float = 1.0) -> ElboTerms:
    """Single-trajectory ELBO for a ``(B, T)`` batch of equal-length sentences.

    ``eps`` is the ``(T, B, d')`` standard-normal noise driving the posterior
    sample; passing it explicitly keeps the estimate deterministic.
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.intp))
    B, T = W.shape
    eps = np.asarray(eps, dtype=np.float64).reshape(T, B, config.latent_dim)
    codes = encode_suffix(W, params)
    h = C.const(np.zeros((B, config.latent_dim)))
    hs, kl = [], C.const(np.zeros(B))
    for t in range(T):
        q = posterior_step(h, codes[t], params)
        p = prior_step(h, params)
        h = reparam_sample(q, eps[t])
        if config.kl_estimator == "analytic":
            kl = kl + gaussian_kl(q, p)
        else:
            kl = kl + gaussian_logpdf(h, q) - gaussian_logpdf(h, p)
        hs.append(h)
    if not np.all(np.isfinite(kl.value)):
        raise NumericError("non-finite ELBO component: kl")
    try:
        recon = batch_log_likelihood(W, hs, crf_view(params, config))
    except NumericError as err:
        raise NumericError(f"non-finite ELBO component: reconstruction ({err})") from err
    if not np.all(np.isfinite(recon.value)):
        raise NumericError("non-finite ELBO component: reconstruction")
    return ElboTerms(recon - kl * kl_weight, recon, kl)


# -- training loop -------------------------------------------------------------

@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (epoch, elbo, recon, kl, seconds)

    def append(self, *row):
        vals = [float(v) for v in row[1:]]
        if not all(np.isfinite(vals)):
            raise NumericError(f"non-finite training log row {row}")
        self.rows.append((int(row[0]), *vals))

    def column(self, name: str) -> np.ndarray:
        return np.array([r[TRAINLOG_HEADER.index(name)] for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(TRAINLOG_HEADER)
            for r in self.rows:
                w.writerow([r[0]] + [repr(v) for v in r[1:]])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        if tuple(rows[0]) != TRAINLOG_HEADER:
            raise ValueError(f"{path}: unexpected header {rows[0]}")
        return cls([(int(r[0]), *map(float, r[1:])) for r in rows[1:]])


def _buckets(sequences: Sequence[Sequence[int]]) -> dict[int, np.ndarray]:
    """Equal-length groups in a canonical order, so results ignore input order."""
    by_len: dict[int, list] = {}
    for s in sequences:
        by_len.setdefault(len(s), []).append(tuple(s))
    return {T: np.array(sorted(v), dtype=np.intp) for T, v in sorted(by_len.items())}


@dataclass
class Model:
    config: TrainConfig
    params: dict
    vocab: Vocab | None = None
    length_hist: dict | None = None

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out["meta.config"] = C.text_to_tensor(yaml.safe_dump(dataclasses.asdict(self.config),
                                                              sort_keys=True))
        if self.vocab is not None:
            out["meta.vocab"] = C.text_to_tensor(self.vocab.to_text())
        if self.length_hist:
            hist = np.zeros(max(self.length_hist) + 1)
            for k, p in self.length_hist.items():
                hist[k] = p
            out["meta.length_hist"] = hist
        return out

    def save(self, path) -> None:
        C.save_checkpoint(path, self.tensors())

    @classmethod
    def load(cls, path) -> "Model":
        t = C.load_checkpoint(path)
        config = TrainConfig.from_dict(yaml.safe_load(C.tensor_to_text(t.pop("meta.config"))))
        vocab = Vocab.from_text(C.tensor_to_text(t.pop("meta.vocab"))) if "meta.vocab" in t else None
        hist = None
        if "meta.length_hist" in t:
            h = t.pop("meta.length_hist")
            hist = {int(k): float(h[k]) for k in np.flatnonzero(h)}
        return cls(config, t, vocab, hist)


def train(config: TrainConfig, sequences: Sequence[Sequence[int]], vocab_size: int,
          out_dir=None, vocab: Vocab | None = None, params=None) -> tuple[Model, TrainLog]:
    """Maximise the ELBO with Adam over length-bucketed mini-batches.

    With ``out_dir`` set, ``model.ckpt`` and ``trainlog.csv`` are rewritten after
    every epoch; a non-finite loss aborts the run and leaves the last good
    checkpoint in place.
    """
    if not sequences:
        raise ValueError("empty corpus")
    from .corpus import length_histogram

    params = init_params(config, vocab_size) if params is None else dict(params)
    model = Model(config, params, vocab, length_histogram(sequences))
    state = AdamState(lr=config.lr)
    buckets = _buckets(sequences)
    order_rng = substream(config.seed, "batches")
    trainlog = TrainLog()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    step = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        batches = []
        for T, seqs in buckets.items():
            noise = substream(config.seed, "noise", epoch, T).standard_normal(
                (len(seqs), T, config.latent_dim))
            perm = order_rng.permutation(len(seqs))
            for i in range(0, len(seqs), config.batch_size):
                idx = perm[i:i + config.batch_size]
                batches.append((seqs[idx], noise[idx]))
        sums = np.zeros(3)
        for k in order_rng.permutation(len(batches)):
            W, eps = batches[k]
            kl_weight = 1.0 if config.kl_warmup == 0 else min(1.0, step / config.kl_warmup)
            tape = Tape()
            terms = elbo(W, tape.params(model.params), config, np.swapaxes(eps, 0, 1), kl_weight)
            loss = C.mean(terms.elbo) * -1.0
            if not np.isfinite(loss.value):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            grads = backward(tape, loss)
            model.params, state = adam_step(model.params, grads, state)
            sums += [np.sum(terms.recon.value - terms.kl.value),
                     np.sum(terms.recon.value), np.sum(terms.kl.value)]
            step += 1
        means = sums / len(sequences)
        trainlog.append(epoch, *means, time.perf_counter() - t0)
        log.info("epoch %d elbo %.4f recon %.4f kl %.4f", epoch, *means)
        if out_dir is not None:
            model.save(out_dir / "model.ckpt")
            trainlog.write_csv(out_dir / "trainlog.csv")
    return model, trainlog


def evaluate_elbo(model: Model, sequences, seed: int = 0) -> float:
    """Mean single-sample ELBO (KL weight 1) over a corpus, without gradients."""
    total = 0.0
    for T, seqs in _buckets(sequences).items():
        eps = substream(seed, "eval-noise", T).standard_normal((T, len(seqs), model.config.latent_dim))
        total += float(np.sum(elbo(seqs, model.params, model.config, eps).elbo.value))
    return total / len(sequences)


# -- generation ------------------------------------------------------------------

def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CRFGEN_THREADS", "1")))
    except ValueError:
        return 1


def sample_lengths(hist: Mapping[int, float], n: int, rng) -> np.ndarray:
    keys = np.array(sorted(hist))
    probs = np.array([hist[k] for k in keys])
    return rng.choice(keys, size=n, p=probs / probs.sum())


def generate(model: Model, n: int, seed: int, fixed_length: int | None = None,
             unary_only: bool | None = None, chunk: int = 256) -> list[tuple[int, ...]]:
    """Draw ``n`` sentences as id tuples without the terminating EOS.

    Lengths come from the training length histogram (or ``fixed_length``);
    each sentence is cut at the first sampled EOS.  Every chunk uses its own
    named random stream, so output does not depend on the worker count.
    """
    if fixed_length is not None:
        lengths = np.full(n, fixed_length)
    else:
        if not model.length_hist:
            raise ValueError("model has no length histogram; pass fixed_length")
        lengths = sample_lengths(model.length_hist, n, substream(seed, "generation", "lengths"))
    crf_params = crf_view(model.params, model.config, unary_only)
    jobs = []
    for T in np.unique(lengths):
        idx = np.flatnonzero(lengths == T)
        for c, i in enumerate(range(0, len(idx), chunk)):
            jobs.append((int(T), c, idx[i:i + chunk]))

    def run(job):
        T, c, idx = job
        rng = substream(seed, "generation", T, c)
        H = prior_sample(T, model.params, rng, batch=len(idx))
        return idx, sample_batch(list(H), crf_params, rng)

    out: list = [None] * n
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        for idx, W in pool.map(run, jobs):
            for i, row in zip(idx, W):
                row = list(row)
                out[i] = tuple(int(x) for x in (row[:row.index(EOS)] if EOS in row else row))
    return out
