"""Built-in oracle checks run by ``crfgen selftest``.

Each check builds small random instances, compares the production code path
against an independent computation (enumeration, finite differences or
Monte Carlo) and reports ``(name, passed, detail)``.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import compute as C
from .compute import Tape, backward, substream
from .corpus import BOS, EOS
from .crf import (ChainCrfParams, backward_pass, brute_force_log_probs, brute_force_logZ,
                  conditional_factor, init_crf_params, log_likelihood, log_partition,
                  pairwise_marginals, potentials, sample_batch, unary_logpot)
from .evaluation import fit_kn
from .training import TrainConfig, elbo, init_params


def _crf(rng, V, d, dl, interaction="diagonal", unary_only=False) -> ChainCrfParams:
    flat = init_crf_params(V, d, dl, rng, hidden=8, interaction=interaction, scale=0.8)
    flat["crf.b"] = rng.normal(0.0, 0.8, V)
    flat["crf.s_mlp.W2"] = rng.normal(0.0, 1.0, flat["crf.s_mlp.W2"].shape)
    return ChainCrfParams.from_flat(flat, interaction, unary_only)


def check_log_partition(seed: int, n: int = 100) -> tuple[bool, str]:
    rng = substream(seed, "selftest", "logz")
    worst = 0.0
    for i in range(n):
        V, T = int(rng.integers(3, 7)), int(rng.integers(1, 6))
        p = _crf(rng, V, int(rng.integers(2, 5)), int(rng.integers(2, 5)),
                 ("diagonal", "full")[i % 2])
        h = rng.normal(size=(T, p.latent_dim))
        worst = max(worst, abs(backward_pass(h, p).log_z - brute_force_logZ(h, p)))
    return worst < 1e-8, f"max |dlogZ| {worst:.2e} over {n} models"


def check_telescoping(seed: int, n: int = 200) -> tuple[bool, str]:
    rng = substream(seed, "selftest", "telescoping")
    worst = 0.0
    for _ in range(n):
        V, T = int(rng.integers(3, 12)), int(rng.integers(1, 7))
        p = _crf(rng, V, 3, 2)
        h = rng.normal(size=(T, 2))
        w = rng.integers(1, V, size=T)
        bp = backward_pass(h, p)
        total, prev = 0.0, BOS
        for t in range(T):
            total += math.log(conditional_factor(t + 1, prev, bp, h, p)[w[t]])
            prev = w[t]
        worst = max(worst, abs(total - float(log_likelihood(w, h, p).value)))
    return worst < 1e-10, f"max gap {worst:.2e} over {n} pairs"


def check_sampler(seed: int, n: int = 200_000) -> tuple[bool, str]:
    rng = substream(seed, "selftest", "sampler")
    p = _crf(rng, 4, 3, 2)
    h = rng.normal(size=(3, 2))
    seqs, logp = brute_force_log_probs(h, p)
    draws = sample_batch([np.repeat(x[None], n, axis=0) for x in h], p, rng)
    code = lambda a: (a - 1) @ np.array([9, 3, 1])  # noqa: E731
    emp = np.bincount(code(draws), minlength=27) / n
    exact = np.zeros(27)
    exact[code(seqs)] = np.exp(logp)
    tv = 0.5 * np.abs(emp - exact).sum()
    return tv < 0.01, f"TV {tv:.4f} from {n} draws"


def check_elbo_gradient(seed: int) -> tuple[bool, str]:
    cfg = TrainConfig(latent_dim=2, embed_dim=3, hidden_dim=5, enc_dim=4, enc_embed_dim=3,
                      vocab_size=7, init_scale=0.5, seed=seed)
    params = init_params(cfg, 7)
    W = np.array([[3, 5, EOS], [6, 4, EOS]])
    eps = substream(seed, "selftest", "grad").standard_normal((3, 2, 2))
    errs = C.gradient_errors(lambda q: C.sum(elbo(W, q, cfg, eps).elbo), params,
                             eps=1e-5, max_coords=8, seed=seed)
    worst = max(errs, key=errs.get)
    return errs[worst] < 1e-4, f"max rel err {errs[worst]:.2e} ({worst})"


def check_marginals(seed: int) -> tuple[bool, str]:
    rng = substream(seed, "selftest", "marginals")
    p = _crf(rng, 5, 3, 2)
    h = rng.normal(size=(3, 2))
    pots = potentials([x[None] for x in h], p)
    tape = Tape()
    pots.unary = [tape.param(f"u{t}", u.value) for t, u in enumerate(pots.unary)]
    grads = backward(tape, C.sum(log_partition(pots).log_z))
    m = pairwise_marginals(backward_pass(h, p), h, p)
    gap = max(np.abs(grads[f"u{t}"][0] - m[t].sum(axis=0)).max() for t in range(3))
    return gap < 1e-6, f"max |dlogZ/dpsi - marginal| {gap:.2e}"


def check_unary_reduction(seed: int, n: int = 50) -> tuple[bool, str]:
    rng = substream(seed, "selftest", "reduction")
    worst = 0.0
    for _ in range(n):
        V, T = int(rng.integers(3, 20)), int(rng.integers(1, 8))
        p = _crf(rng, V, 3, 2, unary_only=True)
        h = rng.normal(size=(T, 2))
        w = rng.integers(1, V, size=T)
        ref = 0.0
        for t in range(T):
            u = unary_logpot(h[t], p).value[1:]
            ref += u[w[t] - 1] - C.logsumexp(u)
        worst = max(worst, abs(ref - float(log_likelihood(w, h, p).value)))
    return worst < 1e-10, f"max gap {worst:.2e} over {n} instances"


def check_kn_normalisation(seed: int) -> tuple[bool, str]:
    rng = substream(seed, "selftest", "kn")
    words = [f"w{i}" for i in range(12)]
    corpus = [[words[j] for j in rng.integers(0, 12, size=rng.integers(1, 8))] for _ in range(300)]
    worst = 0.0
    for n in (2, 3):
        lm = fit_kn(corpus, n)
        for s in corpus[:100]:
            ctx = (["<bos>"] * 2 + s)[-2:]
            worst = max(worst, abs(sum(lm.prob(w, ctx) for w in lm.vocab) - 1.0))
    return worst < 1e-6, f"max |sum p - 1| {worst:.2e}"


CHECKS: dict[str, Callable[[int], tuple[bool, str]]] = {
    "logZ-vs-enumeration": check_log_partition,
    "telescoping": check_telescoping,
    "sampler-exactness": check_sampler,
    "elbo-gradient": check_elbo_gradient,
    "marginal-gradient": check_marginals,
    "unary-reduction": check_unary_reduction,
    "kn-normalisation": check_kn_normalisation,
}


def run_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn(seed)
        except Exception as err:  # a crashing check is a failing check
            ok, detail = False, f"{type(err).__name__}: {err}"
        out.append((name, bool(ok), detail))
    return out
