"""Latent Gaussian chain: prior transitions, backward suffix encoder, posterior, KL."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from . import compute as C
from .compute import Tensor

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass
class GaussianParams:
    """Diagonal Gaussian; ``mean`` and ``logvar`` are ``(B, d')`` tensors."""

    mean: Tensor
    logvar: Tensor


def _mlp_gaussian(x, W1, b1, W2, b2) -> GaussianParams:
    hid = C.tanh(C.matmul(x, C.const(W1)) + C.const(b1))
    out = C.matmul(hid, C.const(W2)) + C.const(b2)
    d = out.shape[-1] // 2
    return GaussianParams(out[:, :d], C.clip(out[:, d:], LOGVAR_MIN, LOGVAR_MAX))


def _batch(x) -> Tensor:
    x = C.const(x)
    return x if x.ndim == 2 else C.reshape(x, (1, -1))


def prior_step(h_prev, net: Mapping[str, Any]) -> GaussianParams:
    """``p(h_t | h_{t-1})``; call with zeros for ``p(h_1)``."""
    return _mlp_gaussian(_batch(h_prev), net["dyn.trans.W1"], net["dyn.trans.b1"],
                         net["dyn.trans.W2"], net["dyn.trans.b2"])


def posterior_step(h_prev, e_t, net: Mapping[str, Any]) -> GaussianParams:
    """``q(h_t | h_{t-1}, w_{t:T})`` from the previous state and the suffix code."""
    x = C.concat([_batch(h_prev), _batch(e_t)], axis=-1)
    return _mlp_gaussian(x, net["dyn.post.W1"], net["dyn.post.b1"],
                         net["dyn.post.W2"], net["dyn.post.b2"])


def reparam_sample(g: GaussianParams, eps) -> Tensor:
    return g.mean + C.exp(g.logvar * 0.5) * C.const(eps)


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> Tensor:
    """``KL(q || p)`` per batch row, summed over dimensions."""
    dm = q.mean - p.mean
    term = (p.logvar - q.logvar
            + (C.exp(q.logvar) + C.square(dm)) * C.exp(-p.logvar) - 1.0)
    return C.sum(term, axis=-1) * 0.5


def gaussian_logpdf(x, g: GaussianParams) -> Tensor:
    z = C.square(C.const(x) - g.mean) * C.exp(-g.logvar)
    return C.sum(z + g.logvar + np.log(2 * np.pi), axis=-1) * -0.5


def encode_suffix(W, enc: Mapping[str, Any]) -> list[Tensor]:
    """Right-to-left GRU over word embeddings; ``out[t]`` encodes ``w_{t+1:T}`` (1-based).

    ``W`` is a ``(B, T)`` id array; the state before the last word is zero.
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.intp))
    B, T = W.shape
    emb = C.const(enc["dyn.emb"])
    Wx, Uzr, Un, b = (C.const(enc[k]) for k in
                      ("dyn.enc.Wx", "dyn.enc.Uzr", "dyn.enc.Un", "dyn.enc.b"))
    H = Un.shape[0]
    e = C.const(np.zeros((B, H)))
    out = [None] * T
    for t in reversed(range(T)):
        gx = C.matmul(C.take(emb, W[:, t], axis=0), Wx) + b
        gh = C.matmul(e, Uzr)
        z = C.sigmoid(gx[:, :H] + gh[:, :H])
        r = C.sigmoid(gx[:, H:2 * H] + gh[:, H:])
        n = C.tanh(gx[:, 2 * H:] + C.matmul(r * e, Un))
        e = (1.0 - z) * n + z * e
        out[t] = e
    return out


def prior_sample(T: int, net: Mapping[str, Any], rng: np.random.Generator,
                 batch: int | None = None) -> np.ndarray:
    """Ancestral draw ``h_{1:T}`` from the prior: ``(T, d')``, or ``(T, B, d')`` with ``batch``."""
    if T < 1:
        raise ValueError("T must be at least 1")
    B = 1 if batch is None else batch
    d = np.asarray(net["dyn.trans.W2"]).shape[1] // 2
    h = np.zeros((B, d))
    out = np.empty((T, B, d))
    for t in range(T):
        g = prior_step(h, net)
        h = g.mean.value + np.exp(0.5 * g.logvar.value) * rng.standard_normal((B, d))
        out[t] = h
    return out[:, 0, :] if batch is None else out


def init_dynamics_params(vocab_size: int, latent_dim: int, rng, hidden: int = 64,
                         enc_dim: int = 64, enc_embed: int = 64,
                         scale: float = 0.1) -> dict[str, np.ndarray]:
    dl, H, E = latent_dim, enc_dim, enc_embed

    def w(n_in, n_out, s=1.0):
        return rng.normal(0.0, s / np.sqrt(n_in), (n_in, n_out))

    return {
        "dyn.trans.W1": w(dl, hidden),
        "dyn.trans.b1": np.zeros(hidden),
        "dyn.trans.W2": w(hidden, 2 * dl, scale),
        "dyn.trans.b2": np.zeros(2 * dl),
        "dyn.post.W1": w(dl + H, hidden),
        "dyn.post.b1": np.zeros(hidden),
        "dyn.post.W2": w(hidden, 2 * dl, scale),
        "dyn.post.b2": np.zeros(2 * dl),
        "dyn.emb": rng.normal(0.0, 1.0, (vocab_size, E)),
        "dyn.enc.Wx": w(E, 3 * H),
        "dyn.enc.Uzr": w(H, 2 * H),
        "dyn.enc.Un": w(H, H),
        "dyn.enc.b": np.zeros(3 * H),
    }
