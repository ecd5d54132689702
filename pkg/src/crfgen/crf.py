"""Globally normalised linear-chain CRF observation model p(w | h).

The energy of a sentence ``w_1..w_T`` given latent states ``h_1..h_T`` is

    S(w; h) = sum_t  psi(w_t; h_t) + log T_t[w_{t-1}, w_t],     w_0 = BOS

with unary scores ``psi(v; h) = xu[:, v] . (P h) + b[v]`` and a strictly
positive pairwise matrix ``T_t = exp(X)^T diag(s_t) exp(Y)`` whose diagonal
``s_t`` comes from a small network of ``(h_{t-1}, h_t)``.  ``T_t`` is never
materialised: applying it to a vector costs ``O(d |V|)``.

BOS is a boundary symbol only.  It is excluded from the outcome alphabet,
so every sum over sentences runs over ids ``1..|V|-1`` and the sampler can
never emit it.

Batched internals work on lists of ``(B, ...)`` tensors, one per time step;
the single-trajectory functions at the bottom are thin wrappers.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from . import compute as C
from .compute import NumericError, Tensor
from .corpus import BOS

S_FLOOR = 1e-6
MAX_DIAGNOSTIC_VOCAB = 64
MAX_ENUMERATION = 1_000_000


@dataclass
class ChainCrfParams:
    """CRF weights; fields may be arrays or tape tensors.

    Shapes: ``xu, X, Y`` are ``(d, V)``, ``P`` is ``(d, d')``, ``b`` is ``(V,)``,
    and ``s_mlp = (W1 (2d', H), b1 (H,), W2 (H, d or d*d), b2)``.
    """

    xu: Any
    X: Any
    Y: Any
    P: Any
    b: Any
    s_mlp: tuple
    interaction: str = "diagonal"
    unary_only: bool = False

    NAMES = ("crf.xu", "crf.X", "crf.Y", "crf.P", "crf.b")
    MLP_NAMES = ("crf.s_mlp.W1", "crf.s_mlp.b1", "crf.s_mlp.W2", "crf.s_mlp.b2")

    @classmethod
    def from_flat(cls, flat: Mapping[str, Any], interaction="diagonal", unary_only=False):
        return cls(*(flat[k] for k in cls.NAMES),
                   s_mlp=tuple(flat[k] for k in cls.MLP_NAMES),
                   interaction=interaction, unary_only=unary_only)

    def flat(self) -> dict[str, Any]:
        vals = (self.xu, self.X, self.Y, self.P, self.b) + tuple(self.s_mlp)
        return dict(zip(self.NAMES + self.MLP_NAMES, vals))

    @property
    def vocab_size(self) -> int:
        return _val(self.X).shape[1]

    @property
    def embed_dim(self) -> int:
        return _val(self.X).shape[0]

    @property
    def latent_dim(self) -> int:
        return _val(self.P).shape[1]


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def init_crf_params(vocab_size: int, embed_dim: int, latent_dim: int, rng,
                    hidden: int = 64, interaction: str = "diagonal",
                    scale: float = 0.1) -> dict[str, np.ndarray]:
    d, dl = embed_dim, latent_dim
    out_dim = d if interaction == "diagonal" else d * d
    if interaction not in ("diagonal", "full"):
        raise ValueError(f"unknown interaction {interaction!r}")
    return {
        "crf.xu": rng.normal(0.0, scale, (d, vocab_size)),
        "crf.X": rng.normal(0.0, scale, (d, vocab_size)),
        "crf.Y": rng.normal(0.0, scale, (d, vocab_size)),
        "crf.P": rng.normal(0.0, 1.0 / np.sqrt(dl), (d, dl)),
        "crf.b": np.zeros(vocab_size),
        "crf.s_mlp.W1": rng.normal(0.0, 1.0 / np.sqrt(2 * dl), (2 * dl, hidden)),
        "crf.s_mlp.b1": np.zeros(hidden),
        "crf.s_mlp.W2": rng.normal(0.0, scale / np.sqrt(hidden), (hidden, out_dim)),
        "crf.s_mlp.b2": np.zeros(out_dim),
    }


def emission_mask(vocab_size: int) -> np.ndarray:
    mask = np.ones(vocab_size)
    mask[BOS] = 0.0
    return mask


# -- potentials ----------------------------------------------------------------

def unary_logpot(h, params: ChainCrfParams) -> Tensor:
    """Unary log-potentials ``(..., V)`` for states ``h`` of shape ``(..., d')``."""
    h = C.const(h)
    proj = C.matmul(h if h.ndim > 1 else C.reshape(h, (1, -1)), C.transpose(C.const(params.P)))
    out = C.matmul(proj, C.const(params.xu)) + C.const(params.b)
    return out if h.ndim > 1 else C.reshape(out, (-1,))


def interaction(h_prev, h, params: ChainCrfParams) -> Tensor:
    """Strictly positive interaction entries: ``(B, d)`` diagonal or ``(B, d, d)``."""
    W1, b1, W2, b2 = (C.const(p) for p in params.s_mlp)
    hid = C.tanh(C.matmul(C.concat([C.const(h_prev), C.const(h)], axis=-1), W1) + b1)
    s = C.softplus(C.matmul(hid, W2) + b2) + S_FLOOR
    if params.interaction == "full":
        d = params.embed_dim
        s = C.reshape(s, (s.shape[0], d, d))
    return s


@dataclass
class Potentials:
    unary: list            # T tensors (B, V)
    s: list | None         # T tensors (B, d) or (B, d, d); None when unary-only
    X: Tensor
    Y: Tensor
    x_pos: Tensor
    y_pos: Tensor
    full: bool
    mask: np.ndarray

    @property
    def unary_only(self) -> bool:
        return self.s is None


def potentials(hs: Sequence, params: ChainCrfParams) -> Potentials:
    """All per-step factors for a batch of trajectories ``hs[t]`` of shape ``(B, d')``."""
    hs = [C.const(h) for h in hs]
    X, Y = C.const(params.X), C.const(params.Y)
    unary = [unary_logpot(h, params) for h in hs]
    s = None
    if not params.unary_only:
        # one MLP call over all steps keeps the per-step overhead independent of d'
        B = hs[0].shape[0]
        prev = [C.const(np.zeros(hs[0].shape))] + hs[:-1]
        s_all = interaction(C.concat(prev, axis=0), C.concat(hs, axis=0), params)
        s = [s_all[t * B:(t + 1) * B] for t in range(len(hs))]
    return Potentials(unary, s, X, Y, C.exp(X), C.exp(Y), params.interaction == "full",
                      emission_mask(params.vocab_size))


def _apply_pairwise(pots: Potentials, t: int, v: Tensor) -> Tensor:
    """``v @ T_t^T`` for a batch ``v`` of shape ``(B, V)``, i.e. ``T_t`` applied row-wise."""
    y = C.matmul(v, C.transpose(pots.y_pos))
    st = pots.s[t]
    if pots.full:
        B, d = y.shape
        y = C.reshape(C.matmul(st, C.reshape(y, (B, d, 1))), (B, d))
    else:
        y = y * st
    return C.matmul(y, pots.x_pos)


def _pairwise_rows(pots: Potentials, t: int, prev: np.ndarray) -> np.ndarray:
    """Rows ``T_t[prev_b, :]`` for each batch member, as plain arrays."""
    xp = pots.x_pos.value[:, prev].T           # (B, d)
    st = pots.s[t].value
    if pots.full:
        xp = np.einsum("bk,bkl->bl", xp, st)
    else:
        xp = xp * st
    return xp @ pots.y_pos.value


def _log_pair(pots: Potentials, t: int, prev, cur) -> Tensor:
    """``log T_t[prev_b, cur_b]`` per batch member, ``(B,)``."""
    xc = C.transpose(C.take(pots.X, prev, axis=1))
    yc = C.transpose(C.take(pots.Y, cur, axis=1))
    B, d = xc.shape
    if pots.full:
        z = C.reshape(xc, (B, d, 1)) + C.log(pots.s[t]) + C.reshape(yc, (B, 1, d))
        return C.lse(z, axis=(1, 2))
    return C.lse(xc + C.log(pots.s[t]) + yc, axis=1)


@dataclass
class Recursion:
    """Scaled backward quantities (batched, tensors).

    ``betas[t]`` is the normalised vector for step ``t+1`` (index ``T`` is the
    terminal one), ``scales[t]`` the matching log-scale and ``shifts[t]`` the
    max-unary shift folded into it.
    """

    log_z: Tensor
    betas: list
    scales: list
    shifts: list


def log_partition(pots: Potentials) -> Recursion:
    """Scaled backward recursion ``beta_t = T_t (o_t * beta_{t+1})``; cost ``O(d |V| T)``."""
    T = len(pots.unary)
    B, V = pots.unary[0].shape
    n_emit = pots.mask.sum()
    beta = C.const(np.broadcast_to(pots.mask / n_emit, (B, V)))
    betas = [None] * (T + 1)
    scales = [None] * (T + 1)
    shifts = [None] * T
    betas[T] = beta
    scales[T] = C.const(np.full(B, np.log(n_emit)))
    total = scales[T]
    for t in reversed(range(T)):
        u = pots.unary[t]
        m = np.max(u.value, axis=1, keepdims=True)
        o = C.exp(u - m) * pots.mask
        v = o * beta
        if pots.unary_only:
            z = C.sum(v, axis=1, keepdims=True) * float(V)
            beta = C.const(np.full((B, V), 1.0 / V))
        else:
            bt = _apply_pairwise(pots, t, v)
            z = C.sum(bt, axis=1, keepdims=True)
            beta = bt / z
        c = C.reshape(C.log(z), (B,)) + m[:, 0]
        if not np.all(np.isfinite(c.value)):
            raise NumericError("numeric overflow in β recursion")
        betas[t], scales[t], shifts[t] = beta, c, m[:, 0]
        total = total + c
    log_z = total + C.log(beta[:, BOS])
    if not np.all(np.isfinite(log_z.value)):
        raise NumericError("numeric overflow in β recursion")
    return Recursion(log_z, betas, scales, shifts)


def _check_ids(W: np.ndarray, V: int) -> None:
    if W.size and (W.min() < 0 or W.max() >= V):
        raise IndexError("index out of vocabulary")
    if np.any(W == BOS):
        raise IndexError("BOS cannot appear inside a sentence")


def batch_logscore(W, pots: Potentials) -> Tensor:
    """Energies ``S(w; h)`` for a ``(B, T)`` id array; returns ``(B,)``."""
    W = np.asarray(W, dtype=np.intp)
    B, T = W.shape
    _check_ids(W, pots.x_pos.shape[1])
    total = C.const(np.zeros(B))
    prev = np.full(B, BOS)
    for t in range(T):
        total = total + C.pick(pots.unary[t], W[:, t])
        if not pots.unary_only:
            total = total + _log_pair(pots, t, prev, W[:, t])
        prev = W[:, t]
    return total


def batch_log_likelihood(W, hs, params: ChainCrfParams) -> Tensor:
    """``log p(w | h) = S(w; h) - log Z(h)`` for a batch of equal-length sentences."""
    pots = potentials(hs, params)
    return batch_logscore(W, pots) - log_partition(pots).log_z


def sample_batch(hs, params: ChainCrfParams, rng: np.random.Generator) -> np.ndarray:
    """Exact ancestral draws ``w_t ~ p(w_t | w_{<t}, h)``, left to right; ``(B, T)`` ids."""
    hs = [C.const(np.asarray(h, dtype=np.float64)) for h in hs]
    pots = potentials(hs, params)
    rec = log_partition(pots)
    T = len(hs)
    B, V = pots.unary[0].shape
    out = np.empty((B, T), dtype=np.int64)
    prev = np.full(B, BOS)
    for t in range(T):
        o = np.exp(pots.unary[t].value - rec.shifts[t][:, None]) * pots.mask
        p = o * rec.betas[t + 1].value
        if not pots.unary_only:
            p = p * _pairwise_rows(pots, t, prev)
        cdf = np.cumsum(p, axis=1)
        u = rng.random(B) * cdf[:, -1]
        idx = np.minimum((cdf <= u[:, None]).sum(axis=1), V - 1)
        out[:, t] = idx
        prev = idx
    return out


# -- single-trajectory interface ------------------------------------------------

@dataclass
class PairwiseOperator:
    """Implicit ``T = X+^T diag(s) Y+`` (or ``X+^T S Y+`` for a full ``s``)."""

    x_pos: np.ndarray
    y_pos: np.ndarray
    s: np.ndarray | None

    def _mid(self):
        return np.diag(self.s) if self.s.ndim == 1 else self.s

    def apply(self, v: np.ndarray) -> np.ndarray:
        """``T @ v`` in ``O(d |V|)``."""
        if self.s is None:
            return np.full(self.y_pos.shape[1], np.sum(v))
        y = self.y_pos @ v
        y = self.s * y if self.s.ndim == 1 else self.s @ y
        return self.x_pos.T @ y

    def row(self, i: int) -> np.ndarray:
        if self.s is None:
            return np.ones(self.y_pos.shape[1])
        x = self.x_pos[:, i]
        x = x * self.s if self.s.ndim == 1 else x @ self.s
        return x @ self.y_pos

    def dense(self) -> np.ndarray:
        if self.s is None:
            V = self.y_pos.shape[1]
            return np.ones((V, V))
        return self.x_pos.T @ self._mid() @ self.y_pos


def _hs(h) -> list:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError("expected a (T, d') state trajectory")
    return [h[t][None, :] for t in range(h.shape[0])]


def pairwise_operator(h_prev, h, params: ChainCrfParams) -> PairwiseOperator:
    x_pos, y_pos = np.exp(_val(params.X)), np.exp(_val(params.Y))
    if params.unary_only:
        return PairwiseOperator(x_pos, y_pos, None)
    s = interaction(np.asarray(h_prev, dtype=np.float64)[None, :],
                    np.asarray(h, dtype=np.float64)[None, :], params).value[0]
    return PairwiseOperator(x_pos, y_pos, s)


@dataclass
class BackwardPass:
    """Scaled backward vectors for one trajectory.

    ``betas[t-1]`` is the normalised ``beta_t`` for ``t = 1..T+1`` and
    ``log_scales[t-1]`` its log-scale, so the unnormalised vector is
    ``betas[t-1] * exp(sum(log_scales[t-1:]))``.  The normaliser is the BOS
    entry of the unnormalised ``beta_1``.
    """

    betas: np.ndarray
    log_scales: np.ndarray
    log_z: float

    def log_beta(self, t: int) -> np.ndarray:
        """Unnormalised ``log beta_t`` (``-inf`` where it vanishes)."""
        with np.errstate(divide="ignore"):
            return np.log(self.betas[t - 1]) + self.log_scales[t - 1:].sum()


def backward_pass(h, params: ChainCrfParams) -> BackwardPass:
    """Same recursion as :func:`log_partition`, untracked and batched over steps."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError("expected a (T, d') state trajectory")
    T = h.shape[0]
    if T == 0:
        raise ValueError("T must be at least 1")
    mask = emission_mask(params.vocab_size)
    n_emit = mask.sum()
    U = unary_logpot(h, params).value
    shift = U.max(axis=1)
    O = np.exp(U - shift[:, None]) * mask
    betas = np.empty((T + 1, params.vocab_size))
    scales = np.empty(T + 1)
    betas[T], scales[T] = mask / n_emit, np.log(n_emit)
    if params.unary_only:
        betas[:T] = 1.0 / params.vocab_size
        z = (O * betas[1:]).sum(axis=1) * params.vocab_size
        scales[:T] = np.log(z) + shift
    else:
        S = interaction(np.vstack([np.zeros((1, h.shape[1])), h[:-1]]), h, params).value
        x_pos, y_pos = np.exp(_val(params.X)), np.exp(_val(params.Y))
        full = params.interaction == "full"
        for t in reversed(range(T)):
            y = y_pos @ (O[t] * betas[t + 1])
            bt = (S[t] @ y if full else S[t] * y) @ x_pos
            z = bt.sum()
            betas[t], scales[t] = bt / z, np.log(z) + shift[t]
    log_z = scales.sum() + np.log(betas[0, BOS])
    if not (np.all(np.isfinite(scales)) and np.isfinite(log_z)):
        raise NumericError("numeric overflow in β recursion")
    return BackwardPass(betas, scales, float(log_z))


def _as_ids(w, T: int) -> np.ndarray:
    W = np.asarray(w, dtype=np.intp)[None, :]
    if W.shape[1] != T:
        raise ValueError(f"sentence length {W.shape[1]} != trajectory length {T}")
    return W


def sequence_logscore(w, h, params: ChainCrfParams) -> Tensor:
    hs = [C.reshape(C.const(h)[t], (1, -1)) for t in range(len(w))] if isinstance(h, Tensor) \
        else _hs(h)
    return C.reshape(batch_logscore(_as_ids(w, len(hs)), potentials(hs, params)), ())


def log_likelihood(w, h, params: ChainCrfParams) -> Tensor:
    hs = [C.reshape(C.const(h)[t], (1, -1)) for t in range(len(w))] if isinstance(h, Tensor) \
        else _hs(h)
    return C.reshape(batch_log_likelihood(_as_ids(w, len(hs)), hs, params), ())


def conditional_factor(t: int, w_prev: int, bp: BackwardPass, h, params: ChainCrfParams) -> np.ndarray:
    """``p(w_t = . | w_{<t}, h)``; ``w_prev`` must be BOS when ``t == 1``."""
    h = np.asarray(h, dtype=np.float64)
    T = h.shape[0]
    if not 1 <= t <= T:
        raise ValueError(f"t={t} outside 1..{T}")
    if t == 1 and w_prev != BOS:
        raise ValueError("w_prev must be BOS at t=1")
    if (t > 1 and w_prev == BOS) or bp.betas[t - 1][w_prev] <= 0.0:
        raise ValueError("unreachable prefix")
    u = unary_logpot(h[t - 1], params).value
    o = np.exp(u - u.max()) * emission_mask(params.vocab_size)
    h_prev = h[t - 2] if t > 1 else np.zeros(h.shape[1])
    p = pairwise_operator(h_prev, h[t - 1], params).row(w_prev) * o * bp.betas[t]
    z = p.sum()
    if not z > 0.0:
        raise ValueError("unreachable prefix")
    return p / z


def ancestral_sample(h, params: ChainCrfParams, rng: np.random.Generator) -> tuple:
    return tuple(int(i) for i in sample_batch(_hs(h), params, rng)[0])


def _dense_log_pairs(h, params: ChainCrfParams) -> np.ndarray:
    """``log T_t`` as dense ``(T, V, V)`` tables, computed entrywise in log space."""
    h = np.asarray(h, dtype=np.float64)
    T, V = h.shape[0], params.vocab_size
    if params.unary_only:
        return np.zeros((T, V, V))
    X, Y = _val(params.X), _val(params.Y)
    out = np.empty((T, V, V))
    prev = np.zeros(h.shape[1])
    for t in range(T):
        s = interaction(prev[None, :], h[t][None, :], params).value[0]
        if s.ndim == 1:
            z = X[:, :, None] + np.log(s)[:, None, None] + Y[:, None, :]
            out[t] = C.logsumexp(z, axis=0)
        else:
            z = (X[:, None, :, None] + np.log(s)[:, :, None, None] + Y[None, :, None, :])
            out[t] = C.logsumexp(z.reshape(-1, V, V), axis=0)
        prev = h[t]
    return out


def _enumerate_scores(h, params: ChainCrfParams) -> tuple[np.ndarray, np.ndarray]:
    h = np.asarray(h, dtype=np.float64)
    T, V = h.shape[0], params.vocab_size
    if (V - 1) ** T > MAX_ENUMERATION:
        raise ValueError("instance too large for enumeration")
    seqs = np.array(list(itertools.product(range(1, V), repeat=T)), dtype=np.intp)
    unary = np.stack([unary_logpot(h[t], params).value for t in range(T)])
    pairs = _dense_log_pairs(h, params)
    score = np.zeros(len(seqs))
    prev = np.full(len(seqs), BOS)
    for t in range(T):
        score += unary[t, seqs[:, t]] + pairs[t, prev, seqs[:, t]]
        prev = seqs[:, t]
    return seqs, score


def brute_force_log_probs(h, params: ChainCrfParams) -> tuple[np.ndarray, np.ndarray]:
    """Every sentence of length ``T`` with its exact log-probability (test oracle)."""
    seqs, score = _enumerate_scores(h, params)
    return seqs, score - C.logsumexp(score)


def brute_force_logZ(h, params: ChainCrfParams) -> float:
    """``log sum_w exp S(w; h)`` by literal enumeration over ``(|V|-1)^T`` sentences."""
    return float(C.logsumexp(_enumerate_scores(h, params)[1]))


def pairwise_marginals(bp: BackwardPass, h, params: ChainCrfParams) -> np.ndarray:
    """Dense ``P(w_{t-1} = i, w_t = j | h)`` tables ``(T, V, V)``; row ``BOS`` at ``t = 1``.

    Diagnostic only (forward-backward over dense tables).
    """
    h = np.asarray(h, dtype=np.float64)
    T, V = h.shape[0], params.vocab_size
    if V > MAX_DIAGNOSTIC_VOCAB:
        raise ValueError("diagnostic-only operation")
    mask = emission_mask(V)
    with np.errstate(divide="ignore"):
        logmask = np.log(mask)
    unary = np.stack([unary_logpot(h[t], params).value for t in range(T)]) + logmask
    pairs = _dense_log_pairs(h, params)
    out = np.zeros((T, V, V))
    log_alpha = np.full(V, -np.inf)
    log_alpha[BOS] = 0.0
    for t in range(T):
        lb = bp.log_beta(t + 2)
        z = log_alpha[:, None] + pairs[t] + unary[t][None, :] + lb[None, :] - bp.log_z
        out[t] = np.exp(z)
        with np.errstate(divide="ignore", invalid="ignore"):
            log_alpha = C.logsumexp(log_alpha[:, None] + pairs[t], axis=0) + unary[t]
    return out
