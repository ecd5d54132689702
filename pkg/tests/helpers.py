"""Shared builders for small random model instances."""

import numpy as np

from crfgen.crf import ChainCrfParams, init_crf_params


def random_crf(V, d=3, dl=2, seed=0, interaction="diagonal", scale=0.8, hidden=8,
               unary_only=False):
    """CRF with large enough weights that every factor matters."""
    rng = np.random.default_rng(seed)
    flat = init_crf_params(V, d, dl, rng, hidden=hidden, interaction=interaction, scale=scale)
    flat["crf.b"] = rng.normal(0, scale, V)
    flat["crf.s_mlp.b1"] = rng.normal(0, scale, hidden)
    flat["crf.s_mlp.W2"] = rng.normal(0, 1.0, flat["crf.s_mlp.W2"].shape)
    return ChainCrfParams.from_flat(flat, interaction=interaction, unary_only=unary_only)


def uniform_crf(V, d=3, dl=2):
    """Zero unaries and an all-ones pairwise matrix."""
    p = random_crf(V, d, dl, unary_only=True)
    p.xu = np.zeros_like(p.xu)
    p.b = np.zeros_like(p.b)
    return p


def trajectory(T, dl=2, seed=0):
    return np.random.default_rng(seed + 1000).normal(size=(T, dl))
