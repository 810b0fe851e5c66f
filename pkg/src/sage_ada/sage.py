"""Stochastic adversarial gradient embeddings and diverse greedy selection.

For a target sample with representation ``z``, the class-level discriminator
gives one gradient per class, ``G[i] = -d log disc(z)_i / dz``. Weighted by
the classifier's prediction ``h``, these form a random vector whose mean is
``E = sum_i h_i G[i]``. The positive orthogonal projection removes
``|G[i].E| / ||E||^2`` times ``E`` from each row: rows that agree with the
mean direction vanish, rows that oppose it double. The embedding stacks
``sqrt(h_i) * projected[i]``, so its Euclidean norm is the ``h``-expected
norm of the projected gradient.

Arrays are batched: ``grads`` is ``(n, c, d)`` and ``probs`` is ``(n, c)``.
Single-sample ``(c, d)`` / ``(c,)`` inputs are accepted by the pure
functions and return unbatched results.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractViolation
from .losses import EPS
from .nn_core import DenseNet

DEGENERATE_NORM = 1e-12


@dataclass
class StochasticAdvGradient:
    grads: np.ndarray  # (n, c, d)
    probs: np.ndarray  # (n, c)
    n_clamped: int = 0

    @property
    def expected(self) -> np.ndarray:
        return expected_gradient(self.grads, self.probs)

    @property
    def projected(self) -> np.ndarray:
        return positive_projection(self.grads, self.probs)

    def embed(self) -> np.ndarray:
        return sage_embed(self.projected, self.probs)


def adversarial_gradient(
    phi: DenseNet, f: DenseNet, disc: DenseNet, x: np.ndarray
) -> StochasticAdvGradient:
    """Per-class gradients of ``-log disc(z)_i`` w.r.t. ``z = phi(x)`` plus ``h(x) = f(z)``.

    Uses one backward pass through ``disc`` per class; no tape is touched.
    Discriminator outputs are clamped to ``[EPS, 1 - EPS]`` inside the log and
    clamped entries are counted in ``n_clamped``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    z = phi.forward(xb)
    probs = f.forward(z)
    d = disc.forward(z)
    dc = np.clip(d, EPS, 1.0 - EPS)
    n_clamped = int(np.count_nonzero(dc != d))
    n, c = d.shape
    grads = np.empty((n, c, z.shape[1]))
    for i in range(c):
        up = np.zeros_like(d)
        up[:, i] = -1.0 / dc[:, i]
        grads[:, i, :] = disc.backward(up)
    if single:
        return StochasticAdvGradient(grads[0], probs[0], n_clamped)
    return StochasticAdvGradient(grads, probs, n_clamped)


def expected_gradient(grads: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return np.einsum("...c,...cd->...d", probs, grads)


def positive_projection(grads: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Row-wise ``G[i] - |G[i].E| / ||E||^2 * E``; rows are left alone where ``||E|| < 1e-12``."""
    e = expected_gradient(grads, probs)
    e_sq = np.sum(e * e, axis=-1)
    dots = np.einsum("...cd,...d->...c", grads, e)
    degenerate = np.sqrt(e_sq) < DEGENERATE_NORM
    coef = np.abs(dots) / np.where(degenerate, 1.0, e_sq)[..., None]
    coef = np.where(degenerate[..., None], 0.0, coef)
    return grads - coef[..., None] * e[..., None, :]


def sage_embed(projected: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Flatten ``sqrt(probs_i) * projected[i]`` into a ``c * d`` vector (per sample)."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < 0):
        raise ContractViolation("negative class probability")
    if probs.shape != projected.shape[:-1]:
        raise ContractViolation(f"probs {probs.shape} and gradients {projected.shape} disagree")
    blocks = np.sqrt(probs)[..., None] * projected
    return blocks.reshape(*blocks.shape[:-2], -1)


def sage_norm(embedding: np.ndarray) -> np.ndarray | float:
    out = np.linalg.norm(embedding, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def sage_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"embedding shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def farthest_first(embeddings: np.ndarray, budget: int) -> list[int]:
    """Greedy selection: the max-norm row, then repeatedly the row farthest from the chosen set.

    Ties go to the lowest index. Already-chosen rows are never picked again.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = len(embeddings)
    if n == 0:
        raise ContractViolation("empty pool")
    if budget > n:
        raise ContractViolation(f"budget {budget} exceeds pool size {n}")
    if budget <= 0:
        return []
    first = int(np.argmax(np.linalg.norm(embeddings, axis=1)))
    chosen = [first]
    min_dist = np.linalg.norm(embeddings - embeddings[first], axis=1)
    min_dist[first] = -np.inf
    while len(chosen) < budget:
        nxt = int(np.argmax(min_dist))
        chosen.append(nxt)
        min_dist = np.minimum(min_dist, np.linalg.norm(embeddings - embeddings[nxt], axis=1))
        min_dist[chosen] = -np.inf
    return chosen


def pool_embeddings(
    x_pool: np.ndarray, f: DenseNet, phi: DenseNet, disc: DenseNet
) -> np.ndarray:
    sag = adversarial_gradient(phi, f, disc, x_pool)
    return sag.embed()


def diverse_sage_select(
    x_pool: np.ndarray, f: DenseNet, phi: DenseNet, disc: DenseNet, budget: int
) -> list[int]:
    """Indices (into ``x_pool``) of ``budget`` diverse, high-norm SAGE samples."""
    if len(x_pool) == 0:
        raise ContractViolation("empty pool")
    if budget > len(x_pool):
        raise ContractViolation(f"budget {budget} exceeds pool size {len(x_pool)}")
    return farthest_first(pool_embeddings(x_pool, f, phi, disc), budget)


def norm_only_select(embeddings: np.ndarray, budget: int) -> list[int]:
    """Top-``budget`` rows by SAGE norm, ties to the lowest index."""
    if budget > len(embeddings):
        raise ContractViolation(f"budget {budget} exceeds pool size {len(embeddings)}")
    norms = np.linalg.norm(embeddings, axis=1)
    order = np.lexsort((np.arange(len(norms)), -norms))
    return [int(i) for i in order[:budget]]


def dump_norms_csv(
    path: str | Path, pool_indices: Sequence[int], norms: np.ndarray, selected: Sequence[int]
) -> None:
    """Write ``pool_index,norm,selected_flag`` rows for offline inspection."""
    chosen = set(int(i) for i in selected)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pool_index", "norm", "selected_flag"])
        for idx, nrm in zip(pool_indices, norms):
            w.writerow([int(idx), repr(float(nrm)), int(int(idx) in chosen)])
