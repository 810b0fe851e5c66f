"""Selection strategies behind one interface: SAGE, norm-only SAGE, entropy, random, AADA."""

from __future__ import annotations

from enum import Enum

import numpy as np

from .errors import ContractViolation
from .losses import prediction_entropy
from .nn_core import DenseNet, ModelBundle
from .sage import farthest_first, norm_only_select, pool_embeddings

AADA_CLAMP = 1e-6


class StrategyKind(str, Enum):
    SAGE = "sage"
    SAGE_NORM_ONLY = "sage_norm_only"
    ENTROPY = "entropy"
    RANDOM = "random"
    AADA = "aada"


def _check_budget(budget: int, n: int) -> None:
    if n == 0:
        raise ContractViolation("empty pool")
    if budget < 0 or budget > n:
        raise ContractViolation(f"budget {budget} exceeds pool size {n}")


def _top_k(scores: np.ndarray, k: int) -> list[int]:
    # Highest score first, lowest index on ties.
    order = np.lexsort((np.arange(len(scores)), -scores))
    return [int(i) for i in order[:k]]


def entropy_select(x_pool: np.ndarray, f: DenseNet, phi: DenseNet, budget: int) -> list[int]:
    _check_budget(budget, len(x_pool))
    return _top_k(prediction_entropy(f.forward(phi.forward(x_pool))), budget)


def random_select(n_pool: int, budget: int, rng: np.random.Generator) -> list[int]:
    _check_budget(budget, n_pool)
    return [int(i) for i in rng.choice(n_pool, size=budget, replace=False)]


def aada_score(probs: np.ndarray, d_source: np.ndarray) -> np.ndarray | float:
    """Entropy times importance weight ``(1 - d) / d``.

    ``d_source`` is the discriminator's probability that a sample comes from
    the source domain, so target-looking samples get large weights.
    """
    d = np.clip(np.asarray(d_source, dtype=np.float64), AADA_CLAMP, 1.0 - AADA_CLAMP)
    return prediction_entropy(probs) * (1.0 - d) / d


def aada_select(
    x_pool: np.ndarray, f: DenseNet, phi: DenseNet, d_bin: DenseNet, budget: int
) -> list[int]:
    _check_budget(budget, len(x_pool))
    z = phi.forward(x_pool)
    probs = f.forward(z)
    # d_bin is trained to output 1 on target (ascent on the invariance loss).
    d_source = 1.0 - d_bin.forward(z)[:, 0]
    return _top_k(aada_score(probs, d_source), budget)


def select(
    strategy: StrategyKind | str,
    x_pool: np.ndarray,
    bundle: ModelBundle,
    budget: int,
    rng: np.random.Generator,
    embeddings: np.ndarray | None = None,
) -> list[int]:
    """Dispatch to one strategy; returns indices into ``x_pool``.

    ``embeddings`` may carry precomputed SAGE embeddings of ``x_pool``.
    """
    kind = StrategyKind(strategy)
    _check_budget(budget, len(x_pool))
    if kind in (StrategyKind.SAGE, StrategyKind.SAGE_NORM_ONLY):
        if embeddings is None:
            embeddings = pool_embeddings(x_pool, bundle.f, bundle.phi, bundle.disc)
        if kind is StrategyKind.SAGE:
            return farthest_first(embeddings, budget)
        return norm_only_select(embeddings, budget)
    if kind is StrategyKind.ENTROPY:
        return entropy_select(x_pool, bundle.f, bundle.phi, budget)
    if kind is StrategyKind.RANDOM:
        return random_select(len(x_pool), budget, rng)
    return aada_select(x_pool, bundle.f, bundle.phi, bundle.d_bin, budget)
