"""Training losses: source cross-entropy, domain-adversarial and transferability losses.

Each public loss runs its own forward pass, returns the scalar value and, when
tapes are supplied, accumulates gradients. Losses are batch means.

Sign conventions for the adversarial losses: the discriminator tape receives
the gradient of the *discriminator's* objective (the negated loss), so a plain
:func:`~sage_ada.nn_core.sgd_step` on it performs ascent on the loss. The
feature-extractor tape receives that gradient reversed and scaled by the
gradient-reversal weight, i.e. ``grl * dL/dtheta_phi``.

The ``*_from_z`` helpers work on precomputed representations so that a
training step can share one feature-extractor pass between several losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .nn_core import DenseNet, GradientTape

EPS = 1e-12


def _clamp(p: np.ndarray, eps: float = EPS) -> tuple[np.ndarray, np.ndarray]:
    pc = np.clip(p, eps, 1.0 - eps)
    inside = (p >= eps) & (p <= 1.0 - eps)
    return pc, inside


def _check_rows_sum_to_one(y: np.ndarray, what: str, tol: float = 1e-8) -> None:
    if y.ndim != 2:
        raise ContractViolation(f"{what} must be a 2-D array of label rows")
    if np.any(np.abs(y.sum(axis=1) - 1.0) > tol):
        raise ContractViolation(f"{what} rows must sum to 1")


@dataclass
class BatchView:
    xs: np.ndarray
    ys: np.ndarray
    xt: np.ndarray
    yt: np.ndarray

    def __post_init__(self) -> None:
        if len(self.xs) == 0 or len(self.xt) == 0:
            raise ContractViolation("empty source or target batch")
        if len(self.xs) != len(self.ys) or len(self.xt) != len(self.yt):
            raise ContractViolation("features and labels have different lengths")
        if not np.all(np.isclose(self.ys.max(axis=1), 1.0) & (np.count_nonzero(self.ys, axis=1) == 1)):
            raise ContractViolation("source labels must be one-hot")
        _check_rows_sum_to_one(self.yt, "target labels")


def cross_entropy_from_z(
    f: DenseNet, z: np.ndarray, y: np.ndarray, f_tape: GradientTape | None = None
) -> tuple[float, np.ndarray]:
    """Mean ``-y . log f(z)``; returns the loss and dL/dz."""
    if len(z) == 0:
        raise ContractViolation("empty batch")
    n = len(z)
    p = f.forward(z)
    pc, inside = _clamp(p)
    loss = float(-np.sum(y * np.log(pc)) / n)
    up = np.where(inside, -y / (pc * n), 0.0)
    dz = f.backward(up, f_tape)
    return loss, dz


def cross_entropy(
    f: DenseNet,
    phi: DenseNet,
    x: np.ndarray,
    y: np.ndarray,
    f_tape: GradientTape | None = None,
    phi_tape: GradientTape | None = None,
) -> float:
    """Source classification loss, mean over the batch of ``-y . log f(phi(x))``."""
    if len(x) == 0:
        raise ContractViolation("empty batch")
    z = phi.forward(x)
    loss, dz = cross_entropy_from_z(f, z, y, f_tape)
    if phi_tape is not None:
        phi.backward(dz, phi_tape)
    return loss


def _weighted_log_terms(
    disc: DenseNet, z: np.ndarray, ws: np.ndarray, wt: np.ndarray, ns: int
) -> tuple[float, np.ndarray]:
    """``sum_S ws.log(1-d) / ns + sum_T wt.log(d) / nt`` with dL/d(d-output).

    ``z`` stacks source rows on top of target rows.
    """
    nt = len(z) - ns
    d = disc.forward(z)
    ds, dt = d[:ns], d[ns:]
    one_minus, in_s = _clamp(1.0 - ds)
    dtc, in_t = _clamp(dt)
    loss = float(np.sum(ws * np.log(one_minus)) / ns + np.sum(wt * np.log(dtc)) / nt)
    up = np.empty_like(d)
    up[:ns] = np.where(in_s, -ws / (one_minus * ns), 0.0)
    up[ns:] = np.where(in_t, wt / (dtc * nt), 0.0)
    return loss, up


def transferability_from_z(
    disc: DenseNet,
    zs: np.ndarray,
    ys: np.ndarray,
    zt: np.ndarray,
    yt: np.ndarray,
    disc_tape: GradientTape | None = None,
    grl: float = 1.0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Class-conditioned adversarial loss on representations.

    Returns ``(loss, dz_source, dz_target)`` where the ``dz`` parts are already
    reversed and scaled by ``grl`` (ready to feed into the feature extractor).
    """
    if len(zs) == 0 or len(zt) == 0:
        raise ContractViolation("empty source or target batch")
    _check_rows_sum_to_one(yt, "target labels")
    ns = len(zs)
    z = np.vstack([zs, zt])
    loss, up = _weighted_log_terms(disc, z, ys, yt, ns)
    dz = disc.backward(-up, disc_tape)
    dz = -grl * dz
    return loss, dz[:ns], dz[ns:]


def transferability_loss(
    phi: DenseNet,
    disc: DenseNet,
    xs: np.ndarray,
    ys: np.ndarray,
    xt: np.ndarray,
    yt: np.ndarray,
    disc_tape: GradientTape | None = None,
    phi_tape: GradientTape | None = None,
    grl: float = 1.0,
) -> float:
    """``E_S[y . log(1 - disc(phi(x)))] + E_T[yt . log disc(phi(x))]``.

    ``yt`` holds the target conditioning labels: soft predictions, or
    active-classifier outputs with oracle one-hots on annotated rows. They are
    treated as constants.
    """
    if len(xs) == 0 or len(xt) == 0:
        raise ContractViolation("empty source or target batch")
    _check_rows_sum_to_one(yt, "target labels")
    x = np.vstack([xs, xt])
    z = phi.forward(x)
    loss, dzs, dzt = transferability_from_z(disc, z[: len(xs)], ys, z[len(xs):], yt, disc_tape, grl)
    if phi_tape is not None:
        phi.backward(np.vstack([dzs, dzt]), phi_tape)
    return loss


def domain_adversarial_from_z(
    d_bin: DenseNet,
    zs: np.ndarray,
    zt: np.ndarray,
    d_tape: GradientTape | None = None,
    grl: float = 1.0,
) -> tuple[float, np.ndarray, np.ndarray]:
    if len(zs) == 0 or len(zt) == 0:
        raise ContractViolation("empty source or target batch")
    ns = len(zs)
    z = np.vstack([zs, zt])
    ws = np.ones((ns, 1))
    wt = np.ones((len(zt), 1))
    loss, up = _weighted_log_terms(d_bin, z, ws, wt, ns)
    dz = -grl * d_bin.backward(-up, d_tape)
    return loss, dz[:ns], dz[ns:]


def domain_adversarial_loss(
    phi: DenseNet,
    d_bin: DenseNet,
    xs: np.ndarray,
    xt: np.ndarray,
    d_tape: GradientTape | None = None,
    phi_tape: GradientTape | None = None,
    grl: float = 1.0,
) -> float:
    """``E_S[log(1 - d(phi(x)))] + E_T[log d(phi(x))]`` with a single-output discriminator."""
    if len(xs) == 0 or len(xt) == 0:
        raise ContractViolation("empty source or target batch")
    z = phi.forward(np.vstack([xs, xt]))
    loss, dzs, dzt = domain_adversarial_from_z(d_bin, z[: len(xs)], z[len(xs):], d_tape, grl)
    if phi_tape is not None:
        phi.backward(np.vstack([dzs, dzt]), phi_tape)
    return loss


def prediction_entropy(p: np.ndarray) -> np.ndarray | float:
    """Shannon entropy (nats) of one distribution or of each row, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ContractViolation("probabilities must be non-negative")
    logs = np.log(np.where(p > 0, p, 1.0))
    h = -np.sum(p * logs, axis=-1)
    return float(h) if p.ndim == 1 else h
