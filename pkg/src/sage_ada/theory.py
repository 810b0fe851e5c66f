"""Empirical checks of the naive-classifier error identity and the active bound.

The public names (``check_eq4``, ``evaluate_eq5`` and the report fields) are
fixed by the interface; below they are called the override identity and the
bound.

The override identity check verifies, under 0/1 loss with an exact oracle, that overriding
predictions on the annotated set ``A`` lowers the target error by exactly
``b * purity`` where ``b = |A| / n`` and purity is the fraction of ``A`` the
base classifier got wrong. The comparison is done in exact rational
arithmetic.

The bound evaluation assembles the right-hand side
``(1 / (b * purity) - 1) * (eps_S + 8 * tau + eta)``. ``tau`` is estimated by
gradient ascent over a small tanh critic (a lower bound of the supremum) and
``eta`` by fitting a linear head on frozen representations (an upper bound of
the infimum), so the resulting slack is a soft diagnostic only.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .errors import ContractViolation, NumericError
from .losses import cross_entropy_from_z
from .nn_core import DenseNet, GradientTape, sgd_step

LOSSES = ("l2", "zero_one")


def _as_one_hot(y: np.ndarray, c: int) -> np.ndarray:
    y = np.asarray(y)
    return np.eye(c)[y] if y.ndim == 1 else y.astype(np.float64)


def risk(pred: np.ndarray, y: np.ndarray, loss: str = "l2") -> float:
    """Mean loss of soft predictions ``pred`` against labels (integer or one-hot)."""
    pred = np.asarray(pred, dtype=np.float64)
    if len(pred) == 0:
        raise ContractViolation("empty dataset")
    if loss not in LOSSES:
        raise ContractViolation(f"loss must be one of {LOSSES}")
    yo = _as_one_hot(y, pred.shape[1])
    if loss == "l2":
        return float(np.mean(np.sum((pred - yo) ** 2, axis=1)))
    return float(np.mean(np.argmax(pred, axis=1) != np.argmax(yo, axis=1)))


def naive_override(pred: np.ndarray, y: np.ndarray, annotated: np.ndarray) -> np.ndarray:
    """Predictions with the oracle one-hot substituted on ``annotated`` rows."""
    out = np.array(pred, dtype=np.float64, copy=True)
    annotated = np.asarray(annotated, dtype=np.int64)
    if len(annotated):
        out[annotated] = _as_one_hot(np.asarray(y)[annotated], pred.shape[1])
    return out


@dataclass
class Eq4Check:
    b: float
    purity: float
    err_h_01: float
    err_ha_01: float
    err_h_l2: float
    err_ha_l2: float
    holds: bool  # exact equality err(h_A) = err(h) - b * purity under 0/1 loss
    exact_gap: Fraction


def check_eq4(pred: np.ndarray, y: np.ndarray, annotated: np.ndarray) -> Eq4Check:
    """Compare the naive classifier's error with ``err(h) - b * purity`` on one pool.

    ``pred`` are the base classifier's soft predictions for every pool sample,
    ``y`` the true labels and ``annotated`` the pool indices in ``A``. Purity is
    measured against the same ``pred``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    y_int = np.asarray(y) if np.asarray(y).ndim == 1 else np.argmax(y, axis=1)
    annotated = np.unique(np.asarray(annotated, dtype=np.int64))
    n = len(pred)
    wrong = np.argmax(pred, axis=1) != y_int
    ha = naive_override(pred, y_int, annotated)
    wrong_ha = np.argmax(ha, axis=1) != y_int
    n_a = len(annotated)
    wrong_in_a = int(np.count_nonzero(wrong[annotated])) if n_a else 0
    b = Fraction(n_a, n)
    purity = Fraction(wrong_in_a, n_a) if n_a else Fraction(0)
    lhs = Fraction(int(np.count_nonzero(wrong_ha)), n)
    rhs = Fraction(int(np.count_nonzero(wrong)), n) - b * purity
    return Eq4Check(
        b=float(b),
        purity=float(purity),
        err_h_01=float(np.mean(wrong)),
        err_ha_01=float(np.mean(wrong_ha)),
        err_h_l2=risk(pred, y_int, "l2"),
        err_ha_l2=risk(ha, y_int, "l2"),
        holds=lhs == rhs,
        exact_gap=lhs - rhs,
    )


def estimate_tau(
    z_target: np.ndarray,
    ha_target: np.ndarray,
    z_source: np.ndarray,
    y_source: np.ndarray,
    rng: np.random.Generator,
    steps: int = 500,
    lr: float = 0.01,
    hidden: int = 64,
) -> float:
    """Best value of ``mean_T[ha . g(z)] - mean_S[y . g(z)]`` over a tanh critic's ascent path.

    The critic starts from a fresh random network; ``steps = 0`` returns the
    untrained critic's objective.
    """
    c = ha_target.shape[1]
    critic = DenseNet.build([z_target.shape[1], hidden, c], ["relu", "tanh"], rng)
    tape = GradientTape(critic)
    nt, ns = len(z_target), len(z_source)
    z = np.vstack([z_target, z_source])
    weights = np.vstack([ha_target / nt, -np.asarray(y_source, dtype=np.float64) / ns])
    best = -math.inf
    for step in range(steps + 1):
        out = critic.forward(z)
        value = float(np.sum(weights * out))
        if not math.isfinite(value):
            raise NumericError(f"critic objective became non-finite at step {step}")
        best = max(best, value)
        if step == steps:
            break
        critic.backward(-weights, tape)  # descend on -objective
        sgd_step(critic, tape, lr)
    return best


def estimate_eta(
    z_target: np.ndarray,
    y_target: np.ndarray,
    n_classes: int,
    rng: np.random.Generator,
    steps: int = 500,
    lr: float = 0.1,
) -> float:
    """Lowest L2 risk reached by a linear softmax head fitted on frozen target representations."""
    head = DenseNet.build([z_target.shape[1], n_classes], ["softmax"], rng)
    tape = GradientTape(head)
    yo = _as_one_hot(y_target, n_classes)
    best = risk(head.forward(z_target), yo, "l2")
    for _ in range(steps):
        cross_entropy_from_z(head, z_target, yo, tape)
        sgd_step(head, tape, lr)
        best = min(best, risk(head.forward(z_target), yo, "l2"))
    return best


@dataclass
class BoundReport:
    b: float
    purity: float
    eps_s_l2: float
    eps_s_01: float
    eps_t_h_l2: float
    eps_t_h_01: float
    eps_t_ha_l2: float
    eps_t_ha_01: float
    tau_hat: float
    eta_hat: float
    rhs_eq5: float
    slack_eq5: float
    holds_eq4: bool
    beta: float
    beta_in_range: bool

    def as_row(self) -> dict:
        return {k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(self).items()}


def evaluate_eq5(
    b: float,
    purity: float,
    eps_s: float,
    eps_t_ha: float,
    tau_hat: float,
    eta_hat: float,
) -> tuple[float, float]:
    """Return ``(rhs, slack)``; both are ``inf`` when ``b * purity == 0`` (vacuous bound)."""
    bp = b * purity
    if bp <= 0:
        return math.inf, math.inf
    rhs = (1.0 / bp - 1.0) * (eps_s + 8.0 * tau_hat + eta_hat)
    if bp == 1.0:
        rhs = 0.0
    return rhs, rhs - eps_t_ha


def bound_report(
    z_source: np.ndarray,
    y_source: np.ndarray,
    pred_source: np.ndarray,
    z_pool: np.ndarray,
    y_pool: np.ndarray,
    pred_pool: np.ndarray,
    annotated: np.ndarray,
    rng: np.random.Generator,
    tau_steps: int = 500,
    tau_lr: float = 0.01,
    eta_steps: int = 500,
    eta_lr: float = 0.1,
) -> BoundReport:
    """Full set of bound quantities for one model state on the target-train pool."""
    c = pred_pool.shape[1]
    ident = check_eq4(pred_pool, y_pool, annotated)
    ha = naive_override(pred_pool, y_pool, annotated)
    ys = _as_one_hot(y_source, c)
    tau = estimate_tau(z_pool, ha, z_source, ys, rng, steps=tau_steps, lr=tau_lr)
    eta = estimate_eta(z_pool, y_pool, c, rng, steps=eta_steps, lr=eta_lr)
    eps_s = risk(pred_source, ys, "l2")
    rhs, slack = evaluate_eq5(ident.b, ident.purity, eps_s, ident.err_ha_l2, tau, eta)
    bp = ident.b * ident.purity
    beta = 1.0 - bp / ident.err_h_l2 if ident.err_h_l2 > 0 else -math.inf
    return BoundReport(
        b=ident.b,
        purity=ident.purity,
        eps_s_l2=eps_s,
        eps_s_01=risk(pred_source, ys, "zero_one"),
        eps_t_h_l2=ident.err_h_l2,
        eps_t_h_01=ident.err_h_01,
        eps_t_ha_l2=ident.err_ha_l2,
        eps_t_ha_01=ident.err_ha_01,
        tau_hat=tau,
        eta_hat=eta,
        rhs_eq5=rhs,
        slack_eq5=slack,
        holds_eq4=ident.holds,
        beta=beta,
        beta_in_range=0.0 <= beta <= 1.0,
    )
