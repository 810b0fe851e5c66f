"""Oracle, active classifiers and the round-based active adaptation loop.

One run proceeds as:

1. UDA pretraining: ``n_pre`` transfer steps conditioned on the model's own
   soft predictions (or, for the AADA baseline, a plain domain-adversarial
   objective with a binary discriminator).
2. ``rounds`` annotation rounds. Each selects ``b`` pool samples with the
   configured strategy, queries the oracle, then runs ``n_it`` iterations of
   (active-classifier update; transfer step conditioned on the active
   classifier).
3. After pretraining and after every round, one :class:`MetricsRow` is
   measured on target-test.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .baselines import StrategyKind, select
from .config import ExperimentConfig
from .data import DomainDataset
from .errors import ContractViolation, NumericError
from .losses import (
    cross_entropy_from_z,
    domain_adversarial_from_z,
    transferability_from_z,
)
from .nn_core import DenseNet, GradientTape, ModelBundle, grl_lambda, sgd_step
from .sage import adversarial_gradient
from .theory import BoundReport, bound_report

log = logging.getLogger(__name__)


class Oracle:
    """Ground-truth labeller for the target-train pool."""

    def __init__(self, labels: np.ndarray, n_classes: int):
        self._labels = np.asarray(labels, dtype=np.int64)
        self.n_classes = n_classes
        self.n_queries = 0

    def __len__(self) -> int:
        return len(self._labels)

    def annotate(self, index: int) -> np.ndarray:
        if not 0 <= index < len(self._labels):
            raise ContractViolation(f"index {index} is outside the target-train pool")
        self.n_queries += 1
        out = np.zeros(self.n_classes)
        out[self._labels[index]] = 1.0
        return out


@dataclass(frozen=True)
class ActiveEntry:
    index: int
    label: np.ndarray
    round: int
    pre_prediction: int


class ActiveSet:
    """Annotated pool indices in the order they were acquired."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.entries: list[ActiveEntry] = []
        self._index: set[int] = set()

    def add(self, index: int, label: np.ndarray, round_: int, pre_prediction: int) -> None:
        index = int(index)
        if index in self._index:
            raise ContractViolation(f"index {index} already annotated")
        if self.entries and round_ < self.entries[-1].round:
            raise ContractViolation("round numbers must be nondecreasing")
        label = np.asarray(label, dtype=np.float64)
        if label.shape != (self.n_classes,) or np.count_nonzero(label) != 1 or label.max() != 1.0:
            raise ContractViolation("labels must be one-hot")
        self.entries.append(ActiveEntry(index, label, int(round_), int(pre_prediction)))
        self._index.add(index)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, index: object) -> bool:
        return index in self._index

    @property
    def indices(self) -> np.ndarray:
        return np.array([e.index for e in self.entries], dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, self.n_classes))
        return np.stack([e.label for e in self.entries])

    def label_of(self) -> dict[int, np.ndarray]:
        return {e.index: e.label for e in self.entries}


def naive_predict(probs: np.ndarray, pool_indices: np.ndarray, active: ActiveSet) -> np.ndarray:
    """Base predictions with oracle labels substituted on annotated pool indices."""
    out = np.array(probs, dtype=np.float64, copy=True)
    if len(active):
        lookup = active.label_of()
        for row, idx in enumerate(np.asarray(pool_indices)):
            lab = lookup.get(int(idx))
            if lab is not None:
                out[row] = lab
    return out


def purity(active: ActiveSet) -> float:
    """Fraction of annotated samples whose pre-annotation prediction was wrong."""
    if not len(active):
        raise ContractViolation("purity of an empty active set")
    wrong = sum(e.pre_prediction != int(np.argmax(e.label)) for e in active.entries)
    return wrong / len(active)


class ActiveClassifier:
    """The classifier whose predictions condition target samples in the transfer step.

    ``naive`` defers to the base head; ``balance`` and ``inductive`` keep their
    own copy of the head, re-synchronised from the base at every round start.
    """

    def __init__(self, variant: str, gamma: float = 0.5):
        if variant not in ("naive", "balance", "inductive"):
            raise ContractViolation(f"unknown variant {variant!r}")
        self.variant = variant
        self.gamma = gamma
        self.head: DenseNet | None = None

    def sync(self, f: DenseNet) -> None:
        self.head = None if self.variant == "naive" else f.copy()

    def probs(self, f: DenseNet, z: np.ndarray) -> np.ndarray:
        return (f if self.head is None else self.head).forward(z)


def balance_train(
    head: DenseNet,
    z_source: np.ndarray,
    y_source: np.ndarray,
    z_active: np.ndarray,
    y_active: np.ndarray,
    gamma: float,
    steps: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 32,
) -> DenseNet:
    """SGD on ``gamma * CE(source) + (1 - gamma) * CE(annotated)`` with frozen representations."""
    if len(z_active) == 0:
        raise ContractViolation("balance training needs at least one annotation")
    if not 0 < gamma < 1:
        raise ContractViolation("gamma must lie in (0, 1)")
    tape = GradientTape(head)
    scratch = GradientTape(head)
    for _ in range(steps):
        idx = rng.choice(len(z_source), size=min(batch_size, len(z_source)), replace=False)
        cross_entropy_from_z(head, z_source[idx], y_source[idx], scratch)
        scratch.scale(gamma)
        cross_entropy_from_z(head, z_active, y_active, tape)
        tape.scale(1.0 - gamma)
        for (gw, gb), (sw, sb) in zip(tape.grads, scratch.grads):
            gw += sw
            gb += sb
        scratch.zero()
        sgd_step(head, tape, lr)
    return head


def inductive_step(head: DenseNet, z_active: np.ndarray, y_active: np.ndarray, lr: float) -> DenseNet:
    """One SGD step on the annotated-set cross-entropy, representation frozen."""
    if len(z_active) == 0:
        raise ContractViolation("inductive step needs at least one annotation")
    tape = GradientTape(head)
    cross_entropy_from_z(head, z_active, y_active, tape)
    return sgd_step(head, tape, lr)


@dataclass
class Diagnostics:
    refused_steps: int = 0
    clamped_disc_outputs: int = 0


@dataclass
class Tapes:
    phi: GradientTape
    f: GradientTape
    disc: GradientTape
    d_bin: GradientTape

    @classmethod
    def for_bundle(cls, bundle: ModelBundle) -> "Tapes":
        return cls(*(GradientTape(n) for n in (bundle.phi, bundle.f, bundle.disc, bundle.d_bin)))

    def zero(self) -> None:
        for t in (self.phi, self.f, self.disc, self.d_bin):
            t.zero()


LabelFn = Callable[[np.ndarray], np.ndarray]


def transfer_step(
    bundle: ModelBundle,
    tapes: Tapes,
    xs: np.ndarray,
    ys: np.ndarray,
    xt: np.ndarray,
    lam: float,
    lr: float,
    label_fn: LabelFn | None = None,
    diagnostics: Diagnostics | None = None,
) -> dict[str, float] | None:
    """One joint update of (f, phi, disc).

    ``label_fn`` maps target representations to conditioning labels; by
    default the classifier's own (detached) soft predictions are used. The
    discriminator ascends the transferability loss; phi receives its
    gradient through a reversal layer of weight ``lam``. Returns the losses,
    or ``None`` when a non-finite gradient made the step be refused.
    """
    ns = len(xs)
    z = bundle.phi.forward(np.vstack([xs, xt]))
    zs, zt = z[:ns], z[ns:]
    yt = bundle.f.forward(zt) if label_fn is None else label_fn(zt)
    try:
        loss_c, dzs = cross_entropy_from_z(bundle.f, zs, ys, tapes.f)
        loss_t, dzs_t, dzt_t = transferability_from_z(bundle.disc, zs, ys, zt, yt, tapes.disc, lam)
        bundle.phi.backward(np.vstack([dzs + dzs_t, dzt_t]), tapes.phi)
        if not all(t.is_finite() for t in (tapes.phi, tapes.f, tapes.disc)):
            raise NumericError("non-finite gradient in transfer step")
    except NumericError:
        tapes.zero()
        if diagnostics is not None:
            diagnostics.refused_steps += 1
        return None
    sgd_step(bundle.f, tapes.f, lr)
    sgd_step(bundle.phi, tapes.phi, lr)
    sgd_step(bundle.disc, tapes.disc, lr)
    return {"loss_c": loss_c, "loss_tsf": loss_t}


def dann_step(
    bundle: ModelBundle,
    tapes: Tapes,
    xs: np.ndarray,
    ys: np.ndarray,
    xt: np.ndarray,
    lam: float,
    lr: float,
    target_labels: np.ndarray | None = None,
    diagnostics: Diagnostics | None = None,
) -> dict[str, float] | None:
    """Domain-adversarial step with the binary discriminator (AADA's training objective).

    Rows of ``target_labels`` that are all-zero mark unannotated target
    samples; annotated rows join the supervised cross-entropy.
    """
    ns = len(xs)
    z = bundle.phi.forward(np.vstack([xs, xt]))
    zs, zt = z[:ns], z[ns:]
    try:
        if target_labels is not None and target_labels.any():
            ann = target_labels.any(axis=1)
            zsup = np.vstack([zs, zt[ann]])
            ysup = np.vstack([ys, target_labels[ann]])
            loss_c, dsup = cross_entropy_from_z(bundle.f, zsup, ysup, tapes.f)
            dzs, dzt_sup = dsup[:ns], np.zeros_like(zt)
            dzt_sup[ann] = dsup[ns:]
        else:
            loss_c, dzs = cross_entropy_from_z(bundle.f, zs, ys, tapes.f)
            dzt_sup = np.zeros_like(zt)
        loss_inv, dzs_i, dzt_i = domain_adversarial_from_z(bundle.d_bin, zs, zt, tapes.d_bin, lam)
        bundle.phi.backward(np.vstack([dzs + dzs_i, dzt_sup + dzt_i]), tapes.phi)
        if not all(t.is_finite() for t in (tapes.phi, tapes.f, tapes.d_bin)):
            raise NumericError("non-finite gradient in DANN step")
    except NumericError:
        tapes.zero()
        if diagnostics is not None:
            diagnostics.refused_steps += 1
        return None
    sgd_step(bundle.f, tapes.f, lr)
    sgd_step(bundle.phi, tapes.phi, lr)
    sgd_step(bundle.d_bin, tapes.d_bin, lr)
    return {"loss_c": loss_c, "loss_inv": loss_inv}


METRIC_COLUMNS = (
    "run_id",
    "config_hash",
    "strategy",
    "variant",
    "seed",
    "round",
    "annotated_count",
    "purity_cum",
    "acc_target_test",
    "acc_source",
    "sage_mean_norm",
    "selected",
)


@dataclass
class MetricsRow:
    run_id: str
    config_hash: str
    strategy: str
    variant: str
    seed: int
    round: int
    annotated_count: int
    purity_cum: float
    acc_target_test: float
    acc_source: float
    sage_mean_norm: float
    selected: tuple[int, ...] = ()

    def as_csv(self) -> list[str]:
        return [
            self.run_id,
            self.config_hash,
            self.strategy,
            self.variant,
            str(self.seed),
            str(self.round),
            str(self.annotated_count),
            repr(self.purity_cum),
            repr(self.acc_target_test),
            repr(self.acc_source),
            repr(self.sage_mean_norm),
            " ".join(str(i) for i in self.selected),
        ]


@dataclass
class RunResult:
    rows: list[MetricsRow]
    bundle: ModelBundle
    active: ActiveSet
    diagnostics: Diagnostics
    bounds: list[tuple[int, BoundReport]] = field(default_factory=list)


def accuracy(bundle: ModelBundle, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(bundle.predict(x), axis=1) == y))


def _pretrain_objective(config: ExperimentConfig) -> str:
    return "inv" if config.strategy == StrategyKind.AADA.value else "tsf"


def pretrain_key(config: ExperimentConfig, seed: int) -> tuple:
    """Everything that determines the pretrained model of one seed."""
    return (
        seed,
        _pretrain_objective(config),
        config.n_pre,
        config.lr,
        config.grl_steepness,
        config.source_batch,
        config.target_batch,
        config.hidden,
        config.rep_dim,
        config.dataset_spec(),
    )


def pretrain(config: ExperimentConfig, data: DomainDataset, seed: int) -> tuple[ModelBundle, Diagnostics]:
    """UDA pretraining. Uses its own RNG stream so its result can be shared across strategies."""
    rng = np.random.default_rng([seed, 0])
    bundle = ModelBundle.build(data.n_features, data.n_classes, rng, config.hidden, config.rep_dim)
    tapes = Tapes.for_bundle(bundle)
    diag = Diagnostics()
    ys_all = data.one_hot(data.ys)
    objective = _pretrain_objective(config)
    n_pool = len(data.xt_train)
    for step in range(config.n_pre):
        lam = grl_lambda(step / config.n_pre, config.grl_steepness)
        si = rng.choice(len(data.xs), size=min(config.source_batch, len(data.xs)), replace=False)
        ti = rng.choice(n_pool, size=min(config.target_batch, n_pool), replace=False)
        if objective == "tsf":
            transfer_step(bundle, tapes, data.xs[si], ys_all[si], data.xt_train[ti], lam, config.lr, None, diag)
        else:
            dann_step(bundle, tapes, data.xs[si], ys_all[si], data.xt_train[ti], lam, config.lr, None, diag)
    return bundle, diag


def _target_batch(
    rng: np.random.Generator, n_pool: int, annotated: np.ndarray, size: int
) -> np.ndarray:
    """All annotations while they fit in the batch, topped up with unannotated samples."""
    size = min(size, n_pool)
    if 0 < len(annotated) < size:
        mask = np.ones(n_pool, dtype=bool)
        mask[annotated] = False
        rest = np.flatnonzero(mask)
        fill = rng.choice(len(rest), size=size - len(annotated), replace=False)
        return np.concatenate([annotated, rest[fill]])
    return rng.choice(n_pool, size=size, replace=False)


def run_training(
    config: ExperimentConfig,
    data: DomainDataset,
    seed: int,
    pretrained: ModelBundle | None = None,
) -> RunResult:
    """Pretrain (unless ``pretrained`` is given), then run the annotation rounds."""
    n_pool = len(data.xt_train)
    b = config.budget_count(n_pool)
    if config.rounds and b * config.rounds > n_pool:
        raise ContractViolation(f"budget {b} x {config.rounds} rounds exceeds pool of {n_pool}")
    if pretrained is None:
        bundle, diag = pretrain(config, data, seed)
    else:
        bundle, diag = pretrained.copy(), Diagnostics()
    rng = np.random.default_rng([seed, 1])
    strategy = StrategyKind(config.strategy)
    tapes = Tapes.for_bundle(bundle)
    oracle = Oracle(data.yt_train, data.n_classes)
    active = ActiveSet(data.n_classes)
    classifier = ActiveClassifier(config.variant, config.gamma)
    ys_all = data.one_hot(data.ys)
    chash = config.config_hash()
    run_id = f"{config.strategy}-{config.variant}-s{seed}-{chash}"
    lam = grl_lambda(1.0, config.grl_steepness)
    bounds_rng = np.random.default_rng([seed, 2])
    result = RunResult([], bundle, active, diag)

    def measure(round_: int, mean_norm: float, selected: tuple[int, ...]) -> None:
        result.rows.append(
            MetricsRow(
                run_id=run_id,
                config_hash=chash,
                strategy=config.strategy,
                variant=config.variant,
                seed=seed,
                round=round_,
                annotated_count=len(active),
                purity_cum=purity(active) if len(active) else math.nan,
                acc_target_test=accuracy(bundle, data.xt_test, data.yt_test),
                acc_source=accuracy(bundle, data.xs, data.ys),
                sage_mean_norm=mean_norm,
                selected=selected,
            )
        )
        if config.diagnostics == "rounds" or (config.diagnostics == "final" and round_ == config.rounds):
            result.bounds.append((round_, compute_bounds(bundle, data, active, config, bounds_rng)))

    def pool_sage(indices: np.ndarray) -> np.ndarray:
        sag = adversarial_gradient(bundle.phi, bundle.f, bundle.disc, data.xt_train[indices])
        diag.clamped_disc_outputs += sag.n_clamped
        return sag.embed()

    measure(0, float(np.mean(np.linalg.norm(pool_sage(np.arange(n_pool)), axis=1))), ())

    for round_ in range(1, config.rounds + 1):
        avail = np.setdiff1d(np.arange(n_pool), active.indices)
        emb = pool_sage(avail)
        mean_norm = float(np.mean(np.linalg.norm(emb, axis=1)))
        picks = select(strategy, data.xt_train[avail], bundle, b, rng, embeddings=emb)
        chosen = avail[np.asarray(picks, dtype=np.int64)]
        pre = np.argmax(bundle.predict(data.xt_train[chosen]), axis=1)
        for idx, p in zip(chosen, pre):
            active.add(int(idx), oracle.annotate(int(idx)), round_, int(p))
        ann_idx = active.indices
        ann_y = active.labels
        lookup = np.zeros((n_pool, data.n_classes))
        lookup[ann_idx] = ann_y

        classifier.sync(bundle.f)
        if classifier.variant == "balance" and strategy is not StrategyKind.AADA:
            balance_train(
                classifier.head, bundle.phi.forward(data.xs), ys_all, bundle.phi.forward(data.xt_train[ann_idx]),
                ann_y, config.gamma, config.balance_steps, config.inductive_lr, rng, config.source_batch,
            )

        for _ in range(config.n_it):
            si = rng.choice(len(data.xs), size=min(config.source_batch, len(data.xs)), replace=False)
            ti = _target_batch(rng, n_pool, ann_idx, config.target_batch)
            if strategy is StrategyKind.AADA:
                dann_step(bundle, tapes, data.xs[si], ys_all[si], data.xt_train[ti], lam, config.lr, lookup[ti], diag)
                continue
            if classifier.variant == "inductive":
                inductive_step(classifier.head, bundle.phi.forward(data.xt_train[ann_idx]), ann_y, config.inductive_lr)
            elif classifier.variant == "balance":
                za = bundle.phi.forward(data.xt_train[ann_idx])
                zsb = bundle.phi.forward(data.xs[si])
                balance_train(classifier.head, zsb, ys_all[si], za, ann_y, config.gamma, 1, config.inductive_lr, rng)
            fixed = lookup[ti]
            is_ann = fixed.any(axis=1)

            def label_fn(zt: np.ndarray, fixed=fixed, is_ann=is_ann) -> np.ndarray:
                soft = classifier.probs(bundle.f, zt)
                return np.where(is_ann[:, None], fixed, soft)

            transfer_step(bundle, tapes, data.xs[si], ys_all[si], data.xt_train[ti], lam, config.lr, label_fn, diag)
        measure(round_, mean_norm, tuple(int(i) for i in chosen))
    if diag.refused_steps:
        log.warning("%s: %d training steps refused (non-finite gradients)", run_id, diag.refused_steps)
    return result


def compute_bounds(
    bundle: ModelBundle,
    data: DomainDataset,
    active: ActiveSet,
    config: ExperimentConfig,
    rng: np.random.Generator,
) -> BoundReport:
    zs = bundle.phi.forward(data.xs)
    ps = bundle.f.forward(zs)
    zp = bundle.phi.forward(data.xt_train)
    pp = bundle.f.forward(zp)
    return bound_report(
        zs, data.ys, ps, zp, data.yt_train, pp, active.indices, rng,
        tau_steps=config.tau_steps, tau_lr=config.tau_lr, eta_steps=config.eta_steps, eta_lr=config.eta_lr,
    )
