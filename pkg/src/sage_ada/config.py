"""Experiment configuration: a flat ``key = value`` text file.

Lines starting with ``#`` and blank lines are ignored. Unknown keys are
rejected. Tuples are comma-separated. Keys and defaults are the fields of
:class:`ExperimentConfig`; ``data_*`` keys describe the synthetic dataset.

``budget`` is read as a fraction of the target-train pool when it lies in
(0, 1) and as an absolute per-round sample count when it is an integer >= 1.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .baselines import StrategyKind
from .data import SyntheticSpec
from .errors import ContractViolation

VARIANTS = ("naive", "balance", "inductive")
DIAGNOSTICS = ("none", "final", "rounds")
# Keys that do not change what a single (config, seed) cell computes.
_UNHASHED = ("seeds", "output_dir", "jobs")


@dataclass(frozen=True)
class ExperimentConfig:
    strategy: str = "sage"
    variant: str = "inductive"
    budget: float = 0.02
    rounds: int = 10
    n_pre: int = 2000
    n_it: int = 500
    lr: float = 0.05
    inductive_lr: float = 0.05
    gamma: float = 0.5
    balance_steps: int = 200
    grl_steepness: float = 10.0
    source_batch: int = 32
    target_batch: int = 32
    hidden: int = 64
    rep_dim: int = 16
    seeds: tuple[int, ...] = (0,)
    data_family: str = "two_moons_shift"
    data_n_source: int = 1000
    data_n_target: int = 1000
    data_rotation: float = 0.6
    data_translation: tuple[float, ...] = (0.0, 0.0)
    data_noise: float = 0.1
    data_n_classes: int = 2
    data_seed: int = 0
    diagnostics: str = "final"
    tau_steps: int = 500
    tau_lr: float = 0.01
    eta_steps: int = 500
    eta_lr: float = 0.1
    eval_cadence: str = "after_round"
    output_dir: str = "runs"
    jobs: int = 1

    def __post_init__(self) -> None:
        try:
            StrategyKind(self.strategy)
        except ValueError:
            raise ContractViolation(f"unknown strategy {self.strategy!r}") from None
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown variant {self.variant!r}")
        if self.diagnostics not in DIAGNOSTICS:
            raise ContractViolation(f"diagnostics must be one of {DIAGNOSTICS}")
        if self.eval_cadence != "after_round":
            raise ContractViolation("only after_round evaluation is implemented")
        if self.budget <= 0 or (self.budget >= 1 and self.budget != int(self.budget)):
            raise ContractViolation("budget must be a fraction in (0, 1) or a positive integer count")
        for name in ("lr", "grl_steepness", "tau_lr", "eta_lr"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        if self.inductive_lr < 0:
            raise ContractViolation("inductive_lr must be non-negative")
        if not 0 < self.gamma < 1:
            raise ContractViolation("gamma must lie in (0, 1)")
        for name in ("rounds", "n_pre", "n_it", "balance_steps", "tau_steps", "eta_steps"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be non-negative")
        if min(self.source_batch, self.target_batch, self.hidden, self.rep_dim, self.jobs) <= 0:
            raise ContractViolation("batch sizes, widths and jobs must be positive")
        if not self.seeds:
            raise ContractViolation("need at least one seed")
        if self.rounds > 0 and self.budget_count() * self.rounds > self.pool_size():
            raise ContractViolation("budget * rounds exceeds the target-train pool")

    def dataset_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            family=self.data_family,
            n_source=self.data_n_source,
            n_target=self.data_n_target,
            rotation=self.data_rotation,
            translation=tuple(self.data_translation),
            noise=self.data_noise,
            n_classes=self.data_n_classes,
            seed=self.data_seed,
        )

    def pool_size(self) -> int:
        return self.data_n_target // 2

    def budget_count(self, pool_size: int | None = None) -> int:
        """Samples annotated per round."""
        n = self.pool_size() if pool_size is None else pool_size
        if self.budget < 1:
            return max(1, int(round(self.budget * n)))
        return int(self.budget)

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for fld in fields(self):
            value = getattr(self, fld.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            lines.append(f"{fld.name} = {value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        canon = "\n".join(
            line for line in self.to_text().splitlines() if line.split(" = ")[0] not in _UNHASHED
        )
        return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _coerce(name: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            items = [v for v in (s.strip() for s in raw.split(",")) if v]
            cast = int if default and isinstance(default[0], int) else float
            return tuple(cast(v) for v in items)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ContractViolation(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config(text: str, **overrides: Any) -> ExperimentConfig:
    defaults = {f.name: f.default for f in fields(ExperimentConfig)}
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ContractViolation(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, defaults[key])
    for key, value in overrides.items():
        if key not in defaults:
            raise ContractViolation(f"unknown key {key!r}")
        if value is not None:
            values[key] = _coerce(key, value, defaults[key]) if isinstance(value, str) else value
    return ExperimentConfig(**values)


def load_config(path: str | Path, **overrides: Any) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), **overrides)
