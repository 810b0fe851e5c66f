"""Synthetic domain-shift datasets and their CSV files.

Every family draws the source domain from a fixed 2-D class geometry and the
target domain from the same geometry rotated about the data centre, then
translated. The target domain is split in half: target-train (adaptation data
and annotation pool, labels reserved for the oracle) and target-test
(evaluation only).

CSV schema (one file per split, UTF-8, header mandatory)::

    feat_0,...,feat_{k-1},label,domain

with ``domain`` one of ``source``, ``target_train``, ``target_test``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation

FAMILIES = ("two_moons_shift", "gaussian_blobs_shift", "spiral_shift")
SPLITS = ("source", "target_train", "target_test")


@dataclass(frozen=True)
class SyntheticSpec:
    family: str = "two_moons_shift"
    n_source: int = 1000
    n_target: int = 1000
    rotation: float = 0.6
    translation: tuple[float, float] = (0.0, 0.0)
    noise: float = 0.1
    n_classes: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ContractViolation(f"unknown dataset family {self.family!r}; expected one of {FAMILIES}")
        if self.n_source <= 0 or self.n_target < 2:
            raise ContractViolation("need n_source > 0 and n_target >= 2")
        if self.noise < 0:
            raise ContractViolation("noise must be non-negative")
        if self.family == "two_moons_shift" and self.n_classes != 2:
            raise ContractViolation("two_moons_shift has exactly 2 classes")
        if self.n_classes < 2:
            raise ContractViolation("need at least 2 classes")
        if len(self.translation) != 2:
            raise ContractViolation("translation must be a 2-vector")


@dataclass
class DomainDataset:
    xs: np.ndarray
    ys: np.ndarray  # integer labels
    xt_train: np.ndarray
    yt_train: np.ndarray  # oracle-only
    xt_test: np.ndarray
    yt_test: np.ndarray
    n_classes: int
    meta: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return self.xs.shape[1]

    def one_hot(self, labels: np.ndarray) -> np.ndarray:
        return np.eye(self.n_classes)[labels]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return {
            "source": (self.xs, self.ys),
            "target_train": (self.xt_train, self.yt_train),
            "target_test": (self.xt_test, self.yt_test),
        }[name]

    def equals(self, other: "DomainDataset") -> bool:
        return self.n_classes == other.n_classes and all(
            np.array_equal(a, b) and a.dtype.kind == b.dtype.kind
            for a, b in zip(
                (self.xs, self.ys, self.xt_train, self.yt_train, self.xt_test, self.yt_test),
                (other.xs, other.ys, other.xt_train, other.yt_train, other.xt_test, other.yt_test),
            )
        )


def _moons(n: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    y = rng.integers(0, 2, size=n)
    t = rng.uniform(0.0, math.pi, size=n)
    x = np.where(
        (y == 0)[:, None],
        np.column_stack([np.cos(t), np.sin(t)]),
        np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)]),
    )
    return x + noise * rng.standard_normal((n, 2)), y


def _blobs(n: int, c: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    y = rng.integers(0, c, size=n)
    angles = 2 * math.pi * np.arange(c) / c
    centers = 2.0 * np.column_stack([np.cos(angles), np.sin(angles)])
    return centers[y] + noise * rng.standard_normal((n, 2)), y


def _spiral(n: int, c: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    y = rng.integers(0, c, size=n)
    r = rng.uniform(0.2, 1.0, size=n)
    theta = 2 * math.pi * y / c + 1.5 * math.pi * r
    x = 2.0 * np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    return x + noise * rng.standard_normal((n, 2)), y


_CENTERS = {"two_moons_shift": np.array([0.5, 0.25]), "gaussian_blobs_shift": np.zeros(2), "spiral_shift": np.zeros(2)}


def _draw(spec: SyntheticSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if spec.family == "two_moons_shift":
        return _moons(n, spec.noise, rng)
    if spec.family == "gaussian_blobs_shift":
        return _blobs(n, spec.n_classes, spec.noise, rng)
    return _spiral(n, spec.n_classes, spec.noise, rng)


def generate_dataset(spec: SyntheticSpec) -> DomainDataset:
    """Draw source and shifted target samples; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    xs, ys = _draw(spec, spec.n_source, rng)
    xt, yt = _draw(spec, spec.n_target, rng)
    center = _CENTERS[spec.family]
    c, s = math.cos(spec.rotation), math.sin(spec.rotation)
    rot = np.array([[c, -s], [s, c]])
    xt = (xt - center) @ rot.T + center + np.asarray(spec.translation, dtype=np.float64)
    perm = rng.permutation(spec.n_target)
    half = spec.n_target // 2
    tr, te = perm[:half], perm[half:]
    return DomainDataset(
        xs, ys.astype(np.int64), xt[tr], yt[tr].astype(np.int64), xt[te], yt[te].astype(np.int64),
        spec.n_classes, meta={"family": spec.family, "seed": spec.seed},
    )


def check_disjoint(ds: DomainDataset) -> None:
    """Target-test rows must not reappear in the training splits."""
    test = {row.tobytes() for row in ds.xt_test}
    for name, x in (("source", ds.xs), ("target_train", ds.xt_train)):
        if any(row.tobytes() in test for row in x):
            raise ContractViolation(f"target_test samples overlap the {name} split")


def write_dataset(ds: DomainDataset, directory: str | Path) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = [f"feat_{k}" for k in range(ds.n_features)] + ["label", "domain"]
    paths = {}
    for name in SPLITS:
        x, y = ds.split(name)
        path = directory / f"{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row, label in zip(x, y):
                w.writerow([repr(float(v)) for v in row] + [int(label), name])
        paths[name] = path
    return paths


def _read_split(path: Path, expected: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ContractViolation(f"{path}: missing header")
    header = rows[0]
    k = len(header) - 2
    if header[-2:] != ["label", "domain"] or header[:k] != [f"feat_{i}" for i in range(k)]:
        raise ContractViolation(f"{path}: unexpected header {header}")
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header) or row[-1] != expected:
            raise ContractViolation(f"{path}:{lineno}: malformed row")
        feats.append([float(v) for v in row[:k]])
        labels.append(int(row[k]))
    return np.array(feats, dtype=np.float64).reshape(-1, k), np.array(labels, dtype=np.int64)


def read_dataset(directory: str | Path, n_classes: int | None = None) -> DomainDataset:
    directory = Path(directory)
    parts = {name: _read_split(directory / f"{name}.csv", name) for name in SPLITS}
    if n_classes is None:
        n_classes = int(max(int(y.max()) for _, y in parts.values() if len(y)) + 1)
    return DomainDataset(
        *parts["source"], *parts["target_train"], *parts["target_test"], n_classes=n_classes
    )
