"""Feature vectors, datasets, manipulation policies, and synthetic data.

Feature vectors are plain numpy float arrays with entries in [0, 1]
(binary after thresholding).  A manipulation policy records, per feature,
whether the attacker may add it (flip 0 to 1) or remove it (flip 1 to 0);
the set of vectors reachable from x under a policy is the discrete domain
all attacks must land in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class ManipulationPolicy:
    """Per-feature addition / removal permissions."""

    addition_allowed: np.ndarray  # bool, shape (dim,)
    removal_allowed: np.ndarray   # bool, shape (dim,)

    def __post_init__(self):
        self.addition_allowed = np.asarray(self.addition_allowed, dtype=bool)
        self.removal_allowed = np.asarray(self.removal_allowed, dtype=bool)
        if self.addition_allowed.shape != self.removal_allowed.shape:
            raise ValueError("addition/removal flag lengths differ")

    @property
    def dim(self) -> int:
        return self.addition_allowed.shape[0]

    def restrict(self, subset: np.ndarray) -> "ManipulationPolicy":
        """Policy over a feature-index subset (for subspace classifiers)."""
        return ManipulationPolicy(self.addition_allowed[subset],
                                  self.removal_allowed[subset])

    @classmethod
    def allow_all(cls, dim: int) -> "ManipulationPolicy":
        return cls(np.ones(dim, dtype=bool), np.ones(dim, dtype=bool))

    @classmethod
    def additions_only(cls, dim: int) -> "ManipulationPolicy":
        return cls(np.ones(dim, dtype=bool), np.zeros(dim, dtype=bool))


@dataclass
class Dataset:
    """Examples (n, dim) with labels in {0..class_count-1}."""

    X: np.ndarray
    y: np.ndarray
    class_count: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        if self.X.ndim != 2:
            raise ValueError("X must be 2-d (n, dim)")
        if len(self.X) != len(self.y):
            raise ValueError("X and y lengths differ")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def _check_binary(x: np.ndarray, name: str = "x") -> None:
    if not np.all((x == 0.0) | (x == 1.0)):
        raise ValueError(f"{name} is not binary")


def binarize(x: np.ndarray, theta) -> np.ndarray:
    """Threshold each feature: 0 when x[i] < theta[i], else 1 (ties map up)."""
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 1 and theta.shape[0] != x.shape[-1]:
        raise ValueError("threshold length does not match feature dimension")
    return (x >= theta).astype(float)


def admissible(x: np.ndarray, x_adv: np.ndarray, policy: ManipulationPolicy) -> bool:
    """True iff every 0->1 flip is addition-allowed and every 1->0 flip is removal-allowed."""
    x = np.asarray(x, dtype=float)
    x_adv = np.asarray(x_adv, dtype=float)
    if x.shape != x_adv.shape:
        raise ValueError("shape mismatch")
    if x.shape[-1] != policy.dim:
        raise ValueError("policy dimension mismatch")
    _check_binary(x, "x")
    _check_binary(x_adv, "x_adv")
    added = (x == 0.0) & (x_adv == 1.0)
    removed = (x == 1.0) & (x_adv == 0.0)
    ok_add = np.all(~added | policy.addition_allowed)
    ok_rem = np.all(~removed | policy.removal_allowed)
    return bool(ok_add and ok_rem)


def project_to_m(x: np.ndarray, x_cont: np.ndarray, policy: ManipulationPolicy) -> np.ndarray:
    """Round a continuous vector at 0.5 (ties up) and revert policy-violating flips.

    x is the binary origin point; the result is always admissible relative
    to x.  Works on single vectors or (n, dim) batches.
    """
    x = np.asarray(x, dtype=float)
    x_cont = np.asarray(x_cont, dtype=float)
    rounded = (x_cont >= 0.5).astype(float)
    added = (x == 0.0) & (rounded == 1.0)
    removed = (x == 1.0) & (rounded == 0.0)
    revert = (added & ~policy.addition_allowed) | (removed & ~policy.removal_allowed)
    out = np.where(revert, x, rounded)
    return out


def oversample(dataset: Dataset, ratio: float, seed=0) -> Dataset:
    """Replicate minority-class examples until every class holds at least
    ceil(ratio * majority count) examples.

    Replicas are exact copies drawn with replacement from the original
    class; originals are all retained.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must be in (0, 1]")
    counts = np.bincount(dataset.y, minlength=dataset.class_count)
    if np.any(counts == 0):
        raise ValueError("every class needs at least one example")
    floor = math.ceil(ratio * counts.max())
    rng = np.random.default_rng(seed)
    extra_X, extra_y = [], []
    for c in range(dataset.class_count):
        short = floor - counts[c]
        if short <= 0:
            continue
        idx = np.flatnonzero(dataset.y == c)
        picks = rng.choice(idx, size=short, replace=True)
        extra_X.append(dataset.X[picks])
        extra_y.append(np.full(short, c, dtype=int))
    if not extra_X:
        return dataset
    X = np.concatenate([dataset.X] + extra_X, axis=0)
    y = np.concatenate([dataset.y] + extra_y)
    return Dataset(X, y, dataset.class_count)


def _largest_remainder(n: int, fractions) -> list[int]:
    raw = [n * f for f in fractions]
    base = [int(math.floor(r)) for r in raw]
    left = n - sum(base)
    order = sorted(range(len(raw)), key=lambda i: raw[i] - base[i], reverse=True)
    for i in order[:left]:
        base[i] += 1
    return base


def split(dataset: Dataset, fractions, seed=0) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified train/val/test split; parts are disjoint and exhaustive."""
    fractions = list(fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError("three positive fractions required")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.y == c)
        idx = rng.permutation(idx)
        sizes = _largest_remainder(len(idx), fractions)
        start = 0
        for p, s in enumerate(sizes):
            parts[p].extend(idx[start:start + s].tolist())
            start += s
    out = []
    for p in parts:
        sel = np.array(sorted(p), dtype=int)
        out.append(Dataset(dataset.X[sel], dataset.y[sel], dataset.class_count))
    return out[0], out[1], out[2]


def generate_synthetic(dim: int, classes: int, per_class, flip_noise: float,
                       seed=0, class_densities=None) -> tuple[Dataset, ManipulationPolicy]:
    """Desk-scale binary dataset: one random prototype per class, examples
    flip each prototype bit independently with probability flip_noise.

    ``per_class`` is an int or a per-class sequence of counts.
    ``class_densities`` optionally sets each prototype's expected fraction
    of 1-bits (default 0.5 for every class).  The returned policy marks a
    seeded random ~75% of features addition-allowed and ~50%
    removal-allowed.
    """
    if dim < 2 or classes < 2:
        raise ValueError("need dim >= 2 and classes >= 2")
    if isinstance(per_class, int):
        per_class = [per_class] * classes
    if len(per_class) != classes:
        raise ValueError("per_class length must equal classes")
    if class_densities is None:
        class_densities = [0.5] * classes
    rng = np.random.default_rng(seed)
    X_parts, y_parts = [], []
    for c in range(classes):
        proto = (rng.random(dim) < class_densities[c]).astype(float)
        n = per_class[c]
        flips = rng.random((n, dim)) < flip_noise
        Xc = np.where(flips, 1.0 - proto, proto)
        X_parts.append(Xc)
        y_parts.append(np.full(n, c, dtype=int))
    X = np.concatenate(X_parts, axis=0)
    y = np.concatenate(y_parts)
    policy = ManipulationPolicy(rng.random(dim) < 0.75, rng.random(dim) < 0.50)
    return Dataset(X, y, classes), policy


def _format_value(v: float) -> str:
    if v == int(v):
        return str(int(v))
    return repr(float(v))


def write_sparse(path, dataset: Dataset) -> None:
    """Write `label idx:val ...` lines (ascending indices) with a header
    comment recording dim and class count."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# dim={dataset.dim} classes={dataset.class_count}\n")
        for x, label in zip(dataset.X, dataset.y):
            nz = np.flatnonzero(x != 0.0)
            cells = " ".join(f"{j}:{_format_value(x[j])}" for j in nz)
            fh.write(f"{label} {cells}".rstrip() + "\n")


def read_sparse(path, dim: int | None = None, class_count: int | None = None) -> Dataset:
    """Read the sparse text format written by :func:`write_sparse`.

    `#` lines are comments; a `# dim=.. classes=..` header, when present,
    supplies the dimensions so the round trip is exact.
    """
    rows, labels = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for token in line[1:].split():
                    if token.startswith("dim=") and dim is None:
                        dim = int(token[4:])
                    elif token.startswith("classes=") and class_count is None:
                        class_count = int(token[8:])
                continue
            parts = line.split()
            try:
                label = int(parts[0])
            except ValueError:
                raise ValueError(f"line {lineno}: bad label {parts[0]!r}")
            feats = []
            for cell in parts[1:]:
                if ":" not in cell:
                    raise ValueError(f"line {lineno}: malformed cell {cell!r}")
                idx_s, val_s = cell.split(":", 1)
                try:
                    idx, val = int(idx_s), float(val_s)
                except ValueError:
                    raise ValueError(f"line {lineno}: malformed cell {cell!r}")
                if dim is not None and idx >= dim:
                    raise ValueError(f"line {lineno}: index {idx} out of range (dim={dim})")
                feats.append((idx, val))
            rows.append(feats)
            labels.append(label)
    if dim is None:
        dim = 1 + max((idx for feats in rows for idx, _ in feats), default=-1)
    if class_count is None:
        class_count = 1 + max(labels, default=0)
    X = np.zeros((len(rows), dim))
    for i, feats in enumerate(rows):
        for idx, val in feats:
            if idx >= dim:
                raise ValueError(f"line {i + 1}: index {idx} out of range (dim={dim})")
            X[i, idx] = val
    return Dataset(X, np.array(labels, dtype=int), class_count)


def write_policy(path, policy: ManipulationPolicy) -> None:
    """One line per feature: `idx add_flag remove_flag` with 0/1 flags."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(policy.dim):
            fh.write(f"{i} {int(policy.addition_allowed[i])} {int(policy.removal_allowed[i])}\n")


def read_policy(path) -> ManipulationPolicy:
    adds, rems = {}, {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected `idx add remove`")
            try:
                idx, a, r = int(parts[0]), int(parts[1]), int(parts[2])
            except ValueError:
                raise ValueError(f"line {lineno}: non-integer field")
            if a not in (0, 1) or r not in (0, 1):
                raise ValueError(f"line {lineno}: flags must be 0/1")
            adds[idx] = bool(a)
            rems[idx] = bool(r)
    dim = 1 + max(adds, default=-1)
    add = np.zeros(dim, dtype=bool)
    rem = np.zeros(dim, dtype=bool)
    for i in range(dim):
        if i not in adds:
            raise ValueError(f"policy file missing feature {i}")
        add[i] = adds[i]
        rem[i] = rems[i]
    return ManipulationPolicy(add, rem)
