"""Cohort data: CSV loading/writing, seeded splits, standardization, synthetic data."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import InvalidInput, ParseError, SchemaError

TRAIN_FRAC = 0.63
VAL_FRAC = 0.27
TEST_FRAC = 0.10
MIN_SPLIT_SAMPLES = 10


@dataclass(frozen=True)
class CohortSample:
    x: np.ndarray
    t: int
    y_factual: float
    mu0: Optional[float] = None
    mu1: Optional[float] = None


@dataclass
class Cohort:
    """Column-oriented set of samples (N x d covariates plus per-row fields)."""

    x: np.ndarray
    t: np.ndarray
    y_factual: np.ndarray
    mu0: Optional[np.ndarray] = None
    mu1: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise InvalidInput("covariates must form an N x d array")
        n = self.x.shape[0]
        self.t = np.asarray(self.t).astype(np.int64).reshape(-1)
        self.y_factual = np.asarray(self.y_factual, dtype=np.float64).reshape(-1)
        if self.t.shape[0] != n or self.y_factual.shape[0] != n:
            raise InvalidInput("x, t and y_factual lengths differ")
        if not np.all((self.t == 0) | (self.t == 1)):
            raise InvalidInput("treatment values must be 0 or 1")
        if (self.mu0 is None) != (self.mu1 is None):
            raise InvalidInput("mu0 and mu1 must be given together")
        if self.mu0 is not None:
            self.mu0 = np.asarray(self.mu0, dtype=np.float64).reshape(-1)
            self.mu1 = np.asarray(self.mu1, dtype=np.float64).reshape(-1)
            if self.mu0.shape[0] != n or self.mu1.shape[0] != n:
                raise InvalidInput("potential outcome columns have the wrong length")
            if not (np.all(np.isfinite(self.mu0)) and np.all(np.isfinite(self.mu1))):
                raise InvalidInput("potential outcomes must be finite")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def has_truth(self) -> bool:
        return self.mu0 is not None

    def subset(self, idx) -> "Cohort":
        idx = np.asarray(idx, dtype=np.int64)
        return Cohort(
            self.x[idx], self.t[idx], self.y_factual[idx],
            None if self.mu0 is None else self.mu0[idx],
            None if self.mu1 is None else self.mu1[idx],
        )

    def group(self, t: int) -> "Cohort":
        return self.subset(np.flatnonzero(self.t == t))

    def __iter__(self) -> Iterator[CohortSample]:
        for i in range(len(self)):
            yield CohortSample(
                self.x[i].copy(), int(self.t[i]), float(self.y_factual[i]),
                None if self.mu0 is None else float(self.mu0[i]),
                None if self.mu1 is None else float(self.mu1[i]),
            )

    def samples(self) -> list:
        return list(self)

    @classmethod
    def from_samples(cls, samples) -> "Cohort":
        samples = list(samples)
        if not samples:
            raise InvalidInput("no samples")
        has_mu = [s.mu0 is not None and s.mu1 is not None for s in samples]
        x = np.vstack([np.asarray(s.x, dtype=np.float64).reshape(1, -1) for s in samples])
        mu0 = mu1 = None
        if all(has_mu):
            mu0 = [s.mu0 for s in samples]
            mu1 = [s.mu1 for s in samples]
        return cls(x, [s.t for s in samples], [s.y_factual for s in samples], mu0, mu1)

    @classmethod
    def concat(cls, *parts: "Cohort") -> "Cohort":
        truth = all(p.has_truth for p in parts)
        return cls(
            np.vstack([p.x for p in parts]),
            np.concatenate([p.t for p in parts]),
            np.concatenate([p.y_factual for p in parts]),
            np.concatenate([p.mu0 for p in parts]) if truth else None,
            np.concatenate([p.mu1 for p in parts]) if truth else None,
        )


# ---------------------------------------------------------------------------
# CSV


@dataclass(frozen=True)
class Schema:
    """Column mapping: covariate columns plus the named scalar columns."""

    covariates: tuple
    t: str = "t"
    y_factual: str = "y_factual"
    mu0: Optional[str] = "mu0"
    mu1: Optional[str] = "mu1"

    @classmethod
    def default(cls, dim: int) -> "Schema":
        return cls(tuple(f"x{i}" for i in range(dim)))


def _default_schema(header) -> Schema:
    covs = []
    while f"x{len(covs)}" in header:
        covs.append(f"x{len(covs)}")
    if not covs:
        raise SchemaError("no covariate columns x0, x1, ... in header")
    return Schema(tuple(covs))


def load_csv(path, schema: Optional[Schema] = None) -> Cohort:
    """Read a comma-delimited file with a header row.

    Without a schema the covariates are the consecutive columns ``x0, x1, ...``.
    The potential-outcome columns are optional; if only one is present it is
    ignored.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InvalidInput(f"cannot open {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        schema = schema or _default_schema(header)
        pos = {name: i for i, name in enumerate(header)}
        required = list(schema.covariates) + [schema.t, schema.y_factual]
        missing = [c for c in required if c not in pos]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        with_mu = schema.mu0 in pos and schema.mu1 in pos
        cov_idx = [pos[c] for c in schema.covariates]
        x, t, y, mu0, mu1 = [], [], [], [], []
        for row_no, row in enumerate(reader):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}", row_no)
            try:
                x.append([float(row[i]) for i in cov_idx])
                tv = float(row[pos[schema.t]])
                y.append(float(row[pos[schema.y_factual]]))
                if with_mu:
                    mu0.append(float(row[pos[schema.mu0]]))
                    mu1.append(float(row[pos[schema.mu1]]))
            except ValueError as exc:
                raise ParseError(f"{path}: row {row_no}: {exc}", row_no) from None
            if tv not in (0.0, 1.0):
                raise ParseError(f"{path}: row {row_no}: treatment {tv} is not 0/1", row_no)
            t.append(int(tv))
    if not x:
        raise InvalidInput(f"{path}: no data rows")
    return Cohort(np.array(x), t, y, mu0 if with_mu else None, mu1 if with_mu else None)


def write_csv(path, cohort: Cohort) -> None:
    header = [f"x{i}" for i in range(cohort.dim)] + ["t", "y_factual"]
    if cohort.has_truth:
        header += ["mu0", "mu1"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(cohort)):
            row = [repr(float(v)) for v in cohort.x[i]]
            row += [str(int(cohort.t[i])), repr(float(cohort.y_factual[i]))]
            if cohort.has_truth:
                row += [repr(float(cohort.mu0[i])), repr(float(cohort.mu1[i]))]
            w.writerow(row)


# ---------------------------------------------------------------------------
# splits and scaling


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = TRAIN_FRAC
    val_frac: float = VAL_FRAC
    test_frac: float = TEST_FRAC
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if min(fracs) < 0 or abs(sum(fracs) - 1.0) > 1e-12:
            raise InvalidInput("split fractions must be nonnegative and sum to 1")

    def sizes(self, n: int) -> tuple[int, int, int]:
        # round half up; 10 samples -> 6/3/1
        n_val = math.floor(n * self.val_frac + 0.5)
        n_test = math.floor(n * self.test_frac + 0.5)
        return n - n_val - n_test, n_val, n_test


def split(samples: Cohort, spec: SplitSpec = SplitSpec()) -> tuple[Cohort, Cohort, Cohort]:
    """Seeded shuffle into train/val/test; val and test sizes are rounded, train takes the rest."""
    n = len(samples)
    if n < MIN_SPLIT_SAMPLES:
        raise InvalidInput(f"need at least {MIN_SPLIT_SAMPLES} samples to split, got {n}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_train, n_val, _ = spec.sizes(n)
    return (
        samples.subset(np.sort(perm[:n_train])),
        samples.subset(np.sort(perm[n_train:n_train + n_val])),
        samples.subset(np.sort(perm[n_train + n_val:])),
    )


@dataclass
class Standardizer:
    """Per-column z-scoring fitted on one cohort; binary columns pass through."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        binary = np.all((x == 0.0) | (x == 1.0), axis=0)
        mean = np.where(binary, 0.0, x.mean(axis=0))
        sd = x.std(axis=0)
        scale = np.where(binary | (sd == 0.0), 1.0, sd)
        return cls(mean, scale)

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def apply(self, cohort: Cohort) -> Cohort:
        return Cohort(self.transform(cohort.x), cohort.t, cohort.y_factual, cohort.mu0, cohort.mu1)


# ---------------------------------------------------------------------------
# synthetic data


def _assignment_direction(dim: int) -> np.ndarray:
    w = np.ones(dim)
    w[1::2] = -1.0
    return w / math.sqrt(dim)


def true_potential_outcomes(x) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form potential means of :func:`gen_synthetic`.

    mu0(x) = 0.5 * sum_j x_j / sqrt(d) + sin(x_0)
    mu1(x) = mu0(x) + 1 + 0.5 * x_0 + x_1^2 / 2 (x_1 taken as 0 when d = 1)
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[1]
    x1 = x[:, 1] if d > 1 else np.zeros(x.shape[0])
    mu0 = 0.5 * x.sum(axis=1) / math.sqrt(d) + np.sin(x[:, 0])
    mu1 = mu0 + 1.0 + 0.5 * x[:, 0] + 0.5 * x1 * x1
    return mu0, mu1


def gen_synthetic(n: int, dim: int, bias_strength: float, noise_sd: float, seed: int = 0) -> Cohort:
    """Gaussian covariates, logistic treatment assignment with selection bias.

    P(t = 1 | x) = logistic(bias_strength * w . x) for a fixed unit vector w.
    """
    if n < 4:
        raise InvalidInput(f"n must be at least 4, got {n}")
    if dim < 1:
        raise InvalidInput(f"dim must be at least 1, got {dim}")
    if noise_sd < 0:
        raise InvalidInput("noise_sd must be nonnegative")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, dim))
    logits = bias_strength * (x @ _assignment_direction(dim))
    prop = 0.5 * (1.0 + np.tanh(0.5 * logits))
    t = (rng.random(n) < prop).astype(np.int64)
    mu0, mu1 = true_potential_outcomes(x)
    noise = rng.standard_normal(n) * noise_sd
    y = np.where(t == 1, mu1, mu0) + noise
    return Cohort(x, t, y, mu0, mu1)
