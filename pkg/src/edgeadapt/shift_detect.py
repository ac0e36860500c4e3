"""Onboard environment-shift detection.

Class-conditional Gaussians with one pooled covariance are fitted to the
features a model was trained on.  A sample's score is the largest negative
squared Mahalanobis distance to any class mean, a window's score is the mean
sample score, and a window alarms when its score falls below
``score_mean + k * score_std`` of the training scores.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import linalg


class FitError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GaussianStats:
    classes: np.ndarray       # (C,) class ids
    means: np.ndarray         # (C, d)
    covariance: np.ndarray    # (d, d), pooled, 1/N normalised
    precision: np.ndarray     # inverse of covariance + epsilon * I
    counts: np.ndarray        # (C,)
    epsilon: float
    score_mean: float
    score_std: float

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def centroid(self) -> np.ndarray:
        return (self.counts[:, None] * self.means).sum(axis=0) / self.n

    def threshold(self, k: float) -> float:
        return self.score_mean + k * self.score_std

    def to_bytes(self) -> bytes:
        c, d = self.means.shape
        head = struct.pack(">HHddd", c, d, self.epsilon, self.score_mean, self.score_std)
        return b"".join([
            head,
            self.classes.astype(">i4").tobytes(),
            self.counts.astype(">i8").tobytes(),
            self.means.astype(">f8").tobytes(),
            self.covariance.astype(">f8").tobytes(),
            self.precision.astype(">f8").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, buf: bytes) -> "GaussianStats":
        c, d, eps, smean, sstd = struct.unpack_from(">HHddd", buf, 0)
        off = struct.calcsize(">HHddd")

        classes = np.frombuffer(buf, ">i4", c, off).astype(np.int64)
        off += 4 * c
        counts = np.frombuffer(buf, ">i8", c, off).astype(np.int64)
        off += 8 * c
        arrays = []
        for shape in ((c, d), (d, d), (d, d)):
            n = shape[0] * shape[1]
            if off + 8 * n > len(buf):
                raise ValueError("truncated detector stats")
            arrays.append(np.frombuffer(buf, ">f8", n, off).astype(np.float64).reshape(shape))
            off += 8 * n
        if off != len(buf):
            raise ValueError("trailing bytes in detector stats")
        means, cov, prec = arrays
        return cls(classes, means, cov, prec, counts, eps, smean, sstd)

    def same_as(self, other: "GaussianStats") -> bool:
        return (np.array_equal(self.classes, other.classes)
                and np.array_equal(self.counts, other.counts)
                and np.array_equal(self.means, other.means)
                and np.array_equal(self.covariance, other.covariance)
                and np.array_equal(self.precision, other.precision)
                and self.epsilon == other.epsilon
                and self.score_mean == other.score_mean
                and self.score_std == other.score_std)


@dataclass(frozen=True)
class WindowScore:
    score: float
    n: int
    alarm: bool | None = None
    threshold: float | None = None


def identity_pool(features: np.ndarray) -> np.ndarray:
    return features


def _as_matrix(features, dim: int | None = None) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        # bare scalars are 1-D samples; otherwise a single vector
        x = x[:, None] if dim in (None, 1) else x[None, :]
    if x.ndim != 2:
        raise ValueError("features must be a 2-D batch")
    if dim is not None and x.shape[1] != dim:
        raise ValueError(f"feature dimension {x.shape[1]} != {dim}")
    return x


def _scores(means: np.ndarray, precision: np.ndarray, x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - means[None, :, :]
    maha = np.einsum("ncd,de,nce->nc", diff, precision, diff)
    return (-maha).max(axis=1) + 0.0  # no negative zeros


def fit_stats(features, labels: Sequence[int], epsilon: float | None = None,
              pool: Callable[[np.ndarray], np.ndarray] = identity_pool) -> GaussianStats:
    """Fit per-class means and a pooled covariance.

    ``epsilon`` defaults to ``1e-6 * trace(cov) / d``.
    """
    x = pool(_as_matrix(features))
    y = np.asarray(labels)
    if y.shape != (x.shape[0],):
        raise ValueError("one label per feature vector required")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) == 0 or counts.min() < 2:
        raise ValueError("need at least 2 samples per present class")
    d = x.shape[1]
    means = np.stack([x[y == c].mean(axis=0) for c in classes])
    centered = x - means[np.searchsorted(classes, y)]
    cov = centered.T @ centered / x.shape[0]
    cov = (cov + cov.T) / 2
    if epsilon is None:
        epsilon = 1e-6 * float(np.trace(cov)) / d
    reg = cov + epsilon * np.eye(d)
    try:
        chol = linalg.cho_factor(reg, lower=True)
    except linalg.LinAlgError:
        raise FitError("covariance is singular after regularisation") from None
    precision = linalg.cho_solve(chol, np.eye(d))
    precision = (precision + precision.T) / 2
    s = _scores(means, precision, x)
    return GaussianStats(classes, means, cov, precision, counts, float(epsilon),
                         float(s.mean()), float(s.std()))


def score_samples(stats: GaussianStats, xs) -> np.ndarray:
    x = _as_matrix(xs, stats.dim)
    return _scores(stats.means, stats.precision, x)


def score_sample(stats: GaussianStats, x) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != stats.dim:
        raise ValueError(f"feature dimension {x.shape[0]} != {stats.dim}")
    return float(score_samples(stats, x[None, :])[0])


def score_window(stats: GaussianStats, xs) -> WindowScore:
    x = np.asarray(xs, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty window")
    s = score_samples(stats, x)
    return WindowScore(float(s.mean()), int(s.shape[0]))


def detect(stats: GaussianStats, window: WindowScore, k: float) -> bool:
    # strict: a window sitting exactly on the threshold stays quiet
    return window.score < stats.threshold(k)


def evaluate_window(stats: GaussianStats, xs, k: float) -> WindowScore:
    w = score_window(stats, xs)
    t = stats.threshold(k)
    return WindowScore(w.score, w.n, w.score < t, t)
