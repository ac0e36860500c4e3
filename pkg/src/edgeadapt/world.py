"""Synthetic stand-in for video data, expert models, teacher and foundation model.

Each leaf domain emits Gaussian feature vectors whose mean is a sum of one
embedding per attribute value, so domains sharing high-impact attributes sit
close in feature space.  Model accuracy is an explicit function of taxonomy
distance between the model's home domain and the data domain.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .shift_detect import GaussianStats, fit_stats
from .taxonomy import (Path, SemanticSchema, TaxonomyTree, decode_path, encode_path,
                       is_ancestor, path_distance)

MB = 1_000_000


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AccuracyModel:
    a_max: float = 0.6
    a_floor: float = 0.2
    beta: float = 0.35
    delta_ft: float = 0.05
    lambda0: float = 0.05

    def __post_init__(self):
        if not (self.a_floor < self.a_max <= 1.0):
            raise ConfigError("need a_floor < a_max <= 1")
        if self.beta <= 0 or self.lambda0 <= 0:
            raise ConfigError("beta and lambda0 must be positive")
        if not (0 <= self.delta_ft < self.a_max - self.a_floor):
            raise ConfigError("delta_ft out of range")

    def reuse(self, distance: int, quality: float = 1.0) -> float:
        return quality * (self.a_floor + (self.a_max - self.a_floor)
                          * math.exp(-self.beta * distance))

    def rate(self, distance: int) -> float:
        return self.lambda0 / (1 + distance)

    @property
    def finetune_ceiling(self) -> float:
        return self.a_max - self.delta_ft


@dataclass(frozen=True)
class Costs:
    finetune_seconds: float = 120.0
    retrain_seconds: float = 160.0
    load_seconds: float = 0.47
    fm_seconds_per_frame: float = 0.5
    annotate_seconds_per_frame: float = 0.05
    selection_seconds: float = 0.5


@dataclass(frozen=True)
class DomainSpec:
    path: Path
    mean: np.ndarray
    scale: float = 1.0
    difficulty: float = 0.0


@dataclass(frozen=True, eq=False)
class ExpertModel:
    home: Path
    version: int = 1
    quality: float = 1.0
    size_bytes: int = 14 * MB
    stats: GaussianStats | None = None
    tuned_for: Path | None = None
    tune_progress: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.quality <= 1.0:
            raise ValueError("quality must lie in [0, 1]")
        if self.version < 1 or self.size_bytes <= 0:
            raise ValueError("bad version or size")

    @property
    def key(self) -> tuple[Path, int]:
        return self.home, self.version

    def untuned(self) -> "ExpertModel":
        return replace(self, tuned_for=None, tune_progress=0.0)

    def record(self) -> bytes:
        stats = self.stats.to_bytes() if self.stats is not None else b""
        tuned = encode_path(self.tuned_for) if self.tuned_for is not None else b""
        return b"".join([
            encode_path(self.home),
            struct.pack(">IdQ", self.version, self.quality, self.size_bytes),
            struct.pack(">B", 1 if self.tuned_for is not None else 0), tuned,
            struct.pack(">d", self.tune_progress),
            struct.pack(">I", len(stats)), stats,
        ])

    def blob_size(self) -> int:
        return max(self.size_bytes, len(self.record()))

    def to_blob(self) -> bytes:
        rec = self.record()
        return rec + bytes(self.blob_size() - len(rec))

    @classmethod
    def from_blob(cls, buf: bytes) -> "ExpertModel":
        home, off = decode_path(buf, 0)
        version, quality, size = struct.unpack_from(">IdQ", buf, off)
        off += struct.calcsize(">IdQ")
        (flag,) = struct.unpack_from(">B", buf, off)
        off += 1
        tuned = None
        if flag:
            tuned, off = decode_path(buf, off)
        (progress,) = struct.unpack_from(">d", buf, off)
        off += 8
        (n,) = struct.unpack_from(">I", buf, off)
        off += 4
        if off + n > len(buf):
            raise ValueError("truncated model record")
        stats = GaussianStats.from_bytes(buf[off:off + n]) if n else None
        return cls(home, version, quality, size, stats, tuned, progress)

    def same_as(self, other: "ExpertModel") -> bool:
        return self.record() == other.record()


@dataclass
class DomainTrace:
    entries: list[tuple[Path, int]]
    fps: float = 25.0
    upload_fps: float = 5.0

    @property
    def domains(self) -> list[Path]:
        return [p for p, _ in self.entries]

    @property
    def n_windows(self) -> int:
        return sum(d for _, d in self.entries)

    def domain_at(self, window: int) -> Path:
        for path, dwell in self.entries:
            if window < dwell:
                return path
            window -= dwell
        return self.entries[-1][0]

    def shift_windows(self) -> list[int]:
        out, w = [], 0
        for _, dwell in self.entries[:-1]:
            w += dwell
            out.append(w)
        return out


@dataclass
class TraceConfig:
    n_shifts: int = 50
    dwell_min: int = 4
    dwell_max: int = 4
    p_local: float = 0.5
    local_radius: int = 2
    start: Path | None = None


def generate_trace(domains: Sequence[Sequence[str]], cfg: TraceConfig,
                   seed: int) -> DomainTrace:
    """Random domain sequence with a bias towards nearby domains."""
    domains = [tuple(d) for d in domains]
    if len(domains) < 2:
        raise ConfigError("a trace needs at least two domains")
    if not 1 <= cfg.dwell_min <= cfg.dwell_max:
        raise ConfigError("dwell bounds must satisfy 1 <= min <= max")
    rng = np.random.default_rng(seed)
    current = tuple(cfg.start) if cfg.start is not None else domains[rng.integers(len(domains))]
    entries = []
    for i in range(cfg.n_shifts + 1):
        dwell = int(rng.integers(cfg.dwell_min, cfg.dwell_max + 1))
        entries.append((current, dwell))
        others = [d for d in domains if d != current]
        near = [d for d in others if path_distance(d, current) <= cfg.local_radius]
        pool = near if near and rng.random() < cfg.p_local else others
        current = pool[rng.integers(len(pool))]
    return DomainTrace(entries)


@dataclass
class WorldConfig:
    schema: Mapping[str, Sequence[str]]
    domains: Sequence[Sequence[str]]
    pretrained: Sequence[Sequence[str]] = ()
    dim: int = 8
    n_classes: int = 4
    attribute_weights: Sequence[float] = (6.0, 4.0, 3.0)
    class_spread: float = 3.0
    noise_scale: float = 1.0
    teacher_noise: float = 0.05
    fm_noise: float = 0.02
    fit_samples: int = 1000
    model_size_bytes: int = 14 * MB
    accuracy: AccuracyModel = field(default_factory=AccuracyModel)
    costs: Costs = field(default_factory=Costs)
    seed: int = 0


class World:
    """Deterministic synthetic environment keyed by seeds."""

    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        self.schema = SemanticSchema(tuple(cfg.schema),
                                     {k: set(v) for k, v in cfg.schema.items()}, closed=True)
        if not cfg.domains:
            raise ConfigError("no domains")
        self.tree = TaxonomyTree(self.schema)
        for d in cfg.domains:
            if len(d) != self.schema.depth:
                raise ConfigError(f"domain {tuple(d)} is not a leaf")
            self.tree.insert(d)
        self.acc = cfg.accuracy
        self.costs = cfg.costs
        rng = np.random.default_rng([cfg.seed, 7919])
        weights = list(cfg.attribute_weights) + [1.0] * self.schema.depth
        self._value_vec: dict[tuple[int, str], np.ndarray] = {}
        for i, dim in enumerate(self.schema.dimensions):
            for v in sorted(self.schema.vocab[dim]):
                u = rng.standard_normal(cfg.dim)
                self._value_vec[(i, v)] = weights[i] * u / np.linalg.norm(u)
        c = rng.standard_normal((cfg.n_classes, cfg.dim))
        self.class_offsets = cfg.class_spread * c / np.linalg.norm(c, axis=1, keepdims=True)
        self.domains = {tuple(d): DomainSpec(tuple(d), self._mean(tuple(d)), cfg.noise_scale)
                        for d in cfg.domains}
        self._handles: dict[int, tuple[Path, np.ndarray]] = {}

    def _mean(self, path: Path) -> np.ndarray:
        return sum((self._value_vec[(i, v)] for i, v in enumerate(path)),
                   np.zeros(self.cfg.dim))

    # features ---------------------------------------------------------

    def sample_features(self, domain, n: int, seed, class_probs=None):
        spec = domain if isinstance(domain, DomainSpec) else self.domains[tuple(domain)]
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = np.random.default_rng(seed)
        y = rng.choice(self.cfg.n_classes, size=n, p=class_probs)
        x = (spec.mean + self.class_offsets[y]
             + spec.scale * rng.standard_normal((n, self.cfg.dim)))
        return x, y

    def leaves_under(self, path: Path) -> list[Path]:
        return sorted(d for d in self.domains if is_ancestor(path, d))

    def fit_detector(self, path: Path, n: int, seed) -> GaussianStats:
        leaves = self.leaves_under(path)
        per = max(n // len(leaves), 2 * self.cfg.n_classes)
        xs, ys = [], []
        for j, leaf in enumerate(leaves):
            x, y = self.sample_features(leaf, per, [*np.atleast_1d(seed), j])
            xs.append(x)
            ys.append(y)
        return fit_stats(np.vstack(xs), np.concatenate(ys))

    # accuracy ---------------------------------------------------------

    def accuracy(self, model: ExpertModel, domain: Sequence[str]) -> float:
        domain = tuple(domain)
        base = self.acc.reuse(path_distance(model.home, domain), model.quality)
        if model.tuned_for == domain and model.tune_progress > 0:
            ceiling = self.acc.finetune_ceiling
            if base < ceiling:
                return base + (ceiling - base) * model.tune_progress
        return base

    def finetune_result(self, model: ExpertModel, target: Sequence[str],
                        iterations: float) -> ExpertModel:
        if iterations < 0:
            raise ValueError("iterations must be >= 0")
        target = tuple(target)
        if iterations == 0:
            return model
        rate = self.acc.rate(path_distance(model.home, target))
        remaining = 1.0 - (model.tune_progress if model.tuned_for == target else 0.0)
        progress = 1.0 - remaining * math.exp(-rate * iterations)
        return replace(model, tuned_for=target, tune_progress=progress)

    def retrain_result(self, domain: Sequence[str], samples: int, min_samples: int = 1,
                       previous_version: int = 0) -> ExpertModel:
        domain = tuple(domain)
        if samples < min_samples:
            raise ValueError(f"{samples} samples < retrain minimum {min_samples}")
        version = previous_version + 1
        stats = self.fit_detector(domain, min(max(samples, 64), self.cfg.fit_samples),
                                  [self.cfg.seed, 31, version, *self._path_seed(domain)])
        return ExpertModel(domain, version, 1.0, self.cfg.model_size_bytes, stats)

    def pretrained_models(self) -> list[ExpertModel]:
        return [self.retrain_result(p, self.cfg.fit_samples) for p in
                sorted(tuple(p) for p in self.cfg.pretrained)]

    @staticmethod
    def _path_seed(path: Path) -> list[int]:
        return [int.from_bytes(v.encode()[:6].ljust(6, b"\0"), "big") for v in path]

    # cloud-side mocks -------------------------------------------------

    def register(self, path: Path, labels: np.ndarray) -> int:
        handle = len(self._handles) + 1
        self._handles[handle] = (tuple(path), np.asarray(labels))
        return handle

    def lookup(self, handle: int) -> tuple[Path, np.ndarray]:
        return self._handles[handle]

    def annotate(self, labels, rng, noise: float | None = None) -> np.ndarray:
        labels = np.asarray(labels)
        if labels.size == 0:
            raise ValueError("empty batch")
        noise = self.cfg.teacher_noise if noise is None else noise
        k = self.cfg.n_classes
        flip = rng.random(labels.shape) < noise
        shift = rng.integers(1, k, size=labels.shape) if k > 1 else np.zeros_like(labels)
        return np.where(flip, (labels + shift) % k, labels)

    def discriminate_domain(self, truth: Sequence[str], rng, noise: float | None = None) -> Path:
        truth = tuple(truth)
        noise = self.cfg.fm_noise if noise is None else noise
        if rng.random() < noise:
            near = sorted(d for d in self.domains if path_distance(d, truth) == 2)
            if near:
                return near[rng.integers(len(near))]
        return truth

    def fm_seconds(self, n_frames: int, frames_per_batch: int = 1) -> float:
        return self.costs.fm_seconds_per_frame * min(n_frames, frames_per_batch)


def oracle_accuracy(model: ExpertModel, domain: Sequence[str], tree: TaxonomyTree,
                    acc: AccuracyModel = AccuracyModel()) -> float:
    """Accuracy of an untuned model on `domain`, both looked up in `tree`."""
    tree.node(model.home)
    tree.node(domain)
    return acc.reuse(tree.distance(model.home, domain), model.quality)


DEFAULT_SCHEMA = {
    "location": ["street", "highway", "residential"],
    "weather": ["clear", "rainy", "snowy"],
    "time": ["day", "night"],
}

DEFAULT_DOMAINS = [
    ("street", "clear", "day"), ("street", "clear", "night"),
    ("street", "rainy", "day"), ("street", "rainy", "night"),
    ("street", "snowy", "day"), ("highway", "clear", "day"),
    ("highway", "clear", "night"), ("highway", "rainy", "day"),
    ("highway", "snowy", "day"), ("residential", "clear", "day"),
    ("residential", "rainy", "night"), ("residential", "snowy", "night"),
]

DEFAULT_PRETRAINED = [
    ("street", "clear", "day"), ("street", "clear", "night"),
    ("street", "rainy", "night"), ("highway", "clear", "day"),
    ("highway", "rainy", "day"), ("residential", "clear", "day"),
]


def default_world_config(**overrides) -> WorldConfig:
    base = dict(schema=DEFAULT_SCHEMA, domains=DEFAULT_DOMAINS, pretrained=DEFAULT_PRETRAINED)
    base.update(overrides)
    return WorldConfig(**base)
