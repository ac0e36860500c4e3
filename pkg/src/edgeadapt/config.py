"""Scenario configuration and framework variants.

Configs are plain JSON objects; every field has a default so ``{}`` is a
valid scenario.  ``schema`` is an ordered list of ``[dimension, values]``
pairs because dimension order defines the taxonomy layers.  ``accuracy``
and ``costs`` are nested objects mirroring :class:`AccuracyModel` and
:class:`Costs`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

from .world import (DEFAULT_DOMAINS, DEFAULT_PRETRAINED, DEFAULT_SCHEMA, MB, AccuracyModel,
                    ConfigError, Costs, TraceConfig, WorldConfig)

VARIANTS = ("Mocha", "MochaNoFT", "MochaNoCache", "CloudReuseOnly", "CloudRetrainOnly",
            "EmbeddingReuse", "NoAdapt")


@dataclass(frozen=True)
class Policy:
    """What a framework variant does at each decision point."""
    detection: str          # "onboard" | "cloud" | "none"
    reuse: str              # "cache" | "cloud" | "none"
    selector: str = "taxonomy"   # cloud-side reuse: "taxonomy" | "centroid"
    finetune: bool = False
    prefetch: bool = False
    local_reuse: bool = True    # apply the best resident model while the global one downloads
    cache_capacity: int | None = None   # overrides the scenario value
    retrain: str = "pool"   # "pool": data-driven; "request": leaf tasks for requested domains
    scheduler: str = "mlq"  # "mlq" | "fifo"
    non_leaf: bool = False
    pool_filter: bool = False   # skip pooling batches that only resolve false alarms


_POLICIES = {
    "Mocha": Policy("onboard", "cache", finetune=True, prefetch=True, non_leaf=True,
                    pool_filter=True),
    "MochaNoFT": Policy("onboard", "cache", prefetch=True, non_leaf=True, pool_filter=True),
    "MochaNoCache": Policy("onboard", "cache", finetune=True, local_reuse=False,
                           cache_capacity=1, non_leaf=True, pool_filter=True),
    "CloudReuseOnly": Policy("cloud", "cloud", cache_capacity=1, retrain="request",
                             scheduler="fifo"),
    "EmbeddingReuse": Policy("cloud", "cloud", selector="centroid", cache_capacity=1,
                             retrain="request", scheduler="fifo"),
    "CloudRetrainOnly": Policy("onboard", "none", cache_capacity=1, retrain="request",
                               scheduler="fifo"),
    "NoAdapt": Policy("none", "none", cache_capacity=1, retrain="request", scheduler="fifo"),
}


def policy_for(variant: str, scheduler: str = "auto") -> Policy:
    try:
        policy = _POLICIES[variant]
    except KeyError:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}") from None
    if scheduler != "auto":
        policy = replace(policy, scheduler=scheduler)
    return policy


@dataclass
class ScenarioConfig:
    variant: str = "Mocha"
    devices: int = 1
    seed: int = 0
    duration_windows: int = 120
    window_seconds: float = 30.0

    # world
    schema: list = field(default_factory=lambda: [[k, list(v)] for k, v in DEFAULT_SCHEMA.items()])
    domains: list = field(default_factory=lambda: [list(d) for d in DEFAULT_DOMAINS])
    pretrained: list = field(default_factory=lambda: [list(d) for d in DEFAULT_PRETRAINED])
    dim: int = 8
    n_classes: int = 4
    attribute_weights: list = field(default_factory=lambda: [6.0, 4.0, 3.0])
    class_spread: float = 3.0
    noise_scale: float = 1.0
    teacher_noise: float = 0.05
    fm_noise: float = 0.02
    fit_samples: int = 1000
    model_size_bytes: int = 14 * MB
    accuracy: dict = field(default_factory=dict)
    costs: dict = field(default_factory=dict)

    # trace
    dwell_min: int = 8
    dwell_max: int = 14
    p_local: float = 0.5
    local_radius: int = 2
    start_pretrained: bool = True

    # links
    bandwidth: float = 10e6
    latency: float = 0.02
    shared_link: bool = False
    transport: str = "sim"
    socket_port: int = 0

    # device
    k: float = 0.4
    accuracy_threshold: float = 0.35
    cache_capacity: int = 3
    detect_samples: int = 8
    detect_offset: float = 2.0
    alarm_batch_frames: int = 20
    upload_period: float = 10.0
    upload_fps: float = 5.0
    bytes_per_frame: int = 64 * 1024
    finetune_min_samples: int = 30
    finetune_iterations: int = 60
    eval_samples: int = 20

    # cloud
    fm_frames_per_batch: int = 1
    retrain_min_samples: int = 600
    pool_cap: int = 1000
    active_windows: int = 2
    annotators: int = 4
    cloud_tick_offset: float = 1.0
    scheduler: str = "auto"

    # metrics
    recovery_horizon_windows: int | None = None

    # derived -----------------------------------------------------------

    @property
    def schema_map(self) -> dict:
        return {name: list(values) for name, values in self.schema}

    @property
    def policy(self) -> Policy:
        return policy_for(self.variant, self.scheduler)

    @property
    def capacity(self) -> int:
        cap = self.policy.cache_capacity
        return self.cache_capacity if cap is None else min(cap, self.cache_capacity)

    @property
    def upload_frames(self) -> int:
        return max(1, int(round(self.upload_fps * self.upload_period)))

    @property
    def horizon(self) -> float:
        return self.duration_windows * self.window_seconds

    def accuracy_model(self) -> AccuracyModel:
        return AccuracyModel(**self.accuracy)

    def cost_model(self) -> Costs:
        return Costs(**self.costs)

    def world_config(self) -> WorldConfig:
        return WorldConfig(
            schema=self.schema_map, domains=[tuple(d) for d in self.domains],
            pretrained=[tuple(d) for d in self.pretrained], dim=self.dim,
            n_classes=self.n_classes, attribute_weights=tuple(self.attribute_weights),
            class_spread=self.class_spread, noise_scale=self.noise_scale,
            teacher_noise=self.teacher_noise, fm_noise=self.fm_noise,
            fit_samples=self.fit_samples, model_size_bytes=self.model_size_bytes,
            accuracy=self.accuracy_model(), costs=self.cost_model(), seed=self.seed)

    def trace_config(self, start=None) -> TraceConfig:
        n_shifts = self.duration_windows // self.dwell_min + 1
        return TraceConfig(n_shifts, self.dwell_min, self.dwell_max, self.p_local,
                           self.local_radius, start)

    # validation and io -------------------------------------------------

    def violations(self) -> list[str]:
        out = []
        if self.variant not in VARIANTS:
            out.append(f"variant must be one of {', '.join(VARIANTS)}")
        if self.devices < 1:
            out.append("devices must be >= 1")
        if self.duration_windows < 1:
            out.append("duration_windows must be >= 1")
        if self.window_seconds <= 0:
            out.append("window_seconds must be > 0")
        if not 1 <= self.dwell_min <= self.dwell_max:
            out.append("dwell bounds must satisfy 1 <= dwell_min <= dwell_max")
        if not 0 <= self.p_local <= 1:
            out.append("p_local must lie in [0, 1]")
        if self.bandwidth <= 0:
            out.append("bandwidth must be > 0")
        if self.latency < 0:
            out.append("latency must be >= 0")
        if self.transport not in ("sim", "socket"):
            out.append("transport must be 'sim' or 'socket'")
        if self.scheduler not in ("auto", "mlq", "fifo"):
            out.append("scheduler must be 'auto', 'mlq' or 'fifo'")
        if self.cache_capacity < 1:
            out.append("cache_capacity must be >= 1")
        if not 0 <= self.accuracy_threshold <= 1:
            out.append("accuracy_threshold must lie in [0, 1]")
        if self.detect_samples < 1 or self.alarm_batch_frames < 1:
            out.append("detect_samples and alarm_batch_frames must be >= 1")
        if not 0 <= self.detect_offset < self.window_seconds:
            out.append("detect_offset must lie inside the window")
        if self.upload_period <= 0 or self.upload_fps <= 0:
            out.append("upload_period and upload_fps must be > 0")
        if self.retrain_min_samples < 1 or self.pool_cap < self.retrain_min_samples:
            out.append("need 1 <= retrain_min_samples <= pool_cap")
        if self.annotators < 1:
            out.append("annotators must be >= 1")
        if self.recovery_horizon_windows is not None and self.recovery_horizon_windows < 1:
            out.append("recovery_horizon_windows must be >= 1")
        for name, value in (("teacher_noise", self.teacher_noise), ("fm_noise", self.fm_noise)):
            if not 0 <= value <= 1:
                out.append(f"{name} must lie in [0, 1]")
        try:
            vocab = self.schema_map
        except (TypeError, ValueError):
            out.append("schema must be a list of [dimension, values] pairs")
            vocab = {}
        dims = list(vocab)
        if len(dims) != len(self.schema):
            out.append("schema dimension names must be unique")
        if not dims:
            out.append("schema needs at least one dimension")
        for group in ("domains", "pretrained"):
            for d in getattr(self, group):
                if len(d) != len(dims):
                    out.append(f"{group} entry {d} is not a full-depth path")
                    continue
                for dim, v in zip(dims, d):
                    if v not in vocab[dim]:
                        out.append(f"{group} entry {d}: {v!r} not in {dim} vocabulary")
        if len({tuple(d) for d in self.domains}) < 2:
            out.append("need at least two distinct domains")
        missing = {tuple(d) for d in self.pretrained} - {tuple(d) for d in self.domains}
        if missing:
            out.append(f"pretrained domains not in domain list: {sorted(missing)}")
        if not self.pretrained:
            out.append("need at least one pretrained domain")
        for name, cls in (("accuracy", AccuracyModel), ("costs", Costs)):
            known = {f.name for f in fields(cls)}
            unknown = set(getattr(self, name)) - known
            if unknown:
                out.append(f"unknown {name} keys: {sorted(unknown)}")
                continue
            try:
                cls(**getattr(self, name))
            except (ConfigError, TypeError) as exc:
                out.append(f"{name}: {exc}")
        return out

    def check(self) -> "ScenarioConfig":
        problems = self.violations()
        if problems:
            raise ConfigError("invalid scenario:\n  - " + "\n  - ".join(problems))
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)


def from_dict(data: dict[str, Any]) -> ScenarioConfig:
    known = {f.name for f in fields(ScenarioConfig)}
    unknown = sorted(set(data) - known)
    cfg = ScenarioConfig(**{k: v for k, v in data.items() if k in known})
    problems = [f"unknown key {k!r}" for k in unknown]
    try:
        problems += cfg.violations()
    except (TypeError, AttributeError) as exc:
        problems.append(f"malformed value: {exc}")
    if problems:
        raise ConfigError("invalid scenario:\n  - " + "\n  - ".join(problems))
    return cfg


def load_config(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(data)
