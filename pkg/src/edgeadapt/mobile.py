"""Per-device adaptation: detection, cache-based reuse, fine-tuning, prefetch.

A device alternates between regular inference and potential-shift time.
An onboard alarm starts frame uploads; the cloud's verdict either resolves
a false alarm or confirms a shift, after which the device reuses the best
model it can reach, optionally fine-tunes, and asks for retraining when the
new domain has no model of its own.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

from .shift_detect import evaluate_window
from .taxonomy import Path, TaxonomyTree, decode_table, rank_candidates, rank_versions
from .transport import (DomainVerdict, FrameBatchUpload, Message, ModelDispatch, ModelRequest,
                        RetrainNotice, TaxonomySync, WindowReport)
from .world import DomainTrace, ExpertModel

REGULAR = "RegularInference"
POTENTIAL = "PotentialShift"


# cache ----------------------------------------------------------------------

class ModelCache:
    """Fixed-capacity model store keyed by home domain, LRU eviction."""

    def __init__(self, capacity: int = 3):
        if capacity < 1:
            raise ValueError("cache capacity must be >= 1")
        self.capacity = capacity
        self._slots: dict[Path, list] = {}   # home -> [model, last_used]

    def __len__(self) -> int:
        return len(self._slots)

    def __contains__(self, home) -> bool:
        return tuple(home) in self._slots

    def get(self, home) -> ExpertModel | None:
        slot = self._slots.get(tuple(home))
        return slot[0] if slot else None

    def models(self) -> list[ExpertModel]:
        return [s[0] for _, s in sorted(self._slots.items())]

    def homes(self) -> list[Path]:
        return sorted(self._slots)

    def touch(self, home, t: float):
        self._slots[tuple(home)][1] = t

    def remove(self, home) -> ExpertModel | None:
        slot = self._slots.pop(tuple(home), None)
        return slot[0] if slot else None

    def insert(self, model: ExpertModel, t: float,
               protect: Iterable[Path] = ()) -> list[ExpertModel] | None:
        """Store `model`, evicting the least recently used unprotected entry.

        A model for an already-resident home replaces it in place.  Returns
        the evicted models, or ``None`` when every slot is protected.
        """
        if model.home in self._slots:
            self._slots[model.home] = [model, t]
            return []
        evicted = []
        if len(self._slots) >= self.capacity:
            protect = {tuple(p) for p in protect}
            victims = [(s[1], h) for h, s in self._slots.items() if h not in protect]
            if not victims:
                return None
            _, home = min(victims)
            evicted.append(self._slots.pop(home)[0])
        self._slots[model.home] = [model, t]
        return evicted


@dataclass(frozen=True)
class ReuseDecision:
    outcome: str                      # "hit" | "miss" | "none"
    model: ExpertModel | None         # applied now (hit: global, miss: local)
    request: Path | None = None       # global optimum to fetch on a miss
    global_path: Path | None = None
    threshold: float = 0.35


def reuse_select(cache: ModelCache, taxonomy: TaxonomyTree, target, current: ExpertModel,
                 threshold: float = 0.35, exclude: Iterable[Path] = ()) -> ReuseDecision:
    """Pick the global optimum over the taxonomy; fall back to the cache on a miss."""
    exclude = {tuple(p) for p in exclude}
    candidates = [p for p in taxonomy.model_paths() if p not in exclude]
    ranked = rank_candidates(taxonomy, target, candidates)
    if not ranked:
        # nothing to reuse, unless refused paths are cached locally
        local = rank_versions(target, [(m.home, m.version) for m in cache.models()])
        if exclude and local:
            return ReuseDecision("miss", cache.get(local[0][0]), None, None, threshold)
        return ReuseDecision("none", current, None, None, threshold)
    best = ranked[0][0]
    hit = cache.get(best)
    if hit is not None:
        return ReuseDecision("hit", hit, None, best, threshold)
    local = rank_versions(target, [(m.home, m.version) for m in cache.models()])
    model = cache.get(local[0][0]) if local else current
    return ReuseDecision("miss", model, best, best, threshold)


def post_reuse_check(measured: float | None, threshold: float = 0.35) -> bool | None:
    """True when fine-tuning should start; None defers (no labelled data yet)."""
    if measured is None:
        return None
    return measured < threshold


def cache_replace(cache: ModelCache, previous: ExpertModel | None, current: Path,
                  taxonomy: TaxonomyTree, deployed: ExpertModel, t: float) -> Path | None:
    """Keep the unloaded model and name the domain worth prefetching."""
    if previous is not None and previous.home != deployed.home and previous.home not in cache:
        cache.insert(previous, t, protect={deployed.home, previous.home})
    residents = set(cache.homes())
    for path, _ in rank_candidates(taxonomy, current, taxonomy.model_paths()):
        if path != tuple(current) and path not in residents:
            return path
    return None


# agent ----------------------------------------------------------------------

@dataclass
class Env:
    """Everything a device shares with the rest of the run."""
    sim: object
    world: object
    cfg: object
    log: object
    schema: object

    @property
    def policy(self):
        return self.cfg.policy


@dataclass
class _Load:
    model: ExpertModel
    kind: str
    detail: str
    shift: int


class MobileAgent:
    def __init__(self, device_id: int, env: Env, trace: DomainTrace, model: ExpertModel,
                 taxonomy: TaxonomyTree, send_up: Callable[[Message], None],
                 cancel_down: Callable[[Callable[[Message], bool]], int] = lambda pred: 0,
                 warm: Iterable[ExpertModel] = ()):
        self.id = device_id
        self.env = env
        self.cfg = env.cfg
        self.policy = env.cfg.policy
        self.trace = trace
        self.send_up = send_up
        self.cancel_down = cancel_down
        self.taxonomy = taxonomy
        self.cache = ModelCache(self.cfg.capacity)
        self.deployed = model
        self.previous: ExpertModel | None = None
        self.cache.insert(model, 0.0)
        for m in warm:
            if len(self.cache) < self.cache.capacity:
                self.cache.insert(m, 0.0, protect={model.home})

        self.mode = REGULAR
        self.truth: Path = trace.domain_at(0)
        self.confirmed: Path = trace.domain_at(0)
        self.window = -1
        self.shift_id = 0
        self.trace_index = 0
        self.adapting = False
        self.labeled = 0
        self.pending_global: Path | None = None
        self.prefetch_path: Path | None = None
        self.retrain_wait: tuple[Path, int] | None = None
        self.awaiting_cloud = False
        self.nacked: set[Path] = set()
        self._loads: list = []
        self._ft_event = None
        self._upload_event = None
        self._uploads = 0
        self._in_flight = 0     # uploads still awaiting a verdict

        self._acc = None
        self._acc_since = 0.0
        self._integral = 0.0
        self.window_accuracy: list[float] = []

    # helpers -------------------------------------------------------------

    @property
    def now(self) -> float:
        return self.env.sim.now

    def _emit(self, kind: str, **info):
        self.env.log.emit(kind, device=self.id, **info)

    def _rng_seed(self, purpose: int, *extra) -> list[int]:
        return [self.cfg.seed, purpose, self.id, *extra]

    def _integrate(self):
        if self._acc is not None:
            self._integral += self._acc * (self.now - self._acc_since)
        self._acc_since = self.now

    def _refresh_accuracy(self):
        acc = self.env.world.accuracy(self.deployed, self.truth)
        if acc != self._acc:
            self._integrate()
            self._acc = acc
            self._emit("Accuracy", accuracy=acc, domain=self.truth, model=self.deployed.home)

    def _snapshot_version(self, path: Path) -> int:
        node = self.taxonomy.nodes.get(path)
        return node.version if node is not None and node.has_model else 0

    # window clock --------------------------------------------------------

    def boundary(self, w: int):
        """Close window ``w - 1`` and open window ``w`` (if inside the run)."""
        if w > 0:
            self._end_window(w - 1)
        if w < self.cfg.duration_windows:
            self._start_window(w)

    def _start_window(self, w: int):
        self.window = w
        truth = self.trace.domain_at(w)
        if w == 0:
            self.truth = truth
            self._refresh_accuracy()
        elif truth != self.truth:
            self.truth = truth
            self.trace_index += 1
            self._emit("TraceShift", domain=truth, index=self.trace_index)
            self._refresh_accuracy()
        base = w * self.cfg.window_seconds
        if self.policy.detection == "onboard":
            self.env.sim.at(base + self.cfg.detect_offset, self._detect, w)
        elif self.policy.detection == "cloud" and w == 0:
            self._upload_event = self.env.sim.at(base + self.cfg.detect_offset,
                                                 self._periodic_upload)

    def _end_window(self, w: int):
        self._integrate()
        acc = self._integral / self.cfg.window_seconds
        self._integral = 0.0
        self.window_accuracy.append(acc)
        self._emit("WindowAccuracy", window=w, accuracy=acc, domain=self.truth)
        self.send_up(WindowReport(device_id=self.id, window_id=w, path=self.confirmed,
                                  accuracy=acc))
        if self.adapting:
            self._adaptation_step()

    # detection and uploads -----------------------------------------------

    def _detect(self, w: int):
        if self.mode != REGULAR or self.deployed.stats is None:
            return
        x, _ = self.env.world.sample_features(self.truth, self.cfg.detect_samples,
                                              self._rng_seed(1, w))
        score = evaluate_window(self.deployed.stats, x, self.cfg.k)
        if score.alarm:
            self._emit("AlarmRaised", domain=self.confirmed, score=score.score,
                       threshold=score.threshold)
            self.mode = POTENTIAL
            self._cancel_prefetch()
            self._upload(self.cfg.alarm_batch_frames)
            self._upload_event = self.env.sim.after(self.cfg.upload_period,
                                                    self._periodic_upload)

    def _periodic_upload(self):
        if self.policy.detection == "onboard" and self.mode != POTENTIAL:
            self._upload_event = None
            return
        self._upload(self.cfg.upload_frames)
        self._upload_event = self.env.sim.after(self.cfg.upload_period, self._periodic_upload)

    def _upload(self, n: int):
        self._uploads += 1
        self._in_flight += 1
        x, y = self.env.world.sample_features(self.truth, n, self._rng_seed(2, self._uploads))
        handle = self.env.world.register(self.truth, y)
        self.send_up(FrameBatchUpload(device_id=self.id, window_id=max(self.window, 0),
                                      handle=handle, features=x,
                                      frame_bytes=n * self.cfg.bytes_per_frame))

    # inbound -------------------------------------------------------------

    def receive(self, msg: Message):
        if isinstance(msg, DomainVerdict):
            self._on_verdict(msg)
        elif isinstance(msg, ModelDispatch):
            self._on_dispatch(msg)
        elif isinstance(msg, TaxonomySync):
            self._on_sync(msg)

    def _on_sync(self, msg: TaxonomySync):
        tree = decode_table(msg.table, self.env.schema)
        if tree.revision <= self.taxonomy.revision:
            self._emit("StaleSync", revision=tree.revision)
            return
        self.taxonomy = tree
        self.nacked.clear()

    def _on_verdict(self, msg: DomainVerdict):
        path = tuple(msg.path)
        answered = self._in_flight > 0
        self._in_flight = max(0, self._in_flight - 1)
        if self.policy.detection == "cloud":
            if msg.shift_confirmed and path != self.confirmed:
                self.shift_id += 1
                self.confirmed = path
                self.labeled = len(msg.labels)
                self.awaiting_cloud = self.policy.reuse == "cloud"
                self.retrain_wait = (path, self._snapshot_version(path))
            else:
                self.labeled += len(msg.labels)
            return
        if self.mode == REGULAR:
            # a batch sent before adaptation finished may be answered late
            if answered:
                self._emit("StaleVerdict", domain=path)
            else:
                self._emit("ProtocolError", reason="verdict outside potential-shift time")
            return
        if msg.shift_confirmed and path != self.confirmed:
            self._confirm(path, len(msg.labels))
        elif not self.adapting:
            self._emit("FalseAlarm", domain=self.confirmed)
            self.mode = REGULAR
        else:
            self.labeled += len(msg.labels)

    # adaptation ----------------------------------------------------------

    def _confirm(self, path: Path, n_labels: int):
        self.shift_id += 1
        self.confirmed = path
        self.labeled = n_labels
        self.adapting = True
        self._emit("ShiftConfirmed", domain=path, shift=self.shift_id)
        for ev, _ in self._loads:
            self.env.sim.cancel(ev)
        self._loads = []
        self.env.sim.cancel(self._ft_event)
        self._ft_event = None
        self.pending_global = None
        self.retrain_wait = None
        seen = self._snapshot_version(path) > 0

        if self.policy.reuse == "cache":
            d = reuse_select(self.cache, self.taxonomy, path, self.deployed,
                             self.cfg.accuracy_threshold, exclude=self.nacked)
            self._emit("ReuseDecision", domain=path, outcome=d.outcome,
                       model=d.model.home if d.model is not None else None, request=d.request)
            if d.outcome == "hit":
                self._load(d.model, "reuse", "hit")
            elif d.outcome == "miss":
                if self.policy.local_reuse:
                    # reloading the current model still counts as the local step
                    self._load(d.model, "reuse", "miss")
                if d.request is not None:
                    self.pending_global = d.request
                    if self.prefetch_path == d.request:
                        self.prefetch_path = None   # already on its way
                    else:
                        self.send_up(ModelRequest(device_id=self.id, path=d.request))
            if d.outcome == "none" or not seen:
                self._request_retrain(path)
        else:
            self._request_retrain(path)
        self._cancel_prefetch()

    def _request_retrain(self, path: Path):
        version = self._snapshot_version(path)
        self.retrain_wait = (path, version)
        self._emit("RetrainRequested", domain=path)
        self.send_up(RetrainNotice(device_id=self.id, path=path, version=version))

    def _cancel_prefetch(self):
        if self.prefetch_path is None:
            return
        path = self.prefetch_path
        self.prefetch_path = None
        self.cancel_down(lambda m: isinstance(m, ModelDispatch) and tuple(m.path) == path)

    def _load(self, model: ExpertModel, kind: str, detail: str):
        job = _Load(model, kind, detail, self.shift_id)
        ev = self.env.sim.after(self.env.world.costs.load_seconds, self._loaded, job)
        self._loads.append((ev, job))

    def _loaded(self, job: _Load):
        self._loads = [(e, j) for e, j in self._loads if j is not job]
        if job.shift != self.shift_id:
            return
        self._deploy(job.model)
        if job.kind == "reuse":
            self._emit("ReuseApplied", domain=self.confirmed, model=job.model.home,
                       version=job.model.version, detail=job.detail)
        else:
            self._emit("ModelDeployed", domain=self.confirmed, model=job.model.home,
                       version=job.model.version, detail=job.kind)
        if job.kind == "retrain" and self.adapting:
            self._end_adaptation()

    def _deploy(self, model: ExpertModel):
        if model.key != self.deployed.key:
            self.previous = self.deployed
        self.deployed = model
        protect = {model.home}
        if self.previous is not None:
            protect.add(self.previous.home)
        if self.cache.insert(model, self.now, protect) is None:
            self.cache.insert(model, self.now, {model.home})
        self.cache.touch(model.home, self.now)
        self._refresh_accuracy()

    def _on_dispatch(self, msg: ModelDispatch):
        path, model = tuple(msg.path), msg.model
        if model is None:
            if path == self.pending_global:
                self.pending_global = None
                self.nacked.add(path)
            if path == self.prefetch_path:
                self.prefetch_path = None
            return
        wait = self.retrain_wait
        if (wait is not None and model.home == wait[0] and model.version > wait[1]
                and self.confirmed == wait[0]):
            self.retrain_wait = None
            self.awaiting_cloud = False
            if path == self.pending_global:
                self.pending_global = None
            self._load(model, "retrain", "retrain")
        elif path == self.pending_global:
            self.pending_global = None
            self._load(model, "global", "global")
        elif path == self.prefetch_path:
            self.prefetch_path = None
            evicted = self.cache.insert(model, self.now,
                                        {self.deployed.home,
                                         *([self.previous.home] if self.previous else [])})
            if evicted is not None:
                self._emit("CacheReplaced", domain=self.confirmed, model=model.home,
                           detail="prefetch", evicted=[m.home for m in evicted])
        elif self.awaiting_cloud and path == self.confirmed:
            self.awaiting_cloud = False
            self._load(model, "cloud", "cloud")

    def _measured_accuracy(self) -> float | None:
        if self.labeled < 1:
            return None
        return self.env.world.accuracy(self.deployed, self.confirmed)

    def _adaptation_step(self):
        """Window-end part of the adaptation sequence."""
        if self.policy.finetune and self._ft_event is None:
            need = post_reuse_check(self._measured_accuracy(), self.cfg.accuracy_threshold)
            if need and self.labeled >= self.cfg.finetune_min_samples:
                self._emit("FineTuneStarted", domain=self.confirmed, model=self.deployed.home)
                self._ft_event = self.env.sim.after(self.env.world.costs.finetune_seconds,
                                                    self._finetuned, self.shift_id,
                                                    self.deployed.key)
        if self.policy.reuse != "cache" or self.retrain_wait is not None:
            return
        if self.pending_global is None and not self._loads and self._ft_event is None:
            self._end_adaptation()

    def _finetuned(self, shift: int, key):
        self._ft_event = None
        if shift != self.shift_id or self.deployed.key != key:
            self._emit("FineTuneDiscarded", domain=self.confirmed)
            return
        tuned = self.env.world.finetune_result(self.deployed, self.confirmed,
                                               self.cfg.finetune_iterations)
        self.deployed = tuned
        self.cache.insert(tuned, self.now)
        self._refresh_accuracy()
        self._emit("FineTuneApplied", domain=self.confirmed, model=tuned.home,
                   accuracy=self.env.world.accuracy(tuned, self.confirmed))

    def _end_adaptation(self):
        self.adapting = False
        self.mode = REGULAR
        if not self.policy.prefetch:
            return
        before = set(self.cache.homes())
        target = cache_replace(self.cache, self.previous, self.confirmed, self.taxonomy,
                               self.deployed, self.now)
        if set(self.cache.homes()) != before and self.previous is not None:
            self._emit("CacheReplaced", domain=self.confirmed, model=self.previous.home,
                       detail="retain", evicted=sorted(before - set(self.cache.homes())))
        if target is not None:
            self.prefetch_path = target
            self.send_up(ModelRequest(device_id=self.id, path=target))
