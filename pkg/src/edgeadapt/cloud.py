"""Cloud side: verdicts, data pool, retraining scheduler, dispatch and sync."""
from __future__ import annotations

import heapq
import itertools
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .taxonomy import Path, TaxonomyTree, encode_table, is_ancestor, rank_candidates
from .transport import (DomainVerdict, FrameBatchUpload, Message, ModelDispatch, ModelRequest,
                        RetrainNotice, TaxonomySync, WindowReport)
from .world import ExpertModel

HIGH, MID, LOW = "High", "Mid", "Low"
LEVELS = (HIGH, MID, LOW)


class DataPool:
    """Per-domain labelled sample buffers; the oldest samples drop first."""

    def __init__(self, cap: int = 1000):
        if cap < 1:
            raise ValueError("cap must be >= 1")
        self.cap = cap
        self.buffers: dict[Path, deque] = {}
        self.new: dict[Path, int] = defaultdict(int)

    def add(self, path, samples: Iterable) -> int:
        """Append samples; returns how many old samples were dropped."""
        path = tuple(path)
        buf = self.buffers.setdefault(path, deque(maxlen=self.cap))
        dropped = 0
        for s in samples:
            if len(buf) == self.cap:
                dropped += 1
            buf.append(s)
            self.new[path] += 1
        return dropped

    def count(self, path) -> int:
        buf = self.buffers.get(tuple(path))
        return len(buf) if buf is not None else 0

    def available(self, path) -> int:
        """Samples that arrived since the last retrain and are still buffered."""
        path = tuple(path)
        return min(self.new.get(path, 0), self.count(path))

    def consume(self, path) -> int:
        path = tuple(path)
        n = self.available(path)
        self.new[path] = 0
        return n

    def domains(self) -> list[Path]:
        return sorted(p for p, b in self.buffers.items() if b)


@dataclass
class RetrainTask:
    id: int
    domain: Path
    level: str
    enqueued: float
    seq: int
    leaf: bool = True
    key: float = float("inf")           # Mid ordering: lowest reported accuracy
    draw: dict = field(default_factory=dict)   # subdomain -> samples used
    requesters: set = field(default_factory=set)

    @property
    def samples(self) -> int:
        return sum(self.draw.values())


def classify_task(domain, taxonomy: TaxonomyTree, active: set, leaf: bool | None = None) -> str:
    domain = tuple(domain)
    if leaf is None:
        leaf = taxonomy.is_leaf(domain)
    if not leaf or domain not in active:
        return LOW
    node = taxonomy.nodes.get(domain)
    return MID if node is not None and node.has_model else HIGH


def select_next(tasks: Iterable[RetrainTask], policy: str = "mlq") -> RetrainTask | None:
    tasks = list(tasks)
    if not tasks:
        return None
    if policy == "fifo":
        return min(tasks, key=lambda t: t.seq)
    high = [t for t in tasks if t.level == HIGH]
    if high:
        return min(high, key=lambda t: t.seq)
    mid = [t for t in tasks if t.level == MID]
    if mid:
        return min(mid, key=lambda t: (t.key, t.seq))
    return min(tasks, key=lambda t: t.seq)


class RetrainScheduler:
    """Single non-preemptive processor fed by a multi-level (or FIFO) queue."""

    def __init__(self, policy: str = "mlq"):
        if policy not in ("mlq", "fifo"):
            raise ValueError("policy must be 'mlq' or 'fifo'")
        self.policy = policy
        self.pending: dict[Path, RetrainTask] = {}
        self.running: RetrainTask | None = None
        self._seq = itertools.count()

    def has(self, domain) -> bool:
        domain = tuple(domain)
        return domain in self.pending or (self.running is not None
                                          and self.running.domain == domain)

    def next_seq(self) -> int:
        return next(self._seq)

    def enqueue(self, task: RetrainTask):
        if task.domain in self.pending:
            raise ValueError(f"task for {task.domain} already pending")
        self.pending[task.domain] = task

    def next_task(self) -> RetrainTask | None:
        if self.running is not None:
            return None
        task = select_next(self.pending.values(), self.policy)
        if task is not None:
            del self.pending[task.domain]
        return task


def balanced_draw(counts: dict) -> dict:
    """Equal draw of the smallest subdomain count from every subdomain."""
    if not counts:
        return {}
    m = min(counts.values())
    return {k: m for k in sorted(counts)}


class WorkerPool:
    """`n` identical servers; a job goes to the earliest-free worker."""

    def __init__(self, sim, n: int):
        self.sim = sim
        self.free = [(0.0, i) for i in range(n)]
        heapq.heapify(self.free)

    def submit(self, duration: float, fn: Callable, *args) -> float:
        free_at, i = heapq.heappop(self.free)
        end = max(free_at, self.sim.now) + duration
        heapq.heappush(self.free, (end, i))
        self.sim.at(end, fn, *args)
        return end


class CloudServer:
    def __init__(self, env, models: Iterable[ExpertModel], taxonomy: TaxonomyTree,
                 send_down: Callable[[int, Message], object], initial_domains: dict):
        self.env = env
        self.cfg = env.cfg
        self.policy = env.cfg.policy
        self.world = env.world
        self.sim = env.sim
        self.log = env.log
        self.send_down = send_down
        self.db: dict[Path, ExpertModel] = {m.home: m for m in models}
        self.taxonomy = taxonomy
        self.pool = DataPool(self.cfg.pool_cap)
        self.scheduler = RetrainScheduler(self.policy.scheduler)
        self.workers = WorkerPool(self.sim, self.cfg.annotators)
        self.device_domain: dict[int, Path] = {d: tuple(p) for d, p in initial_domains.items()}
        self.requests: dict[Path, set] = defaultdict(set)
        self.reports: dict[int, dict[int, tuple[Path, float]]] = defaultdict(dict)
        self.last_acc: dict[int, float] = {}
        self.trained_children: dict[Path, set] = {}
        self.shift_count: dict[int, int] = defaultdict(int)
        self._task_ids = itertools.count(1)
        self.active: set = set()

    # inbound -------------------------------------------------------------

    def receive(self, msg: Message):
        if isinstance(msg, FrameBatchUpload):
            self.handle_upload(msg)
        elif isinstance(msg, ModelRequest):
            self.dispatch_model(msg)
        elif isinstance(msg, RetrainNotice):
            self.handle_retrain_notice(msg)
        elif isinstance(msg, WindowReport):
            self.reports[msg.window_id][msg.device_id] = (tuple(msg.path), msg.accuracy)
            self.last_acc[msg.device_id] = msg.accuracy

    def handle_upload(self, msg: FrameBatchUpload):
        n = msg.n_frames
        cost = (self.world.fm_seconds(n, self.cfg.fm_frames_per_batch)
                + self.world.costs.annotate_seconds_per_frame * n)
        self.workers.submit(cost, self._verdict, msg)

    def _verdict(self, msg: FrameBatchUpload):
        dev = msg.device_id
        truth, labels = self.world.lookup(msg.handle)
        rng = np.random.default_rng([self.cfg.seed, 5, msg.handle])
        labels = self.world.annotate(labels, rng)
        path = self.world.discriminate_domain(truth, rng)
        confirmed = path != self.device_domain.get(dev)
        if confirmed:
            self.device_domain[dev] = path
        seen = path in self.db
        drifting = self.last_acc.get(dev, 1.0) < self.cfg.accuracy_threshold
        if not self.policy.pool_filter or confirmed or not seen or drifting:
            self.pool.add(path, ((msg.handle, i, int(y)) for i, y in enumerate(labels)))
        self.log.emit("Verdict", device=dev, domain=path, confirmed=confirmed, frames=msg.n_frames)
        self.send_down(dev, DomainVerdict(device_id=dev, shift_confirmed=confirmed, path=path,
                                          labels=tuple(int(v) for v in labels),
                                          handle=msg.handle))
        if self.policy.detection == "cloud" and confirmed:
            self.shift_count[dev] += 1
            self.log.emit("ShiftConfirmed", device=dev, domain=path, shift=self.shift_count[dev])
            if self.policy.retrain == "request":
                self.requests[path].add(dev)
                self.log.emit("RetrainRequested", device=dev, domain=path)
            if self.policy.reuse == "cloud":
                centre = np.asarray(msg.features).mean(axis=0)
                self.workers.submit(self.world.costs.selection_seconds, self._cloud_reuse,
                                    dev, path, centre)

    def _cloud_reuse(self, dev: int, path: Path, centre: np.ndarray):
        if self.device_domain.get(dev) != path or not self.db:
            return
        if self.policy.selector == "centroid":
            scored = sorted((float(np.linalg.norm(m.stats.centroid() - centre)), h)
                            for h, m in self.db.items() if m.stats is not None)
            choice = scored[0][1]
        else:
            choice = rank_candidates(self.taxonomy, path, self.db)[0][0]
        self.log.emit("CloudSelect", device=dev, domain=path, model=choice)
        self.send_down(dev, ModelDispatch(device_id=dev, path=path, model=self.db[choice]))

    def handle_retrain_notice(self, msg: RetrainNotice):
        path = tuple(msg.path)
        model = self.db.get(path)
        if model is not None and model.version > msg.version:
            # the device's snapshot is behind; the retrained model already exists
            self.log.emit("ModelDispatched", device=msg.device_id, domain=path, found=True)
            self.send_down(msg.device_id, ModelDispatch(device_id=msg.device_id, path=path,
                                                        model=model))
            return
        self.requests[path].add(msg.device_id)

    def dispatch_model(self, msg: ModelRequest):
        path = tuple(msg.path)
        model = self.db.get(path)
        self.log.emit("ModelDispatched", device=msg.device_id, domain=path,
                      found=model is not None)
        self.send_down(msg.device_id, ModelDispatch(device_id=msg.device_id, path=path,
                                                    model=model))

    # window boundary -----------------------------------------------------

    def tick(self, closed_window: int):
        """Runs shortly after each window boundary."""
        lo = closed_window - self.cfg.active_windows + 1
        active, key = set(), {}
        for w in range(lo, closed_window + 1):
            per_domain = defaultdict(list)
            for dev, (path, acc) in sorted(self.reports.get(w, {}).items()):
                per_domain[path].append(acc)
            for path, accs in per_domain.items():
                active.add(path)
                key[path] = min(accs)      # later windows overwrite earlier ones
        self.active = active
        for w in [w for w in self.reports if w < lo]:
            del self.reports[w]

        for task in sorted(self.scheduler.pending.values(), key=lambda t: t.seq):
            level = classify_task(task.domain, self.taxonomy, active, task.leaf)
            k = key.get(task.domain, float("inf")) if level == MID else float("inf")
            if (level, k) != (task.level, task.key):
                task.level, task.key = level, k
                self.log.emit("TaskLevel", task=task.id, domain=task.domain, level=level,
                              key=_finite(k))
        for domain, leaf, draw in self._triggers():
            self._enqueue(domain, leaf, draw, active, key)
        self._start_next()

    def _triggers(self) -> list[tuple[Path, bool, dict]]:
        out = []
        depth = self.taxonomy.schema.depth
        min_n = self.cfg.retrain_min_samples
        leaves = [p for p in self.pool.domains() if len(p) == depth]
        for path in leaves:
            if self.scheduler.has(path) or self.pool.available(path) < min_n:
                continue
            if self.policy.retrain == "request":
                waiting = {d for d in self.requests.get(path, ()) if self.device_domain.get(d) == path}
                self.requests[path] = waiting
                if not waiting:
                    continue
            out.append((path, True, {path: self.pool.available(path)}))
        if self.policy.non_leaf:
            for layer in range(1, depth):
                for node in sorted({p[:layer] for p in leaves}):
                    if self.scheduler.has(node):
                        continue
                    counts = defaultdict(int)
                    for leaf in leaves:
                        if is_ancestor(node, leaf):
                            counts[leaf[:layer + 1]] += self.pool.count(leaf)
                    counts = {c: n for c, n in counts.items() if n > 0}
                    if len(counts) < 2:
                        continue
                    if node in self.trained_children and not set(counts) - self.trained_children[node]:
                        continue
                    draw = balanced_draw(counts)
                    if sum(draw.values()) >= min_n:
                        out.append((node, False, draw))
        return out

    def _enqueue(self, domain: Path, leaf: bool, draw: dict, active: set, key: dict):
        level = classify_task(domain, self.taxonomy, active, leaf)
        task = RetrainTask(next(self._task_ids), domain, level, self.sim.now,
                           self.scheduler.next_seq(), leaf,
                           key.get(domain, float("inf")) if level == MID else float("inf"),
                           draw, set(self.requests.get(domain, ())))
        self.scheduler.enqueue(task)
        self.log.emit("TaskEnqueued", task=task.id, domain=domain, level=level,
                      key=_finite(task.key), seq=task.seq, leaf=leaf, samples=task.samples)

    def _start_next(self):
        while self.scheduler.running is None:
            task = self.scheduler.next_task()
            if task is None:
                return
            if task.leaf:
                if self.pool.available(task.domain) < min(task.samples, self.cfg.retrain_min_samples):
                    self.log.emit("TaskAborted", task=task.id, domain=task.domain)
                    continue
                task.draw = {task.domain: self.pool.consume(task.domain)}
            elif any(self._subtree_count(c) < n for c, n in task.draw.items()):
                self.log.emit("TaskAborted", task=task.id, domain=task.domain)
                continue
            self.scheduler.running = task
            self.log.emit("TaskStarted", task=task.id, domain=task.domain, level=task.level,
                          key=_finite(task.key), samples=task.samples)
            self.sim.after(self.world.costs.retrain_seconds, self._complete, task)

    def _subtree_count(self, node: Path) -> int:
        return sum(self.pool.count(p) for p in self.pool.domains() if is_ancestor(node, p))

    def _complete(self, task: RetrainTask):
        previous = self.db.get(task.domain)
        model = self.world.retrain_result(task.domain, task.samples, 1,
                                          previous.version if previous else 0)
        self.db[task.domain] = model
        self.taxonomy.set_model(task.domain, model.version)
        if not task.leaf:
            self.trained_children[task.domain] = set(task.draw)
        self.scheduler.running = None
        self.log.emit("RetrainCompleted", task=task.id, domain=task.domain,
                      version=model.version, revision=self.taxonomy.revision)
        table = encode_table(self.taxonomy)
        for dev in sorted(self.device_domain):
            self.send_down(dev, TaxonomySync(device_id=dev, table=table))
        waiting = sorted(d for d in self.requests.pop(task.domain, set())
                         if self.device_domain.get(d) == task.domain)
        for dev in waiting:
            self.log.emit("ModelDispatched", device=dev, domain=task.domain, found=True)
            self.send_down(dev, ModelDispatch(device_id=dev, path=task.domain, model=model))
        self._start_next()


def _finite(x: float):
    return None if x == float("inf") else x
