"""Scenario runner and metrics engine."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .cloud import CloudServer
from .config import ScenarioConfig, from_dict
from .events import EventLog
from .mobile import Env, MobileAgent
from .sim import Simulator
from .taxonomy import TaxonomyTree, decode_table, encode_table, rank_candidates
from .transport import LinkModel, Message, SimLink, SocketBridge
from .world import World, generate_trace

ACTIONS = ("ReuseApplied", "FineTuneStarted", "ModelDeployed")


# running ----------------------------------------------------------------

class Network:
    """Per-device uplink/downlink pairs, optionally relayed over real sockets."""

    def __init__(self, sim: Simulator, cfg: ScenarioConfig, device_ids: Sequence[int],
                 bridge: SocketBridge | None = None):
        model = LinkModel(cfg.bandwidth, cfg.latency)
        self.up: dict[int, SimLink] = {}
        self.down: dict[int, SimLink] = {}
        for dev in device_ids:
            up_relay = down_relay = None
            if bridge is not None:
                up_relay = (lambda d: lambda m: bridge.relay(d, "up", m))(dev)
                down_relay = (lambda d: lambda m: bridge.relay(d, "down", m))(dev)
            self.up[dev] = SimLink(sim, model, f"up{dev}", up_relay)
            if cfg.shared_link and bridge is None:
                self.down[dev] = self.up[dev]
            else:
                self.down[dev] = SimLink(sim, model, f"down{dev}", down_relay)

    def cancel_down(self, dev: int, pred: Callable[[Message], bool]) -> int:
        link = self.down[dev]
        hits = [t for t in ([link.current] if link.current else []) + list(link.queue)
                if pred(t.msg)]
        return sum(link.cancel(t) for t in hits)


@dataclass
class RunResult:
    config: ScenarioConfig
    events: list[dict]
    metrics: "MetricsReport"
    messages: list[tuple[int, str, str]] = field(default_factory=list)

    def log_text(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.events)


def _initial_state(cfg: ScenarioConfig, world: World, device_ids: Sequence[int]):
    models = {m.home: m for m in world.pretrained_models()}
    tree = TaxonomyTree(world.schema)
    for path, m in sorted(models.items()):
        tree.set_model(path, m.version)
    pretrained = sorted(models)
    traces, starts = {}, {}
    for dev in device_ids:
        rng = np.random.default_rng([cfg.seed, 11, dev])
        start = pretrained[rng.integers(len(pretrained))] if cfg.start_pretrained else None
        trace = generate_trace([tuple(d) for d in cfg.domains], cfg.trace_config(start),
                               seed=[cfg.seed, 13, dev])
        traces[dev] = trace
        starts[dev] = trace.domain_at(0)
    return models, tree, traces, starts


def simulate(cfg: ScenarioConfig) -> tuple[list[dict], list[tuple[int, str, str]]]:
    """Run one scenario; returns the event log and the per-link message sequence."""
    cfg.check()
    sim = Simulator()
    log = EventLog(sim)
    world = World(cfg.world_config())
    bridge = SocketBridge(port=cfg.socket_port) if cfg.transport == "socket" else None
    try:
        if bridge is not None:
            device_ids = [bridge.connect() for _ in range(cfg.devices)]
        else:
            device_ids = list(range(1, cfg.devices + 1))
        models, tree, traces, starts = _initial_state(cfg, world, device_ids)
        log.emit("RunStarted", variant=cfg.variant, devices=cfg.devices, seed=cfg.seed,
                 scheduler=cfg.policy.scheduler, config=cfg.to_dict())
        env = Env(sim, world, cfg, log, world.schema)
        net = Network(sim, cfg, device_ids, bridge)
        agents: dict[int, MobileAgent] = {}
        cloud = CloudServer(env, models.values(), tree,
                            lambda dev, m: net.down[dev].send(m, agents[dev].receive), starts)
        table = encode_table(tree)
        for dev in device_ids:
            start = starts[dev]
            snapshot = decode_table(table, world.schema)
            warm = [models[p] for p, _ in rank_candidates(snapshot, start, models) if p != start]
            agents[dev] = MobileAgent(
                dev, env, traces[dev], models[start], snapshot,
                send_up=(lambda d: lambda m: net.up[d].send(m, cloud.receive))(dev),
                cancel_down=(lambda d: lambda pred: net.cancel_down(d, pred))(dev),
                warm=warm)

        W = cfg.window_seconds

        def boundary(w: int):
            for dev in device_ids:
                agents[dev].boundary(w)
            if 1 <= w < cfg.duration_windows:
                sim.at(w * W + cfg.cloud_tick_offset, cloud.tick, w - 1)
            if w < cfg.duration_windows:
                sim.at((w + 1) * W, boundary, w + 1)

        sim.at(0.0, boundary, 0)
        sim.run(cfg.horizon)
        log.emit("RunFinished", horizon=cfg.horizon)
        messages = []
        for dev in device_ids:
            for direction, link in (("up", net.up[dev]), ("down", net.down[dev])):
                messages.extend((dev, direction, type(m).__name__) for m in link.sent)
                if link is net.up[dev] and net.down[dev] is link:
                    break
        return log.records, messages
    finally:
        if bridge is not None:
            bridge.close()


_HORIZON_CACHE: dict[str, dict] = {}


def anchor_horizons(cfg: ScenarioConfig) -> dict:
    """Per-shift recovery horizons from the retrain-only variant on the same traces."""
    base = replace(cfg, variant="CloudRetrainOnly", scheduler="auto", transport="sim")
    key = json.dumps(base.to_dict(), sort_keys=True)
    if key not in _HORIZON_CACHE:
        events, _ = simulate(base)
        _HORIZON_CACHE[key] = recovery_horizons(events)
    return _HORIZON_CACHE[key]


def run_scenario(cfg: ScenarioConfig) -> RunResult:
    events, messages = simulate(cfg)
    if cfg.recovery_horizon_windows is not None:
        horizons = None
    elif cfg.variant == "CloudRetrainOnly":
        horizons = recovery_horizons(events)
    else:
        horizons = anchor_horizons(cfg)
    if horizons is not None:
        events.insert(len(events) - 1, {
            "t": events[-1]["t"], "kind": "Horizons",
            "values": [[d, i, h] for (d, i), h in sorted(horizons.items())]})
    return RunResult(cfg, events, compute_metrics(events, cfg), messages)


# metrics ----------------------------------------------------------------

@dataclass
class MetricsReport:
    response_delays: list[float]
    cache_hit_delays: list[float]
    unresolved: int
    resolutions: dict[str, int]
    retrain_times: list[float]
    recovery: list[float]
    window_accuracy: list[float]
    cache_hits: int
    cache_misses: int
    alarms: int
    false_alarms: int
    shifts_confirmed: int
    events: list[dict] = field(default_factory=list, repr=False)

    @staticmethod
    def _mean(xs) -> float:
        return float(np.mean(xs)) if len(xs) else float("nan")

    @property
    def mean_response_delay(self) -> float:
        return self._mean(self.response_delays)

    @property
    def mean_cache_hit_delay(self) -> float:
        return self._mean(self.cache_hit_delays)

    @property
    def mean_retrain_time(self) -> float:
        return self._mean(self.retrain_times)

    @property
    def mean_recovery_accuracy(self) -> float:
        return self._mean(self.recovery)

    @property
    def mean_window_accuracy(self) -> float:
        return self._mean(self.window_accuracy)

    @property
    def cache_hit_rate(self) -> float:
        n = self.cache_hits + self.cache_misses
        return self.cache_hits / n if n else float("nan")

    @property
    def ratios(self) -> dict[str, float]:
        total = sum(self.resolutions.values())
        return {k: (v / total if total else float("nan")) for k, v in self.resolutions.items()}

    def scalars(self) -> dict[str, float | int]:
        r = self.ratios
        return {
            "shifts_confirmed": self.shifts_confirmed,
            "unresolved": self.unresolved,
            "alarms": self.alarms,
            "false_alarms": self.false_alarms,
            "mean_response_delay": self.mean_response_delay,
            "mean_cache_hit_delay": self.mean_cache_hit_delay,
            "cache_hit_rate": self.cache_hit_rate,
            "mean_retrain_time": self.mean_retrain_time,
            "retrains_deployed": len(self.retrain_times),
            "mean_recovery_accuracy": self.mean_recovery_accuracy,
            "mean_window_accuracy": self.mean_window_accuracy,
            "ratio_reuse": r["reuse"],
            "ratio_finetune": r["finetune"],
            "ratio_retrain": r["retrain"],
        }


def _by_device(events: Iterable[dict], *kinds: str) -> dict[int, list[dict]]:
    out = defaultdict(list)
    for e in events:
        if e["kind"] in kinds and "device" in e:
            out[e["device"]].append(e)
    return out


def step_average(points: Sequence[tuple[float, float]], a: float, b: float) -> float:
    """Time average over [a, b] of a right-continuous step function.

    Time before the first point is undefined and left out of the average.
    """
    if b <= a:
        return float("nan")
    total = covered = 0.0
    cur_t, cur_v = a, None
    for t, v in points:
        if t <= a:
            cur_v = v
            continue
        if t >= b:
            break
        if cur_v is not None:
            total += cur_v * (t - cur_t)
            covered += t - cur_t
        cur_t, cur_v = t, v
    if cur_v is not None:
        total += cur_v * (b - cur_t)
        covered += b - cur_t
    return total / covered if covered > 0 else float("nan")


def recovery_horizons(events: Sequence[dict]) -> dict[tuple[int, int], float]:
    """Per-shift time until the retrain-only variant deploys a retrained model."""
    end = _run_end(events)
    shifts = _by_device(events, "TraceShift")
    deploys = _by_device(events, "ModelDeployed")
    out = {}
    for dev, evs in shifts.items():
        for j, e in enumerate(evs):
            t0 = e["t"]
            t1 = evs[j + 1]["t"] if j + 1 < len(evs) else end
            h = t1 - t0
            for d in deploys.get(dev, ()):
                if (t0 <= d["t"] < t1 and d.get("detail") == "retrain"
                        and d.get("domain") == e["domain"]):
                    h = d["t"] - t0
                    break
            out[(dev, e["index"])] = h
    return out


def _run_end(events: Sequence[dict]) -> float:
    for e in reversed(events):
        if e["kind"] == "RunFinished":
            return e["horizon"]
    return max((e["t"] for e in events), default=0.0)


def _config_from_log(events: Sequence[dict]) -> ScenarioConfig | None:
    for e in events:
        if e["kind"] == "RunStarted" and "config" in e:
            return from_dict(e["config"])
    return None


def compute_metrics(events: Sequence[dict], cfg: ScenarioConfig | None = None,
                    horizons: dict | None = None) -> MetricsReport:
    events = list(events)
    if cfg is None:
        cfg = _config_from_log(events)
    if horizons is None:
        for e in events:
            if e["kind"] == "Horizons":
                horizons = {(d, i): h for d, i, h in e["values"]}
    end = _run_end(events)

    # response delay and resolution per confirmed shift
    confirmed = _by_device(events, "ShiftConfirmed")
    actions = _by_device(events, *ACTIONS)
    delays, hit_delays, unresolved = [], [], 0
    resolutions = {"reuse": 0, "finetune": 0, "retrain": 0}
    for dev, shifts in confirmed.items():
        acts = actions.get(dev, [])
        for j, s in enumerate(shifts):
            t1 = shifts[j + 1]["t"] if j + 1 < len(shifts) else math.inf
            span = [a for a in acts if s["t"] <= a["t"] < t1]
            if not span:
                unresolved += 1
                continue
            first = span[0]
            delays.append(first["t"] - s["t"])
            if first["kind"] == "ReuseApplied" and first.get("detail") == "hit":
                hit_delays.append(first["t"] - s["t"])
            kinds = {(a["kind"], a.get("detail")) for a in span}
            if ("ModelDeployed", "retrain") in kinds:
                resolutions["retrain"] += 1
            elif any(k == "FineTuneStarted" for k, _ in kinds):
                resolutions["finetune"] += 1
            else:
                resolutions["reuse"] += 1

    # retraining time: task enqueue to deployment on the requesting device
    enqueued = {e["task"]: e["t"] for e in events if e["kind"] == "TaskEnqueued"}
    completed = {(tuple(e["domain"]), e["version"]): e["task"]
                 for e in events if e["kind"] == "RetrainCompleted"}
    retrain_times = []
    for e in events:
        if e["kind"] == "ModelDeployed" and e.get("detail") == "retrain":
            task = completed.get((tuple(e["model"]), e["version"]))
            if task is not None and task in enqueued:
                retrain_times.append(e["t"] - enqueued[task])

    # recovery accuracy from each true shift to its horizon
    timeline = {dev: [(e["t"], e["accuracy"]) for e in evs]
                for dev, evs in _by_device(events, "Accuracy").items()}
    recovery = []
    for dev, evs in _by_device(events, "TraceShift").items():
        for j, e in enumerate(evs):
            t0 = e["t"]
            nxt = evs[j + 1]["t"] if j + 1 < len(evs) else end
            if horizons is not None and (dev, e["index"]) in horizons:
                h = horizons[(dev, e["index"])]
            elif cfg is not None and cfg.recovery_horizon_windows is not None:
                h = cfg.recovery_horizon_windows * cfg.window_seconds
            else:
                h = nxt - t0
            t1 = min(t0 + h, nxt, end)
            if t1 > t0:
                recovery.append(step_average(timeline.get(dev, []), t0, t1))

    decisions = [e for e in events if e["kind"] == "ReuseDecision"]
    return MetricsReport(
        response_delays=delays, cache_hit_delays=hit_delays, unresolved=unresolved,
        resolutions=resolutions, retrain_times=retrain_times, recovery=recovery,
        window_accuracy=[e["accuracy"] for e in events if e["kind"] == "WindowAccuracy"],
        cache_hits=sum(e["outcome"] == "hit" for e in decisions),
        cache_misses=sum(e["outcome"] == "miss" for e in decisions),
        alarms=sum(e["kind"] == "AlarmRaised" for e in events),
        false_alarms=sum(e["kind"] == "FalseAlarm" for e in events),
        shifts_confirmed=sum(len(v) for v in confirmed.values()),
        events=events)


# scheduler replay -------------------------------------------------------

_RANK = {"High": 0, "Mid": 1, "Low": 2}


def check_scheduler(events: Sequence[dict], policy: str | None = None) -> list[str]:
    """Replay task events and report every scheduling-policy violation."""
    if policy is None:
        policy = next((e["scheduler"] for e in events if e["kind"] == "RunStarted"), "mlq")
    tasks, pending, running, problems = {}, set(), None, []
    for e in events:
        kind = e["kind"]
        if kind == "TaskEnqueued":
            dom = tuple(e["domain"])
            if any(tasks[i]["domain"] == dom for i in pending) or (
                    running is not None and tasks[running]["domain"] == dom):
                problems.append(f"t={e['t']}: duplicate task for {dom}")
            tasks[e["task"]] = {"domain": dom, "level": e["level"], "seq": e["seq"],
                                "key": math.inf if e["key"] is None else e["key"]}
            pending.add(e["task"])
        elif kind == "TaskLevel":
            tasks[e["task"]]["level"] = e["level"]
            tasks[e["task"]]["key"] = math.inf if e["key"] is None else e["key"]
        elif kind in ("TaskStarted", "TaskAborted"):
            tid = e["task"]
            if tid not in pending:
                problems.append(f"t={e['t']}: task {tid} picked but not pending")
                continue
            if running is not None:
                problems.append(f"t={e['t']}: task {tid} picked while {running} runs")
            chosen = tasks[tid]
            others = [tasks[i] for i in pending if i != tid]
            if policy == "fifo":
                if any(o["seq"] < chosen["seq"] for o in others):
                    problems.append(f"t={e['t']}: task {tid} overtook an earlier task")
            else:
                r = _RANK[chosen["level"]]
                if any(_RANK[o["level"]] < r for o in others):
                    problems.append(f"t={e['t']}: {chosen['level']} task {tid} ran while a "
                                    "higher queue was non-empty")
                same = [o for o in others if o["level"] == chosen["level"]]
                if chosen["level"] == "Mid":
                    if any((o["key"], o["seq"]) < (chosen["key"], chosen["seq"]) for o in same):
                        problems.append(f"t={e['t']}: Mid task {tid} not the lowest accuracy")
                elif any(o["seq"] < chosen["seq"] for o in same):
                    problems.append(f"t={e['t']}: {chosen['level']} task {tid} broke FIFO")
            pending.discard(tid)
            if kind == "TaskStarted":
                running = tid
        elif kind == "RetrainCompleted":
            if running != e["task"]:
                problems.append(f"t={e['t']}: completion of {e['task']} which is not running")
            running = None
    return problems


# matrix -----------------------------------------------------------------

CSV_COLUMNS = ("variant", "devices", "seed", "scheduler", "shifts_confirmed", "unresolved",
               "alarms", "false_alarms", "mean_response_delay", "mean_cache_hit_delay",
               "cache_hit_rate", "mean_retrain_time", "retrains_deployed",
               "mean_recovery_accuracy", "mean_window_accuracy", "ratio_reuse",
               "ratio_finetune", "ratio_retrain", "error")


def result_row(cfg: ScenarioConfig, report: MetricsReport | None, error: str = "") -> dict:
    row = {"variant": cfg.variant, "devices": cfg.devices, "seed": cfg.seed,
           "scheduler": cfg.policy.scheduler}
    scalars = report.scalars() if report is not None else {}
    for col in CSV_COLUMNS[4:-1]:
        row[col] = scalars.get(col, "")
    row["error"] = error
    return row


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 9))
    return str(v)


def rows_to_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in CSV_COLUMNS])
    return buf.getvalue()


def run_matrix(configs: Iterable[ScenarioConfig]) -> tuple[list[dict], list[RunResult]]:
    rows, results = [], []
    for cfg in configs:
        try:
            res = run_scenario(cfg)
        except Exception as exc:    # keep going; the row records the failure
            rows.append(result_row(cfg, None, f"{type(exc).__name__}: {exc}"))
            continue
        results.append(res)
        rows.append(result_row(cfg, res.metrics))
    return rows, results


def expand_matrix(base: ScenarioConfig, variants: Sequence[str], devices: Sequence[int],
                  seeds: Sequence[int]) -> list[ScenarioConfig]:
    return [replace(base, variant=v, devices=n, seed=s)
            for v in variants for n in devices for s in seeds]


def summary_table(rows: Sequence[dict]) -> str:
    cols = ("variant", "devices", "seed", "mean_response_delay", "mean_retrain_time",
            "mean_recovery_accuracy", "mean_window_accuracy", "cache_hit_rate", "error")
    cells = [[_fmt(r.get(c, "")) if not isinstance(r.get(c), float)
              else f"{r[c]:.3f}" for c in cols] for r in rows]
    widths = [max(len(c), *(len(x[i]) for x in cells)) if cells else len(c)
              for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(x.ljust(w) for x, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
