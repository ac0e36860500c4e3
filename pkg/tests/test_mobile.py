import math

import pytest

from edgeadapt.config import ScenarioConfig
from edgeadapt.events import EventLog
from edgeadapt.mobile import (POTENTIAL, REGULAR, Env, MobileAgent, ModelCache, cache_replace,
                              post_reuse_check, reuse_select)
from edgeadapt.sim import Simulator
from edgeadapt.taxonomy import TaxonomyTree, encode_table, schema_from_mapping
from edgeadapt.transport import (DomainVerdict, ModelDispatch, ModelRequest, RetrainNotice,
                                 TaxonomySync, WindowReport)
from edgeadapt.world import DomainTrace, ExpertModel, World

SCD = ("street", "clear", "day")
SCN = ("street", "clear", "night")
SRN = ("street", "rainy", "night")
SSD = ("street", "snowy", "day")
HCD = ("highway", "clear", "day")
HSD = ("highway", "snowy", "day")


def tree_with(*paths, schema=None):
    tree = TaxonomyTree(schema or schema_from_mapping(
        {"location": ["street", "highway", "residential"], "weather": ["clear", "rainy", "snowy"],
         "time": ["day", "night"]}))
    for p in paths:
        tree.set_model(p, 1)
    return tree


# cache ----------------------------------------------------------------------

def test_cache_lru_eviction_example():
    a, b, c, d = (ExpertModel(p) for p in (SCD, SCN, SRN, HCD))
    cache = ModelCache(3)
    cache.insert(a, 0.0)
    cache.insert(b, 1.0)
    cache.insert(c, 2.0)
    cache.touch(SCD, 3.0)
    evicted = cache.insert(d, 4.0, protect={HCD, SCD})
    assert [m.home for m in evicted] == [SCN]
    assert set(cache.homes()) == {SCD, SRN, HCD}


def test_cache_all_protected_and_same_home_replace():
    cache = ModelCache(1)
    cache.insert(ExpertModel(SCD), 0.0)
    assert cache.insert(ExpertModel(SCN), 1.0, protect={SCD}) is None
    assert cache.insert(ExpertModel(SCD, version=2), 1.0) == []
    assert cache.get(SCD).version == 2 and len(cache) == 1
    with pytest.raises(ValueError):
        ModelCache(0)


def test_cache_replace_keeps_previous_and_names_prefetch():
    a, b, c, d = (ExpertModel(p) for p in (SCD, SCN, SRN, HCD))
    cache = ModelCache(3)
    for i, m in enumerate((a, b, c)):
        cache.insert(m, float(i))
    # D deployed from the cloud, A was deployed before
    cache.insert(d, 5.0, protect={HCD, SCD})
    tree = tree_with(SCD, SCN, SRN, HCD, HSD)
    target = cache_replace(cache, a, HCD, tree, d, 6.0)
    assert SCD in cache and HCD in cache and len(cache) == 3
    # nearest model-present domain to HCD that is neither current nor resident
    assert target == HSD


def test_cache_replace_single_domain_no_prefetch():
    tree = tree_with(SCD)
    cache = ModelCache(3)
    cache.insert(ExpertModel(SCD), 0.0)
    assert cache_replace(cache, None, SCD, tree, ExpertModel(SCD), 1.0) is None


# reuse selection ------------------------------------------------------------

def test_reuse_hit():
    cache = ModelCache(3)
    cache.insert(ExpertModel(SCN), 0.0)
    cache.insert(ExpertModel(SRN), 0.0)
    d = reuse_select(cache, tree_with(SCN, SRN), SRN, ExpertModel(SCN))
    assert d.outcome == "hit" and d.model.home == SRN and d.request is None


def test_reuse_miss_uses_resident_parent_and_requests_global():
    cache = ModelCache(3)
    cache.insert(ExpertModel(("street", "clear")), 0.0)
    tree = tree_with(SCD, ("street", "clear"))
    d = reuse_select(cache, tree, SCD, ExpertModel(HCD))
    assert d.outcome == "miss"
    assert d.model.home == ("street", "clear") and d.request == SCD


def test_reuse_miss_falls_back_to_current():
    current = ExpertModel(HCD)
    d = reuse_select(ModelCache(3), tree_with(SCD), SCN, current)
    assert d.outcome == "miss" and d.model is current and d.request == SCD


def test_reuse_empty_taxonomy_keeps_current():
    current = ExpertModel(HCD)
    d = reuse_select(ModelCache(3), tree_with(), SCD, current)
    assert d.outcome == "none" and d.model is current and d.request is None


def test_reuse_skips_refused_paths():
    cache = ModelCache(3)
    cache.insert(ExpertModel(HCD), 0.0)
    d = reuse_select(cache, tree_with(SCD, HCD), SCN, ExpertModel(HCD), exclude={SCD})
    assert d.outcome == "hit" and d.model.home == HCD


def test_post_reuse_check_threshold():
    assert post_reuse_check(0.50) is False
    assert post_reuse_check(0.30) is True
    assert post_reuse_check(0.35) is False
    assert post_reuse_check(None) is None


# agent state machine --------------------------------------------------------

class Rig:
    """One agent wired to capture its outbound messages."""

    def __init__(self, variant="Mocha", entries=((SCN, 4), (SCD, 4)), cached=(SCD,),
                 present=(SCN, SCD, SRN, HCD), **cfg):
        self.cfg = ScenarioConfig(variant=variant, duration_windows=sum(d for _, d in entries),
                                  **cfg)
        self.sim = Simulator()
        self.log = EventLog(self.sim)
        self.world = World(self.cfg.world_config())
        env = Env(self.sim, self.world, self.cfg, self.log, self.world.schema)
        tree = TaxonomyTree(self.world.schema)
        for p in present:
            tree.set_model(p, 1)
        self.sent = []
        start = self.world.retrain_result(entries[0][0], 200)
        self.agent = MobileAgent(1, env, DomainTrace(list(entries)), start, tree,
                                 send_up=self.sent.append,
                                 warm=[ExpertModel(p) for p in cached])
        self.agent.boundary(0)

    def kinds(self):
        return [r["kind"] for r in self.log.records]

    def of(self, kind):
        return self.log.of(kind)

    def verdict(self, path, confirmed=True, labels=40):
        self.agent.receive(DomainVerdict(device_id=1, shift_confirmed=confirmed, path=path,
                                         labels=tuple(range(labels))))

    def sent_of(self, cls):
        return [m for m in self.sent if isinstance(m, cls)]


def test_false_alarm_returns_to_regular():
    rig = Rig()
    rig.agent.mode = POTENTIAL
    rig.verdict(SCN, confirmed=False)
    assert rig.agent.mode == REGULAR
    assert rig.kinds()[-1] == "FalseAlarm"
    assert not rig.of("ReuseApplied") and not rig.of("ShiftConfirmed")


def test_verdict_in_regular_mode_is_a_protocol_error():
    rig = Rig()
    rig.verdict(SCD)
    assert rig.kinds()[-1] == "ProtocolError"
    assert rig.agent.confirmed == SCN


def test_late_verdict_for_an_outstanding_upload_is_stale():
    rig = Rig()
    rig.agent._upload(5)
    rig.verdict(SCD)
    assert rig.kinds()[-1] == "StaleVerdict"
    assert rig.agent.mode == REGULAR and rig.agent.confirmed == SCN
    rig.verdict(SCD)
    assert rig.kinds()[-1] == "ProtocolError"


def test_confirmed_shift_to_cached_domain_is_a_hit():
    rig = Rig()
    rig.agent.mode = POTENTIAL
    rig.sim.at(30.0, rig.verdict, SCD)
    rig.sim.run(31)
    dec = rig.of("ReuseDecision")[0]
    applied = rig.of("ReuseApplied")[0]
    assert dec["outcome"] == "hit"
    assert applied["detail"] == "hit" and applied["model"] == list(SCD)
    assert applied["t"] - rig.of("ShiftConfirmed")[0]["t"] == pytest.approx(0.47)
    assert rig.agent.deployed.home == SCD
    assert not rig.sent_of(RetrainNotice)


def test_confirmed_shift_to_unseen_domain_reuses_nearest_and_requests_retrain():
    rig = Rig()
    rig.agent.mode = POTENTIAL
    rig.verdict(SSD)
    rig.sim.run(1)
    assert rig.of("ReuseApplied") and rig.of("RetrainRequested")
    notice = rig.sent_of(RetrainNotice)[-1]
    assert notice.path == SSD and notice.version == 0


def test_empty_taxonomy_keeps_current_and_requests_retrain():
    rig = Rig(present=())
    rig.agent.mode = POTENTIAL
    rig.verdict(SCD)
    rig.sim.run(1)
    assert rig.of("ReuseDecision")[0]["outcome"] == "none"
    assert not rig.of("ReuseApplied")
    assert rig.of("RetrainRequested")
    assert rig.agent.deployed.home == SCN


def test_miss_applies_local_then_global():
    rig = Rig(cached=(), present=(SCN, SCD))
    rig.agent.mode = POTENTIAL
    rig.verdict(SCD)
    req = rig.sent_of(ModelRequest)[-1]
    assert req.path == SCD
    rig.sim.run(1)
    assert rig.of("ReuseApplied")[0]["detail"] == "miss"
    model = rig.world.retrain_result(SCD, 600)
    rig.agent.receive(ModelDispatch(device_id=1, path=SCD, model=model))
    rig.sim.run(2)
    dep = rig.of("ModelDeployed")[-1]
    assert dep["detail"] == "global" and rig.agent.deployed.home == SCD


def test_nack_clears_pending_request():
    rig = Rig(cached=(), present=(SCN, SCD))
    rig.agent.mode = POTENTIAL
    rig.verdict(SCD)
    rig.agent.receive(ModelDispatch(device_id=1, path=SCD))
    assert rig.agent.pending_global is None and SCD in rig.agent.nacked
    sync = TaxonomySync(device_id=1, table=encode_table(tree_with(SCN, SCD, SRN,
                                                                  schema=rig.world.schema)))
    rig.agent.taxonomy.revision = 0
    rig.agent.receive(sync)
    assert not rig.agent.nacked


def test_stale_sync_is_ignored():
    rig = Rig()
    tree = rig.agent.taxonomy
    rig.agent.receive(TaxonomySync(device_id=1, table=encode_table(tree)))
    assert rig.kinds()[-1] == "StaleSync"


def test_finetune_below_threshold_then_accuracy_rises():
    rig = Rig(entries=((SCN, 2), (HSD, 12)), cached=(), present=(SCN,))
    rig.agent.mode = POTENTIAL
    rig.sim.at(61.0, rig.verdict, HSD)
    for w in range(1, 14):
        rig.sim.at(30.0 * w, rig.agent.boundary, w)
    rig.sim.run(400)
    started = rig.of("FineTuneStarted")
    applied = rig.of("FineTuneApplied")
    assert started and started[0]["t"] == 90.0
    assert applied[0]["t"] == pytest.approx(210.0)
    acc = [r["accuracy"] for r in rig.of("Accuracy")]
    before = rig.world.accuracy(ExpertModel(SCN), HSD)
    assert before < 0.35
    assert applied[0]["accuracy"] > before
    assert acc[-1] == applied[0]["accuracy"]


def test_no_finetune_above_threshold():
    rig = Rig(entries=((SCN, 2), (SCD, 6)))
    rig.agent.mode = POTENTIAL
    rig.sim.at(61.0, rig.verdict, SCD)
    for w in range(1, 8):
        rig.sim.at(30.0 * w, rig.agent.boundary, w)
    rig.sim.run(240)
    assert not rig.of("FineTuneStarted")


def test_every_window_reports_and_records_accuracy():
    rig = Rig(entries=((SCN, 3), (SCD, 3)))
    for w in range(1, 7):
        rig.sim.at(30.0 * w, rig.agent.boundary, w)
    rig.sim.run(200)
    reports = rig.sent_of(WindowReport)
    assert [r.window_id for r in reports] == list(range(6))
    assert len(rig.agent.window_accuracy) == 6
    assert reports[0].accuracy == pytest.approx(0.6)
    assert rig.of("TraceShift")[0]["t"] == 90.0


def test_alarm_starts_uploads_and_stops_on_false_alarm():
    # a low k keeps the home window quiet while the far domain still alarms
    rig = Rig(entries=((SCN, 1), (HSD, 4)), k=-2.0)
    rig.sim.at(30.0, rig.agent.boundary, 1)
    rig.sim.run(33)
    assert rig.agent.mode == POTENTIAL
    assert rig.of("AlarmRaised")[0]["t"] == 32.0
    uploads = [m for m in rig.sent if m.TYPE == 1]
    assert uploads[0].n_frames == 20
    rig.sim.run(43)
    assert [m.n_frames for m in rig.sent if m.TYPE == 1] == [20, 50]
    rig.verdict(SCN, confirmed=False)
    rig.sim.run(80)
    assert len([m for m in rig.sent if m.TYPE == 1]) == 2


def test_deployed_always_resident_and_capacity_respected():
    rig = Rig(entries=((SCN, 2), (SCD, 2), (SRN, 2), (HCD, 2), (SCN, 2)),
              present=(SCN, SCD, SRN, HCD))
    for w in range(1, 10):
        rig.sim.at(30.0 * w, rig.agent.boundary, w)
    for t, p in [(61, SCD), (121, SRN), (181, HCD), (241, SCN)]:
        rig.sim.at(t - 0.5, setattr, rig.agent, "mode", POTENTIAL)
        rig.sim.at(t, rig.verdict, p)
    checks = []
    for t in range(1, 300, 7):
        rig.sim.at(t + 0.25, lambda: checks.append(
            (rig.agent.deployed.home in rig.agent.cache, len(rig.agent.cache))))
    rig.sim.run(300)
    assert all(res for res, _ in checks)
    assert all(n <= 3 for _, n in checks)
    times = [r["t"] for r in rig.log.records]
    assert times == sorted(times)


def test_load_time_is_independent_of_link_state():
    rig = Rig()
    rig.agent.mode = POTENTIAL
    rig.verdict(SCD)
    rig.sim.run(5)
    delay = rig.of("ReuseApplied")[0]["t"] - rig.of("ShiftConfirmed")[0]["t"]
    assert math.isclose(delay, rig.world.costs.load_seconds)
