"""
KripkeGuard diagnostic agent tests
Monitoring, topology queries, the reasoning loop and end-to-end episodes
"""

import json

import pytest

from accel_sim import SECTOR_COUPLINGS, SECTOR_PVS, ScenarioSpec, TickRecord, builtin_scenario, run_scenario
from diagnostic_agents import (
    DEFAULT_THRESHOLDS, AcceleratorSectorDiagnostics, ConfigurationError, FaultReport, MonitorConfig,
    ReasonerState, ReasoningAgent, RecordMismatchError, SystemConfig, TopologyGraph, TraceKind,
    UnknownComponentError, consequence_valuation, create_monitoring_agents, detect_anomaly, diagnosis_valuation,
    formalize,
    load_topology, map_to_proposition, nominal_model, query_connectivity, reason_tick, run_episode,
)
from formula_lang import load_axioms
from hypo_gen import CausalTheory, Classification, RuleClassifier, RuleTheorizer, SuspectedSystem, gather_evidence
from modal_kernel import check_axioms, model_to_dict
from settings import BASE_DIR

AXIOMS = load_axioms(BASE_DIR / "axioms" / "accelerator.ax")
TOPOLOGY = load_topology(BASE_DIR / "topology" / "accelerator_sector.json")


def report(agent: str, tick: int, pv: str, system: SuspectedSystem) -> FaultReport:
    classification = Classification(system)
    return FaultReport(agent, tick, pv, classification, map_to_proposition(classification))


KLYSTRON = report("Klystron_Agent", 3, "RF:klystron_output", SuspectedSystem.KLYSTRON)
POWER = report("RF_Agent", 3, "RF:forward_power", SuspectedSystem.POWER)
VALVE = report("Cooling_Agent", 3, "COOL:valve_position", SuspectedSystem.COOLING)
CAVITY = report("RF_Agent", 4, "RF:cavity_temp", SuspectedSystem.COOLING)
VACUUM = report("Vacuum_Agent", 3, "VAC:pressure", SuspectedSystem.VACUUM)


class FixedTheorizer:
    """Always proposes the same root cause and effects"""

    def __init__(self, root, effects=()):
        self.root = root
        self.effects = tuple(effects)

    def theorize(self, reports, topology_hint=None):
        return CausalTheory(self.root, self.effects, "fixed",
                            gather_evidence(self.root, self.effects, reports))


def rule_config(**overrides) -> SystemConfig:
    fields = dict(axioms=AXIOMS, topology=TOPOLOGY, classifier=RuleClassifier(), theorizer=RuleTheorizer())
    fields.update(overrides)
    return SystemConfig(**fields)


def monitor(agent: str, spec_id: str = "direct_klystron") -> MonitorConfig:
    spec = builtin_scenario(spec_id)
    thresholds = DEFAULT_THRESHOLDS[agent]
    return MonitorConfig(agent, thresholds, {pv: spec.pv(pv).baseline for pv in thresholds})


# Reports and monitors
def test_proposition_mapping_is_fixed():
    assert map_to_proposition(Classification("Cooling")) == "cooling_fault_reported"
    assert map_to_proposition(Classification("Klystron")) == "klystron_fault_reported"
    assert map_to_proposition(Classification("Power")) == "rf_power_fault_reported"
    assert map_to_proposition(Classification("Vacuum")) == "vacuum_fault_reported"


def test_fault_report_enforces_its_proposition():
    with pytest.raises(ValueError):
        FaultReport("RF_Agent", 3, "RF:forward_power", Classification("Power"), "klystron_fault_reported")


def test_monitor_thresholds_must_be_positive():
    with pytest.raises(ConfigurationError):
        MonitorConfig("Vacuum_Agent", {"VAC:pressure": 0.0}, {"VAC:pressure": 2.0})
    with pytest.raises(ConfigurationError):
        MonitorConfig("Vacuum_Agent", {"VAC:pressure": 1.0}, {})


def test_quiet_ticks_produce_no_anomalies():
    records = run_scenario(builtin_scenario("direct_klystron"))
    for agent in DEFAULT_THRESHOLDS:
        for record in records[:3]:
            assert detect_anomaly(monitor(agent), record) == []


def test_sub_threshold_vacuum_rise_is_ignored():
    records = run_scenario(builtin_scenario("confounded_klystron"))
    cfg = monitor("Vacuum_Agent", "confounded_klystron")
    assert all(detect_anomaly(cfg, record) == [] for record in records)


def test_klystron_failure_trips_two_agents():
    record = run_scenario(builtin_scenario("direct_klystron"))[3]
    klystron = detect_anomaly(monitor("Klystron_Agent"), record)
    rf = detect_anomaly(monitor("RF_Agent"), record)
    assert [(r.agent, r.ctx.pv) for r in klystron] == [("Klystron_Agent", "RF:klystron_output")]
    assert [(r.agent, r.ctx.pv) for r in rf] == [("RF_Agent", "RF:forward_power")]


def test_detect_anomaly_requires_watched_pvs():
    record = TickRecord(tick=0, values={"RF:cavity_temp": 35.0}, truth={"RF:cavity_temp": 35.0})
    with pytest.raises(RecordMismatchError):
        detect_anomaly(monitor("RF_Agent"), record)


def test_monitors_are_created_in_agent_order():
    agents = create_monitoring_agents(builtin_scenario("direct_klystron"), RuleClassifier())
    assert [a.agent_id for a in agents] == ["Cooling_Agent", "Klystron_Agent", "RF_Agent", "Vacuum_Agent"]
    assert agents[2].config.watched_pvs == ["RF:cavity_temp", "RF:forward_power"]


# Topology
def test_shipped_topology_owns_every_watched_pv():
    watched = {pv for thresholds in DEFAULT_THRESHOLDS.values() for pv in thresholds}
    assert watched <= set(TOPOLOGY.pv_owner)
    assert TOPOLOGY.owner("RF:klystron_output") == "klystron_1"


def test_connectivity_queries():
    answer = query_connectivity(TOPOLOGY, "cooling_loop_A", "rf_cavity_1")
    assert answer.connected
    assert [e.to_list() for e in answer.path] == [["cooling_loop_A", "rf_cavity_1", "cools"]]

    reverse = query_connectivity(TOPOLOGY, "rf_cavity_1", "cooling_loop_A")
    assert [e.to_list() for e in reverse.path] == [["cooling_loop_A", "rf_cavity_1", "cools"]]

    itself = query_connectivity(TOPOLOGY, "klystron_1", "klystron_1")
    assert itself.connected and itself.path == ()

    colocated = query_connectivity(TOPOLOGY, "vacuum_pump_S1", "klystron_1")
    assert colocated.connected
    assert colocated.relations == ["colocated"]

    with pytest.raises(UnknownComponentError):
        query_connectivity(TOPOLOGY, "cooling_loop_A", "beam_dump")


def test_disconnected_components():
    topo = TopologyGraph(components={"a", "b"}, edges=(), pv_owner={})
    assert not query_connectivity(topo, "a", "b").connected


def test_topology_validation(tmp_path):
    with pytest.raises(ValueError):
        TopologyGraph(components={"a"}, edges=[{"source": "a", "target": "b", "relation": "cools"}])
    bad = tmp_path / "topology.json"
    bad.write_text('{"components": ["a"], "edges": [], "pv_owner": {"X:y": "ghost"}}', encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_topology(bad)
    with pytest.raises(ConfigurationError):
        load_topology(tmp_path / "missing.json")


# Reasoning
def test_nominal_model_satisfies_the_shipped_axioms():
    model = nominal_model()
    assert model.current == "w0"
    assert model.valuation("w0") == {"system_nominal"}
    assert check_axioms(model, AXIOMS).ok


def test_diagnosis_valuation():
    theory = CausalTheory("cooling_fault_reported", ("rf_overheat_reported",))
    assert diagnosis_valuation(theory) == {
        "cooling_fault_reported", "cooling_insufficient", "rf_overheat_reported", "RF_overheats",
    }
    klystron = CausalTheory("klystron_fault_reported", ("rf_power_fault_reported",))
    assert "rf_fault_is_root_cause" in diagnosis_valuation(klystron)
    assert consequence_valuation("rf_overheat_reported") == {
        "rf_overheat_reported", "RF_overheats", "rf_fault_is_root_cause",
    }
    assert consequence_valuation("cooling_fault_reported") == {"cooling_fault_reported", "cooling_insufficient"}
    assert diagnosis_valuation(CausalTheory("vacuum_fault_reported")) == {"vacuum_fault_reported", "vacuum_degraded"}


def test_formalize_adds_diagnosis_and_consequence_worlds():
    theory = CausalTheory("klystron_fault_reported", ("rf_power_fault_reported",))
    model = nominal_model()
    candidate = formalize(model, theory)
    assert candidate.current == "w1"
    assert ("w0", "w1") in candidate.accessibility
    assert candidate.valuation("w2") == {"rf_power_fault_reported", "rf_power_low", "rf_fault_is_root_cause"}
    assert ("w1", "w2") in candidate.accessibility
    assert model == nominal_model()


def test_no_reports_leaves_the_state_alone():
    state = ReasonerState(nominal_model())
    new_state, events = reason_tick(state, 0, [], AXIOMS, TOPOLOGY, RuleTheorizer())
    assert new_state == state
    assert events == []


def test_klystron_theory_is_committed_and_pruned():
    state, events = reason_tick(ReasonerState(nominal_model()), 3, [KLYSTRON, POWER], AXIOMS, TOPOLOGY,
                                RuleTheorizer())
    kinds = [e.kind for e in events]
    assert kinds == [TraceKind.REPORT_RECEIVED, TraceKind.REPORT_RECEIVED, TraceKind.THEORY_PROPOSED,
                     TraceKind.AXIOM_CHECK, TraceKind.CONNECTIVITY_QUERY, TraceKind.COMMIT, TraceKind.PRUNE]
    assert state.theory.root_cause == "klystron_fault_reported"
    assert state.model.world_ids == {"w1"}
    connectivity = events[4].payload
    assert (connectivity["from"], connectivity["to"], connectivity["connected"]) == ("klystron_1", "rf_cavity_1", True)
    assert check_axioms(state.model, AXIOMS).ok


def test_reversed_causality_is_rejected():
    start = ReasonerState(nominal_model())
    theorizer = FixedTheorizer("rf_power_fault_reported", ["klystron_fault_reported"])
    state, events = reason_tick(start, 3, [KLYSTRON, POWER], AXIOMS, TOPOLOGY, theorizer)
    reject = [e for e in events if e.kind is TraceKind.REJECT]
    assert len(reject) == 1
    assert reject[0].payload["reason"] == "axiom_violation"
    assert "causal_direction" in reject[0].payload["violated"]
    assert state.model == start.model
    assert state.theory is None
    assert len(state.reports) == 2


def test_vacuum_root_of_rf_effects_is_rejected():
    theorizer = FixedTheorizer("vacuum_fault_reported", ["rf_power_fault_reported"])
    state, events = reason_tick(ReasonerState(nominal_model()), 3, [VACUUM, POWER], AXIOMS, TOPOLOGY, theorizer)
    reject = [e for e in events if e.kind is TraceKind.REJECT]
    assert reject[0].payload["violated"] == ["vacuum_prune"]
    assert state.model == nominal_model()


def test_forced_vacuum_report_does_not_distract():
    state, _ = reason_tick(ReasonerState(nominal_model()), 3, [KLYSTRON, POWER, VACUUM], AXIOMS, TOPOLOGY,
                           RuleTheorizer())
    assert state.theory.root_cause == "klystron_fault_reported"

    late = report("Vacuum_Agent", 4, "VAC:pressure", SuspectedSystem.VACUUM)
    state, _ = reason_tick(ReasonerState(nominal_model()), 3, [KLYSTRON, POWER], AXIOMS, TOPOLOGY, RuleTheorizer())
    committed = state.model
    state, events = reason_tick(state, 4, [late], AXIOMS, TOPOLOGY, RuleTheorizer())
    assert [e.kind for e in events][-1] is TraceKind.THEORY_RETAINED
    assert state.model == committed
    assert state.theory.root_cause == "klystron_fault_reported"


def test_disconnected_topology_blocks_commit():
    topo = TopologyGraph(components=TOPOLOGY.components, edges=(), pv_owner=TOPOLOGY.pv_owner)
    state, events = reason_tick(ReasonerState(nominal_model()), 3, [KLYSTRON, POWER], AXIOMS, topo, RuleTheorizer())
    assert events[-1].kind is TraceKind.REJECT
    assert events[-1].payload["reason"] == "not_connected"
    assert state.model == nominal_model()


def test_repeated_reports_do_not_retrigger_theorizing():
    agent = ReasoningAgent(AXIOMS, TOPOLOGY, RuleTheorizer())
    agent.receive(3, [KLYSTRON, POWER])
    events = agent.receive(4, [KLYSTRON, POWER])
    assert [e.kind for e in events] == [TraceKind.REPORT_RECEIVED, TraceKind.REPORT_RECEIVED]
    assert all(e.payload["new"] is False for e in events)


def test_cascade_revises_the_committed_world():
    agent = ReasoningAgent(AXIOMS, TOPOLOGY, RuleTheorizer())
    agent.receive(3, [VALVE])
    assert agent.state.theory.effects == ()
    assert check_axioms(agent.state.model, AXIOMS).ok
    agent.receive(4, [VALVE, CAVITY])
    assert agent.state.theory.effects == ("rf_overheat_reported",)
    assert agent.state.model.world_ids == {"w1"}
    assert {"cooling_insufficient", "RF_overheats"} <= agent.state.model.valuation("w1")
    assert check_axioms(agent.state.model, AXIOMS).ok


# Episodes
def test_cascading_cooling_episode():
    diagnosis = run_episode(builtin_scenario("cascading_cooling"), rule_config())
    assert diagnosis.root_cause == "cooling_fault_reported"
    model = diagnosis.final_model
    assert "w0" not in model.world_ids
    assert {"cooling_insufficient", "RF_overheats"} <= model.valuation(model.current)
    assert check_axioms(model, AXIOMS).ok
    assert "rf_fault_is_root_cause" not in model.valuation(model.current)
    commits = diagnosis.events(TraceKind.COMMIT)
    assert [e.tick for e in commits] == [3, 4]


def test_direct_klystron_episode():
    diagnosis = run_episode(builtin_scenario("direct_klystron"), rule_config())
    assert diagnosis.root_cause == "klystron_fault_reported"
    assert len(diagnosis.final_model.worlds) == 1
    assert diagnosis.final_model.current == "w1"


def test_confounded_episode_matches_the_direct_one():
    direct = run_episode(builtin_scenario("direct_klystron"), rule_config())
    confounded = run_episode(builtin_scenario("confounded_klystron"), rule_config())
    assert all(e.payload["agent"] != "Vacuum_Agent" for e in confounded.events(TraceKind.REPORT_RECEIVED))
    assert confounded.root_cause == direct.root_cause
    assert (confounded.final_model.valuation(confounded.final_model.current)
            == direct.final_model.valuation(direct.final_model.current))
    left, right = direct.to_dict(), confounded.to_dict()
    left.pop("scenario")
    right.pop("scenario")
    assert left == right


def test_episode_without_faults_keeps_the_nominal_model():
    quiet = ScenarioSpec(id="quiet", duration_ticks=10, pvs=SECTOR_PVS, couplings=SECTOR_COUPLINGS)
    diagnosis = run_episode(quiet, rule_config())
    assert diagnosis.root_cause is None
    assert not diagnosis.committed
    assert diagnosis.final_model == nominal_model()
    assert diagnosis.trace == ()


def test_committed_model_passes_axioms_after_every_tick():
    spec = builtin_scenario("cascading_cooling")
    monitors = create_monitoring_agents(spec, RuleClassifier())
    reasoner = ReasoningAgent(AXIOMS, TOPOLOGY, RuleTheorizer())
    for record in run_scenario(spec):
        reasoner.receive(record.tick, [r for m in monitors for r in m.observe(record)])
        assert check_axioms(reasoner.state.model, AXIOMS).ok


def test_episodes_are_deterministic():
    spec = builtin_scenario("cascading_cooling")
    first = run_episode(spec, rule_config())
    second = run_episode(spec, rule_config())
    assert first.to_json() == second.to_json()
    ticks = [e.tick for e in first.trace]
    assert ticks == sorted(ticks)
    document = json.loads(first.to_json())
    assert document["final_model"] == model_to_dict(first.final_model)
    assert document["committed"] is True


def test_system_configuration_errors():
    with pytest.raises(ConfigurationError):
        AcceleratorSectorDiagnostics(rule_config(thresholds={"Magnet_Agent": {"MAG:current": 1.0}}))
    system = AcceleratorSectorDiagnostics(rule_config())
    toy = ScenarioSpec(id="toy", duration_ticks=2,
                       pvs=[{"id": "A:x", "baseline": 0.0, "noise_amplitude": 0.0}])
    with pytest.raises(ConfigurationError):
        system.check_scenario(toy)
    with pytest.raises(ConfigurationError):
        system.run_episode(toy)


def test_system_exposes_its_monitors():
    system = AcceleratorSectorDiagnostics(rule_config())
    system.run_episode(builtin_scenario("direct_klystron"))
    assert system.get_agent_by_name("Vacuum_Agent").config.watched_pvs == ["VAC:pressure"]
    assert system.get_agent_by_name("Nobody") is None
