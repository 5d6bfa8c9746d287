"""
KripkeGuard - Diagnostic Agents
Component monitoring, physical knowledge and hierarchical reasoning agents,
plus the per-tick orchestration of an accelerator-sector episode.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import networkx as nx
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from accel_sim import ScenarioSpec, TickRecord, initial_state, step
from hypo_gen import (
    COOLING_FAULT, COOLING_INSUFFICIENT, KLYSTRON_DAMAGED, KLYSTRON_FAULT, RF_OVERHEAT, RF_OVERHEATS,
    RF_POWER_FAULT, RF_POWER_LOW, RF_ROOT_CAUSE, RF_SYMPTOMS, SYSTEM_NOMINAL, VACUUM_DEGRADED, VACUUM_FAULT,
    VOCABULARY, AnomalyContext, CausalTheory, Classification, Classifier, HypothesisError,
    SuspectedSystem, Theorizer, UnclassifiableAnomalyError, symptom_of,
)
from modal_kernel import (
    NEW, AxiomSet, KripkeError, KripkeModel, Proposition, ValidationResult, check_axioms, commit, is_reflexive,
    model_to_dict, prune_worlds, with_hypothesis,
)

logger = logging.getLogger(__name__)


# Errors
class DiagnosticsError(Exception):
    """Base class for agent and episode errors"""


class ConfigurationError(DiagnosticsError):
    pass


class UnknownComponentError(DiagnosticsError):
    pass


class RecordMismatchError(DiagnosticsError):
    """A tick record that does not cover a monitor's watched PVs"""


# Proposition mapping
PROPOSITION_BY_SYSTEM = {
    SuspectedSystem.COOLING: COOLING_FAULT,
    SuspectedSystem.KLYSTRON: KLYSTRON_FAULT,
    SuspectedSystem.POWER: RF_POWER_FAULT,
    SuspectedSystem.VACUUM: VACUUM_FAULT,
}

# Report-level symptom -> what it means for the plant in a diagnosis world
DIAGNOSIS_BY_SYMPTOM = {
    COOLING_FAULT: COOLING_INSUFFICIENT,
    RF_OVERHEAT: RF_OVERHEATS,
    KLYSTRON_FAULT: KLYSTRON_DAMAGED,
    RF_POWER_FAULT: RF_POWER_LOW,
    VACUUM_FAULT: VACUUM_DEGRADED,
}


def map_to_proposition(classification: Classification) -> Proposition:
    return PROPOSITION_BY_SYSTEM[classification.suspected_system]


# Reports
@dataclass(frozen=True)
class AnomalyReport:
    agent: str
    ctx: AnomalyContext


@dataclass(frozen=True)
class FaultReport:
    agent: str
    tick: int
    pv: str
    classification: Classification
    proposition: Proposition

    def __post_init__(self):
        expected = map_to_proposition(self.classification)
        if self.proposition != expected:
            raise ValueError(
                f"{self.agent}: proposition {self.proposition} does not match "
                f"{self.classification.suspected_system.value} (expected {expected})"
            )
        object.__setattr__(self, "proposition", expected)

    @classmethod
    def from_classification(cls, report: AnomalyReport, classification: Classification) -> "FaultReport":
        return cls(report.agent, report.ctx.tick, report.ctx.pv, classification, map_to_proposition(classification))

    @property
    def key(self) -> Tuple[str, str]:
        return self.agent, self.pv

    def to_dict(self) -> Dict[str, Any]:
        return {
            "agent": self.agent,
            "tick": self.tick,
            "pv": self.pv,
            "suspected_system": self.classification.suspected_system.value,
            "source": self.classification.source.value,
            "proposition": str(self.proposition),
        }


# Monitoring
@dataclass(frozen=True)
class MonitorConfig:
    agent: str
    thresholds: Mapping[str, float]
    baselines: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for pv, tau in self.thresholds.items():
            if not tau > 0:
                raise ConfigurationError(f"{self.agent}: threshold for {pv} must be > 0, got {tau}")
        missing = set(self.thresholds) - set(self.baselines)
        if missing:
            raise ConfigurationError(f"{self.agent}: no baseline for {sorted(missing)}")

    @property
    def watched_pvs(self) -> List[str]:
        return sorted(self.thresholds)


# Reporting thresholds per agent and PV
DEFAULT_THRESHOLDS: Dict[str, Dict[str, float]] = {
    "Cooling_Agent": {"COOL:valve_position": 10.0, "COOL:supply_pressure": 0.5},
    "Klystron_Agent": {"RF:klystron_output": 0.5},
    "RF_Agent": {"RF:cavity_temp": 2.0, "RF:forward_power": 0.5},
    "Vacuum_Agent": {"VAC:pressure": 1.0},
}


def detect_anomaly(cfg: MonitorConfig, record: TickRecord) -> List[AnomalyReport]:
    missing = [pv for pv in cfg.watched_pvs if pv not in record.values]
    if missing:
        raise RecordMismatchError(f"{cfg.agent}: tick {record.tick} has no reading for {missing}")
    reports = []
    for pv in cfg.watched_pvs:
        observed = record.values[pv]
        baseline = cfg.baselines[pv]
        if abs(observed - baseline) > cfg.thresholds[pv]:
            reports.append(AnomalyReport(cfg.agent, AnomalyContext.from_reading(pv, record.tick, observed, baseline)))
    return reports


class MonitoringAgent:
    """Watches a small dedicated set of PVs and emits classified fault reports"""

    def __init__(self, config: MonitorConfig, classifier: Classifier):
        self.config = config
        self.classifier = classifier

    @property
    def agent_id(self) -> str:
        return self.config.agent

    def observe(self, record: TickRecord) -> List[FaultReport]:
        reports = []
        for anomaly in detect_anomaly(self.config, record):
            try:
                classification = self.classifier.classify(anomaly.ctx)
            except UnclassifiableAnomalyError as e:
                logger.warning(f"{self.agent_id}: dropping anomaly on {anomaly.ctx.pv}: {e}")
                continue
            report = FaultReport.from_classification(anomaly, classification)
            logger.debug(f"{self.agent_id}: tick {report.tick} {report.pv} -> {report.proposition}")
            reports.append(report)
        return reports


# Physical topology
class Relation(str, Enum):
    COOLS = "cools"
    POWERS = "powers"
    COLOCATED = "colocated"


class TopologyEdge(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    source: str
    target: str
    relation: Relation

    def to_list(self) -> List[str]:
        return [self.source, self.target, self.relation.value]


class TopologyGraph(BaseModel):
    """Static physical connectivity of the sector"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    components: FrozenSet[str]
    edges: Tuple[TopologyEdge, ...] = ()
    pv_owner: Dict[str, str] = {}

    @model_validator(mode="after")
    def _check_references(self) -> "TopologyGraph":
        for edge in self.edges:
            for name in (edge.source, edge.target):
                if name not in self.components:
                    raise ValueError(f"edge {edge.to_list()} references unknown component {name}")
        for pv, owner in self.pv_owner.items():
            if owner not in self.components:
                raise ValueError(f"{pv} is owned by unknown component {owner}")
        return self

    def graph(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(sorted(self.components))
        for edge in sorted(self.edges, key=lambda e: e.to_list()):
            graph.add_edge(edge.source, edge.target, edge=edge)
        return graph

    def owner(self, pv: str) -> str:
        try:
            return self.pv_owner[pv]
        except KeyError:
            raise UnknownComponentError(f"No component owns {pv}") from None


def load_topology(path: Union[str, Path]) -> TopologyGraph:
    path = Path(path)
    try:
        return TopologyGraph.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigurationError(f"Cannot read topology file {path}: {e}") from e
    except ValidationError as e:
        raise ConfigurationError(f"Invalid topology file {path}: {e.errors()[0]['msg']}") from e


@dataclass(frozen=True)
class ConnectivityAnswer:
    connected: bool
    path: Tuple[TopologyEdge, ...] = ()

    @property
    def relations(self) -> List[str]:
        return [edge.relation.value for edge in self.path]


def query_connectivity(topo: TopologyGraph, a: str, b: str) -> ConnectivityAnswer:
    """Undirected reachability; edges in the path keep their declared direction"""
    for name in (a, b):
        if name not in topo.components:
            raise UnknownComponentError(f"Unknown component {name!r}")
    if a == b:
        return ConnectivityAnswer(True, ())
    graph = topo.graph()
    try:
        nodes = nx.shortest_path(graph, a, b)
    except nx.NetworkXNoPath:
        return ConnectivityAnswer(False, ())
    return ConnectivityAnswer(True, tuple(graph.edges[u, v]["edge"] for u, v in zip(nodes, nodes[1:])))


class PhysicalKnowledgeAgent:
    """Answers factual questions about the static topology"""

    def __init__(self, topology: TopologyGraph):
        self.topology = topology

    def query(self, a: str, b: str) -> ConnectivityAnswer:
        return query_connectivity(self.topology, a, b)

    def owner(self, pv: str) -> str:
        return self.topology.owner(pv)

    def components_for(self, proposition: str) -> List[str]:
        """Components owning a PV whose symptom is `proposition`"""
        return sorted({owner for pv, owner in self.topology.pv_owner.items() if symptom_of(pv) == proposition})


# Reasoning
class TraceKind(str, Enum):
    REPORT_RECEIVED = "report_received"
    THEORY_PROPOSED = "theory_proposed"
    THEORY_RETAINED = "theory_retained"
    AXIOM_CHECK = "axiom_check"
    CONNECTIVITY_QUERY = "connectivity_query"
    COMMIT = "commit"
    REJECT = "reject"
    PRUNE = "prune"


@dataclass(frozen=True)
class TraceEvent:
    tick: int
    kind: TraceKind
    payload: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"tick": self.tick, "kind": self.kind.value, "payload": dict(self.payload)}


def nominal_model() -> KripkeModel:
    """w0 (nominal) with reflexive access to itself and to one candidate world per fault family"""
    return KripkeModel.build(
        worlds={
            "w0": [SYSTEM_NOMINAL],
            "w_cool": [COOLING_FAULT],
            # causal_direction must hold globally from the start
            "w_kly": [KLYSTRON_FAULT, RF_POWER_FAULT],
            "w_vac": [VACUUM_FAULT],
        },
        edges=[("w0", "w0"), ("w0", "w_cool"), ("w0", "w_kly"), ("w0", "w_vac"),
               ("w_cool", "w_cool"), ("w_kly", "w_kly"), ("w_vac", "w_vac")],
        current="w0",
        vocabulary=VOCABULARY,
    )


@dataclass(frozen=True)
class ReasonerState:
    model: KripkeModel
    reports: Tuple[FaultReport, ...] = ()
    theory: Optional[CausalTheory] = None

    @property
    def committed(self) -> bool:
        return self.theory is not None

    @property
    def report_keys(self) -> FrozenSet[Tuple[str, str]]:
        return frozenset(r.key for r in self.reports)


def diagnosis_valuation(theory: CausalTheory) -> FrozenSet[Proposition]:
    props = {theory.root_cause, *theory.effects}
    props |= {DIAGNOSIS_BY_SYMPTOM[p] for p in list(props) if p in DIAGNOSIS_BY_SYMPTOM}
    if theory.root_cause in RF_SYMPTOMS:
        props.add(RF_ROOT_CAUSE)
    return frozenset(props)


def consequence_valuation(effect: Proposition) -> FrozenSet[Proposition]:
    """A world holding only `effect`; an RF effect there has no cause outside the RF subsystem"""
    props = {effect}
    if effect in DIAGNOSIS_BY_SYMPTOM:
        props.add(DIAGNOSIS_BY_SYMPTOM[effect])
    if effect in RF_SYMPTOMS:
        props.add(RF_ROOT_CAUSE)
    return frozenset(props)


def formalize(model: KripkeModel, theory: CausalTheory) -> KripkeModel:
    """Candidate model with the theory's diagnosis world as the current world"""
    valuation = diagnosis_valuation(theory)
    if SYSTEM_NOMINAL in model.valuation(model.current):
        candidate = with_hypothesis(model, NEW, add=valuation,
                                    new_edges=[(model.current, NEW), (NEW, NEW)], new_current=NEW)
    else:
        stale = model.valuation(model.current) - valuation
        candidate = with_hypothesis(model, model.current, add=valuation, remove=stale,
                                    new_edges=[(model.current, model.current)])
    diagnosis_world = candidate.current
    for effect in theory.effects:
        candidate = with_hypothesis(candidate, NEW, add=consequence_valuation(effect),
                                    new_edges=[(diagnosis_world, NEW), (NEW, NEW)])
    return candidate


def _connectivity_pairs(theory: CausalTheory, knowledge: PhysicalKnowledgeAgent) -> List[Tuple[str, str]]:
    roots = knowledge.components_for(theory.root_cause)
    effects = sorted({knowledge.owner(e.pv) for e in theory.effect_evidence})
    for effect in theory.effects:
        if not any(e.proposition == effect for e in theory.effect_evidence):
            effects = sorted(set(effects) | set(knowledge.components_for(effect)))
    return [(a, b) for a in roots for b in effects]


def _violations(result: ValidationResult) -> List[List[str]]:
    return [[label, world] for label, world in result.violations]


def reason_tick(state: ReasonerState, tick: int, incoming: Sequence[FaultReport], axioms: AxiomSet,
                topo: TopologyGraph, theorizer: Theorizer) -> Tuple[ReasonerState, List[TraceEvent]]:
    """One pass of perceive, theorize, formalize, validate; never raises on a bad theory"""
    events: List[TraceEvent] = []
    reports = list(state.reports)
    known = set(state.report_keys)
    fresh = False
    for report in sorted(incoming, key=lambda r: (r.agent, r.pv)):
        is_new = report.key not in known
        events.append(TraceEvent(tick, TraceKind.REPORT_RECEIVED, {**report.to_dict(), "new": is_new}))
        if is_new:
            known.add(report.key)
            reports.append(report)
            fresh = True
    state = replace(state, reports=tuple(reports))
    if not fresh:
        return state, events

    def reject(reason: str, **details) -> Tuple[ReasonerState, List[TraceEvent]]:
        events.append(TraceEvent(tick, TraceKind.REJECT, {"reason": reason, **details}))
        logger.warning(f"Tick {tick}: theory rejected ({reason})")
        return state, events

    try:
        theory = theorizer.theorize(state.reports, topo)
    except HypothesisError as e:
        return reject("theorize_failed", error=str(e))
    events.append(TraceEvent(tick, TraceKind.THEORY_PROPOSED, theory.to_dict()))

    incumbent = state.theory
    if incumbent is not None and (theory.same_claim(incumbent) or theory.coverage <= incumbent.coverage):
        events.append(TraceEvent(tick, TraceKind.THEORY_RETAINED, {
            "root_cause": str(incumbent.root_cause),
            "incumbent_coverage": incumbent.coverage,
            "candidate_coverage": theory.coverage,
        }))
        return state, events

    try:
        candidate = formalize(state.model, theory)
    except KripkeError as e:
        return reject("formalization_failed", error=str(e))

    check = check_axioms(candidate, axioms)
    events.append(TraceEvent(tick, TraceKind.AXIOM_CHECK, {
        "ok": check.ok, "labels": axioms.labels, "violations": _violations(check),
    }))
    if not check.ok:
        return reject("axiom_violation", violated=check.violated_labels)

    knowledge = PhysicalKnowledgeAgent(topo)
    try:
        pairs = _connectivity_pairs(theory, knowledge)
    except UnknownComponentError as e:
        return reject("unknown_component", error=str(e))
    for a, b in pairs:
        answer = knowledge.query(a, b)
        events.append(TraceEvent(tick, TraceKind.CONNECTIVITY_QUERY, {
            "from": a, "to": b, "connected": answer.connected, "path": [e.to_list() for e in answer.path],
        }))
        if not answer.connected:
            return reject("not_connected", components=[a, b])

    adopted = commit(state.model, candidate, axioms)
    if isinstance(adopted, ValidationResult):
        return reject("axiom_violation", violated=adopted.violated_labels)
    events.append(TraceEvent(tick, TraceKind.COMMIT, {
        "current": adopted.current, "root_cause": str(theory.root_cause),
        "valuation": sorted(adopted.valuation(adopted.current)),
    }))
    logger.info(f"Tick {tick}: committed {theory.root_cause} in world {adopted.current}")

    pruned = prune_worlds(adopted, [adopted.current])
    if is_reflexive(pruned) and check_axioms(pruned, axioms).ok:
        removed = sorted(adopted.world_ids - pruned.world_ids)
        events.append(TraceEvent(tick, TraceKind.PRUNE, {"kept": [pruned.current], "removed": removed}))
        logger.info(f"Tick {tick}: pruned {len(removed)} world(s), kept {pruned.current}")
        adopted = pruned
    return ReasonerState(adopted, state.reports, theory), events


class ReasoningAgent:
    """Holds the committed belief model and runs reason_tick on incoming reports"""

    def __init__(self, axioms: AxiomSet, topology: TopologyGraph, theorizer: Theorizer,
                 model: Optional[KripkeModel] = None):
        self.axioms = axioms
        self.topology = topology
        self.theorizer = theorizer
        self.state = ReasonerState(model or nominal_model())
        self.trace: List[TraceEvent] = []

    def receive(self, tick: int, reports: Sequence[FaultReport]) -> List[TraceEvent]:
        self.state, events = reason_tick(self.state, tick, reports, self.axioms, self.topology, self.theorizer)
        self.trace.extend(events)
        return events


# Episodes
@dataclass(frozen=True)
class Diagnosis:
    scenario_id: str
    seed: int
    root_cause: Optional[Proposition]
    theory: Optional[CausalTheory]
    final_model: KripkeModel
    trace: Tuple[TraceEvent, ...]
    records: Tuple[TickRecord, ...] = field(default=(), compare=False, repr=False)

    @property
    def committed(self) -> bool:
        return self.root_cause is not None

    def events(self, kind: TraceKind) -> List[TraceEvent]:
        return [e for e in self.trace if e.kind is kind]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scenario": self.scenario_id,
            "seed": self.seed,
            "committed": self.committed,
            "root_cause": None if self.root_cause is None else str(self.root_cause),
            "theory": None if self.theory is None else self.theory.to_dict(),
            "final_model": model_to_dict(self.final_model),
            "trace": [e.to_dict() for e in self.trace],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def create_monitoring_agents(spec: ScenarioSpec, classifier: Classifier,
                             thresholds: Mapping[str, Mapping[str, float]] = DEFAULT_THRESHOLDS
                             ) -> List[MonitoringAgent]:
    baselines = spec.baselines()
    agents = []
    for agent_id in sorted(thresholds):
        watched = dict(thresholds[agent_id])
        missing = sorted(set(watched) - set(baselines))
        if missing:
            raise ConfigurationError(f"{agent_id} watches PVs missing from scenario {spec.id}: {missing}")
        cfg = MonitorConfig(agent_id, watched, {pv: baselines[pv] for pv in watched})
        agents.append(MonitoringAgent(cfg, classifier))
    return agents


@dataclass
class SystemConfig:
    axioms: AxiomSet
    topology: TopologyGraph
    classifier: Classifier
    theorizer: Theorizer
    thresholds: Mapping[str, Mapping[str, float]] = field(default_factory=lambda: DEFAULT_THRESHOLDS)


class AcceleratorSectorDiagnostics:
    """Main multi-agent diagnostic system for one accelerator sector"""

    def __init__(self, config: SystemConfig):
        self.config = config
        self.agents: Dict[str, MonitoringAgent] = {}
        unowned = sorted(pv for watched in config.thresholds.values() for pv in watched
                         if pv not in config.topology.pv_owner)
        if unowned:
            raise ConfigurationError(f"Watched PVs without an owning component: {unowned}")
        initial = check_axioms(nominal_model(), config.axioms)
        if not initial.ok:
            raise ConfigurationError(f"Axioms reject the nominal model: {initial.violated_labels}")

    def check_scenario(self, spec: ScenarioSpec) -> List[MonitoringAgent]:
        """Monitors for `spec`; raises ConfigurationError before any tick runs"""
        return create_monitoring_agents(spec, self.config.classifier, self.config.thresholds)

    def run_episode(self, spec: ScenarioSpec) -> Diagnosis:
        """Simulate the scenario; per tick: simulator, monitors (by agent id), reasoner"""
        monitors = self.check_scenario(spec)
        reasoner = ReasoningAgent(self.config.axioms, self.config.topology, self.config.theorizer)
        self.agents = {m.agent_id: m for m in monitors}
        logger.info(f"Starting episode {spec.id} (seed {spec.seed}, {spec.duration_ticks} ticks)")

        sim = initial_state(spec)
        records = []
        while not sim.finished:
            sim, record = step(sim)
            records.append(record)
            reports = [report for monitor in monitors for report in monitor.observe(record)]
            reasoner.receive(record.tick, reports)

        theory = reasoner.state.theory
        diagnosis = Diagnosis(
            scenario_id=spec.id,
            seed=spec.seed,
            root_cause=None if theory is None else theory.root_cause,
            theory=theory,
            final_model=reasoner.state.model,
            trace=tuple(reasoner.trace),
            records=tuple(records),
        )
        logger.info(f"Episode {spec.id} finished: root cause {diagnosis.root_cause}, "
                    f"{len(diagnosis.final_model.worlds)} world(s) in the final model")
        return diagnosis

    def get_agent_by_name(self, agent_name: str) -> Optional[MonitoringAgent]:
        return self.agents.get(agent_name)


def run_episode(spec: ScenarioSpec, config: SystemConfig) -> Diagnosis:
    return AcceleratorSectorDiagnostics(config).run_episode(spec)
