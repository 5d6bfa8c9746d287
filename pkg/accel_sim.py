"""
KripkeGuard - Accelerator Sector Simulator
Deterministic discrete-tick simulation of coupled process variables (PVs)
with fault injection and uniform sensor noise.

Plant relationships are linear; there is no beam dynamics.
"""

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Annotated, Dict, List, Mapping, Tuple, Union

import networkx as nx
import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, StringConstraints, ValidationError, model_validator

logger = logging.getLogger(__name__)

_DEVIATION_EPSILON = 1e-12


class SimulationError(Exception):
    """Base class for simulator errors"""


class ScenarioError(SimulationError):
    """Scenario spec that cannot be loaded or run"""


class UnknownScenarioError(ScenarioError):
    pass


# Scenario spec (also the JSON scenario file schema)
PvId = Annotated[str, StringConstraints(pattern=r"^[^:\s]+:[^:\s]+$")]


class CouplingMode(str, Enum):
    INSTANT = "instant"
    RAMP = "ramp"


class FaultKind(str, Enum):
    STUCK = "stuck"
    STEP = "step"


class PvSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    id: PvId
    baseline: float
    noise_amplitude: float = Field(ge=0.0)
    units: str = ""

    @property
    def subsystem(self) -> str:
        return self.id.split(":", 1)[0]


class CouplingRule(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    source: PvId
    target: PvId
    gain: float = 0.0
    delay_ticks: int = Field(default=0, ge=0)
    mode: CouplingMode = CouplingMode.INSTANT
    ramp_rate: float = 0.0

    @model_validator(mode="after")
    def _check_mode(self) -> "CouplingRule":
        if self.mode is CouplingMode.RAMP and self.ramp_rate == 0:
            raise ValueError("ramp couplings need a non-zero ramp_rate")
        if self.source == self.target:
            raise ValueError(f"{self.source} cannot couple to itself")
        return self


class FaultSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    tick: int = Field(ge=0)
    target: PvId
    kind: FaultKind
    # stuck: the absolute value the PV is pinned to; step: the offset added once
    magnitude: float


class ScenarioSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    id: str
    duration_ticks: int = Field(gt=0)
    pvs: Tuple[PvSpec, ...]
    couplings: Tuple[CouplingRule, ...] = ()
    faults: Tuple[FaultSpec, ...] = ()
    seed: int = Field(default=42, ge=0, le=2**64 - 1)
    description: str = ""

    @model_validator(mode="after")
    def _check_references(self) -> "ScenarioSpec":
        ids = [pv.id for pv in self.pvs]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate PV ids")
        known = set(ids)
        for rule in self.couplings:
            for pv_id in (rule.source, rule.target):
                if pv_id not in known:
                    raise ValueError(f"coupling references unknown PV {pv_id}")
        for fault in self.faults:
            if fault.target not in known:
                raise ValueError(f"fault targets unknown PV {fault.target}")
            if fault.tick >= self.duration_ticks:
                raise ValueError(f"fault at tick {fault.tick} is outside the {self.duration_ticks}-tick run")
        if not nx.is_directed_acyclic_graph(self.coupling_graph()):
            cycle = nx.find_cycle(self.coupling_graph())
            raise ValueError(f"coupling graph has a cycle: {cycle}")
        return self

    def coupling_graph(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(sorted(pv.id for pv in self.pvs))
        graph.add_edges_from(sorted((r.source, r.target) for r in self.couplings))
        return graph

    def evaluation_order(self) -> List[str]:
        return list(nx.lexicographical_topological_sort(self.coupling_graph()))

    @property
    def pv_ids(self) -> List[str]:
        return sorted(pv.id for pv in self.pvs)

    def pv(self, pv_id: str) -> PvSpec:
        for pv in self.pvs:
            if pv.id == pv_id:
                return pv
        raise ScenarioError(f"Scenario {self.id} has no PV {pv_id}")

    def baselines(self) -> Dict[str, float]:
        return {pv.id: pv.baseline for pv in self.pvs}

    def couplings_into(self, pv_id: str, mode: CouplingMode) -> List[CouplingRule]:
        return [r for r in self.couplings if r.target == pv_id and r.mode is mode]

    def faults_at(self, tick: int) -> List[FaultSpec]:
        return [f for f in self.faults if f.tick == tick]


def with_seed(spec: ScenarioSpec, seed: int) -> ScenarioSpec:
    return ScenarioSpec.model_validate({**spec.model_dump(), "seed": seed})


def dump_scenario(spec: ScenarioSpec) -> str:
    return json.dumps(spec.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"


def load_scenario(path: Union[str, Path]) -> ScenarioSpec:
    path = Path(path)
    try:
        return ScenarioSpec.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ScenarioError(f"Cannot read scenario file {path}: {e}") from e
    except ValidationError as e:
        raise ScenarioError(f"Invalid scenario file {path}: {e.error_count()} error(s): {e.errors()[0]['msg']}") from e


# Built-in scenarios
COOLING_VALVE = "COOL:valve_position"
COOLING_PRESSURE = "COOL:supply_pressure"
CAVITY_TEMP = "RF:cavity_temp"
KLYSTRON_OUTPUT = "RF:klystron_output"
FORWARD_POWER = "RF:forward_power"
VACUUM_PRESSURE = "VAC:pressure"

SECTOR_PVS = (
    PvSpec(id=COOLING_VALVE, baseline=80.0, noise_amplitude=0.5, units="%"),
    PvSpec(id=COOLING_PRESSURE, baseline=4.0, noise_amplitude=0.02, units="bar"),
    PvSpec(id=CAVITY_TEMP, baseline=35.0, noise_amplitude=0.1, units="degC"),
    PvSpec(id=KLYSTRON_OUTPUT, baseline=5.0, noise_amplitude=0.05, units="MW"),
    PvSpec(id=FORWARD_POWER, baseline=4.5, noise_amplitude=0.05, units="MW"),
    PvSpec(id=VACUUM_PRESSURE, baseline=2.0, noise_amplitude=0.05, units="nTorr"),
)

SECTOR_COUPLINGS = (
    CouplingRule(source=COOLING_VALVE, target=COOLING_PRESSURE, gain=0.025, mode=CouplingMode.INSTANT),
    # thermal inertia: the cavity heats linearly while coolant flow is off nominal
    CouplingRule(source=COOLING_VALVE, target=CAVITY_TEMP, mode=CouplingMode.RAMP, ramp_rate=1.5),
    CouplingRule(source=KLYSTRON_OUTPUT, target=FORWARD_POWER, gain=0.9, mode=CouplingMode.INSTANT),
)

SECTOR_DURATION = 10

KLYSTRON_PARTIAL_FAILURE = FaultSpec(tick=3, target=KLYSTRON_OUTPUT, kind=FaultKind.STEP, magnitude=-2.0)

BUILTIN_SCENARIOS: Dict[str, ScenarioSpec] = {
    "cascading_cooling": ScenarioSpec(
        id="cascading_cooling",
        description="Primary cooling valve sticks; the RF cavity overheats a tick later.",
        duration_ticks=SECTOR_DURATION,
        pvs=SECTOR_PVS,
        couplings=SECTOR_COUPLINGS,
        faults=(FaultSpec(tick=3, target=COOLING_VALVE, kind=FaultKind.STUCK, magnitude=20.0),),
    ),
    "direct_klystron": ScenarioSpec(
        id="direct_klystron",
        description="Klystron partial failure drops the forward RF power in the same tick.",
        duration_ticks=SECTOR_DURATION,
        pvs=SECTOR_PVS,
        couplings=SECTOR_COUPLINGS,
        faults=(KLYSTRON_PARTIAL_FAILURE,),
    ),
    "confounded_klystron": ScenarioSpec(
        id="confounded_klystron",
        description="Klystron failure plus an unrelated small vacuum pressure rise one tick later.",
        duration_ticks=SECTOR_DURATION,
        pvs=SECTOR_PVS,
        couplings=SECTOR_COUPLINGS,
        faults=(
            KLYSTRON_PARTIAL_FAILURE,
            FaultSpec(tick=4, target=VACUUM_PRESSURE, kind=FaultKind.STEP, magnitude=0.4),
        ),
    ),
}


def builtin_scenario(scenario_id: str) -> ScenarioSpec:
    try:
        return BUILTIN_SCENARIOS[scenario_id]
    except KeyError:
        raise UnknownScenarioError(
            f"Unknown scenario {scenario_id!r}; expected one of {sorted(BUILTIN_SCENARIOS)}"
        ) from None


# Simulation
@dataclass(frozen=True)
class TickRecord:
    tick: int
    values: Mapping[str, float]
    truth: Mapping[str, float]

    def __post_init__(self):
        if set(self.values) != set(self.truth):
            raise SimulationError(f"Tick {self.tick}: observed and truth PV sets differ")


def noise_stream(seed: int, pv_id: str) -> np.random.Generator:
    """Independent PCG64 stream per PV, keyed by (seed, PV id)"""
    digest = hashlib.sha256(f"{seed}:{pv_id}".encode("utf-8")).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "big")))


@dataclass
class SimState:
    spec: ScenarioSpec
    tick: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)
    step_offsets: Dict[str, float] = field(default_factory=dict)
    ramp_levels: Dict[str, float] = field(default_factory=dict)
    stuck: Dict[str, float] = field(default_factory=dict)
    streams: Dict[str, np.random.Generator] = field(default_factory=dict)

    def snapshot(self) -> "SimState":
        return SimState(
            spec=self.spec,
            tick=self.tick,
            history=[dict(row) for row in self.history],
            step_offsets=dict(self.step_offsets),
            ramp_levels=dict(self.ramp_levels),
            stuck=dict(self.stuck),
            streams={pv: copy.deepcopy(rng) for pv, rng in self.streams.items()},
        )

    @property
    def finished(self) -> bool:
        return self.tick >= self.spec.duration_ticks


def initial_state(spec: ScenarioSpec) -> SimState:
    return SimState(
        spec=spec,
        step_offsets={pv: 0.0 for pv in spec.pv_ids},
        ramp_levels={pv: 0.0 for pv in spec.pv_ids},
        streams={pv: noise_stream(spec.seed, pv) for pv in spec.pv_ids},
    )


def _source_value(state: SimState, current: Dict[str, float], rule: CouplingRule, tick: int) -> float:
    lagged = tick - rule.delay_ticks
    if lagged < 0:
        return state.spec.pv(rule.source).baseline
    if lagged == tick:
        return current[rule.source]
    return state.history[lagged][rule.source]


def step(state: SimState) -> Tuple[SimState, TickRecord]:
    """Advance one tick: faults, coupling propagation, then noise"""
    spec = state.spec
    if state.finished:
        raise SimulationError(f"Scenario {spec.id} already finished at tick {state.tick}")

    nxt = state.snapshot()
    tick = nxt.tick

    for fault in spec.faults_at(tick):
        if fault.kind is FaultKind.STUCK:
            nxt.stuck[fault.target] = fault.magnitude
        else:
            nxt.step_offsets[fault.target] += fault.magnitude
        logger.debug(f"[{spec.id}] tick {tick}: {fault.kind.value} fault on {fault.target} ({fault.magnitude:+g})")

    truth: Dict[str, float] = {}
    for pv_id in spec.evaluation_order():
        pv = spec.pv(pv_id)
        for rule in spec.couplings_into(pv_id, CouplingMode.RAMP):
            source = _source_value(nxt, truth, rule, tick)
            if abs(source - spec.pv(rule.source).baseline) > _DEVIATION_EPSILON:
                nxt.ramp_levels[pv_id] += rule.ramp_rate
        if pv_id in nxt.stuck:
            truth[pv_id] = nxt.stuck[pv_id]
            continue
        value = pv.baseline + nxt.step_offsets[pv_id] + nxt.ramp_levels[pv_id]
        for rule in spec.couplings_into(pv_id, CouplingMode.INSTANT):
            source = _source_value(nxt, truth, rule, tick)
            value += rule.gain * (source - spec.pv(rule.source).baseline)
        truth[pv_id] = value

    observed = {}
    for pv_id in spec.pv_ids:
        amplitude = spec.pv(pv_id).noise_amplitude
        observed[pv_id] = truth[pv_id] + float(nxt.streams[pv_id].uniform(-amplitude, amplitude))

    nxt.history.append(truth)
    nxt.tick += 1
    return nxt, TickRecord(tick=tick, values=observed, truth=dict(truth))


def run_scenario(spec: ScenarioSpec) -> List[TickRecord]:
    state = initial_state(spec)
    records = []
    while not state.finished:
        state, record = step(state)
        records.append(record)
    logger.info(f"Simulated {spec.id} for {len(records)} ticks (seed {spec.seed})")
    return records


# Export
def records_to_frame(records: List[TickRecord], column: str = "values") -> pd.DataFrame:
    rows = [{"tick": r.tick, **getattr(r, column)} for r in records]
    pv_ids = sorted(records[0].values) if records else []
    return pd.DataFrame(rows, columns=["tick"] + pv_ids)


def write_timeseries_csv(records: List[TickRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    records_to_frame(records).to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return path

