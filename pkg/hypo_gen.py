"""
KripkeGuard - Hypothesis Generation
Anomaly classification and causal theorizing, either from deterministic
rule tables or from a remote language model constrained to a closed
JSON vocabulary (with rule-based fallback).
"""

import json
import logging
import re
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from string import Template
from typing import TYPE_CHECKING, Any, Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

import requests
from pydantic import BaseModel, ValidationError, field_validator

from modal_kernel import Proposition

if TYPE_CHECKING:
    from diagnostic_agents import FaultReport
    from settings import Settings

logger = logging.getLogger(__name__)


# Errors
class HypothesisError(Exception):
    """Base class for hypothesis generation errors"""


class UnclassifiableAnomalyError(HypothesisError):
    pass


class EmptyReportsError(HypothesisError):
    pass


class GeneratorConfigError(HypothesisError):
    pass


class LMTransportError(HypothesisError):
    pass


class LMResponseError(HypothesisError):
    def __init__(self, message: str, raw: Optional[str] = None):
        super().__init__(message)
        self.raw = raw


class MalformedResponseError(LMResponseError):
    pass


class MissingKeyError(LMResponseError):
    pass


class OutOfVocabularyError(LMResponseError):
    pass


class InvalidTheoryError(LMResponseError):
    pass


# Vocabulary
class SuspectedSystem(str, Enum):
    COOLING = "Cooling"
    POWER = "Power"
    VACUUM = "Vacuum"
    KLYSTRON = "Klystron"


class GenerationSource(str, Enum):
    RULE = "rule"
    REMOTE = "remote"
    RULE_FALLBACK = "rule_fallback"


class Direction(str, Enum):
    ABOVE = "above"
    BELOW = "below"


SYSTEM_NOMINAL = Proposition("system_nominal")
COOLING_FAULT = Proposition("cooling_fault_reported")
KLYSTRON_FAULT = Proposition("klystron_fault_reported")
RF_POWER_FAULT = Proposition("rf_power_fault_reported")
VACUUM_FAULT = Proposition("vacuum_fault_reported")
RF_OVERHEAT = Proposition("rf_overheat_reported")
RF_ROOT_CAUSE = Proposition("rf_fault_is_root_cause")
COOLING_INSUFFICIENT = Proposition("cooling_insufficient")
RF_OVERHEATS = Proposition("RF_overheats")
KLYSTRON_DAMAGED = Proposition("klystron_damaged")
RF_POWER_LOW = Proposition("rf_power_low")
VACUUM_DEGRADED = Proposition("vacuum_degraded")

# Propositions a causal theory may name
REPORT_PROPOSITIONS = frozenset({COOLING_FAULT, KLYSTRON_FAULT, RF_POWER_FAULT, VACUUM_FAULT, RF_OVERHEAT})
RF_SYMPTOMS = frozenset({KLYSTRON_FAULT, RF_POWER_FAULT, RF_OVERHEAT})

VOCABULARY = frozenset({
    SYSTEM_NOMINAL, RF_ROOT_CAUSE,
    COOLING_INSUFFICIENT, RF_OVERHEATS, KLYSTRON_DAMAGED, RF_POWER_LOW, VACUUM_DEGRADED,
}) | REPORT_PROPOSITIONS

# What each PV going off nominal is evidence of
SYMPTOM_BY_PV = {
    "COOL:valve_position": COOLING_FAULT,
    "COOL:supply_pressure": COOLING_FAULT,
    "RF:cavity_temp": RF_OVERHEAT,
    "RF:klystron_output": KLYSTRON_FAULT,
    "RF:forward_power": RF_POWER_FAULT,
    "VAC:pressure": VACUUM_FAULT,
}


def symptom_of(pv: str) -> Optional[Proposition]:
    return SYMPTOM_BY_PV.get(pv)


# Data models
@dataclass(frozen=True)
class AnomalyContext:
    pv: str
    tick: int
    observed: float
    baseline: float
    deviation: float
    direction: Direction

    def __post_init__(self):
        if self.deviation == 0:
            raise ValueError(f"{self.pv}: an anomaly needs a non-zero deviation")
        expected = Direction.ABOVE if self.deviation > 0 else Direction.BELOW
        if Direction(self.direction) is not expected:
            raise ValueError(f"{self.pv}: direction {self.direction} contradicts deviation {self.deviation:+g}")
        object.__setattr__(self, "direction", expected)

    @classmethod
    def from_reading(cls, pv: str, tick: int, observed: float, baseline: float) -> "AnomalyContext":
        delta = observed - baseline
        return cls(pv, tick, observed, baseline, delta, Direction.ABOVE if delta > 0 else Direction.BELOW)

    @property
    def subsystem(self) -> str:
        return self.pv.split(":", 1)[0]

    @property
    def signal(self) -> str:
        return self.pv.split(":", 1)[1]

    def to_prompt_dict(self) -> Dict[str, Any]:
        return {
            "pv": self.pv,
            "tick": self.tick,
            "observed": round(self.observed, 6),
            "baseline": round(self.baseline, 6),
            "deviation": round(self.deviation, 6),
            "direction": self.direction.value,
        }


@dataclass(frozen=True)
class Classification:
    suspected_system: SuspectedSystem
    source: GenerationSource = GenerationSource.RULE
    raw_response: Optional[str] = None

    def __post_init__(self):
        # Enum lookup is case-sensitive and closed over the four systems
        object.__setattr__(self, "suspected_system", SuspectedSystem(self.suspected_system))
        object.__setattr__(self, "source", GenerationSource(self.source))


@dataclass(frozen=True)
class EvidenceRef:
    agent: str
    pv: str
    tick: int
    proposition: Proposition
    role: str  # "root" or "effect"

    def to_dict(self) -> Dict[str, Any]:
        return {"agent": self.agent, "pv": self.pv, "tick": self.tick,
                "proposition": str(self.proposition), "role": self.role}


@dataclass(frozen=True)
class CausalTheory:
    root_cause: Proposition
    effects: Tuple[Proposition, ...] = ()
    narrative: str = ""
    evidence: Tuple[EvidenceRef, ...] = ()
    source: GenerationSource = GenerationSource.RULE

    def __post_init__(self):
        object.__setattr__(self, "root_cause", Proposition(self.root_cause))
        object.__setattr__(self, "effects", tuple(Proposition(e) for e in self.effects))
        object.__setattr__(self, "evidence", tuple(self.evidence))
        unknown = ({self.root_cause} | set(self.effects)) - VOCABULARY
        if unknown:
            raise ValueError(f"Theory uses propositions outside the vocabulary: {sorted(unknown)}")
        if self.root_cause in self.effects:
            raise ValueError(f"Root cause {self.root_cause} cannot also be an effect")
        if len(set(self.effects)) != len(self.effects):
            raise ValueError("Theory effects must be distinct")

    @property
    def coverage(self) -> int:
        """Distinct (agent, PV) reports the theory explains"""
        return len({(e.agent, e.pv) for e in self.evidence})

    @property
    def effect_evidence(self) -> List[EvidenceRef]:
        return [e for e in self.evidence if e.role == "effect"]

    def same_claim(self, other: Optional["CausalTheory"]) -> bool:
        return other is not None and self.root_cause == other.root_cause and self.effects == other.effects

    def to_dict(self) -> Dict[str, Any]:
        return {
            "root_cause": str(self.root_cause),
            "effects": [str(e) for e in self.effects],
            "narrative": self.narrative,
            "coverage": self.coverage,
            "source": self.source.value,
            "evidence": [e.to_dict() for e in self.evidence],
        }


def gather_evidence(root: str, effects: Sequence[str], reports: Iterable["FaultReport"]) -> Tuple[EvidenceRef, ...]:
    """Tag each report the theory explains as root or effect evidence"""
    effects = set(effects)
    evidence = []
    for report in sorted(reports, key=lambda r: (r.tick, r.agent, r.pv)):
        symptom = symptom_of(report.pv)
        if symptom in effects:
            evidence.append(EvidenceRef(report.agent, report.pv, report.tick, symptom, "effect"))
        elif report.proposition == root or symptom == root:
            evidence.append(EvidenceRef(report.agent, report.pv, report.tick, Proposition(root), "root"))
    return tuple(evidence)


# Interfaces
class Classifier(Protocol):
    def classify(self, ctx: AnomalyContext) -> Classification: ...


class Theorizer(Protocol):
    def theorize(self, reports: Sequence["FaultReport"], topology_hint: Optional[Any] = None) -> CausalTheory: ...


# Rule-based implementations
@dataclass(frozen=True)
class ClassificationRule:
    subsystem: str
    signal: Optional[str]
    direction: Optional[Direction]
    system: SuspectedSystem

    def matches(self, ctx: AnomalyContext) -> bool:
        return (ctx.subsystem == self.subsystem
                and (self.signal is None or ctx.signal == self.signal)
                and (self.direction is None or ctx.direction is self.direction))


CLASSIFICATION_RULES = (
    ClassificationRule("COOL", None, None, SuspectedSystem.COOLING),
    ClassificationRule("RF", "klystron_output", None, SuspectedSystem.KLYSTRON),
    ClassificationRule("RF", "forward_power", None, SuspectedSystem.POWER),
    # an overheating cavity points at lost cooling
    ClassificationRule("RF", "cavity_temp", Direction.ABOVE, SuspectedSystem.COOLING),
    ClassificationRule("VAC", "pressure", None, SuspectedSystem.VACUUM),
)


class RuleClassifier:
    """Deterministic table lookup on (subsystem, signal, direction)"""

    def __init__(self, rules: Sequence[ClassificationRule] = CLASSIFICATION_RULES):
        self.rules = tuple(rules)

    def classify(self, ctx: AnomalyContext) -> Classification:
        for rule in self.rules:
            if rule.matches(ctx):
                return Classification(rule.system, GenerationSource.RULE)
        raise UnclassifiableAnomalyError(f"No classification rule for {ctx.pv} ({ctx.direction.value})")


@dataclass(frozen=True)
class CausalRule:
    """A root report class that explains an effect report class from another agent"""

    name: str
    root_system: SuspectedSystem
    root_subsystem: str
    effect_system: SuspectedSystem
    effect_pv: Optional[str]
    effect_proposition: Proposition

    def matches_root(self, report: "FaultReport") -> bool:
        return (report.classification.suspected_system is self.root_system
                and report.pv.split(":", 1)[0] == self.root_subsystem)

    def matches_effect(self, report: "FaultReport") -> bool:
        return (report.classification.suspected_system is self.effect_system
                and (self.effect_pv is None or report.pv == self.effect_pv))


# Precedence order matters: the first rule with both a root and an effect wins.
CAUSAL_RULES = (
    CausalRule("klystron_drives_forward_power", SuspectedSystem.KLYSTRON, "RF",
               SuspectedSystem.POWER, None, RF_POWER_FAULT),
    CausalRule("cooling_loss_overheats_cavity", SuspectedSystem.COOLING, "COOL",
               SuspectedSystem.COOLING, "RF:cavity_temp", RF_OVERHEAT),
)


class RuleTheorizer:
    """Deterministic causal precedence over the accumulated reports"""

    def __init__(self, rules: Sequence[CausalRule] = CAUSAL_RULES):
        self.rules = tuple(rules)

    def theorize(self, reports: Sequence["FaultReport"], topology_hint: Optional[Any] = None) -> CausalTheory:
        if not reports:
            raise EmptyReportsError("Cannot theorize without reports")
        ordered = sorted(reports, key=lambda r: (r.tick, r.agent, r.pv))

        for rule in self.rules:
            roots = [r for r in ordered if rule.matches_root(r)]
            root_agents = {r.agent for r in roots}
            effects = [r for r in ordered
                       if rule.matches_effect(r) and not rule.matches_root(r) and root_agents - {r.agent}]
            if roots and effects:
                root = roots[0].proposition
                narrative = (f"{rule.name}: {roots[0].agent} reported {root} at tick {roots[0].tick}; "
                             f"{effects[0].agent} saw {rule.effect_proposition} on {effects[0].pv} "
                             f"at tick {effects[0].tick}")
                return CausalTheory(root, (rule.effect_proposition,), narrative,
                                    gather_evidence(root, [rule.effect_proposition], ordered))

        # Vacuum reports only lead when nothing else was reported
        candidates = [r for r in ordered if r.classification.suspected_system is not SuspectedSystem.VACUUM]
        lead = (candidates or ordered)[0]
        narrative = f"single report: {lead.agent} reported {lead.proposition} at tick {lead.tick}"
        return CausalTheory(lead.proposition, (), narrative, gather_evidence(lead.proposition, [], ordered))


# Remote implementations
_FENCE_RE = re.compile(r"^```[A-Za-z0-9_-]*\s*\n?(.*?)\n?\s*```$", re.DOTALL)


def _unwrap(text: str) -> str:
    stripped = text.strip()
    m = _FENCE_RE.match(stripped)
    return m.group(1).strip() if m else stripped


def _load_object(text: str) -> Dict[str, Any]:
    try:
        data = json.loads(_unwrap(text))
    except (json.JSONDecodeError, TypeError) as e:
        raise MalformedResponseError(f"Response is not valid JSON: {e}", text) from e
    if not isinstance(data, dict):
        raise MalformedResponseError(f"Response must be a JSON object, got {type(data).__name__}", text)
    return data


def parse_lm_response(text: str) -> Classification:
    """Closed-vocabulary classification reply: {"suspected_system": ...}"""
    data = _load_object(text)
    if "suspected_system" not in data:
        raise MissingKeyError("Response has no 'suspected_system' key", text)
    value = data["suspected_system"]
    try:
        system = SuspectedSystem(value)
    except ValueError:
        raise OutOfVocabularyError(
            f"suspected_system {value!r} is not one of {[s.value for s in SuspectedSystem]}", text
        ) from None
    return Classification(system, GenerationSource.REMOTE, text)


class TheoryReply(BaseModel):
    root_cause: str
    effects: List[str] = []

    @field_validator("root_cause")
    @classmethod
    def _root_in_vocabulary(cls, value: str) -> str:
        if value not in REPORT_PROPOSITIONS:
            raise ValueError(f"{value!r} is not a report proposition")
        return value

    @field_validator("effects")
    @classmethod
    def _effects_in_vocabulary(cls, value: List[str]) -> List[str]:
        unknown = [v for v in value if v not in REPORT_PROPOSITIONS]
        if unknown:
            raise ValueError(f"{unknown} are not report propositions")
        return value


def parse_theory_response(text: str) -> Tuple[Proposition, Tuple[Proposition, ...]]:
    data = _load_object(text)
    try:
        reply = TheoryReply.model_validate(data)
    except ValidationError as e:
        error = e.errors()[0]
        if error["type"] == "missing":
            raise MissingKeyError(f"Response has no {error['loc'][0]!r} key", text) from e
        raise OutOfVocabularyError(f"Invalid theory reply: {error['msg']}", text) from e
    effects = tuple(dict.fromkeys(Proposition(e) for e in reply.effects))
    if reply.root_cause in effects:
        raise InvalidTheoryError(f"Root cause {reply.root_cause} is listed as its own effect", text)
    return Proposition(reply.root_cause), effects


def load_prompt(name: str, prompts_dir: Optional[Path] = None) -> str:
    if prompts_dir is None:
        from settings import get_settings
        prompts_dir = get_settings().prompts_dir
    return (Path(prompts_dir) / name).read_text(encoding="utf-8")


class ChatCompletionClient:
    """Blocking client for a chat-completions style JSON endpoint"""

    def __init__(self, endpoint_url: str, api_key: Optional[str] = None, model_id: str = "default",
                 timeout_s: float = 10.0, session: Optional[requests.Session] = None):
        self.endpoint_url = endpoint_url
        self.api_key = api_key
        self.model_id = model_id
        self.timeout_s = timeout_s
        self.session = session or requests.Session()

    def complete(self, system_prompt: str, user_message: str) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model_id,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system_prompt},
                {"role": "user", "content": user_message},
            ],
        }
        try:
            response = self.session.post(self.endpoint_url, json=payload, headers=headers, timeout=self.timeout_s)
            response.raise_for_status()
            return response.json()["choices"][0]["message"]["content"]
        except requests.RequestException as e:
            raise LMTransportError(f"Request to {self.endpoint_url} failed: {e}") from e
        except (KeyError, IndexError, TypeError, ValueError) as e:
            raise LMTransportError(f"Unexpected reply shape from {self.endpoint_url}: {e}") from e


class RemoteClassifier:
    def __init__(self, client: ChatCompletionClient, prompt: str, max_retries: int = 2,
                 fallback: Optional[Classifier] = None):
        self.client = client
        self.prompt = prompt
        self.max_retries = max_retries
        self.fallback = fallback or RuleClassifier()

    def classify(self, ctx: AnomalyContext) -> Classification:
        message = json.dumps(ctx.to_prompt_dict(), sort_keys=True)
        raw = None
        attempts = self.max_retries + 1
        for attempt in range(1, attempts + 1):
            raw = None
            try:
                raw = self.client.complete(self.prompt, message)
                return parse_lm_response(raw)
            except (LMResponseError, LMTransportError) as e:
                logger.warning(f"Remote classification of {ctx.pv} failed on attempt {attempt}/{attempts} "
                               f"({type(e).__name__}): {e}; raw={raw!r}")
        logger.warning(f"Falling back to rule classification for {ctx.pv} at tick {ctx.tick}")
        result = self.fallback.classify(ctx)
        return replace(result, source=GenerationSource.RULE_FALLBACK, raw_response=raw)


class RemoteTheorizer:
    def __init__(self, client: ChatCompletionClient, prompt_template: str, max_retries: int = 2,
                 fallback: Optional[Theorizer] = None):
        self.client = client
        self.prompt = Template(prompt_template).safe_substitute(
            vocabulary=", ".join(sorted(REPORT_PROPOSITIONS))
        )
        self.max_retries = max_retries
        self.fallback = fallback or RuleTheorizer()

    @staticmethod
    def _serialize(reports: Sequence["FaultReport"]) -> str:
        rows = [
            {
                "agent": r.agent,
                "tick": r.tick,
                "pv": r.pv,
                "suspected_system": r.classification.suspected_system.value,
                "proposition": str(r.proposition),
            }
            for r in sorted(reports, key=lambda r: (r.tick, r.agent, r.pv))
        ]
        return json.dumps(rows, sort_keys=True)

    def theorize(self, reports: Sequence["FaultReport"], topology_hint: Optional[Any] = None) -> CausalTheory:
        if not reports:
            raise EmptyReportsError("Cannot theorize without reports")
        message = self._serialize(reports)
        attempts = self.max_retries + 1
        for attempt in range(1, attempts + 1):
            raw = None
            try:
                raw = self.client.complete(self.prompt, message)
                root, effects = parse_theory_response(raw)
                return CausalTheory(root, effects, f"remote theory: {raw.strip()}",
                                    gather_evidence(root, effects, reports), GenerationSource.REMOTE)
            except (LMResponseError, LMTransportError) as e:
                logger.warning(f"Remote theorizing failed on attempt {attempt}/{attempts} "
                               f"({type(e).__name__}): {e}; raw={raw!r}")
        logger.warning("Falling back to rule-based theorizing")
        return replace(self.fallback.theorize(reports, topology_hint), source=GenerationSource.RULE_FALLBACK)


def build_generators(kind: str, settings: "Settings") -> Tuple[Classifier, Theorizer]:
    """Classifier/theorizer pair for the `--generator` choice"""
    if kind == "rule":
        return RuleClassifier(), RuleTheorizer()
    if kind != "remote":
        raise GeneratorConfigError(f"Unknown generator {kind!r}; expected 'rule' or 'remote'")
    if not settings.remote_configured:
        raise GeneratorConfigError("Remote generator needs LM_ENDPOINT_URL to be set")
    client = ChatCompletionClient(settings.lm_endpoint_url, settings.lm_api_key,
                                  settings.lm_model_id, settings.lm_timeout_s)
    classifier = RemoteClassifier(client, load_prompt("classify_anomaly.txt", settings.prompts_dir),
                                  settings.lm_max_retries)
    theorizer = RemoteTheorizer(client, load_prompt("theorize_reports.txt", settings.prompts_dir),
                                settings.lm_max_retries)
    logger.info(f"Using remote generator at {settings.lm_endpoint_url} (model {settings.lm_model_id})")
    return classifier, theorizer
