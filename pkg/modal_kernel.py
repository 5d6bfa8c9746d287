"""
KripkeGuard - Modal Kernel
Finite Kripke models, modal formula evaluation, axiom validation and
belief updates (hypothesis / prune / commit).

All values here are immutable; every operation returns a new model.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple, Union

logger = logging.getLogger(__name__)

_IDENTIFIER = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_FRESH_ID = re.compile(r"^w(\d+)$")


# Errors
class KripkeError(Exception):
    """Base class for kernel errors"""


class UnknownWorldError(KripkeError):
    """A world id that is not part of the model"""


class UnknownPropositionError(KripkeError):
    """An atom outside the model vocabulary"""


class InvalidModelError(KripkeError):
    """A model (or requested update) that breaks the model invariants"""


class PruneError(KripkeError):
    """An invalid prune request"""


class Proposition(str):
    """Atomic proposition; compared by name only"""

    __slots__ = ()

    def __new__(cls, name: str) -> "Proposition":
        if not isinstance(name, str) or not _IDENTIFIER.match(name):
            raise ValueError(f"Invalid proposition name: {name!r}")
        return super().__new__(cls, name)

    def __repr__(self) -> str:
        return f"Proposition({str(self)!r})"


def propositions(names: Iterable[str]) -> FrozenSet[Proposition]:
    return frozenset(Proposition(n) for n in names)


# Formula AST
@dataclass(frozen=True)
class Atom:
    name: Proposition

    def __post_init__(self):
        if not isinstance(self.name, Proposition):
            object.__setattr__(self, "name", Proposition(self.name))


@dataclass(frozen=True)
class Not:
    operand: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Implies:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Box:
    operand: "Formula"


@dataclass(frozen=True)
class Diamond:
    operand: "Formula"


Formula = Union[Atom, Not, And, Or, Implies, Box, Diamond]
FORMULA_TYPES = (Atom, Not, And, Or, Implies, Box, Diamond)


def atoms(f: Formula) -> FrozenSet[Proposition]:
    """Atoms occurring anywhere in the formula"""
    found = set()
    stack = [f]
    while stack:
        node = stack.pop()
        if isinstance(node, Atom):
            found.add(node.name)
        elif isinstance(node, (Not, Box, Diamond)):
            stack.append(node.operand)
        elif isinstance(node, (And, Or, Implies)):
            stack.append(node.left)
            stack.append(node.right)
        else:
            raise TypeError(f"Not a formula node: {node!r}")
    return frozenset(found)


# Models
@dataclass(frozen=True)
class World:
    id: str
    valuation: FrozenSet[Proposition] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "valuation", propositions(self.valuation))

    def holds(self, p: str) -> bool:
        return p in self.valuation


@dataclass(frozen=True)
class KripkeModel:
    """M = (W, R, V) anchored at `current`"""

    worlds: Tuple[World, ...]
    accessibility: FrozenSet[Tuple[str, str]]
    current: str
    vocabulary: FrozenSet[Proposition]
    _index: Dict[str, World] = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        ordered = tuple(sorted(self.worlds, key=lambda w: w.id))
        object.__setattr__(self, "worlds", ordered)
        object.__setattr__(self, "accessibility", frozenset((str(a), str(b)) for a, b in self.accessibility))
        object.__setattr__(self, "vocabulary", propositions(self.vocabulary))
        index = {}
        for world in ordered:
            if world.id in index:
                raise InvalidModelError(f"Duplicate world id: {world.id}")
            index[world.id] = world
        object.__setattr__(self, "_index", index)

        if self.current not in index:
            raise InvalidModelError(f"Current world {self.current!r} is not in the model")
        for a, b in self.accessibility:
            if a not in index or b not in index:
                raise InvalidModelError(f"Edge ({a}, {b}) references a missing world")
        for world in ordered:
            stray = world.valuation - self.vocabulary
            if stray:
                raise InvalidModelError(f"World {world.id} uses propositions outside the vocabulary: {sorted(stray)}")

    @classmethod
    def build(cls, worlds: Mapping[str, Iterable[str]], edges: Iterable[Tuple[str, str]],
              current: str, vocabulary: Optional[Iterable[str]] = None) -> "KripkeModel":
        """Convenience constructor from plain ids and names"""
        world_values = tuple(World(wid, propositions(props)) for wid, props in worlds.items())
        if vocabulary is None:
            vocabulary = set().union(*(w.valuation for w in world_values)) if world_values else set()
        return cls(world_values, frozenset(edges), current, propositions(vocabulary))

    @property
    def world_ids(self) -> FrozenSet[str]:
        return frozenset(self._index)

    def world(self, world_id: str) -> World:
        try:
            return self._index[world_id]
        except KeyError:
            raise UnknownWorldError(f"Unknown world id: {world_id!r}") from None

    def valuation(self, world_id: str) -> FrozenSet[Proposition]:
        return self.world(world_id).valuation


def successors(model: KripkeModel, world: str) -> Tuple[str, ...]:
    model.world(world)
    return tuple(sorted(b for a, b in model.accessibility if a == world))


def is_reflexive(model: KripkeModel) -> bool:
    return all((w, w) in model.accessibility for w in model.world_ids)


def is_serial(model: KripkeModel) -> bool:
    sources = {a for a, _ in model.accessibility}
    return model.world_ids <= sources


# Evaluation
def _check_vocabulary(model: KripkeModel, f: Formula) -> None:
    unknown = atoms(f) - model.vocabulary
    if unknown:
        raise UnknownPropositionError(f"Atoms outside the vocabulary: {sorted(unknown)}")


def _eval(model: KripkeModel, world: str, f: Formula) -> bool:
    match f:
        case Atom(name=p):
            return p in model.valuation(world)
        case Not(operand=g):
            return not _eval(model, world, g)
        case And(left=l, right=r):
            return _eval(model, world, l) and _eval(model, world, r)
        case Or(left=l, right=r):
            return _eval(model, world, l) or _eval(model, world, r)
        case Implies(left=l, right=r):
            return (not _eval(model, world, l)) or _eval(model, world, r)
        case Box(operand=g):
            return all(_eval(model, w, g) for w in successors(model, world))
        case Diamond(operand=g):
            return any(_eval(model, w, g) for w in successors(model, world))
    raise TypeError(f"Not a formula node: {f!r}")


def eval_at(model: KripkeModel, world: str, f: Formula) -> bool:
    """Truth of f at `world` under plain K semantics"""
    model.world(world)
    _check_vocabulary(model, f)
    return _eval(model, world, f)


# Axioms
@dataclass(frozen=True)
class AxiomSet:
    axioms: Tuple[Tuple[str, Formula], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "axioms", tuple((str(label), f) for label, f in self.axioms))
        labels = [label for label, _ in self.axioms]
        duplicates = sorted({label for label in labels if labels.count(label) > 1})
        if duplicates:
            raise ValueError(f"Duplicate axiom labels: {duplicates}")

    @property
    def labels(self) -> List[str]:
        return [label for label, _ in self.axioms]

    def __len__(self) -> int:
        return len(self.axioms)

    def __iter__(self):
        return iter(self.axioms)


@dataclass(frozen=True)
class ValidationResult:
    violations: Tuple[Tuple[str, str], ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def violated_labels(self) -> List[str]:
        seen = []
        for label, _ in self.violations:
            if label not in seen:
                seen.append(label)
        return seen

    def to_dict(self) -> Dict[str, Any]:
        return {"ok": self.ok, "violations": [[label, world] for label, world in self.violations]}


def check_axioms(model: KripkeModel, axioms: AxiomSet) -> ValidationResult:
    """Evaluate every axiom at every world (global validity)"""
    for _, f in axioms:
        _check_vocabulary(model, f)
    violations = []
    for label, f in axioms:
        for world in model.worlds:
            if not _eval(model, world.id, f):
                violations.append((label, world.id))
    return ValidationResult(tuple(violations))


# Belief updates
class _NewWorld:
    """Placeholder for the world allocated by with_hypothesis"""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "NEW"


NEW = _NewWorld()


def fresh_world_id(model: KripkeModel) -> str:
    """Smallest w<k> not used by the model"""
    used = set()
    for wid in model.world_ids:
        m = _FRESH_ID.match(wid)
        if m:
            used.add(int(m.group(1)))
    k = 0
    while k in used:
        k += 1
    return f"w{k}"


def with_hypothesis(model: KripkeModel, target: Union[str, _NewWorld],
                    add: Iterable[str] = (), remove: Iterable[str] = (),
                    new_edges: Iterable[Tuple[Any, Any]] = (),
                    new_current: Optional[Union[str, _NewWorld]] = None) -> KripkeModel:
    """Hypothetical update; the input model is never touched"""
    add = propositions(add)
    remove = propositions(remove)
    unknown = add - model.vocabulary
    if unknown:
        raise UnknownPropositionError(f"Cannot add propositions outside the vocabulary: {sorted(unknown)}")

    if target is NEW:
        target_id = fresh_world_id(model)
        old_valuation = frozenset()
    else:
        target_id = model.world(target).id
        old_valuation = model.world(target_id).valuation

    def resolve(wid):
        return target_id if wid is NEW else str(wid)

    updated = World(target_id, (old_valuation | add) - remove)
    worlds = [w for w in model.worlds if w.id != target_id] + [updated]
    known = {w.id for w in worlds}

    edges = set(model.accessibility)
    for a, b in new_edges:
        a, b = resolve(a), resolve(b)
        if a not in known or b not in known:
            raise InvalidModelError(f"Edge ({a}, {b}) references a missing world")
        edges.add((a, b))

    current = model.current if new_current is None else resolve(new_current)
    if current not in known:
        raise UnknownWorldError(f"Unknown world id: {current!r}")

    return KripkeModel(tuple(worlds), frozenset(edges), current, model.vocabulary)


def prune_worlds(model: KripkeModel, keep: Iterable[str]) -> KripkeModel:
    """Restrict the model to `keep`; never adds worlds or edges"""
    keep = frozenset(keep)
    missing = keep - model.world_ids
    if missing:
        raise UnknownWorldError(f"Cannot keep unknown worlds: {sorted(missing)}")
    if model.current not in keep:
        raise PruneError(f"Cannot prune the current world {model.current!r}")
    worlds = tuple(w for w in model.worlds if w.id in keep)
    edges = frozenset((a, b) for a, b in model.accessibility if a in keep and b in keep)
    return replace(model, worlds=worlds, accessibility=edges)


def commit(model: KripkeModel, candidate: KripkeModel,
           axioms: AxiomSet) -> Union[KripkeModel, ValidationResult]:
    """Adopt `candidate` if it passes every axiom; otherwise return the failures"""
    result = check_axioms(candidate, axioms)
    if result.ok:
        logger.debug(f"Committed model anchored at {candidate.current}")
        return candidate
    logger.info(f"Candidate rejected, keeping model anchored at {model.current}: {result.violated_labels}")
    return result


# Canonical dump
def model_to_dict(model: KripkeModel) -> Dict[str, Any]:
    return {
        "worlds": {w.id: sorted(w.valuation) for w in model.worlds},
        "accessibility": [list(edge) for edge in sorted(model.accessibility)],
        "current": model.current,
        "vocabulary": sorted(model.vocabulary),
    }


def model_from_dict(data: Mapping[str, Any]) -> KripkeModel:
    try:
        return KripkeModel.build(
            worlds={wid: props for wid, props in data["worlds"].items()},
            edges=[tuple(edge) for edge in data["accessibility"]],
            current=data["current"],
            vocabulary=data["vocabulary"],
        )
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidModelError(f"Malformed model document: {e}") from e
