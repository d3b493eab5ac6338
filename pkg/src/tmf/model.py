"""Shared domain types for threat modeling: STRIDE categories, DFD entities,
data flows, technique ids, and identification results.

Everything here is an immutable value object after construction; instances
are safe to share across threads. No I/O lives in this module.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum

from tmf.errors import MalformedId, ValidationError


class ThreatCategory(Enum):
    """The six STRIDE threat categories."""

    SPOOFING = "Spoofing"
    TAMPERING = "Tampering"
    REPUDIATION = "Repudiation"
    INFORMATION_DISCLOSURE = "Information Disclosure"
    DENIAL_OF_SERVICE = "Denial of Service"
    ELEVATION_OF_PRIVILEGE = "Elevation of Privilege"

    def render(self) -> str:
        return self.value

    @classmethod
    def parse(cls, text: str) -> "ThreatCategory":
        """Parse a canonical category name; compact aliases also accepted."""
        key = re.sub(r"[\s_-]+", "", text).lower()
        try:
            return _CATEGORY_ALIASES[key]
        except KeyError:
            raise ValidationError(f"unknown threat category: {text!r}") from None


_CATEGORY_ALIASES: dict[str, ThreatCategory] = {}
for _cat in ThreatCategory:
    _CATEGORY_ALIASES[re.sub(r"\s+", "", _cat.value).lower()] = _cat


class ElementKind(Enum):
    """What a DFD entity is: a process, an external interactor, or a data store."""

    PROCESS = "process"
    EXTERNAL_INTERACTOR = "external"
    DATA_STORE = "datastore"

    def display(self) -> str:
        return {
            ElementKind.PROCESS: "Process",
            ElementKind.EXTERNAL_INTERACTOR: "External Interactor",
            ElementKind.DATA_STORE: "Data Store",
        }[self]

    @classmethod
    def parse(cls, text: str) -> "ElementKind":
        key = re.sub(r"[\s_-]+", "", text).lower()
        for kind in cls:
            if key in (kind.value, re.sub(r"\s+", "", kind.display()).lower()):
                return kind
        if key in ("externalinteractor", "interactor"):
            return cls.EXTERNAL_INTERACTOR
        raise ValidationError(f"unknown element kind: {text!r}")


class TriState(Enum):
    """Yes/no/unknown answer for a security attribute."""

    YES = "yes"
    NO = "no"
    UNKNOWN = "unknown"

    @classmethod
    def parse(cls, text: str) -> "TriState":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValidationError(f"expected yes|no|unknown, got {text!r}") from None


class SecurityLevel(Enum):
    """Ordinal confidentiality/integrity/availability level."""

    LOW = "low"
    MODERATE = "moderate"
    HIGH = "high"
    UNKNOWN = "unknown"

    @classmethod
    def parse(cls, text: str) -> "SecurityLevel":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValidationError(
                f"expected low|moderate|high|unknown, got {text!r}"
            ) from None


class Priority(Enum):
    HIGH = "High"
    MEDIUM = "Medium"
    LOW = "Low"


class ThreatState(Enum):
    NOT_STARTED = "Not Started"
    NOT_APPLICABLE = "Not Applicable"
    NEEDS_INVESTIGATION = "Needs Investigation"
    MITIGATION_IMPLEMENTED = "Mitigation Implemented"


class Strategy(Enum):
    """Which identification strategy produced a result."""

    RAG = "rag"
    ICL = "icl"
    CLASSIFIER = "classifier"


@dataclass(frozen=True)
class ProcessStep:
    """One named process of a functional object."""

    name: str
    description: str = ""

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise ValidationError("process name must be non-empty")


@dataclass(frozen=True)
class FunctionalObject:
    """A deployment-specific functional unit hosted by an entity."""

    name: str
    description: str = ""
    processes: tuple[ProcessStep, ...] = ()

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise ValidationError("function name must be non-empty")
        object.__setattr__(self, "processes", tuple(self.processes))


@dataclass(frozen=True)
class SecurityAttributes:
    """Required or recommended security attributes of a data flow."""

    requires_authentication: TriState = TriState.UNKNOWN
    requires_encryption: TriState = TriState.UNKNOWN
    confidentiality: SecurityLevel = SecurityLevel.UNKNOWN
    integrity: SecurityLevel = SecurityLevel.UNKNOWN
    availability: SecurityLevel = SecurityLevel.UNKNOWN


@dataclass(frozen=True)
class Entity:
    """One DFD entity: a process, external interactor, or data store.

    ``boundary_id``, when present, must reference a declared trust boundary;
    that check happens at graph validation since it needs the whole graph.
    """

    id: str
    name: str
    kind: ElementKind
    description: str = ""
    boundary_id: str | None = None
    functions: tuple[FunctionalObject, ...] = ()

    def __post_init__(self) -> None:
        if not self.id.strip():
            raise ValidationError("entity id must be non-empty")
        if not self.name.strip():
            raise ValidationError(f"entity {self.id}: name must be non-empty")
        object.__setattr__(self, "functions", tuple(self.functions))


@dataclass(frozen=True)
class DataFlowRecord:
    """One directed data flow between two distinct entities."""

    id: str
    name: str
    initiator_id: str
    acceptor_id: str
    definition: str = ""
    security: SecurityAttributes = field(default_factory=SecurityAttributes)

    def __post_init__(self) -> None:
        if not self.id.strip():
            raise ValidationError("flow id must be non-empty")
        if self.initiator_id == self.acceptor_id:
            raise ValidationError(
                f"flow {self.id}: self-loop rejected "
                f"(initiator and acceptor are both {self.initiator_id!r})"
            )


@dataclass(frozen=True)
class StrideThreat:
    """One generated threat, as it appears in a STRIDE report."""

    id: str
    category: ThreatCategory
    title: str
    description: str
    interaction_id: str
    subject_element: str
    priority: Priority = Priority.MEDIUM
    state: ThreatState = ThreatState.NOT_STARTED


_TECHNIQUE_ID_RE = re.compile(r"^T\d{4}(?:\.\d{3})?$")
# Scan form used to pull ids out of free text; longest match wins and a
# trailing digit disqualifies (so T15667 never yields T1566).
TECHNIQUE_ID_SCAN_RE = re.compile(r"\b[Tt]\d{4}(?:\.\d{3})?(?!\d)")


@dataclass(frozen=True, order=True)
class TechniqueId:
    """Canonical ATT&CK technique id: T + 4 digits, optional .NNN sub-technique."""

    value: str

    def __post_init__(self) -> None:
        if not _TECHNIQUE_ID_RE.match(self.value):
            raise MalformedId(f"not a technique id: {self.value!r}")

    def __str__(self) -> str:
        return self.value

    def is_subtechnique(self) -> bool:
        return "." in self.value

    def parent(self) -> "TechniqueId":
        """The 4-digit parent; a parent maps to itself."""
        return TechniqueId(self.value.split(".", 1)[0])


def parse_technique_id(text: str) -> TechniqueId:
    """Parse and canonicalize a technique id (case-insensitive, trimmed)."""
    candidate = text.strip().upper()
    if not _TECHNIQUE_ID_RE.match(candidate):
        raise MalformedId(f"not a technique id: {text!r}")
    return TechniqueId(candidate)


def parent_of(technique_id: TechniqueId) -> TechniqueId:
    return technique_id.parent()


@dataclass(frozen=True)
class BasicInput:
    """The per-flow block every identification strategy consumes: the flow,
    its endpoints, and the STRIDE threats generated for the interaction."""

    flow: DataFlowRecord
    initiator: Entity
    acceptor: Entity
    stride_threats: tuple[StrideThreat, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "stride_threats", tuple(self.stride_threats))
        for threat in self.stride_threats:
            if threat.interaction_id != self.flow.id:
                raise ValidationError(
                    f"threat {threat.id} references interaction "
                    f"{threat.interaction_id!r}, expected {self.flow.id!r}"
                )


@dataclass(frozen=True)
class IdentificationResult:
    """Techniques identified for one flow, with full provenance.

    ``technique_ids`` is an ordered, duplicate-free tuple; every id has been
    validated against a knowledge base before the result is finalized.
    ``candidates`` carries (id, similarity) retrieval provenance for the RAG
    strategy. ``flags`` records notable conditions such as ``no-candidates``
    or ``out-of-candidate:T1486``.
    """

    flow_id: str
    strategy: Strategy
    technique_ids: tuple[TechniqueId, ...] = ()
    transcripts: tuple[tuple[str, str], ...] = ()
    candidates: tuple[tuple[TechniqueId, float], ...] | None = None
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "technique_ids", tuple(self.technique_ids))
        object.__setattr__(
            self, "transcripts", tuple(tuple(pair) for pair in self.transcripts)
        )
        if self.candidates is not None:
            object.__setattr__(
                self, "candidates", tuple(tuple(pair) for pair in self.candidates)
            )
        object.__setattr__(self, "flags", tuple(self.flags))
        seen = set()
        for tid in self.technique_ids:
            if tid in seen:
                raise ValidationError(f"duplicate technique id in result: {tid}")
            seen.add(tid)
