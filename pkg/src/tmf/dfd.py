"""Ingest system architectures into a validated graph.

Two sources are supported: a line-oriented DFD DSL (one directive per line)
and structured service-package JSON records with fully-described flows.

DSL grammar::

    boundary <id> name="..."
    entity <id> kind=process|external|datastore name="..." [boundary=<id>] [desc="..."]
    flow <id> from=<entityId> to=<entityId> name="..." [auth=yes|no|unknown]
         [encrypt=yes|no|unknown] [def="..."]

``#`` starts a comment; blank lines are ignored; LF and CRLF both accepted.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from tmf.errors import ValidationError
from tmf.model import (
    DataFlowRecord,
    ElementKind,
    Entity,
    FunctionalObject,
    ProcessStep,
    SecurityAttributes,
    SecurityLevel,
    TriState,
)

logger = logging.getLogger(__name__)


class DslSyntaxError(ValidationError):
    """Malformed DSL line; carries the line and column of the offence."""

    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class DuplicateId(ValidationError):
    pass


class DanglingReference(ValidationError):
    pass


class SelfLoopFlow(ValidationError):
    pass


class SchemaError(ValidationError):
    """Service-package record violates the schema; carries the JSON path."""

    def __init__(self, message: str, json_path: str = "$"):
        super().__init__(f"{json_path}: {message}")
        self.json_path = json_path


class ConflictingEntityDescription(ValidationError):
    pass


@dataclass(frozen=True)
class DfdGraph:
    """A validated data-flow diagram: entities, trust boundaries, flows.

    Construction checks referential integrity: every flow endpoint and every
    entity boundary reference must resolve, and at least one entity exists.
    """

    entities: dict[str, Entity]
    boundaries: dict[str, str] = field(default_factory=dict)
    flows: dict[str, DataFlowRecord] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.entities:
            raise ValidationError("a graph must contain at least one entity")
        for entity in self.entities.values():
            if entity.boundary_id is not None and entity.boundary_id not in self.boundaries:
                raise DanglingReference(
                    f"entity {entity.id}: unknown boundary {entity.boundary_id!r}"
                )
        for flow in self.flows.values():
            for ref in (flow.initiator_id, flow.acceptor_id):
                if ref not in self.entities:
                    raise DanglingReference(f"flow {flow.id}: unknown entity {ref!r}")

    def flow_endpoints(self, flow_id: str) -> tuple[Entity, Entity]:
        flow = self.flows[flow_id]
        return self.entities[flow.initiator_id], self.entities[flow.acceptor_id]

    def sorted_flows(self) -> list[DataFlowRecord]:
        return [self.flows[fid] for fid in sorted(self.flows)]


_ATTR_RE = re.compile(r'(?P<key>[A-Za-z_][A-Za-z0-9_]*)=(?:"(?P<quoted>(?:[^"\\]|\\.)*)"|(?P<bare>[^\s"]+))')
_TOKEN_RE = re.compile(r"\S+")


def _parse_attrs(rest: str, line_no: int, offset: int) -> dict[str, str]:
    """Parse key=value attributes; values may be double-quoted with escapes."""
    attrs: dict[str, str] = {}
    pos = 0
    while pos < len(rest):
        match = _TOKEN_RE.search(rest, pos)
        if match is None:
            break
        attr = _ATTR_RE.match(rest, match.start())
        if attr is None or attr.start() != match.start():
            raise DslSyntaxError(
                f"expected key=value, got {match.group(0)!r}",
                line_no,
                offset + match.start() + 1,
            )
        key = attr.group("key")
        if key in attrs:
            raise DslSyntaxError(
                f"duplicate attribute {key!r}", line_no, offset + attr.start() + 1
            )
        value = attr.group("quoted")
        if value is None:
            value = attr.group("bare")
        else:
            value = value.replace('\\"', '"').replace("\\\\", "\\")
        attrs[key] = value
        pos = attr.end()
    return attrs


def _require(attrs: dict[str, str], keys: tuple[str, ...], line_no: int, what: str) -> None:
    for key in keys:
        if key not in attrs:
            raise DslSyntaxError(f"{what} is missing required {key}=...", line_no)


_ALLOWED_ATTRS = {
    "boundary": {"name"},
    "entity": {"kind", "name", "boundary", "desc"},
    "flow": {"from", "to", "name", "auth", "encrypt", "def"},
}


def parse_dfd(source: str) -> DfdGraph:
    """Parse DSL text into a validated graph.

    Diagnostics carry the line (and column where meaningful); duplicate ids,
    dangling references, and self-loop flows are rejected.
    """
    boundaries: dict[str, str] = {}
    entities: dict[str, Entity] = {}
    flows: dict[str, DataFlowRecord] = {}
    flow_lines: dict[str, int] = {}
    entity_lines: dict[str, int] = {}

    for line_no, raw_line in enumerate(source.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        head = _TOKEN_RE.search(line)
        assert head is not None
        directive = head.group(0)
        if directive not in _ALLOWED_ATTRS:
            raise DslSyntaxError(
                f"unknown directive {directive!r}", line_no, head.start() + 1
            )
        ident_match = _TOKEN_RE.search(line, head.end())
        if ident_match is None or "=" in ident_match.group(0):
            raise DslSyntaxError(f"{directive} is missing an id", line_no, head.end() + 1)
        ident = ident_match.group(0)
        attrs = _parse_attrs(line[ident_match.end():], line_no, ident_match.end())
        unknown = set(attrs) - _ALLOWED_ATTRS[directive]
        if unknown:
            raise DslSyntaxError(
                f"unknown attribute(s) for {directive}: {', '.join(sorted(unknown))}",
                line_no,
            )

        if directive == "boundary":
            _require(attrs, ("name",), line_no, "boundary")
            if ident in boundaries:
                raise DuplicateId(f"line {line_no}: duplicate boundary id {ident!r}")
            boundaries[ident] = attrs["name"]

        elif directive == "entity":
            _require(attrs, ("kind", "name"), line_no, "entity")
            if ident in entities:
                raise DuplicateId(f"line {line_no}: duplicate entity id {ident!r}")
            try:
                kind = ElementKind.parse(attrs["kind"])
            except ValidationError as exc:
                raise DslSyntaxError(str(exc), line_no) from None
            entities[ident] = Entity(
                id=ident,
                name=attrs["name"],
                kind=kind,
                description=attrs.get("desc", ""),
                boundary_id=attrs.get("boundary"),
            )
            entity_lines[ident] = line_no

        else:  # flow
            _require(attrs, ("from", "to", "name"), line_no, "flow")
            if ident in flows:
                raise DuplicateId(f"line {line_no}: duplicate flow id {ident!r}")
            if attrs["from"] == attrs["to"]:
                raise SelfLoopFlow(
                    f"line {line_no}: flow {ident!r} connects {attrs['from']!r} to itself"
                )
            try:
                security = SecurityAttributes(
                    requires_authentication=TriState.parse(attrs.get("auth", "unknown")),
                    requires_encryption=TriState.parse(attrs.get("encrypt", "unknown")),
                )
            except ValidationError as exc:
                raise DslSyntaxError(str(exc), line_no) from None
            flows[ident] = DataFlowRecord(
                id=ident,
                name=attrs["name"],
                initiator_id=attrs["from"],
                acceptor_id=attrs["to"],
                definition=attrs.get("def", ""),
                security=security,
            )
            flow_lines[ident] = line_no

    if not entities:
        raise ValidationError("DFD declares no entities")
    # Re-raise reference problems with the offending line attached.
    for flow_id, flow in flows.items():
        for ref in (flow.initiator_id, flow.acceptor_id):
            if ref not in entities:
                raise DanglingReference(
                    f"line {flow_lines[flow_id]}: flow {flow_id!r} references "
                    f"undeclared entity {ref!r}"
                )
    for entity_id, entity in entities.items():
        if entity.boundary_id is not None and entity.boundary_id not in boundaries:
            raise DanglingReference(
                f"line {entity_lines[entity_id]}: entity {entity_id!r} references "
                f"undeclared boundary {entity.boundary_id!r}"
            )
    return DfdGraph(entities=entities, boundaries=boundaries, flows=flows)


def parse_dfd_file(path: str | Path) -> DfdGraph:
    return parse_dfd(Path(path).read_text(encoding="utf-8"))


def _quote(value: str) -> str:
    return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'


def emit_dfd(graph: DfdGraph) -> str:
    """Render a graph back to DSL text; re-parsing yields an isomorphic graph."""
    lines: list[str] = []
    for boundary_id in sorted(graph.boundaries):
        lines.append(f"boundary {boundary_id} name={_quote(graph.boundaries[boundary_id])}")
    for entity_id in sorted(graph.entities):
        entity = graph.entities[entity_id]
        parts = [
            f"entity {entity.id}",
            f"kind={entity.kind.value}",
            f"name={_quote(entity.name)}",
        ]
        if entity.boundary_id is not None:
            parts.append(f"boundary={entity.boundary_id}")
        if entity.description:
            parts.append(f"desc={_quote(entity.description)}")
        lines.append(" ".join(parts))
    for flow_id in sorted(graph.flows):
        flow = graph.flows[flow_id]
        parts = [
            f"flow {flow.id}",
            f"from={flow.initiator_id}",
            f"to={flow.acceptor_id}",
            f"name={_quote(flow.name)}",
        ]
        if flow.security.requires_authentication is not TriState.UNKNOWN:
            parts.append(f"auth={flow.security.requires_authentication.value}")
        if flow.security.requires_encryption is not TriState.UNKNOWN:
            parts.append(f"encrypt={flow.security.requires_encryption.value}")
        if flow.definition:
            parts.append(f"def={_quote(flow.definition)}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class EntitySpec:
    """Inline entity description inside a service-package flow record."""

    name: str
    kind: ElementKind
    description: str = ""
    functions: tuple[FunctionalObject, ...] = ()


@dataclass(frozen=True)
class PackageFlow:
    """One fully-described flow of a service package."""

    id: str
    name: str
    definition: str
    initiator: EntitySpec
    acceptor: EntitySpec
    security: SecurityAttributes


@dataclass(frozen=True)
class ServicePackage:
    """A reference-architecture application: a named bundle of described flows."""

    package_id: str
    name: str
    flows: tuple[PackageFlow, ...]


_FUNCTION_SCHEMA = {
    "type": "object",
    "required": ["name"],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "description": {"type": "string"},
        "processes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name"],
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "description": {"type": "string"},
                },
            },
        },
    },
}

_ENTITY_SCHEMA = {
    "type": "object",
    "required": ["name", "kind", "description"],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "kind": {"type": "string"},
        "description": {"type": "string", "minLength": 1},
        "functions": {"type": "array", "items": _FUNCTION_SCHEMA},
    },
}

PACKAGE_SCHEMA = {
    "type": "object",
    "required": ["package_id", "name", "flows"],
    "properties": {
        "package_id": {"type": "string", "minLength": 1},
        "name": {"type": "string", "minLength": 1},
        "flows": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "name", "definition", "initiator", "acceptor"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "name": {"type": "string", "minLength": 1},
                    "definition": {"type": "string"},
                    "initiator": _ENTITY_SCHEMA,
                    "acceptor": _ENTITY_SCHEMA,
                    "security": {
                        "type": "object",
                        "properties": {
                            "requires_authentication": {"type": "string"},
                            "requires_encryption": {"type": "string"},
                            "confidentiality": {"type": "string"},
                            "integrity": {"type": "string"},
                            "availability": {"type": "string"},
                        },
                    },
                },
            },
        },
    },
}


def _json_path(error: jsonschema.ValidationError) -> str:
    parts = ["$"]
    for step in error.absolute_path:
        parts.append(f"[{step}]" if isinstance(step, int) else f".{step}")
    return "".join(parts)


def _entity_spec(obj: dict) -> EntitySpec:
    functions = []
    for fn in obj.get("functions", []):
        processes = tuple(
            ProcessStep(name=p["name"], description=p.get("description", ""))
            for p in fn.get("processes", [])
        )
        functions.append(
            FunctionalObject(
                name=fn["name"],
                description=fn.get("description", ""),
                processes=processes,
            )
        )
    return EntitySpec(
        name=obj["name"],
        kind=ElementKind.parse(obj["kind"]),
        description=obj["description"],
        functions=tuple(functions),
    )


def _security(obj: dict) -> SecurityAttributes:
    """Security attributes with every absent field defaulting to unknown."""
    return SecurityAttributes(
        requires_authentication=TriState.parse(obj.get("requires_authentication", "unknown")),
        requires_encryption=TriState.parse(obj.get("requires_encryption", "unknown")),
        confidentiality=SecurityLevel.parse(obj.get("confidentiality", "unknown")),
        integrity=SecurityLevel.parse(obj.get("integrity", "unknown")),
        availability=SecurityLevel.parse(obj.get("availability", "unknown")),
    )


def load_service_package(path: str | Path) -> ServicePackage:
    """Load and validate a service-package JSON record."""
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from None
    return parse_service_package(document)


def parse_service_package(document: dict) -> ServicePackage:
    validator = jsonschema.Draft202012Validator(PACKAGE_SCHEMA)
    errors = sorted(validator.iter_errors(document), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        raise SchemaError(first.message, _json_path(first))

    flows = []
    seen_flow_ids: set[str] = set()
    for i, flow_obj in enumerate(document["flows"]):
        if flow_obj["id"] in seen_flow_ids:
            raise SchemaError(f"duplicate flow id {flow_obj['id']!r}", f"$.flows[{i}].id")
        seen_flow_ids.add(flow_obj["id"])
        try:
            initiator = _entity_spec(flow_obj["initiator"])
        except ValidationError as exc:
            raise SchemaError(str(exc), f"$.flows[{i}].initiator") from None
        try:
            acceptor = _entity_spec(flow_obj["acceptor"])
        except ValidationError as exc:
            raise SchemaError(str(exc), f"$.flows[{i}].acceptor") from None
        try:
            security = _security(flow_obj.get("security", {}))
        except ValidationError as exc:
            raise SchemaError(str(exc), f"$.flows[{i}].security") from None
        flows.append(
            PackageFlow(
                id=flow_obj["id"],
                name=flow_obj["name"],
                definition=flow_obj["definition"],
                initiator=initiator,
                acceptor=acceptor,
                security=security,
            )
        )
    return ServicePackage(
        package_id=document["package_id"],
        name=document["name"],
        flows=tuple(flows),
    )


def _slug(name: str) -> str:
    return re.sub(r"_+", "_", re.sub(r"[^a-z0-9]", "_", name.lower())).strip("_")


def to_graph(pkg: ServicePackage) -> DfdGraph:
    """Convert a package to a graph, deduplicating entities by name.

    The same entity name appearing with contradictory kinds is an error;
    the first occurrence's description and functions win otherwise.
    """
    entities: dict[str, Entity] = {}
    by_name: dict[str, str] = {}
    flows: dict[str, DataFlowRecord] = {}

    def intern(spec: EntitySpec) -> str:
        if spec.name in by_name:
            entity_id = by_name[spec.name]
            if entities[entity_id].kind is not spec.kind:
                raise ConflictingEntityDescription(
                    f"entity {spec.name!r} declared both as "
                    f"{entities[entity_id].kind.display()} and {spec.kind.display()}"
                )
            return entity_id
        entity_id = _slug(spec.name)
        if entity_id in entities:  # distinct names colliding after slugging
            suffix = 2
            while f"{entity_id}_{suffix}" in entities:
                suffix += 1
            entity_id = f"{entity_id}_{suffix}"
        entities[entity_id] = Entity(
            id=entity_id,
            name=spec.name,
            kind=spec.kind,
            description=spec.description,
            functions=spec.functions,
        )
        by_name[spec.name] = entity_id
        return entity_id

    for flow in pkg.flows:
        initiator_id = intern(flow.initiator)
        acceptor_id = intern(flow.acceptor)
        flows[flow.id] = DataFlowRecord(
            id=flow.id,
            name=flow.name,
            initiator_id=initiator_id,
            acceptor_id=acceptor_id,
            definition=flow.definition,
            security=flow.security,
        )
    return DfdGraph(entities=entities, boundaries={}, flows=flows)
