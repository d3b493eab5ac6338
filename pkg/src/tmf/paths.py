"""Asset-centric attack-path analysis.

A deterministic simple-path enumerator over the technique-annotated entity
graph serves as the ground truth; an LLM session primed with the analyst
persona proposes paths from the same per-flow table, and the cross-check
reconciles the two.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Sequence

from tmf.attack_kb import KnowledgeBase
from tmf.errors import ValidationError
from tmf.gateway import Gateway
from tmf.identify import UnparseableResponse, _scan_ids
from tmf.model import DataFlowRecord, Entity, IdentificationResult, TechniqueId

logger = logging.getLogger(__name__)


class UnknownEntity(ValidationError):
    pass


class UnknownFlowInResults(ValidationError):
    pass


class PathSource(Enum):
    ENUMERATED = "enumerated"
    LLM = "llm"


@dataclass(frozen=True)
class GraphEdge:
    source: str
    target: str
    flow_id: str
    technique_ids: tuple[TechniqueId, ...] = ()


@dataclass(frozen=True)
class EntityGraph:
    """Directed entity graph whose edges carry identified technique ids."""

    nodes: dict[str, str]  # entity id -> display name
    edges: tuple[GraphEdge, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "edges", tuple(self.edges))
        for edge in self.edges:
            for ref in (edge.source, edge.target):
                if ref not in self.nodes:
                    raise ValidationError(f"edge references unknown node {ref!r}")

    def resolve(self, name_or_id: str) -> str:
        """Accepts an entity id or a case-insensitive display name."""
        if name_or_id in self.nodes:
            return name_or_id
        wanted = name_or_id.strip().lower()
        matches = [
            node_id for node_id, name in self.nodes.items()
            if name.strip().lower() == wanted
        ]
        if len(matches) == 1:
            return matches[0]
        if len(matches) > 1:
            raise UnknownEntity(f"entity name {name_or_id!r} is ambiguous: {sorted(matches)}")
        raise UnknownEntity(f"no such entity: {name_or_id!r}")

    def adjacency(self) -> dict[str, dict[str, tuple[TechniqueId, ...]]]:
        """source -> target -> merged technique ids across parallel edges."""
        merged: dict[str, dict[str, set[TechniqueId]]] = {}
        for edge in self.edges:
            merged.setdefault(edge.source, {}).setdefault(edge.target, set()).update(
                edge.technique_ids
            )
        return {
            src: {dst: tuple(sorted(ids)) for dst, ids in targets.items()}
            for src, targets in merged.items()
        }


@dataclass(frozen=True)
class PathStep:
    """One hop (enumerated) or one narrated execution step (LLM)."""

    source: str
    target: str
    technique_ids: tuple[TechniqueId, ...] = ()
    narrative: str = ""


@dataclass(frozen=True)
class AttackPath:
    """An ordered entity chain toward a target asset."""

    node_sequence: tuple[str, ...]
    steps: tuple[PathStep, ...]
    source: PathSource
    unmatched_nodes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "node_sequence", tuple(self.node_sequence))
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "unmatched_nodes", tuple(self.unmatched_nodes))
        if self.source is PathSource.ENUMERATED:
            if len(set(self.node_sequence)) != len(self.node_sequence):
                raise ValidationError("enumerated path revisits a node")


def build_entity_graph(
    flows: Sequence[DataFlowRecord],
    entities: dict[str, Entity],
    results: Sequence[IdentificationResult] = (),
) -> EntityGraph:
    """One edge per flow, annotated with that flow's identified techniques.

    Flows without a result get empty technique sets; a result naming a flow
    that does not exist is an error.
    """
    flow_ids = {flow.id for flow in flows}
    by_flow: dict[str, tuple[TechniqueId, ...]] = {}
    for result in results:
        if result.flow_id not in flow_ids:
            raise UnknownFlowInResults(
                f"identification result references unknown flow {result.flow_id!r}"
            )
        by_flow[result.flow_id] = result.technique_ids
    nodes = {entity.id: entity.name for entity in entities.values()}
    edges = tuple(
        GraphEdge(
            source=flow.initiator_id,
            target=flow.acceptor_id,
            flow_id=flow.id,
            technique_ids=by_flow.get(flow.id, ()),
        )
        for flow in sorted(flows, key=lambda f: f.id)
    )
    return EntityGraph(nodes=nodes, edges=edges)


def enumerate_paths(
    graph: EntityGraph, start: str, target: str, max_depth: int = 6
) -> list[AttackPath]:
    """All simple directed paths from start to target with at most
    ``max_depth`` edges, in lexicographic node-sequence order."""
    start_id = graph.resolve(start)
    target_id = graph.resolve(target)
    if start_id == target_id:
        raise ValidationError("start and target must differ")
    if max_depth < 1:
        raise ValidationError("max_depth must be >= 1")

    adjacency = graph.adjacency()
    found: list[tuple[str, ...]] = []

    def walk(node: str, trail: list[str]) -> None:
        if len(trail) - 1 >= max_depth:
            return
        for nxt in sorted(adjacency.get(node, {})):
            if nxt == target_id:
                found.append(tuple(trail + [nxt]))
            elif nxt not in trail:
                trail.append(nxt)
                walk(nxt, trail)
                trail.pop()

    walk(start_id, [start_id])
    found.sort()

    paths = []
    for sequence in found:
        steps = tuple(
            PathStep(
                source=a,
                target=b,
                technique_ids=adjacency[a][b],
            )
            for a, b in zip(sequence, sequence[1:])
        )
        paths.append(
            AttackPath(node_sequence=sequence, steps=steps, source=PathSource.ENUMERATED)
        )
    return paths


def default_asset_template() -> str:
    return (
        resources.files("tmf.data").joinpath("asset_prompt.txt").read_text(encoding="utf-8")
    )


def build_asset_prompt(
    graph: EntityGraph, start: str, target: str, template: str | None = None
) -> str:
    """Render the asset-centric analysis prompt: the per-flow technique table,
    the designated target asset and starting entity, and the two-column
    table-output instruction."""
    start_id = graph.resolve(start)
    target_id = graph.resolve(target)
    rows = ["Initiator | Acceptor | MITRE ATT&CK techniques"]
    for edge in graph.edges:
        ids = ", ".join(str(t) for t in edge.technique_ids) or "(none identified)"
        rows.append(f"{graph.nodes[edge.source]} | {graph.nodes[edge.target]} | {ids}")
    text = template if template is not None else default_asset_template()
    return text.format(
        table="\n".join(rows),
        target=graph.nodes[target_id],
        start=graph.nodes[start_id],
    )


_ARROW_RE = re.compile(r"\s*(?:-->|->|→|⇒)\s*")
# Split narrated steps at "N. " markers that follow sentence punctuation.
_STEP_SPLIT_RE = re.compile(r"(?<=[.;!?])\s+(?=\d+\.\s)")
# Tokens that look like technique ids but have the wrong digit count.
_NEAR_MISS_RE = re.compile(r"\b[Tt]\d{1,3}\b(?!\.)")


def _warn_near_misses(text: str) -> None:
    for token in _NEAR_MISS_RE.findall(text):
        logger.warning(
            "token %r does not match the technique id grammar; ignored", token
        )


def _parse_path_cell(cell: str) -> list[str]:
    return [part.strip() for part in _ARROW_RE.split(cell) if part.strip()]


def _parse_steps_cell(cell: str) -> list[tuple[str, tuple[TechniqueId, ...]]]:
    """Split a narrated steps cell on its 1. 2. 3. markers and pull the
    technique ids out of each segment."""
    _warn_near_misses(cell)
    segments = [seg.strip() for seg in _STEP_SPLIT_RE.split(cell) if seg.strip()]
    if len(segments) <= 1:
        # No numbered markers; treat the whole cell as one step.
        segments = [cell.strip()] if cell.strip() else []
    return [(segment, tuple(_scan_ids(segment))) for segment in segments]


def parse_path_table(text: str) -> list[tuple[list[str], list[tuple[str, tuple[TechniqueId, ...]]]]]:
    """Parse a two-column (path | execution steps) reply table."""
    rows = []
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped.startswith("|") and "|" not in stripped:
            continue
        cells = [cell.strip() for cell in stripped.strip("|").split("|")]
        if len(cells) < 2:
            continue
        # Tolerate an optional leading row-number column.
        if len(cells) >= 3 and re.fullmatch(r"#?\d*", cells[0]):
            cells = cells[1:]
        path_cell, steps_cell = cells[0], " ".join(cells[1:])
        if set(path_cell) <= {"-", ":", " "}:  # separator row
            continue
        nodes = _parse_path_cell(path_cell)
        if len(nodes) < 2:
            continue
        rows.append((nodes, _parse_steps_cell(steps_cell)))
    if not rows:
        raise UnparseableResponse("no path table rows found in response")
    return rows


def llm_attack_paths(
    prompt: str,
    gateway: Gateway,
    kb: KnowledgeBase,
    graph: EntityGraph | None = None,
    model_tag: str = "default",
) -> list[AttackPath]:
    """Ask the analyst-persona session for attack paths and parse its table.

    Technique mentions are validated against the knowledge base (invalid ids
    dropped with a warning). Node names are matched to graph entities
    case-insensitively; names that match nothing are kept verbatim and
    flagged on the path.
    """
    response = gateway.complete(prompt, model_tag=model_tag)
    try:
        rows = parse_path_table(response.text)
    except UnparseableResponse:
        logger.warning("unparseable path table; reprompting once")
        retry = gateway.complete(
            f"{prompt}\n\nAnswer in the requested table format only.",
            model_tag=model_tag,
        )
        rows = parse_path_table(retry.text)

    valid_ids = kb.valid_ids()
    paths = []
    for nodes, narrated in rows:
        resolved: list[str] = []
        unmatched: list[str] = []
        for name in nodes:
            if graph is not None:
                try:
                    resolved.append(graph.resolve(name))
                    continue
                except UnknownEntity:
                    pass
            resolved.append(name)
            if graph is not None:
                unmatched.append(name)
                logger.warning("path names entity %r not present in the graph", name)
        steps = []
        for narrative, raw_ids in narrated:
            kept = []
            for tid in raw_ids:
                if tid in valid_ids:
                    kept.append(tid)
                else:
                    logger.warning("dropping invalid technique id %s from path step", tid)
            steps.append(
                PathStep(source="", target="", technique_ids=tuple(kept),
                         narrative=narrative)
            )
        paths.append(
            AttackPath(
                node_sequence=tuple(resolved),
                steps=tuple(steps),
                source=PathSource.LLM,
                unmatched_nodes=tuple(unmatched),
            )
        )
    return paths


@dataclass(frozen=True)
class PathCheck:
    node_sequence: tuple[str, ...]
    in_enumeration: bool
    off_graph_hops: tuple[tuple[str, str], ...] = ()
    unmatched_nodes: tuple[str, ...] = ()


@dataclass(frozen=True)
class CrossCheckReport:
    checks: tuple[PathCheck, ...] = ()

    def summary(self) -> dict[str, int]:
        return {
            "paths": len(self.checks),
            "present": sum(1 for c in self.checks if c.in_enumeration),
            "off_graph": sum(1 for c in self.checks if c.off_graph_hops),
            "with_unmatched_nodes": sum(1 for c in self.checks if c.unmatched_nodes),
        }


def cross_check(
    llm_paths: Sequence[AttackPath],
    enumerated: Sequence[AttackPath],
    graph: EntityGraph,
) -> CrossCheckReport:
    """Reconcile LLM paths against the enumeration: membership, edge
    existence for every hop, and unmatched node names."""
    enumerated_sequences = {path.node_sequence for path in enumerated}
    adjacency = graph.adjacency()
    checks = []
    for path in llm_paths:
        off_graph = []
        if not path.unmatched_nodes:
            for a, b in zip(path.node_sequence, path.node_sequence[1:]):
                if b not in adjacency.get(a, {}):
                    off_graph.append((a, b))
        checks.append(
            PathCheck(
                node_sequence=path.node_sequence,
                in_enumeration=(
                    not path.unmatched_nodes
                    and path.node_sequence in enumerated_sequences
                ),
                off_graph_hops=tuple(off_graph),
                unmatched_nodes=path.unmatched_nodes,
            )
        )
    return CrossCheckReport(checks=tuple(checks))
