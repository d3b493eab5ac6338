"""Multi-label evaluation metrics and report emission.

Precision and recall follow the per-instance overlap formulation: each flow
contributes |P∩G|/|P| and |P∩G|/|G| terms that are averaged over flows, and
F1 is the harmonic mean of the two aggregates. Reports serialize to JSON
(the machine contract, schema-versioned) and Markdown side by side.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from tmf.attack_kb import KnowledgeBase, countermeasures
from tmf.errors import ValidationError
from tmf.model import IdentificationResult, TechniqueId, parse_technique_id
from tmf.paths import AttackPath, CrossCheckReport
from tmf.stride import StrideReport

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


class EmptyEvaluation(ValidationError):
    pass


@dataclass(frozen=True)
class EvalInstance:
    """One flow's predicted and ground-truth technique sets."""

    flow_id: str
    predicted: frozenset[TechniqueId]
    truth: frozenset[TechniqueId]


@dataclass(frozen=True)
class InstanceBreakdown:
    flow_id: str
    n_predicted: int
    n_truth: int
    n_overlap: int
    precision_term: float
    recall_term: float
    degenerate: bool  # an empty set forced the convention below


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    n_instances: int
    per_instance: tuple[InstanceBreakdown, ...]


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def multilabel_metrics(instances: Sequence[EvalInstance]) -> MetricsReport:
    """Overlap precision/recall averaged over instances, F1 from the aggregates.

    Empty-set convention: an empty predicted set scores precision 1 when the
    truth set is also empty, else 0; symmetrically for the recall term when
    the truth set is empty. Affected instances are flagged ``degenerate``.
    """
    if not instances:
        raise EmptyEvaluation("no instances to evaluate")
    breakdown = []
    precision_sum = 0.0
    recall_sum = 0.0
    for instance in instances:
        overlap = instance.predicted & instance.truth
        degenerate = not instance.predicted or not instance.truth
        if instance.predicted:
            precision_term = len(overlap) / len(instance.predicted)
        else:
            precision_term = 1.0 if not instance.truth else 0.0
        if instance.truth:
            recall_term = len(overlap) / len(instance.truth)
        else:
            recall_term = 1.0 if not instance.predicted else 0.0
        precision_sum += precision_term
        recall_sum += recall_term
        breakdown.append(
            InstanceBreakdown(
                flow_id=instance.flow_id,
                n_predicted=len(instance.predicted),
                n_truth=len(instance.truth),
                n_overlap=len(overlap),
                precision_term=precision_term,
                recall_term=recall_term,
                degenerate=degenerate,
            )
        )
    precision = precision_sum / len(instances)
    recall = recall_sum / len(instances)
    return MetricsReport(
        precision=precision,
        recall=recall,
        f1=_f1(precision, recall),
        n_instances=len(instances),
        per_instance=tuple(breakdown),
    )


@dataclass(frozen=True)
class BinaryMetrics:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False  # a zero denominator was coerced to 0


def binary_metrics(tp: int, fp: int, fn: int) -> BinaryMetrics:
    """Precision, recall, F1 from true/false positive and false negative counts."""
    if min(tp, fp, fn) < 0:
        raise ValidationError("counts must be non-negative")
    degenerate = False
    if tp + fp == 0:
        precision, degenerate = 0.0, True
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall, degenerate = 0.0, True
    else:
        recall = tp / (tp + fn)
    return BinaryMetrics(
        precision=precision, recall=recall, f1=_f1(precision, recall),
        degenerate=degenerate,
    )


def load_ground_truth(path: str | Path) -> dict[str, frozenset[TechniqueId]]:
    """Read JSON-lines ground truth: {"flow_id": ..., "technique_ids": [...]}."""
    truth: dict[str, frozenset[TechniqueId]] = {}
    for line_no, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}, line {line_no}: invalid JSON: {exc}") from None
        truth[obj["flow_id"]] = frozenset(
            parse_technique_id(t).parent() for t in obj["technique_ids"]
        )
    return truth


def instances_from(
    results: Sequence[IdentificationResult],
    truth: dict[str, frozenset[TechniqueId]],
) -> list[EvalInstance]:
    """Pair predictions with truth on flow id; flows absent from either side
    are skipped, and zero overlap overall is an error."""
    instances = []
    for result in sorted(results, key=lambda r: r.flow_id):
        if result.flow_id not in truth:
            logger.warning("flow %s has no ground truth; skipped", result.flow_id)
            continue
        instances.append(
            EvalInstance(
                flow_id=result.flow_id,
                predicted=frozenset(result.technique_ids),
                truth=truth[result.flow_id],
            )
        )
    if not instances:
        raise EmptyEvaluation("no flow ids are shared between predictions and truth")
    return instances


# ---------------------------------------------------------------------------
# Report emission


def _dump(payload: dict) -> str:
    return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"


def stride_report_json(report: StrideReport) -> str:
    payload = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "stride",
        "graph_id": report.graph_id,
        "summary": report.summary(),
        "interactions": [
            {
                "flow_id": flow_id,
                "threats": [
                    {
                        "id": threat.id,
                        "category": threat.category.render(),
                        "title": threat.title,
                        "description": threat.description,
                        "subject_element": threat.subject_element,
                        "priority": threat.priority.value,
                        "state": threat.state.value,
                    }
                    for threat in threats
                ],
            }
            for flow_id, threats in sorted(report.interactions.items())
        ],
    }
    return _dump(payload)


def stride_report_markdown(report: StrideReport, flow_names: dict[str, str] | None = None) -> str:
    names = flow_names or {}
    lines = [
        "# STRIDE Threat Report",
        "",
        f"Graph: `{report.graph_id}`",
        "",
        "## Diagram Summary",
        "",
        "| State | Count |",
        "| --- | --- |",
    ]
    for state, count in report.summary().items():
        lines.append(f"| {state} | {count} |")
    for flow_id, threats in sorted(report.interactions.items()):
        lines.append("")
        lines.append(f"## Interaction: {names.get(flow_id, flow_id)}")
        lines.append("")
        for n, threat in enumerate(threats, start=1):
            lines.append(
                f"{n}. {threat.title}  [State: {threat.state.value}]  "
                f"[Priority: {threat.priority.value}]"
            )
            lines.append("")
            lines.append(f"   Category: {threat.category.render()}")
            lines.append("")
            lines.append(f"   Description: {threat.description}")
            lines.append("")
    return "\n".join(lines).rstrip("\n") + "\n"


def identify_report_json(results: Sequence[IdentificationResult], kb: KnowledgeBase) -> str:
    payload = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "identify",
        "flows": [
            {
                "flow_id": result.flow_id,
                "strategy": result.strategy.value,
                "technique_ids": [str(t) for t in result.technique_ids],
                "techniques": [_technique_detail(tid, kb) for tid in result.technique_ids],
                "candidates": (
                    [[str(tid), sim] for tid, sim in result.candidates]
                    if result.candidates is not None
                    else None
                ),
                "flags": list(result.flags),
                "transcripts": [list(pair) for pair in result.transcripts],
            }
            for result in sorted(results, key=lambda r: r.flow_id)
        ],
    }
    return _dump(payload)


def _technique_detail(tid: TechniqueId, kb: KnowledgeBase) -> dict:
    record = kb.techniques.get(tid)
    if record is None:
        return {"id": str(tid), "name": "", "detections": [], "mitigations": []}
    detections, mitigations = countermeasures(kb, tid)
    return {
        "id": str(tid),
        "name": record.name,
        "detections": detections,
        "mitigations": [{"id": m.id, "name": m.name, "text": m.text} for m in mitigations],
    }


def identify_report_markdown(results: Sequence[IdentificationResult], kb: KnowledgeBase) -> str:
    lines = ["# ATT&CK Technique Identification Report", ""]
    for result in sorted(results, key=lambda r: r.flow_id):
        lines.append(f"## Flow: {result.flow_id} (strategy: {result.strategy.value})")
        lines.append("")
        if result.flags:
            lines.append(f"Flags: {', '.join(result.flags)}")
            lines.append("")
        if not result.technique_ids:
            lines.append("No techniques identified.")
            lines.append("")
            continue
        for tid in result.technique_ids:
            detail = _technique_detail(tid, kb)
            lines.append(f"### {detail['id']} {detail['name']}".rstrip())
            lines.append("")
            if detail["detections"]:
                lines.append("Detections:")
                lines.extend(f"- {d}" for d in detail["detections"])
                lines.append("")
            if detail["mitigations"]:
                lines.append("Mitigations:")
                lines.extend(
                    f"- {m['id']} {m['name']}: {m['text']}" for m in detail["mitigations"]
                )
                lines.append("")
    return "\n".join(lines).rstrip("\n") + "\n"


def _path_cell(path: AttackPath, names: dict[str, str]) -> str:
    return " → ".join(names.get(node, node) for node in path.node_sequence)


def _steps_cell(path: AttackPath, names: dict[str, str]) -> str:
    parts = []
    for n, step in enumerate(path.steps, start=1):
        if step.narrative:
            parts.append(step.narrative)
        else:
            ids = ", ".join(str(t) for t in step.technique_ids) or "no identified techniques"
            parts.append(
                f"{n}. {names.get(step.source, step.source)} → "
                f"{names.get(step.target, step.target)} using {ids}."
            )
    return " ".join(parts)


def paths_report_json(
    enumerated: Sequence[AttackPath],
    llm: Sequence[AttackPath],
    check: CrossCheckReport | None,
    names: dict[str, str],
) -> str:
    def encode(path: AttackPath) -> dict:
        return {
            "node_sequence": list(path.node_sequence),
            "node_names": [names.get(n, n) for n in path.node_sequence],
            "source": path.source.value,
            "unmatched_nodes": list(path.unmatched_nodes),
            "steps": [
                {
                    "source": step.source,
                    "target": step.target,
                    "technique_ids": [str(t) for t in step.technique_ids],
                    "narrative": step.narrative,
                }
                for step in path.steps
            ],
        }

    payload = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "paths",
        "enumerated": [encode(p) for p in enumerated],
        "llm": [encode(p) for p in llm],
        "cross_check": (
            {
                "summary": check.summary(),
                "checks": [
                    {
                        "node_sequence": list(c.node_sequence),
                        "in_enumeration": c.in_enumeration,
                        "off_graph_hops": [list(h) for h in c.off_graph_hops],
                        "unmatched_nodes": list(c.unmatched_nodes),
                    }
                    for c in check.checks
                ],
            }
            if check is not None
            else None
        ),
    }
    return _dump(payload)


def paths_report_markdown(
    enumerated: Sequence[AttackPath],
    llm: Sequence[AttackPath],
    check: CrossCheckReport | None,
    names: dict[str, str],
) -> str:
    lines = ["# Attack Path Report", ""]
    for title, paths in (("Enumerated Attack Paths", enumerated), ("LLM Attack Paths", llm)):
        if not paths:
            continue
        lines.append(f"## {title}")
        lines.append("")
        lines.append("| # | Predicted Attack Path | Execution Steps using ATT&CK Techniques |")
        lines.append("| --- | --- | --- |")
        for n, path in enumerate(paths, start=1):
            lines.append(f"| {n} | {_path_cell(path, names)} | {_steps_cell(path, names)} |")
        lines.append("")
    if check is not None:
        lines.append("## Cross-Check")
        lines.append("")
        summary = check.summary()
        lines.append(
            f"{summary['present']} of {summary['paths']} LLM paths are present in the "
            f"enumeration; {summary['off_graph']} contain off-graph hops; "
            f"{summary['with_unmatched_nodes']} name unknown entities."
        )
        lines.append("")
        for c in check.checks:
            status = "present" if c.in_enumeration else "not in enumeration"
            details = []
            if c.off_graph_hops:
                details.append(
                    "off-graph hops: "
                    + ", ".join(f"{names.get(a, a)}→{names.get(b, b)}" for a, b in c.off_graph_hops)
                )
            if c.unmatched_nodes:
                details.append("unmatched nodes: " + ", ".join(c.unmatched_nodes))
            suffix = f" ({'; '.join(details)})" if details else ""
            lines.append(f"- {' → '.join(names.get(n, n) for n in c.node_sequence)}: {status}{suffix}")
        lines.append("")
    return "\n".join(lines).rstrip("\n") + "\n"


def metrics_report_json(report: MetricsReport) -> str:
    payload = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "metrics",
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "n_instances": report.n_instances,
        "per_instance": [
            {
                "flow_id": row.flow_id,
                "n_predicted": row.n_predicted,
                "n_truth": row.n_truth,
                "n_overlap": row.n_overlap,
                "precision_term": row.precision_term,
                "recall_term": row.recall_term,
                "degenerate": row.degenerate,
            }
            for row in report.per_instance
        ],
    }
    return _dump(payload)


def metrics_report_markdown(report: MetricsReport) -> str:
    lines = [
        "# Identification Metrics",
        "",
        "| Precision | Recall | F1 Score |",
        "| --- | --- | --- |",
        f"| {report.precision:.4f} | {report.recall:.4f} | {report.f1:.4f} |",
        "",
        f"Instances evaluated: {report.n_instances}",
        "",
        "| Flow | \\|P\\| | \\|G\\| | \\|O\\| | Precision term | Recall term |",
        "| --- | --- | --- | --- | --- | --- |",
    ]
    for row in report.per_instance:
        flag = " *" if row.degenerate else ""
        lines.append(
            f"| {row.flow_id}{flag} | {row.n_predicted} | {row.n_truth} | "
            f"{row.n_overlap} | {row.precision_term:.4f} | {row.recall_term:.4f} |"
        )
    if any(row.degenerate for row in report.per_instance):
        lines.append("")
        lines.append("`*` instance scored by the empty-set convention.")
    return "\n".join(lines) + "\n"


_EMITTERS = {
    ("stride", "json"): lambda p: stride_report_json(p["report"]),
    ("stride", "markdown"): lambda p: stride_report_markdown(p["report"], p.get("flow_names")),
    ("identify", "json"): lambda p: identify_report_json(p["results"], p["kb"]),
    ("identify", "markdown"): lambda p: identify_report_markdown(p["results"], p["kb"]),
    ("paths", "json"): lambda p: paths_report_json(
        p.get("enumerated", ()), p.get("llm", ()), p.get("cross_check"), p.get("names", {})
    ),
    ("paths", "markdown"): lambda p: paths_report_markdown(
        p.get("enumerated", ()), p.get("llm", ()), p.get("cross_check"), p.get("names", {})
    ),
    ("metrics", "json"): lambda p: metrics_report_json(p["report"]),
    ("metrics", "markdown"): lambda p: metrics_report_markdown(p["report"]),
}


def emit_report(kind: str, payload: dict, format: str = "json") -> str:
    """Serialize a report payload; deterministic for equal payloads."""
    try:
        emitter = _EMITTERS[(kind, format)]
    except KeyError:
        raise ValidationError(f"no emitter for kind={kind!r} format={format!r}") from None
    return emitter(payload)
