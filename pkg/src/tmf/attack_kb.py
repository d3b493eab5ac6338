"""ATT&CK knowledge base: STIX 2.1 bundle ingestion and technique lookups.

The importer consumes the official bundle distribution format (attack-pattern,
course-of-action, and relationship objects). Revoked or deprecated objects are
retained in storage — historical ids in old ground-truth files must still
parse — but are excluded from corpora and from identification validation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

from tmf.errors import ValidationError
from tmf.model import TechniqueId, parse_technique_id

logger = logging.getLogger(__name__)

SNAPSHOT_SCHEMA_VERSION = 1


class SchemaError(ValidationError):
    pass


class EmptyBundle(ValidationError):
    pass


class UnknownTechnique(ValidationError):
    pass


@dataclass(frozen=True)
class Mitigation:
    id: str
    name: str
    text: str = ""


@dataclass(frozen=True)
class TechniqueRecord:
    """One technique with its tactics, detections, and joined mitigations."""

    id: TechniqueId
    name: str
    description: str = ""
    tactics: tuple[str, ...] = ()
    detections: tuple[str, ...] = ()
    mitigations: tuple[Mitigation, ...] = ()
    sub_technique_ids: tuple[TechniqueId, ...] = ()
    revoked: bool = False

    def __post_init__(self) -> None:
        for sub in self.sub_technique_ids:
            if sub.parent() != self.id:
                raise ValidationError(
                    f"{sub} listed as sub-technique of {self.id} but its parent is {sub.parent()}"
                )


@dataclass(frozen=True)
class KnowledgeBase:
    techniques: dict[TechniqueId, TechniqueRecord]
    matrix_name: str = "Enterprise ATT&CK"
    version: str = "unknown"

    def __post_init__(self) -> None:
        for tid in self.techniques:
            if tid.is_subtechnique() and tid.parent() not in self.techniques:
                raise SchemaError(
                    f"sub-technique {tid} stored without its parent {tid.parent()}"
                )

    def __contains__(self, technique_id: TechniqueId) -> bool:
        return technique_id in self.techniques

    def valid_ids(self) -> set[TechniqueId]:
        """Ids usable in identification outputs (non-revoked)."""
        return {tid for tid, rec in self.techniques.items() if not rec.revoked}


def _external_id(obj: dict) -> str | None:
    for ref in obj.get("external_references", []):
        if ref.get("source_name") == "mitre-attack":
            return ref.get("external_id")
    return None


def _tactics(obj: dict) -> tuple[str, ...]:
    return tuple(
        phase.get("phase_name", "")
        for phase in obj.get("kill_chain_phases", [])
        if phase.get("kill_chain_name") == "mitre-attack"
    )


def import_stix_bundle(path: str | Path) -> KnowledgeBase:
    """Build a knowledge base from a STIX 2.1 bundle file.

    Techniques are keyed by their external reference id; mitigations are
    joined via ``mitigates`` relationships; detection text comes from the
    attack-pattern's detection field. A ``mitigates`` relationship whose
    course-of-action is missing from the bundle is dropped with a warning.
    """
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"bundle is not valid JSON: {exc}") from None
    if not isinstance(document, dict) or document.get("type") != "bundle":
        raise SchemaError("expected a STIX bundle object with type 'bundle'")
    objects = document.get("objects")
    if not isinstance(objects, list):
        raise SchemaError("bundle has no 'objects' array")

    matrix_name = "Enterprise ATT&CK"
    version = "unknown"
    patterns: dict[str, dict] = {}  # stix id -> attack-pattern object
    courses: dict[str, Mitigation] = {}
    mitigates: list[tuple[str, str]] = []  # (course stix id, pattern stix id)

    for obj in objects:
        obj_type = obj.get("type")
        if obj_type == "attack-pattern":
            patterns[obj.get("id", "")] = obj
        elif obj_type == "course-of-action":
            courses[obj.get("id", "")] = Mitigation(
                id=_external_id(obj) or obj.get("id", ""),
                name=obj.get("name", ""),
                text=obj.get("description", ""),
            )
        elif obj_type == "relationship" and obj.get("relationship_type") == "mitigates":
            mitigates.append((obj.get("source_ref", ""), obj.get("target_ref", "")))
        elif obj_type == "x-mitre-collection":
            matrix_name = obj.get("name", matrix_name)
            version = obj.get("x_mitre_version", version)

    if not patterns:
        raise EmptyBundle("bundle contains no attack-pattern objects")

    mitigations_by_pattern: dict[str, list[Mitigation]] = {}
    for course_ref, pattern_ref in mitigates:
        if course_ref not in courses:
            logger.warning(
                "dropping mitigates relationship: course-of-action %s not in bundle",
                course_ref,
            )
            continue
        if pattern_ref not in patterns:
            logger.warning(
                "dropping mitigates relationship: attack-pattern %s not in bundle",
                pattern_ref,
            )
            continue
        mitigations_by_pattern.setdefault(pattern_ref, []).append(courses[course_ref])

    techniques: dict[TechniqueId, TechniqueRecord] = {}
    for stix_id, obj in patterns.items():
        external_id = _external_id(obj)
        if external_id is None:
            logger.warning("attack-pattern %s has no mitre external id; skipped", stix_id)
            continue
        try:
            tid = parse_technique_id(external_id)
        except ValidationError:
            logger.warning("attack-pattern %s has non-technique id %r; skipped",
                           stix_id, external_id)
            continue
        detection = obj.get("x_mitre_detection", "") or ""
        joined = sorted(
            mitigations_by_pattern.get(stix_id, []), key=lambda m: m.id
        )
        techniques[tid] = TechniqueRecord(
            id=tid,
            name=obj.get("name", ""),
            description=obj.get("description", ""),
            tactics=_tactics(obj),
            detections=(detection,) if detection.strip() else (),
            mitigations=tuple(joined),
            revoked=bool(obj.get("revoked", False) or obj.get("x_mitre_deprecated", False)),
        )

    # Attach sub-technique listings to their parents.
    subs_by_parent: dict[TechniqueId, list[TechniqueId]] = {}
    for tid in techniques:
        if tid.is_subtechnique():
            subs_by_parent.setdefault(tid.parent(), []).append(tid)
    for parent, subs in subs_by_parent.items():
        if parent in techniques:
            techniques[parent] = replace(
                techniques[parent], sub_technique_ids=tuple(sorted(subs))
            )

    return KnowledgeBase(techniques=techniques, matrix_name=matrix_name, version=version)


def get_technique(kb: KnowledgeBase, technique_id: TechniqueId) -> TechniqueRecord:
    try:
        return kb.techniques[technique_id]
    except KeyError:
        raise UnknownTechnique(f"no such technique: {technique_id}") from None


def countermeasures(kb: KnowledgeBase, technique_id: TechniqueId) -> tuple[list[str], list[Mitigation]]:
    """Detections and mitigations for a known technique; lists may be empty."""
    record = get_technique(kb, technique_id)
    return list(record.detections), list(record.mitigations)


def export_corpus(kb: KnowledgeBase) -> list[tuple[TechniqueId, str]]:
    """One (id, "name: description") entry per non-revoked technique.

    This is the unit that gets embedded; entries are id-sorted so downstream
    index builds are deterministic.
    """
    corpus = []
    for tid in sorted(kb.techniques):
        record = kb.techniques[tid]
        if record.revoked:
            continue
        corpus.append((tid, f"{record.name}: {record.description}"))
    return corpus


def save_snapshot(kb: KnowledgeBase, path: str | Path) -> None:
    """Write the canonical KB snapshot file for offline use."""
    payload = {
        "schema_version": SNAPSHOT_SCHEMA_VERSION,
        "matrix_name": kb.matrix_name,
        "version": kb.version,
        "techniques": [
            {
                "id": str(record.id),
                "name": record.name,
                "description": record.description,
                "tactics": list(record.tactics),
                "detections": list(record.detections),
                "mitigations": [
                    {"id": m.id, "name": m.name, "text": m.text}
                    for m in record.mitigations
                ],
                "sub_technique_ids": [str(s) for s in record.sub_technique_ids],
                "revoked": record.revoked,
            }
            for _, record in sorted(kb.techniques.items())
        ],
    }
    Path(path).write_text(
        json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def load_snapshot(path: str | Path) -> KnowledgeBase:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"snapshot is not valid JSON: {exc}") from None
    if payload.get("schema_version") != SNAPSHOT_SCHEMA_VERSION:
        raise SchemaError(
            f"unsupported snapshot schema_version: {payload.get('schema_version')!r}"
        )
    techniques = {}
    for obj in payload.get("techniques", []):
        tid = parse_technique_id(obj["id"])
        techniques[tid] = TechniqueRecord(
            id=tid,
            name=obj["name"],
            description=obj.get("description", ""),
            tactics=tuple(obj.get("tactics", [])),
            detections=tuple(obj.get("detections", [])),
            mitigations=tuple(
                Mitigation(id=m["id"], name=m["name"], text=m.get("text", ""))
                for m in obj.get("mitigations", [])
            ),
            sub_technique_ids=tuple(
                parse_technique_id(s) for s in obj.get("sub_technique_ids", [])
            ),
            revoked=bool(obj.get("revoked", False)),
        )
    return KnowledgeBase(
        techniques=techniques,
        matrix_name=payload.get("matrix_name", "Enterprise ATT&CK"),
        version=payload.get("version", "unknown"),
    )
