"""Deterministic STRIDE-per-element threat generation.

For every data flow the engine applies rules for three subject roles: the
flow edge itself, the source entity, and the target entity. The rule table
is data: it can be replaced wholesale from a JSON file, so fidelity to any
particular threat-modeling tool's rule set is configuration, not code.
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass, field
from pathlib import Path

from tmf.dfd import DfdGraph
from tmf.errors import ValidationError
from tmf.model import (
    ElementKind,
    Entity,
    Priority,
    StrideThreat,
    ThreatCategory,
    ThreatState,
)

FLOW_EDGE = "flow"
_ROLE_PREFIXES = ("source", "target")

_ALLOWED_PLACEHOLDERS = {"flow_name", "source", "target"}


@dataclass(frozen=True)
class StrideRule:
    """One (category, templates, priority) entry of the rule table."""

    category: ThreatCategory
    title: str
    description: str
    priority: Priority = Priority.MEDIUM

    def __post_init__(self) -> None:
        for template in (self.title, self.description):
            fields_used = {
                name for _, name, _, _ in string.Formatter().parse(template) if name
            }
            unknown = fields_used - _ALLOWED_PLACEHOLDERS
            if unknown:
                raise ValidationError(
                    f"rule template uses unknown placeholder(s): {sorted(unknown)}"
                )


@dataclass(frozen=True)
class StrideRuleTable:
    """Role key -> applicable rules. Role keys are ``flow`` and
    ``source:<kind>`` / ``target:<kind>`` for each element kind."""

    rules: dict[str, tuple[StrideRule, ...]]

    def __post_init__(self) -> None:
        missing = set(all_role_keys()) - set(self.rules)
        if missing:
            raise ValidationError(f"rule table not total: missing roles {sorted(missing)}")

    def categories_for(self, role: str) -> set[ThreatCategory]:
        return {rule.category for rule in self.rules[role]}


def all_role_keys() -> list[str]:
    keys = [FLOW_EDGE]
    for prefix in _ROLE_PREFIXES:
        for kind in ElementKind:
            keys.append(f"{prefix}:{kind.value}")
    return keys


def role_key(prefix: str, kind: ElementKind) -> str:
    return f"{prefix}:{kind.value}"


def _rule(category: ThreatCategory, title: str, description: str,
          priority: Priority = Priority.MEDIUM) -> StrideRule:
    return StrideRule(category=category, title=title, description=description,
                      priority=priority)


def default_rule_table() -> StrideRuleTable:
    """The built-in STRIDE-per-element mapping.

    Flow edges get tampering/disclosure/denial; target processes get the
    full six; source processes and external interactors get spoofing and
    repudiation; data stores get tampering/repudiation/disclosure/denial.
    """
    C = ThreatCategory
    interactor_rules = (
        _rule(
            C.SPOOFING,
            "Spoofing of {source}",
            "{source} may be spoofed by an attacker and this may lead to unauthorized "
            "access via {flow_name}. Consider using a standard authentication mechanism "
            "to identify the external entity.",
        ),
        _rule(
            C.REPUDIATION,
            "External Entity {source} Potentially Denies Sending Data",
            "{source} claims that it did not send data across {flow_name}. Consider "
            "using logging or auditing to record the source, time, and summary of the "
            "sent data.",
        ),
    )
    interactor_target_rules = (
        _rule(
            C.SPOOFING,
            "Spoofing of {target}",
            "{target} may be spoofed by an attacker and this may lead to data being "
            "sent to the attacker's target instead of {target}. Consider using a "
            "standard authentication mechanism to identify the external entity.",
        ),
        _rule(
            C.REPUDIATION,
            "External Entity {target} Potentially Denies Receiving Data",
            "{target} claims that it did not receive data from a source outside the "
            "trust boundary. Consider using logging or auditing to record the source, "
            "time, and summary of the received data.",
        ),
    )
    datastore_rules = (
        _rule(
            C.TAMPERING,
            "Potential Tampering with Data in {target}",
            "Data stored in {target} may be maliciously altered by an attacker "
            "reachable through {flow_name}. Ensure integrity controls and access "
            "control lists protect persistent data.",
        ),
        _rule(
            C.REPUDIATION,
            "Potential Repudiation Involving {target}",
            "Operations against {target} over {flow_name} may be performed without "
            "accountability. Consider using logging or auditing to record the source, "
            "time, and summary of each operation.",
        ),
        _rule(
            C.INFORMATION_DISCLOSURE,
            "Potential Disclosure of Data Held by {target}",
            "An attacker able to read {target} through {flow_name} obtains information "
            "that should not be exposed. Consider encryption at rest and strict access "
            "control.",
            Priority.HIGH,
        ),
        _rule(
            C.DENIAL_OF_SERVICE,
            "Potential Denial of Service Against {target}",
            "{target} may be rendered unavailable by an attacker exhausting it through "
            "{flow_name}, denying legitimate use of stored data.",
        ),
    )
    rules: dict[str, tuple[StrideRule, ...]] = {
        FLOW_EDGE: (
            _rule(
                ThreatCategory.TAMPERING,
                "Potential Lack of Input Validation for {target}",
                "Data flowing across {flow_name} may be tampered with by an attacker. "
                "This may lead to a denial of service attack against {target} or an "
                "elevation of privilege attack against {target} or an information "
                "disclosure by {target}. Failure to verify that input is as expected "
                "is a root cause of a very large number of exploitable issues. "
                "Consider all paths and the way they handle data. Verify that all "
                "input is verified for correctness using an approved list input "
                "validation approach.",
            ),
            _rule(
                ThreatCategory.INFORMATION_DISCLOSURE,
                "Data Flow Sniffing",
                "Data flowing across {flow_name} may be sniffed by an attacker. "
                "Depending on what type of data an attacker can read, it may be used "
                "to attack other parts of the system or simply be a disclosure of "
                "information leading to compliance violations. Consider encrypting "
                "the data flow.",
                Priority.HIGH,
            ),
            _rule(
                ThreatCategory.DENIAL_OF_SERVICE,
                "Potential Data Flow Interruption",
                "An external agent could interrupt data flowing across {flow_name} in "
                "either direction, preventing {target} from receiving the data it "
                "depends on.",
            ),
        ),
        role_key("source", ElementKind.PROCESS): (
            _rule(
                C.SPOOFING,
                "Spoofing of Source Process {source}",
                "{source} may be spoofed by an attacker and this may lead to incorrect "
                "data delivered to {target} via {flow_name}. Consider using a standard "
                "authentication mechanism to identify the source process.",
            ),
            _rule(
                C.REPUDIATION,
                "Potential Source Repudiation by {source}",
                "{source} claims that it did not send the data carried by {flow_name}. "
                "Consider using logging or auditing to record the source, time, and "
                "summary of the sent data.",
            ),
        ),
        role_key("target", ElementKind.PROCESS): (
            _rule(
                C.SPOOFING,
                "Spoofing the {target} Process",
                "{target} may be spoofed by an attacker and this may lead to "
                "information disclosure by {source} sending data to the attacker "
                "instead of {target}. Consider using a standard authentication "
                "mechanism to identify the destination process.",
            ),
            _rule(
                C.TAMPERING,
                "Potential Tampering with {target} Processing",
                "An attacker able to influence {target} through {flow_name} may alter "
                "its processing or stored state. Validate and constrain every input "
                "{target} accepts.",
            ),
            _rule(
                C.REPUDIATION,
                "Potential Data Repudiation by {target}",
                "{target} claims that it did not receive data from a source outside "
                "the trust boundary. Consider using logging or auditing to record the "
                "source, time, and summary of the received data.",
                Priority.HIGH,
            ),
            _rule(
                C.INFORMATION_DISCLOSURE,
                "Potential Information Disclosure by {target}",
                "Improper data protection of {target} can allow an attacker to read "
                "information not intended for disclosure, including data received "
                "over {flow_name}.",
            ),
            _rule(
                C.DENIAL_OF_SERVICE,
                "Potential Process Crash or Stop for {target}",
                "{target} crashes, halts, stops or runs slowly under attack through "
                "{flow_name}; in all cases it violates an availability metric.",
            ),
            _rule(
                C.ELEVATION_OF_PRIVILEGE,
                "Elevation Using Impersonation of {target}",
                "{target} may be able to impersonate the context of {source} in order "
                "to gain additional privilege, or an attacker may pass crafted data "
                "through {flow_name} to change its flow of execution.",
                Priority.HIGH,
            ),
        ),
        role_key("source", ElementKind.EXTERNAL_INTERACTOR): interactor_rules,
        role_key("target", ElementKind.EXTERNAL_INTERACTOR): interactor_target_rules,
        role_key("source", ElementKind.DATA_STORE): (
            _rule(
                C.TAMPERING,
                "Potential Tampering with Data from {source}",
                "Data read from {source} into {flow_name} may have been maliciously "
                "altered at rest. Ensure integrity controls protect persistent data.",
            ),
            _rule(
                C.REPUDIATION,
                "Potential Repudiation of Reads from {source}",
                "Reads from {source} over {flow_name} may be performed without "
                "accountability. Consider logging data-store access.",
            ),
            _rule(
                C.INFORMATION_DISCLOSURE,
                "Potential Disclosure of Data Held by {source}",
                "An attacker able to read {source} through {flow_name} obtains "
                "information that should not be exposed. Consider encryption at rest "
                "and strict access control.",
                Priority.HIGH,
            ),
            _rule(
                C.DENIAL_OF_SERVICE,
                "Potential Denial of Service Against {source}",
                "{source} may be rendered unavailable by an attacker, preventing "
                "{target} from receiving the data it depends on via {flow_name}.",
            ),
        ),
        role_key("target", ElementKind.DATA_STORE): datastore_rules,
    }
    return StrideRuleTable(rules=rules)


def load_rule_table(path: str | Path) -> StrideRuleTable:
    """Load a replacement rule table from JSON.

    Format: ``{"rules": {"<role>": [{"category", "title", "description",
    "priority"?}, ...], ...}}``. Roles omitted from the file fall back to the
    default table so partial overrides stay total.
    """
    document = json.loads(Path(path).read_text(encoding="utf-8"))
    base = dict(default_rule_table().rules)
    for role, entries in document.get("rules", {}).items():
        if role not in base:
            raise ValidationError(f"unknown role key in rules file: {role!r}")
        base[role] = tuple(
            StrideRule(
                category=ThreatCategory.parse(entry["category"]),
                title=entry["title"],
                description=entry["description"],
                priority=Priority(entry.get("priority", "Medium")),
            )
            for entry in entries
        )
    return StrideRuleTable(rules=base)


@dataclass(frozen=True)
class StrideReport:
    """All generated threats, grouped per interaction, plus state totals."""

    graph_id: str
    interactions: dict[str, tuple[StrideThreat, ...]] = field(default_factory=dict)

    @property
    def threats(self) -> list[StrideThreat]:
        return [t for group in self.interactions.values() for t in group]

    def summary(self) -> dict[str, int]:
        counts = {state.value: 0 for state in ThreatState}
        for threat in self.threats:
            counts[threat.state.value] += 1
        counts["Total"] = len(self.threats)
        return counts


def _graph_fingerprint(graph: DfdGraph) -> str:
    digest = hashlib.sha256()
    for entity_id in sorted(graph.entities):
        entity = graph.entities[entity_id]
        digest.update(f"e|{entity.id}|{entity.kind.value}|{entity.name}|{entity.boundary_id}".encode())
    for flow_id in sorted(graph.flows):
        flow = graph.flows[flow_id]
        digest.update(f"f|{flow.id}|{flow.initiator_id}|{flow.acceptor_id}|{flow.name}".encode())
    return digest.hexdigest()[:12]


def _threat_id(interaction_id: str, role: str, category: ThreatCategory) -> str:
    key = f"{interaction_id}|{role}|{category.name}"
    return "TH-" + hashlib.sha256(key.encode()).hexdigest()[:10].upper()


def _crosses_boundary(source: Entity, target: Entity) -> bool:
    return source.boundary_id != target.boundary_id


_ESCALATED = {ThreatCategory.TAMPERING, ThreatCategory.SPOOFING}


def generate_threats(graph: DfdGraph, rules: StrideRuleTable | None = None) -> StrideReport:
    """Emit one threat per (flow, applicable rule); total over valid graphs.

    Threat ids are stable hashes of the interaction id and rule key, so
    identical inputs produce byte-identical reports. Tampering and spoofing
    threats on boundary-crossing flows are escalated from medium to high.
    """
    table = rules if rules is not None else default_rule_table()
    interactions: dict[str, tuple[StrideThreat, ...]] = {}

    for flow in graph.sorted_flows():
        source, target = graph.flow_endpoints(flow.id)
        crossing = _crosses_boundary(source, target)
        generated: list[StrideThreat] = []
        roles = (
            (FLOW_EDGE, FLOW_EDGE),
            (role_key("source", source.kind), "source"),
            (role_key("target", target.kind), "target"),
        )
        for role, subject in roles:
            subject_element = {
                FLOW_EDGE: flow.id,
                "source": source.id,
                "target": target.id,
            }[subject]
            for rule in table.rules[role]:
                priority = rule.priority
                if crossing and rule.category in _ESCALATED and priority is Priority.MEDIUM:
                    priority = Priority.HIGH
                context = {
                    "flow_name": flow.name,
                    "source": source.name,
                    "target": target.name,
                }
                generated.append(
                    StrideThreat(
                        id=_threat_id(flow.id, role + "|" + rule.title, rule.category),
                        category=rule.category,
                        title=rule.title.format(**context),
                        description=rule.description.format(**context),
                        interaction_id=flow.id,
                        subject_element=subject_element,
                        priority=priority,
                        state=ThreatState.NOT_STARTED,
                    )
                )
        interactions[flow.id] = tuple(generated)

    return StrideReport(graph_id=_graph_fingerprint(graph), interactions=interactions)
