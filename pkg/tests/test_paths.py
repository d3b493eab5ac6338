from __future__ import annotations

import logging
import random
from collections import deque

import pytest

from tmf.errors import ValidationError
from tmf.gateway import ANALYST_PERSONA, Gateway, ScriptRule, ScriptedProvider
from tmf.identify import UnparseableResponse
from tmf.model import DataFlowRecord, ElementKind, Entity, IdentificationResult, Strategy, TechniqueId
from tmf.paths import (
    AttackPath,
    EntityGraph,
    GraphEdge,
    PathSource,
    UnknownEntity,
    UnknownFlowInResults,
    build_asset_prompt,
    build_entity_graph,
    cross_check,
    enumerate_paths,
    llm_attack_paths,
    parse_path_table,
)

TABLE_V_ROW_1_STEPS = (
    "1. The attacker compromises the VPN server using stolen credentials (T1552) "
    "or remote command execution (T1059). 2. Deploys a malicious payload (T1105) "
    "to maintain persistence. 3. Uses Network Sniffing (T1040) to gather "
    "intelligence about internal traffic. 4. Moves laterally to Business Servers "
    "using adversary-in-the-middle (T1557) or privilege escalation techniques. "
    "5. Executes data manipulation (T1565) or firmware corruption (T1495) on "
    "Business Servers."
)


def simple_graph(edges, names=None):
    nodes = {}
    for a, b in edges:
        nodes.setdefault(a, (names or {}).get(a, a.upper()))
        nodes.setdefault(b, (names or {}).get(b, b.upper()))
    graph_edges = tuple(
        GraphEdge(source=a, target=b, flow_id=f"{a}->{b}") for a, b in edges
    )
    return EntityGraph(nodes=nodes, edges=graph_edges)


@pytest.fixture
def purdue_entity_graph(purdue_graph):
    return build_entity_graph(
        list(purdue_graph.flows.values()), purdue_graph.entities
    )


def result(flow_id, *ids):
    return IdentificationResult(
        flow_id=flow_id,
        strategy=Strategy.CLASSIFIER,
        technique_ids=tuple(TechniqueId(t) for t in ids),
    )


def test_build_graph_annotates_edges():
    flows = [
        DataFlowRecord(id=f"f{i}", name=f"flow {i}", initiator_id=a, acceptor_id=b)
        for i, (a, b) in enumerate([("x", "y"), ("y", "z"), ("x", "z")])
    ]
    entities = {
        e: Entity(id=e, name=e.upper(), kind=ElementKind.PROCESS) for e in "xyz"
    }
    results = [result("f0", "T1040"), result("f1", "T1557"), result("f2")]
    graph = build_entity_graph(flows, entities, results)
    assert len(graph.edges) == 3
    by_flow = {edge.flow_id: edge for edge in graph.edges}
    assert by_flow["f0"].technique_ids == (TechniqueId("T1040"),)
    assert by_flow["f2"].technique_ids == ()


def test_build_graph_unknown_flow_in_results():
    flows = [DataFlowRecord(id="f0", name="n", initiator_id="x", acceptor_id="y")]
    entities = {
        e: Entity(id=e, name=e.upper(), kind=ElementKind.PROCESS) for e in "xy"
    }
    with pytest.raises(UnknownFlowInResults):
        build_entity_graph(flows, entities, [result("missing", "T1040")])


def test_flows_without_results_get_empty_sets(purdue_graph):
    graph = build_entity_graph(list(purdue_graph.flows.values()), purdue_graph.entities)
    assert all(edge.technique_ids == () for edge in graph.edges)


def test_linear_chain_single_path():
    graph = simple_graph([("a", "b"), ("b", "c")])
    paths = enumerate_paths(graph, "a", "c", max_depth=6)
    assert [p.node_sequence for p in paths] == [("a", "b", "c")]
    assert paths[0].source is PathSource.ENUMERATED


def test_disconnected_nodes_no_paths():
    graph = simple_graph([("a", "b"), ("c", "d")])
    assert enumerate_paths(graph, "a", "d", max_depth=6) == []


def test_unknown_entity_rejected():
    graph = simple_graph([("a", "b")])
    with pytest.raises(UnknownEntity):
        enumerate_paths(graph, "a", "zz", max_depth=3)


def test_resolve_accepts_case_insensitive_names():
    graph = simple_graph([("a", "b")], names={"a": "Human User", "b": "VPN Server"})
    assert graph.resolve("human user") == "a"
    assert graph.resolve("VPN Server") == "b"


def test_purdue_contains_three_reference_sequences(purdue_entity_graph):
    paths = enumerate_paths(purdue_entity_graph, "Human User", "Business Servers", 6)
    sequences = {p.node_sequence for p in paths}
    assert ("human_user", "vpn_server", "business_servers") in sequences
    assert (
        "human_user", "vpn_server", "domain_controller1", "business_servers"
    ) in sequences
    assert (
        "human_user", "vpn_server", "jump_server", "historian1", "business_servers"
    ) in sequences


def test_enumerated_paths_simple_and_edge_consistent(purdue_entity_graph):
    adjacency = purdue_entity_graph.adjacency()
    paths = enumerate_paths(purdue_entity_graph, "Human User", "Business Servers", 6)
    for path in paths:
        assert len(set(path.node_sequence)) == len(path.node_sequence)
        for step in path.steps:
            assert step.target in adjacency[step.source]
            assert step.technique_ids == adjacency[step.source][step.target]


def test_lexicographic_ordering(purdue_entity_graph):
    paths = enumerate_paths(purdue_entity_graph, "Human User", "Business Servers", 6)
    sequences = [p.node_sequence for p in paths]
    assert sequences == sorted(sequences)


def brute_force_paths(graph: EntityGraph, start: str, target: str, max_depth: int):
    """Independent oracle: breadth-first queue enumeration of simple paths."""
    adjacency = graph.adjacency()
    queue = deque([(start,)])
    found = []
    while queue:
        trail = queue.popleft()
        node = trail[-1]
        if len(trail) - 1 > max_depth:
            continue
        if node == target and len(trail) > 1:
            found.append(trail)
            continue
        if len(trail) - 1 == max_depth:
            continue
        for nxt in adjacency.get(node, {}):
            if nxt == target or nxt not in trail:
                queue.append(trail + (nxt,))
    return sorted(found)


def random_entity_graph(rng: random.Random, max_nodes: int = 12) -> EntityGraph:
    n = rng.randint(2, max_nodes)
    node_ids = [f"n{i}" for i in range(n)]
    edges = []
    for a in node_ids:
        for b in node_ids:
            if a != b and rng.random() < 0.25:
                edges.append(GraphEdge(source=a, target=b, flow_id=f"{a}->{b}"))
    return EntityGraph(nodes={i: i.upper() for i in node_ids}, edges=tuple(edges))


def test_enumeration_matches_brute_force_oracle():
    rng = random.Random(424242)
    for _ in range(60):
        graph = random_entity_graph(rng)
        nodes = sorted(graph.nodes)
        start, target = rng.sample(nodes, 2)
        depth = rng.randint(1, 6)
        got = [p.node_sequence for p in enumerate_paths(graph, start, target, depth)]
        assert got == brute_force_paths(graph, start, target, depth)


def test_path_count_monotone_in_depth(purdue_entity_graph):
    counts = [
        len(enumerate_paths(purdue_entity_graph, "Human User", "Business Servers", d))
        for d in range(1, 8)
    ]
    assert counts == sorted(counts)


# --- prompt ---------------------------------------------------------------


def test_asset_prompt_names_target_and_start(purdue_entity_graph):
    prompt = build_asset_prompt(purdue_entity_graph, "Human User", "Business Servers")
    assert "Business Servers" in prompt
    assert "Human User" in prompt
    assert prompt == build_asset_prompt(purdue_entity_graph, "Human User", "Business Servers")


def test_asset_prompt_one_row_per_flow():
    graph = simple_graph([("a", "b")])
    prompt = build_asset_prompt(graph, "a", "b")
    table_lines = [l for l in prompt.splitlines() if " | " in l]
    assert len(table_lines) == 2  # header plus one row


# --- LLM path parsing -----------------------------------------------------


def llm_gateway(reply: str) -> Gateway:
    return Gateway(
        ScriptedProvider([ScriptRule("target asset to be compromised", reply)]),
        system_text=ANALYST_PERSONA,
    )


def table_reply(*rows: tuple[str, str]) -> str:
    lines = [
        "| Predicted Attack Path | Execution Steps using ATT&CK Techniques |",
        "| --- | --- |",
    ]
    lines.extend(f"| {path} | {steps} |" for path, steps in rows)
    return "\n".join(lines)


def test_llm_paths_parse_reference_row(purdue_entity_graph, kb):
    reply = table_reply(
        ("Human User → VPN Server → Business Servers", TABLE_V_ROW_1_STEPS)
    )
    gateway = llm_gateway(reply)
    prompt = build_asset_prompt(purdue_entity_graph, "Human User", "Business Servers")
    paths = llm_attack_paths(prompt, gateway, kb, graph=purdue_entity_graph)
    assert len(paths) == 1
    path = paths[0]
    assert path.node_sequence == ("human_user", "vpn_server", "business_servers")
    assert path.source is PathSource.LLM
    assert len(path.steps) == 5
    step_ids = [{str(t) for t in step.technique_ids} for step in path.steps]
    assert step_ids == [
        {"T1552", "T1059"},
        {"T1105"},
        {"T1040"},
        {"T1557"},
        {"T1565", "T1495"},
    ]


def test_llm_paths_drop_malformed_token_with_warning(purdue_entity_graph, kb, caplog):
    reply = table_reply(
        (
            "Human User → VPN Server → Business Servers",
            "1. Encrypts data for ransom (T486) after entry (T1059).",
        )
    )
    gateway = llm_gateway(reply)
    prompt = build_asset_prompt(purdue_entity_graph, "Human User", "Business Servers")
    with caplog.at_level(logging.WARNING):
        paths = llm_attack_paths(prompt, gateway, kb, graph=purdue_entity_graph)
    ids = {str(t) for step in paths[0].steps for t in step.technique_ids}
    assert ids == {"T1059"}
    assert "T486" in caplog.text


def test_llm_paths_drop_unknown_valid_shape_id(purdue_entity_graph, kb, caplog):
    reply = table_reply(
        ("Human User → VPN Server → Business Servers", "1. Uses T9999 and T1040.")
    )
    gateway = llm_gateway(reply)
    prompt = build_asset_prompt(purdue_entity_graph, "Human User", "Business Servers")
    with caplog.at_level(logging.WARNING):
        paths = llm_attack_paths(prompt, gateway, kb, graph=purdue_entity_graph)
    ids = {str(t) for step in paths[0].steps for t in step.technique_ids}
    assert ids == {"T1040"}
    assert "T9999" in caplog.text


def test_llm_paths_unmatched_node_kept_and_flagged(purdue_entity_graph, kb):
    reply = table_reply(
        ("Mystery Box → Business Servers", "1. Something with T1040.")
    )
    gateway = llm_gateway(reply)
    prompt = build_asset_prompt(purdue_entity_graph, "Human User", "Business Servers")
    paths = llm_attack_paths(prompt, gateway, kb, graph=purdue_entity_graph)
    assert paths[0].node_sequence == ("Mystery Box", "business_servers")
    assert paths[0].unmatched_nodes == ("Mystery Box",)


def test_llm_empty_table_unparseable_after_reprompt(purdue_entity_graph, kb):
    gateway = Gateway(
        ScriptedProvider(
            [
                ScriptRule("table format only", "still nothing"),
                ScriptRule("target asset to be compromised", "no table here"),
            ]
        )
    )
    prompt = build_asset_prompt(purdue_entity_graph, "Human User", "Business Servers")
    with pytest.raises(UnparseableResponse):
        llm_attack_paths(prompt, gateway, kb, graph=purdue_entity_graph)


def test_parse_path_table_tolerates_numbered_column():
    rows = parse_path_table(
        "| # | Predicted Attack Path | Steps |\n"
        "| --- | --- | --- |\n"
        "| 1 | A -> B -> C | 1. First (T1040). 2. Second (T1557). |\n"
    )
    assert rows[0][0] == ["A", "B", "C"]
    assert len(rows[0][1]) == 2


# --- cross-check ----------------------------------------------------------


def test_cross_check_reference_row_present(purdue_entity_graph, kb):
    enumerated = enumerate_paths(purdue_entity_graph, "Human User", "Business Servers", 6)
    reply = table_reply(
        (
            "Human User → VPN Server → Domain Controller1 → Business Servers",
            "1. Entry (T1552). 2. Lateral movement (T1557). 3. Exfiltration (T1020).",
        )
    )
    gateway = llm_gateway(reply)
    prompt = build_asset_prompt(purdue_entity_graph, "Human User", "Business Servers")
    llm_paths = llm_attack_paths(prompt, gateway, kb, graph=purdue_entity_graph)
    report = cross_check(llm_paths, enumerated, purdue_entity_graph)
    assert report.checks[0].in_enumeration
    assert report.checks[0].off_graph_hops == ()
    assert report.summary()["present"] == 1


def test_cross_check_flags_off_graph_hop(purdue_entity_graph):
    skipping = AttackPath(
        node_sequence=("human_user", "business_servers"),
        steps=(),
        source=PathSource.LLM,
    )
    report = cross_check([skipping], [], purdue_entity_graph)
    assert not report.checks[0].in_enumeration
    assert report.checks[0].off_graph_hops == (("human_user", "business_servers"),)


def test_cross_check_empty():
    graph = simple_graph([("a", "b")])
    report = cross_check([], [], graph)
    assert report.checks == ()
    assert report.summary()["paths"] == 0


def test_enumerated_path_rejects_revisit():
    with pytest.raises(ValidationError):
        AttackPath(
            node_sequence=("a", "b", "a"),
            steps=(),
            source=PathSource.ENUMERATED,
        )
