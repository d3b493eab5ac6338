from __future__ import annotations

import json
import logging

import pytest

from tmf.attack_kb import KnowledgeBase, TechniqueRecord
from tmf.errors import ValidationError
from tmf.gateway import Gateway, ScriptRule, ScriptedProvider
from tmf.identify import (
    FORMAT_REMINDER,
    RAG_QUERY,
    VANILLA_QUERY,
    FilePredictionSource,
    GeneralAttack,
    IclExample,
    MissingPrediction,
    StrategyConfig,
    UnparseableResponse,
    classifier_identify,
    icl_identify,
    identify_flows,
    load_icl_examples,
    parse_general_attacks,
    parse_technique_list,
    rag_identify,
    render_basic_input,
    render_icl_prompt,
)
from tmf.model import (
    BasicInput,
    DataFlowRecord,
    ElementKind,
    Entity,
    FunctionalObject,
    Priority,
    ProcessStep,
    SecurityAttributes,
    Strategy,
    StrideThreat,
    TechniqueId,
    ThreatCategory,
    ThreatState,
    TriState,
)
from tmf.retrieval import HashEmbedder, RetrievalConfig, build_index
from tmf.stride import generate_threats


def make_basic_input(auth="yes", encrypt="unknown", threats=()):
    flow = DataFlowRecord(
        id="fx1",
        name="station telemetry",
        initiator_id="a",
        acceptor_id="b",
        definition="Telemetry streamed from the field station to the control center.",
        security=SecurityAttributes(
            requires_authentication=TriState.parse(auth),
            requires_encryption=TriState.parse(encrypt),
        ),
    )
    initiator = Entity(
        id="a",
        name="Field Station",
        kind=ElementKind.PROCESS,
        description="Roadside field station.",
        functions=(
            FunctionalObject(
                name="Telemetry Collection",
                description="Gathers sensor readings.",
                processes=(ProcessStep("Sample sensors", "Reads attached sensors."),),
            ),
        ),
    )
    acceptor = Entity(
        id="b",
        name="Control Center",
        kind=ElementKind.PROCESS,
        description="Central operations facility.",
    )
    return BasicInput(flow=flow, initiator=initiator, acceptor=acceptor,
                      stride_threats=tuple(threats))


def threat(category, desc, flow_id="fx1"):
    return StrideThreat(
        id=f"t-{category.name.lower()}",
        category=category,
        title="x",
        description=desc,
        interaction_id=flow_id,
        subject_element=flow_id,
        priority=Priority.MEDIUM,
        state=ThreatState.NOT_STARTED,
    )


# --- rendering ------------------------------------------------------------


def test_render_header_fields():
    text = render_basic_input(make_basic_input(auth="yes", encrypt="unknown"))
    assert "Requires Authentication?: yes" in text
    assert "Requires Encryption?: unknown" in text
    assert text.startswith("Data Flow: station telemetry [fx1]")
    assert "Description of the Initiator: Roadside field station." in text
    assert "Function: Telemetry Collection: Gathers sensor readings." in text
    assert "  Sample sensors: Reads attached sensors." in text
    assert "Definition of station telemetry: Telemetry streamed" in text


def test_render_zero_threats_placeholder():
    text = render_basic_input(make_basic_input())
    assert "STRIDE-based threats associated with the data flow:" in text
    assert text.rstrip().endswith("(none)")


def test_render_electronic_screening_threat_lines(cvo03_graph):
    report = generate_threats(cvo03_graph)
    flow = cvo03_graph.flows["cvo03-1a"]
    initiator, acceptor = cvo03_graph.flow_endpoints(flow.id)
    bi = BasicInput(
        flow=flow,
        initiator=initiator,
        acceptor=acceptor,
        stride_threats=report.interactions[flow.id],
    )
    text = render_basic_input(bi)
    section = text.split("STRIDE-based threats associated with the data flow:", 1)[1]
    for prefix in ("Information Disclosure:", "Repudiation:", "Tampering:"):
        assert prefix in section


def test_render_is_deterministic_and_id_sensitive():
    a = render_basic_input(make_basic_input())
    b = render_basic_input(make_basic_input())
    assert a == b
    assert "[fx1]" in a


# --- parsers --------------------------------------------------------------


def test_parse_general_attacks_plain_dict():
    attacks = parse_general_attacks(
        '{"SQL Injection": "Injecting statements.", "MITM": "Intercepting traffic."}'
    )
    assert [a.name for a in attacks] == ["SQL Injection", "MITM"]


def test_parse_general_attacks_fenced_with_prose():
    text = (
        "Sure, here are the attacks:\n```python\n"
        '{"SQL Injection": "Injecting statements.",\n "MITM": "Intercepting traffic."}\n'
        "```\nLet me know if you need more."
    )
    attacks = parse_general_attacks(text)
    assert len(attacks) == 2
    assert attacks[1].description == "Intercepting traffic."


def test_parse_general_attacks_refusal():
    with pytest.raises(UnparseableResponse):
        parse_general_attacks("I cannot answer that.")


def test_parse_technique_list_literal():
    assert parse_technique_list('["T1552", "T1059"]') == [
        TechniqueId("T1552"), TechniqueId("T1059"),
    ]


def test_parse_technique_list_fallback_scan():
    assert parse_technique_list("T1566.001 and also T1566") == [
        TechniqueId("T1566.001"), TechniqueId("T1566"),
    ]


def test_parse_technique_list_empty_list_is_unparseable():
    with pytest.raises(UnparseableResponse):
        parse_technique_list("[]")


def test_parse_technique_list_dedupes_preserving_order():
    assert parse_technique_list('["T1059", "T1040", "T1059"]') == [
        TechniqueId("T1059"), TechniqueId("T1040"),
    ]


# --- RAG pipeline ---------------------------------------------------------

CORPUS_TEXTS = {
    "T1040": "Network Sniffing: passively capturing traffic on the network to steal credentials and map services",
    "T1557": "Adversary-in-the-Middle: intercepting and relaying traffic between two network parties",
    "T1565": "Data Manipulation: intercepting and relaying traffic between two network parties to alter records",
    "T1486": "Data Encrypted for Impact: encrypting files across systems to interrupt availability and demand ransom",
    "T1059": "Command and Scripting Interpreter: abusing shells and scripting runtimes to execute commands",
}

AGENT1_REPLY = json.dumps(
    {
        "Network Sniffing": "passively capturing traffic on the network to steal credentials and map services",
        "Man-in-the-Middle Attack": "intercepting and relaying traffic between two network parties",
    }
)


@pytest.fixture
def synthetic_kb():
    techniques = {}
    for raw, text in CORPUS_TEXTS.items():
        tid = TechniqueId(raw)
        name, description = text.split(": ", 1)
        techniques[tid] = TechniqueRecord(id=tid, name=name, description=description)
    return KnowledgeBase(techniques=techniques, matrix_name="test", version="0")


@pytest.fixture
def synthetic_index(synthetic_kb):
    from tmf.attack_kb import export_corpus

    embedder = HashEmbedder(dim=256, seed=0)
    return embedder, build_index(export_corpus(synthetic_kb), embedder, RetrievalConfig())


def rag_gateway(agent2_reply: str) -> Gateway:
    return Gateway(
        ScriptedProvider(
            [
                ScriptRule("possible cyberattacks", AGENT1_REPLY),
                ScriptRule("from the table above", agent2_reply),
            ]
        )
    )


def test_rag_scripted_end_to_end(synthetic_kb, synthetic_index):
    embedder, index = synthetic_index
    gateway = rag_gateway('["T1040", "T1557"]')
    result = rag_identify(
        make_basic_input(), synthetic_kb, index, embedder, gateway, StrategyConfig()
    )
    assert result.strategy is Strategy.RAG
    assert [str(t) for t in result.technique_ids] == ["T1040", "T1557"]
    assert result.candidates is not None
    assert {str(t) for t, _ in result.candidates} == {"T1040", "T1557", "T1565"}
    assert len(result.transcripts) == 2
    assert VANILLA_QUERY in result.transcripts[0][0]
    assert RAG_QUERY in result.transcripts[1][0]
    assert result.flags == ()


def test_rag_candidates_respect_cutoff_and_top_k(synthetic_kb, synthetic_index):
    embedder, index = synthetic_index
    gateway = rag_gateway('["T1040"]')
    cfg = StrategyConfig()
    result = rag_identify(make_basic_input(), synthetic_kb, index, embedder, gateway, cfg)
    assert all(sim >= cfg.retrieval.cutoff for _, sim in result.candidates)
    # Re-derive the union with the tested retrieval primitive.
    from tmf.retrieval import query

    expected: dict = {}
    for attack_name, attack_desc in json.loads(AGENT1_REPLY).items():
        probe = embedder.embed([f"{attack_name}: {attack_desc}"])[0]
        hits = query(index, probe, cfg.retrieval)
        assert len(hits) <= cfg.retrieval.top_k
        for tid, sim in hits:
            expected[tid] = max(sim, expected.get(tid, -2.0))
    assert dict(result.candidates) == expected


def test_rag_keeps_and_flags_out_of_candidate_valid_id(synthetic_kb, synthetic_index):
    embedder, index = synthetic_index
    gateway = rag_gateway('["T1040", "T1486"]')
    result = rag_identify(
        make_basic_input(), synthetic_kb, index, embedder, gateway, StrategyConfig()
    )
    assert TechniqueId("T1486") in result.technique_ids
    assert "out-of-candidate:T1486" in result.flags


def test_rag_drops_unknown_id_with_warning(synthetic_kb, synthetic_index, caplog):
    embedder, index = synthetic_index
    gateway = rag_gateway('["T1040", "T9999"]')
    with caplog.at_level(logging.WARNING):
        result = rag_identify(
            make_basic_input(), synthetic_kb, index, embedder, gateway, StrategyConfig()
        )
    assert TechniqueId("T9999") not in result.technique_ids
    assert "T9999" in caplog.text


def test_rag_no_candidates_flagged_not_error(synthetic_kb):
    # An index whose entries share no vocabulary with the scripted attacks.
    embedder = HashEmbedder(dim=256, seed=0)
    corpus = [
        (TechniqueId("T1059"), "totally unrelated corpus entry about interpreters"),
        (TechniqueId("T1486"), "another unrelated entry about ransom encryption"),
    ]
    index = build_index(corpus, embedder, RetrievalConfig())
    gateway = rag_gateway("ignored")
    result = rag_identify(
        make_basic_input(), synthetic_kb, index, embedder, gateway, StrategyConfig()
    )
    assert result.technique_ids == ()
    assert result.flags == ("no-candidates",)
    assert len(result.transcripts) == 1  # the second agent is never called


def test_rag_reprompts_once_on_unparseable(synthetic_kb, synthetic_index):
    embedder, index = synthetic_index
    gateway = Gateway(
        ScriptedProvider(
            [
                ScriptRule(FORMAT_REMINDER, AGENT1_REPLY),
                ScriptRule("possible cyberattacks", "no dictionary here"),
                ScriptRule("from the table above", '["T1040"]'),
            ]
        )
    )
    result = rag_identify(
        make_basic_input(), synthetic_kb, index, embedder, gateway, StrategyConfig()
    )
    assert [str(t) for t in result.technique_ids] == ["T1040"]
    assert len(result.transcripts) == 3
    assert result.transcripts[1][0].endswith(FORMAT_REMINDER)


def test_rag_normalizes_subtechniques(synthetic_kb, synthetic_index):
    embedder, index = synthetic_index
    gateway = rag_gateway('["T1557.001", "T1040"]')
    result = rag_identify(
        make_basic_input(), synthetic_kb, index, embedder, gateway, StrategyConfig()
    )
    assert TechniqueId("T1557") in result.technique_ids
    assert all(not t.is_subtechnique() for t in result.technique_ids)


# --- ICL ------------------------------------------------------------------


def example(n: int) -> IclExample:
    return IclExample(
        basic_input_text=f"Data Flow: example flow {n} [ex{n}]",
        technique_ids=(TechniqueId("T1040"),),
    )


def count_example_blocks(prompt: str) -> int:
    return sum(1 for line in prompt.splitlines() if line.startswith("Example ") and line.endswith(":"))


@pytest.mark.parametrize("shots", [0, 1, 8])
def test_icl_prompt_block_counts(shots):
    examples = [example(i) for i in range(9)]
    prompt = render_icl_prompt(make_basic_input(), examples, shots)
    assert count_example_blocks(prompt) == shots


def test_icl_zero_shot_has_no_example_block():
    prompt = render_icl_prompt(make_basic_input(), [example(0)], 0)
    assert "Example" not in prompt
    assert "Data Flow: station telemetry [fx1]" in prompt


def test_icl_shots_exceeding_examples_rejected():
    with pytest.raises(ValidationError) as err:
        render_icl_prompt(make_basic_input(), [example(i) for i in range(8)], 9)
    assert "9" in str(err.value) and "8" in str(err.value)


def test_icl_identify_scripted(synthetic_kb):
    gateway = Gateway(
        ScriptedProvider([ScriptRule("Which MITRE ATT&CK techniques", '["T1486"]')])
    )
    result = icl_identify(
        make_basic_input(), [example(i) for i in range(8)], synthetic_kb, gateway,
        StrategyConfig(strategy=Strategy.ICL, shots=8),
    )
    assert [str(t) for t in result.technique_ids] == ["T1486"]
    assert result.strategy is Strategy.ICL


def test_icl_examples_file_round_trip(tmp_path, synthetic_kb):
    path = tmp_path / "examples.jsonl"
    rows = [
        {"basic_input": f"basic input {i}", "technique_ids": ["T1040", "T1557"]}
        for i in range(3)
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows))
    examples = load_icl_examples(path, synthetic_kb)
    assert len(examples) == 3
    assert examples[0].technique_ids == (TechniqueId("T1040"), TechniqueId("T1557"))


def test_icl_examples_file_rejects_unknown_ids(tmp_path, synthetic_kb):
    path = tmp_path / "examples.jsonl"
    path.write_text(json.dumps({"basic_input": "x", "technique_ids": ["T9999"]}))
    with pytest.raises(ValidationError):
        load_icl_examples(path, synthetic_kb)


# --- classifier -----------------------------------------------------------


def predictions_file(tmp_path, scores, flow_id="fx1"):
    path = tmp_path / "predictions.jsonl"
    path.write_text(json.dumps({"flow_id": flow_id, "scores": scores}))
    return path


def test_classifier_thresholding(tmp_path, synthetic_kb):
    source = FilePredictionSource(
        predictions_file(tmp_path, {"T1552": 0.91, "T1040": 0.40})
    )
    # T1552 is not in the synthetic KB, so extend it for this test.
    kb = KnowledgeBase(
        techniques={
            **synthetic_kb.techniques,
            TechniqueId("T1552"): TechniqueRecord(
                id=TechniqueId("T1552"), name="Unsecured Credentials"
            ),
        },
    )
    result = classifier_identify(
        make_basic_input(), kb, source, StrategyConfig(strategy=Strategy.CLASSIFIER)
    )
    assert [str(t) for t in result.technique_ids] == ["T1552"]


def test_classifier_boundary_score_included(tmp_path, synthetic_kb):
    source = FilePredictionSource(predictions_file(tmp_path, {"T1040": 0.5}))
    result = classifier_identify(
        make_basic_input(), synthetic_kb, source,
        StrategyConfig(strategy=Strategy.CLASSIFIER, threshold=0.5),
    )
    assert [str(t) for t in result.technique_ids] == ["T1040"]


def test_classifier_all_below_threshold_flagged(tmp_path, synthetic_kb):
    source = FilePredictionSource(predictions_file(tmp_path, {"T1040": 0.2, "T1557": 0.1}))
    result = classifier_identify(
        make_basic_input(), synthetic_kb, source, StrategyConfig(strategy=Strategy.CLASSIFIER)
    )
    assert result.technique_ids == ()
    assert result.flags == ("empty-result",)


def test_classifier_missing_flow(tmp_path, synthetic_kb):
    source = FilePredictionSource(predictions_file(tmp_path, {"T1040": 0.9}, flow_id="other"))
    with pytest.raises(MissingPrediction):
        classifier_identify(
            make_basic_input(), synthetic_kb, source,
            StrategyConfig(strategy=Strategy.CLASSIFIER),
        )


# --- orchestration --------------------------------------------------------


def test_identify_flows_returns_flow_id_order(synthetic_kb, tmp_path):
    inputs = []
    rows = []
    for flow_id in ("f3", "f1", "f2"):
        flow = DataFlowRecord(
            id=flow_id, name=flow_id, initiator_id="a", acceptor_id="b", definition="",
        )
        a = Entity(id="a", name="A", kind=ElementKind.PROCESS)
        b = Entity(id="b", name="B", kind=ElementKind.PROCESS)
        inputs.append(BasicInput(flow=flow, initiator=a, acceptor=b))
        rows.append(json.dumps({"flow_id": flow_id, "scores": {"T1040": 0.9}}))
    path = tmp_path / "predictions.jsonl"
    path.write_text("\n".join(rows))
    source = FilePredictionSource(path)
    cfg = StrategyConfig(strategy=Strategy.CLASSIFIER)

    def worker(bi):
        return classifier_identify(bi, synthetic_kb, source, cfg)

    results = identify_flows(inputs, worker, parallelism=3)
    assert [r.flow_id for r in results] == ["f1", "f2", "f3"]


def test_general_attack_requires_name():
    with pytest.raises(ValidationError):
        GeneralAttack(name="   ")


def test_icl_example_requires_technique_ids():
    with pytest.raises(ValidationError):
        IclExample(basic_input_text="x", technique_ids=())


def test_render_injective_over_distinct_flow_ids():
    flows = {}
    for flow_id in ("fa", "fb"):
        flow = DataFlowRecord(
            id=flow_id, name="same name", initiator_id="a", acceptor_id="b",
            definition="same definition",
        )
        a = Entity(id="a", name="A", kind=ElementKind.PROCESS)
        b = Entity(id="b", name="B", kind=ElementKind.PROCESS)
        flows[flow_id] = render_basic_input(BasicInput(flow=flow, initiator=a, acceptor=b))
    assert flows["fa"] != flows["fb"]


def test_revoked_ids_dropped_from_results(tmp_path, synthetic_kb):
    revoked = TechniqueId("T1503")
    kb = KnowledgeBase(
        techniques={
            **synthetic_kb.techniques,
            revoked: TechniqueRecord(id=revoked, name="Old Thing", revoked=True),
        },
    )
    source = FilePredictionSource(
        predictions_file(tmp_path, {"T1503": 0.99, "T1040": 0.8})
    )
    result = classifier_identify(
        make_basic_input(), kb, source, StrategyConfig(strategy=Strategy.CLASSIFIER)
    )
    assert revoked not in result.technique_ids
    assert [str(t) for t in result.technique_ids] == ["T1040"]


def test_http_prediction_source_round_trip(synthetic_kb):
    import json as json_mod
    import threading
    from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

    received = {}

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            received["body"] = json_mod.loads(self.rfile.read(length))
            body = json_mod.dumps({"scores": {"T1040": 0.9, "T1557": 0.2}}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        from tmf.identify import HttpPredictionSource

        source = HttpPredictionSource(f"http://127.0.0.1:{server.server_address[1]}")
        bi = make_basic_input()
        result = classifier_identify(
            bi, synthetic_kb, source, StrategyConfig(strategy=Strategy.CLASSIFIER)
        )
        assert [str(t) for t in result.technique_ids] == ["T1040"]
        assert received["body"]["basic_input"] == render_basic_input(bi)
    finally:
        server.shutdown()


def test_http_prediction_source_unreachable(synthetic_kb):
    from tmf.identify import HttpPredictionSource, SourceUnavailable

    source = HttpPredictionSource("http://127.0.0.1:9")
    with pytest.raises(SourceUnavailable):
        classifier_identify(
            make_basic_input(), synthetic_kb, source,
            StrategyConfig(strategy=Strategy.CLASSIFIER),
        )
