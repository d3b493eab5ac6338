"""Attack-technique identification strategies and all prompt plumbing.

Three routes map a data flow (rendered as the basic-input block) to MITRE
ATT&CK technique ids: a two-agent retrieval pipeline, in-context prompting
with worked examples, and an external classifier's score vectors. Every
route KB-validates its output and, by default, normalizes sub-techniques to
their parents so label spaces stay comparable across strategies.
"""

from __future__ import annotations

import ast
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol, Sequence

from tmf.attack_kb import KnowledgeBase
from tmf.errors import ProviderError, ValidationError
from tmf.gateway import Gateway
from tmf.model import (
    TECHNIQUE_ID_SCAN_RE,
    BasicInput,
    IdentificationResult,
    Strategy,
    TechniqueId,
    parse_technique_id,
)
from tmf.retrieval import (
    Embedder,
    RetrievalConfig,
    VectorIndex,
    ensure_embedder,
    query,
)

logger = logging.getLogger(__name__)

VANILLA_QUERY = (
    "What are the possible cyberattacks that can be used to attack this "
    "information flow? Return them in a Python dictionary format with the key "
    "being the cyberattack technique and the value being the technique "
    "description."
)

RAG_QUERY = (
    "Which MITRE ATT&CK techniques from the table above can be used to attack "
    "the data flow? Provide the technique IDs in Python list format."
)

FORMAT_REMINDER = "Answer in the requested format only."


class UnparseableResponse(ProviderError):
    pass


class MissingPrediction(ValidationError):
    pass


class SourceUnavailable(ProviderError):
    pass


@dataclass(frozen=True)
class GeneralAttack:
    """One generically-named cyberattack proposed by the first agent."""

    name: str
    description: str = ""

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise ValidationError("attack name must be non-empty")

    def probe_text(self) -> str:
        return f"{self.name}: {self.description}"


@dataclass(frozen=True)
class IclExample:
    """A worked example: basic-input text plus its expert-assigned techniques."""

    basic_input_text: str
    technique_ids: tuple[TechniqueId, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "technique_ids", tuple(self.technique_ids))
        if not self.technique_ids:
            raise ValidationError("an example must carry at least one technique id")


@dataclass(frozen=True)
class StrategyConfig:
    strategy: Strategy = Strategy.RAG
    shots: int = 8
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    threshold: float = 0.5
    keep_subtechniques: bool = False

    def __post_init__(self) -> None:
        if self.shots < 0:
            raise ValidationError("shots must be >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError("threshold must be in (0, 1)")


def render_basic_input(bi: BasicInput) -> str:
    """Render the per-flow input block fed to every strategy.

    Deterministic, and injective over flows with distinct ids: the flow id
    is part of the header line.
    """
    lines = [
        f"Data Flow: {bi.flow.name} [{bi.flow.id}]",
        f"Initiator: {bi.initiator.name}",
        f"Acceptor: {bi.acceptor.name}",
        f"Requires Authentication?: {bi.flow.security.requires_authentication.value}",
        f"Requires Encryption?: {bi.flow.security.requires_encryption.value}",
        "",
        f"Description of the Initiator: {bi.initiator.description}",
    ]
    for fn in bi.initiator.functions:
        lines.append(f"Function: {fn.name}: {fn.description}")
        for process in fn.processes:
            lines.append(f"  {process.name}: {process.description}")
    lines.append("")
    lines.append(f"Description of the Acceptor: {bi.acceptor.description}")
    for fn in bi.acceptor.functions:
        lines.append(f"Function: {fn.name}: {fn.description}")
        for process in fn.processes:
            lines.append(f"  {process.name}: {process.description}")
    lines.append("")
    lines.append(f"Definition of {bi.flow.name}: {bi.flow.definition}")
    lines.append("")
    lines.append("STRIDE-based threats associated with the data flow:")
    if bi.stride_threats:
        for threat in bi.stride_threats:
            lines.append(f"{threat.category.render()}: {threat.description}")
    else:
        lines.append("(none)")
    return "\n".join(lines)


def _literal_spans(text: str, open_ch: str, close_ch: str):
    """Yield top-level spans delimited by the given brackets, respecting
    string quoting, in order of appearance."""
    depth = 0
    start = -1
    quote: str | None = None
    escaped = False
    for i, ch in enumerate(text):
        if quote is not None:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == quote:
                quote = None
            continue
        if ch in ("'", '"'):
            if depth > 0:
                quote = ch
            continue
        if ch == open_ch:
            if depth == 0:
                start = i
            depth += 1
        elif ch == close_ch and depth > 0:
            depth -= 1
            if depth == 0:
                yield text[start:i + 1]


def parse_general_attacks(text: str) -> list[GeneralAttack]:
    """Extract the first mapping literal in the reply as attack name/description
    pairs, tolerating code fences and surrounding prose."""
    for span in _literal_spans(text, "{", "}"):
        try:
            value = ast.literal_eval(span)
        except (ValueError, SyntaxError):
            try:
                value = json.loads(span)
            except (ValueError, TypeError):
                continue
        if isinstance(value, dict) and value:
            attacks = []
            for key, item in value.items():
                if not str(key).strip():
                    continue
                attacks.append(GeneralAttack(name=str(key), description=str(item)))
            if attacks:
                return attacks
    raise UnparseableResponse("no mapping literal found in response")


def parse_technique_list(text: str) -> list[TechniqueId]:
    """Extract technique ids, preferring the first list literal in the reply
    and falling back to a whole-text scan when there is no list at all."""
    searched_list = False
    for span in _literal_spans(text, "[", "]"):
        try:
            value = ast.literal_eval(span)
        except (ValueError, SyntaxError):
            continue
        if isinstance(value, list):
            searched_list = True
            ids = _scan_ids(span)
            if ids:
                return ids
            break  # a list literal was present but held no valid ids
    if not searched_list:
        ids = _scan_ids(text)
        if ids:
            return ids
    raise UnparseableResponse("no technique ids found in response")


def _scan_ids(text: str) -> list[TechniqueId]:
    seen: set[TechniqueId] = set()
    ordered: list[TechniqueId] = []
    for match in TECHNIQUE_ID_SCAN_RE.finditer(text):
        tid = parse_technique_id(match.group(0))
        if tid not in seen:
            seen.add(tid)
            ordered.append(tid)
    return ordered


def _complete_and_parse(gateway: Gateway, prompt: str, parser: Callable,
                        transcripts: list[tuple[str, str]], model_tag: str):
    """One call plus at most one format-reminder reprompt on parse failure."""
    response = gateway.complete(prompt, model_tag=model_tag)
    transcripts.append((prompt, response.text))
    try:
        return parser(response.text)
    except UnparseableResponse:
        reprompt = f"{prompt}\n\n{FORMAT_REMINDER}"
        logger.warning("unparseable response; reprompting once")
        retry = gateway.complete(reprompt, model_tag=model_tag)
        transcripts.append((reprompt, retry.text))
        return parser(retry.text)


def _normalize(ids: Sequence[TechniqueId], keep_subtechniques: bool) -> list[TechniqueId]:
    normalized: list[TechniqueId] = []
    seen: set[TechniqueId] = set()
    for tid in ids:
        out = tid if keep_subtechniques else tid.parent()
        if out not in seen:
            seen.add(out)
            normalized.append(out)
    return normalized


def _kb_filter(ids: Sequence[TechniqueId], kb: KnowledgeBase) -> list[TechniqueId]:
    valid = kb.valid_ids()
    kept = []
    for tid in ids:
        if tid in valid:
            kept.append(tid)
        else:
            logger.warning("dropping technique id %s: not a valid knowledge-base id", tid)
    return kept


def _candidate_table(candidates: Sequence[tuple[TechniqueId, float]],
                     kb: KnowledgeBase) -> str:
    lines = ["ID | Name | Description"]
    for tid, _ in candidates:
        record = kb.techniques.get(tid)
        name = record.name if record else ""
        description = (record.description if record else "").replace("\n", " ")
        lines.append(f"{tid} | {name} | {description}")
    return "\n".join(lines)


def rag_identify(
    bi: BasicInput,
    kb: KnowledgeBase,
    index: VectorIndex,
    embedder: Embedder,
    gateway: Gateway,
    cfg: StrategyConfig,
    model_tag: str = "default",
) -> IdentificationResult:
    """Two-agent retrieval pipeline for one flow.

    Stage 1 asks an agent for general cyberattacks against the flow; stage 2
    embeds each attack; stage 3 retrieves candidate techniques per attack and
    unions them (max similarity per id); stage 4 asks a second agent to pick
    final technique ids from the candidate table. Valid ids the second agent
    volunteers from outside the candidate table are kept and flagged.
    """
    ensure_embedder(index, embedder)
    transcripts: list[tuple[str, str]] = []

    vanilla_prompt = f"{render_basic_input(bi)}\n\n{VANILLA_QUERY}"
    attacks = _complete_and_parse(
        gateway, vanilla_prompt, parse_general_attacks, transcripts, model_tag
    )

    probes = embedder.embed([attack.probe_text() for attack in attacks])
    best: dict[TechniqueId, float] = {}
    for probe in probes:
        for tid, similarity in query(index, probe, cfg.retrieval):
            if tid not in best or similarity > best[tid]:
                best[tid] = similarity
    candidates = tuple(sorted(best.items(), key=lambda pair: (-pair[1], pair[0])))

    if not candidates:
        logger.warning("flow %s: no retrieval candidates cleared the cutoff", bi.flow.id)
        return IdentificationResult(
            flow_id=bi.flow.id,
            strategy=Strategy.RAG,
            technique_ids=(),
            transcripts=tuple(transcripts),
            candidates=(),
            flags=("no-candidates",),
        )

    rag_prompt = "\n\n".join(
        [
            "Candidate MITRE ATT&CK techniques:",
            _candidate_table(candidates, kb),
            RAG_QUERY,
            "\n".join(
                [
                    f"Data Flow: {bi.flow.name} [{bi.flow.id}]",
                    f"Definition of {bi.flow.name}: {bi.flow.definition}",
                    f"Initiator: {bi.initiator.name}: {bi.initiator.description}",
                    f"Acceptor: {bi.acceptor.name}: {bi.acceptor.description}",
                ]
            ),
        ]
    )
    raw_ids = _complete_and_parse(
        gateway, rag_prompt, parse_technique_list, transcripts, model_tag
    )

    final_ids = _kb_filter(_normalize(raw_ids, cfg.keep_subtechniques), kb)
    candidate_ids = {
        tid if cfg.keep_subtechniques else tid.parent() for tid, _ in candidates
    }
    flags = tuple(
        f"out-of-candidate:{tid}" for tid in final_ids if tid not in candidate_ids
    )
    if not final_ids:
        flags = flags + ("empty-result",)
    return IdentificationResult(
        flow_id=bi.flow.id,
        strategy=Strategy.RAG,
        technique_ids=tuple(final_ids),
        transcripts=tuple(transcripts),
        candidates=candidates,
        flags=flags,
    )


def default_icl_template() -> str:
    return (
        resources.files("tmf.data").joinpath("icl_prompt.txt").read_text(encoding="utf-8")
    )


def render_icl_prompt(bi: BasicInput, examples: Sequence[IclExample], shots: int,
                      template: str | None = None) -> str:
    """Assemble the in-context prompt: instructions, ``shots`` worked example
    blocks, then the target flow and the closing query."""
    if shots > len(examples):
        raise ValidationError(
            f"shots={shots} but only {len(examples)} examples are on file"
        )
    blocks = []
    for n, example in enumerate(examples[:shots], start=1):
        id_list = "[" + ", ".join(f'"{tid}"' for tid in example.technique_ids) + "]"
        blocks.append(
            f"Example {n}:\n{example.basic_input_text}\n"
            f"MITRE ATT&CK techniques: {id_list}"
        )
    example_text = ("\n\n".join(blocks) + "\n\n") if blocks else ""
    text = template if template is not None else default_icl_template()
    return text.format(examples=example_text, basic_input=render_basic_input(bi))


def icl_identify(
    bi: BasicInput,
    examples: Sequence[IclExample],
    kb: KnowledgeBase,
    gateway: Gateway,
    cfg: StrategyConfig,
    model_tag: str = "default",
    template: str | None = None,
) -> IdentificationResult:
    """In-context identification with ``cfg.shots`` worked examples."""
    transcripts: list[tuple[str, str]] = []
    prompt = render_icl_prompt(bi, examples, cfg.shots, template)
    raw_ids = _complete_and_parse(
        gateway, prompt, parse_technique_list, transcripts, model_tag
    )
    final_ids = _kb_filter(_normalize(raw_ids, cfg.keep_subtechniques), kb)
    flags = () if final_ids else ("empty-result",)
    return IdentificationResult(
        flow_id=bi.flow.id,
        strategy=Strategy.ICL,
        technique_ids=tuple(final_ids),
        transcripts=tuple(transcripts),
        flags=flags,
    )


def load_icl_examples(path: str | Path, kb: KnowledgeBase | None = None) -> list[IclExample]:
    """Read JSON-lines examples; ids are KB-validated when a KB is given."""
    examples = []
    for line_no, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}, line {line_no}: invalid JSON: {exc}") from None
        ids = tuple(parse_technique_id(t) for t in obj.get("technique_ids", []))
        if kb is not None:
            invalid = [tid for tid in ids if tid not in kb.valid_ids()]
            if invalid:
                raise ValidationError(
                    f"{path}, line {line_no}: unknown technique ids "
                    f"{[str(t) for t in invalid]}"
                )
        examples.append(IclExample(basic_input_text=obj["basic_input"], technique_ids=ids))
    return examples


class PredictionSource(Protocol):
    def scores_for(self, bi: BasicInput) -> dict[str, float]: ...


class FilePredictionSource:
    """Per-flow score vectors from a predictions JSON-lines file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists():
            raise SourceUnavailable(f"predictions file not found: {path}")
        self._scores: dict[str, dict[str, float]] = {}
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            self._scores[obj["flow_id"]] = {
                str(k): float(v) for k, v in obj["scores"].items()
            }

    def scores_for(self, bi: BasicInput) -> dict[str, float]:
        try:
            return self._scores[bi.flow.id]
        except KeyError:
            raise MissingPrediction(
                f"no prediction for flow {bi.flow.id!r} in {self.path}"
            ) from None


class HttpPredictionSource:
    """Score vectors from a live classifier endpoint."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url.rstrip("/")
        self.timeout = timeout

    def scores_for(self, bi: BasicInput) -> dict[str, float]:
        import requests

        try:
            response = requests.post(
                f"{self.url}/predict",
                json={"basic_input": render_basic_input(bi)},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise SourceUnavailable(f"classifier endpoint unreachable: {exc}") from exc
        if response.status_code != 200:
            raise SourceUnavailable(
                f"classifier endpoint returned HTTP {response.status_code}"
            )
        return {str(k): float(v) for k, v in response.json()["scores"].items()}


def classifier_identify(
    bi: BasicInput,
    kb: KnowledgeBase,
    predictions: PredictionSource,
    cfg: StrategyConfig,
) -> IdentificationResult:
    """Threshold a classifier's score vector for the flow (score >= threshold)."""
    scores = predictions.scores_for(bi)
    selected = [
        (parse_technique_id(raw), score)
        for raw, score in scores.items()
        if score >= cfg.threshold
    ]
    selected.sort(key=lambda pair: (-pair[1], pair[0]))
    final_ids = _kb_filter(
        _normalize([tid for tid, _ in selected], cfg.keep_subtechniques), kb
    )
    flags = () if final_ids else ("empty-result",)
    return IdentificationResult(
        flow_id=bi.flow.id,
        strategy=Strategy.CLASSIFIER,
        technique_ids=tuple(final_ids),
        transcripts=(),
        flags=flags,
    )


def identify_flows(
    inputs: Sequence[BasicInput],
    worker: Callable[[BasicInput], IdentificationResult],
    parallelism: int = 4,
) -> list[IdentificationResult]:
    """Run a strategy over many flows concurrently; results come back in
    flow-id order so downstream reports are deterministic."""
    if parallelism < 1:
        raise ValidationError("parallelism must be >= 1")
    ordered = sorted(inputs, key=lambda bi: bi.flow.id)
    if parallelism == 1 or len(ordered) <= 1:
        return [worker(bi) for bi in ordered]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(worker, ordered))
