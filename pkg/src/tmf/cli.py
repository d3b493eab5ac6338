"""Command-line orchestrator for the three-stage workflow.

Stages: STRIDE generation over a DFD or service package, ATT&CK technique
identification per flow (retrieval pipeline, in-context prompting, or an
external classifier), and asset-centric attack-path analysis. Every command
writes its artifacts plus a run manifest (hashed inputs, echoed config,
transcripts) under the output directory.

Exit codes: 0 success, 1 validation error, 2 provider or I/O failure.
"""

from __future__ import annotations

import argparse
import functools
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from tmf import attack_kb, evalreport, identify, paths as attack_paths, retrieval, stride
from tmf.dfd import DfdGraph, load_service_package, parse_dfd_file, to_graph
from tmf.errors import ProviderError, TmfError, ValidationError
from tmf.gateway import ANALYST_PERSONA, Gateway, ScriptedProvider, OpenAICompatProvider
from tmf.model import BasicInput, Strategy

logger = logging.getLogger(__name__)

ENV_API_KEY = "TMF_API_KEY"
ENV_BASE_URL = "TMF_BASE_URL"


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, inputs: list[Path],
                    outputs: list[Path], transcripts: list[tuple[str, str]]) -> None:
    manifest = {
        "schema_version": 1,
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None and Path(p).exists()},
        "outputs": [str(p) for p in outputs],
        "transcripts": [list(pair) for pair in transcripts],
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, ensure_ascii=False) + "\n",
                    encoding="utf-8")


def _echo_config(args: argparse.Namespace) -> dict:
    config = {}
    for key, value in sorted(vars(args).items()):
        if key in ("func", "key_file"):
            continue
        config[key] = str(value) if isinstance(value, Path) else value
    return config


def _load_graph(path: Path, input_format: str | None) -> DfdGraph:
    fmt = input_format
    if fmt is None:
        fmt = "package" if path.suffix.lower() == ".json" else "dfd"
    if fmt == "package":
        return to_graph(load_service_package(path))
    return parse_dfd_file(path)


def _api_key(args: argparse.Namespace) -> str:
    if getattr(args, "key_file", None):
        return Path(args.key_file).read_text(encoding="utf-8").strip()
    key = os.environ.get(ENV_API_KEY, "")
    if not key:
        raise ValidationError(
            f"no API key: set {ENV_API_KEY} or pass --key-file (keys are never flags)"
        )
    return key


def _gateway(args: argparse.Namespace, system_text: str | None = None) -> Gateway:
    if getattr(args, "scripted", None):
        provider = ScriptedProvider.from_file(args.scripted)
        return Gateway(provider, system_text=system_text)
    base_url = getattr(args, "base_url", None) or os.environ.get(ENV_BASE_URL, "")
    if not base_url:
        raise ValidationError(
            f"no provider: pass --scripted for offline runs or set {ENV_BASE_URL}"
        )
    return Gateway(OpenAICompatProvider(base_url, _api_key(args)),
                   system_text=system_text)


def _embedder(args: argparse.Namespace) -> retrieval.Embedder:
    if args.embedder == "hash":
        return retrieval.HashEmbedder(dim=args.dim, seed=args.seed)
    base_url = getattr(args, "base_url", None) or os.environ.get(ENV_BASE_URL, "")
    if not base_url:
        raise ValidationError(f"remote embedder needs {ENV_BASE_URL} or --base-url")
    return retrieval.RemoteEmbedder(base_url, _api_key(args), model=args.embed_model)


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _basic_inputs(graph: DfdGraph, report: stride.StrideReport) -> list[BasicInput]:
    inputs = []
    for flow in graph.sorted_flows():
        initiator, acceptor = graph.flow_endpoints(flow.id)
        inputs.append(
            BasicInput(
                flow=flow,
                initiator=initiator,
                acceptor=acceptor,
                stride_threats=report.interactions.get(flow.id, ()),
            )
        )
    return inputs


def cmd_kb_import(args: argparse.Namespace) -> int:
    kb = attack_kb.import_stix_bundle(args.bundle)
    attack_kb.save_snapshot(kb, args.out)
    print(f"imported {len(kb.techniques)} techniques "
          f"({kb.matrix_name} {kb.version}) -> {args.out}")
    return 0


def cmd_index_build(args: argparse.Namespace) -> int:
    kb = attack_kb.load_snapshot(args.snapshot)
    corpus = attack_kb.export_corpus(kb)
    cfg = retrieval.RetrievalConfig(batch_size=args.batch_size)
    embedder = _embedder(args)
    base = None
    if args.update and Path(args.out).exists():
        base = retrieval.load_index(args.out, expected_embedder_tag=embedder.tag)
    index = retrieval.build_index(corpus, embedder, cfg, base=base)
    retrieval.save_index(index, args.out)
    print(f"indexed {len(index)} corpus entries with {embedder.tag} -> {args.out}")
    return 0


def cmd_stride(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    graph = _load_graph(Path(args.input), args.format)
    rules = stride.load_rule_table(args.rules) if args.rules else None
    report = stride.generate_threats(graph, rules)
    flow_names = {fid: flow.name for fid, flow in graph.flows.items()}
    json_path = out / "stride_report.json"
    md_path = out / "stride_report.md"
    json_path.write_text(evalreport.stride_report_json(report), encoding="utf-8")
    md_path.write_text(evalreport.stride_report_markdown(report, flow_names),
                       encoding="utf-8")
    _write_manifest(out, "stride", _echo_config(args),
                    [Path(args.input)] + ([Path(args.rules)] if args.rules else []),
                    [json_path, md_path], [])
    print(f"{len(report.threats)} threats across {len(report.interactions)} "
          f"interactions -> {json_path}")
    return 0


def cmd_identify(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    graph = _load_graph(Path(args.input), args.format)
    rules = stride.load_rule_table(args.rules) if args.rules else None
    report = stride.generate_threats(graph, rules)
    inputs = _basic_inputs(graph, report)
    kb = attack_kb.load_snapshot(args.kb)
    strategy = Strategy(args.strategy)
    cfg = identify.StrategyConfig(
        strategy=strategy,
        shots=args.shots,
        retrieval=retrieval.RetrievalConfig(top_k=args.top_k, cutoff=args.cutoff),
        threshold=args.threshold,
        keep_subtechniques=args.keep_subtechniques,
    )

    transcripts: list[tuple[str, str]] = []
    if strategy is Strategy.RAG:
        if not args.index:
            raise ValidationError("--strategy=rag requires --index")
        embedder = _embedder(args)
        index = retrieval.load_index(args.index, expected_embedder_tag=embedder.tag)
        gateway = _gateway(args)
        worker = functools.partial(
            identify.rag_identify, kb=kb, index=index, embedder=embedder,
            gateway=gateway, cfg=cfg, model_tag=args.model,
        )
    elif strategy is Strategy.ICL:
        if not args.examples:
            raise ValidationError("--strategy=icl requires --examples")
        examples = identify.load_icl_examples(args.examples, kb)
        if cfg.shots > len(examples):
            raise ValidationError(
                f"--shots={cfg.shots} but only {len(examples)} examples in {args.examples}"
            )
        gateway = _gateway(args)
        worker = functools.partial(
            identify.icl_identify, examples=examples, kb=kb, gateway=gateway,
            cfg=cfg, model_tag=args.model,
        )
    else:
        if args.predictions:
            source = identify.FilePredictionSource(args.predictions)
        elif args.predictions_url:
            source = identify.HttpPredictionSource(args.predictions_url)
        else:
            raise ValidationError(
                "--strategy=classifier requires --predictions or --predictions-url"
            )
        gateway = None
        worker = functools.partial(
            identify.classifier_identify, kb=kb, predictions=source, cfg=cfg,
        )

    results = identify.identify_flows(inputs, worker, parallelism=args.parallelism)
    if gateway is not None:
        transcripts = gateway.transcript

    json_path = out / "identify_report.json"
    md_path = out / "identify_report.md"
    json_path.write_text(evalreport.identify_report_json(results, kb), encoding="utf-8")
    md_path.write_text(evalreport.identify_report_markdown(results, kb), encoding="utf-8")
    inputs_list = [Path(args.input), Path(args.kb)]
    for attr in ("index", "examples", "predictions", "scripted", "rules"):
        value = getattr(args, attr, None)
        if value:
            inputs_list.append(Path(value))
    _write_manifest(out, "identify", _echo_config(args), inputs_list,
                    [json_path, md_path], transcripts)
    total = sum(len(r.technique_ids) for r in results)
    print(f"identified {total} technique assignments over {len(results)} flows "
          f"({strategy.value}) -> {json_path}")
    return 0


def _results_from_report(path: Path) -> list[identify.IdentificationResult]:
    from tmf.model import IdentificationResult, parse_technique_id

    payload = json.loads(path.read_text(encoding="utf-8"))
    results = []
    for flow in payload.get("flows", []):
        results.append(
            IdentificationResult(
                flow_id=flow["flow_id"],
                strategy=Strategy(flow.get("strategy", "rag")),
                technique_ids=tuple(
                    parse_technique_id(t) for t in flow.get("technique_ids", [])
                ),
                flags=tuple(flow.get("flags", [])),
            )
        )
    return results


def cmd_paths(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    graph = _load_graph(Path(args.input), args.format)
    results = _results_from_report(Path(args.results)) if args.results else []
    entity_graph = attack_paths.build_entity_graph(
        list(graph.flows.values()), graph.entities, results
    )

    enumerated: list[attack_paths.AttackPath] = []
    llm_paths: list[attack_paths.AttackPath] = []
    check = None
    transcripts: list[tuple[str, str]] = []

    if args.mode in ("enumerate", "both"):
        enumerated = attack_paths.enumerate_paths(
            entity_graph, args.start, args.target, args.max_depth
        )
    if args.mode in ("llm", "both"):
        if not args.kb:
            raise ValidationError("--mode=llm requires --kb for technique validation")
        kb = attack_kb.load_snapshot(args.kb)
        gateway = _gateway(args, system_text=ANALYST_PERSONA)
        prompt = attack_paths.build_asset_prompt(entity_graph, args.start, args.target)
        llm_paths = attack_paths.llm_attack_paths(
            prompt, gateway, kb, graph=entity_graph, model_tag=args.model
        )
        transcripts = gateway.transcript
        if args.mode == "both":
            check = attack_paths.cross_check(llm_paths, enumerated, entity_graph)

    json_path = out / "paths_report.json"
    md_path = out / "paths_report.md"
    json_path.write_text(
        evalreport.paths_report_json(enumerated, llm_paths, check, entity_graph.nodes),
        encoding="utf-8",
    )
    md_path.write_text(
        evalreport.paths_report_markdown(enumerated, llm_paths, check, entity_graph.nodes),
        encoding="utf-8",
    )
    inputs_list = [Path(args.input)]
    for attr in ("results", "kb", "scripted"):
        value = getattr(args, attr, None)
        if value:
            inputs_list.append(Path(value))
    _write_manifest(out, "paths", _echo_config(args), inputs_list,
                    [json_path, md_path], transcripts)
    print(f"{len(enumerated)} enumerated and {len(llm_paths)} LLM paths -> {json_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    results = _results_from_report(Path(args.report))
    truth = evalreport.load_ground_truth(args.truth)
    instances = evalreport.instances_from(results, truth)
    metrics = evalreport.multilabel_metrics(instances)
    json_path = out / "metrics_report.json"
    md_path = out / "metrics_report.md"
    json_path.write_text(evalreport.metrics_report_json(metrics), encoding="utf-8")
    md_path.write_text(evalreport.metrics_report_markdown(metrics), encoding="utf-8")
    _write_manifest(out, "eval", _echo_config(args),
                    [Path(args.report), Path(args.truth)], [json_path, md_path], [])
    print(f"precision={metrics.precision:.4f} recall={metrics.recall:.4f} "
          f"f1={metrics.f1:.4f} over {metrics.n_instances} flows -> {json_path}")
    return 0


def _add_provider_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scripted", help="scripted provider rules file (offline mode)")
    parser.add_argument("--base-url", dest="base_url",
                        help=f"OpenAI-compatible base URL (default: ${ENV_BASE_URL})")
    parser.add_argument("--key-file", dest="key_file",
                        help=f"file holding the API key (default: ${ENV_API_KEY})")
    parser.add_argument("--model", default="default", help="model tag for chat calls")


def _add_embedder_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--embedder", choices=("hash", "remote"), default="hash")
    parser.add_argument("--dim", type=int, default=256, help="hash embedder dimension")
    parser.add_argument("--seed", type=int, default=0, help="hash embedder seed")
    parser.add_argument("--embed-model", dest="embed_model", default="default",
                        help="remote embedding model tag")


def _add_input_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("input", help="DFD DSL file or service-package JSON")
    parser.add_argument("--format", choices=("dfd", "package"),
                        help="input format (default: by file extension)")
    parser.add_argument("--rules", help="JSON rule-table override for STRIDE generation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tmf",
        description="Threat modeling pipeline: STRIDE generation, ATT&CK technique "
        "identification, and attack-path analysis.",
    )
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("kb-import", help="import a STIX bundle into a KB snapshot")
    p.add_argument("bundle")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_kb_import)

    p = sub.add_parser("index-build", help="embed the KB corpus into a vector index")
    p.add_argument("snapshot")
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    p.add_argument("--update", action="store_true",
                   help="insert new corpus entries into an existing index")
    _add_embedder_flags(p)
    _add_provider_flags(p)
    p.set_defaults(func=cmd_index_build)

    p = sub.add_parser("stride", help="generate the STRIDE threat report (stage 1)")
    _add_input_flags(p)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_stride)

    p = sub.add_parser("identify", help="identify ATT&CK techniques per flow (stage 2)")
    _add_input_flags(p)
    p.add_argument("--kb", required=True, help="KB snapshot file")
    p.add_argument("--strategy", choices=("rag", "icl", "classifier"), required=True)
    p.add_argument("--index", help="vector index file (rag)")
    p.add_argument("--shots", type=int, default=8, help="example count (icl)")
    p.add_argument("--examples", help="JSON-lines worked examples (icl)")
    p.add_argument("--cutoff", type=float, default=0.6)
    p.add_argument("--top-k", dest="top_k", type=int, default=3)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--predictions", help="JSON-lines score vectors (classifier)")
    p.add_argument("--predictions-url", dest="predictions_url",
                   help="classifier HTTP endpoint (classifier)")
    p.add_argument("--parallelism", type=int, default=4)
    p.add_argument("--keep-subtechniques", dest="keep_subtechniques",
                   action="store_true",
                   help="keep sub-technique ids instead of normalizing to parents")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    _add_embedder_flags(p)
    _add_provider_flags(p)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("paths", help="asset-centric attack-path analysis (stage 3)")
    _add_input_flags(p)
    p.add_argument("--target", required=True, help="target asset (entity id or name)")
    p.add_argument("--start", required=True, help="attack starting entity (id or name)")
    p.add_argument("--max-depth", dest="max_depth", type=int, default=6)
    p.add_argument("--mode", choices=("enumerate", "llm", "both"), default="enumerate")
    p.add_argument("--results", help="identification report JSON for edge annotations")
    p.add_argument("--kb", help="KB snapshot (required for llm mode)")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    _add_provider_flags(p)
    p.set_defaults(func=cmd_paths)

    p = sub.add_parser("eval", help="score an identification report against ground truth")
    p.add_argument("report", help="identification report JSON")
    p.add_argument("truth", help="JSON-lines ground-truth file")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def _apply_config_file(argv: list[str], parser: argparse.ArgumentParser,
                       args: argparse.Namespace) -> argparse.Namespace:
    """Fill in values from --config for flags the command line left at default."""
    if not args.config:
        return args
    overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if not isinstance(overrides, dict):
        raise ValidationError("config file must hold a JSON object")
    explicit = {token.split("=", 1)[0].lstrip("-").replace("-", "_")
                for token in argv if token.startswith("--")}
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if hasattr(args, attr) and attr not in explicit:
            setattr(args, attr, value)
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args = _apply_config_file(argv, parser, args)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ProviderError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TmfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
