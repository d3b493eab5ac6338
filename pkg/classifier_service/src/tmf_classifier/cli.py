"""Command line: train a model, export predictions, or serve the endpoint."""

from __future__ import annotations

import argparse
import logging
import sys

from tmf_classifier.data import load_dataset, load_dataset_pair
from tmf_classifier.export import export_predictions, read_flow_inputs
from tmf_classifier.model import Classifier, ModelConfig
from tmf_classifier.server import serve
from tmf_classifier.train import TrainConfig, train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tmf-classifier",
        description="Supervised multi-label mapping of data flows to attack techniques.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="cross-validated training; exports the best fold")
    p.add_argument("dataset", help="JSON-lines: flow_id, basic_input, technique_ids")
    p.add_argument("--inputs", help="separate basic-input file when the dataset file "
                                    "is a plain ground-truth file")
    p.add_argument("--out", required=True, help="model artifact directory")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=8)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=2e-5)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=0.01)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-sequence-length", dest="max_sequence_length", type=int,
                   default=4096)
    p.add_argument("--encoder", default="hashing",
                   help='"hashing" or "hf:<model-id>"')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export", help="write per-flow score vectors")
    p.add_argument("model", help="model artifact directory")
    p.add_argument("flows", help="JSON-lines: flow_id, basic_input")
    p.add_argument("--out", required=True, help="predictions JSON-lines path")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("serve", help="run the HTTP predict endpoint")
    p.add_argument("model", help="model artifact directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8151)
    p.set_defaults(func=cmd_serve)

    return parser


def cmd_train(args: argparse.Namespace) -> int:
    if args.inputs:
        dataset = load_dataset_pair(args.dataset, args.inputs)
    else:
        dataset = load_dataset(args.dataset)
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        weight_decay=args.weight_decay,
        folds=args.folds,
        seed=args.seed,
        max_sequence_length=args.max_sequence_length,
    )
    result = train(dataset, cfg, ModelConfig(encoder=args.encoder))
    result.classifier.save(args.out)
    best = result.fold_metrics[result.selected_fold]
    print(
        f"trained {cfg.folds} folds on {len(dataset)} items "
        f"(K={dataset.n_labels}); selected fold {result.selected_fold} "
        f"with validation f1={best.f1:.3f} -> {args.out}"
    )
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    classifier = Classifier.load(args.model)
    rows = export_predictions(classifier, read_flow_inputs(args.flows), args.out)
    print(f"wrote {rows} prediction rows -> {args.out}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    serve(args.model, host=args.host, port=args.port)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
