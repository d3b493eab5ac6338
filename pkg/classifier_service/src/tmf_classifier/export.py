"""Prediction export in the pipeline's JSON-lines contract."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

from tmf_classifier.model import Classifier


def export_predictions(
    classifier: Classifier,
    flows: Iterable[tuple[str, str]],
    path: str | Path,
) -> int:
    """Write one ``{"flow_id", "scores"}`` line per (flow_id, basic_input).

    Returns the number of rows written.
    """
    rows = 0
    with open(path, "w", encoding="utf-8") as handle:
        for flow_id, text in flows:
            scores = classifier.predict(text)
            handle.write(json.dumps({"flow_id": flow_id, "scores": scores}) + "\n")
            rows += 1
    return rows


def read_flow_inputs(path: str | Path) -> list[tuple[str, str]]:
    """Read ``{"flow_id", "basic_input"}`` JSON-lines."""
    flows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        flows.append((obj["flow_id"], obj["basic_input"]))
    return flows
