"""Labeled datasets: basic-input texts paired with binary label vectors."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


_TECHNIQUE_ID_RE = re.compile(r"^T\d{4}(?:\.\d{3})?$")


def canonical_technique_id(raw: str) -> str:
    candidate = raw.strip().upper()
    if not _TECHNIQUE_ID_RE.match(candidate):
        raise DataError(f"not a technique id: {raw!r}")
    return candidate


@dataclass(frozen=True)
class LabeledItem:
    flow_id: str
    text: str
    labels: np.ndarray  # binary vector over the dataset's label space

    def __eq__(self, other):
        return (
            isinstance(other, LabeledItem)
            and self.flow_id == other.flow_id
            and self.text == other.text
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class LabeledDataset:
    """Items plus the ordered label space their vectors index into."""

    items: tuple[LabeledItem, ...]
    label_space: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        object.__setattr__(self, "label_space", tuple(self.label_space))
        k = len(self.label_space)
        for label in self.label_space:
            canonical_technique_id(label)
        for item in self.items:
            if item.labels.shape != (k,):
                raise DataError(
                    f"flow {item.flow_id}: label vector has shape "
                    f"{item.labels.shape}, expected ({k},)"
                )

    def __len__(self):
        return len(self.items)

    @property
    def n_labels(self) -> int:
        return len(self.label_space)

    def label_matrix(self) -> np.ndarray:
        return np.stack([item.labels for item in self.items])


def _vectorize(rows: list[tuple[str, str, list[str]]]) -> LabeledDataset:
    label_space = sorted({
        canonical_technique_id(t) for _, _, ids in rows for t in ids
    })
    if not label_space:
        raise DataError("no technique ids anywhere in the dataset")
    index = {label: i for i, label in enumerate(label_space)}
    items = []
    for flow_id, text, ids in rows:
        vector = np.zeros(len(label_space), dtype=np.float32)
        for raw in ids:
            vector[index[canonical_technique_id(raw)]] = 1.0
        items.append(LabeledItem(flow_id=flow_id, text=text, labels=vector))
    return LabeledDataset(items=tuple(items), label_space=tuple(label_space))


def _read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    for line_no, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}, line {line_no}: invalid JSON: {exc}") from None
    return rows


def load_dataset(path: str | Path) -> LabeledDataset:
    """Load the paired JSON-lines form:
    ``{"flow_id", "basic_input", "technique_ids"}`` per line."""
    rows = []
    for obj in _read_jsonl(path):
        rows.append((obj["flow_id"], obj["basic_input"], obj["technique_ids"]))
    if not rows:
        raise DataError(f"no rows in {path}")
    return _vectorize(rows)


def load_dataset_pair(truth_path: str | Path, inputs_path: str | Path) -> LabeledDataset:
    """Load the two-file form: a ground-truth file (``flow_id`` +
    ``technique_ids``) joined with a basic-input file (``flow_id`` +
    ``basic_input``) on flow id."""
    texts = {obj["flow_id"]: obj["basic_input"] for obj in _read_jsonl(inputs_path)}
    rows = []
    for obj in _read_jsonl(truth_path):
        flow_id = obj["flow_id"]
        if flow_id not in texts:
            raise DataError(f"flow {flow_id!r} has labels but no basic input")
        rows.append((flow_id, texts[flow_id], obj["technique_ids"]))
    if not rows:
        raise DataError(f"no rows in {truth_path}")
    return _vectorize(rows)
