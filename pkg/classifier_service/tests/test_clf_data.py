from __future__ import annotations

import json

import numpy as np
import pytest

from tmf_classifier.data import (
    DataError,
    LabeledDataset,
    LabeledItem,
    canonical_technique_id,
    load_dataset,
    load_dataset_pair,
)


def test_canonicalization():
    assert canonical_technique_id(" t1566.001 ") == "T1566.001"
    with pytest.raises(DataError):
        canonical_technique_id("1566")


def test_load_paired_file(tmp_path):
    path = tmp_path / "dataset.jsonl"
    path.write_text(
        json.dumps({"flow_id": "f1", "basic_input": "a", "technique_ids": ["T1040"]})
        + "\n"
        + json.dumps(
            {"flow_id": "f2", "basic_input": "b", "technique_ids": ["t1557", "T1040"]}
        )
    )
    dataset = load_dataset(path)
    assert dataset.label_space == ("T1040", "T1557")
    assert len(dataset) == 2
    assert dataset.items[1].labels.tolist() == [1.0, 1.0]


def test_load_two_file_form(tmp_path):
    truth = tmp_path / "truth.jsonl"
    truth.write_text(json.dumps({"flow_id": "f1", "technique_ids": ["T1059"]}))
    inputs = tmp_path / "inputs.jsonl"
    inputs.write_text(json.dumps({"flow_id": "f1", "basic_input": "text"}))
    dataset = load_dataset_pair(truth, inputs)
    assert dataset.items[0].text == "text"
    assert dataset.label_space == ("T1059",)


def test_two_file_form_missing_input(tmp_path):
    truth = tmp_path / "truth.jsonl"
    truth.write_text(json.dumps({"flow_id": "f1", "technique_ids": ["T1059"]}))
    inputs = tmp_path / "inputs.jsonl"
    inputs.write_text(json.dumps({"flow_id": "other", "basic_input": "text"}))
    with pytest.raises(DataError):
        load_dataset_pair(truth, inputs)


def test_vector_length_enforced():
    item = LabeledItem(flow_id="f1", text="x", labels=np.zeros(3, dtype=np.float32))
    with pytest.raises(DataError):
        LabeledDataset(items=(item,), label_space=("T1040",))


def test_label_space_must_be_canonical():
    item = LabeledItem(flow_id="f1", text="x", labels=np.zeros(1, dtype=np.float32))
    with pytest.raises(DataError):
        LabeledDataset(items=(item,), label_space=("bogus",))
