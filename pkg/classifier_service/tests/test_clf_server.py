from __future__ import annotations

import pytest
from fastapi.testclient import TestClient

from clf_helpers import smoke_dataset
from tmf_classifier.server import create_app
from tmf_classifier.train import TrainConfig, train


@pytest.fixture(scope="module")
def client():
    result = train(smoke_dataset(), TrainConfig(seed=0))
    return TestClient(create_app(result.classifier))


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json()["labels"] == 4


def test_predict_returns_scores(client):
    response = client.post(
        "/predict", json={"basic_input": smoke_dataset().items[0].text}
    )
    assert response.status_code == 200
    scores = response.json()["scores"]
    assert set(scores) == {"T1040", "T1059", "T1486", "T1557"}
    assert all(0.0 <= s <= 1.0 for s in scores.values())


def test_malformed_body_is_400(client):
    assert client.post("/predict", json={"wrong_key": "x"}).status_code == 400
    assert client.post("/predict", json={"basic_input": 7}).status_code == 400
    assert client.post("/predict", json={"basic_input": "   "}).status_code == 400


def test_concurrent_requests_share_model(client):
    text = smoke_dataset().items[1].text
    responses = [client.post("/predict", json={"basic_input": text}) for _ in range(4)]
    payloads = {r.text for r in responses}
    assert len(payloads) == 1
