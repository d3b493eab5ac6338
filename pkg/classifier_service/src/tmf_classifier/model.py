"""Encoders and the multi-label classification model.

The default encoder is a deterministic hashed bag-of-tokens featurizer, so
training and inference run anywhere with no downloads. A pretrained
long-context transformer encoder can be swapped in by setting
``ModelConfig.encoder`` to ``hf:<model-id>`` (requires the ``hf`` extra);
everything downstream of the feature vector is identical.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

EPS = 1e-7


class ShapeMismatch(ValueError):
    pass


class ModelNotLoaded(RuntimeError):
    pass


def bce_loss(y, y_hat):
    """Mean binary cross-entropy over all (instance, label) cells.

    Probabilities are clamped to [EPS, 1-EPS] before the logs. Tensor inputs
    return a differentiable tensor (this is the training loss); array-likes
    return a float.
    """
    tensor_inputs = torch.is_tensor(y) or torch.is_tensor(y_hat)
    dtype = torch.float32 if tensor_inputs else torch.float64
    yt = y.float() if torch.is_tensor(y) else torch.as_tensor(np.asarray(y), dtype=dtype)
    ph = y_hat if torch.is_tensor(y_hat) else torch.as_tensor(np.asarray(y_hat), dtype=dtype)
    if yt.shape != ph.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(yt.shape)} vs {tuple(ph.shape)}")
    ph = ph.clamp(EPS, 1.0 - EPS)
    loss = -(yt * ph.log() + (1.0 - yt) * (1.0 - ph).log()).mean()
    return loss if tensor_inputs else float(loss)


@dataclass(frozen=True)
class ModelConfig:
    """Encoder selection and feature knobs; persisted with the artifact."""

    encoder: str = "hashing"  # "hashing" or "hf:<model-id>"
    hash_dim: int = 4096
    hash_seed: int = 0
    feature_gain: float = 32.0


_TOKEN_RE = re.compile(r"[a-z0-9]+")


class HashingFeaturizer:
    """Token-hash count features, L2-normalized and scaled to a fixed gain.

    Normalization keeps the feature magnitude independent of document
    length so the classification head sees a stable input scale.
    """

    def __init__(self, dim: int, seed: int, gain: float):
        self.dim = dim
        self.seed = seed
        self.gain = gain

    def token_count(self, text: str) -> int:
        return len(_TOKEN_RE.findall(text.lower()))

    def features(self, text: str) -> np.ndarray:
        counts = np.zeros(self.dim, dtype=np.float32)
        for token in _TOKEN_RE.findall(text.lower()):
            digest = hashlib.blake2b(
                f"{self.seed}|{token}".encode(), digest_size=4
            ).digest()
            counts[int.from_bytes(digest, "little") % self.dim] += 1.0
        norm = float(np.linalg.norm(counts))
        if norm > 0:
            counts *= self.gain / norm
        return counts


class HashingClassifier(nn.Module):
    """Linear multi-label head over hashed features; head is zero-initialized
    so an untrained model scores every label exactly 0.5."""

    def __init__(self, config: ModelConfig, n_labels: int):
        super().__init__()
        self.config = config
        self.featurizer = HashingFeaturizer(
            dim=config.hash_dim, seed=config.hash_seed, gain=config.feature_gain
        )
        self.head = nn.Linear(config.hash_dim, n_labels)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def encode(self, texts: list[str]) -> torch.Tensor:
        return torch.from_numpy(
            np.stack([self.featurizer.features(t) for t in texts])
        )

    def forward(self, texts: list[str]) -> torch.Tensor:
        return torch.sigmoid(self.head(self.encode(texts)))

    def token_count(self, text: str) -> int:
        return self.featurizer.token_count(text)


class HfClassifier(nn.Module):
    """Pretrained transformer encoder with a mean-pooled linear head."""

    def __init__(self, config: ModelConfig, n_labels: int):
        super().__init__()
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise RuntimeError(
                "transformer encoders need the 'hf' extra installed"
            ) from exc
        model_id = config.encoder.split(":", 1)[1]
        self.config = config
        self.tokenizer = AutoTokenizer.from_pretrained(model_id)
        self.encoder = AutoModel.from_pretrained(model_id)
        self.head = nn.Linear(self.encoder.config.hidden_size, n_labels)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def token_count(self, text: str) -> int:
        return len(self.tokenizer(text)["input_ids"])

    def forward(self, texts: list[str]) -> torch.Tensor:
        batch = self.tokenizer(
            texts, padding=True, truncation=False, return_tensors="pt"
        )
        hidden = self.encoder(**batch).last_hidden_state
        mask = batch["attention_mask"].unsqueeze(-1).float()
        pooled = (hidden * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)
        return torch.sigmoid(self.head(pooled))


def build_model(config: ModelConfig, n_labels: int) -> nn.Module:
    if config.encoder == "hashing":
        return HashingClassifier(config, n_labels)
    if config.encoder.startswith("hf:"):
        return HfClassifier(config, n_labels)
    raise ValueError(f"unknown encoder: {config.encoder!r}")


class Classifier:
    """A trained model bound to its label space; the inference surface."""

    def __init__(self, model: nn.Module, label_space: tuple[str, ...],
                 config: ModelConfig):
        self._model = model
        self._model.eval()
        self.label_space = tuple(label_space)
        self.config = config

    def predict(self, basic_input_text: str) -> dict[str, float]:
        """Score every label for one basic-input text; scores in [0, 1]."""
        if not basic_input_text.strip():
            raise ValueError("basic input text must be non-empty")
        with torch.no_grad():
            scores = self._model([basic_input_text])[0]
        return {
            label: float(score)
            for label, score in zip(self.label_space, scores.tolist())
        }

    def save(self, directory: str | Path) -> None:
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        (path / "config.json").write_text(
            json.dumps(
                {"model": asdict(self.config), "label_space": list(self.label_space)},
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )
        torch.save(self._model.state_dict(), path / "weights.pt")

    @classmethod
    def load(cls, directory: str | Path) -> "Classifier":
        path = Path(directory)
        config_path = path / "config.json"
        weights_path = path / "weights.pt"
        if not config_path.exists() or not weights_path.exists():
            raise ModelNotLoaded(f"no model artifact at {directory}")
        payload = json.loads(config_path.read_text(encoding="utf-8"))
        config = ModelConfig(**payload["model"])
        label_space = tuple(payload["label_space"])
        model = build_model(config, len(label_space))
        model.load_state_dict(torch.load(weights_path, weights_only=True))
        return cls(model=model, label_space=label_space, config=config)
